#pragma once

// Toy decoder-only transformer whose only job is the prefill pass: it records
// per-head causal attention maps and can stop after any layer.
//
// Block order is pre-norm: x += Attn(RMS(x) * g1); x += FFN(RMS(x) * g2).
// Positions use a learned absolute embedding table. There is no output head;
// nothing in this library ever decodes.

#include <bit>
#include <cmath>
#include <compare>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "headrank/autodiff.hpp"
#include "headrank/errors.hpp"
#include "headrank/io.hpp"
#include "headrank/matrix.hpp"
#include "headrank/tokenizer.hpp"

namespace headrank {

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t d_ff = 128;
  std::size_t vocab_size = Tokenizer::standard().vocab_size();
  std::size_t max_seq_len = 256;
  std::uint64_t seed = 42;

  std::size_t d_head() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0 || max_seq_len == 0) {
      throw ConfigError("model dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("d_model=" + std::to_string(d_model) + " is not divisible by n_heads=" +
                        std::to_string(n_heads));
    }
    if (vocab_size < Tokenizer::standard().vocab_size()) {
      throw ConfigError("vocab_size=" + std::to_string(vocab_size) + " is smaller than the tokenizer alphabet (" +
                        std::to_string(Tokenizer::standard().vocab_size()) + ")");
    }
  }

  std::size_t total_heads() const { return n_layers * n_heads; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// (layer, head); layer is 1-based so that the deepest selected layer is also the
// number of layers a truncated prefill must run. head is 0-based.
struct HeadId {
  std::size_t layer = 1;
  std::size_t head = 0;
  friend auto operator<=>(const HeadId&, const HeadId&) = default;
  std::string label() const { return "L" + std::to_string(layer) + "-H" + std::to_string(head); }
};

class TransformerParams {
 public:
  static constexpr std::size_t kPerLayer = 8;
  enum Slot : std::size_t { norm_attn = 0, wq, wk, wv, wo, norm_ffn, w_in, w_out };

  TransformerParams() = default;
  TransformerParams(ModelConfig config, std::vector<Matrix> tensors) : config_(config), tensors_(std::move(tensors)) {
    config_.validate();
    if (tensors_.size() != tensor_count(config_)) {
      throw ShapeError("expected " + std::to_string(tensor_count(config_)) + " tensors, got " +
                       std::to_string(tensors_.size()));
    }
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      const auto [r, c] = expected_shape(config_, i);
      if (tensors_[i].rows() != r || tensors_[i].cols() != c) {
        throw ShapeError("tensor " + tensor_name(config_, i) + " has shape " + tensors_[i].shape() + ", expected " +
                         Matrix::shape_string(r, c));
      }
      if (!tensors_[i].all_finite()) throw NumericError("tensor " + tensor_name(config_, i) + " is not finite");
    }
  }

  const ModelConfig& config() const noexcept { return config_; }
  std::span<const Matrix> tensors() const noexcept { return tensors_; }
  std::span<Matrix> tensors() noexcept { return tensors_; }
  const Matrix& tensor(std::size_t i) const { return tensors_.at(i); }

  static std::size_t tensor_count(const ModelConfig& c) { return 2 + kPerLayer * c.n_layers; }
  static std::size_t index(std::size_t layer0, Slot slot) { return 2 + kPerLayer * layer0 + slot; }

  static std::pair<std::size_t, std::size_t> expected_shape(const ModelConfig& c, std::size_t i) {
    if (i == 0) return {c.vocab_size, c.d_model};
    if (i == 1) return {c.max_seq_len, c.d_model};
    switch ((i - 2) % kPerLayer) {
      case norm_attn:
      case norm_ffn: return {1, c.d_model};
      case w_in: return {c.d_model, c.d_ff};
      case w_out: return {c.d_ff, c.d_model};
      default: return {c.d_model, c.d_model};
    }
  }

  static std::string tensor_name(const ModelConfig& c, std::size_t i) {
    (void)c;
    if (i == 0) return "tok_embedding";
    if (i == 1) return "pos_embedding";
    static constexpr const char* kSlots[] = {"norm_attn", "wq", "wk", "wv", "wo", "norm_ffn", "w_in", "w_out"};
    return "layer" + std::to_string((i - 2) / kPerLayer + 1) + "." + kSlots[(i - 2) % kPerLayer];
  }

  static std::size_t parameter_count(const ModelConfig& c) {
    return c.vocab_size * c.d_model + c.max_seq_len * c.d_model +
           c.n_layers * (2 * c.d_model + 4 * c.d_model * c.d_model + 2 * c.d_model * c.d_ff);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Matrix& m : tensors_) n += m.size();
    return n;
  }

  friend bool operator==(const TransformerParams& a, const TransformerParams& b) {
    return a.config_ == b.config_ && a.tensors_ == b.tensors_;
  }

 private:
  ModelConfig config_;
  std::vector<Matrix> tensors_;
};

// Deterministic initialization: N(0, 1) token embeddings, N(0, 0.2^2) positions,
// N(0, 1/d_model) projections, unit norm scales.
inline TransformerParams init_params(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Matrix> tensors;
  const std::size_t n = TransformerParams::tensor_count(config);
  tensors.reserve(n);
  const double proj_scale = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  for (std::size_t i = 0; i < n; ++i) {
    const auto [r, c] = TransformerParams::expected_shape(config, i);
    Matrix m(r, c);
    if (i == 0) {
      for (double& v : m.data()) v = normal(rng);
    } else if (i == 1) {
      for (double& v : m.data()) v = 0.2 * normal(rng);
    } else {
      const auto slot = (i - 2) % TransformerParams::kPerLayer;
      if (slot == TransformerParams::norm_attn || slot == TransformerParams::norm_ffn) {
        m.fill(1.0);
      } else {
        for (double& v : m.data()) v = proj_scale * normal(rng);
      }
    }
    tensors.push_back(std::move(m));
  }
  return TransformerParams(config, std::move(tensors));
}

// Parameters placed on a tape as leaves.
class BoundModel {
 public:
  BoundModel(ad::Tape& tape, const TransformerParams& params) : config_(params.config()) {
    vars_.reserve(params.tensors().size());
    for (const Matrix& m : params.tensors()) vars_.push_back(tape.leaf(m));
  }
  BoundModel(const ModelConfig& config, std::vector<ad::Var> vars) : config_(config), vars_(std::move(vars)) {
    if (vars_.size() != TransformerParams::tensor_count(config_)) throw ShapeError("bound model: wrong tensor count");
  }

  const ModelConfig& config() const noexcept { return config_; }
  const ad::Var& operator[](std::size_t i) const { return vars_.at(i); }
  std::span<const ad::Var> vars() const noexcept { return vars_; }

 private:
  ModelConfig config_;
  std::vector<ad::Var> vars_;
};

// Attention maps A[i][j] for recorded heads.
struct AttentionTrace {
  std::size_t recorded_depth = 0;
  std::size_t seq_len = 0;
  std::map<HeadId, Matrix> maps;

  const Matrix& at(const HeadId& h) const {
    auto it = maps.find(h);
    if (it == maps.end()) throw Error("trace", "attention map for " + h.label() + " was not recorded");
    return it->second;
  }
  bool contains(const HeadId& h) const { return maps.contains(h); }
};

// Graph nodes of the same maps, for building losses.
struct PrefillGraph {
  std::map<HeadId, ad::Var> maps;
  const ad::Var& at(const HeadId& h) const {
    auto it = maps.find(h);
    if (it == maps.end()) throw Error("trace", "attention node for " + h.label() + " is absent");
    return it->second;
  }
};

struct Prefill {
  AttentionTrace trace;
  PrefillGraph graph;
};

// Runs layers 1..depth_limit. Only the attention sublayer of the last layer is
// evaluated, since its feed-forward output cannot influence any recorded map.
// `keep` restricts which maps are copied into the trace (all when null). Heads
// of the last layer outside `keep` are not computed at all, and neither are
// that layer's values.
inline Prefill prefill(ad::Tape& /*tape*/, const BoundModel& model, std::span<const TokenId> tokens,
                       std::size_t depth_limit, const std::set<HeadId>* keep = nullptr) {
  const ModelConfig& cfg = model.config();
  if (depth_limit < 1 || depth_limit > cfg.n_layers) {
    throw ConfigError("depth_limit " + std::to_string(depth_limit) + " outside [1, " + std::to_string(cfg.n_layers) +
                      "]");
  }
  const std::size_t seq = tokens.size();
  if (seq == 0) throw ConfigError("prefill: empty token sequence");
  if (seq > cfg.max_seq_len) {
    throw ConfigError("sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  }
  std::vector<std::size_t> ids(tokens.begin(), tokens.end());
  for (std::size_t id : ids) {
    if (id >= cfg.vocab_size) throw ConfigError("token id " + std::to_string(id) + " outside vocabulary");
  }
  std::vector<std::size_t> positions(seq);
  for (std::size_t i = 0; i < seq; ++i) positions[i] = i;

  ad::Var x = ad::add(ad::gather_rows(model[0], std::move(ids)), ad::gather_rows(model[1], std::move(positions)));
  const auto mask = ad::causal_mask(seq);
  const std::size_t dh = cfg.d_head();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Prefill out;
  out.trace.recorded_depth = depth_limit;
  out.trace.seq_len = seq;
  using P = TransformerParams;
  for (std::size_t l = 0; l < depth_limit; ++l) {
    const bool last = l + 1 == depth_limit;
    const ad::Var h = ad::mul_row(ad::rms_norm(x), model[P::index(l, P::norm_attn)]);
    const ad::Var q = ad::matmul(h, model[P::index(l, P::wq)]);
    const ad::Var k = ad::matmul(h, model[P::index(l, P::wk)]);
    ad::Var v;
    if (!last) v = ad::matmul(h, model[P::index(l, P::wv)]);
    std::vector<ad::Var> heads;
    heads.reserve(cfg.n_heads);
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
      const HeadId id{l + 1, hd};
      const bool kept = keep == nullptr || keep->contains(id);
      if (last && !kept) continue;
      const ad::Var qh = ad::slice_cols(q, hd * dh, dh);
      const ad::Var kh = ad::slice_cols(k, hd * dh, dh);
      const ad::Var attn = ad::masked_softmax(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt_dh), mask);
      out.graph.maps.emplace(id, attn);
      if (kept) out.trace.maps.emplace(id, attn.value());
      if (!last) heads.push_back(ad::matmul(attn, ad::slice_cols(v, hd * dh, dh)));
    }
    if (last) break;
    x = ad::add(x, ad::matmul(ad::concat_cols(heads), model[P::index(l, P::wo)]));
    const ad::Var h2 = ad::mul_row(ad::rms_norm(x), model[P::index(l, P::norm_ffn)]);
    const ad::Var ff = ad::matmul(ad::gelu(ad::matmul(h2, model[P::index(l, P::w_in)])), model[P::index(l, P::w_out)]);
    x = ad::add(x, ff);
  }
  return out;
}

// Value-only prefill on a throwaway non-recording tape.
inline AttentionTrace prefill_trace(const TransformerParams& params, std::span<const TokenId> tokens,
                                    std::size_t depth_limit, const std::set<HeadId>* keep = nullptr) {
  ad::Tape tape(false);
  const BoundModel model(tape, params);
  return prefill(tape, model, tokens, depth_limit, keep).trace;
}

// ---------------------------------------------------------------------------
// Checkpoint container (little-endian):
//   "HRCKPT\0\0" | u32 version | u64 n_layers n_heads d_model d_ff vocab max_seq | u64 seed
//   | u64 tensor_count | per tensor: u32 name_len, name, u64 rows, u64 cols, f64[rows*cols]

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw ParseError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};
}  // namespace detail

inline std::string serialize_checkpoint(const TransformerParams& params) {
  const ModelConfig& c = params.config();
  std::string out("HRCKPT\0\0", 8);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  for (std::size_t v : {c.n_layers, c.n_heads, c.d_model, c.d_ff, c.vocab_size, c.max_seq_len}) {
    detail::put<std::uint64_t>(out, v);
  }
  detail::put<std::uint64_t>(out, c.seed);
  detail::put<std::uint64_t>(out, params.tensors().size());
  for (std::size_t i = 0; i < params.tensors().size(); ++i) {
    const std::string name = TransformerParams::tensor_name(c, i);
    const Matrix& m = params.tensor(i);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put<std::uint64_t>(out, m.rows());
    detail::put<std::uint64_t>(out, m.cols());
    const auto d = m.data();
    out.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
  }
  return out;
}

inline TransformerParams deserialize_checkpoint(std::string_view bytes) {
  detail::Reader r(bytes);
  if (r.take(8) != std::string_view("HRCKPT\0\0", 8)) throw ParseError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig c;
  c.n_layers = r.get<std::uint64_t>();
  c.n_heads = r.get<std::uint64_t>();
  c.d_model = r.get<std::uint64_t>();
  c.d_ff = r.get<std::uint64_t>();
  c.vocab_size = r.get<std::uint64_t>();
  c.max_seq_len = r.get<std::uint64_t>();
  c.seed = r.get<std::uint64_t>();
  c.validate();
  const auto count = r.get<std::uint64_t>();
  if (count != TransformerParams::tensor_count(c)) throw ParseError("checkpoint tensor count mismatch");
  std::vector<Matrix> tensors;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    const std::string name(r.take(name_len));
    if (name != TransformerParams::tensor_name(c, i)) {
      throw ParseError("checkpoint tensor " + std::to_string(i) + " named '" + name + "', expected '" +
                       TransformerParams::tensor_name(c, i) + "'");
    }
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    std::vector<double> data(rows * cols);
    const auto raw = r.take(data.size() * sizeof(double));
    std::memcpy(data.data(), raw.data(), raw.size());
    tensors.emplace_back(rows, cols, std::move(data));
  }
  if (!r.done()) throw ParseError("trailing bytes after checkpoint");
  return TransformerParams(c, std::move(tensors));
}

inline void save_checkpoint(const std::filesystem::path& path, const TransformerParams& params) {
  io::write_file(path, serialize_checkpoint(params));
}

inline TransformerParams load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(io::read_file(path));
}

}  // namespace headrank
