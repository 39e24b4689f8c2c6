#pragma once

#include "headrank/autodiff.hpp"
#include "headrank/config.hpp"
#include "headrank/data.hpp"
#include "headrank/errors.hpp"
#include "headrank/head_selection.hpp"
#include "headrank/io.hpp"
#include "headrank/matrix.hpp"
#include "headrank/metrics.hpp"
#include "headrank/reports.hpp"
#include "headrank/rerank.hpp"
#include "headrank/scoring.hpp"
#include "headrank/tokenizer.hpp"
#include "headrank/training.hpp"
#include "headrank/transformer.hpp"
#include "headrank/zones.hpp"
