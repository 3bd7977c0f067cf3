#pragma once

// Umbrella header for the whole library.

#include "gtr/common.hpp"
#include "gtr/table.hpp"
#include "gtr/graph.hpp"
#include "gtr/tensor.hpp"
#include "gtr/params.hpp"
#include "gtr/embedding.hpp"
#include "gtr/encoder.hpp"
#include "gtr/matcher.hpp"
#include "gtr/model.hpp"
#include "gtr/training.hpp"
#include "gtr/bm25.hpp"
#include "gtr/metrics.hpp"
#include "gtr/run_io.hpp"
#include "gtr/cli.hpp"
