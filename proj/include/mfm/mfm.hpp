#pragma once

// Umbrella header.

#include "mfm/config.hpp"
#include "mfm/coupling.hpp"
#include "mfm/datasets.hpp"
#include "mfm/error.hpp"
#include "mfm/inference.hpp"
#include "mfm/interpolants.hpp"
#include "mfm/matching.hpp"
#include "mfm/metrics.hpp"
#include "mfm/nn/checkpoint.hpp"
#include "mfm/nn/mlp.hpp"
#include "mfm/nn/optim.hpp"
#include "mfm/nn/tape.hpp"
#include "mfm/oracle.hpp"
#include "mfm/pipeline.hpp"
#include "mfm/rng.hpp"
#include "mfm/training.hpp"
#include "mfm/types.hpp"
