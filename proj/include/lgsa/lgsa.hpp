// Umbrella header.
#pragma once

#include "lgsa/ablation.hpp"
#include "lgsa/blocks.hpp"
#include "lgsa/cli.hpp"
#include "lgsa/config.hpp"
#include "lgsa/data.hpp"
#include "lgsa/gradcheck.hpp"
#include "lgsa/losses.hpp"
#include "lgsa/metrics.hpp"
#include "lgsa/network.hpp"
#include "lgsa/ops.hpp"
#include "lgsa/optim.hpp"
#include "lgsa/params.hpp"
#include "lgsa/rng.hpp"
#include "lgsa/tensor.hpp"
#include "lgsa/training.hpp"
