#pragma once

// Umbrella header: the full split meta-learning toolkit.

#include "msl/channel.hpp"
#include "msl/common.hpp"
#include "msl/config.hpp"
#include "msl/conformal.hpp"
#include "msl/csv.hpp"
#include "msl/data.hpp"
#include "msl/gradcheck.hpp"
#include "msl/harness.hpp"
#include "msl/meta.hpp"
#include "msl/metrics.hpp"
#include "msl/nn.hpp"
#include "msl/omniglot.hpp"
#include "msl/optim.hpp"
#include "msl/rng.hpp"
#include "msl/splitnet.hpp"
#include "msl/tensor.hpp"
#include "msl/transport.hpp"
