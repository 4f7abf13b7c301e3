#pragma once

#include "m4fuse/autodiff.hpp"
#include "m4fuse/bench.hpp"
#include "m4fuse/bridge.hpp"
#include "m4fuse/config.hpp"
#include "m4fuse/errors.hpp"
#include "m4fuse/experts.hpp"
#include "m4fuse/gradcheck.hpp"
#include "m4fuse/io.hpp"
#include "m4fuse/loss.hpp"
#include "m4fuse/metrics.hpp"
#include "m4fuse/mixer.hpp"
#include "m4fuse/network.hpp"
#include "m4fuse/nn.hpp"
#include "m4fuse/ops.hpp"
#include "m4fuse/optim.hpp"
#include "m4fuse/parallel.hpp"
#include "m4fuse/synthetic.hpp"
#include "m4fuse/tensor.hpp"
#include "m4fuse/train.hpp"
