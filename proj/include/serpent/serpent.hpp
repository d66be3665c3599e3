#pragma once

#include "serpent/attention.hpp"
#include "serpent/checkpoint.hpp"
#include "serpent/config.hpp"
#include "serpent/dsconv.hpp"
#include "serpent/encoders.hpp"
#include "serpent/error.hpp"
#include "serpent/gradcheck.hpp"
#include "serpent/gradcheck_suite.hpp"
#include "serpent/image.hpp"
#include "serpent/layers.hpp"
#include "serpent/metrics.hpp"
#include "serpent/model.hpp"
#include "serpent/ops.hpp"
#include "serpent/optim.hpp"
#include "serpent/params.hpp"
#include "serpent/rng.hpp"
#include "serpent/synthetic.hpp"
#include "serpent/tensor.hpp"
#include "serpent/train.hpp"
