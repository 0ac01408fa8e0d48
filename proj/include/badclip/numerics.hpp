// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "badclip/numerics/adam.hpp"
#include "badclip/numerics/conv.hpp"
#include "badclip/numerics/gradcheck.hpp"
#include "badclip/numerics/ops.hpp"
#include "badclip/numerics/random.hpp"
#include "badclip/numerics/sgd.hpp"
#include "badclip/numerics/tensor.hpp"
