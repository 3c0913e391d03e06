// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "deepj/numerics/adam.hpp"
#include "deepj/numerics/gradcheck.hpp"
#include "deepj/numerics/loss.hpp"
#include "deepj/numerics/ops.hpp"
#include "deepj/numerics/tensor.hpp"
