// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "deepj/cmd.hpp"
#include "deepj/corpus.hpp"
#include "deepj/error.hpp"
#include "deepj/gsl.hpp"
#include "deepj/head.hpp"
#include "deepj/interpret.hpp"
#include "deepj/manifest.hpp"
#include "deepj/mask.hpp"
#include "deepj/metrics.hpp"
#include "deepj/numerics.hpp"
#include "deepj/patient.hpp"
#include "deepj/train.hpp"
