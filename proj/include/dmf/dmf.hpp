// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.
#pragma once

#include "dmf/attention.hpp"
#include "dmf/blocks.hpp"
#include "dmf/checkpoint.hpp"
#include "dmf/config.hpp"
#include "dmf/data.hpp"
#include "dmf/dyres_conv.hpp"
#include "dmf/error.hpp"
#include "dmf/flops.hpp"
#include "dmf/gradcheck.hpp"
#include "dmf/init.hpp"
#include "dmf/kernels.hpp"
#include "dmf/model.hpp"
#include "dmf/ops.hpp"
#include "dmf/optim.hpp"
#include "dmf/tensor.hpp"
#include "dmf/train.hpp"
