// Copyright 2026 The s6mod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "s6mod/branch.hpp"
#include "s6mod/checkpoint.hpp"
#include "s6mod/config.hpp"
#include "s6mod/datasets.hpp"
#include "s6mod/errors.hpp"
#include "s6mod/experiment.hpp"
#include "s6mod/gradcheck.hpp"
#include "s6mod/harness.hpp"
#include "s6mod/metrics.hpp"
#include "s6mod/nn.hpp"
#include "s6mod/ops.hpp"
#include "s6mod/replay.hpp"
#include "s6mod/rng.hpp"
#include "s6mod/routing.hpp"
#include "s6mod/ssm_scan.hpp"
#include "s6mod/tensor.hpp"
