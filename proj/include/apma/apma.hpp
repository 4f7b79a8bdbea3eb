// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#ifndef APMA_APMA_HPP
#define APMA_APMA_HPP

#include "apma/autodiff.hpp"
#include "apma/budget.hpp"
#include "apma/config.hpp"
#include "apma/dataset.hpp"
#include "apma/errors.hpp"
#include "apma/indicator_init.hpp"
#include "apma/io.hpp"
#include "apma/linalg.hpp"
#include "apma/log.hpp"
#include "apma/model.hpp"
#include "apma/ops.hpp"
#include "apma/optim.hpp"
#include "apma/pipeline.hpp"
#include "apma/pruning.hpp"
#include "apma/reconfigure.hpp"
#include "apma/reweight.hpp"
#include "apma/tensor.hpp"

#endif  // APMA_APMA_HPP
