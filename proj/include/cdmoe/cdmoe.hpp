// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header: pulls in the whole toolkit.
#pragma once

#include "cdmoe/checkpoint.hpp"
#include "cdmoe/condense.hpp"
#include "cdmoe/data.hpp"
#include "cdmoe/error.hpp"
#include "cdmoe/metrics.hpp"
#include "cdmoe/model.hpp"
#include "cdmoe/params.hpp"
#include "cdmoe/pipeline.hpp"
#include "cdmoe/rng.hpp"
#include "cdmoe/selection.hpp"
#include "cdmoe/tensor.hpp"
#include "cdmoe/training.hpp"
