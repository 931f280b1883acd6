/*
 * Copyright 2026 The mmfuse Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Umbrella header.

#pragma once

#include "mmfuse/core/autograd.hpp"
#include "mmfuse/core/error.hpp"
#include "mmfuse/core/io.hpp"
#include "mmfuse/core/nn.hpp"
#include "mmfuse/core/ops.hpp"
#include "mmfuse/core/random.hpp"
#include "mmfuse/core/tensor.hpp"
#include "mmfuse/encoders.hpp"
#include "mmfuse/evalmetrics.hpp"
#include "mmfuse/experiment.hpp"
#include "mmfuse/fusion.hpp"
#include "mmfuse/objectives.hpp"
#include "mmfuse/perturb.hpp"
#include "mmfuse/report.hpp"
#include "mmfuse/synthdata.hpp"
#include "mmfuse/training.hpp"
