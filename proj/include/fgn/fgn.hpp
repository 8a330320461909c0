// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "fgn/affine_head.hpp"
#include "fgn/dense_curvature.hpp"
#include "fgn/experiments.hpp"
#include "fgn/feature_cache.hpp"
#include "fgn/io.hpp"
#include "fgn/margin.hpp"
#include "fgn/optimizers.hpp"
#include "fgn/rowspace.hpp"
#include "fgn/verify.hpp"
