// Copyright (c) 2026 The antkv Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Umbrella header.

#ifndef ANTKV_ANTKV_HPP
#define ANTKV_ANTKV_HPP

#include "antkv/anchor_score.hpp"
#include "antkv/attention.hpp"
#include "antkv/binary_io.hpp"
#include "antkv/centroid_learning.hpp"
#include "antkv/codebook_io.hpp"
#include "antkv/error.hpp"
#include "antkv/harness.hpp"
#include "antkv/kv_cache.hpp"
#include "antkv/matrix.hpp"
#include "antkv/rng.hpp"
#include "antkv/stats.hpp"
#include "antkv/tensor_file.hpp"
#include "antkv/vector_quant.hpp"

#endif  // ANTKV_ANTKV_HPP
