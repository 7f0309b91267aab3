// Copyright 2026 The drtab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "drtab/csv.hpp"
#include "drtab/data.hpp"
#include "drtab/ensemble.hpp"
#include "drtab/error.hpp"
#include "drtab/eval.hpp"
#include "drtab/model.hpp"
#include "drtab/ndcore.hpp"
#include "drtab/pipeline.hpp"
#include "drtab/robust.hpp"
