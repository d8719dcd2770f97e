// Copyright 2026 The BindCal Authors
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

// The library is header-only. This translation unit only pulls every public
// header in, in reverse dependency order, so a header that forgets one of its
// own includes fails the build here rather than in a downstream project.

#include "bindcal/pipeline.hpp"
#include "bindcal/config.hpp"
#include "bindcal/eval.hpp"
#include "bindcal/train.hpp"
#include "bindcal/attacks.hpp"
#include "bindcal/losses.hpp"
#include "bindcal/model.hpp"
#include "bindcal/heads.hpp"
#include "bindcal/synthdata.hpp"
#include "bindcal/binio.hpp"
#include "bindcal/numkernel.hpp"
#include "bindcal/error.hpp"
