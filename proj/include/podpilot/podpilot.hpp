// Copyright 2025 The podpilot Authors
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

#pragma once

#include "podpilot/archive.hpp"
#include "podpilot/clock.hpp"
#include "podpilot/cluster.hpp"
#include "podpilot/engine.hpp"
#include "podpilot/error.hpp"
#include "podpilot/http_transport.hpp"
#include "podpilot/kube_client.hpp"
#include "podpilot/model.hpp"
#include "podpilot/monitor.hpp"
#include "podpilot/podspec.hpp"
#include "podpilot/scenario.hpp"
#include "podpilot/simcluster.hpp"
#include "podpilot/taskrepo.hpp"
#include "podpilot/taskrepo_http.hpp"
#include "podpilot/wrapper.hpp"
