// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "bmc/attention.hpp"
#include "bmc/bench.hpp"
#include "bmc/cost_model.hpp"
#include "bmc/decode_sim.hpp"
#include "bmc/dims.hpp"
#include "bmc/errors.hpp"
#include "bmc/kv_cache.hpp"
#include "bmc/ledger.hpp"
#include "bmc/report.hpp"
#include "bmc/spec_decode.hpp"
#include "bmc/toy_model.hpp"
