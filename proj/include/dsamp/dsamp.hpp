#pragma once

#include "dsamp/config.hpp"
#include "dsamp/energies.hpp"
#include "dsamp/grad/checkpoint.hpp"
#include "dsamp/grad/finite_diff.hpp"
#include "dsamp/grad/optim.hpp"
#include "dsamp/grad/param_store.hpp"
#include "dsamp/grad/tensor.hpp"
#include "dsamp/kernels.hpp"
#include "dsamp/metrics.hpp"
#include "dsamp/objectives.hpp"
#include "dsamp/policy_net.hpp"
#include "dsamp/replay.hpp"
#include "dsamp/report.hpp"
#include "dsamp/rng.hpp"
#include "dsamp/schedule.hpp"
#include "dsamp/soft_rl.hpp"
#include "dsamp/trainer.hpp"
