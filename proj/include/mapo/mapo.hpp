#pragma once

#include "mapo/config.hpp"
#include "mapo/crw.hpp"
#include "mapo/difficulty.hpp"
#include "mapo/evaluate.hpp"
#include "mapo/grpo.hpp"
#include "mapo/metrics.hpp"
#include "mapo/modality.hpp"
#include "mapo/policy.hpp"
#include "mapo/rollout.hpp"
#include "mapo/schedule.hpp"
#include "mapo/stratified.hpp"
#include "mapo/task_env.hpp"
#include "mapo/trainer.hpp"
