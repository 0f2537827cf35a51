#pragma once

#include "flmgrow/autograd.hpp"
#include "flmgrow/checkpoint.hpp"
#include "flmgrow/config.hpp"
#include "flmgrow/data.hpp"
#include "flmgrow/error.hpp"
#include "flmgrow/growth.hpp"
#include "flmgrow/kernels.hpp"
#include "flmgrow/mask.hpp"
#include "flmgrow/model.hpp"
#include "flmgrow/parallel.hpp"
#include "flmgrow/plan.hpp"
#include "flmgrow/presets.hpp"
#include "flmgrow/report.hpp"
#include "flmgrow/rng.hpp"
#include "flmgrow/schedule.hpp"
#include "flmgrow/tensor.hpp"
#include "flmgrow/trainer.hpp"
