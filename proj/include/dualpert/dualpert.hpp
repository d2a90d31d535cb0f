#pragma once

#include "dualpert/tensor.hpp"
#include "dualpert/autodiff.hpp"
#include "dualpert/format.hpp"
#include "dualpert/model.hpp"
#include "dualpert/mask.hpp"
#include "dualpert/data.hpp"
#include "dualpert/salience.hpp"
#include "dualpert/attack.hpp"
#include "dualpert/defense.hpp"
#include "dualpert/eval.hpp"
