#pragma once

#include "mcpo/core.hpp"
#include "mcpo/env.hpp"
#include "mcpo/eval.hpp"
#include "mcpo/losses.hpp"
#include "mcpo/partition.hpp"
#include "mcpo/policy.hpp"
#include "mcpo/samplers.hpp"
#include "mcpo/training.hpp"
