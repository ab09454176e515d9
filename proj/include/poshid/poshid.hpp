#pragma once

// Umbrella header for the positional-hidden-state laboratory.

#include "poshid/common.hpp"
#include "poshid/forward.hpp"
#include "poshid/harness.hpp"
#include "poshid/model.hpp"
#include "poshid/numerics.hpp"
#include "poshid/planted.hpp"
#include "poshid/probe.hpp"
#include "poshid/rng.hpp"
#include "poshid/scaling.hpp"
#include "poshid/search.hpp"
#include "poshid/tasks.hpp"
#include "poshid/tokenizer.hpp"
