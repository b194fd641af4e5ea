#pragma once

#include "implicit_lqg/error.hpp"
#include "implicit_lqg/linalg.hpp"
#include "implicit_lqg/lqg_core.hpp"
#include "implicit_lqg/noiseless_capacity.hpp"
#include "implicit_lqg/estimation.hpp"
#include "implicit_lqg/lower_bound.hpp"
#include "implicit_lqg/channel_translation.hpp"
#include "implicit_lqg/rng.hpp"
#include "implicit_lqg/sim_harness.hpp"
