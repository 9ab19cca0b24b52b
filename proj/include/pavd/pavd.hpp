#pragma once

// Everything in one include.

#include "pavd/control/nmpc.hpp"
#include "pavd/control/pure_pursuit.hpp"
#include "pavd/dynamics.hpp"
#include "pavd/estimator/checkpoint.hpp"
#include "pavd/estimator/estimator.hpp"
#include "pavd/evaluation.hpp"
#include "pavd/generator.hpp"
#include "pavd/param_guard.hpp"
#include "pavd/params_io.hpp"
#include "pavd/raceloop.hpp"
#include "pavd/telemetry.hpp"
#include "pavd/track.hpp"
