#pragma once

#include "rded/core.hpp"
#include "rded/smoothing.hpp"
#include "rded/solver.hpp"
#include "rded/regression.hpp"
#include "rded/pipeline.hpp"
#include "rded/evaluation.hpp"
#include "rded/io.hpp"
