#pragma once

#include "modgate/analysis.hpp"
#include "modgate/distcore.hpp"
#include "modgate/distill.hpp"
#include "modgate/experts.hpp"
#include "modgate/fixedopt.hpp"
#include "modgate/gamesolver.hpp"
#include "modgate/gates.hpp"
#include "modgate/instances.hpp"
#include "modgate/sampler.hpp"
