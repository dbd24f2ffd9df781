#pragma once

// Everything except the CLI and HTTP layers, which pull in extra libraries.

#include "eiglab/autodiff.hpp"
#include "eiglab/bad_loop.hpp"
#include "eiglab/bounds.hpp"
#include "eiglab/core.hpp"
#include "eiglab/design_opt.hpp"
#include "eiglab/errors.hpp"
#include "eiglab/estimators.hpp"
#include "eiglab/math.hpp"
#include "eiglab/models.hpp"
#include "eiglab/nn.hpp"
#include "eiglab/parallel.hpp"
#include "eiglab/policy.hpp"
#include "eiglab/proposals.hpp"
#include "eiglab/rng.hpp"
