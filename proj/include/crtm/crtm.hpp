#pragma once

#include "crtm/copula.hpp"
#include "crtm/core.hpp"
#include "crtm/estimators.hpp"
#include "crtm/glm.hpp"
#include "crtm/inference.hpp"
#include "crtm/integrate.hpp"
#include "crtm/io.hpp"
#include "crtm/learner.hpp"
#include "crtm/numeric.hpp"
#include "crtm/nuisance.hpp"
#include "crtm/sim.hpp"
