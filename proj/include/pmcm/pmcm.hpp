#pragma once

#include "pmcm/autodiff.hpp"
#include "pmcm/data.hpp"
#include "pmcm/experiment.hpp"
#include "pmcm/federation.hpp"
#include "pmcm/losses.hpp"
#include "pmcm/matching.hpp"
#include "pmcm/model.hpp"
#include "pmcm/optim.hpp"
#include "pmcm/parallel.hpp"
#include "pmcm/prototypes.hpp"
#include "pmcm/rng.hpp"
#include "pmcm/serialize.hpp"
#include "pmcm/tensor.hpp"
#include "pmcm/training.hpp"
