#pragma once

#include "cpmr/adam.hpp"
#include "cpmr/autodiff.hpp"
#include "cpmr/config.hpp"
#include "cpmr/data.hpp"
#include "cpmr/error.hpp"
#include "cpmr/evaluation.hpp"
#include "cpmr/experiments.hpp"
#include "cpmr/gradcheck.hpp"
#include "cpmr/gradsuite.hpp"
#include "cpmr/graph.hpp"
#include "cpmr/model.hpp"
#include "cpmr/parameters.hpp"
#include "cpmr/synthetic.hpp"
#include "cpmr/tensor.hpp"
#include "cpmr/training.hpp"
