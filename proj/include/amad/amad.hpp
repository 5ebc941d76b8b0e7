#pragma once

#include "amad/checkpoint.hpp"
#include "amad/data.hpp"
#include "amad/harness.hpp"
#include "amad/model.hpp"
#include "amad/ops.hpp"
#include "amad/scoring.hpp"
#include "amad/tensor.hpp"
#include "amad/training.hpp"
