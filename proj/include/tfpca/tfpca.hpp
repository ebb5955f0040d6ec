#pragma once

// Umbrella header for the library (the CLI layer is separate: tfpca/cli.hpp).

#include "tfpca/errors.hpp"
#include "tfpca/numeric/normal.hpp"
#include "tfpca/numeric/linalg.hpp"
#include "tfpca/numeric/random.hpp"
#include "tfpca/dataset.hpp"
#include "tfpca/mean_variance.hpp"
#include "tfpca/covariance.hpp"
#include "tfpca/scores.hpp"
#include "tfpca/gflm.hpp"
#include "tfpca/pace.hpp"
#include "tfpca/simulation.hpp"
#include "tfpca/io.hpp"
