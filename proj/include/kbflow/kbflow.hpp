#pragma once

#include "kbflow/matrix_core.hpp"
#include "kbflow/signal_model.hpp"
#include "kbflow/gramian.hpp"
#include "kbflow/riccati.hpp"
#include "kbflow/semigroup.hpp"
#include "kbflow/rng.hpp"
#include "kbflow/stochastic.hpp"
#include "kbflow/scenario.hpp"
#include "kbflow/pipeline.hpp"
