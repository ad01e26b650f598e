#pragma once

// Umbrella header: the whole library in dependency order.

#include "ntklab/errors.hpp"
#include "ntklab/rng.hpp"
#include "ntklab/matrix.hpp"
#include "ntklab/linalg.hpp"
#include "ntklab/parallel.hpp"
#include "ntklab/network.hpp"
#include "ntklab/io.hpp"
#include "ntklab/ntk.hpp"
#include "ntklab/dataset.hpp"
#include "ntklab/losses.hpp"
#include "ntklab/genloss.hpp"
#include "ntklab/trainer.hpp"
