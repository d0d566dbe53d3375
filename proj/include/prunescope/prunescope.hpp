#pragma once

// Convenience umbrella: pulls in the whole library.

#include "prunescope/divergence.hpp"
#include "prunescope/errors.hpp"
#include "prunescope/harness.hpp"
#include "prunescope/latent.hpp"
#include "prunescope/micronet.hpp"
#include "prunescope/numkernel.hpp"
#include "prunescope/patterns.hpp"
#include "prunescope/pruning.hpp"
#include "prunescope/wtns.hpp"
