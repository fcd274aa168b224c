#pragma once

// Umbrella header.

#include "conjflow/checkpoint.hpp"
#include "conjflow/config.hpp"
#include "conjflow/conjugation.hpp"
#include "conjflow/contrastive.hpp"
#include "conjflow/evalkit.hpp"
#include "conjflow/hierarchy.hpp"
#include "conjflow/image_io.hpp"
#include "conjflow/nn.hpp"
#include "conjflow/optim.hpp"
#include "conjflow/random.hpp"
#include "conjflow/stream.hpp"
#include "conjflow/tensor.hpp"
#include "conjflow/trainer.hpp"
#include "conjflow/warp.hpp"
