#pragma once

#include "seldde/accddoa_codec.hpp"
#include "seldde/adpit_loss.hpp"
#include "seldde/augment.hpp"
#include "seldde/checkpoint.hpp"
#include "seldde/error.hpp"
#include "seldde/io_dataset.hpp"
#include "seldde/metrics.hpp"
#include "seldde/model.hpp"
#include "seldde/optim.hpp"
#include "seldde/pipeline.hpp"
#include "seldde/salsa_features.hpp"
#include "seldde/scene_synth.hpp"
#include "seldde/tensor.hpp"
#include "seldde/wav.hpp"
