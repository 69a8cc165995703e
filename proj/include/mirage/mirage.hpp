#pragma once

#include "mirage/attribution.hpp"
#include "mirage/brain_encoder.hpp"
#include "mirage/config.hpp"
#include "mirage/core.hpp"
#include "mirage/ensembler.hpp"
#include "mirage/evaluator.hpp"
#include "mirage/feature_store.hpp"
#include "mirage/half.hpp"
#include "mirage/layer_gating.hpp"
#include "mirage/nn.hpp"
#include "mirage/report.hpp"
#include "mirage/ridge_baseline.hpp"
#include "mirage/scoring.hpp"
#include "mirage/trainer.hpp"
