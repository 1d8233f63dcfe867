#pragma once

#include "trustlens/calibration.hpp"
#include "trustlens/card.hpp"
#include "trustlens/core.hpp"
#include "trustlens/error.hpp"
#include "trustlens/faithfulness.hpp"
#include "trustlens/io.hpp"
#include "trustlens/metrics.hpp"
#include "trustlens/rng.hpp"
#include "trustlens/saliency.hpp"
#include "trustlens/synthdet.hpp"
#include "trustlens/uncertainty.hpp"
