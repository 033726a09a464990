#pragma once

#include "excount/error.hpp"
#include "excount/geometry.hpp"
#include "excount/image.hpp"
#include "excount/density.hpp"
#include "excount/losses.hpp"
#include "excount/scene.hpp"
#include "excount/detector.hpp"
#include "excount/dataset.hpp"
#include "excount/nn.hpp"
#include "excount/counter.hpp"
#include "excount/filter.hpp"
#include "excount/parallel.hpp"
#include "excount/exemplars.hpp"
#include "excount/training.hpp"
#include "excount/overlay.hpp"
