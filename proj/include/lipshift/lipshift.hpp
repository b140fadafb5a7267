#pragma once

#include "lipshift/attack.hpp"
#include "lipshift/autodiff.hpp"
#include "lipshift/certify.hpp"
#include "lipshift/checkpoint.hpp"
#include "lipshift/config.hpp"
#include "lipshift/data.hpp"
#include "lipshift/error.hpp"
#include "lipshift/layers.hpp"
#include "lipshift/model.hpp"
#include "lipshift/parallel.hpp"
#include "lipshift/random.hpp"
#include "lipshift/spectral.hpp"
#include "lipshift/tensor.hpp"
#include "lipshift/train.hpp"
