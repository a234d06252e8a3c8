#pragma once

// Umbrella header.

#include "rateconv/error.hpp"
#include "rateconv/evalharness.hpp"
#include "rateconv/linecatch.hpp"
#include "rateconv/modelio.hpp"
#include "rateconv/netcore.hpp"
#include "rateconv/normalize.hpp"
#include "rateconv/parallel.hpp"
#include "rateconv/snnsim.hpp"
#include "rateconv/tensor.hpp"
