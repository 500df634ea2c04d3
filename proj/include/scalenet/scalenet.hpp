#pragma once

// Convenience header pulling in the whole library.

#include "scalenet/adjust.hpp"
#include "scalenet/analysis.hpp"
#include "scalenet/checkpoint.hpp"
#include "scalenet/config.hpp"
#include "scalenet/dataset.hpp"
#include "scalenet/errors.hpp"
#include "scalenet/expansion.hpp"
#include "scalenet/gradcheck.hpp"
#include "scalenet/hash.hpp"
#include "scalenet/mapping.hpp"
#include "scalenet/ops.hpp"
#include "scalenet/random.hpp"
#include "scalenet/report.hpp"
#include "scalenet/tensor.hpp"
#include "scalenet/training.hpp"
#include "scalenet/vit.hpp"
