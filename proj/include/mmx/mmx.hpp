#pragma once

#include "mmx/binary_io.hpp"
#include "mmx/checkpoint.hpp"
#include "mmx/config.hpp"
#include "mmx/dataset.hpp"
#include "mmx/encoder.hpp"
#include "mmx/errors.hpp"
#include "mmx/eval.hpp"
#include "mmx/frozen.hpp"
#include "mmx/geometry.hpp"
#include "mmx/gradcheck.hpp"
#include "mmx/linalg.hpp"
#include "mmx/losses.hpp"
#include "mmx/mixing.hpp"
#include "mmx/objective.hpp"
#include "mmx/optim.hpp"
#include "mmx/parallel.hpp"
#include "mmx/rng.hpp"
#include "mmx/trainer.hpp"
