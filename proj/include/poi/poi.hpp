#pragma once

#include "poi/tensor.hpp"
#include "poi/tape.hpp"
#include "poi/ops.hpp"
#include "poi/gradcheck.hpp"
#include "poi/optim.hpp"
#include "poi/prior.hpp"
#include "poi/config.hpp"
#include "poi/losses.hpp"
#include "poi/model.hpp"
#include "poi/objective.hpp"
#include "poi/dataset.hpp"
#include "poi/train.hpp"
#include "poi/evaluate.hpp"
#include "poi/checkpoint.hpp"
#include "poi/run.hpp"
