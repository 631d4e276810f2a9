#pragma once

#include "ccn/attention.hpp"
#include "ccn/autodiff.hpp"
#include "ccn/checkpoint.hpp"
#include "ccn/contrastive.hpp"
#include "ccn/error.hpp"
#include "ccn/features.hpp"
#include "ccn/gradcheck.hpp"
#include "ccn/metrics.hpp"
#include "ccn/mlp.hpp"
#include "ccn/model.hpp"
#include "ccn/objective.hpp"
#include "ccn/optimizer.hpp"
#include "ccn/synth.hpp"
#include "ccn/tensor.hpp"
#include "ccn/train.hpp"
