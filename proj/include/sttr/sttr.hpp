#pragma once

#include "sttr/adam.hpp"
#include "sttr/app.hpp"
#include "sttr/checkpoint.hpp"
#include "sttr/cnn_decoder.hpp"
#include "sttr/config.hpp"
#include "sttr/error.hpp"
#include "sttr/feature_model.hpp"
#include "sttr/grad_check.hpp"
#include "sttr/image.hpp"
#include "sttr/loss.hpp"
#include "sttr/model.hpp"
#include "sttr/nn.hpp"
#include "sttr/ops.hpp"
#include "sttr/rng.hpp"
#include "sttr/tensor.hpp"
#include "sttr/trainer.hpp"
#include "sttr/transformer.hpp"
