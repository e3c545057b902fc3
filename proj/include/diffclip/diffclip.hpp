#pragma once

#include "diffclip/attention.hpp"
#include "diffclip/attention_map.hpp"
#include "diffclip/audit.hpp"
#include "diffclip/autodiff.hpp"
#include "diffclip/config.hpp"
#include "diffclip/data_synth.hpp"
#include "diffclip/encoders.hpp"
#include "diffclip/errors.hpp"
#include "diffclip/eval.hpp"
#include "diffclip/kv.hpp"
#include "diffclip/objective.hpp"
#include "diffclip/ops.hpp"
#include "diffclip/optim.hpp"
#include "diffclip/random.hpp"
#include "diffclip/tensor.hpp"
#include "diffclip/tokens.hpp"
#include "diffclip/train.hpp"
