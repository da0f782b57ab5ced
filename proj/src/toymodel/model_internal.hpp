#pragma once

#include <vector>

#include "less/autodiff.hpp"
#include "less/toymodel.hpp"

namespace less::detail {

struct LayerVars {
  ad::Var wq, wk, wv, wo, ln1, ln2, w1, w2;
};

struct ModelVars {
  ad::Var emb;
  std::vector<LayerVars> layers;
};

struct LayerOutputs {
  ad::Var q, k, v, o;
};

struct TapeForward {
  ad::Var logits;
  std::vector<LayerOutputs> layers;
};

ModelVars bind(ad::Tape& t, const ToyModel& m, bool trainable);

// `tokens` holds tokens.size()/seq_len sequences back to back.
TapeForward run_forward(ad::Tape& t, const ModelVars& mv, const ToyModel& m, const std::vector<std::size_t>& tokens,
                        std::size_t seq_len);

}  // namespace less::detail
