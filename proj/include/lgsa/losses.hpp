// Compound Dice + BCE supervision over both stages and all three slices.
#pragma once

#include <array>
#include <stdexcept>
#include <vector>

#include "lgsa/network.hpp"
#include "lgsa/ops.hpp"

namespace lgsa {

struct LossWeights {
  double alpha = 0.33;  // each adjacent slice; the center gets 1 - 2*alpha
  double beta = 0.5;    // coarse stage; the fine stage gets 1 - beta
  double bce_weight = 0.5;
  double dice_smooth = 1.0;

  void validate() const {
    if (!(alpha >= 0 && alpha <= 0.5)) throw std::invalid_argument("alpha must lie in [0, 0.5]");
    if (!(beta >= 0 && beta <= 1)) throw std::invalid_argument("beta must lie in [0, 1]");
  }

  std::array<double, 3> slice_weights() const { return {alpha, 1.0 - 2.0 * alpha, alpha}; }
  std::array<double, 2> stage_weights() const { return {beta, 1.0 - beta}; }
};

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& prob, const Tensor<T>& gt, double smooth = 1.0) {
  return soft_dice_loss(prob, gt, smooth);
}

template <typename T>
Tensor<T> bce_loss(const Tensor<T>& logits, const Tensor<T>& gt) {
  return bce_with_logits(logits, gt);
}

/// bce_weight * BCE(logits) + Dice(sigmoid(logits)).
template <typename T>
Tensor<T> slice_loss(const Tensor<T>& logits, const Tensor<T>& gt, const LossWeights& w) {
  return weighted_sum<T>({bce_loss(logits, gt), dice_loss(sigmoid(logits), gt, w.dice_smooth)},
                         {w.bce_weight, 1.0});
}

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  std::array<double, 3> coarse{};  // per-slice values; 0 where the output is absent
  std::array<double, 3> fine{};
  double coarse_stage = 0, fine_stage = 0;
};

/// beta * (a*l1 + (1-2a)*l2 + a*l3)_coarse + (1-beta) * (...)_fine.
/// Outputs a model does not produce are skipped; terms with weight zero are
/// still evaluated so the breakdown is complete.
template <typename T>
LossBreakdown<T> total_loss(const StageOutputs<T>& out, const std::array<Tensor<T>, 3>& gts,
                            const LossWeights& w) {
  w.validate();
  LossBreakdown<T> r;
  std::vector<Tensor<T>> terms;
  std::vector<double> weights;
  const auto sw = w.slice_weights();
  const auto stw = w.stage_weights();
  for (int s = 0; s < 2; ++s) {
    const auto& logits = s == 0 ? out.coarse_logits : out.fine_logits;
    auto& values = s == 0 ? r.coarse : r.fine;
    double stage_value = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      if (!logits[i].defined()) continue;
      auto l = slice_loss(logits[i], gts[i], w);
      values[i] = static_cast<double>(l.item());
      stage_value += sw[i] * values[i];
      terms.push_back(l);
      weights.push_back(stw[s] * sw[i]);
    }
    (s == 0 ? r.coarse_stage : r.fine_stage) = stage_value;
  }
  if (terms.empty()) throw std::invalid_argument("total_loss: model produced no outputs");
  r.total = weighted_sum(terms, weights);
  return r;
}

}  // namespace lgsa
