#ifndef AVTTS_LOSS_HPP
#define AVTTS_LOSS_HPP

#include <vector>

#include "avtts/tensor.hpp"
#include "avtts/tokens.hpp"

namespace avtts {

struct LossWeights {
  double alpha = 0.01;  // text cross-entropy scale
  double beta = 0.1;    // duration scale
};

struct LossBreakdown {
  double ce_audio = 0.0;
  double ce_text = 0.0;
  double duration = 0.0;
  double total = 0.0;
};

enum class DurationVariant { hard, soft };

// |stop index| difference between prediction and ground truth; a sequence
// without a stop token counts its full length. Monitoring only, not a
// gradient source.
double duration_loss_hard(const AudioTokenSequence& pred, const AudioTokenSequence& gt,
                          int stop_id);

// Differentiable surrogate: treats per-position stop probabilities as a
// stopping process (stop at the first success, never-stopped mass lands on
// the final position) and penalizes |E[stop index] - gt index|.
double duration_loss_soft(const std::vector<double>& stop_probs, int gt_end_index);
// d(loss)/d(stop_probs)
std::vector<double> duration_loss_soft_grad(const std::vector<double>& stop_probs,
                                            int gt_end_index);

// expected stop index under the stopping process (helper shared with tests)
double expected_stop_index(const std::vector<double>& stop_probs);

struct LossGrads {
  Tensor d_audio_logits;
  Tensor d_text_logits;
};

LossBreakdown compute_loss(const Tensor& audio_logits, const std::vector<int>& audio_targets,
                           const Tensor& text_logits, const std::vector<int>& text_targets,
                           const LossWeights& w, DurationVariant variant, int stop_id,
                           LossGrads* grads = nullptr);

}  // namespace avtts

#endif  // AVTTS_LOSS_HPP
