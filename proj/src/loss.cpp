#include "avtts/loss.hpp"

#include <algorithm>
#include <cmath>

#include "avtts/nn.hpp"

namespace avtts {

double duration_loss_hard(const AudioTokenSequence& pred, const AudioTokenSequence& gt,
                          int stop_id) {
  if (pred.ids.empty() || gt.ids.empty())
    fail(ErrorCode::invalid_input, "duration loss needs nonempty sequences");
  return std::fabs(double(stop_index(pred.ids, stop_id)) - double(stop_index(gt.ids, stop_id)));
}

namespace {

// survivor products B_l = prod_{j<l}(1 - p_j), length L+1
std::vector<double> survivor_products(const std::vector<double>& p) {
  std::vector<double> b(p.size() + 1, 1.0);
  for (size_t l = 0; l < p.size(); ++l) b[l + 1] = b[l] * (1.0 - p[l]);
  return b;
}

void check_probs(const std::vector<double>& p) {
  if (p.empty()) fail(ErrorCode::invalid_input, "empty stop probability vector");
  for (double x : p)
    if (!(x >= 0.0 && x <= 1.0))
      fail(ErrorCode::invalid_distribution, "stop probabilities must lie in [0, 1]");
}

}  // namespace

double expected_stop_index(const std::vector<double>& stop_probs) {
  check_probs(stop_probs);
  const int n = int(stop_probs.size());
  std::vector<double> b = survivor_products(stop_probs);
  double e = 0.0;
  for (int l = 0; l < n; ++l) e += double(l) * stop_probs[size_t(l)] * b[size_t(l)];
  e += double(n - 1) * b[size_t(n)];  // residual mass on the final position
  return e;
}

double duration_loss_soft(const std::vector<double>& stop_probs, int gt_end_index) {
  return std::fabs(expected_stop_index(stop_probs) - double(gt_end_index));
}

std::vector<double> duration_loss_soft_grad(const std::vector<double>& stop_probs,
                                            int gt_end_index) {
  check_probs(stop_probs);
  const int n = int(stop_probs.size());
  std::vector<double> b = survivor_products(stop_probs);
  double e = 0.0;
  for (int l = 0; l < n; ++l) e += double(l) * stop_probs[size_t(l)] * b[size_t(l)];
  e += double(n - 1) * b[size_t(n)];
  const double sign = (e > double(gt_end_index)) ? 1.0 : (e < double(gt_end_index) ? -1.0 : 0.0);

  // reverse pass over q_l = p_l B_l, B_{l+1} = B_l (1 - p_l)
  std::vector<double> grad(size_t(n), 0.0);
  double grad_b = double(n - 1);  // dE/dB_n
  for (int l = n - 1; l >= 0; --l) {
    const double grad_q = double(l);
    grad[size_t(l)] = sign * (grad_q * b[size_t(l)] - grad_b * b[size_t(l)]);
    grad_b = grad_q * stop_probs[size_t(l)] + grad_b * (1.0 - stop_probs[size_t(l)]);
  }
  return grad;
}

LossBreakdown compute_loss(const Tensor& audio_logits, const std::vector<int>& audio_targets,
                           const Tensor& text_logits, const std::vector<int>& text_targets,
                           const LossWeights& w, DurationVariant variant, int stop_id,
                           LossGrads* grads) {
  const int n_audio = audio_logits.dim(0);
  const int va = audio_logits.dim(1);
  if (int(audio_targets.size()) != n_audio)
    fail(ErrorCode::shape_error, "audio target count does not match logits rows");
  const int n_text = text_logits.rank() == 2 ? text_logits.dim(0) : 0;
  if (int(text_targets.size()) != n_text)
    fail(ErrorCode::shape_error, "text target count does not match logits rows");
  if (n_audio < 1) fail(ErrorCode::shape_error, "audio logits are empty");
  if (!(w.alpha >= 0.0) || !(w.beta >= 0.0))
    fail(ErrorCode::invalid_input, "loss weights must be finite and nonnegative");

  LossBreakdown out;
  if (grads) {
    grads->d_audio_logits = Tensor({n_audio, va});
    grads->d_text_logits = Tensor({std::max(n_text, 0), text_logits.rank() == 2 ? text_logits.dim(1) : 0});
  }

  std::vector<double> probs(size_t(va), 0.0);
  std::vector<double> stop_probs(size_t(n_audio), 0.0);
  for (int i = 0; i < n_audio; ++i) {
    const double* row = audio_logits.row(i);
    const int target = audio_targets[size_t(i)];
    if (target < 0 || target >= va)
      fail(ErrorCode::invalid_input, "audio target id outside vocabulary");
    softmax_row(row, probs.data(), va);
    out.ce_audio += -(row[target] - log_sum_exp(row, va));
    stop_probs[size_t(i)] = probs[size_t(stop_id)];
    if (grads) {
      double* g = grads->d_audio_logits.row(i);
      for (int c = 0; c < va; ++c) g[c] = probs[size_t(c)] / double(n_audio);
      g[target] -= 1.0 / double(n_audio);
    }
  }
  out.ce_audio /= double(n_audio);

  if (n_text > 0) {
    const int vt = text_logits.dim(1);
    for (int i = 0; i < n_text; ++i) {
      const double* row = text_logits.row(i);
      const int target = text_targets[size_t(i)];
      if (target < 0 || target >= vt)
        fail(ErrorCode::invalid_input, "text target id outside vocabulary");
      out.ce_text += -(row[target] - log_sum_exp(row, vt));
      if (grads) {
        softmax_row(row, probs.data(), vt);
        double* g = grads->d_text_logits.row(i);
        for (int c = 0; c < vt; ++c) g[c] = w.alpha * probs[size_t(c)] / double(n_text);
        g[target] -= w.alpha / double(n_text);
      }
    }
    out.ce_text /= double(n_text);
  }

  const int gt_end = stop_index(audio_targets, stop_id);
  if (variant == DurationVariant::hard) {
    std::vector<int> pred(size_t(n_audio), 0);
    for (int i = 0; i < n_audio; ++i) {
      const double* row = audio_logits.row(i);
      int best = 0;
      for (int c = 1; c < va; ++c)
        if (row[c] > row[best]) best = c;
      pred[size_t(i)] = best;
    }
    out.duration = std::fabs(double(stop_index(pred, stop_id)) - double(gt_end));
    // piecewise constant in the logits: no gradient contribution
  } else {
    out.duration = duration_loss_soft(stop_probs, std::min(gt_end, n_audio - 1));
    if (grads && w.beta != 0.0) {
      std::vector<double> d_stop =
          duration_loss_soft_grad(stop_probs, std::min(gt_end, n_audio - 1));
      for (int i = 0; i < n_audio; ++i) {
        if (d_stop[size_t(i)] == 0.0) continue;
        const double* row = audio_logits.row(i);
        softmax_row(row, probs.data(), va);
        const double ps = probs[size_t(stop_id)];
        double* g = grads->d_audio_logits.row(i);
        const double coef = w.beta * d_stop[size_t(i)] * ps;
        for (int c = 0; c < va; ++c) g[c] += coef * ((c == stop_id ? 1.0 : 0.0) - probs[size_t(c)]);
      }
    }
  }

  out.total = out.ce_audio + w.alpha * out.ce_text + w.beta * out.duration;
  return out;
}

}  // namespace avtts
