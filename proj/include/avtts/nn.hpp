#ifndef AVTTS_NN_HPP
#define AVTTS_NN_HPP

#include <vector>

#include "avtts/tensor.hpp"

namespace avtts {

// Layer primitives with explicit forward/backward. Each forward fills a
// context struct with whatever the matching backward needs; a context
// belongs to one forward invocation.

struct LayerNormParams {
  Param gamma;
  Param beta;
};

struct LayerNormCtx {
  Tensor x;     // input
  Tensor xhat;  // normalized input
  std::vector<double> rstd;
};

void layernorm_forward(const Tensor& x, const LayerNormParams& p, Tensor& y, LayerNormCtx& ctx);
void layernorm_backward(const Tensor& dy, LayerNormParams& p, const LayerNormCtx& ctx, Tensor& dx);

double gelu(double x);
double gelu_grad(double x);

struct MlpParams {
  Param w1, b1, w2, b2;
};

struct MlpCtx {
  Tensor x;
  Tensor h;   // pre-activation
  Tensor ha;  // post-activation
};

void mlp_forward(const Tensor& x, const MlpParams& p, Tensor& y, MlpCtx& ctx);
void mlp_backward(const Tensor& dy, MlpParams& p, const MlpCtx& ctx, Tensor& dx);

struct AttentionParams {
  Param wq, bq, wk, bk, wv, bv, wo, bo;
};

struct AttentionCtx {
  Tensor x;        // query-side input
  Tensor mem;      // key/value-side input (== x for self-attention)
  Tensor q, k, vv; // projections
  Tensor probs;    // [n_heads, Tq, Tk] attention weights
  Tensor ctxv;     // concatenated head outputs [Tq, D]
};

// causal=true restricts position i to keys j <= i (requires mem == x sizes).
void attention_forward(const Tensor& x, const Tensor& mem, const AttentionParams& p, int n_heads,
                       bool causal, Tensor& y, AttentionCtx& ctx);
// dmem may be null when the memory side needs no gradient.
void attention_backward(const Tensor& dy, AttentionParams& p, int n_heads, bool causal,
                        const AttentionCtx& ctx, Tensor& dx, Tensor* dmem);

// 1-D temporal convolution over x[T, I], weight w[O, I, K], "same" zero
// padding, stride 1, odd K.
struct Conv1dParams {
  Param w, b;
};

void conv1d_forward(const Tensor& x, const Conv1dParams& p, Tensor& y);
void conv1d_backward(const Tensor& x, const Tensor& dy, Conv1dParams& p, Tensor* dx);

// Transposed 1-D convolution, weight w[O, I, K], output length (T-1)*stride - 2*pad + K.
struct TConv1dParams {
  Param w, b;
  int stride = 2;
  int pad = 1;
};

int tconv1d_out_len(int t_in, int kernel, int stride, int pad);
void tconv1d_forward(const Tensor& x, const TConv1dParams& p, Tensor& y);
void tconv1d_backward(const Tensor& x, const Tensor& dy, TConv1dParams& p, Tensor* dx);

void softmax_row(const double* logits, double* probs, int n);
// returns log(sum(exp(logits))) with max-shift
double log_sum_exp(const double* logits, int n);

}  // namespace avtts

#endif  // AVTTS_NN_HPP
