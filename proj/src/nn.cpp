#include "avtts/nn.hpp"

#include <algorithm>
#include <cmath>

namespace avtts {

void layernorm_forward(const Tensor& x, const LayerNormParams& p, Tensor& y, LayerNormCtx& ctx) {
  const int t_len = x.dim(0), d = x.dim(1);
  y = Tensor({t_len, d});
  ctx.x = x;
  ctx.xhat = Tensor({t_len, d});
  ctx.rstd.assign(size_t(t_len), 0.0);
  for (int t = 0; t < t_len; ++t) {
    const double* xr = x.row(t);
    double mean = 0.0;
    for (int i = 0; i < d; ++i) mean += xr[i];
    mean /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
      double c = xr[i] - mean;
      var += c * c;
    }
    var /= d;
    double rstd = 1.0 / std::sqrt(var + 1e-5);
    ctx.rstd[size_t(t)] = rstd;
    double* xh = ctx.xhat.row(t);
    double* yr = y.row(t);
    for (int i = 0; i < d; ++i) {
      xh[i] = (xr[i] - mean) * rstd;
      yr[i] = xh[i] * p.gamma.w(i) + p.beta.w(i);
    }
  }
}

void layernorm_backward(const Tensor& dy, LayerNormParams& p, const LayerNormCtx& ctx,
                        Tensor& dx) {
  const int t_len = dy.dim(0), d = dy.dim(1);
  for (int t = 0; t < t_len; ++t) {
    const double* dyr = dy.row(t);
    const double* xh = ctx.xhat.row(t);
    const double rstd = ctx.rstd[size_t(t)];
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (int i = 0; i < d; ++i) {
      double dxh = dyr[i] * p.gamma.w(i);
      sum_dxhat += dxh;
      sum_dxhat_xhat += dxh * xh[i];
      p.gamma.g(i) += dyr[i] * xh[i];
      p.beta.g(i) += dyr[i];
    }
    sum_dxhat /= d;
    sum_dxhat_xhat /= d;
    double* dxr = dx.row(t);
    for (int i = 0; i < d; ++i) {
      double dxh = dyr[i] * p.gamma.w(i);
      dxr[i] += rstd * (dxh - sum_dxhat - xh[i] * sum_dxhat_xhat);
    }
  }
}

namespace {
constexpr double kGeluA = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluB = 0.044715;
}  // namespace

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluA * (x + kGeluB * x * x * x)));
}

double gelu_grad(double x) {
  double u = kGeluA * (x + kGeluB * x * x * x);
  double th = std::tanh(u);
  double sech2 = 1.0 - th * th;
  return 0.5 * (1.0 + th) + 0.5 * x * sech2 * kGeluA * (1.0 + 3.0 * kGeluB * x * x);
}

void mlp_forward(const Tensor& x, const MlpParams& p, Tensor& y, MlpCtx& ctx) {
  ctx.x = x;
  matmul(x, p.w1.w, p.b1.w.data(), ctx.h);
  ctx.ha = Tensor(ctx.h.shape);
  for (size_t i = 0; i < ctx.h.v.size(); ++i) ctx.ha.v[i] = gelu(ctx.h.v[i]);
  matmul(ctx.ha, p.w2.w, p.b2.w.data(), y);
}

void mlp_backward(const Tensor& dy, MlpParams& p, const MlpCtx& ctx, Tensor& dx) {
  Tensor dha(ctx.ha.shape);
  matmul_backward(ctx.ha, p.w2.w, dy, &dha, p.w2.g, p.b2.g.data());
  Tensor dh(ctx.h.shape);
  for (size_t i = 0; i < dh.v.size(); ++i) dh.v[i] = dha.v[i] * gelu_grad(ctx.h.v[i]);
  matmul_backward(ctx.x, p.w1.w, dh, &dx, p.w1.g, p.b1.g.data());
}

void attention_forward(const Tensor& x, const Tensor& mem, const AttentionParams& p, int n_heads,
                       bool causal, Tensor& y, AttentionCtx& ctx) {
  const int tq = x.dim(0), tk = mem.dim(0), d = x.dim(1);
  const int dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(double(dh));
  ctx.x = x;
  ctx.mem = mem;
  matmul(x, p.wq.w, p.bq.w.data(), ctx.q);
  matmul(mem, p.wk.w, p.bk.w.data(), ctx.k);
  matmul(mem, p.wv.w, p.bv.w.data(), ctx.vv);
  ctx.probs = Tensor({n_heads, tq, tk});
  ctx.ctxv = Tensor({tq, d});
  std::vector<double> scores(size_t(tk), 0.0);
  for (int h = 0; h < n_heads; ++h) {
    const int off = h * dh;
    for (int i = 0; i < tq; ++i) {
      const int jmax = causal ? i + 1 : tk;
      const double* qi = ctx.q.row(i) + off;
      for (int j = 0; j < jmax; ++j) scores[size_t(j)] = dot(qi, ctx.k.row(j) + off, dh) * scale;
      // softmax over the visible keys
      double mx = scores[0];
      for (int j = 1; j < jmax; ++j) mx = std::max(mx, scores[size_t(j)]);
      double sum = 0.0;
      for (int j = 0; j < jmax; ++j) {
        scores[size_t(j)] = std::exp(scores[size_t(j)] - mx);
        sum += scores[size_t(j)];
      }
      double* pr = ctx.probs.ptr3(h, i);
      for (int j = 0; j < jmax; ++j) pr[j] = scores[size_t(j)] / sum;
      for (int j = jmax; j < tk; ++j) pr[j] = 0.0;
      double* out = ctx.ctxv.row(i) + off;
      for (int c = 0; c < dh; ++c) out[c] = 0.0;
      for (int j = 0; j < jmax; ++j) {
        const double w = pr[j];
        const double* vj = ctx.vv.row(j) + off;
        for (int c = 0; c < dh; ++c) out[c] += w * vj[c];
      }
    }
  }
  matmul(ctx.ctxv, p.wo.w, p.bo.w.data(), y);
}

void attention_backward(const Tensor& dy, AttentionParams& p, int n_heads, bool causal,
                        const AttentionCtx& ctx, Tensor& dx, Tensor* dmem) {
  const int tq = ctx.x.dim(0), tk = ctx.mem.dim(0), d = ctx.x.dim(1);
  const int dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(double(dh));
  Tensor dctx(ctx.ctxv.shape);
  matmul_backward(ctx.ctxv, p.wo.w, dy, &dctx, p.wo.g, p.bo.g.data());
  Tensor dq({tq, d}), dk({tk, d}), dv({tk, d});
  std::vector<double> dprobs(size_t(tk), 0.0);
  for (int h = 0; h < n_heads; ++h) {
    const int off = h * dh;
    for (int i = 0; i < tq; ++i) {
      const int jmax = causal ? i + 1 : tk;
      const double* pr = ctx.probs.ptr3(h, i);
      const double* dci = dctx.row(i) + off;
      double dsum = 0.0;
      for (int j = 0; j < jmax; ++j) {
        dprobs[size_t(j)] = dot(dci, ctx.vv.row(j) + off, dh);
        dsum += pr[j] * dprobs[size_t(j)];
        double* dvj = dv.row(j) + off;
        const double w = pr[j];
        for (int c = 0; c < dh; ++c) dvj[c] += w * dci[c];
      }
      const double* qi = ctx.q.row(i) + off;
      double* dqi = dq.row(i) + off;
      for (int j = 0; j < jmax; ++j) {
        double ds = pr[j] * (dprobs[size_t(j)] - dsum) * scale;
        if (ds == 0.0) continue;
        const double* kj = ctx.k.row(j) + off;
        double* dkj = dk.row(j) + off;
        for (int c = 0; c < dh; ++c) {
          dqi[c] += ds * kj[c];
          dkj[c] += ds * qi[c];
        }
      }
    }
  }
  matmul_backward(ctx.x, p.wq.w, dq, &dx, p.wq.g, p.bq.g.data());
  matmul_backward(ctx.mem, p.wk.w, dk, dmem, p.wk.g, p.bk.g.data());
  matmul_backward(ctx.mem, p.wv.w, dv, dmem, p.wv.g, p.bv.g.data());
}

void conv1d_forward(const Tensor& x, const Conv1dParams& p, Tensor& y) {
  const int t_len = x.dim(0), in = x.dim(1);
  const int out = p.w.w.dim(0), k = p.w.w.dim(2);
  const int pad = k / 2;
  y = Tensor({t_len, out});
  for (int t = 0; t < t_len; ++t) {
    double* yr = y.row(t);
    for (int o = 0; o < out; ++o) yr[o] = p.b.w(o);
    for (int m = 0; m < k; ++m) {
      const int src = t + m - pad;
      if (src < 0 || src >= t_len) continue;
      const double* xr = x.row(src);
      for (int o = 0; o < out; ++o) {
        double acc = 0.0;
        for (int i = 0; i < in; ++i) acc += xr[i] * p.w.w(o, i, m);
        yr[o] += acc;
      }
    }
  }
}

void conv1d_backward(const Tensor& x, const Tensor& dy, Conv1dParams& p, Tensor* dx) {
  const int t_len = x.dim(0), in = x.dim(1);
  const int out = p.w.w.dim(0), k = p.w.w.dim(2);
  const int pad = k / 2;
  for (int t = 0; t < t_len; ++t) {
    const double* dyr = dy.row(t);
    for (int o = 0; o < out; ++o) p.b.g(o) += dyr[o];
    for (int m = 0; m < k; ++m) {
      const int src = t + m - pad;
      if (src < 0 || src >= t_len) continue;
      const double* xr = x.row(src);
      double* dxr = dx ? dx->row(src) : nullptr;
      for (int o = 0; o < out; ++o) {
        const double g = dyr[o];
        if (g == 0.0) continue;
        for (int i = 0; i < in; ++i) {
          p.w.g(o, i, m) += g * xr[i];
          if (dxr) dxr[i] += g * p.w.w(o, i, m);
        }
      }
    }
  }
}

int tconv1d_out_len(int t_in, int kernel, int stride, int pad) {
  return (t_in - 1) * stride - 2 * pad + kernel;
}

void tconv1d_forward(const Tensor& x, const TConv1dParams& p, Tensor& y) {
  const int t_len = x.dim(0), in = x.dim(1);
  const int out = p.w.w.dim(0), k = p.w.w.dim(2);
  const int u_len = tconv1d_out_len(t_len, k, p.stride, p.pad);
  y = Tensor({u_len, out});
  for (int u = 0; u < u_len; ++u) {
    double* yr = y.row(u);
    for (int o = 0; o < out; ++o) yr[o] = p.b.w(o);
  }
  // scatter: input step t contributes to outputs u = t*stride + m - pad
  for (int t = 0; t < t_len; ++t) {
    const double* xr = x.row(t);
    for (int m = 0; m < k; ++m) {
      const int u = t * p.stride + m - p.pad;
      if (u < 0 || u >= u_len) continue;
      double* yr = y.row(u);
      for (int o = 0; o < out; ++o) {
        double acc = 0.0;
        for (int i = 0; i < in; ++i) acc += xr[i] * p.w.w(o, i, m);
        yr[o] += acc;
      }
    }
  }
}

void tconv1d_backward(const Tensor& x, const Tensor& dy, TConv1dParams& p, Tensor* dx) {
  const int t_len = x.dim(0), in = x.dim(1);
  const int out = p.w.w.dim(0), k = p.w.w.dim(2);
  const int u_len = dy.dim(0);
  for (int u = 0; u < u_len; ++u) {
    const double* dyr = dy.row(u);
    for (int o = 0; o < out; ++o) p.b.g(o) += dyr[o];
  }
  for (int t = 0; t < t_len; ++t) {
    const double* xr = x.row(t);
    double* dxr = dx ? dx->row(t) : nullptr;
    for (int m = 0; m < k; ++m) {
      const int u = t * p.stride + m - p.pad;
      if (u < 0 || u >= u_len) continue;
      const double* dyr = dy.row(u);
      for (int o = 0; o < out; ++o) {
        const double g = dyr[o];
        if (g == 0.0) continue;
        for (int i = 0; i < in; ++i) {
          p.w.g(o, i, m) += g * xr[i];
          if (dxr) dxr[i] += g * p.w.w(o, i, m);
        }
      }
    }
  }
}

void softmax_row(const double* logits, double* probs, int n) {
  double mx = logits[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    probs[i] = std::exp(logits[i] - mx);
    sum += probs[i];
  }
  for (int i = 0; i < n; ++i) probs[i] /= sum;
}

double log_sum_exp(const double* logits, int n) {
  double mx = logits[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += std::exp(logits[i] - mx);
  return mx + std::log(sum);
}

}  // namespace avtts
