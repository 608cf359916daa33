#include "avtts/videopath.hpp"

#include <cmath>
#include <cstring>

namespace avtts {

Tensor init_linear(int fan_in, int fan_out, uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn({fan_in, fan_out}, rng, 1.0 / std::sqrt(double(fan_in)));
}

Tensor init_conv(int out_ch, int in_ch, int kernel, uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn({out_ch, in_ch, kernel}, rng, 1.0 / std::sqrt(double(in_ch * kernel)));
}

Tensor init_embedding(int rows, int cols, uint64_t seed, double scale) {
  Rng rng(seed);
  return Tensor::randn({rows, cols}, rng, scale);
}

namespace {
uint64_t sub_seed(uint64_t seed, const char* tag) { return splitmix64(seed ^ fnv1a64(tag, std::strlen(tag))); }
}  // namespace

void LipEncoder::build(int d_raw, int d_v, uint64_t seed) {
  conv1.w.init("lip.conv1.w", init_conv(d_v, d_raw, 3, sub_seed(seed, "lip.conv1.w")));
  conv1.b.init("lip.conv1.b", Tensor({d_v}));
  conv2.w.init("lip.conv2.w", init_conv(d_v, d_v, 3, sub_seed(seed, "lip.conv2.w")));
  conv2.b.init("lip.conv2.b", Tensor({d_v}));
}

LipFeatureSequence LipEncoder::forward(const Tensor& lip_video, double fps, Ctx* ctx) const {
  if (lip_video.rank() != 2 || lip_video.dim(0) < 1)
    fail(ErrorCode::empty_input, "lip video has no frames");
  if (lip_video.dim(1) != conv1.w.w.dim(1))
    fail(ErrorCode::shape_error, "lip feature dimension mismatch");
  Ctx local;
  Ctx& c = ctx ? *ctx : local;
  c.x = lip_video;
  conv1d_forward(c.x, conv1, c.h1);
  c.a1 = Tensor(c.h1.shape);
  for (size_t i = 0; i < c.h1.v.size(); ++i) c.a1.v[i] = std::tanh(c.h1.v[i]);
  conv1d_forward(c.a1, conv2, c.h2);
  LipFeatureSequence out;
  out.fps = fps;
  out.features = Tensor(c.h2.shape);
  for (size_t i = 0; i < c.h2.v.size(); ++i) out.features.v[i] = std::tanh(c.h2.v[i]);
  return out;
}

void LipEncoder::backward(const Tensor& d_features, const Ctx& ctx) {
  Tensor dh2(ctx.h2.shape);
  for (size_t i = 0; i < dh2.v.size(); ++i) {
    double t = std::tanh(ctx.h2.v[i]);
    dh2.v[i] = d_features.v[i] * (1.0 - t * t);
  }
  Tensor da1(ctx.a1.shape);
  conv1d_backward(ctx.a1, dh2, conv2, &da1);
  Tensor dh1(ctx.h1.shape);
  for (size_t i = 0; i < dh1.v.size(); ++i) {
    double t = std::tanh(ctx.h1.v[i]);
    dh1.v[i] = da1.v[i] * (1.0 - t * t);
  }
  conv1d_backward(ctx.x, dh1, conv1, nullptr);
}

void ExpansionNetwork::build(int d_v, int hidden, int d_model, int rate, uint64_t seed) {
  if (rate < 1) fail(ErrorCode::invalid_config, "expansion rate must be >= 1");
  conv.w.init("expand.conv.w", init_conv(hidden, d_v, 3, sub_seed(seed, "expand.conv.w")));
  conv.b.init("expand.conv.b", Tensor({hidden}));
  // kernel/pad chosen so the upsampled length is exactly T_v * rate
  int kernel = (rate % 2 == 0) ? 2 * rate : 3 * rate;
  tconv.stride = rate;
  tconv.pad = (rate % 2 == 0) ? rate / 2 : rate;
  tconv.w.init("expand.tconv.w",
               init_conv(hidden, hidden, kernel, sub_seed(seed, "expand.tconv.w")));
  tconv.b.init("expand.tconv.b", Tensor({hidden}));
  proj_w.init("expand.proj.w", init_linear(hidden, d_model, sub_seed(seed, "expand.proj.w")));
  proj_b.init("expand.proj.b", Tensor({d_model}));
  end_marker.init("expand.end_marker",
                  init_embedding(1, d_model, sub_seed(seed, "expand.end_marker"), 0.3));
}

ExpandedVideoMemory ExpansionNetwork::forward(const LipFeatureSequence& f, Ctx* ctx) const {
  if (f.features.rank() != 2 || f.features.dim(0) < 1)
    fail(ErrorCode::empty_input, "no lip features to expand");
  Ctx local;
  Ctx& c = ctx ? *ctx : local;
  c.x = f.features;
  conv1d_forward(c.x, conv, c.h1);
  c.a1 = Tensor(c.h1.shape);
  for (size_t i = 0; i < c.h1.v.size(); ++i) c.a1.v[i] = std::tanh(c.h1.v[i]);
  tconv1d_forward(c.a1, tconv, c.h2);
  c.a2 = Tensor(c.h2.shape);
  for (size_t i = 0; i < c.h2.v.size(); ++i) c.a2.v[i] = std::tanh(c.h2.v[i]);
  Tensor up;
  matmul(c.a2, proj_w.w, proj_b.w.data(), up);

  const int t_up = up.dim(0);
  const int d_model = up.dim(1);
  ExpandedVideoMemory mem;
  mem.memory = Tensor({t_up + 1, d_model});
  std::memcpy(mem.memory.data(), up.data(), sizeof(double) * size_t(t_up) * size_t(d_model));
  // final row is the marker parameter, bit for bit
  std::memcpy(mem.memory.row(t_up), end_marker.w.data(), sizeof(double) * size_t(d_model));
  mem.end_marker_index = t_up;
  return mem;
}

void ExpansionNetwork::backward(const Tensor& d_memory, const Ctx& ctx, Tensor& d_features) {
  const int t_m = d_memory.dim(0);
  const int d_model = d_memory.dim(1);
  const int t_up = t_m - 1;
  for (int i = 0; i < d_model; ++i) end_marker.g(i) += d_memory(t_up, i);
  Tensor d_up({t_up, d_model});
  std::memcpy(d_up.data(), d_memory.data(), sizeof(double) * size_t(t_up) * size_t(d_model));
  Tensor da2(ctx.a2.shape);
  matmul_backward(ctx.a2, proj_w.w, d_up, &da2, proj_w.g, proj_b.g.data());
  Tensor dh2(ctx.h2.shape);
  for (size_t i = 0; i < dh2.v.size(); ++i) {
    double t = std::tanh(ctx.h2.v[i]);
    dh2.v[i] = da2.v[i] * (1.0 - t * t);
  }
  Tensor da1(ctx.a1.shape);
  tconv1d_backward(ctx.a1, dh2, tconv, &da1);
  Tensor dh1(ctx.h1.shape);
  for (size_t i = 0; i < dh1.v.size(); ++i) {
    double t = std::tanh(ctx.h1.v[i]);
    dh1.v[i] = da1.v[i] * (1.0 - t * t);
  }
  conv1d_backward(ctx.x, dh1, conv, &d_features);
}

void SpeakerEncoder::build(int d_mel, int d_spk, uint64_t seed) {
  w.init("spk.proj.w", init_linear(d_mel, d_spk, sub_seed(seed, "spk.proj.w")));
  b.init("spk.proj.b", Tensor({d_spk}));
}

SpeakerEmbedding SpeakerEncoder::forward(const Tensor& ref_mel, Ctx* ctx) const {
  if (ref_mel.rank() != 2 || ref_mel.dim(0) < 1)
    fail(ErrorCode::empty_input, "reference mel has no frames");
  if (ref_mel.dim(1) != w.w.dim(0)) fail(ErrorCode::shape_error, "reference mel width mismatch");
  if (ctx) ctx->x = ref_mel;
  Tensor proj;
  matmul(ref_mel, w.w, b.w.data(), proj);
  const int t_r = proj.dim(0), d = proj.dim(1);
  SpeakerEmbedding out;
  out.vec = Tensor({1, d});
  for (int t = 0; t < t_r; ++t)
    for (int i = 0; i < d; ++i) out.vec(0, i) += proj(t, i);
  for (int i = 0; i < d; ++i) out.vec(0, i) /= double(t_r);
  return out;
}

void SpeakerEncoder::backward(const Tensor& d_vec, const Ctx& ctx) {
  const int t_r = ctx.x.dim(0), d = w.w.dim(1);
  Tensor d_proj({t_r, d});
  for (int t = 0; t < t_r; ++t)
    for (int i = 0; i < d; ++i) d_proj(t, i) = d_vec(0, i) / double(t_r);
  matmul_backward(ctx.x, w.w, d_proj, nullptr, w.g, b.g.data());
}

void StyleFusion::build(int d_spk, int d_v, int d_model, int n_style, uint64_t seed) {
  latents.init("style.latents",
               init_embedding(n_style, d_model, sub_seed(seed, "style.latents"), 0.1));
  spk_proj_w.init("style.spk_proj.w",
                  init_linear(d_spk, d_model, sub_seed(seed, "style.spk_proj.w")));
  spk_proj_b.init("style.spk_proj.b", Tensor({d_model}));
  video_proj_w.init("style.video_proj.w", Tensor({d_v, d_model}));  // zero: speaker-only start
  wq.init("style.attn.wq", init_linear(d_model, d_model, sub_seed(seed, "style.attn.wq")));
  wk.init("style.attn.wk", init_linear(d_model, d_model, sub_seed(seed, "style.attn.wk")));
  wv.init("style.attn.wv", init_linear(d_model, d_model, sub_seed(seed, "style.attn.wv")));
  wo.init("style.attn.wo", init_linear(d_model, d_model, sub_seed(seed, "style.attn.wo")));
  bo.init("style.attn.bo", Tensor({d_model}));
}

StyleEmbedding StyleFusion::forward(const SpeakerEmbedding& spk, const Tensor& global_video,
                                    Ctx* ctx) const {
  const int d_model = latents.w.dim(1);
  const int ns = latents.w.dim(0);
  for (double x : spk.vec.v)
    if (!std::isfinite(x)) fail(ErrorCode::invalid_input, "non-finite speaker embedding");
  for (double x : global_video.v)
    if (!std::isfinite(x)) fail(ErrorCode::invalid_input, "non-finite global video feature");
  Ctx local;
  Ctx& c = ctx ? *ctx : local;
  c.spk = spk.vec;
  c.gvid = global_video;  // [1, d_v]
  c.rows = Tensor({2, d_model});
  {
    Tensor r0;
    matmul(c.spk, spk_proj_w.w, spk_proj_b.w.data(), r0);
    Tensor r1;
    matmul(c.gvid, video_proj_w.w, nullptr, r1);
    std::memcpy(c.rows.row(0), r0.data(), sizeof(double) * size_t(d_model));
    std::memcpy(c.rows.row(1), r1.data(), sizeof(double) * size_t(d_model));
  }
  matmul(latents.w, wq.w, nullptr, c.q);
  matmul(c.rows, wk.w, nullptr, c.k);
  matmul(c.rows, wv.w, nullptr, c.v);
  const double scale = 1.0 / std::sqrt(double(d_model));
  c.probs = Tensor({ns, 2});
  c.ctxv = Tensor({ns, d_model});
  for (int s = 0; s < ns; ++s) {
    double scores[2];
    for (int j = 0; j < 2; ++j) scores[j] = dot(c.q.row(s), c.k.row(j), d_model) * scale;
    softmax_row(scores, c.probs.row(s), 2);
    for (int i = 0; i < d_model; ++i)
      c.ctxv(s, i) = c.probs(s, 0) * c.v(0, i) + c.probs(s, 1) * c.v(1, i);
  }
  StyleEmbedding out;
  matmul(c.ctxv, wo.w, bo.w.data(), out.latents);
  for (int s = 0; s < ns; ++s)
    for (int i = 0; i < d_model; ++i) out.latents(s, i) += latents.w(s, i);
  return out;
}

void StyleFusion::backward(const Tensor& d_latents, const Ctx& ctx, Tensor& d_spk,
                           Tensor& d_gvid) {
  const int d_model = latents.w.dim(1);
  const int ns = latents.w.dim(0);
  for (int s = 0; s < ns; ++s)
    for (int i = 0; i < d_model; ++i) latents.g(s, i) += d_latents(s, i);
  Tensor dctx({ns, d_model});
  matmul_backward(ctx.ctxv, wo.w, d_latents, &dctx, wo.g, bo.g.data());
  Tensor dq({ns, d_model}), dk({2, d_model}), dv({2, d_model});
  const double scale = 1.0 / std::sqrt(double(d_model));
  for (int s = 0; s < ns; ++s) {
    double dp[2];
    double dsum = 0.0;
    for (int j = 0; j < 2; ++j) {
      dp[j] = dot(dctx.row(s), ctx.v.row(j), d_model);
      dsum += ctx.probs(s, j) * dp[j];
      for (int i = 0; i < d_model; ++i) dv(j, i) += ctx.probs(s, j) * dctx(s, i);
    }
    for (int j = 0; j < 2; ++j) {
      double ds = ctx.probs(s, j) * (dp[j] - dsum) * scale;
      for (int i = 0; i < d_model; ++i) {
        dq(s, i) += ds * ctx.k(j, i);
        dk(j, i) += ds * ctx.q(s, i);
      }
    }
  }
  matmul_backward(latents.w, wq.w, dq, &latents.g, wq.g, nullptr);
  Tensor drows({2, d_model});
  matmul_backward(ctx.rows, wk.w, dk, &drows, wk.g, nullptr);
  matmul_backward(ctx.rows, wv.w, dv, &drows, wv.g, nullptr);
  Tensor dr0({1, d_model}), dr1({1, d_model});
  std::memcpy(dr0.data(), drows.row(0), sizeof(double) * size_t(d_model));
  std::memcpy(dr1.data(), drows.row(1), sizeof(double) * size_t(d_model));
  matmul_backward(ctx.spk, spk_proj_w.w, dr0, &d_spk, spk_proj_w.g, spk_proj_b.g.data());
  matmul_backward(ctx.gvid, video_proj_w.w, dr1, &d_gvid, video_proj_w.g, nullptr);
}

}  // namespace avtts
