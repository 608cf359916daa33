#ifndef AVTTS_VIDEOPATH_HPP
#define AVTTS_VIDEOPATH_HPP

#include "avtts/nn.hpp"
#include "avtts/tensor.hpp"

namespace avtts {

struct LipFeatureSequence {
  Tensor features;  // [T_v, D_v]
  double fps = 25.0;
};

struct ExpandedVideoMemory {
  Tensor memory;  // [T_m, D_model]; last row is the end marker
  int end_marker_index = 0;
};

struct StyleEmbedding {
  Tensor latents;  // [n_style, D_model]
};

struct SpeakerEmbedding {
  Tensor vec;  // [1, D_spk]
};

// Small temporal convolution stack over raw per-frame lip features; output
// keeps the input frame count.
class LipEncoder {
 public:
  Conv1dParams conv1, conv2;

  struct Ctx {
    Tensor x, h1, a1, h2;
  };

  void build(int d_raw, int d_v, uint64_t seed);
  LipFeatureSequence forward(const Tensor& lip_video, double fps, Ctx* ctx = nullptr) const;
  void backward(const Tensor& d_features, const Ctx& ctx);
  int d_v() const { return conv2.w.w.dim(0); }
};

// Duration controller: convolution + strided transposed convolution bring
// video-rate features up to audio-token rate, a linear projection maps them
// to model width, and a learned end marker row is appended.
class ExpansionNetwork {
 public:
  Conv1dParams conv;
  TConv1dParams tconv;
  Param proj_w, proj_b;
  Param end_marker;

  struct Ctx {
    Tensor x, h1, a1, h2, a2;
  };

  void build(int d_v, int hidden, int d_model, int rate, uint64_t seed);
  ExpandedVideoMemory forward(const LipFeatureSequence& f, Ctx* ctx = nullptr) const;
  // d_memory covers all T_m rows including the marker
  void backward(const Tensor& d_memory, const Ctx& ctx, Tensor& d_features);
  int rate() const { return tconv.stride; }
  int upsampled_len(int t_v) const {
    return tconv1d_out_len(t_v, tconv.w.w.dim(2), tconv.stride, tconv.pad);
  }
};

// Mean over frames of a learned linear frame projection.
class SpeakerEncoder {
 public:
  Param w, b;

  struct Ctx {
    Tensor x;
  };

  void build(int d_mel, int d_spk, uint64_t seed);
  SpeakerEmbedding forward(const Tensor& ref_mel, Ctx* ctx = nullptr) const;
  void backward(const Tensor& d_vec, const Ctx& ctx);
};

// Perceiver-style reduction: fixed latent queries cross-attend over the
// two-element sequence [projected speaker embedding, projected global video
// feature]. The video projection starts at zero so fusion begins
// speaker-only.
class StyleFusion {
 public:
  Param latents;
  Param spk_proj_w, spk_proj_b;
  Param video_proj_w;  // no bias: zero input or zero weights mean no video influence
  Param wq, wk, wv, wo, bo;

  struct Ctx {
    Tensor spk, gvid;
    Tensor rows;   // [2, D]
    Tensor q, k, v;
    Tensor probs;  // [n_style, 2]
    Tensor ctxv;   // [n_style, D]
  };

  void build(int d_spk, int d_v, int d_model, int n_style, uint64_t seed);
  StyleEmbedding forward(const SpeakerEmbedding& spk, const Tensor& global_video,
                         Ctx* ctx = nullptr) const;
  void backward(const Tensor& d_latents, const Ctx& ctx, Tensor& d_spk, Tensor& d_gvid);
  int n_style() const { return latents.w.dim(0); }
};

// weight init helpers shared by model construction
Tensor init_linear(int fan_in, int fan_out, uint64_t seed);
Tensor init_conv(int out_ch, int in_ch, int kernel, uint64_t seed);
Tensor init_embedding(int rows, int cols, uint64_t seed, double scale = 0.1);

}  // namespace avtts

#endif  // AVTTS_VIDEOPATH_HPP
