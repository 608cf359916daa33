#ifndef AVTTS_MODEL_HPP
#define AVTTS_MODEL_HPP

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "avtts/tokens.hpp"
#include "avtts/videopath.hpp"

namespace avtts {

enum class IntegrationMode { none, concat, cross_attention };

const char* integration_mode_name(IntegrationMode mode);
IntegrationMode integration_mode_from_string(const std::string& s);

struct ModelConfig {
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int cross_attn_every = 1;
  IntegrationMode integration_mode = IntegrationMode::none;
  int text_vocab_size = 17;   // alphabet + UNK
  int audio_vocab_size = 65;  // codebook + stop
  int max_seq_len = 512;
  int n_style = 4;
  uint64_t seed = 1;
  int d_viseme = 17;
  int d_v = 24;
  int d_spk = 32;
  int d_mel = 16;
  int expand_hidden = 32;
  int n_languages = 2;
  double video_fps = 25.0;
  double token_rate_hz = 50.0;
  bool style_video_branch = true;

  int expansion_rate() const;
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class Segment { lang, style, video, text };

struct Prompt {
  Tensor embeddings;  // [T_p, D_model]
  std::vector<Segment> segment_labels;
};

struct Logits {
  Tensor rows;  // [L, audio_vocab_size]
};

// Everything the model needs about one utterance before audio starts.
struct ConditioningInputs {
  int lang_id = 0;
  TextSequence text;
  Tensor lip_raw;  // [T_v, d_viseme]; may be empty in mode none
  Tensor ref_mel;  // [T_r, d_mel]
};

struct BlockParams {
  LayerNormParams ln1;
  AttentionParams attn;
  bool has_cross = false;
  LayerNormParams lnx;
  AttentionParams xattn;
  LayerNormParams ln2;
  MlpParams mlp;
};

struct BlockCtx {
  LayerNormCtx ln1;
  AttentionCtx attn;
  LayerNormCtx lnx;
  AttentionCtx xattn;
  LayerNormCtx ln2;
  MlpCtx mlp;
};

struct DecoderCtx {
  Tensor x0;
  std::vector<BlockCtx> blocks;
  LayerNormCtx lnf;
  Tensor h_final;
  Tensor mem_prepped;
  bool has_memory = false;
  int t_p = 0;
  int n_audio = 0;  // logits rows
  int text_off = 0;
  int n_text = 0;
};

class Model;

// Incremental decoding state. One cache per generation stream; never share.
struct GenCache {
  const Model* model = nullptr;
  std::vector<Tensor> k_cache, v_cache;  // per layer, [n_pos, D]
  std::vector<Tensor> mem_k, mem_v;      // per layer with cross-attention
  int mem_len = 0;
  int n_pos = 0;
  int prompt_len = 0;
  int audio_local = 0;  // audio rows consumed, START included
};

class Model {
 public:
  static constexpr int kAudioStartToken = -1;

  explicit Model(ModelConfig cfg);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const std::vector<Param*>& params() const { return registry_; }
  Param* find_param(const std::string& name);
  const Param* find_param(const std::string& name) const;
  void zero_grads();

  // --- video path (spec operations) ---
  LipEncoder& lip_encoder() { return lip_; }
  const LipEncoder& lip_encoder() const { return lip_; }
  ExpansionNetwork& expansion() { return expand_; }
  const ExpansionNetwork& expansion() const { return expand_; }
  SpeakerEncoder& speaker_encoder() { return spk_; }
  const SpeakerEncoder& speaker_encoder() const { return spk_; }
  StyleFusion& style_fusion() { return style_; }
  const StyleFusion& style_fusion() const { return style_; }

  LipFeatureSequence encode_lips(const Tensor& lip_video) const;
  ExpandedVideoMemory expand_features(const LipFeatureSequence& f) const;
  SpeakerEmbedding embed_speaker(const Tensor& ref_mel) const;
  StyleEmbedding fuse_style(const SpeakerEmbedding& spk, const Tensor& global_video) const;

  // --- decoder ---
  Prompt assemble_prompt(int lang_id, const StyleEmbedding& style, const TextSequence& text,
                         const LipFeatureSequence* f = nullptr) const;
  Logits forward_teacher_forced(const Prompt& prompt, const AudioTokenSequence& audio_in,
                                const ExpandedVideoMemory* memory = nullptr) const;
  double log_prob_sequence(const Prompt& prompt, const AudioTokenSequence& audio,
                           const ExpandedVideoMemory* memory = nullptr) const;

  GenCache make_gen_cache(const Prompt& prompt, const ExpandedVideoMemory* memory = nullptr) const;
  // next_token must be kAudioStartToken on the first call, then each emitted
  // token in order; returns the next-token distribution over the audio vocab
  std::vector<double> step(GenCache& cache, int next_token) const;

  // --- conditioning + training pipeline ---
  struct Conditioned {
    Prompt prompt;
    ExpandedVideoMemory memory;
    bool has_memory = false;
    int t_v = 0;
  };
  Conditioned condition(const ConditioningInputs& in) const;

  struct TrainCtx {
    LipEncoder::Ctx lip;
    bool has_lips = false;
    Tensor lip_features;
    SpeakerEncoder::Ctx spk;
    StyleFusion::Ctx style;
    ExpansionNetwork::Ctx expand;
    bool has_expand = false;
    DecoderCtx dec;
    // routing info for embedding backward
    int lang_id = 0;
    std::vector<int> text_ids;
    std::vector<int> audio_input_ids;  // tokens embedded as inputs (without START)
    int t_v = 0;
  };

  struct PipelineOut {
    Tensor audio_logits;  // [L, audio_vocab]
    Tensor text_logits;   // [max(0, n_text-1), text_vocab]
  };

  PipelineOut pipeline_forward(const ConditioningInputs& in, const std::vector<int>& audio_ids,
                               TrainCtx& ctx) const;
  void pipeline_backward(const Tensor& d_audio_logits, const Tensor& d_text_logits, TrainCtx& ctx);

 private:
  enum TypeId { kTypeLang = 0, kTypeStyle = 1, kTypeVideo = 2, kTypeText = 3, kTypeAudio = 4 };

  void build_registry();
  Tensor build_input(const Prompt& prompt, const std::vector<int>& audio_ids) const;
  void audio_input_row(int token, int local_idx, double* out) const;
  Tensor prep_memory(const ExpandedVideoMemory& memory) const;
  Tensor decoder_forward(const Tensor& x_input, const Tensor* mem, DecoderCtx& ctx) const;
  void decoder_backward(const Tensor& d_h_final, DecoderCtx& ctx, Tensor& d_x0, Tensor* d_mem);
  Tensor audio_logits_from_hidden(const Tensor& h_final, int t_p, int n_rows) const;
  std::vector<double> step_row(GenCache& cache, const double* row) const;

  ModelConfig cfg_;

  Param emb_text_, emb_audio_, emb_pos_, emb_rev_pos_, emb_type_, emb_lang_, audio_start_;
  LipEncoder lip_;
  ExpansionNetwork expand_;
  SpeakerEncoder spk_;
  StyleFusion style_;
  Param prompt_video_w_, prompt_video_b_;
  std::vector<BlockParams> blocks_;
  LayerNormParams final_ln_;
  Param head_audio_w_, head_audio_b_, head_text_w_, head_text_b_;

  std::vector<Param*> registry_;
};

}  // namespace avtts

#endif  // AVTTS_MODEL_HPP
