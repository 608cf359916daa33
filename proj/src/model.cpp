#include "avtts/model.hpp"

#include <cmath>
#include <cstring>

namespace avtts {

const char* integration_mode_name(IntegrationMode mode) {
  switch (mode) {
    case IntegrationMode::none: return "none";
    case IntegrationMode::concat: return "concat";
    case IntegrationMode::cross_attention: return "cross_attention";
  }
  return "none";
}

IntegrationMode integration_mode_from_string(const std::string& s) {
  if (s == "none") return IntegrationMode::none;
  if (s == "concat") return IntegrationMode::concat;
  if (s == "cross_attention") return IntegrationMode::cross_attention;
  fail(ErrorCode::invalid_config, "unknown integration mode '" + s + "'");
}

int ModelConfig::expansion_rate() const {
  double r = token_rate_hz / video_fps;
  int ri = int(std::llround(r));
  if (ri < 1 || std::fabs(r - double(ri)) > 1e-9)
    fail(ErrorCode::invalid_config, "token_rate_hz / video_fps must be a positive integer");
  return ri;
}

void ModelConfig::validate() const {
  if (d_model < 1) fail(ErrorCode::invalid_config, "d_model must be >= 1");
  if (n_heads < 1 || d_model % n_heads != 0)
    fail(ErrorCode::invalid_config, "d_model must be divisible by n_heads");
  if (n_layers < 1) fail(ErrorCode::invalid_config, "n_layers must be >= 1");
  if (integration_mode == IntegrationMode::cross_attention && cross_attn_every < 1)
    fail(ErrorCode::invalid_config, "cross_attn_every must be >= 1 in cross_attention mode");
  if (text_vocab_size < 2 || audio_vocab_size < 2)
    fail(ErrorCode::invalid_config, "vocabulary sizes must be >= 2");
  if (max_seq_len < 8) fail(ErrorCode::invalid_config, "max_seq_len must be >= 8");
  if (n_style < 1) fail(ErrorCode::invalid_config, "n_style must be >= 1");
  if (d_viseme < 1 || d_v < 1 || d_spk < 1 || d_mel < 1 || expand_hidden < 1)
    fail(ErrorCode::invalid_config, "feature dimensions must be >= 1");
  if (n_languages < 1) fail(ErrorCode::invalid_config, "n_languages must be >= 1");
  expansion_rate();
}

namespace {

uint64_t name_seed(uint64_t seed, const std::string& name) {
  return splitmix64(seed ^ fnv1a64(name));
}

void init_attention(AttentionParams& p, const std::string& prefix, int d, uint64_t seed,
                    bool zero_out_proj) {
  p.wq.init(prefix + ".wq", init_linear(d, d, name_seed(seed, prefix + ".wq")));
  p.bq.init(prefix + ".bq", Tensor({d}));
  p.wk.init(prefix + ".wk", init_linear(d, d, name_seed(seed, prefix + ".wk")));
  p.bk.init(prefix + ".bk", Tensor({d}));
  p.wv.init(prefix + ".wv", init_linear(d, d, name_seed(seed, prefix + ".wv")));
  p.bv.init(prefix + ".bv", Tensor({d}));
  if (zero_out_proj) {
    p.wo.init(prefix + ".wo", Tensor({d, d}));
  } else {
    p.wo.init(prefix + ".wo", init_linear(d, d, name_seed(seed, prefix + ".wo")));
  }
  p.bo.init(prefix + ".bo", Tensor({d}));
}

void init_layernorm(LayerNormParams& p, const std::string& prefix, int d) {
  Tensor ones({d});
  for (double& x : ones.v) x = 1.0;
  p.gamma.init(prefix + ".gamma", std::move(ones));
  p.beta.init(prefix + ".beta", Tensor({d}));
}

void register_attention(std::vector<Param*>& reg, AttentionParams& p) {
  reg.push_back(&p.wq);
  reg.push_back(&p.bq);
  reg.push_back(&p.wk);
  reg.push_back(&p.bk);
  reg.push_back(&p.wv);
  reg.push_back(&p.bv);
  reg.push_back(&p.wo);
  reg.push_back(&p.bo);
}

Tensor slice_rows(const Tensor& src, int start, int count) {
  Tensor out({count, src.dim(1)});
  std::memcpy(out.data(), src.row(start), sizeof(double) * size_t(count) * size_t(src.dim(1)));
  return out;
}

void scatter_rows_add(Tensor& dst, const Tensor& src, int start) {
  for (int r = 0; r < src.dim(0); ++r) {
    double* d = dst.row(start + r);
    const double* s = src.row(r);
    for (int c = 0; c < src.dim(1); ++c) d[c] += s[c];
  }
}

}  // namespace

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int d = cfg_.d_model;
  const uint64_t s = cfg_.seed;

  emb_text_.init("emb.text",
                 init_embedding(cfg_.text_vocab_size, d, name_seed(s, "emb.text")));
  emb_audio_.init("emb.audio",
                  init_embedding(cfg_.audio_vocab_size, d, name_seed(s, "emb.audio")));
  emb_pos_.init("emb.pos", init_embedding(cfg_.max_seq_len, d, name_seed(s, "emb.pos")));
  emb_rev_pos_.init("emb.rev_pos",
                    init_embedding(cfg_.max_seq_len, d, name_seed(s, "emb.rev_pos")));
  emb_type_.init("emb.type", init_embedding(5, d, name_seed(s, "emb.type")));
  emb_lang_.init("emb.lang", init_embedding(cfg_.n_languages, d, name_seed(s, "emb.lang")));
  audio_start_.init("emb.audio_start",
                    init_embedding(1, d, name_seed(s, "emb.audio_start")));

  lip_.build(cfg_.d_viseme, cfg_.d_v, s);
  expand_.build(cfg_.d_v, cfg_.expand_hidden, d, cfg_.expansion_rate(), s);
  spk_.build(cfg_.d_mel, cfg_.d_spk, s);
  style_.build(cfg_.d_spk, cfg_.d_v, d, cfg_.n_style, s);

  prompt_video_w_.init("prompt.video_proj.w",
                       init_linear(cfg_.d_v, d, name_seed(s, "prompt.video_proj.w")));
  prompt_video_b_.init("prompt.video_proj.b", Tensor({d}));

  blocks_.resize(size_t(cfg_.n_layers));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    BlockParams& b = blocks_[size_t(l)];
    std::string prefix = "layer" + std::to_string(l);
    init_layernorm(b.ln1, prefix + ".ln1", d);
    init_attention(b.attn, prefix + ".attn", d, s, false);
    b.has_cross = cfg_.integration_mode == IntegrationMode::cross_attention &&
                  ((l + 1) % cfg_.cross_attn_every == 0);
    if (b.has_cross) {
      init_layernorm(b.lnx, prefix + ".xattn.ln", d);
      init_attention(b.xattn, prefix + ".xattn", d, s, /*zero_out_proj=*/true);
    }
    init_layernorm(b.ln2, prefix + ".ln2", d);
    b.mlp.w1.init(prefix + ".mlp.w1", init_linear(d, 4 * d, name_seed(s, prefix + ".mlp.w1")));
    b.mlp.b1.init(prefix + ".mlp.b1", Tensor({4 * d}));
    b.mlp.w2.init(prefix + ".mlp.w2", init_linear(4 * d, d, name_seed(s, prefix + ".mlp.w2")));
    b.mlp.b2.init(prefix + ".mlp.b2", Tensor({d}));
  }
  init_layernorm(final_ln_, "final_ln", d);
  head_audio_w_.init("head.audio.w",
                     init_linear(d, cfg_.audio_vocab_size, name_seed(s, "head.audio.w")));
  head_audio_b_.init("head.audio.b", Tensor({cfg_.audio_vocab_size}));
  head_text_w_.init("head.text.w",
                    init_linear(d, cfg_.text_vocab_size, name_seed(s, "head.text.w")));
  head_text_b_.init("head.text.b", Tensor({cfg_.text_vocab_size}));

  build_registry();
}

void Model::build_registry() {
  registry_.clear();
  registry_.push_back(&emb_text_);
  registry_.push_back(&emb_audio_);
  registry_.push_back(&emb_pos_);
  registry_.push_back(&emb_rev_pos_);
  registry_.push_back(&emb_type_);
  registry_.push_back(&emb_lang_);
  registry_.push_back(&audio_start_);
  registry_.push_back(&lip_.conv1.w);
  registry_.push_back(&lip_.conv1.b);
  registry_.push_back(&lip_.conv2.w);
  registry_.push_back(&lip_.conv2.b);
  registry_.push_back(&expand_.conv.w);
  registry_.push_back(&expand_.conv.b);
  registry_.push_back(&expand_.tconv.w);
  registry_.push_back(&expand_.tconv.b);
  registry_.push_back(&expand_.proj_w);
  registry_.push_back(&expand_.proj_b);
  registry_.push_back(&expand_.end_marker);
  registry_.push_back(&spk_.w);
  registry_.push_back(&spk_.b);
  registry_.push_back(&style_.latents);
  registry_.push_back(&style_.spk_proj_w);
  registry_.push_back(&style_.spk_proj_b);
  registry_.push_back(&style_.video_proj_w);
  registry_.push_back(&style_.wq);
  registry_.push_back(&style_.wk);
  registry_.push_back(&style_.wv);
  registry_.push_back(&style_.wo);
  registry_.push_back(&style_.bo);
  registry_.push_back(&prompt_video_w_);
  registry_.push_back(&prompt_video_b_);
  for (auto& b : blocks_) {
    registry_.push_back(&b.ln1.gamma);
    registry_.push_back(&b.ln1.beta);
    register_attention(registry_, b.attn);
    if (b.has_cross) {
      registry_.push_back(&b.lnx.gamma);
      registry_.push_back(&b.lnx.beta);
      register_attention(registry_, b.xattn);
    }
    registry_.push_back(&b.ln2.gamma);
    registry_.push_back(&b.ln2.beta);
    registry_.push_back(&b.mlp.w1);
    registry_.push_back(&b.mlp.b1);
    registry_.push_back(&b.mlp.w2);
    registry_.push_back(&b.mlp.b2);
  }
  registry_.push_back(&final_ln_.gamma);
  registry_.push_back(&final_ln_.beta);
  registry_.push_back(&head_audio_w_);
  registry_.push_back(&head_audio_b_);
  registry_.push_back(&head_text_w_);
  registry_.push_back(&head_text_b_);
}

Param* Model::find_param(const std::string& name) {
  for (Param* p : registry_)
    if (p->name == name) return p;
  return nullptr;
}

const Param* Model::find_param(const std::string& name) const {
  for (const Param* p : registry_)
    if (p->name == name) return p;
  return nullptr;
}

void Model::zero_grads() {
  for (Param* p : registry_) p->g.zero();
}

LipFeatureSequence Model::encode_lips(const Tensor& lip_video) const {
  return lip_.forward(lip_video, cfg_.video_fps);
}

ExpandedVideoMemory Model::expand_features(const LipFeatureSequence& f) const {
  return expand_.forward(f);
}

SpeakerEmbedding Model::embed_speaker(const Tensor& ref_mel) const { return spk_.forward(ref_mel); }

StyleEmbedding Model::fuse_style(const SpeakerEmbedding& spk, const Tensor& global_video) const {
  return style_.forward(spk, global_video);
}

Prompt Model::assemble_prompt(int lang_id, const StyleEmbedding& style, const TextSequence& text,
                              const LipFeatureSequence* f) const {
  const int d = cfg_.d_model;
  const bool concat = cfg_.integration_mode == IntegrationMode::concat;
  if (concat && f == nullptr)
    fail(ErrorCode::missing_modality, "concat mode requires lip features in the prompt");
  if (lang_id < 0 || lang_id >= cfg_.n_languages)
    fail(ErrorCode::invalid_language, "language id outside configured range");
  if (text.ids.empty()) fail(ErrorCode::invalid_input, "prompt requires nonempty text");
  const int n_text = int(text.ids.size());
  const int t_v = concat ? f->features.dim(0) : 0;
  const int t_p = 1 + cfg_.n_style + t_v + n_text;
  if (std::max({n_text, t_v, cfg_.n_style + 1}) > cfg_.max_seq_len)
    fail(ErrorCode::sequence_too_long, "prompt segment exceeds max_seq_len");

  Prompt prompt;
  prompt.embeddings = Tensor({t_p, d});
  prompt.segment_labels.reserve(size_t(t_p));
  int row = 0;

  double* r = prompt.embeddings.row(row);
  for (int i = 0; i < d; ++i)
    r[i] = emb_lang_.w(lang_id, i) + emb_pos_.w(0, i) + emb_type_.w(kTypeLang, i);
  prompt.segment_labels.push_back(Segment::lang);
  ++row;

  for (int j = 0; j < cfg_.n_style; ++j, ++row) {
    r = prompt.embeddings.row(row);
    for (int i = 0; i < d; ++i)
      r[i] = style.latents(j, i) + emb_pos_.w(j, i) + emb_type_.w(kTypeStyle, i);
    prompt.segment_labels.push_back(Segment::style);
  }

  if (concat) {
    Tensor proj;
    matmul(f->features, prompt_video_w_.w, prompt_video_b_.w.data(), proj);
    for (int t = 0; t < t_v; ++t, ++row) {
      r = prompt.embeddings.row(row);
      for (int i = 0; i < d; ++i)
        r[i] = proj(t, i) + emb_pos_.w(t, i) + emb_type_.w(kTypeVideo, i);
      prompt.segment_labels.push_back(Segment::video);
    }
  }

  for (int p = 0; p < n_text; ++p, ++row) {
    int id = text.ids[size_t(p)];
    if (id < 0 || id >= cfg_.text_vocab_size)
      fail(ErrorCode::invalid_input, "text token id outside vocabulary");
    r = prompt.embeddings.row(row);
    for (int i = 0; i < d; ++i)
      r[i] = emb_text_.w(id, i) + emb_pos_.w(p, i) + emb_rev_pos_.w(n_text - 1 - p, i) +
             emb_type_.w(kTypeText, i);
    prompt.segment_labels.push_back(Segment::text);
  }
  return prompt;
}

void Model::audio_input_row(int token, int local_idx, double* out) const {
  const int d = cfg_.d_model;
  if (token == kAudioStartToken) {
    for (int i = 0; i < d; ++i)
      out[i] = audio_start_.w(0, i) + emb_pos_.w(local_idx, i) + emb_type_.w(kTypeAudio, i);
    return;
  }
  if (token < 0 || token >= cfg_.audio_vocab_size)
    fail(ErrorCode::invalid_input, "audio token id outside vocabulary");
  for (int i = 0; i < d; ++i)
    out[i] = emb_audio_.w(token, i) + emb_pos_.w(local_idx, i) + emb_type_.w(kTypeAudio, i);
}

Tensor Model::build_input(const Prompt& prompt, const std::vector<int>& audio_ids) const {
  const int d = cfg_.d_model;
  const int t_p = prompt.embeddings.dim(0);
  const int n_audio = int(audio_ids.size());
  const int total = t_p + n_audio;  // START + n_audio-1 token rows
  if (total > cfg_.max_seq_len)
    fail(ErrorCode::sequence_too_long, "sequence length " + std::to_string(total) +
                                           " exceeds max_seq_len " +
                                           std::to_string(cfg_.max_seq_len));
  Tensor x({total, d});
  std::memcpy(x.data(), prompt.embeddings.data(), sizeof(double) * size_t(t_p) * size_t(d));
  audio_input_row(kAudioStartToken, 0, x.row(t_p));
  for (int i = 0; i + 1 < n_audio; ++i)
    audio_input_row(audio_ids[size_t(i)], i + 1, x.row(t_p + 1 + i));
  return x;
}

Tensor Model::prep_memory(const ExpandedVideoMemory& memory) const {
  const int d = cfg_.d_model;
  const int t_m = memory.memory.dim(0);
  if (memory.memory.dim(1) != d) fail(ErrorCode::shape_error, "memory width mismatch");
  if (t_m - 1 > cfg_.max_seq_len)
    fail(ErrorCode::sequence_too_long, "video memory exceeds max_seq_len");
  Tensor out = memory.memory;
  // positional rows share the decoder table; the marker row stays raw
  for (int j = 0; j + 1 < t_m; ++j) {
    double* r = out.row(j);
    for (int i = 0; i < d; ++i) r[i] += emb_pos_.w(j, i);
  }
  return out;
}

Tensor Model::decoder_forward(const Tensor& x_input, const Tensor* mem, DecoderCtx& ctx) const {
  ctx.x0 = x_input;
  ctx.blocks.assign(blocks_.size(), BlockCtx{});
  if (mem) {
    ctx.mem_prepped = *mem;
    ctx.has_memory = true;
  }
  Tensor x = x_input;
  for (size_t l = 0; l < blocks_.size(); ++l) {
    const BlockParams& b = blocks_[l];
    BlockCtx& bc = ctx.blocks[l];
    Tensor normed, out;
    layernorm_forward(x, b.ln1, normed, bc.ln1);
    attention_forward(normed, normed, b.attn, cfg_.n_heads, /*causal=*/true, out, bc.attn);
    for (size_t i = 0; i < x.v.size(); ++i) x.v[i] += out.v[i];
    if (b.has_cross) {
      if (!mem) fail(ErrorCode::missing_modality, "cross_attention mode requires video memory");
      layernorm_forward(x, b.lnx, normed, bc.lnx);
      attention_forward(normed, ctx.mem_prepped, b.xattn, cfg_.n_heads, /*causal=*/false, out,
                        bc.xattn);
      for (size_t i = 0; i < x.v.size(); ++i) x.v[i] += out.v[i];
    }
    layernorm_forward(x, b.ln2, normed, bc.ln2);
    mlp_forward(normed, b.mlp, out, bc.mlp);
    for (size_t i = 0; i < x.v.size(); ++i) x.v[i] += out.v[i];
  }
  layernorm_forward(x, final_ln_, ctx.h_final, ctx.lnf);
  return ctx.h_final;
}

void Model::decoder_backward(const Tensor& d_h_final, DecoderCtx& ctx, Tensor& d_x0,
                             Tensor* d_mem) {
  const int total = ctx.x0.dim(0), d = ctx.x0.dim(1);
  Tensor dx({total, d});
  layernorm_backward(d_h_final, final_ln_, ctx.lnf, dx);
  for (int l = int(blocks_.size()) - 1; l >= 0; --l) {
    BlockParams& b = blocks_[size_t(l)];
    BlockCtx& bc = ctx.blocks[size_t(l)];
    {
      Tensor d_normed({total, d});
      mlp_backward(dx, b.mlp, bc.mlp, d_normed);
      layernorm_backward(d_normed, b.ln2, bc.ln2, dx);
    }
    if (b.has_cross) {
      Tensor d_normed({total, d});
      attention_backward(dx, b.xattn, cfg_.n_heads, /*causal=*/false, bc.xattn, d_normed, d_mem);
      layernorm_backward(d_normed, b.lnx, bc.lnx, dx);
    }
    {
      Tensor d_normed({total, d});
      attention_backward(dx, b.attn, cfg_.n_heads, /*causal=*/true, bc.attn, d_normed, nullptr);
      // self-attention: query and key/value share the normed input
      layernorm_backward(d_normed, b.ln1, bc.ln1, dx);
    }
  }
  d_x0 = std::move(dx);
}

Tensor Model::audio_logits_from_hidden(const Tensor& h_final, int t_p, int n_rows) const {
  Tensor h = slice_rows(h_final, t_p, n_rows);
  Tensor logits;
  matmul(h, head_audio_w_.w, head_audio_b_.w.data(), logits);
  return logits;
}

Logits Model::forward_teacher_forced(const Prompt& prompt, const AudioTokenSequence& audio_in,
                                     const ExpandedVideoMemory* memory) const {
  if (audio_in.ids.empty()) fail(ErrorCode::invalid_input, "audio sequence is empty");
  const bool needs_memory = cfg_.integration_mode == IntegrationMode::cross_attention;
  if (needs_memory && memory == nullptr)
    fail(ErrorCode::missing_modality, "cross_attention mode requires video memory");
  Tensor x = build_input(prompt, audio_in.ids);
  DecoderCtx ctx;
  Tensor mem_prepped;
  const Tensor* mem_ptr = nullptr;
  if (needs_memory) {
    mem_prepped = prep_memory(*memory);
    mem_ptr = &mem_prepped;
  }
  Tensor h = decoder_forward(x, mem_ptr, ctx);
  Logits out;
  out.rows = audio_logits_from_hidden(h, prompt.embeddings.dim(0), int(audio_in.ids.size()));
  return out;
}

double Model::log_prob_sequence(const Prompt& prompt, const AudioTokenSequence& audio,
                                const ExpandedVideoMemory* memory) const {
  Logits logits = forward_teacher_forced(prompt, audio, memory);
  const int va = cfg_.audio_vocab_size;
  double total = 0.0;
  for (int i = 0; i < logits.rows.dim(0); ++i) {
    const double* row = logits.rows.row(i);
    total += row[audio.ids[size_t(i)]] - log_sum_exp(row, va);
  }
  return total;
}

// --- incremental decoding ---

namespace {
void append_row(Tensor& t, const double* row, int d) {
  if (t.rank() != 2) t = Tensor({0, d});
  t.v.insert(t.v.end(), row, row + d);
  t.shape[0] += 1;
}
}  // namespace

GenCache Model::make_gen_cache(const Prompt& prompt, const ExpandedVideoMemory* memory) const {
  const bool needs_memory = cfg_.integration_mode == IntegrationMode::cross_attention;
  if (needs_memory && memory == nullptr)
    fail(ErrorCode::missing_modality, "cross_attention mode requires video memory");
  GenCache cache;
  cache.model = this;
  cache.prompt_len = prompt.embeddings.dim(0);
  cache.k_cache.assign(blocks_.size(), Tensor({0, cfg_.d_model}));
  cache.v_cache.assign(blocks_.size(), Tensor({0, cfg_.d_model}));
  if (needs_memory) {
    Tensor mem = prep_memory(*memory);
    cache.mem_len = mem.dim(0);
    cache.mem_k.assign(blocks_.size(), Tensor());
    cache.mem_v.assign(blocks_.size(), Tensor());
    for (size_t l = 0; l < blocks_.size(); ++l) {
      if (!blocks_[l].has_cross) continue;
      matmul(mem, blocks_[l].xattn.wk.w, blocks_[l].xattn.bk.w.data(), cache.mem_k[l]);
      matmul(mem, blocks_[l].xattn.wv.w, blocks_[l].xattn.bv.w.data(), cache.mem_v[l]);
    }
  }
  for (int t = 0; t < cache.prompt_len; ++t) step_row(cache, prompt.embeddings.row(t));
  return cache;
}

std::vector<double> Model::step_row(GenCache& cache, const double* row) const {
  const int d = cfg_.d_model;
  const int n_heads = cfg_.n_heads;
  const int dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(double(dh));
  if (cache.n_pos + 1 > cfg_.max_seq_len)
    fail(ErrorCode::sequence_too_long, "generation exceeded max_seq_len");

  Tensor x({1, d});
  std::memcpy(x.data(), row, sizeof(double) * size_t(d));
  for (size_t l = 0; l < blocks_.size(); ++l) {
    const BlockParams& b = blocks_[l];
    LayerNormCtx ln_ctx;
    Tensor normed, q, k, v;
    layernorm_forward(x, b.ln1, normed, ln_ctx);
    matmul(normed, b.attn.wq.w, b.attn.bq.w.data(), q);
    matmul(normed, b.attn.wk.w, b.attn.bk.w.data(), k);
    matmul(normed, b.attn.wv.w, b.attn.bv.w.data(), v);
    append_row(cache.k_cache[l], k.row(0), d);
    append_row(cache.v_cache[l], v.row(0), d);
    const int jmax = cache.n_pos + 1;
    Tensor ctxv({1, d});
    std::vector<double> scores(size_t(jmax), 0.0);
    for (int h = 0; h < n_heads; ++h) {
      const int off = h * dh;
      const double* qi = q.row(0) + off;
      for (int j = 0; j < jmax; ++j)
        scores[size_t(j)] = dot(qi, cache.k_cache[l].row(j) + off, dh) * scale;
      double mx = scores[0];
      for (int j = 1; j < jmax; ++j) mx = std::max(mx, scores[size_t(j)]);
      double sum = 0.0;
      for (int j = 0; j < jmax; ++j) {
        scores[size_t(j)] = std::exp(scores[size_t(j)] - mx);
        sum += scores[size_t(j)];
      }
      double* out = ctxv.row(0) + off;
      for (int j = 0; j < jmax; ++j) {
        const double w = scores[size_t(j)] / sum;
        const double* vj = cache.v_cache[l].row(j) + off;
        for (int c = 0; c < dh; ++c) out[c] += w * vj[c];
      }
    }
    Tensor attn_out;
    matmul(ctxv, b.attn.wo.w, b.attn.bo.w.data(), attn_out);
    for (int i = 0; i < d; ++i) x(0, i) += attn_out(0, i);

    if (b.has_cross) {
      layernorm_forward(x, b.lnx, normed, ln_ctx);
      matmul(normed, b.xattn.wq.w, b.xattn.bq.w.data(), q);
      Tensor xctx({1, d});
      std::vector<double> mscores(size_t(cache.mem_len), 0.0);
      for (int h = 0; h < n_heads; ++h) {
        const int off = h * dh;
        const double* qi = q.row(0) + off;
        for (int j = 0; j < cache.mem_len; ++j)
          mscores[size_t(j)] = dot(qi, cache.mem_k[l].row(j) + off, dh) * scale;
        double mx = mscores[0];
        for (int j = 1; j < cache.mem_len; ++j) mx = std::max(mx, mscores[size_t(j)]);
        double sum = 0.0;
        for (int j = 0; j < cache.mem_len; ++j) {
          mscores[size_t(j)] = std::exp(mscores[size_t(j)] - mx);
          sum += mscores[size_t(j)];
        }
        double* out = xctx.row(0) + off;
        for (int j = 0; j < cache.mem_len; ++j) {
          const double w = mscores[size_t(j)] / sum;
          const double* vj = cache.mem_v[l].row(j) + off;
          for (int c = 0; c < dh; ++c) out[c] += w * vj[c];
        }
      }
      Tensor cross_out;
      matmul(xctx, b.xattn.wo.w, b.xattn.bo.w.data(), cross_out);
      for (int i = 0; i < d; ++i) x(0, i) += cross_out(0, i);
    }

    Tensor mlp_out;
    MlpCtx mlp_ctx;
    layernorm_forward(x, b.ln2, normed, ln_ctx);
    mlp_forward(normed, b.mlp, mlp_out, mlp_ctx);
    for (int i = 0; i < d; ++i) x(0, i) += mlp_out(0, i);
  }
  cache.n_pos += 1;

  LayerNormCtx lnf_ctx;
  Tensor h;
  layernorm_forward(x, final_ln_, h, lnf_ctx);
  Tensor logits;
  matmul(h, head_audio_w_.w, head_audio_b_.w.data(), logits);
  std::vector<double> dist(size_t(cfg_.audio_vocab_size), 0.0);
  softmax_row(logits.row(0), dist.data(), cfg_.audio_vocab_size);
  return dist;
}

std::vector<double> Model::step(GenCache& cache, int next_token) const {
  if (cache.model != this) fail(ErrorCode::invalid_state, "cache belongs to a different model");
  if (cache.n_pos < cache.prompt_len)
    fail(ErrorCode::invalid_state, "cache is missing prompt positions");
  if (cache.audio_local == 0) {
    if (next_token != kAudioStartToken)
      fail(ErrorCode::invalid_state, "first step must consume the audio start marker");
  } else if (next_token == kAudioStartToken) {
    fail(ErrorCode::invalid_state, "audio start marker repeated mid-stream");
  } else if (next_token < 0 || next_token >= cfg_.audio_vocab_size) {
    fail(ErrorCode::invalid_state, "token outside audio vocabulary");
  }
  std::vector<double> row(size_t(cfg_.d_model), 0.0);
  audio_input_row(next_token, cache.audio_local, row.data());
  cache.audio_local += 1;
  return step_row(cache, row.data());
}

// --- full conditioning + training pipeline ---

Model::Conditioned Model::condition(const ConditioningInputs& in) const {
  Conditioned cond;
  SpeakerEmbedding spk = spk_.forward(in.ref_mel);
  LipFeatureSequence lips;
  Tensor gvid({1, cfg_.d_v});
  const bool uses_video = cfg_.integration_mode != IntegrationMode::none;
  if (uses_video) {
    lips = lip_.forward(in.lip_raw, cfg_.video_fps);
    cond.t_v = lips.features.dim(0);
    for (int t = 0; t < lips.features.dim(0); ++t)
      for (int i = 0; i < cfg_.d_v; ++i) gvid(0, i) += lips.features(t, i);
    for (int i = 0; i < cfg_.d_v; ++i) gvid(0, i) /= double(lips.features.dim(0));
  }
  StyleEmbedding style = style_.forward(spk, gvid);
  const LipFeatureSequence* fp =
      cfg_.integration_mode == IntegrationMode::concat ? &lips : nullptr;
  cond.prompt = assemble_prompt(in.lang_id, style, in.text, fp);
  if (cfg_.integration_mode == IntegrationMode::cross_attention) {
    cond.memory = expand_.forward(lips);
    cond.has_memory = true;
  }
  return cond;
}

Model::PipelineOut Model::pipeline_forward(const ConditioningInputs& in,
                                           const std::vector<int>& audio_ids,
                                           TrainCtx& ctx) const {
  if (audio_ids.empty()) fail(ErrorCode::invalid_input, "training example has no audio tokens");
  ctx = TrainCtx{};
  ctx.lang_id = in.lang_id;
  ctx.text_ids = in.text.ids;
  ctx.audio_input_ids.assign(audio_ids.begin(), audio_ids.end() - 1);

  SpeakerEmbedding spk = spk_.forward(in.ref_mel, &ctx.spk);
  LipFeatureSequence lips;
  Tensor gvid({1, cfg_.d_v});
  const bool uses_video = cfg_.integration_mode != IntegrationMode::none;
  if (uses_video) {
    lips = lip_.forward(in.lip_raw, cfg_.video_fps, &ctx.lip);
    ctx.has_lips = true;
    ctx.lip_features = lips.features;
    ctx.t_v = lips.features.dim(0);
    for (int t = 0; t < ctx.t_v; ++t)
      for (int i = 0; i < cfg_.d_v; ++i) gvid(0, i) += lips.features(t, i);
    for (int i = 0; i < cfg_.d_v; ++i) gvid(0, i) /= double(ctx.t_v);
  }
  StyleEmbedding style = style_.forward(spk, gvid, &ctx.style);
  const LipFeatureSequence* fp =
      cfg_.integration_mode == IntegrationMode::concat ? &lips : nullptr;
  Prompt prompt = assemble_prompt(in.lang_id, style, in.text, fp);

  Tensor mem_prepped;
  const Tensor* mem_ptr = nullptr;
  if (cfg_.integration_mode == IntegrationMode::cross_attention) {
    ExpandedVideoMemory mem = expand_.forward(lips, &ctx.expand);
    ctx.has_expand = true;
    mem_prepped = prep_memory(mem);
    mem_ptr = &mem_prepped;
  }

  Tensor x = build_input(prompt, audio_ids);
  Tensor h = decoder_forward(x, mem_ptr, ctx.dec);
  ctx.dec.t_p = prompt.embeddings.dim(0);
  ctx.dec.n_audio = int(audio_ids.size());
  ctx.dec.n_text = int(in.text.ids.size());
  ctx.dec.text_off = ctx.dec.t_p - ctx.dec.n_text;

  PipelineOut out;
  out.audio_logits = audio_logits_from_hidden(h, ctx.dec.t_p, ctx.dec.n_audio);
  const int n_text_rows = std::max(0, ctx.dec.n_text - 1);
  if (n_text_rows > 0) {
    Tensor th = slice_rows(h, ctx.dec.text_off, n_text_rows);
    matmul(th, head_text_w_.w, head_text_b_.w.data(), out.text_logits);
  } else {
    out.text_logits = Tensor({0, cfg_.text_vocab_size});
  }
  return out;
}

void Model::pipeline_backward(const Tensor& d_audio_logits, const Tensor& d_text_logits,
                              TrainCtx& ctx) {
  const int d = cfg_.d_model;
  const int total = ctx.dec.x0.dim(0);
  Tensor d_h({total, d});

  {  // audio head
    Tensor h = slice_rows(ctx.dec.h_final, ctx.dec.t_p, ctx.dec.n_audio);
    Tensor dh({ctx.dec.n_audio, d});
    matmul_backward(h, head_audio_w_.w, d_audio_logits, &dh, head_audio_w_.g,
                    head_audio_b_.g.data());
    scatter_rows_add(d_h, dh, ctx.dec.t_p);
  }
  if (d_text_logits.rank() == 2 && d_text_logits.dim(0) > 0) {  // text head
    const int n_rows = d_text_logits.dim(0);
    Tensor h = slice_rows(ctx.dec.h_final, ctx.dec.text_off, n_rows);
    Tensor dh({n_rows, d});
    matmul_backward(h, head_text_w_.w, d_text_logits, &dh, head_text_w_.g, head_text_b_.g.data());
    scatter_rows_add(d_h, dh, ctx.dec.text_off);
  }

  Tensor d_x0, d_mem;
  if (ctx.dec.has_memory) d_mem = Tensor(ctx.dec.mem_prepped.shape);
  decoder_backward(d_h, ctx.dec, d_x0, ctx.dec.has_memory ? &d_mem : nullptr);

  Tensor d_features;  // accumulated gradient for lip features
  if (ctx.has_lips) d_features = Tensor(ctx.lip_features.shape);

  // route the input gradient into the embedding tables and the prompt parts
  int row = 0;
  {  // lang row
    const double* g = d_x0.row(row);
    for (int i = 0; i < d; ++i) {
      emb_lang_.g(ctx.lang_id, i) += g[i];
      emb_pos_.g(0, i) += g[i];
      emb_type_.g(kTypeLang, i) += g[i];
    }
    ++row;
  }
  Tensor d_style({cfg_.n_style, d});
  for (int j = 0; j < cfg_.n_style; ++j, ++row) {
    const double* g = d_x0.row(row);
    for (int i = 0; i < d; ++i) {
      d_style(j, i) += g[i];
      emb_pos_.g(j, i) += g[i];
      emb_type_.g(kTypeStyle, i) += g[i];
    }
  }
  if (cfg_.integration_mode == IntegrationMode::concat) {
    Tensor d_proj({ctx.t_v, d});
    for (int t = 0; t < ctx.t_v; ++t, ++row) {
      const double* g = d_x0.row(row);
      for (int i = 0; i < d; ++i) {
        d_proj(t, i) = g[i];
        emb_pos_.g(t, i) += g[i];
        emb_type_.g(kTypeVideo, i) += g[i];
      }
    }
    matmul_backward(ctx.lip_features, prompt_video_w_.w, d_proj, &d_features, prompt_video_w_.g,
                    prompt_video_b_.g.data());
  }
  const int n_text = ctx.dec.n_text;
  for (int p = 0; p < n_text; ++p, ++row) {
    const double* g = d_x0.row(row);
    const int id = ctx.text_ids[size_t(p)];
    for (int i = 0; i < d; ++i) {
      emb_text_.g(id, i) += g[i];
      emb_pos_.g(p, i) += g[i];
      emb_rev_pos_.g(n_text - 1 - p, i) += g[i];
      emb_type_.g(kTypeText, i) += g[i];
    }
  }
  {  // START row
    const double* g = d_x0.row(row);
    for (int i = 0; i < d; ++i) {
      audio_start_.g(0, i) += g[i];
      emb_pos_.g(0, i) += g[i];
      emb_type_.g(kTypeAudio, i) += g[i];
    }
    ++row;
  }
  for (size_t a = 0; a < ctx.audio_input_ids.size(); ++a, ++row) {
    const double* g = d_x0.row(row);
    const int id = ctx.audio_input_ids[a];
    for (int i = 0; i < d; ++i) {
      emb_audio_.g(id, i) += g[i];
      emb_pos_.g(int(a) + 1, i) += g[i];
      emb_type_.g(kTypeAudio, i) += g[i];
    }
  }

  if (ctx.has_expand) {
    // memory rows j < T_m - 1 also received the positional table
    const int t_m = d_mem.dim(0);
    for (int j = 0; j + 1 < t_m; ++j) {
      const double* g = d_mem.row(j);
      for (int i = 0; i < d; ++i) emb_pos_.g(j, i) += g[i];
    }
    expand_.backward(d_mem, ctx.expand, d_features);
  }

  Tensor d_spk({1, cfg_.d_spk});
  Tensor d_gvid({1, cfg_.d_v});
  style_.backward(d_style, ctx.style, d_spk, d_gvid);
  if (ctx.has_lips) {
    for (int t = 0; t < ctx.t_v; ++t)
      for (int i = 0; i < cfg_.d_v; ++i) d_features(t, i) += d_gvid(0, i) / double(ctx.t_v);
    lip_.backward(d_features, ctx.lip);
  }
  spk_.backward(d_spk, ctx.spk);
}

}  // namespace avtts
