#include "avtts/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "avtts/binio.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace avtts {

int CharTokenMap::token_for(int speaker_id, int char_id) const {
  const auto& vs = variants[size_t(char_id)];
  uint64_t h = splitmix64((uint64_t(uint32_t(speaker_id)) << 32) ^ uint64_t(uint32_t(char_id)));
  return vs[size_t(h % vs.size())];
}

int CharTokenMap::char_for(int token_id) const {
  if (token_id == silence_id) return -1;
  for (size_t c = 0; c < variants.size(); ++c)
    for (int id : variants[c])
      if (id == token_id) return int(c);
  return -1;
}

CorpusAssets build_corpus_assets(const CorpusParams& params, uint64_t seed) {
  const int k = params.codebook_size;
  const int a = int(params.alphabet.size());
  const int d = params.d_mel;
  int variants_per_char = std::min(3, (k - 1) / a);
  if (variants_per_char < 1)
    fail(ErrorCode::invalid_config, "codebook too small for alphabet: need K >= alphabet + 1");

  // anchor 0 is the silence mel; the rest are well-separated random points
  Tensor anchors({k, d});
  Rng anchor_rng(splitmix64(seed ^ 0xa11c));
  for (int i = 0; i < d; ++i) anchors(0, i) = -1.5;
  for (int c = 1; c < k; ++c)
    for (int i = 0; i < d; ++i) anchors(c, i) = anchor_rng.next_gaussian() * 2.0;

  const int reps = 8;
  Tensor frames({k * reps, d});
  Rng jitter_rng(splitmix64(seed ^ 0xf7a3));
  for (int c = 0; c < k; ++c)
    for (int r = 0; r < reps; ++r)
      for (int i = 0; i < d; ++i)
        frames(c * reps + r, i) = anchors(c, i) + jitter_rng.next_gaussian() * 0.05;

  CorpusAssets assets;
  assets.codebook = fit_codebook(frames, k, splitmix64(seed ^ 0x5eed));

  auto anchor_token = [&](int idx) {
    Tensor row({1, d});
    for (int i = 0; i < d; ++i) row(0, i) = anchors(idx, i);
    return tokenize_audio(row, assets.codebook, false).ids[0];
  };

  assets.map.silence_id = anchor_token(0);
  assets.map.variants_per_char = variants_per_char;
  assets.map.variants.assign(size_t(a), {});
  std::vector<int> used{assets.map.silence_id};
  for (int c = 0; c < a; ++c) {
    for (int v = 0; v < variants_per_char; ++v) {
      int id = anchor_token(1 + c * variants_per_char + v);
      assets.map.variants[size_t(c)].push_back(id);
      used.push_back(id);
    }
  }
  std::sort(used.begin(), used.end());
  if (std::adjacent_find(used.begin(), used.end()) != used.end())
    fail(ErrorCode::invalid_state,
         "codebook collision: two anchors quantized to one centroid; retry with another seed");
  return assets;
}

CorpusGenerator::CorpusGenerator(CorpusParams params, AudioCodebook cb, CharTokenMap map)
    : params_(std::move(params)),
      cb_(std::move(cb)),
      map_(std::move(map)),
      tokenizer_(params_.alphabet, params_.n_languages) {}

AVExample CorpusGenerator::generate(const UtteranceSpec& spec, uint64_t seed) const {
  if (spec.text.empty()) fail(ErrorCode::invalid_input, "utterance text is empty");
  if (spec.tokens_per_char < 1) fail(ErrorCode::invalid_input, "tokens_per_char must be >= 1");
  if (spec.noise_std < 0.0) fail(ErrorCode::invalid_input, "noise_std must be nonnegative");
  for (char c : spec.text)
    if (!tokenizer_.in_alphabet(c))
      fail(ErrorCode::invalid_input, std::string("character '") + c + "' outside alphabet");
  const int n_chars = int(spec.text.size());
  for (auto [pos, len] : spec.pause_positions) {
    if (pos < 0 || pos > n_chars) fail(ErrorCode::invalid_input, "pause position outside text");
    if (len < 1) fail(ErrorCode::invalid_input, "pause length must be >= 1");
  }
  if (spec.speaker_id < 0 || spec.speaker_id >= params_.n_speakers)
    fail(ErrorCode::invalid_input, "speaker_id outside configured range");

  AVExample ex;
  ex.speaker_id = spec.speaker_id;
  ex.tokens_per_char = spec.tokens_per_char;
  ex.text_seq = tokenizer_.encode(spec.text, spec.language_id);

  // token timeline with a parallel viseme-class timeline; pauses at char
  // index p are emitted before the p-th character
  std::vector<int> tokens;
  std::vector<int> viseme_class;
  auto emit_pauses_at = [&](int pos) {
    for (auto [p, len] : spec.pause_positions) {
      if (p != pos) continue;
      for (int i = 0; i < len; ++i) {
        tokens.push_back(map_.silence_id);
        viseme_class.push_back(params_.neutral_viseme());
      }
    }
  };
  for (int p = 0; p < n_chars; ++p) {
    emit_pauses_at(p);
    int cid = ex.text_seq.ids[size_t(p)];
    int token = map_.token_for(spec.speaker_id, cid);
    for (int i = 0; i < spec.tokens_per_char; ++i) {
      tokens.push_back(token);
      viseme_class.push_back(cid);
    }
  }
  emit_pauses_at(n_chars);

  const int t_a = int(tokens.size());
  ex.audio_tokens.ids = tokens;
  ex.audio_tokens.ids.push_back(cb_.stop_id());
  ex.audio_tokens.token_rate_hz = params_.token_rate_hz;
  ex.ground_truth_duration_s = double(t_a) / params_.token_rate_hz;

  ex.mel = FMat(t_a, params_.d_mel);
  for (int t = 0; t < t_a; ++t)
    for (int i = 0; i < params_.d_mel; ++i)
      ex.mel.at(t, i) = float(cb_.centroids(tokens[size_t(t)], i));

  // resample the viseme timeline to video frames; frame v covers audio time
  // starting at v / fps
  const int t_v = int(std::ceil(double(t_a) * params_.video_fps / params_.token_rate_hz));
  const int d_vis = params_.d_viseme();
  ex.lip_video = FMat(t_v, d_vis);
  Rng noise_rng(splitmix64(seed ^ 0x11f5));
  for (int v = 0; v < t_v; ++v) {
    int tok_idx = std::min(t_a - 1, int(std::floor(double(v) * params_.token_rate_hz /
                                                   params_.video_fps)));
    int cls = viseme_class[size_t(tok_idx)];
    for (int i = 0; i < d_vis; ++i) {
      double base = (i == cls) ? 1.0 : 0.0;
      ex.lip_video.at(v, i) = float(base + noise_rng.next_gaussian() * spec.noise_std);
    }
  }

  // fixed calibration phrase reveals the speaker's variant choices
  const int calib_chars = std::min(6, tokenizer_.alphabet_size());
  const int calib_reps = 4;
  ex.speaker_ref_mel = FMat(calib_chars * calib_reps, params_.d_mel);
  for (int c = 0; c < calib_chars; ++c) {
    int token = map_.token_for(spec.speaker_id, c);
    for (int r = 0; r < calib_reps; ++r)
      for (int i = 0; i < params_.d_mel; ++i)
        ex.speaker_ref_mel.at(c * calib_reps + r, i) = float(cb_.centroids(token, i));
  }
  return ex;
}

UtteranceSpec CorpusGenerator::sample_spec(const SamplingConfig& cfg, uint64_t seed) const {
  Rng rng(splitmix64(seed ^ 0x5a3c));
  UtteranceSpec spec;
  // words use the letter part of the alphabet; the final alphabet slot may be
  // the word separator
  std::string letters;
  for (char c : params_.alphabet)
    if (c != ' ') letters.push_back(c);
  int n_words = int(rng.next_int(cfg.min_words, cfg.max_words));
  for (int w = 0; w < n_words; ++w) {
    if (w > 0) spec.text.push_back(' ');
    int len = int(rng.next_int(cfg.min_word_len, cfg.max_word_len));
    for (int i = 0; i < len; ++i)
      spec.text.push_back(letters[size_t(rng.next_int(0, int(letters.size()) - 1))]);
  }
  spec.speaker_id = int(rng.next_int(0, params_.n_speakers - 1));
  spec.tokens_per_char =
      cfg.tokens_per_char_choices[size_t(rng.next_int(0, int(cfg.tokens_per_char_choices.size()) - 1))];
  if (rng.next_double() < cfg.pause_prob) {
    int pos = int(rng.next_int(1, std::max(1, int(spec.text.size()) - 1)));
    int len = int(rng.next_int(cfg.min_pause, cfg.max_pause));
    spec.pause_positions.emplace_back(pos, len);
  }
  spec.noise_std = cfg.noise_std;
  return spec;
}

std::string recognize_tokens(const std::vector<int>& ids, const CharTokenMap& map,
                             const std::string& alphabet, int tokens_per_char, int stop_id) {
  std::string out;
  int run_char = -2;  // -1 = silence/unknown, >=0 = alphabet index
  int run_len = 0;
  auto flush = [&]() {
    if (run_char >= 0 && run_len > 0) {
      int reps = int(std::llround(double(run_len) / double(tokens_per_char)));
      for (int i = 0; i < reps; ++i) out.push_back(alphabet[size_t(run_char)]);
    }
    run_len = 0;
  };
  for (int id : ids) {
    if (id == stop_id) break;
    int c = map.char_for(id);
    if (c != run_char) {
      flush();
      run_char = c;
    }
    run_len++;
  }
  flush();
  return out;
}

namespace {

constexpr uint32_t kRecordsMagic = 0x5344'5641;  // "AVDS"
constexpr uint32_t kDatasetVersion = 1;

void write_fmat(BinWriter& w, const FMat& m) {
  w.u32(uint32_t(m.rows));
  w.u32(uint32_t(m.cols));
  for (float x : m.v) w.f32(x);
}

FMat read_fmat(BinReader& r) {
  uint32_t rows = r.u32(), cols = r.u32();
  if (rows > (1u << 24) || cols > (1u << 16))
    fail(ErrorCode::corrupt_dataset, "implausible matrix dimensions");
  FMat m{int(rows), int(cols)};
  for (float& x : m.v) x = r.f32();
  return m;
}

std::string encode_record(const AVExample& ex) {
  std::ostringstream os(std::ios::binary);
  BinWriter w(os);
  w.str(ex.text_seq.raw);
  w.u32(uint32_t(ex.text_seq.language_id));
  w.u32(uint32_t(ex.text_seq.ids.size()));
  for (int id : ex.text_seq.ids) w.i32(id);
  w.u32(uint32_t(ex.speaker_id));
  w.u32(uint32_t(ex.audio_tokens.ids.size()));
  for (int id : ex.audio_tokens.ids) w.i32(id);
  w.f64(ex.audio_tokens.token_rate_hz);
  write_fmat(w, ex.mel);
  write_fmat(w, ex.lip_video);
  write_fmat(w, ex.speaker_ref_mel);
  w.f64(ex.ground_truth_duration_s);
  w.u32(uint32_t(ex.tokens_per_char));
  return os.str();
}

AVExample decode_record(const std::string& payload) {
  std::istringstream is(payload, std::ios::binary);
  BinReader r(is);
  AVExample ex;
  ex.text_seq.raw = r.str();
  ex.text_seq.language_id = int(r.u32());
  uint32_t n_ids = r.u32();
  ex.text_seq.ids.resize(n_ids);
  for (auto& id : ex.text_seq.ids) id = r.i32();
  ex.speaker_id = int(r.u32());
  uint32_t n_tok = r.u32();
  ex.audio_tokens.ids.resize(n_tok);
  for (auto& id : ex.audio_tokens.ids) id = r.i32();
  ex.audio_tokens.token_rate_hz = r.f64();
  ex.mel = read_fmat(r);
  ex.lip_video = read_fmat(r);
  ex.speaker_ref_mel = read_fmat(r);
  ex.ground_truth_duration_s = r.f64();
  ex.tokens_per_char = int(r.u32());
  return ex;
}

json map_to_json(const CharTokenMap& map) {
  return json{{"silence_id", map.silence_id},
              {"variants_per_char", map.variants_per_char},
              {"variants", map.variants}};
}

CharTokenMap map_from_json(const json& j) {
  CharTokenMap map;
  map.silence_id = j.at("silence_id").get<int>();
  map.variants_per_char = j.at("variants_per_char").get<int>();
  map.variants = j.at("variants").get<std::vector<std::vector<int>>>();
  return map;
}

}  // namespace

DatasetManifest write_dataset(const std::vector<AVExample>& examples, const CorpusGenerator& gen,
                              const std::string& dir) {
  fs::create_directories(dir);
  const auto& p = gen.params();

  DatasetManifest mf;
  mf.format_version = kDatasetVersion;
  mf.example_count = examples.size();
  mf.alphabet = p.alphabet;
  mf.n_speakers = p.n_speakers;
  mf.n_languages = p.n_languages;
  mf.codebook_size = gen.codebook().k;
  mf.d_mel = p.d_mel;
  mf.d_viseme = p.d_viseme();
  mf.token_rate_hz = p.token_rate_hz;
  mf.video_fps = p.video_fps;
  mf.codebook_hash = gen.codebook().hash();
  mf.map = gen.map();

  save_codebook(gen.codebook(), (fs::path(dir) / "codebook.bin").string());

  {
    std::ofstream out(fs::path(dir) / "records.bin", std::ios::binary);
    if (!out) fail(ErrorCode::io_error, "cannot write records.bin in " + dir);
    BinWriter w(out);
    w.u32(kRecordsMagic);
    w.u32(kDatasetVersion);
    w.u32(uint32_t(examples.size()));
    for (const auto& ex : examples) {
      std::string payload = encode_record(ex);
      w.u32(uint32_t(payload.size()));
      w.u64(fnv1a64(payload.data(), payload.size()));
      w.bytes(payload.data(), payload.size());
    }
    if (!out) fail(ErrorCode::io_error, "write failed for records.bin");
  }

  json j{{"format_version", mf.format_version},
         {"example_count", mf.example_count},
         {"alphabet", mf.alphabet},
         {"n_speakers", mf.n_speakers},
         {"n_languages", mf.n_languages},
         {"codebook_size", mf.codebook_size},
         {"d_mel", mf.d_mel},
         {"d_viseme", mf.d_viseme},
         {"token_rate_hz", mf.token_rate_hz},
         {"video_fps", mf.video_fps},
         {"codebook_hash", mf.codebook_hash},
         {"char_token_map", map_to_json(mf.map)},
         {"records_file", "records.bin"},
         {"codebook_file", "codebook.bin"}};
  std::ofstream mout(fs::path(dir) / "manifest.json");
  if (!mout) fail(ErrorCode::io_error, "cannot write manifest.json in " + dir);
  mout << j.dump(2) << "\n";
  return mf;
}

Dataset read_dataset(const std::string& dir) {
  fs::path base(dir);
  std::ifstream min(base / "manifest.json");
  if (!min) fail(ErrorCode::not_found, "no manifest.json in " + dir);
  json j;
  try {
    min >> j;
  } catch (const json::exception& e) {
    fail(ErrorCode::corrupt_dataset, std::string("manifest parse error: ") + e.what());
  }

  Dataset ds;
  try {
    ds.manifest.format_version = j.at("format_version").get<uint32_t>();
    if (ds.manifest.format_version != kDatasetVersion)
      fail(ErrorCode::unsupported_format,
           "dataset format version " + std::to_string(ds.manifest.format_version));
    ds.manifest.example_count = j.at("example_count").get<uint64_t>();
    ds.manifest.alphabet = j.at("alphabet").get<std::string>();
    ds.manifest.n_speakers = j.at("n_speakers").get<int>();
    ds.manifest.n_languages = j.at("n_languages").get<int>();
    ds.manifest.codebook_size = j.at("codebook_size").get<int>();
    ds.manifest.d_mel = j.at("d_mel").get<int>();
    ds.manifest.d_viseme = j.at("d_viseme").get<int>();
    ds.manifest.token_rate_hz = j.at("token_rate_hz").get<double>();
    ds.manifest.video_fps = j.at("video_fps").get<double>();
    ds.manifest.codebook_hash = j.at("codebook_hash").get<uint64_t>();
    ds.manifest.map = map_from_json(j.at("char_token_map"));
  } catch (const json::exception& e) {
    fail(ErrorCode::corrupt_dataset, std::string("manifest field error: ") + e.what());
  }

  ds.codebook = load_codebook((base / "codebook.bin").string());
  if (ds.codebook.hash() != ds.manifest.codebook_hash)
    fail(ErrorCode::corrupt_dataset, "codebook hash does not match manifest");

  std::ifstream rin(base / "records.bin", std::ios::binary);
  if (!rin) fail(ErrorCode::not_found, "no records.bin in " + dir);
  BinReader r(rin);
  if (r.u32() != kRecordsMagic) fail(ErrorCode::unsupported_format, "not a dataset records file");
  uint32_t version = r.u32();
  if (version != kDatasetVersion)
    fail(ErrorCode::unsupported_format, "records format version " + std::to_string(version));
  uint32_t count = r.u32();
  if (count != ds.manifest.example_count)
    fail(ErrorCode::corrupt_dataset, "record count does not match manifest");
  ds.examples.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t len = r.u32();
    uint64_t checksum = r.u64();
    std::string payload(len, '\0');
    if (len) r.bytes(payload.data(), len);
    if (fnv1a64(payload.data(), payload.size()) != checksum)
      fail(ErrorCode::corrupt_dataset, "record " + std::to_string(i) + " checksum mismatch");
    ds.examples.push_back(decode_record(payload));
  }
  return ds;
}

}  // namespace avtts
