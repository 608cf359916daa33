#ifndef AVTTS_CORPUS_HPP
#define AVTTS_CORPUS_HPP

#include <string>
#include <utility>
#include <vector>

#include "avtts/tokens.hpp"

namespace avtts {

// float matrix: dataset payloads are stored as 32-bit floats on disk, so
// examples hold f32 in memory to keep round-trips bit-exact.
struct FMat {
  int rows = 0;
  int cols = 0;
  std::vector<float> v;

  FMat() = default;
  FMat(int r, int c) : rows(r), cols(c), v(size_t(r) * size_t(c), 0.0f) {}
  float& at(int r, int c) { return v[size_t(r) * cols + c]; }
  float at(int r, int c) const { return v[size_t(r) * cols + c]; }
  Tensor to_tensor() const {
    Tensor t({rows, cols});
    for (size_t i = 0; i < v.size(); ++i) t.v[i] = double(v[i]);
    return t;
  }
  bool operator==(const FMat& o) const = default;
};

struct UtteranceSpec {
  std::string text;
  int speaker_id = 0;
  int language_id = 0;
  int tokens_per_char = 4;
  std::vector<std::pair<int, int>> pause_positions;  // (char index, length in audio tokens)
  double noise_std = 0.05;
};

struct AVExample {
  TextSequence text_seq;
  int speaker_id = 0;
  AudioTokenSequence audio_tokens;  // ends with stop_id
  FMat mel;                         // [T_a, D_mel]
  FMat lip_video;                   // [T_v, D_viseme] at video_fps
  FMat speaker_ref_mel;             // [T_r, D_mel]
  double ground_truth_duration_s = 0.0;
  int tokens_per_char = 4;
};

// Deterministic speaker-dependent character-to-token assignment. Every
// character owns a small block of codebook ids; a speaker picks one variant
// per character. Decoding a token back to its character ignores the variant,
// which is what makes the map invertible.
struct CharTokenMap {
  int silence_id = 0;
  int variants_per_char = 3;
  std::vector<std::vector<int>> variants;  // [alphabet_size][variants_per_char]

  int token_for(int speaker_id, int char_id) const;
  // -1 for silence or unassigned ids
  int char_for(int token_id) const;
};

struct CorpusParams {
  std::string alphabet = "abcdefghijklmno ";
  int n_speakers = 4;
  int n_languages = 2;
  int codebook_size = 64;
  int d_mel = 16;
  double token_rate_hz = 50.0;
  double video_fps = 25.0;

  int d_viseme() const { return int(alphabet.size()) + 1; }
  int neutral_viseme() const { return int(alphabet.size()); }
};

// Builds a codebook whose centroids recover a set of well-separated anchor
// mels (index 0 reserved for silence), then derives the character map.
struct CorpusAssets {
  AudioCodebook codebook;
  CharTokenMap map;
};

CorpusAssets build_corpus_assets(const CorpusParams& params, uint64_t seed);

class CorpusGenerator {
 public:
  CorpusGenerator(CorpusParams params, AudioCodebook cb, CharTokenMap map);

  AVExample generate(const UtteranceSpec& spec, uint64_t seed) const;

  // Random utterance specs for dataset generation.
  struct SamplingConfig {
    int min_words = 2, max_words = 4;
    int min_word_len = 2, max_word_len = 5;
    std::vector<int> tokens_per_char_choices = {3, 4, 5};
    double pause_prob = 0.5;
    int min_pause = 4, max_pause = 12;
    double noise_std = 0.05;
  };
  UtteranceSpec sample_spec(const SamplingConfig& cfg, uint64_t seed) const;

  const CorpusParams& params() const { return params_; }
  const AudioCodebook& codebook() const { return cb_; }
  const CharTokenMap& map() const { return map_; }
  const TextTokenizer& tokenizer() const { return tokenizer_; }

 private:
  CorpusParams params_;
  AudioCodebook cb_;
  CharTokenMap map_;
  TextTokenizer tokenizer_;
};

// Token-sequence recognition through the invertible character map: maps each
// token to its character class, collapses runs, drops silence. Serves as the
// recognition oracle for WER/CER, isolating synthesis errors from recognizer
// errors.
std::string recognize_tokens(const std::vector<int>& ids, const CharTokenMap& map,
                             const std::string& alphabet, int tokens_per_char, int stop_id);

struct DatasetManifest {
  uint32_t format_version = 1;
  uint64_t example_count = 0;
  std::string alphabet;
  int n_speakers = 0;
  int n_languages = 2;
  int codebook_size = 0;
  int d_mel = 0;
  int d_viseme = 0;
  double token_rate_hz = 50.0;
  double video_fps = 25.0;
  uint64_t codebook_hash = 0;
  CharTokenMap map;
};

struct Dataset {
  DatasetManifest manifest;
  AudioCodebook codebook;
  std::vector<AVExample> examples;
};

DatasetManifest write_dataset(const std::vector<AVExample>& examples, const CorpusGenerator& gen,
                              const std::string& dir);
Dataset read_dataset(const std::string& dir);

}  // namespace avtts

#endif  // AVTTS_CORPUS_HPP
