#ifndef AVTTS_TOKENS_HPP
#define AVTTS_TOKENS_HPP

#include <string>
#include <vector>

#include "avtts/common.hpp"
#include "avtts/tensor.hpp"

namespace avtts {

struct TextSequence {
  std::vector<int> ids;
  int language_id = 0;
  std::string raw;
};

// Character-level tokenizer over a fixed alphabet. Characters outside the
// alphabet map to a reserved UNK id; UNK decodes to '?'.
class TextTokenizer {
 public:
  TextTokenizer(std::string alphabet, int n_languages);

  TextSequence encode(const std::string& text, int language_id) const;
  std::string decode(const std::vector<int>& ids) const;

  int vocab_size() const { return int(alphabet_.size()) + 1; }
  int unk_id() const { return int(alphabet_.size()); }
  int alphabet_size() const { return int(alphabet_.size()); }
  const std::string& alphabet() const { return alphabet_; }
  int n_languages() const { return n_languages_; }
  bool in_alphabet(char c) const { return char_to_id_[static_cast<unsigned char>(c)] >= 0; }
  int char_id(char c) const { return char_to_id_[static_cast<unsigned char>(c)]; }

 private:
  std::string alphabet_;
  int n_languages_;
  int char_to_id_[256];
};

struct AudioCodebook {
  Tensor centroids;  // [K, D_mel]
  int k = 0;
  int d_mel = 0;

  int stop_id() const { return k; }
  uint64_t hash() const;
};

// k-means with a fixed iteration count. Initial centroids are K distinct
// frames sampled by seed; empty clusters re-seed to the farthest frame.
AudioCodebook fit_codebook(const Tensor& mel_frames, int k, uint64_t seed, int iterations = 25);

struct AudioTokenSequence {
  std::vector<int> ids;
  double token_rate_hz = 50.0;

  bool ends_with_stop(int stop_id) const { return !ids.empty() && ids.back() == stop_id; }
};

AudioTokenSequence tokenize_audio(const Tensor& mel_frames, const AudioCodebook& cb,
                                  bool append_stop);
Tensor detokenize_audio(const AudioTokenSequence& seq, const AudioCodebook& cb);

// first index of stop_id, or the sequence length when absent
int stop_index(const std::vector<int>& ids, int stop_id);

void save_codebook(const AudioCodebook& cb, const std::string& path);
AudioCodebook load_codebook(const std::string& path);

}  // namespace avtts

#endif  // AVTTS_TOKENS_HPP
