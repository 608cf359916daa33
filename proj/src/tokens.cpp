#include "avtts/tokens.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "avtts/binio.hpp"

namespace avtts {

TextTokenizer::TextTokenizer(std::string alphabet, int n_languages)
    : alphabet_(std::move(alphabet)), n_languages_(n_languages) {
  if (alphabet_.empty()) fail(ErrorCode::invalid_config, "tokenizer alphabet is empty");
  if (n_languages_ < 1) fail(ErrorCode::invalid_config, "tokenizer needs at least one language");
  std::fill(std::begin(char_to_id_), std::end(char_to_id_), -1);
  for (size_t i = 0; i < alphabet_.size(); ++i) {
    unsigned char c = static_cast<unsigned char>(alphabet_[i]);
    if (char_to_id_[c] >= 0) fail(ErrorCode::invalid_config, "duplicate character in alphabet");
    char_to_id_[c] = int(i);
  }
}

TextSequence TextTokenizer::encode(const std::string& text, int language_id) const {
  if (text.empty()) fail(ErrorCode::invalid_input, "cannot encode empty text");
  if (language_id < 0 || language_id >= n_languages_)
    fail(ErrorCode::invalid_language, "language_id " + std::to_string(language_id) +
                                          " outside [0, " + std::to_string(n_languages_) + ")");
  TextSequence seq;
  seq.language_id = language_id;
  seq.raw = text;
  seq.ids.reserve(text.size());
  for (char c : text) {
    int id = char_to_id_[static_cast<unsigned char>(c)];
    seq.ids.push_back(id >= 0 ? id : unk_id());
  }
  return seq;
}

std::string TextTokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= vocab_size())
      fail(ErrorCode::invalid_input, "token id " + std::to_string(id) + " outside vocabulary");
    out.push_back(id == unk_id() ? '?' : alphabet_[size_t(id)]);
  }
  return out;
}

uint64_t AudioCodebook::hash() const {
  uint64_t h = fnv1a64(&k, sizeof(k));
  h = fnv1a64(&d_mel, sizeof(d_mel), h);
  h = fnv1a64(centroids.v.data(), centroids.v.size() * sizeof(double), h);
  return h;
}

namespace {

int nearest_centroid(const double* frame, const Tensor& centroids, int d) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int c = 0; c < centroids.dim(0); ++c) {
    const double* cr = centroids.row(c);
    double dist = 0.0;
    for (int i = 0; i < d; ++i) {
      double diff = frame[i] - cr[i];
      dist += diff * diff;
    }
    if (dist < best_d) {  // strict: ties keep the lowest id
      best_d = dist;
      best = c;
    }
  }
  return best;
}

}  // namespace

AudioCodebook fit_codebook(const Tensor& mel_frames, int k, uint64_t seed, int iterations) {
  const int n = mel_frames.dim(0), d = mel_frames.dim(1);
  if (k < 1) fail(ErrorCode::invalid_config, "codebook size must be >= 1");
  if (n < k)
    fail(ErrorCode::insufficient_data,
         std::to_string(n) + " frames cannot seed " + std::to_string(k) + " centroids");
  for (double x : mel_frames.v)
    if (!std::isfinite(x)) fail(ErrorCode::invalid_input, "non-finite mel frame");

  AudioCodebook cb;
  cb.k = k;
  cb.d_mel = d;
  cb.centroids = Tensor({k, d});

  // init: k distinct frame indices by partial Fisher-Yates
  Rng rng(seed);
  std::vector<int> idx(size_t(n), 0);
  for (int i = 0; i < n; ++i) idx[size_t(i)] = i;
  for (int i = 0; i < k; ++i) {
    int j = int(rng.next_int(i, n - 1));
    std::swap(idx[size_t(i)], idx[size_t(j)]);
    std::memcpy(cb.centroids.row(i), mel_frames.row(idx[size_t(i)]), sizeof(double) * size_t(d));
  }

  std::vector<int> assign(size_t(n), 0);
  std::vector<double> frame_dist(size_t(n), 0.0);
  Tensor sums({k, d});
  std::vector<int64_t> counts(size_t(k), 0);
  for (int it = 0; it < iterations; ++it) {
    sums.zero();
    std::fill(counts.begin(), counts.end(), int64_t(0));
    for (int f = 0; f < n; ++f) {
      int c = nearest_centroid(mel_frames.row(f), cb.centroids, d);
      assign[size_t(f)] = c;
      const double* fr = mel_frames.row(f);
      const double* cr = cb.centroids.row(c);
      double dist = 0.0;
      for (int i = 0; i < d; ++i) {
        double diff = fr[i] - cr[i];
        dist += diff * diff;
      }
      frame_dist[size_t(f)] = dist;
      double* sr = sums.row(c);
      for (int i = 0; i < d; ++i) sr[i] += fr[i];
      counts[size_t(c)]++;
    }
    for (int c = 0; c < k; ++c) {
      if (counts[size_t(c)] == 0) {
        // re-seed an empty cluster to the frame farthest from its centroid
        int far = 0;
        for (int f = 1; f < n; ++f)
          if (frame_dist[size_t(f)] > frame_dist[size_t(far)]) far = f;
        std::memcpy(cb.centroids.row(c), mel_frames.row(far), sizeof(double) * size_t(d));
        frame_dist[size_t(far)] = 0.0;
        continue;
      }
      double* cr = cb.centroids.row(c);
      const double* sr = sums.row(c);
      for (int i = 0; i < d; ++i) cr[i] = sr[i] / double(counts[size_t(c)]);
    }
  }
  return cb;
}

AudioTokenSequence tokenize_audio(const Tensor& mel_frames, const AudioCodebook& cb,
                                  bool append_stop) {
  if (mel_frames.rank() != 2 || mel_frames.dim(1) != cb.d_mel)
    fail(ErrorCode::shape_error, "mel frame dimension does not match codebook");
  AudioTokenSequence seq;
  const int t_len = mel_frames.dim(0);
  seq.ids.reserve(size_t(t_len) + 1);
  for (int t = 0; t < t_len; ++t)
    seq.ids.push_back(nearest_centroid(mel_frames.row(t), cb.centroids, cb.d_mel));
  if (append_stop) seq.ids.push_back(cb.stop_id());
  return seq;
}

Tensor detokenize_audio(const AudioTokenSequence& seq, const AudioCodebook& cb) {
  int n = int(seq.ids.size());
  int t_len = n;
  for (int i = 0; i < n; ++i) {
    int id = seq.ids[size_t(i)];
    if (id < 0 || id > cb.stop_id())
      fail(ErrorCode::malformed_sequence, "token id outside codebook range");
    if (id == cb.stop_id()) {
      if (i != n - 1) fail(ErrorCode::malformed_sequence, "stop token before final position");
      t_len = n - 1;
    }
  }
  Tensor mel({t_len, cb.d_mel});
  for (int t = 0; t < t_len; ++t)
    std::memcpy(mel.row(t), cb.centroids.row(seq.ids[size_t(t)]), sizeof(double) * size_t(cb.d_mel));
  return mel;
}

int stop_index(const std::vector<int>& ids, int stop_id) {
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == stop_id) return int(i);
  return int(ids.size());
}

namespace {
constexpr uint32_t kCodebookMagic = 0x4243'5641;  // "AVCB"
constexpr uint32_t kCodebookVersion = 1;
}  // namespace

void save_codebook(const AudioCodebook& cb, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io_error, "cannot open " + path + " for writing");
  BinWriter w(out);
  w.u32(kCodebookMagic);
  w.u32(kCodebookVersion);
  w.u32(uint32_t(cb.k));
  w.u32(uint32_t(cb.d_mel));
  for (double x : cb.centroids.v) w.f64(x);
  if (!out) fail(ErrorCode::io_error, "write failed for " + path);
}

AudioCodebook load_codebook(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::not_found, "cannot open codebook file " + path);
  BinReader r(in);
  if (r.u32() != kCodebookMagic) fail(ErrorCode::unsupported_format, "not a codebook file");
  uint32_t version = r.u32();
  if (version != kCodebookVersion)
    fail(ErrorCode::unsupported_format, "codebook format version " + std::to_string(version));
  AudioCodebook cb;
  cb.k = int(r.u32());
  cb.d_mel = int(r.u32());
  if (cb.k < 1 || cb.k > (1 << 20) || cb.d_mel < 1 || cb.d_mel > (1 << 16))
    fail(ErrorCode::corrupt_dataset, "implausible codebook header");
  cb.centroids = Tensor({cb.k, cb.d_mel});
  for (double& x : cb.centroids.v) x = r.f64();
  if (!in) fail(ErrorCode::corrupt_dataset, "truncated codebook file");
  return cb;
}

}  // namespace avtts
