#include "avtts/tensor.hpp"

namespace avtts {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_input: return "InvalidInput";
    case ErrorCode::invalid_language: return "InvalidLanguage";
    case ErrorCode::insufficient_data: return "InsufficientData";
    case ErrorCode::shape_error: return "ShapeError";
    case ErrorCode::malformed_sequence: return "MalformedSequence";
    case ErrorCode::empty_input: return "EmptyInput";
    case ErrorCode::missing_modality: return "MissingModality";
    case ErrorCode::sequence_too_long: return "SequenceTooLong";
    case ErrorCode::invalid_state: return "InvalidState";
    case ErrorCode::invalid_distribution: return "InvalidDistribution";
    case ErrorCode::unsupported_format: return "UnsupportedFormat";
    case ErrorCode::corrupt_dataset: return "CorruptDataset";
    case ErrorCode::corrupt_checkpoint: return "CorruptCheckpoint";
    case ErrorCode::config_mismatch: return "ConfigMismatch";
    case ErrorCode::divergence: return "DivergenceError";
    case ErrorCode::invalid_config: return "InvalidConfig";
    case ErrorCode::empty_audio: return "EmptyAudio";
    case ErrorCode::not_found: return "NotFound";
    case ErrorCode::config_error: return "ConfigError";
    case ErrorCode::io_error: return "IoError";
  }
  return "Error";
}

double dot(const double* a, const double* b, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void matmul(const Tensor& x, const Tensor& w, const double* b, Tensor& y, bool accumulate) {
  const int t_len = x.dim(0), in = x.dim(1), out = w.dim(1);
  if (w.dim(0) != in) fail(ErrorCode::shape_error, "matmul inner dimension mismatch");
  if (y.rank() != 2 || y.dim(0) != t_len || y.dim(1) != out) y = Tensor({t_len, out});
  for (int t = 0; t < t_len; ++t) {
    double* yr = y.row(t);
    if (!accumulate) {
      if (b) {
        for (int o = 0; o < out; ++o) yr[o] = b[o];
      } else {
        for (int o = 0; o < out; ++o) yr[o] = 0.0;
      }
    } else if (b) {
      for (int o = 0; o < out; ++o) yr[o] += b[o];
    }
    const double* xr = x.row(t);
    for (int i = 0; i < in; ++i) {
      const double xv = xr[i];
      if (xv == 0.0) continue;
      const double* wr = w.row(i);
      for (int o = 0; o < out; ++o) yr[o] += xv * wr[o];
    }
  }
}

void matmul_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor* dx, Tensor& dw,
                     double* db) {
  const int t_len = x.dim(0), in = x.dim(1), out = w.dim(1);
  for (int t = 0; t < t_len; ++t) {
    const double* dyr = dy.row(t);
    const double* xr = x.row(t);
    if (dx) {
      double* dxr = dx->row(t);
      for (int i = 0; i < in; ++i) dxr[i] += dot(w.row(i), dyr, out);
    }
    for (int i = 0; i < in; ++i) {
      const double xv = xr[i];
      if (xv == 0.0) continue;
      double* dwr = dw.row(i);
      for (int o = 0; o < out; ++o) dwr[o] += xv * dyr[o];
    }
    if (db) {
      for (int o = 0; o < out; ++o) db[o] += dyr[o];
    }
  }
}

}  // namespace avtts
