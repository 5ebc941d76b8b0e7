#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "amad/errors.hpp"
#include "amad/rng.hpp"
#include "amad/tensor.hpp"

namespace amad {

struct TimeSeries {
  std::size_t length = 0;
  std::size_t dims = 0;
  std::vector<double> values;           // row-major [length, dims]
  std::vector<std::string> channels;
  std::vector<std::uint8_t> labels;     // empty, or one 0/1 per row (test sets)

  double at(std::size_t t, std::size_t c) const { return values[t * dims + c]; }
  double& at(std::size_t t, std::size_t c) { return values[t * dims + c]; }
};

// ---------------------------------------------------------------------------
// normalisation
// ---------------------------------------------------------------------------

struct NormStats {
  std::vector<double> mean, stddev;  // per channel, fitted on training data
};

inline NormStats fit_norm_stats(const TimeSeries& s) {
  if (s.length == 0) throw DataError("fit_norm_stats: empty series");
  NormStats st;
  st.mean.assign(s.dims, 0.0);
  st.stddev.assign(s.dims, 0.0);
  for (std::size_t t = 0; t < s.length; ++t)
    for (std::size_t c = 0; c < s.dims; ++c) st.mean[c] += s.at(t, c);
  for (std::size_t c = 0; c < s.dims; ++c) st.mean[c] /= static_cast<double>(s.length);
  for (std::size_t t = 0; t < s.length; ++t)
    for (std::size_t c = 0; c < s.dims; ++c) {
      const double d = s.at(t, c) - st.mean[c];
      st.stddev[c] += d * d;
    }
  for (std::size_t c = 0; c < s.dims; ++c) {
    st.stddev[c] = std::sqrt(st.stddev[c] / static_cast<double>(s.length));
  }
  return st;
}

constexpr double kStdFloor = 1e-8;

inline TimeSeries zscore(const TimeSeries& s, const NormStats& st) {
  if (st.mean.size() != s.dims) {
    throw ShapeError("zscore: stats for " + std::to_string(st.mean.size()) + " channels, series has " +
                     std::to_string(s.dims));
  }
  TimeSeries out = s;
  for (std::size_t t = 0; t < s.length; ++t)
    for (std::size_t c = 0; c < s.dims; ++c) {
      out.at(t, c) = (s.at(t, c) - st.mean[c]) / std::max(st.stddev[c], kStdFloor);
    }
  return out;
}

inline TimeSeries denormalize(const TimeSeries& s, const NormStats& st) {
  if (st.mean.size() != s.dims) {
    throw ShapeError("denormalize: stats for " + std::to_string(st.mean.size()) +
                     " channels, series has " + std::to_string(s.dims));
  }
  TimeSeries out = s;
  for (std::size_t t = 0; t < s.length; ++t)
    for (std::size_t c = 0; c < s.dims; ++c) {
      out.at(t, c) = s.at(t, c) * std::max(st.stddev[c], kStdFloor) + st.mean[c];
    }
  return out;
}

// ---------------------------------------------------------------------------
// windowing
// ---------------------------------------------------------------------------

struct WindowBatch {
  std::size_t window_len = 0;
  std::vector<std::size_t> offsets;
};

inline WindowBatch sliding_windows(const TimeSeries& s, std::size_t window_len,
                                   std::size_t stride) {
  if (stride < 1) throw ConfigError("sliding_windows: stride must be >= 1");
  if (s.length < window_len || window_len == 0) {
    throw DataError("sliding_windows: series length " + std::to_string(s.length) +
                    " shorter than window " + std::to_string(window_len));
  }
  WindowBatch wb;
  wb.window_len = window_len;
  for (std::size_t off = 0; off + window_len <= s.length; off += stride) wb.offsets.push_back(off);
  return wb;
}

// Copies windows offsets[first..first+count) into a [count, N, dims] tensor.
inline Tensor materialize_windows(const TimeSeries& s, const std::vector<std::size_t>& offsets,
                                  std::size_t first, std::size_t count, std::size_t window_len) {
  Tensor out(Shape{count, window_len, s.dims});
  double* O = out.data();
  for (std::size_t b = 0; b < count; ++b) {
    const std::size_t off = offsets[first + b];
    for (std::size_t p = 0; p < window_len; ++p)
      for (std::size_t c = 0; c < s.dims; ++c)
        O[(b * window_len + p) * s.dims + c] = s.at(off + p, c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// CSV contract: UTF-8, header row, comma separators, optional trailing
// "label" column of {0,1}. NaN or empty cells are imputed by carrying the
// previous row's value forward (zero on the first row).
inline TimeSeries load_series_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  std::vector<std::string> header = detail::split_csv_line(line);
  if (header.empty()) throw DataError(path + ": empty header");
  const bool has_labels = header.back() == "label";
  TimeSeries s;
  s.dims = header.size() - (has_labels ? 1 : 0);
  if (s.dims == 0) throw DataError(path + ": no value columns");
  s.channels.assign(header.begin(), header.begin() + static_cast<long>(s.dims));

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw DataError(path + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(header.size()) + " cells, got " +
                      std::to_string(cells.size()));
    }
    for (std::size_t c = 0; c < s.dims; ++c) {
      const std::string& cell = cells[c];
      double v;
      bool missing = cell.empty();
      if (!missing) {
        char* end = nullptr;
        v = std::strtod(cell.c_str(), &end);
        if (end != cell.c_str() + cell.size()) {
          throw DataError(path + ":" + std::to_string(line_no) + ": non-numeric cell '" + cell +
                          "'");
        }
        if (std::isnan(v)) missing = true;
      }
      if (missing) {
        v = s.length == 0 ? 0.0 : s.values[(s.length - 1) * s.dims + c];
      }
      s.values.push_back(v);
    }
    if (has_labels) {
      const std::string& cell = cells.back();
      if (cell != "0" && cell != "1") {
        throw DataError(path + ":" + std::to_string(line_no) + ": label must be 0 or 1, got '" +
                        cell + "'");
      }
      s.labels.push_back(cell == "1" ? 1 : 0);
    }
    ++s.length;
  }
  return s;
}

inline void save_series_csv(const TimeSeries& s, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  for (std::size_t c = 0; c < s.dims; ++c) {
    if (c) out << ',';
    out << (c < s.channels.size() ? s.channels[c] : "c" + std::to_string(c));
  }
  const bool has_labels = !s.labels.empty();
  if (has_labels) out << ",label";
  out << '\n';
  for (std::size_t t = 0; t < s.length; ++t) {
    for (std::size_t c = 0; c < s.dims; ++c) {
      if (c) out << ',';
      out << detail::format_double(s.at(t, c));
    }
    if (has_labels) out << ',' << static_cast<int>(s.labels[t]);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// synthetic generator
// ---------------------------------------------------------------------------

struct AnomalySpec {
  double fraction = 0.01;  // target anomalous share of the test series
};

struct SynthResult {
  TimeSeries train;
  TimeSeries test;  // labeled
};

// Per channel: two seeded sinusoids plus Gaussian noise (sigma 0.05). The
// test segment continues the train phase and receives three kinds of
// labeled anomalies: point spikes (+5 channel-sigma, width 1), level
// shifts (+3 channel-sigma, width 10-30) and noise bursts (noise sigma
// x5, width 10-30), cycled until the requested point budget is met.
inline SynthResult synth_generate(std::uint64_t seed, std::size_t train_len, std::size_t test_len,
                                  std::size_t dims, const AnomalySpec& spec = {}) {
  if (dims == 0 || train_len == 0 || test_len == 0) {
    throw ConfigError("synth_generate: lengths and dims must be positive");
  }
  if (spec.fraction < 0.0) throw ConfigError("synth_generate: negative anomaly fraction");
  if (spec.fraction >= 0.5) throw ConfigError("synth_generate: anomaly fraction >= 50% rejected");
  constexpr double kNoiseSigma = 0.05;
  Rng rng(seed);

  struct ChannelSpec {
    double period1, phase1, period2, phase2;
  };
  std::vector<ChannelSpec> ch(dims);
  for (std::size_t c = 0; c < dims; ++c) {
    ch[c].period1 = rng.uniform(20.0, 200.0);
    ch[c].phase1 = rng.uniform(0.0, 6.28318530717958648);
    ch[c].period2 = rng.uniform(10.0, 50.0);
    ch[c].phase2 = rng.uniform(0.0, 6.28318530717958648);
  }
  auto clean = [&](std::size_t t, std::size_t c) {
    const double tt = static_cast<double>(t);
    return std::sin(6.28318530717958648 * tt / ch[c].period1 + ch[c].phase1) +
           0.4 * std::sin(6.28318530717958648 * tt / ch[c].period2 + ch[c].phase2);
  };

  const std::size_t total = train_len + test_len;
  std::vector<double> sigma(dims, 0.0);
  {
    std::vector<double> mean(dims, 0.0);
    for (std::size_t t = 0; t < total; ++t)
      for (std::size_t c = 0; c < dims; ++c) mean[c] += clean(t, c);
    for (std::size_t c = 0; c < dims; ++c) mean[c] /= static_cast<double>(total);
    for (std::size_t t = 0; t < total; ++t)
      for (std::size_t c = 0; c < dims; ++c) {
        const double d = clean(t, c) - mean[c];
        sigma[c] += d * d;
      }
    for (std::size_t c = 0; c < dims; ++c)
      sigma[c] = std::sqrt(sigma[c] / static_cast<double>(total));
  }

  SynthResult out;
  out.train.length = train_len;
  out.train.dims = dims;
  out.test.length = test_len;
  out.test.dims = dims;
  for (std::size_t c = 0; c < dims; ++c) {
    out.train.channels.push_back("c" + std::to_string(c));
    out.test.channels.push_back("c" + std::to_string(c));
  }
  out.train.values.resize(train_len * dims);
  out.test.values.resize(test_len * dims);
  out.test.labels.assign(test_len, 0);
  for (std::size_t t = 0; t < total; ++t)
    for (std::size_t c = 0; c < dims; ++c) {
      const double v = clean(t, c) + kNoiseSigma * rng.normal();
      if (t < train_len) {
        out.train.at(t, c) = v;
      } else {
        out.test.at(t - train_len, c) = v;
      }
    }

  const std::size_t budget =
      static_cast<std::size_t>(std::llround(spec.fraction * static_cast<double>(test_len)));
  std::vector<std::uint8_t> occupied(test_len, 0);
  std::size_t used = 0;
  int kind = 0;
  while (used < budget) {
    std::size_t width = kind == 0 ? 1 : static_cast<std::size_t>(rng.uniform_int(10, 30));
    if (used + width > budget) width = budget - used;  // exact point budget
    if (width == 0) break;
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      if (width + 2 > test_len) break;
      const std::size_t start = rng.uniform_int(1, test_len - width - 1);
      bool free = true;
      for (std::size_t t = start - 1; t < start + width + 1 && free; ++t) free = !occupied[t];
      if (!free) continue;
      for (std::size_t t = start; t < start + width; ++t) {
        occupied[t] = 1;
        out.test.labels[t] = 1;
        for (std::size_t c = 0; c < dims; ++c) {
          if (kind == 0) {
            out.test.at(t, c) += 5.0 * sigma[c];
          } else if (kind == 1) {
            out.test.at(t, c) += 3.0 * sigma[c];
          } else {
            out.test.at(t, c) += 5.0 * kNoiseSigma * rng.normal();
          }
        }
      }
      used += width;
      placed = true;
    }
    if (!placed) break;  // no room left
    kind = (kind + 1) % 3;
  }
  return out;
}

}  // namespace amad
