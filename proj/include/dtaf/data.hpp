#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dtaf/errors.hpp"
#include "dtaf/random.hpp"

namespace dtaf {

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;
};

struct SplitRatios {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

// T x N multivariate series, row-major (row = timestamp).
struct SeriesDataset {
  std::vector<double> values;
  std::vector<std::string> channel_names;
  std::size_t train_end = 0;
  std::size_t val_end = 0;
  ChannelStats train_stats;
  // Mean/std applied by the last standardize() call; empty if never applied.
  ChannelStats scaler;

  std::size_t length() const { return channels() ? values.size() / channels() : 0; }
  std::size_t channels() const { return channel_names.size(); }
  double at(std::size_t t, std::size_t c) const { return values[t * channels() + c]; }

  bool has_split() const { return train_end > 0; }

  std::pair<std::size_t, std::size_t> range(Split s) const {
    switch (s) {
      case Split::train: return {0, train_end};
      case Split::val: return {train_end, val_end};
      case Split::test: return {val_end, length()};
    }
    return {0, 0};
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '\n')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline ChannelStats column_stats(const SeriesDataset& ds, std::size_t begin, std::size_t end) {
  const std::size_t n = ds.channels();
  ChannelStats s{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
  if (end <= begin) return s;
  const double count = static_cast<double>(end - begin);
  for (std::size_t t = begin; t < end; ++t)
    for (std::size_t c = 0; c < n; ++c) s.mean[c] += ds.at(t, c);
  for (auto& m : s.mean) m /= count;
  for (std::size_t t = begin; t < end; ++t)
    for (std::size_t c = 0; c < n; ++c) {
      double dlt = ds.at(t, c) - s.mean[c];
      s.std[c] += dlt * dlt;
    }
  for (auto& v : s.std) v = std::sqrt(v / count);
  return s;
}

}  // namespace detail

// Reads a header-first CSV. A leading "date"/"timestamp" column is dropped;
// every other cell must parse as a finite real. Rows in messages are 1-based
// file line numbers (the header is row 1).
inline SeriesDataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open dataset file '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw IngestionError("dataset file '" + path + "' is empty");
  if (line.starts_with("\xEF\xBB\xBF")) line.erase(0, 3);
  auto header = detail::split_commas(line);
  std::size_t skip = 0;
  if (!header.empty()) {
    auto first = detail::lower(header[0]);
    if (first == "date" || first == "timestamp") skip = 1;
  }
  SeriesDataset ds;
  for (std::size_t i = skip; i < header.size(); ++i) ds.channel_names.emplace_back(header[i]);
  if (ds.channel_names.empty()) throw IngestionError("dataset file '" + path + "' has no value columns");

  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_commas(line);
    if (cells.size() != header.size()) {
      throw IngestionError(path + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                           " cells, header has " + std::to_string(header.size()));
    }
    for (std::size_t i = skip; i < cells.size(); ++i) {
      auto cell = cells[i];
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
        throw IngestionError(path + ": row " + std::to_string(row) + ", column " + std::to_string(i + 1) + " ('" +
                             std::string(header[i]) + "'): cannot parse '" + std::string(cell) + "' as a number");
      }
      ds.values.push_back(v);
    }
  }
  if (ds.values.empty()) throw IngestionError("dataset file '" + path + "' has no data rows");
  return ds;
}

inline void write_csv(const std::string& path, const SeriesDataset& ds) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write '" + path + "'");
  for (std::size_t c = 0; c < ds.channels(); ++c) out << (c ? "," : "") << ds.channel_names[c];
  out << '\n';
  char buf[64];
  for (std::size_t t = 0; t < ds.length(); ++t) {
    for (std::size_t c = 0; c < ds.channels(); ++c) {
      auto [end, ec] = std::to_chars(buf, buf + sizeof buf, ds.at(t, c));
      out << (c ? "," : "") << std::string_view(buf, static_cast<std::size_t>(end - buf));
    }
    out << '\n';
  }
}

// train_end = floor(train*T), val_end = train_end + floor(val*T); the rest is test.
// Also records the per-channel mean/std of the training rows.
inline SeriesDataset split(SeriesDataset ds, SplitRatios r) {
  if (!(r.train > 0 && r.val > 0 && r.test > 0) || std::abs(r.train + r.val + r.test - 1.0) > 1e-9) {
    throw ConfigError("split ratios must be positive and sum to 1, got " + std::to_string(r.train) + ":" +
                      std::to_string(r.val) + ":" + std::to_string(r.test));
  }
  const std::size_t t = ds.length();
  // The 1e-9 nudge keeps exact products like 0.7*10 from flooring to 6.
  auto take = [t](double frac) { return static_cast<std::size_t>(std::floor(frac * static_cast<double>(t) + 1e-9)); };
  ds.train_end = take(r.train);
  ds.val_end = ds.train_end + take(r.val);
  if (!(ds.train_end > 0 && ds.val_end > ds.train_end && ds.val_end <= t)) {
    throw ConfigError("split of " + std::to_string(t) + " rows leaves an empty train or validation segment");
  }
  ds.train_stats = detail::column_stats(ds, 0, ds.train_end);
  return ds;
}

// z-scores every row with statistics estimated on the training rows only.
// Channels with (numerically) zero training std use 1.
inline SeriesDataset standardize(SeriesDataset ds) {
  if (!ds.has_split()) throw ConfigError("standardize() needs split() first");
  ChannelStats stats = detail::column_stats(ds, 0, ds.train_end);
  for (std::size_t c = 0; c < stats.std.size(); ++c) {
    // Rounding leaves a ~1e-16 relative spread on constant columns.
    if (!(stats.std[c] > 1e-12 * std::max(1.0, std::abs(stats.mean[c])))) stats.std[c] = 1.0;
  }
  const std::size_t n = ds.channels();
  for (std::size_t t = 0; t < ds.length(); ++t)
    for (std::size_t c = 0; c < n; ++c) ds.values[t * n + c] = (ds.values[t * n + c] - stats.mean[c]) / stats.std[c];
  ds.scaler = std::move(stats);
  ds.train_stats = detail::column_stats(ds, 0, ds.train_end);
  return ds;
}

// Univariate windows: B inputs of length input_len with adjacent targets of
// length horizon. Row b of inputs/targets belongs to channel_ids[b].
struct WindowBatch {
  std::size_t input_len = 0;
  std::size_t horizon = 0;
  std::vector<double> inputs;   // B x input_len
  std::vector<double> targets;  // B x horizon
  std::vector<std::size_t> channel_ids;
  std::vector<std::size_t> origin_indices;

  std::size_t size() const { return channel_ids.size(); }
};

// Lazily materialized set of windows inside one split. Holds its own copy of
// the split rows, so it stays valid independent of the dataset.
class WindowSet {
 public:
  WindowSet(const SeriesDataset& ds, Split which, std::size_t input_len, std::size_t horizon, std::size_t stride)
      : input_len_(input_len), horizon_(horizon), channels_(ds.channels()) {
    if (!ds.has_split()) throw ConfigError("make_windows() needs split() first");
    if (input_len == 0 || horizon == 0 || stride == 0) {
      throw ConfigError("windowing needs positive input length, horizon and stride");
    }
    auto [begin, end] = ds.range(which);
    begin_ = begin;
    const std::size_t len = end - begin;
    if (len < input_len + horizon) {
      throw WindowingError("split '" + to_string(which) + "' has " + std::to_string(len) + " rows, windows need " +
                           std::to_string(input_len + horizon) + " (input " + std::to_string(input_len) +
                           " + horizon " + std::to_string(horizon) + ")");
    }
    rows_.assign(ds.values.begin() + static_cast<std::ptrdiff_t>(begin * channels_),
                 ds.values.begin() + static_cast<std::ptrdiff_t>(end * channels_));
    const std::size_t count = (len - input_len - horizon) / stride + 1;
    for (std::size_t w = 0; w < count; ++w) origins_.push_back(w * stride);
  }

  std::size_t size() const { return origins_.size() * channels_; }
  std::size_t channels() const { return channels_; }
  std::size_t input_len() const { return input_len_; }
  std::size_t horizon() const { return horizon_; }

  // Window i is origin i / channels, channel i % channels.
  std::size_t origin(std::size_t i) const { return begin_ + origins_[i / channels_]; }
  std::size_t channel(std::size_t i) const { return i % channels_; }

  WindowBatch gather(std::span<const std::size_t> ids) const {
    WindowBatch b;
    b.input_len = input_len_;
    b.horizon = horizon_;
    b.inputs.reserve(ids.size() * input_len_);
    b.targets.reserve(ids.size() * horizon_);
    for (auto i : ids) {
      if (i >= size()) throw ContractError("window index out of range");
      const std::size_t o = origins_[i / channels_], c = i % channels_;
      for (std::size_t t = 0; t < input_len_; ++t) b.inputs.push_back(rows_[(o + t) * channels_ + c]);
      for (std::size_t t = 0; t < horizon_; ++t) b.targets.push_back(rows_[(o + input_len_ + t) * channels_ + c]);
      b.channel_ids.push_back(c);
      b.origin_indices.push_back(begin_ + o);
    }
    return b;
  }

  WindowBatch range(std::size_t first, std::size_t count) const {
    std::vector<std::size_t> ids;
    for (std::size_t i = first; i < std::min(size(), first + count); ++i) ids.push_back(i);
    return gather(ids);
  }

 private:
  std::size_t input_len_, horizon_, channels_;
  std::size_t begin_ = 0;
  std::vector<double> rows_;
  std::vector<std::size_t> origins_;
};

inline WindowSet make_windows(const SeriesDataset& ds, Split which, std::size_t input_len, std::size_t horizon,
                              std::size_t stride = 1) {
  return WindowSet(ds, which, input_len, horizon, stride);
}

namespace synthetic {

// Sinusoid whose amplitude switches between regimes, plus a linear trend and
// Gaussian noise. Regime lengths and amplitudes are drawn from `seed`.
struct RegimeSeriesOptions {
  std::size_t length = 4000;
  double period = 24.0;
  double trend_per_step = 1e-3;
  double noise_sigma = 0.1;
  std::size_t min_regime = 200;
  std::size_t max_regime = 600;
  double low_amplitude = 0.5;
  double high_amplitude = 2.0;
  std::size_t channels = 1;
};

inline SeriesDataset regime_switching(const RegimeSeriesOptions& o, std::uint64_t seed) {
  Engine eng(derive_seed(seed, 0x5e7));
  SeriesDataset ds;
  for (std::size_t c = 0; c < o.channels; ++c) ds.channel_names.push_back("ch" + std::to_string(c));
  ds.values.assign(o.length * o.channels, 0.0);
  for (std::size_t c = 0; c < o.channels; ++c) {
    const double phase = uniform(eng, 0.0, 2.0 * std::numbers::pi);
    std::size_t t = 0;
    bool high = uniform(eng, 0.0, 1.0) < 0.5;
    while (t < o.length) {
      auto span = o.min_regime + static_cast<std::size_t>(eng() % (o.max_regime - o.min_regime + 1));
      const double amp = high ? o.high_amplitude : o.low_amplitude;
      for (std::size_t k = 0; k < span && t < o.length; ++k, ++t) {
        const double tt = static_cast<double>(t);
        ds.values[t * o.channels + c] = amp * std::sin(2.0 * std::numbers::pi * tt / o.period + phase) +
                                        o.trend_per_step * tt + o.noise_sigma * normal(eng);
      }
      high = !high;
    }
  }
  return ds;
}

inline SeriesDataset from_function(std::size_t length, std::size_t channels, auto&& f) {
  SeriesDataset ds;
  for (std::size_t c = 0; c < channels; ++c) ds.channel_names.push_back("ch" + std::to_string(c));
  ds.values.resize(length * channels);
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t c = 0; c < channels; ++c) ds.values[t * channels + c] = f(t, c);
  return ds;
}

}  // namespace synthetic

}  // namespace dtaf
