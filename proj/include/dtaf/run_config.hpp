#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dtaf/config.hpp"
#include "dtaf/data.hpp"
#include "dtaf/errors.hpp"
#include "dtaf/io.hpp"
#include "dtaf/train.hpp"

namespace dtaf {

// Everything one CLI invocation needs. Loaded from a sectioned text file:
//
//   [data]    path | synthetic, length, data_seed, split, input_len, horizons,
//             train_stride, eval_stride
//   [model]   patch_len, stride, d_model, n_experts, expert_depth, top_k,
//             pool_kernel, dropout
//   [train]   alpha, beta, lr, beta1, beta2, eps, weight_decay, batch_size,
//             max_epochs, patience, clip_norm, eval_batch, seeds
//   [output]  dir
//
// Relative paths resolve against the config file's directory.
struct RunConfig {
  std::filesystem::path data_path;  // empty when synthetic
  std::string synthetic;            // "regime" or empty
  std::size_t synthetic_length = 4000;
  std::uint64_t data_seed = 7;
  SplitRatios ratios;
  std::vector<std::size_t> horizons{24};
  ModelConfig model;  // horizon is set per run
  TrainOptions train;
  std::vector<std::uint64_t> seeds{1};
  std::filesystem::path output_dir = "out";

  ModelConfig model_for(std::size_t horizon) const {
    ModelConfig c = model;
    c.horizon = horizon;
    return c;
  }
  TrainOptions train_for(std::uint64_t seed) const {
    TrainOptions t = train;
    t.seed = seed;
    return t;
  }

  void validate() const {
    if (data_path.empty() && synthetic.empty()) throw ConfigError("data.path: required (or data.synthetic = regime)");
    if (!synthetic.empty() && synthetic != "regime") {
      throw ConfigError("data.synthetic: unknown generator '" + synthetic + "' (legal: regime)");
    }
    if (horizons.empty()) throw ConfigError("data.horizons: at least one horizon required");
    if (seeds.empty()) throw ConfigError("train.seeds: at least one seed required");
    if (train.batch_size == 0) throw ConfigError("train.batch_size: must be positive");
    if (train.max_epochs == 0) throw ConfigError("train.max_epochs: must be positive");
    if (train.patience == 0) throw ConfigError("train.patience: must be positive");
    if (train.train_stride == 0) throw ConfigError("data.train_stride: must be positive");
    if (train.eval_stride == 0) throw ConfigError("data.eval_stride: must be positive");
    if (train.eval_batch == 0) throw ConfigError("train.eval_batch: must be positive");
    if (!(train.adamw.lr >= 0.0)) throw ConfigError("train.lr: must be non-negative");
    for (auto h : horizons) {
      try {
        model_for(h).validate();
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("model.") + e.what());
      }
    }
  }

  // Stable textual form of every resolved setting; the hash is taken over it.
  std::string canonical() const {
    std::ostringstream s;
    auto list = [](const auto& v) {
      std::string out;
      for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
      return out;
    };
    s << "data.path=" << data_path.generic_string() << "\n"
      << "data.synthetic=" << synthetic << "\n"
      << "data.length=" << synthetic_length << "\n"
      << "data.data_seed=" << data_seed << "\n"
      << "data.split=" << format_number(ratios.train) << "," << format_number(ratios.val) << ","
      << format_number(ratios.test) << "\n"
      << "data.input_len=" << model.input_len << "\n"
      << "data.horizons=" << list(horizons) << "\n"
      << "data.train_stride=" << train.train_stride << "\n"
      << "data.eval_stride=" << train.eval_stride << "\n"
      << "model.patch_len=" << model.patch_len << "\n"
      << "model.stride=" << model.stride << "\n"
      << "model.d_model=" << model.d_model << "\n"
      << "model.n_experts=" << model.n_experts << "\n"
      << "model.expert_depth=" << model.expert_depth << "\n"
      << "model.top_k=" << model.top_k << "\n"
      << "model.pool_kernel=" << model.pool_kernel << "\n"
      << "model.dropout=" << format_number(model.dropout) << "\n"
      << "train.alpha=" << format_number(model.alpha) << "\n"
      << "train.beta=" << format_number(model.beta) << "\n"
      << "train.lr=" << format_number(train.adamw.lr) << "\n"
      << "train.beta1=" << format_number(train.adamw.beta1) << "\n"
      << "train.beta2=" << format_number(train.adamw.beta2) << "\n"
      << "train.eps=" << format_number(train.adamw.eps) << "\n"
      << "train.weight_decay=" << format_number(train.adamw.weight_decay) << "\n"
      << "train.batch_size=" << train.batch_size << "\n"
      << "train.max_epochs=" << train.max_epochs << "\n"
      << "train.patience=" << train.patience << "\n"
      << "train.clip_norm=" << format_number(train.clip_norm) << "\n"
      << "train.eval_batch=" << train.eval_batch << "\n"
      << "train.seeds=" << list(seeds) << "\n";
    return s.str();
  }

  // 64-bit FNV-1a of canonical(), as 16 hex digits.
  std::string hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : canonical()) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

  std::string hash_comment() const { return "config_hash=" + hash(); }
};

namespace detail {

inline std::string field_error(const std::string& file, std::size_t line, const std::string& field,
                               const std::string& why) {
  return file + ":" + std::to_string(line) + ": " + field + ": " + why;
}

inline std::size_t parse_size(const std::string& v, const std::string& where) {
  std::size_t pos = 0;
  unsigned long long out = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("neg");
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw ConfigError(where + "expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(out);
}

inline double parse_real(const std::string& v, const std::string& where) {
  std::size_t pos = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw ConfigError(where + "expected a number, got '" + v + "'");
  return out;
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  for (auto tok : split_commas(v)) {
    auto t = std::string(trim(tok));
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

}  // namespace detail

inline std::vector<std::size_t> parse_size_list(const std::string& v, const std::string& where = "") {
  std::vector<std::size_t> out;
  for (const auto& t : detail::split_list(v)) out.push_back(detail::parse_size(t, where));
  return out;
}

inline RunConfig parse_run_config(std::istream& in, const std::string& name = "<config>",
                                  const std::filesystem::path& base_dir = {}) {
  RunConfig rc;
  std::string line, section;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    auto body = std::string(detail::trim(line.substr(0, line.find_first_of("#;"))));
    if (body.empty()) continue;
    if (body.front() == '[') {
      if (body.back() != ']') throw ConfigError(detail::field_error(name, lineno, body, "unterminated section header"));
      section = std::string(detail::trim(std::string_view(body).substr(1, body.size() - 2)));
      if (section != "data" && section != "model" && section != "train" && section != "output") {
        throw ConfigError(detail::field_error(name, lineno, "[" + section + "]",
                                              "unknown section (legal: data, model, train, output)"));
      }
      continue;
    }
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(detail::field_error(name, lineno, body, "expected key = value"));
    if (section.empty()) throw ConfigError(detail::field_error(name, lineno, body, "key outside of any section"));
    const std::string key = std::string(detail::trim(std::string_view(body).substr(0, eq)));
    const std::string val = std::string(detail::trim(std::string_view(body).substr(eq + 1)));
    const std::string field = section + "." + key;
    if (auto it = seen.find(field); it != seen.end()) {
      throw ConfigError(detail::field_error(name, lineno, field,
                                            "duplicate key (first set on line " + std::to_string(it->second) + ")"));
    }
    seen[field] = lineno;
    const std::string where = name + ":" + std::to_string(lineno) + ": " + field + ": ";
    auto size = [&] { return detail::parse_size(val, where); };
    auto real = [&] { return detail::parse_real(val, where); };
    bool known = true;
    if (section == "data") {
      if (key == "path") rc.data_path = base_dir.empty() ? std::filesystem::path(val) : base_dir / val;
      else if (key == "synthetic") rc.synthetic = val;
      else if (key == "length") rc.synthetic_length = size();
      else if (key == "data_seed") rc.data_seed = size();
      else if (key == "split") {
        auto parts = detail::split_list(val);
        if (parts.size() != 3) throw ConfigError(where + "expected three ratios train,val,test");
        rc.ratios = {detail::parse_real(parts[0], where), detail::parse_real(parts[1], where),
                     detail::parse_real(parts[2], where)};
      } else if (key == "input_len") rc.model.input_len = size();
      else if (key == "horizons" || key == "horizon") rc.horizons = parse_size_list(val, where);
      else if (key == "train_stride") rc.train.train_stride = size();
      else if (key == "eval_stride") rc.train.eval_stride = size();
      else known = false;
    } else if (section == "model") {
      if (key == "patch_len") rc.model.patch_len = size();
      else if (key == "stride") rc.model.stride = size();
      else if (key == "d_model") rc.model.d_model = size();
      else if (key == "n_experts") rc.model.n_experts = size();
      else if (key == "expert_depth") rc.model.expert_depth = size();
      else if (key == "top_k") rc.model.top_k = size();
      else if (key == "pool_kernel") rc.model.pool_kernel = size();
      else if (key == "dropout") rc.model.dropout = real();
      else known = false;
    } else if (section == "train") {
      if (key == "alpha") rc.model.alpha = real();
      else if (key == "beta") rc.model.beta = real();
      else if (key == "lr") rc.train.adamw.lr = real();
      else if (key == "beta1") rc.train.adamw.beta1 = real();
      else if (key == "beta2") rc.train.adamw.beta2 = real();
      else if (key == "eps") rc.train.adamw.eps = real();
      else if (key == "weight_decay") rc.train.adamw.weight_decay = real();
      else if (key == "batch_size") rc.train.batch_size = size();
      else if (key == "max_epochs") rc.train.max_epochs = size();
      else if (key == "patience") rc.train.patience = size();
      else if (key == "clip_norm") rc.train.clip_norm = real();
      else if (key == "eval_batch") rc.train.eval_batch = size();
      else if (key == "seeds" || key == "seed") {
        rc.seeds.clear();
        for (auto s : parse_size_list(val, where)) rc.seeds.push_back(s);
      } else known = false;
    } else if (section == "output") {
      if (key == "dir") rc.output_dir = base_dir.empty() ? std::filesystem::path(val) : base_dir / val;
      else known = false;
    }
    if (!known) throw ConfigError(detail::field_error(name, lineno, field, "unknown key"));
  }
  rc.validate();
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  return parse_run_config(in, path.string(), path.parent_path());
}

// Loads (or generates), splits and standardizes the configured dataset.
inline SeriesDataset load_dataset(const RunConfig& rc) {
  SeriesDataset ds;
  if (!rc.synthetic.empty()) {
    synthetic::RegimeSeriesOptions o;
    o.length = rc.synthetic_length;
    ds = synthetic::regime_switching(o, rc.data_seed);
  } else {
    if (!std::filesystem::exists(rc.data_path)) {
      throw IngestionError("dataset file '" + rc.data_path.string() + "' does not exist");
    }
    ds = load_csv(rc.data_path.string());
  }
  return standardize(split(std::move(ds), rc.ratios));
}

}  // namespace dtaf
