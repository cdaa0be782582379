#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <string>
#include <string_view>
#include <type_traits>

#include "dtaf/errors.hpp"

namespace dtaf {

// Shortest text that round-trips to the same double.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline std::string format_number(std::size_t v) { return std::to_string(v); }

// Minimal CSV emitter: optional leading "# ..." comment line, then a header.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, std::string_view comment, std::initializer_list<std::string_view> header)
      : out_(path), path_(path) {
    if (!out_) throw Error("cannot write '" + path + "'");
    if (!comment.empty()) out_ << "# " << comment << '\n';
    bool first = true;
    for (auto h : header) {
      out_ << (first ? "" : ",") << h;
      first = false;
    }
    out_ << '\n';
  }

  template <class... Cells>
  void row(const Cells&... cells) {
    bool first = true;
    ((out_ << (first ? "" : ",") << cell(cells), first = false), ...);
    out_ << '\n';
    if (!out_) throw Error("failed writing '" + path_ + "'");
  }

 private:
  template <class T>
  static std::string cell(const T& v) {
    if constexpr (std::is_floating_point_v<T>) return format_number(static_cast<double>(v));
    else if constexpr (std::is_integral_v<T>) return std::to_string(v);
    else return std::string(v);
  }

  std::ofstream out_;
  std::string path_;
};

}  // namespace dtaf
