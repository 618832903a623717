#include "rlmpc/io.hpp"

#include <cstdio>
#include <cstdlib>
#include <sstream>

namespace rlmpc::io {

Json matrix_json(const Eigen::MatrixXd& m) {
  Json j;
  j["shape"] = {m.rows(), m.cols()};
  Json data = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      data.push_back(m(r, c));
    }
  }
  j["data"] = std::move(data);
  return j;
}

Eigen::MatrixXd matrix_from_json(const Json& j, const std::string& name) {
  if (!j.contains("shape") || !j.contains("data")) {
    throw ConfigError("weight entry '" + name + "' missing shape or data");
  }
  const auto& shape = j["shape"];
  if (!shape.is_array() || shape.size() != 2) {
    throw ConfigError("weight entry '" + name + "' has malformed shape");
  }
  const auto rows = shape[0].get<Eigen::Index>();
  const auto cols = shape[1].get<Eigen::Index>();
  const auto& data = j["data"];
  if (rows < 0 || cols < 0 || static_cast<Eigen::Index>(data.size()) != rows * cols) {
    throw ConfigError("weight entry '" + name + "' shape does not match data length");
  }
  Eigen::MatrixXd m(rows, cols);
  Eigen::Index k = 0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(r, c) = data[static_cast<std::size_t>(k++)].get<double>();
    }
  }
  return m;
}

Json scaling_json(const ScalingTable& s) {
  Json j;
  for (int i = 0; i < kNumChannels; ++i) {
    const auto ch = static_cast<Channel>(i);
    j[channel_name(ch)] = {s.range(ch).min, s.range(ch).max};
  }
  return j;
}

ScalingTable scaling_from_json(const Json& j) {
  ScalingTable s;
  for (int i = 0; i < kNumChannels; ++i) {
    const auto ch = static_cast<Channel>(i);
    const char* name = channel_name(ch);
    if (!j.contains(name)) {
      throw ConfigError(std::string("scaling table missing channel ") + name);
    }
    const auto& r = j[name];
    if (!r.is_array() || r.size() != 2) {
      throw ConfigError(std::string("scaling range for ") + name + " must be [min, max]");
    }
    s.ranges[static_cast<std::size_t>(i)] = {r[0].get<double>(), r[1].get<double>()};
  }
  s.validate();
  return s;
}

void write_json_file(const std::string& path, const Json& j) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot open for writing: " + path);
  f << j.dump(1) << '\n';
  if (!f) throw ConfigError("write failed: " + path);
}

Json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open: " + path);
  Json j;
  try {
    f >> j;
  } catch (const Json::parse_error& e) {
    throw ConfigError("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

const Json& find_layer(const Json& container, const std::string& name) {
  if (!container.contains("layers") || !container["layers"].is_array()) {
    throw ConfigError("weight container has no layers array");
  }
  for (const auto& entry : container["layers"]) {
    if (entry.contains("name") && entry["name"].get<std::string>() == name) {
      return entry;
    }
  }
  throw ConfigError("weight container missing layer '" + name + "'");
}

CsvWriter::CsvWriter(const std::string& path, std::span<const std::string> header)
    : file_(path), columns_(header.size()) {
  if (!file_) throw ConfigError("cannot open for writing: " + path);
  for (std::size_t i = 0; i < header.size(); ++i) {
    file_ << header[i] << (i + 1 < header.size() ? "," : "\n");
  }
}

void CsvWriter::row(std::span<const double> values) {
  if (values.size() != columns_) {
    throw ConfigError("csv row width does not match header");
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    file_ << format_cell(values[i]) << (i + 1 < values.size() ? "," : "\n");
  }
  if (!file_) throw ConfigError("csv write failed");
}

void CsvWriter::row_raw(std::span<const std::string> cells) {
  if (cells.size() != columns_) {
    throw ConfigError("csv row width does not match header");
  }
  for (std::size_t i = 0; i < cells.size(); ++i) {
    file_ << cells[i] << (i + 1 < cells.size() ? "," : "\n");
  }
  if (!file_) throw ConfigError("csv write failed");
}

CsvTable read_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open: " + path);
  CsvTable table;
  std::string line;
  if (!std::getline(f, line)) throw ConfigError("empty csv: " + path);
  std::stringstream hs(line);
  std::string cell;
  while (std::getline(hs, cell, ',')) table.header.push_back(cell);
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::vector<std::string> raw;
    std::stringstream ls(line);
    while (std::getline(ls, cell, ',')) {
      row.push_back(std::strtod(cell.c_str(), nullptr));
      raw.push_back(cell);
    }
    if (row.size() != table.header.size()) {
      throw ConfigError("csv row width mismatch in " + path);
    }
    table.rows.push_back(std::move(row));
    table.raw.push_back(std::move(raw));
  }
  return table;
}

std::string format_cell(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string format_cell_e(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17e", v);
  return buf;
}

std::string decimal_shift(const std::string& literal, int shift) {
  const std::size_t epos = literal.find_first_of("eE");
  if (epos == std::string::npos) {
    throw ConfigError("decimal_shift expects exponent notation: " + literal);
  }
  const int exponent = std::atoi(literal.c_str() + epos + 1) + shift;
  return literal.substr(0, epos) + "e" + std::to_string(exponent);
}

}  // namespace rlmpc::io
