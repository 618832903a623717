#pragma once

#include <Eigen/Core>
#include <json.hpp>

#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "rlmpc/core_types.hpp"

namespace rlmpc::io {

using Json = nlohmann::json;

/// {"shape": [rows, cols], "data": [row-major float64]}
Json matrix_json(const Eigen::MatrixXd& m);
Eigen::MatrixXd matrix_from_json(const Json& j, const std::string& name);

Json scaling_json(const ScalingTable& s);
ScalingTable scaling_from_json(const Json& j);

void write_json_file(const std::string& path, const Json& j);
Json read_json_file(const std::string& path);

/// Locate a named layer in a weight-container "layers" array.
const Json& find_layer(const Json& container, const std::string& name);

/// CSV with a mandatory header and full-precision (%.17g) values.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, std::span<const std::string> header);
  void row(std::span<const double> values);
  void row(std::initializer_list<double> values) {
    row(std::span<const double>(values.begin(), values.size()));
  }
  /// Pre-formatted cells (used where a column needs exact decimal control).
  void row_raw(std::span<const std::string> cells);

 private:
  std::ofstream file_;
  std::size_t columns_;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
  std::vector<std::vector<std::string>> raw;  // cells as written
};
CsvTable read_csv(const std::string& path);

/// Rescale a full-precision decimal literal by 10^shift without touching its
/// digits. Parsing the shifted text recovers the scaled value with a single
/// rounding, which makes unit-converted CSV columns round-trip bitwise.
std::string decimal_shift(const std::string& literal, int shift);
std::string format_cell(double v);    // %.17g
std::string format_cell_e(double v);  // %.17e (exponent form for decimal_shift)

}  // namespace rlmpc::io
