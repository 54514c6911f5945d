#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace chaosda::csv {

// 17 significant digits, '.' decimal separator; doubles round-trip exactly.
std::string format_double(double v);

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path, bool append = false);

  void row(const std::vector<std::string>& fields);

 private:
  std::ofstream out_;
};

// Splits a file the Writer produced back into cells. No quoting rules: the
// writers never emit quotes, commas, or newlines inside a field.
std::vector<std::vector<std::string>> read_rows(const std::filesystem::path& path);

}  // namespace chaosda::csv
