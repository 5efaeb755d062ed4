#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "qalign/tensor.hpp"

namespace qalign {

enum class TensorKind { weight, activations, matrix };

std::string_view to_string(TensorKind kind);
TensorKind parse_tensor_kind(std::string_view text);

/// One named tensor of a bundle. Shapes are 1-D or 2-D; 1-D tensors are
/// held as a single row.
struct BundleEntry {
  std::string name;
  TensorKind kind = TensorKind::matrix;
  std::vector<std::int64_t> shape;
  std::string file;
  /// Optional: for weights, the name of the activations tensor they consume.
  std::string input;
  Matrix values;
};

/// A directory holding manifest.json plus one raw little-endian float64 file
/// per tensor.
class TensorBundle {
 public:
  const std::vector<BundleEntry>& entries() const noexcept { return entries_; }
  bool empty() const noexcept { return entries_.empty(); }

  /// Adds a tensor; the payload file name defaults to "<name>.f64".
  /// Throws ValidationError on a duplicate name.
  BundleEntry& add(std::string name, TensorKind kind, Matrix values, std::string input = {});
  BundleEntry& add(BundleEntry entry);

  const BundleEntry* find(std::string_view name) const;
  const BundleEntry& at(std::string_view name) const;

  std::vector<const BundleEntry*> of_kind(TensorKind kind) const;

 private:
  std::vector<BundleEntry> entries_;
};

TensorBundle load_bundle(const std::filesystem::path& dir);
void save_bundle(const TensorBundle& bundle, const std::filesystem::path& dir);

/// Raw payload codec, exposed for tests and tools.
std::vector<std::uint8_t> encode_f64_le(const Matrix& m);
Matrix decode_f64_le(const std::vector<std::uint8_t>& bytes, std::size_t rows, std::size_t cols);

}  // namespace qalign
