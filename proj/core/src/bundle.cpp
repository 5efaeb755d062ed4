#include "qalign/bundle.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "json.hpp"

namespace qalign {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kManifest = "manifest.json";

std::pair<std::size_t, std::size_t> matrix_dims(const std::vector<std::int64_t>& shape,
                                                const std::string& name) {
  for (auto s : shape) {
    if (s < 0) throw FormatError("tensor '" + name + "' has a negative dimension");
  }
  switch (shape.size()) {
    case 0:
      return {1, 1};
    case 1:
      return {1, static_cast<std::size_t>(shape[0])};
    case 2:
      return {static_cast<std::size_t>(shape[0]), static_cast<std::size_t>(shape[1])};
    default:
      throw FormatError("tensor '" + name + "' has rank " + std::to_string(shape.size()) +
                        "; only rank <= 2 is supported");
  }
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open payload " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::string_view to_string(TensorKind kind) {
  switch (kind) {
    case TensorKind::weight:
      return "weight";
    case TensorKind::activations:
      return "activations";
    case TensorKind::matrix:
      return "matrix";
  }
  return "matrix";
}

TensorKind parse_tensor_kind(std::string_view text) {
  if (text == "weight") return TensorKind::weight;
  if (text == "activations") return TensorKind::activations;
  if (text == "matrix") return TensorKind::matrix;
  throw FormatError("unknown tensor kind '" + std::string(text) + "'");
}

BundleEntry& TensorBundle::add(std::string name, TensorKind kind, Matrix values, std::string input) {
  BundleEntry e;
  e.file = name + ".f64";
  e.name = std::move(name);
  e.kind = kind;
  e.shape = {values.rows(), values.cols()};
  e.input = std::move(input);
  e.values = std::move(values);
  return add(std::move(e));
}

BundleEntry& TensorBundle::add(BundleEntry entry) {
  if (find(entry.name) != nullptr) {
    throw ValidationError("duplicate tensor name '" + entry.name + "' in bundle");
  }
  entries_.push_back(std::move(entry));
  return entries_.back();
}

const BundleEntry* TensorBundle::find(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

const BundleEntry& TensorBundle::at(std::string_view name) const {
  if (const auto* e = find(name)) return *e;
  throw ValidationError("bundle has no tensor named '" + std::string(name) + "'");
}

std::vector<const BundleEntry*> TensorBundle::of_kind(TensorKind kind) const {
  std::vector<const BundleEntry*> out;
  for (const auto& e : entries_) {
    if (e.kind == kind) out.push_back(&e);
  }
  return out;
}

std::vector<std::uint8_t> encode_f64_le(const Matrix& m) {
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(m.size()) * 8);
  const double* p = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, p + i, sizeof bits);
    for (int b = 0; b < 8; ++b) {
      bytes[static_cast<std::size_t>(i) * 8 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
  }
  return bytes;
}

Matrix decode_f64_le(const std::vector<std::uint8_t>& bytes, std::size_t rows, std::size_t cols) {
  if (bytes.size() != rows * cols * 8) {
    throw CorruptionError("payload has " + std::to_string(bytes.size()) + " bytes, expected " +
                          std::to_string(rows * cols * 8));
  }
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  double* p = m.data();
  for (std::size_t i = 0; i < rows * cols; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
    std::memcpy(p + i, &bits, sizeof bits);
  }
  return m;
}

TensorBundle load_bundle(const fs::path& dir) {
  const fs::path manifest_path = dir / kManifest;
  std::ifstream in(manifest_path);
  if (!in) throw FormatError("missing manifest: " + manifest_path.string());

  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  const json* list = &doc;
  if (doc.is_object()) {
    if (!doc.contains("tensors")) throw FormatError(manifest_path.string() + ": no 'tensors' list");
    list = &doc["tensors"];
  }
  if (!list->is_array()) throw FormatError(manifest_path.string() + ": tensors must be a list");

  TensorBundle bundle;
  for (const auto& item : *list) {
    BundleEntry e;
    try {
      e.name = item.at("name").get<std::string>();
      e.kind = parse_tensor_kind(item.at("kind").get<std::string>());
      e.shape = item.at("shape").get<std::vector<std::int64_t>>();
      e.file = item.at("file").get<std::string>();
      if (item.contains("input")) e.input = item["input"].get<std::string>();
    } catch (const json::exception& ex) {
      throw FormatError(manifest_path.string() + ": " + ex.what());
    }
    if (fs::path(e.file).is_absolute()) {
      throw FormatError("tensor '" + e.name + "' payload path must be relative");
    }
    const auto [rows, cols] = matrix_dims(e.shape, e.name);
    const auto bytes = read_file(dir / e.file);
    try {
      e.values = decode_f64_le(bytes, rows, cols);
    } catch (const CorruptionError& ex) {
      throw CorruptionError("tensor '" + e.name + "': " + ex.what());
    }
    require_finite(e.values, "tensor '" + e.name + "'");
    if (bundle.find(e.name) != nullptr) {
      throw FormatError("duplicate tensor name '" + e.name + "' in manifest");
    }
    bundle.add(std::move(e));
  }
  return bundle;
}

void save_bundle(const TensorBundle& bundle, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  json list = json::array();
  std::set<std::string> files;
  for (const auto& e : bundle.entries()) {
    const auto [rows, cols] = matrix_dims(e.shape, e.name);
    if (static_cast<std::size_t>(e.values.rows()) * static_cast<std::size_t>(e.values.cols()) !=
        rows * cols) {
      throw ValidationError("tensor '" + e.name + "' values do not match its declared shape");
    }
    if (!files.insert(e.file).second) {
      throw ValidationError("two tensors share payload file '" + e.file + "'");
    }
    json item = {{"name", e.name}, {"kind", to_string(e.kind)}, {"shape", e.shape}, {"file", e.file}};
    if (!e.input.empty()) item["input"] = e.input;
    list.push_back(std::move(item));

    const fs::path path = dir / e.file;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    const auto bytes = encode_f64_le(e.values);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + path.string());
  }

  const fs::path manifest_path = dir / kManifest;
  std::ofstream out(manifest_path, std::ios::trunc);
  out << json{{"tensors", list}}.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + manifest_path.string());
}

}  // namespace qalign
