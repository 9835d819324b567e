#include "vwsd/embeddings.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "vwsd/detrng.hpp"
#include "vwsd/digest.hpp"
#include "vwsd/errors.hpp"

namespace vwsd {

using nlohmann::json;

const char* embedding_kind_name(EmbeddingKind kind) {
  return kind == EmbeddingKind::text ? "text" : "image";
}

namespace {

bool is_blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(),
                     [](unsigned char c) { return std::isspace(c) != 0; });
}

void check_finite(const Embedding& e, const std::string& what) {
  for (double v : e.values) {
    if (!std::isfinite(v)) {
      throw Error(ErrorCode::NonFiniteScore, "non-finite entry in embedding of " + what);
    }
  }
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

}  // namespace

std::vector<Embedding> embed_texts(EmbeddingBackend& backend,
                                   const std::vector<std::string>& texts) {
  if (texts.empty()) {
    throw Error(ErrorCode::EmptyInput, "embed_texts requires at least one text");
  }
  for (const auto& t : texts) {
    if (is_blank(t)) {
      throw Error(ErrorCode::EmptyInput, "embed_texts received a blank text");
    }
  }
  auto out = backend.encode_texts(texts);
  if (out.size() != texts.size()) {
    throw Error(ErrorCode::BackendUnavailable, "backend returned wrong batch size");
  }
  for (size_t i = 0; i < out.size(); ++i) {
    if (out[i].dim() != backend.dim() || out[i].space_id != backend.space_id()) {
      throw Error(ErrorCode::DimMismatch, "backend returned mismatched embedding");
    }
    check_finite(out[i], texts[i]);
  }
  return out;
}

std::vector<Embedding> embed_images(EmbeddingBackend& backend,
                                    const std::vector<std::string>& image_ids,
                                    const std::filesystem::path& image_dir) {
  if (image_ids.empty()) {
    throw Error(ErrorCode::EmptyInput, "embed_images requires at least one id");
  }
  std::vector<std::filesystem::path> files;
  files.reserve(image_ids.size());
  for (const auto& id : image_ids) {
    auto path = image_dir / id;
    if (!std::filesystem::exists(path)) {
      throw Error(ErrorCode::ImageUnreadable, "cannot read image '" + id + "'");
    }
    files.push_back(std::move(path));
  }
  auto out = backend.encode_image_files(files);
  if (out.size() != image_ids.size()) {
    throw Error(ErrorCode::BackendUnavailable, "backend returned wrong batch size");
  }
  for (size_t i = 0; i < out.size(); ++i) {
    if (out[i].dim() != backend.dim() || out[i].space_id != backend.space_id()) {
      throw Error(ErrorCode::DimMismatch, "backend returned mismatched embedding");
    }
    check_finite(out[i], image_ids[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mock backend
// ---------------------------------------------------------------------------

namespace {

class MockBackend final : public EmbeddingBackend {
 public:
  MockBackend(uint64_t seed, size_t dim)
      : seed_(seed),
        dim_(dim),
        space_id_("mock/s" + std::to_string(seed) + "/d" + std::to_string(dim)) {}

  const std::string& space_id() const override { return space_id_; }
  size_t dim() const override { return dim_; }
  bool thread_safe() const override { return true; }

  std::vector<Embedding> encode_texts(const std::vector<std::string>& texts) override {
    std::vector<Embedding> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(expand("text", t));
    return out;
  }

  std::vector<Embedding> encode_image_files(
      const std::vector<std::filesystem::path>& files) override {
    std::vector<Embedding> out;
    out.reserve(files.size());
    for (const auto& f : files) {
      std::string bytes = read_file_bytes(f);
      if (bytes.empty() && !std::filesystem::exists(f)) {
        throw Error(ErrorCode::ImageUnreadable, "cannot read image file " + f.string());
      }
      // The vector depends only on the file bytes and the space, never the path.
      out.push_back(expand("image", bytes));
    }
    return out;
  }

 private:
  Embedding expand(std::string_view kind, std::string_view payload) const {
    uint64_t h = fnv1a64(payload, fnv1a64(kind, 0xcbf29ce484222325ull ^ seed_));
    uint64_t state = h ^ (seed_ * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull);
    Embedding e;
    e.space_id = space_id_;
    e.values.resize(dim_);
    double norm_sq = 0.0;
    for (size_t i = 0; i < dim_; ++i) {
      uint64_t bits = splitmix64(state);
      // map to (-1, 1)
      double v = (static_cast<double>(bits >> 11) * 0x1.0p-53) * 2.0 - 1.0;
      e.values[i] = v;
      norm_sq += v * v;
    }
    if (norm_sq <= 0.0) {
      e.values[0] = 1.0;
      norm_sq = 1.0;
    }
    const double inv = 1.0 / std::sqrt(norm_sq);
    for (double& v : e.values) v *= inv;
    return e;
  }

  uint64_t seed_;
  size_t dim_;
  std::string space_id_;
};

}  // namespace

std::unique_ptr<EmbeddingBackend> mock_backend(uint64_t seed, size_t dim) {
  if (dim < 2) {
    throw Error(ErrorCode::InvalidArgument, "mock backend requires dim >= 2");
  }
  return std::make_unique<MockBackend>(seed, dim);
}

// ---------------------------------------------------------------------------
// Embedding store
// ---------------------------------------------------------------------------

namespace {

constexpr size_t kHeaderBytes = 8;

void write_u32_le(std::fstream& f, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32_le(std::istream& f) {
  unsigned char b[4] = {0, 0, 0, 0};
  f.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

std::string matrix_key(const std::string& space_id, EmbeddingKind kind) {
  return space_id + '\x1f' + embedding_kind_name(kind);
}

}  // namespace

struct EmbeddingStore::Matrix {
  std::string space_id;
  EmbeddingKind kind = EmbeddingKind::text;
  std::string filename;  // relative to store root
  size_t dim = 0;
  size_t rows = 0;
  std::map<std::string, size_t> index;  // key -> row

  std::filesystem::path path(const std::filesystem::path& root) const {
    return root / filename;
  }
};

EmbeddingStore::EmbeddingStore(std::filesystem::path root) : root_(std::move(root)) {
  std::filesystem::create_directories(root_);
  const auto index_path = root_ / "index.json";
  if (!std::filesystem::exists(index_path)) return;

  std::ifstream in(index_path);
  json idx = json::parse(in);
  for (auto& [space, dim] : idx.at("spaces").items()) {
    space_dims_[space] = dim.get<size_t>();
  }
  for (auto& entry : idx.at("matrices")) {
    auto m = std::make_unique<Matrix>();
    m->space_id = entry.at("space_id").get<std::string>();
    m->kind = entry.at("kind").get<std::string>() == "text" ? EmbeddingKind::text
                                                            : EmbeddingKind::image;
    m->filename = entry.at("file").get<std::string>();
    m->dim = entry.at("dim").get<size_t>();
    m->rows = entry.at("rows").get<size_t>();
    for (auto& [key, row] : entry.at("keys").items()) {
      m->index[key] = row.get<size_t>();
    }
    // cross-check the binary header
    std::ifstream f(m->path(root_), std::ios::binary);
    if (f) {
      uint32_t hdim = read_u32_le(f);
      uint32_t hrows = read_u32_le(f);
      if (hdim != m->dim || hrows != m->rows) {
        throw Error(ErrorCode::IoError,
                    "matrix header disagrees with index for " + m->filename);
      }
    }
    matrices_[matrix_key(m->space_id, m->kind)] = std::move(m);
  }
}

EmbeddingStore::~EmbeddingStore() {
  try {
    flush();
  } catch (...) {
    // destructor must not throw
  }
}

EmbeddingStore::Matrix& EmbeddingStore::matrix_for(const std::string& space_id,
                                                   EmbeddingKind kind, size_t dim) {
  auto it = space_dims_.find(space_id);
  if (it != space_dims_.end() && it->second != dim) {
    throw Error(ErrorCode::DimMismatch,
                "space '" + space_id + "' holds dim " + std::to_string(it->second) +
                    ", got " + std::to_string(dim));
  }
  const std::string key = matrix_key(space_id, kind);
  auto mit = matrices_.find(key);
  if (mit != matrices_.end()) return *mit->second;

  auto m = std::make_unique<Matrix>();
  m->space_id = space_id;
  m->kind = kind;
  m->dim = dim;
  m->filename = sha256_hex(key).substr(0, 16) + ".f32";
  // initialize the binary file with its header
  std::fstream f(m->path(root_), std::ios::binary | std::ios::out);
  write_u32_le(f, static_cast<uint32_t>(dim));
  write_u32_le(f, 0);
  f.close();

  space_dims_[space_id] = dim;
  auto& ref = *m;
  matrices_[key] = std::move(m);
  dirty_ = true;
  return ref;
}

const EmbeddingStore::Matrix* EmbeddingStore::find_matrix(const std::string& space_id,
                                                          EmbeddingKind kind) const {
  auto it = matrices_.find(matrix_key(space_id, kind));
  return it == matrices_.end() ? nullptr : it->second.get();
}

void EmbeddingStore::put(const std::string& space_id, EmbeddingKind kind,
                         const std::string& key, const Embedding& embedding) {
  if (embedding.values.empty()) {
    throw Error(ErrorCode::EmptyInput, "cannot store an empty embedding");
  }
  Matrix& m = matrix_for(space_id, kind, embedding.dim());

  std::vector<float> row(embedding.values.begin(), embedding.values.end());

  size_t row_idx;
  auto it = m.index.find(key);
  bool is_new = (it == m.index.end());
  row_idx = is_new ? m.rows : it->second;

  std::fstream f(m.path(root_), std::ios::binary | std::ios::in | std::ios::out);
  if (!f) {
    throw Error(ErrorCode::IoError, "cannot open matrix file " + m.filename);
  }
  f.seekp(static_cast<std::streamoff>(kHeaderBytes + row_idx * m.dim * sizeof(float)));
  f.write(reinterpret_cast<const char*>(row.data()),
          static_cast<std::streamsize>(row.size() * sizeof(float)));
  if (is_new) {
    m.rows += 1;
    f.seekp(4);
    write_u32_le(f, static_cast<uint32_t>(m.rows));
    m.index[key] = row_idx;
  }
  f.close();
  dirty_ = true;
}

std::optional<Embedding> EmbeddingStore::get(const std::string& space_id,
                                             EmbeddingKind kind,
                                             const std::string& key) const {
  const Matrix* m = find_matrix(space_id, kind);
  if (!m) return std::nullopt;
  auto it = m->index.find(key);
  if (it == m->index.end()) return std::nullopt;

  std::ifstream f(m->path(root_), std::ios::binary);
  if (!f) return std::nullopt;
  f.seekg(static_cast<std::streamoff>(kHeaderBytes + it->second * m->dim * sizeof(float)));
  std::vector<float> row(m->dim);
  f.read(reinterpret_cast<char*>(row.data()),
         static_cast<std::streamsize>(row.size() * sizeof(float)));
  if (!f) return std::nullopt;

  Embedding e;
  e.space_id = space_id;
  e.values.assign(row.begin(), row.end());
  return e;
}

bool EmbeddingStore::contains(const std::string& space_id, EmbeddingKind kind,
                              const std::string& key) const {
  const Matrix* m = find_matrix(space_id, kind);
  return m != nullptr && m->index.count(key) > 0;
}

void EmbeddingStore::flush() {
  if (!dirty_) return;
  json idx;
  idx["spaces"] = json::object();
  for (const auto& [space, dim] : space_dims_) idx["spaces"][space] = dim;
  idx["matrices"] = json::array();
  for (const auto& [key, m] : matrices_) {
    (void)key;
    json entry;
    entry["space_id"] = m->space_id;
    entry["kind"] = embedding_kind_name(m->kind);
    entry["file"] = m->filename;
    entry["dim"] = m->dim;
    entry["rows"] = m->rows;
    json keys = json::object();
    for (const auto& [k, row] : m->index) keys[k] = row;
    entry["keys"] = std::move(keys);
    idx["matrices"].push_back(std::move(entry));
  }
  const auto tmp = root_ / "index.json.tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << idx.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, root_ / "index.json");
  dirty_ = false;
}

}  // namespace vwsd
