#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace vwsd {

// A vector in a named joint embedding space. dim is constant per space_id
// and every entry is finite.
struct Embedding {
  std::string space_id;
  std::vector<double> values;

  size_t dim() const { return values.size(); }
  bool operator==(const Embedding& other) const = default;
};

enum class EmbeddingKind { text, image };

const char* embedding_kind_name(EmbeddingKind kind);

// Uniform front over text and image encoders that share one joint space.
// Real models (CLIP/ALIGN/BLIP families) plug in as adapters behind this
// interface; the test suite only ever needs the mock.
class EmbeddingBackend {
 public:
  virtual ~EmbeddingBackend() = default;

  virtual const std::string& space_id() const = 0;
  virtual size_t dim() const = 0;

  // Whether concurrent inference calls are safe. The pipeline serializes
  // calls to backends that report false.
  virtual bool thread_safe() const = 0;

  virtual std::vector<Embedding> encode_texts(const std::vector<std::string>& texts) = 0;
  virtual std::vector<Embedding> encode_image_files(
      const std::vector<std::filesystem::path>& files) = 0;
};

// Batch text embedding with contract checks (EmptyInput, blank texts,
// uniform dims). Order-preserving.
std::vector<Embedding> embed_texts(EmbeddingBackend& backend,
                                   const std::vector<std::string>& texts);

// Batch image embedding; ids resolve under image_dir. Throws ImageUnreadable
// naming the offending id.
std::vector<Embedding> embed_images(EmbeddingBackend& backend,
                                    const std::vector<std::string>& image_ids,
                                    const std::filesystem::path& image_dir);

// Deterministic model-free backend: any text or file content maps to a
// unit-norm vector through a seeded hash expansion. Stable across runs and
// platforms. dim must be >= 2.
std::unique_ptr<EmbeddingBackend> mock_backend(uint64_t seed, size_t dim);

// Persistent embedding store: a directory holding a JSON index plus one
// row-major little-endian float32 matrix file per (space_id, kind). The
// matrix file starts with an 8-byte header: dim and row count, both LE u32.
//
// Payloads are narrowed to float32 on put; round-trips are bit-exact for
// values representable in float32. Single writer, many readers; the index
// is flushed via write-temp-then-rename.
class EmbeddingStore {
 public:
  explicit EmbeddingStore(std::filesystem::path root);
  ~EmbeddingStore();

  EmbeddingStore(const EmbeddingStore&) = delete;
  EmbeddingStore& operator=(const EmbeddingStore&) = delete;

  // Throws DimMismatch if the space is already present with another dim.
  void put(const std::string& space_id, EmbeddingKind kind, const std::string& key,
           const Embedding& embedding);

  std::optional<Embedding> get(const std::string& space_id, EmbeddingKind kind,
                               const std::string& key) const;

  bool contains(const std::string& space_id, EmbeddingKind kind,
                const std::string& key) const;

  // Atomically persists the index. Also called by the destructor.
  void flush();

  const std::filesystem::path& root() const { return root_; }

 private:
  struct Matrix;
  Matrix& matrix_for(const std::string& space_id, EmbeddingKind kind, size_t dim);
  const Matrix* find_matrix(const std::string& space_id, EmbeddingKind kind) const;

  std::filesystem::path root_;
  std::map<std::string, size_t> space_dims_;
  std::map<std::string, std::unique_ptr<Matrix>> matrices_;  // key: space \x1f kind
  bool dirty_ = false;
};

}  // namespace vwsd
