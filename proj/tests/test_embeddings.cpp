#include <doctest.h>

#include <cmath>

#include "support/test_util.hpp"
#include "vwsd/embeddings.hpp"
#include "vwsd/errors.hpp"
#include "vwsd/scoring.hpp"

using namespace vwsd;
using testutil::TempDir;
using testutil::write_file;

TEST_CASE("mock backend is deterministic per input") {
  auto backend = mock_backend(0, 4);
  const auto twice = embed_texts(*backend, {"a", "a"});
  CHECK(twice[0] == twice[1]);

  auto backend_again = mock_backend(0, 4);
  const auto later = embed_texts(*backend_again, {"a"});
  CHECK(later[0] == twice[0]);  // stable across instances and runs
}

TEST_CASE("mock backend dimension and norm") {
  auto backend = mock_backend(0, 8);
  const auto embs = embed_texts(*backend, {"x"});
  CHECK(embs[0].dim() == 8);

  for (const char* text : {"x", "andromeda tree", "a", "longer text with words"}) {
    const auto e = embed_texts(*backend, {text})[0];
    double norm_sq = 0.0;
    for (double v : e.values) norm_sq += v * v;
    CHECK(std::fabs(std::sqrt(norm_sq) - 1.0) < 1e-9);
    CHECK(std::fabs(similarity(e, e, Metric::cosine) - 1.0) < 1e-12);
  }
}

TEST_CASE("different seeds give different vectors") {
  auto b0 = mock_backend(0, 16);
  auto b1 = mock_backend(1, 16);
  const auto e0 = embed_texts(*b0, {"a"})[0];
  const auto e1 = embed_texts(*b1, {"a"})[0];
  CHECK(e0.values != e1.values);
  CHECK(e0.space_id != e1.space_id);
}

TEST_CASE("mock dim precondition") {
  CHECK_THROWS_AS(mock_backend(0, 1), Error);
}

TEST_CASE("embed_texts input contract") {
  auto backend = mock_backend(0, 4);
  CHECK_THROWS_AS(embed_texts(*backend, {}), Error);
  try {
    embed_texts(*backend, {"ok", "   "});
    FAIL("expected EmptyInput");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyInput);
  }
}

TEST_CASE("image embeddings depend only on file bytes and space") {
  TempDir tmp("emb_images");
  write_file(tmp / "one.jpg", "payload-A");
  write_file(tmp / "two.jpg", "payload-A");   // same bytes, different name
  write_file(tmp / "three.jpg", "payload-B");  // different bytes

  auto backend = mock_backend(3, 8);
  const auto embs =
      embed_images(*backend, {"one.jpg", "two.jpg", "three.jpg"}, tmp.path());
  CHECK(embs[0] == embs[1]);
  CHECK(embs[0].values != embs[2].values);

  const auto again = embed_images(*backend, {"one.jpg"}, tmp.path());
  CHECK(again[0] == embs[0]);
}

TEST_CASE("unreadable image names the id") {
  TempDir tmp("emb_unreadable");
  auto backend = mock_backend(0, 4);
  try {
    embed_images(*backend, {"ghost.jpg"}, tmp.path());
    FAIL("expected ImageUnreadable");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ImageUnreadable);
    CHECK(std::string(e.what()).find("ghost.jpg") != std::string::npos);
  }
}

TEST_CASE("store put/get round trip") {
  TempDir tmp("store_basic");
  EmbeddingStore store(tmp / "store");

  Embedding e;
  e.space_id = "s";
  e.values = {1.0, 0.5, -0.25};  // exactly representable in float32
  store.put("s", EmbeddingKind::text, "k", e);

  const auto back = store.get("s", EmbeddingKind::text, "k");
  REQUIRE(back.has_value());
  CHECK(back->values == e.values);

  CHECK_FALSE(store.get("s", EmbeddingKind::text, "unknown").has_value());
  CHECK_FALSE(store.get("other", EmbeddingKind::text, "k").has_value());
  CHECK(store.contains("s", EmbeddingKind::text, "k"));
}

TEST_CASE("store rejects dim changes within a space") {
  TempDir tmp("store_dim");
  EmbeddingStore store(tmp / "store");
  Embedding e3{"s", {1.0, 2.0, 3.0}};
  Embedding e2{"s", {1.0, 2.0}};
  store.put("s", EmbeddingKind::text, "a", e3);
  try {
    store.put("s", EmbeddingKind::image, "b", e2);  // same space, other kind
    FAIL("expected DimMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DimMismatch);
  }
}

TEST_CASE("store overwrite keeps one row per key") {
  TempDir tmp("store_overwrite");
  EmbeddingStore store(tmp / "store");
  store.put("s", EmbeddingKind::text, "k", Embedding{"s", {1.0, 2.0}});
  store.put("s", EmbeddingKind::text, "k", Embedding{"s", {3.0, 4.0}});
  const auto back = store.get("s", EmbeddingKind::text, "k");
  REQUIRE(back.has_value());
  CHECK(back->values == std::vector<double>{3.0, 4.0});
}

TEST_CASE("10k vectors survive a disk round trip bit-exactly") {
  TempDir tmp("store_bulk");
  const size_t kCount = 10000;
  const size_t kDim = 8;

  // float32-representable payloads, as the store contract requires
  auto value_at = [](size_t i, size_t d) {
    return static_cast<double>(static_cast<float>(
        std::sin(static_cast<double>(i * 31 + d * 7)) * 0.5));
  };

  {
    EmbeddingStore store(tmp / "store");
    for (size_t i = 0; i < kCount; ++i) {
      Embedding e;
      e.space_id = "bulk";
      for (size_t d = 0; d < kDim; ++d) e.values.push_back(value_at(i, d));
      store.put("bulk", i % 2 == 0 ? EmbeddingKind::text : EmbeddingKind::image,
                "key" + std::to_string(i), e);
    }
    store.flush();
  }

  EmbeddingStore reopened(tmp / "store");
  for (size_t i = 0; i < kCount; ++i) {
    const auto back = reopened.get(
        "bulk", i % 2 == 0 ? EmbeddingKind::text : EmbeddingKind::image,
        "key" + std::to_string(i));
    REQUIRE(back.has_value());
    for (size_t d = 0; d < kDim; ++d) {
      REQUIRE(back->values[d] == value_at(i, d));  // bit-exact
    }
  }
}

TEST_CASE("matrix file carries the documented binary header") {
  TempDir tmp("store_header");
  {
    EmbeddingStore store(tmp / "store");
    store.put("s", EmbeddingKind::text, "a", Embedding{"s", {1.0, 2.0, 3.0}});
    store.put("s", EmbeddingKind::text, "b", Embedding{"s", {4.0, 5.0, 6.0}});
    store.flush();
  }
  // exactly one matrix file; 8-byte header (dim=3, rows=2 LE) + 2*3 floats
  std::filesystem::path matrix_file;
  for (const auto& entry : std::filesystem::directory_iterator(tmp / "store")) {
    if (entry.path().extension() == ".f32") matrix_file = entry.path();
  }
  REQUIRE(!matrix_file.empty());
  const std::string bytes = testutil::read_file(matrix_file);
  REQUIRE(bytes.size() == 8 + 2 * 3 * sizeof(float));
  CHECK(static_cast<unsigned char>(bytes[0]) == 3);  // dim LE u32
  CHECK(static_cast<unsigned char>(bytes[1]) == 0);
  CHECK(static_cast<unsigned char>(bytes[4]) == 2);  // rows LE u32
  CHECK(static_cast<unsigned char>(bytes[5]) == 0);
}
