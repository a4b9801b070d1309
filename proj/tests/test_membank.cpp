#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mpt/membank.hpp"

#include <deque>

using namespace mpt;

namespace {

MemoryToken<float> token(float v, Index dim, Index anchor = 0, int iteration = 0,
                         PromptKind kind = PromptKind::Label) {
  MemoryToken<float> t;
  t.vector = RowVector<float>::Constant(dim, v);
  t.anchor = anchor;
  t.iteration = iteration;
  t.kind = kind;
  return t;
}

}  // namespace

TEST_CASE("empty bank reads 0 x D") {
  MemoryBank<float> bank(8);
  CHECK(bank.empty());
  const MatrixXf m = bank.read_all();
  CHECK(m.rows() == 0);
  CHECK(m.cols() == 8);
}

TEST_CASE("writes concatenate in order") {
  MemoryBank<float> bank(4);
  bank.write({token(1, 4), token(2, 4)});
  bank.write({token(3, 4)});
  const MatrixXf m = bank.read_all();
  REQUIRE(m.rows() == 3);
  CHECK(m(0, 0) == 1);
  CHECK(m(1, 3) == 2);
  CHECK(m(2, 2) == 3);
  bank.write({});
  CHECK(bank.size() == 3);
}

TEST_CASE("read is a copy") {
  MemoryBank<float> bank(3);
  bank.write({token(1, 3)});
  MatrixXf m = bank.read_all();
  m.setZero();
  CHECK(bank.read_all()(0, 0) == 1);
}

TEST_CASE("dimension mismatch") {
  MemoryBank<float> bank(4);
  CHECK_THROWS_AS(bank.write({token(1, 4), token(1, 5)}), ShapeError);
  CHECK(bank.empty());
}

TEST_CASE("bounded bank matches a reference FIFO") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t capacity = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
    MemoryBank<float> bank(2, capacity);
    std::deque<float> reference;
    float next = 0;
    const int ops = std::uniform_int_distribution<int>(1, 12)(rng);
    for (int op = 0; op < ops; ++op) {
      if (std::uniform_int_distribution<int>(0, 9)(rng) == 0) {
        bank.reset();
        reference.clear();
        continue;
      }
      std::vector<MemoryToken<float>> batch;
      const int n = std::uniform_int_distribution<int>(0, 4)(rng);
      for (int i = 0; i < n; ++i) {
        batch.push_back(token(next, 2));
        reference.push_back(next);
        next += 1;
      }
      while (reference.size() > capacity) reference.pop_front();
      bank.write(batch);
      const MatrixXf m = bank.read_all();
      REQUIRE(static_cast<std::size_t>(m.rows()) == reference.size());
      for (std::size_t i = 0; i < reference.size(); ++i) REQUIRE(m(static_cast<Index>(i), 1) == reference[i]);
    }
  }
}

TEST_CASE("unbounded bank grows by batch size") {
  MemoryBank<float> bank(2);
  for (int i = 0; i < 8; ++i) bank.write({token(0, 2), token(1, 2), token(2, 2), token(3, 2)});
  CHECK(bank.size() == 32);
}

TEST_CASE("snapshot round trip") {
  MemoryBank<float> bank(3, 5, "series_002/7");
  std::mt19937_64 rng(2);
  std::normal_distribution<float> n;
  for (int i = 0; i < 4; ++i) {
    MemoryToken<float> t = token(0, 3, 10 * i, i / 2, i % 2 ? PromptKind::Boundary : PromptKind::Label);
    for (Index d = 0; d < 3; ++d) t.vector(d) = n(rng);
    bank.write({t});
  }
  const BankSnapshot snap = bank.snapshot();
  CHECK(snap.manifest.at("count") == 4);
  CHECK(snap.manifest.at("D") == 3);
  CHECK(snap.block.size() == 4 * 3 * 4);
  CHECK(snap.manifest.at("kinds")[1] == "boundary");

  const MemoryBank<float> back = MemoryBank<float>::restore(snap, 3);
  CHECK(back.read_all() == bank.read_all());
  CHECK(back.capacity() == bank.capacity());
  CHECK(back.subsequence_id() == "series_002/7");
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(back.tokens()[i].anchor == bank.tokens()[i].anchor);
    CHECK(back.tokens()[i].iteration == bank.tokens()[i].iteration);
    CHECK(back.tokens()[i].kind == bank.tokens()[i].kind);
  }

  CHECK_THROWS_AS(MemoryBank<float>::restore(snap, 4), ShapeError);
  BankSnapshot wrong = snap;
  wrong.manifest["version"] = 2;
  CHECK_THROWS_AS(MemoryBank<float>::restore(wrong, 3), DataError);
}

TEST_CASE("empty snapshot round trip") {
  const MemoryBank<float> bank(6);
  const BankSnapshot snap = bank.snapshot();
  CHECK(snap.block.empty());
  const MemoryBank<float> back = MemoryBank<float>::restore(snap, 6);
  CHECK(back.empty());
  CHECK(back.read_all().cols() == 6);
  CHECK_FALSE(back.capacity().has_value());
}

TEST_CASE("reset clears") {
  MemoryBank<double> bank(2);
  bank.write({MemoryToken<double>{RowVector<double>::Ones(2), 0, 0, PromptKind::Label}});
  bank.reset();
  CHECK(bank.empty());
  CHECK(bank.read_all().rows() == 0);
}
