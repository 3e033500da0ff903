#include <algorithm>
#include <deque>
#include <string>
#include <thread>

#include "dgl/replay_buffer.hpp"
#include "dgl/rng.hpp"
#include "dgl/vq_codec.hpp"
#include "doctest.h"

using namespace dgl;

namespace {

std::vector<std::string> held(const ReplayBuffer<std::string>& b) {
  std::vector<std::string> out;
  for (const auto& e : b.snapshot()) out.push_back(e.payload);
  std::sort(out.begin(), out.end());
  return out;
}

// Independent model: entries in arrival order, reads pick the lexicographic
// minimum of (reuse, -seq) by a full scan.
struct ModelBuffer {
  struct Item {
    int payload;
    std::uint64_t reuse, seq;
  };
  std::size_t capacity;
  std::uint64_t next = 0;
  std::deque<Item> items;

  void push(int p) {
    if (items.size() == capacity) items.pop_front();
    items.push_back({p, 0, ++next});
  }
  std::optional<Item> sample() {
    if (items.empty()) return std::nullopt;
    auto best = items.begin();
    for (auto it = items.begin(); it != items.end(); ++it)
      if (std::make_pair(it->reuse, ~it->seq) < std::make_pair(best->reuse, ~best->seq)) best = it;
    ++best->reuse;
    return *best;
  }
};

}  // namespace

TEST_CASE("writes overwrite the oldest entry") {
  ReplayBuffer<std::string> two(2);
  two.push("a", {});
  two.push("b", {});
  two.push("c", {});
  CHECK(held(two) == std::vector<std::string>{"b", "c"});

  ReplayBuffer<std::string> one(1);
  one.push("a", {});
  one.push("b", {});
  CHECK(held(one) == std::vector<std::string>{"b"});
  CHECK_THROWS_AS(ReplayBuffer<int>(0), std::invalid_argument);
}

TEST_CASE("a thousand pushes into capacity 50 keep the last 50 sequence numbers") {
  ReplayBuffer<int> b(50);
  for (int i = 0; i < 1000; ++i) b.push(i, {i % 10});
  CHECK(b.size() == 50);
  std::vector<std::uint64_t> seqs;
  for (const auto& e : b.snapshot()) seqs.push_back(e.seq);
  std::sort(seqs.begin(), seqs.end());
  for (std::size_t i = 0; i < 50; ++i) CHECK(seqs[i] == 951 + i);
  CHECK(b.last_seq() == 1000);
}

TEST_CASE("reads prefer the least reused, then the newest") {
  ReplayBuffer<std::string> b(3);
  CHECK_FALSE(b.sample().has_value());
  b.push("first", {});
  b.push("second", {});
  CHECK(b.sample()->seq == 2);  // equal reuse: newest
  auto next = b.sample();       // second now has reuse 1
  CHECK(next->seq == 1);
  CHECK(next->reuse_count == 1);
  b.push("third", {});
  CHECK(b.sample()->payload == "third");
}

TEST_CASE("least reused beats newer") {
  ReplayBuffer<int> b(4);
  b.push(1, {});
  b.push(2, {});
  b.push(3, {});
  b.sample();  // seq 3 -> reuse 1
  b.sample();  // seq 2 -> reuse 1
  CHECK(b.sample()->seq == 1);
}

TEST_CASE("a static buffer is read round-robin with reuse spread at most one") {
  ReplayBuffer<int> b(3);
  for (int i = 0; i < 3; ++i) b.push(i, {});
  for (int round = 0; round < 30; ++round) {
    b.sample();
    std::uint64_t lo = ~0ULL, hi = 0;
    for (const auto& e : b.snapshot()) {
      lo = std::min(lo, e.reuse_count);
      hi = std::max(hi, e.reuse_count);
    }
    CHECK(hi - lo <= 1);
  }
}

TEST_CASE("fairness: after M*R reads of a static buffer every reuse count is within one of R") {
  for (std::size_t M : {1, 2, 5, 17}) {
    for (std::uint64_t R : {1, 3, 10}) {
      ReplayBuffer<int> b(M);
      for (std::size_t i = 0; i < M; ++i) b.push(static_cast<int>(i), {});
      for (std::uint64_t i = 0; i < M * R; ++i) b.sample();
      for (const auto& e : b.snapshot()) {
        CHECK(e.reuse_count + 1 >= R);
        CHECK(e.reuse_count <= R + 1);
      }
    }
  }
}

TEST_CASE("property: random interleavings match the reference model") {
  Rng gen(99);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t cap = 1 + uniform_index(gen, 6);
    ReplayBuffer<int> b(cap);
    ModelBuffer m{cap};
    for (int step = 0; step < 100; ++step) {
      if (uniform01(gen) < 0.45) {
        b.push(step, {step});
        m.push(step);
      } else {
        const auto got = b.sample();
        const auto want = m.sample();
        REQUIRE(got.has_value() == want.has_value());
        if (got) {
          CHECK(got->payload == want->payload);
          CHECK(got->seq == want->seq);
          CHECK(got->reuse_count == want->reuse);
          CHECK(got->labels == std::vector<int>{got->payload});
        }
      }
      CHECK(b.size() <= cap);
      CHECK(b.size() == m.items.size());
    }
  }
}

TEST_CASE("stats: empty, raw and reuse histogram") {
  ReplayBuffer<Shape> b(2);
  const auto bits = [](const Shape& s) { return 32ULL * s.numel(); };
  const auto empty = b.stats(bits, 1000);
  CHECK(empty.size == 0);
  CHECK(empty.total_bytes == 0);

  b.push({128, 128, 32, 32}, {});
  b.push({128, 128, 32, 32}, {});
  b.sample();
  const auto s = b.stats(bits);
  CHECK(s.size == 2);
  CHECK(s.total_bytes == 2ULL * 128 * 128 * 1024 * 4);
  CHECK(s.reuse_histogram.at(0) == 1);
  CHECK(s.reuse_histogram.at(1) == 1);
  CHECK(raw_bits(Tensor<float>({2, 3, 4, 4})) == 32ULL * 96);
}

TEST_CASE("quantized buffer bytes equal the buffer-size formula") {
  for (std::uint64_t C : {2ULL, 16ULL, 256ULL, 1000ULL}) {
    const std::size_t B = 4, N = 8, K = 32, k = 8, capacity = 3;
    ReplayBuffer<QuantizedBatch> b(capacity);
    for (std::size_t i = 0; i < capacity + 2; ++i) {
      QuantizedBatch q;
      q.batch = B;
      q.extent = N;
      q.atoms = C;
      q.dims.assign(k, K / k);
      q.indices.assign(B * k * N * N, 0);
      b.push(q, std::vector<int>(B, 0));
    }
    const auto s = b.stats([](const QuantizedBatch& q) { return index_bits(q); }, 32ULL * K * C);
    const std::uint64_t M = capacity * B;
    CAPTURE(C);
    CHECK(s.total_bits == buffer_bits(M, N, K, C, k));
    CHECK(s.total_bytes == (buffer_bits(M, N, K, C, k) + 7) / 8);
  }
}

TEST_CASE("one writer and one reader on separate threads") {
  ReplayBuffer<int> b(4);
  std::thread writer([&] {
    for (int i = 0; i < 5000; ++i) b.push(i, {});
  });
  std::size_t hits = 0, misses = 0;
  for (int i = 0; i < 5000; ++i) {
    if (b.sample())
      ++hits;
    else
      ++misses;
    CHECK(b.size() <= 4);
  }
  writer.join();
  CHECK(hits + misses == 5000);
  CHECK(b.last_seq() == 5000);
}
