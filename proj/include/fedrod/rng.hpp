#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace fedrod {

using Rng = std::mt19937_64;

// Independent random streams. Every randomized operation draws from a
// generator keyed by (master seed, stream, extra keys such as round and
// client id), so results never depend on call order or thread scheduling.
enum class Stream : std::uint64_t {
  ClassMeans = 1,
  Samples = 2,
  Imbalance = 3,
  MetaSplit = 4,
  Partition = 5,
  Poison = 6,
  ModelInit = 7,
  HyperInit = 8,
  ClientSampling = 9,
  LocalShuffle = 10,
  PersonalShuffle = 11,
  Finetune = 12,
  GradCheck = 13,
};

inline Rng keyed_rng(std::uint64_t seed, Stream stream,
                     std::initializer_list<std::uint64_t> keys = {}) {
  std::vector<std::uint32_t> words;
  words.reserve(4 + 2 * keys.size());
  auto push = [&words](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push(seed);
  push(static_cast<std::uint64_t>(stream));
  for (auto k : keys) push(k);
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

}  // namespace fedrod
