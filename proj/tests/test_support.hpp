// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "mixcomp/model.hpp"
#include "mixcomp/numerics.hpp"

namespace mixcomp::fixtures {

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.hidden = 16;
  c.n_heads = 2;
  c.head_dim = 8;
  c.intermediate = 32;
  c.n_experts = 4;
  c.top_k = 2;
  c.vocab = 64;
  return c;
}

inline MoEModel tiny_model(std::uint64_t seed, const ModelConfig& c = tiny_config()) {
  SeededRng rng(seed);
  return gen_synthetic(c, rng);
}

inline Matrix random_matrix(std::size_t rows, std::size_t cols, SeededRng& rng, double sd = 1.0) {
  Matrix m(rows, cols);
  for (float& v : m.data()) v = static_cast<float>(rng.normal(0.0, sd));
  return m;
}

inline Corpus uniform_corpus(std::size_t n, std::size_t len, std::size_t vocab, std::uint64_t seed) {
  SeededRng rng(seed);
  Corpus c(n, Sequence(len));
  for (auto& s : c)
    for (auto& t : s) t = static_cast<TokenId>(rng.uniform_index(vocab));
  return c;
}

}  // namespace mixcomp::fixtures
