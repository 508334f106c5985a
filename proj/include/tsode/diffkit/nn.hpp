#pragma once
#include <span>
#include <vector>

#include "tsode/diffkit/tape.hpp"
#include "tsode/diffkit/tensor.hpp"
#include "tsode/rng.hpp"

namespace tsode::diffkit {

// Every layer has two forward paths that produce bit-identical results: a
// plain path for inference hot loops and a taped path for training. The
// equality is load-bearing (the conformal quantile is computed on the plain
// path) and is pinned by tests.

struct Dense {
  Tensor w;  // out x in
  Tensor b;  // out
  static Dense init(int in, int out, Rng& rng);
  Tensor apply(const Tensor& x) const;
  std::vector<Tensor*> params() { return {&w, &b}; }
};

struct BoundDense {
  Var w, b;
};

BoundDense bind(Tape& tape, const Dense& d);
Var apply(Tape& tape, const BoundDense& d, Var x);

struct GruCell {
  int input_dim = 0;
  int hidden_dim = 0;
  Tensor wz, uz, bz, wr, ur, br, wn, un, bn;
  static GruCell init(int input_dim, int hidden_dim, Rng& rng);
  Tensor step(const Tensor& x, const Tensor& h) const;
  std::vector<Tensor*> params() { return {&wz, &uz, &bz, &wr, &ur, &br, &wn, &un, &bn}; }
};

struct BoundGru {
  Var wz, uz, bz, wr, ur, br, wn, un, bn;
};

BoundGru bind(Tape& tape, const GruCell& g);
Var gru_step(Tape& tape, const BoundGru& g, Var x, Var h);

// Rolls the full sequence and returns the final hidden state. The taped
// overload records every step so gradients flow back through the sequence.
Var gru_forward(Tape& tape, const BoundGru& g, std::span<const Tensor> inputs, Var h0);
Tensor gru_forward(const GruCell& g, std::span<const Tensor> inputs, const Tensor& h0);

// Dense stack with tanh between layers and a linear head.
struct Mlp {
  std::vector<Dense> layers;
  static Mlp init(std::span<const int> dims, Rng& rng);
  Tensor apply(const Tensor& x) const;
  std::vector<Tensor*> params();
};

struct BoundMlp {
  std::vector<BoundDense> layers;
};

BoundMlp bind(Tape& tape, const Mlp& m);
Var apply(Tape& tape, const BoundMlp& m, Var x);

}  // namespace tsode::diffkit
