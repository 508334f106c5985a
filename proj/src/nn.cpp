#include "tsode/diffkit/nn.hpp"

#include <cmath>

#include "tsode/faults.hpp"

namespace tsode::diffkit {

namespace {

Tensor xavier(int out, int in, Rng& rng) {
  Tensor t(out, in);
  const double limit = std::sqrt(6.0 / (in + out));
  for (auto& x : t.v) x = rng.uniform(-limit, limit);
  return t;
}

Tensor matvec_plain(const Tensor& w, const Tensor& x) {
  if (x.cols != 1 || w.cols != x.rows) throw ConfigFault("matvec dimension mismatch");
  Tensor out(w.rows, 1);
  for (int i = 0; i < w.rows; ++i) {
    double acc = 0.0;
    const double* row = w.v.data() + static_cast<std::size_t>(i) * w.cols;
    for (int j = 0; j < w.cols; ++j) acc += row[j] * x.v[static_cast<size_t>(j)];
    out.v[static_cast<size_t>(i)] = acc;
  }
  return out;
}

double sigmoid1(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Dense Dense::init(int in, int out, Rng& rng) {
  if (in < 1 || out < 1) throw ConfigFault("dense dims must be >= 1");
  Dense d;
  d.w = xavier(out, in, rng);
  d.b = Tensor(out, 1);
  return d;
}

Tensor Dense::apply(const Tensor& x) const {
  Tensor out = matvec_plain(w, x);
  for (int i = 0; i < out.rows; ++i) out.v[static_cast<size_t>(i)] += b.v[static_cast<size_t>(i)];
  return out;
}

BoundDense bind(Tape& tape, const Dense& d) { return {tape.leaf(d.w), tape.leaf(d.b)}; }

Var apply(Tape& tape, const BoundDense& d, Var x) {
  return tape.add(tape.matvec(d.w, x), d.b);
}

GruCell GruCell::init(int input_dim, int hidden_dim, Rng& rng) {
  if (input_dim < 1 || hidden_dim < 1) throw ConfigFault("gru dims must be >= 1");
  GruCell g;
  g.input_dim = input_dim;
  g.hidden_dim = hidden_dim;
  g.wz = xavier(hidden_dim, input_dim, rng);
  g.uz = xavier(hidden_dim, hidden_dim, rng);
  g.bz = Tensor(hidden_dim, 1);
  g.wr = xavier(hidden_dim, input_dim, rng);
  g.ur = xavier(hidden_dim, hidden_dim, rng);
  g.br = Tensor(hidden_dim, 1);
  g.wn = xavier(hidden_dim, input_dim, rng);
  g.un = xavier(hidden_dim, hidden_dim, rng);
  g.bn = Tensor(hidden_dim, 1);
  return g;
}

// z = sigmoid(Wz x + Uz h + bz)
// r = sigmoid(Wr x + Ur h + br)
// n = tanh(Wn x + Un (r.h) + bn)
// h' = (1-z).h + z.n
Tensor GruCell::step(const Tensor& x, const Tensor& h) const {
  if (x.rows != input_dim || h.rows != hidden_dim) throw ConfigFault("gru step dimension mismatch");
  Tensor zp = matvec_plain(wz, x);
  {
    Tensor t = matvec_plain(uz, h);
    for (int i = 0; i < hidden_dim; ++i)
      zp.v[static_cast<size_t>(i)] =
          sigmoid1((zp.v[static_cast<size_t>(i)] + t.v[static_cast<size_t>(i)]) + bz.v[static_cast<size_t>(i)]);
  }
  Tensor rp = matvec_plain(wr, x);
  {
    Tensor t = matvec_plain(ur, h);
    for (int i = 0; i < hidden_dim; ++i)
      rp.v[static_cast<size_t>(i)] =
          sigmoid1((rp.v[static_cast<size_t>(i)] + t.v[static_cast<size_t>(i)]) + br.v[static_cast<size_t>(i)]);
  }
  Tensor rh(hidden_dim, 1);
  for (int i = 0; i < hidden_dim; ++i)
    rh.v[static_cast<size_t>(i)] = rp.v[static_cast<size_t>(i)] * h.v[static_cast<size_t>(i)];
  Tensor np = matvec_plain(wn, x);
  {
    Tensor t = matvec_plain(un, rh);
    for (int i = 0; i < hidden_dim; ++i)
      np.v[static_cast<size_t>(i)] =
          std::tanh((np.v[static_cast<size_t>(i)] + t.v[static_cast<size_t>(i)]) + bn.v[static_cast<size_t>(i)]);
  }
  Tensor out(hidden_dim, 1);
  for (int i = 0; i < hidden_dim; ++i) {
    const double z = zp.v[static_cast<size_t>(i)];
    out.v[static_cast<size_t>(i)] =
        (1.0 - z) * h.v[static_cast<size_t>(i)] + z * np.v[static_cast<size_t>(i)];
  }
  return out;
}

BoundGru bind(Tape& tape, const GruCell& g) {
  return {tape.leaf(g.wz), tape.leaf(g.uz), tape.leaf(g.bz),
          tape.leaf(g.wr), tape.leaf(g.ur), tape.leaf(g.br),
          tape.leaf(g.wn), tape.leaf(g.un), tape.leaf(g.bn)};
}

Var gru_step(Tape& tape, const BoundGru& g, Var x, Var h) {
  Var z = tape.sigmoid(tape.add(tape.add(tape.matvec(g.wz, x), tape.matvec(g.uz, h)), g.bz));
  Var r = tape.sigmoid(tape.add(tape.add(tape.matvec(g.wr, x), tape.matvec(g.ur, h)), g.br));
  Var rh = tape.hadamard(r, h);
  Var n = tape.tanh(tape.add(tape.add(tape.matvec(g.wn, x), tape.matvec(g.un, rh)), g.bn));
  return tape.add(tape.hadamard(tape.one_minus(z), h), tape.hadamard(z, n));
}

Var gru_forward(Tape& tape, const BoundGru& g, std::span<const Tensor> inputs, Var h0) {
  if (inputs.empty()) throw ConfigFault("gru_forward needs at least one input");
  Var h = h0;
  for (const Tensor& x : inputs) h = gru_step(tape, g, tape.leaf(x), h);
  return h;
}

Tensor gru_forward(const GruCell& g, std::span<const Tensor> inputs, const Tensor& h0) {
  if (inputs.empty()) throw ConfigFault("gru_forward needs at least one input");
  Tensor h = h0;
  for (const Tensor& x : inputs) h = g.step(x, h);
  return h;
}

Mlp Mlp::init(std::span<const int> dims, Rng& rng) {
  if (dims.size() < 2) throw ConfigFault("mlp needs at least two dims");
  Mlp m;
  for (size_t i = 0; i + 1 < dims.size(); ++i)
    m.layers.push_back(Dense::init(dims[i], dims[i + 1], rng));
  return m;
}

Tensor Mlp::apply(const Tensor& x) const {
  Tensor cur = x;
  for (size_t i = 0; i < layers.size(); ++i) {
    cur = layers[i].apply(cur);
    if (i + 1 < layers.size())
      for (auto& v : cur.v) v = std::tanh(v);
  }
  return cur;
}

std::vector<Tensor*> Mlp::params() {
  std::vector<Tensor*> out;
  for (auto& l : layers) {
    out.push_back(&l.w);
    out.push_back(&l.b);
  }
  return out;
}

BoundMlp bind(Tape& tape, const Mlp& m) {
  BoundMlp out;
  for (const auto& l : m.layers) out.layers.push_back(bind(tape, l));
  return out;
}

Var apply(Tape& tape, const BoundMlp& m, Var x) {
  Var cur = x;
  for (size_t i = 0; i < m.layers.size(); ++i) {
    cur = apply(tape, m.layers[i], cur);
    if (i + 1 < m.layers.size()) cur = tape.tanh(cur);
  }
  return cur;
}

}  // namespace tsode::diffkit
