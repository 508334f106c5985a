#include "tsode/diffkit/tape.hpp"

#include <cmath>

#include "tsode/faults.hpp"

namespace tsode::diffkit {

int Tape::push(Op op, int rows, int cols, int a, int b, double c) {
  const std::size_t n = static_cast<std::size_t>(rows) * cols;
  Node node;
  node.op = op;
  node.a = a;
  node.b = b;
  node.rows = rows;
  node.cols = cols;
  node.val = arena_.size();
  node.grd = arena_.size() + n;
  node.c = c;
  arena_.resize(arena_.size() + 2 * n, 0.0);
  nodes_.push_back(node);
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::check(Var v) const {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
    throw UsageFault("Var does not belong to this tape");
}

Var Tape::leaf(const Tensor& t) {
  if (t.size() <= 0) throw ConfigFault("leaf tensor must be non-empty");
  const int id = push(Op::kLeaf, t.rows, t.cols, -1, -1, 0.0);
  double* out = val_ptr(id);
  for (int i = 0; i < t.size(); ++i) out[i] = t.v[static_cast<size_t>(i)];
  return {id};
}

Var Tape::leaf_scalar(double x) {
  const int id = push(Op::kLeaf, 1, 1, -1, -1, 0.0);
  val_ptr(id)[0] = x;
  return {id};
}

Var Tape::matvec(Var w, Var x) {
  check(w);
  check(x);
  const Node& nw = nodes_[static_cast<size_t>(w.id)];
  const Node& nx = nodes_[static_cast<size_t>(x.id)];
  if (nx.cols != 1 || nw.cols != nx.rows) throw ConfigFault("matvec dimension mismatch");
  const int r = nw.rows, c = nw.cols;  // push may reallocate nodes_, invalidating nw
  const int id = push(Op::kMatVec, r, 1, w.id, x.id, 0.0);
  const double* wv = val_ptr(w.id);
  const double* xv = val_ptr(x.id);
  double* out = val_ptr(id);
  for (int i = 0; i < r; ++i) {
    double acc = 0.0;
    const double* row = wv + static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j) acc += row[j] * xv[j];
    out[i] = acc;
  }
  return {id};
}

Var Tape::binary(Op op, Var a, Var b, double c) {
  check(a);
  check(b);
  const Node& na = nodes_[static_cast<size_t>(a.id)];
  const Node& nb = nodes_[static_cast<size_t>(b.id)];
  if (na.rows != nb.rows || na.cols != nb.cols) throw ConfigFault("elementwise shape mismatch");
  const int id = push(op, na.rows, na.cols, a.id, b.id, c);
  const double* av = val_ptr(a.id);
  const double* bv = val_ptr(b.id);
  double* out = val_ptr(id);
  const int n = len(id);
  switch (op) {
    case Op::kAdd: for (int i = 0; i < n; ++i) out[i] = av[i] + bv[i]; break;
    case Op::kSub: for (int i = 0; i < n; ++i) out[i] = av[i] - bv[i]; break;
    case Op::kAxpy: for (int i = 0; i < n; ++i) out[i] = av[i] + c * bv[i]; break;
    case Op::kHadamard: for (int i = 0; i < n; ++i) out[i] = av[i] * bv[i]; break;
    case Op::kDiv: for (int i = 0; i < n; ++i) out[i] = av[i] / bv[i]; break;
    default: throw UsageFault("not a binary op");
  }
  return {id};
}

Var Tape::add(Var a, Var b) { return binary(Op::kAdd, a, b); }
Var Tape::sub(Var a, Var b) { return binary(Op::kSub, a, b); }
Var Tape::axpy(Var a, Var b, double c) { return binary(Op::kAxpy, a, b, c); }
Var Tape::hadamard(Var a, Var b) { return binary(Op::kHadamard, a, b); }
Var Tape::div(Var a, Var b) { return binary(Op::kDiv, a, b); }

Var Tape::unary(Op op, Var a) {
  check(a);
  const Node& na = nodes_[static_cast<size_t>(a.id)];
  const int id = push(op, na.rows, na.cols, a.id, -1, 0.0);
  const double* av = val_ptr(a.id);
  double* out = val_ptr(id);
  const int n = len(id);
  switch (op) {
    case Op::kSigmoid: for (int i = 0; i < n; ++i) out[i] = 1.0 / (1.0 + std::exp(-av[i])); break;
    case Op::kTanh: for (int i = 0; i < n; ++i) out[i] = std::tanh(av[i]); break;
    case Op::kExp: for (int i = 0; i < n; ++i) out[i] = std::exp(av[i]); break;
    case Op::kLog: for (int i = 0; i < n; ++i) out[i] = std::log(av[i]); break;
    case Op::kSquare: for (int i = 0; i < n; ++i) out[i] = av[i] * av[i]; break;
    case Op::kOneMinus: for (int i = 0; i < n; ++i) out[i] = 1.0 - av[i]; break;
    default: throw UsageFault("not a unary op");
  }
  return {id};
}

Var Tape::sigmoid(Var a) { return unary(Op::kSigmoid, a); }
Var Tape::tanh(Var a) { return unary(Op::kTanh, a); }
Var Tape::exp(Var a) { return unary(Op::kExp, a); }
Var Tape::log(Var a) { return unary(Op::kLog, a); }
Var Tape::square(Var a) { return unary(Op::kSquare, a); }
Var Tape::one_minus(Var a) { return unary(Op::kOneMinus, a); }

Var Tape::scale(Var a, double c) {
  check(a);
  const Node& na = nodes_[static_cast<size_t>(a.id)];
  const int id = push(Op::kScale, na.rows, na.cols, a.id, -1, c);
  const double* av = val_ptr(a.id);
  double* out = val_ptr(id);
  for (int i = 0, n = len(id); i < n; ++i) out[i] = c * av[i];
  return {id};
}

Var Tape::add_scalar(Var a, double c) {
  check(a);
  const Node& na = nodes_[static_cast<size_t>(a.id)];
  const int id = push(Op::kAddScalar, na.rows, na.cols, a.id, -1, c);
  const double* av = val_ptr(a.id);
  double* out = val_ptr(id);
  for (int i = 0, n = len(id); i < n; ++i) out[i] = av[i] + c;
  return {id};
}

Var Tape::clamp_min(Var a, double c) {
  check(a);
  const Node& na = nodes_[static_cast<size_t>(a.id)];
  const int id = push(Op::kClampMin, na.rows, na.cols, a.id, -1, c);
  const double* av = val_ptr(a.id);
  double* out = val_ptr(id);
  for (int i = 0, n = len(id); i < n; ++i) out[i] = av[i] > c ? av[i] : c;
  return {id};
}

Var Tape::concat(Var a, Var b) {
  check(a);
  check(b);
  const Node& na = nodes_[static_cast<size_t>(a.id)];
  const Node& nb = nodes_[static_cast<size_t>(b.id)];
  if (na.cols != 1 || nb.cols != 1) throw ConfigFault("concat expects vectors");
  const int ra = na.rows, rb = nb.rows;  // push may reallocate nodes_, invalidating na/nb
  const int id = push(Op::kConcat, ra + rb, 1, a.id, b.id, 0.0);
  const double* av = val_ptr(a.id);
  const double* bv = val_ptr(b.id);
  double* out = val_ptr(id);
  for (int i = 0; i < ra; ++i) out[i] = av[i];
  for (int i = 0; i < rb; ++i) out[ra + i] = bv[i];
  return {id};
}

Var Tape::slice(Var a, int offset, int length) {
  check(a);
  const Node& na = nodes_[static_cast<size_t>(a.id)];
  if (na.cols != 1) throw ConfigFault("slice expects a vector");
  if (offset < 0 || length <= 0 || offset + length > na.rows)
    throw ConfigFault("slice out of range");
  const int id = push(Op::kSlice, length, 1, a.id, -1, static_cast<double>(offset));
  const double* av = val_ptr(a.id);
  double* out = val_ptr(id);
  for (int i = 0; i < length; ++i) out[i] = av[offset + i];
  return {id};
}

Var Tape::sum(Var a) {
  check(a);
  const int id = push(Op::kSum, 1, 1, a.id, -1, 0.0);
  const double* av = val_ptr(a.id);
  double acc = 0.0;
  for (int i = 0, n = len(a.id); i < n; ++i) acc += av[i];
  val_ptr(id)[0] = acc;
  return {id};
}

Var Tape::mean(Var a) {
  check(a);
  const int id = push(Op::kMean, 1, 1, a.id, -1, 0.0);
  const double* av = val_ptr(a.id);
  const int n = len(a.id);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += av[i];
  val_ptr(id)[0] = acc / n;
  return {id};
}

void Tape::backward(Var loss) {
  check(loss);
  if (backward_done_) throw UsageFault("backward called twice without reset");
  const Node& nl = nodes_[static_cast<size_t>(loss.id)];
  if (nl.rows != 1 || nl.cols != 1) throw UsageFault("backward expects a scalar loss");
  backward_done_ = true;
  grd_ptr(loss.id)[0] = 1.0;

  for (int id = loss.id; id >= 0; --id) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    const double* go = grd_ptr(id);
    const double* out = val_ptr(id);
    const int nn = n.rows * n.cols;
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kMatVec: {
        const Node& nw = nodes_[static_cast<size_t>(n.a)];
        double* gw = grd_ptr(n.a);
        double* gx = grd_ptr(n.b);
        const double* wv = val_ptr(n.a);
        const double* xv = val_ptr(n.b);
        const int r = nw.rows, c = nw.cols;
        for (int i = 0; i < r; ++i) {
          const double g = go[i];
          if (g == 0.0) continue;
          const double* wrow = wv + static_cast<std::size_t>(i) * c;
          double* gwrow = gw + static_cast<std::size_t>(i) * c;
          for (int j = 0; j < c; ++j) {
            gwrow[j] += g * xv[j];
            gx[j] += wrow[j] * g;
          }
        }
        break;
      }
      case Op::kAdd: {
        double* ga = grd_ptr(n.a);
        double* gb = grd_ptr(n.b);
        for (int i = 0; i < nn; ++i) { ga[i] += go[i]; gb[i] += go[i]; }
        break;
      }
      case Op::kSub: {
        double* ga = grd_ptr(n.a);
        double* gb = grd_ptr(n.b);
        for (int i = 0; i < nn; ++i) { ga[i] += go[i]; gb[i] -= go[i]; }
        break;
      }
      case Op::kAxpy: {
        double* ga = grd_ptr(n.a);
        double* gb = grd_ptr(n.b);
        for (int i = 0; i < nn; ++i) { ga[i] += go[i]; gb[i] += n.c * go[i]; }
        break;
      }
      case Op::kHadamard: {
        double* ga = grd_ptr(n.a);
        double* gb = grd_ptr(n.b);
        const double* av = val_ptr(n.a);
        const double* bv = val_ptr(n.b);
        for (int i = 0; i < nn; ++i) { ga[i] += go[i] * bv[i]; gb[i] += go[i] * av[i]; }
        break;
      }
      case Op::kDiv: {
        double* ga = grd_ptr(n.a);
        double* gb = grd_ptr(n.b);
        const double* bv = val_ptr(n.b);
        for (int i = 0; i < nn; ++i) {
          ga[i] += go[i] / bv[i];
          gb[i] -= go[i] * out[i] / bv[i];
        }
        break;
      }
      case Op::kSigmoid: {
        double* ga = grd_ptr(n.a);
        for (int i = 0; i < nn; ++i) ga[i] += go[i] * out[i] * (1.0 - out[i]);
        break;
      }
      case Op::kTanh: {
        double* ga = grd_ptr(n.a);
        for (int i = 0; i < nn; ++i) ga[i] += go[i] * (1.0 - out[i] * out[i]);
        break;
      }
      case Op::kExp: {
        double* ga = grd_ptr(n.a);
        for (int i = 0; i < nn; ++i) ga[i] += go[i] * out[i];
        break;
      }
      case Op::kLog: {
        double* ga = grd_ptr(n.a);
        const double* av = val_ptr(n.a);
        for (int i = 0; i < nn; ++i) ga[i] += go[i] / av[i];
        break;
      }
      case Op::kSquare: {
        double* ga = grd_ptr(n.a);
        const double* av = val_ptr(n.a);
        for (int i = 0; i < nn; ++i) ga[i] += go[i] * 2.0 * av[i];
        break;
      }
      case Op::kScale: {
        double* ga = grd_ptr(n.a);
        for (int i = 0; i < nn; ++i) ga[i] += n.c * go[i];
        break;
      }
      case Op::kAddScalar: {
        double* ga = grd_ptr(n.a);
        for (int i = 0; i < nn; ++i) ga[i] += go[i];
        break;
      }
      case Op::kClampMin: {
        double* ga = grd_ptr(n.a);
        const double* av = val_ptr(n.a);
        for (int i = 0; i < nn; ++i) ga[i] += av[i] > n.c ? go[i] : 0.0;
        break;
      }
      case Op::kOneMinus: {
        double* ga = grd_ptr(n.a);
        for (int i = 0; i < nn; ++i) ga[i] -= go[i];
        break;
      }
      case Op::kConcat: {
        double* ga = grd_ptr(n.a);
        double* gb = grd_ptr(n.b);
        const int la = len(n.a);
        for (int i = 0; i < la; ++i) ga[i] += go[i];
        for (int i = 0; i < nn - la; ++i) gb[i] += go[la + i];
        break;
      }
      case Op::kSlice: {
        double* ga = grd_ptr(n.a);
        const int off = static_cast<int>(n.c);
        for (int i = 0; i < nn; ++i) ga[off + i] += go[i];
        break;
      }
      case Op::kSum: {
        double* ga = grd_ptr(n.a);
        const double g = go[0];
        for (int i = 0, la = len(n.a); i < la; ++i) ga[i] += g;
        break;
      }
      case Op::kMean: {
        double* ga = grd_ptr(n.a);
        const int la = len(n.a);
        const double g = go[0] / la;
        for (int i = 0; i < la; ++i) ga[i] += g;
        break;
      }
    }
  }
}

std::span<const double> Tape::value(Var v) const {
  check(v);
  return {val_ptr(v.id), static_cast<std::size_t>(len(v.id))};
}

std::span<const double> Tape::grad(Var v) const {
  check(v);
  if (!backward_done_) throw UsageFault("grad read before backward");
  return {grd_ptr(v.id), static_cast<std::size_t>(len(v.id))};
}

int Tape::rows(Var v) const {
  check(v);
  return nodes_[static_cast<size_t>(v.id)].rows;
}

int Tape::cols(Var v) const {
  check(v);
  return nodes_[static_cast<size_t>(v.id)].cols;
}

bool Tape::finite(Var v) const {
  check(v);
  const double* p = val_ptr(v.id);
  for (int i = 0, n = len(v.id); i < n; ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

void Tape::reset() {
  nodes_.clear();
  arena_.clear();
  backward_done_ = false;
}

}  // namespace tsode::diffkit
