#pragma once
#include <cstdint>
#include <span>
#include <vector>

#include "tsode/diffkit/tensor.hpp"

namespace tsode::diffkit {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Node values and adjoints live in one arena that is
// recycled across forward passes, so a training loop does no per-op
// allocation once the arena has reached its working size.
class Tape {
 public:
  Var leaf(const Tensor& t);
  Var leaf_scalar(double x);

  Var matvec(Var w, Var x);          // (r x c) * (c) -> (r)
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var axpy(Var a, Var b, double c);  // a + c*b, elementwise
  Var hadamard(Var a, Var b);
  Var div(Var a, Var b);
  Var sigmoid(Var a);
  Var tanh(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var square(Var a);
  Var scale(Var a, double c);
  Var add_scalar(Var a, double c);
  Var clamp_min(Var a, double c);
  Var one_minus(Var a);
  Var concat(Var a, Var b);
  Var slice(Var a, int offset, int len);
  Var sum(Var a);   // scalar
  Var mean(Var a);  // scalar

  // Seeds d(loss)/d(loss) = 1 and accumulates adjoints for every node.
  // loss must be scalar. Calling twice without a reset is a usage fault.
  void backward(Var loss);

  std::span<const double> value(Var v) const;
  std::span<const double> grad(Var v) const;
  double value_scalar(Var v) const { return value(v)[0]; }
  int rows(Var v) const;
  int cols(Var v) const;

  // True when every entry of v is finite.
  bool finite(Var v) const;

  // Drops all nodes but keeps arena capacity.
  void reset();

  std::size_t node_count() const { return nodes_.size(); }

 private:
  enum class Op : std::uint8_t {
    kLeaf, kMatVec, kAdd, kSub, kAxpy, kHadamard, kDiv, kSigmoid, kTanh,
    kExp, kLog, kSquare, kScale, kAddScalar, kClampMin, kOneMinus, kConcat,
    kSlice, kSum, kMean,
  };

  struct Node {
    Op op;
    int a = -1;
    int b = -1;
    int rows = 0;
    int cols = 0;
    std::size_t val = 0;   // arena offset
    std::size_t grd = 0;   // arena offset
    double c = 0.0;        // op constant (scale factor, clamp bound, slice offset)
  };

  int push(Op op, int rows, int cols, int a, int b, double c);
  double* val_ptr(int id) { return arena_.data() + nodes_[static_cast<size_t>(id)].val; }
  const double* val_ptr(int id) const { return arena_.data() + nodes_[static_cast<size_t>(id)].val; }
  double* grd_ptr(int id) { return arena_.data() + nodes_[static_cast<size_t>(id)].grd; }
  const double* grd_ptr(int id) const { return arena_.data() + nodes_[static_cast<size_t>(id)].grd; }
  int len(int id) const { const auto& n = nodes_[static_cast<size_t>(id)]; return n.rows * n.cols; }
  void check(Var v) const;
  Var unary(Op op, Var a);
  Var binary(Op op, Var a, Var b, double c = 0.0);

  std::vector<Node> nodes_;
  std::vector<double> arena_;
  bool backward_done_ = false;
};

}  // namespace tsode::diffkit
