#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "marconflow/tensor.hpp"

namespace marconflow {

class Tape;
class ParameterStore;

/// Handle to a node on a Tape. Cheap to copy; valid as long as the tape lives.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

/// Define-by-run reverse-mode tape. One tape per forward pass; single-threaded.
///
/// Every recorded value is checked for finiteness; a NaN or Inf raises
/// NumericalError naming the producing operation.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  /// With track_grad false, parameters bind as constants and no backward
  /// closures are kept (evaluation only).
  explicit Tape(const ParameterStore* params = nullptr, bool track_grad = true)
      : params_(params), track_grad_(track_grad) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  Var param(const std::string& name);

  const Tensor& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Tensor& grad(Var v);

  void backward(Var loss);
  std::map<std::string, Tensor> parameter_gradients() const;
  std::size_t size() const { return nodes_.size(); }
  const ParameterStore* parameters() const { return params_; }

  // Op implementation interface.
  Var record(std::string_view op, Tensor value, std::vector<int> inputs, BackwardFn backward);
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  Tensor& grad_buffer(int id);

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<int> inputs;
    BackwardFn backward;
  };

  const ParameterStore* params_;
  bool track_grad_;
  std::vector<Node> nodes_;
  std::map<std::string, int> bound_params_;
  bool backward_done_ = false;
};

// Elementwise binary ops. The second operand may be broadcast when its shape
// is a suffix of the first operand's shape (scalar, row vector, ...), or the
// first operand may be a scalar.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double factor);

Var matmul(Var a, Var b);
Var sum(Var a);
Var mean(Var a);

Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var sin(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var tanh(Var a);

/// Row-wise softmax over the last axis. The mask covers every entry or one
/// row shared by all rows. Masked entries get exactly zero
/// weight; a row with no unmasked entry is a contract violation.
Var softmax_masked(Var a, const std::vector<std::uint8_t>& mask);
/// log(sum(exp(a))) over all elements.
Var logsumexp(Var a);

/// Select entries (rank 1) or rows/columns (rank 2, axis 0/1).
Var gather(Var a, std::size_t axis, const std::vector<std::size_t>& indices);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var reshape(Var a, Shape shape);
Var transpose(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }

}  // namespace marconflow
