#include "marconflow/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "marconflow/errors.hpp"
#include "marconflow/parameters.hpp"

namespace marconflow {

const Tensor& Var::value() const {
  if (!valid()) throw ContractError("use of an unbound Var");
  return tape->value(*this);
}

Var Tape::constant(Tensor value) { return record("constant", std::move(value), {}, nullptr); }

Var Tape::variable(Tensor value) {
  Var v = record("variable", std::move(value), {}, nullptr);
  nodes_.back().requires_grad = true;
  return v;
}

Var Tape::param(const std::string& name) {
  if (auto it = bound_params_.find(name); it != bound_params_.end()) return Var{this, it->second};
  if (params_ == nullptr) throw ContractError("tape has no parameter store (requested '" + name + "')");
  Var v = record("param:" + name, params_->at(name), {}, nullptr);
  nodes_.back().requires_grad = track_grad_;
  bound_params_.emplace(name, v.id);
  return v;
}

Var Tape::record(std::string_view op, Tensor value, std::vector<int> inputs, BackwardFn backward) {
  if (backward_done_) throw ContractError("tape already consumed by backward()");
  if (!value.all_finite()) {
    throw NumericalError("non-finite value produced by op '" + std::string(op) + "'");
  }
  Node node;
  node.op = std::string(op);
  node.value = std::move(value);
  for (int in : inputs) node.requires_grad = node.requires_grad || nodes_[static_cast<std::size_t>(in)].requires_grad;
  node.inputs = std::move(inputs);
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad_buffer(int id) {
  auto& node = nodes_[static_cast<std::size_t>(id)];
  if (!node.has_grad) {
    node.grad = Tensor(node.value.shape(), 0.0);
    node.has_grad = true;
  }
  return node.grad;
}

const Tensor& Tape::grad(Var v) { return grad_buffer(v.id); }

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("loss does not belong to this tape");
  if (value(loss).size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_string(value(loss).shape()));
  }
  if (backward_done_) throw ContractError("backward() called twice on one tape");
  backward_done_ = true;
  grad_buffer(loss.id)[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.has_grad || !node.backward) continue;
    node.backward(*this, node.grad);
  }
}

std::map<std::string, Tensor> Tape::parameter_gradients() const {
  std::map<std::string, Tensor> out;
  if (params_ == nullptr) return out;
  for (const auto& [name, value] : params_->all()) {
    auto it = bound_params_.find(name);
    if (it != bound_params_.end() && nodes_[static_cast<std::size_t>(it->second)].has_grad) {
      out.emplace(name, nodes_[static_cast<std::size_t>(it->second)].grad);
    } else {
      out.emplace(name, Tensor(value.shape(), 0.0));
    }
  }
  return out;
}

namespace {

void check_same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw ContractError("operands live on different tapes");
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Broadcasting for binary ops: returns the output shape; the smaller operand
// is indexed modulo its size.
Shape broadcast_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() == b.shape()) return a.shape();
  if (is_suffix(b.shape(), a.shape()) || b.size() == 1) return a.shape();
  if (a.size() == 1) return b.shape();
  throw ContractError("shape mismatch in " + std::string(op) + ": " + shape_string(a.shape()) + " vs " +
                      shape_string(b.shape()));
}

template <class F, class DA, class DB>
Var binary(std::string_view op, Var a, Var b, F f, DA dfa, DB dfb) {
  check_same_tape(a, b);
  Tape& tape = *a.tape;
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(broadcast_shape(x, y, op));
  const std::size_t n = out.size();
  const std::size_t nx = x.size();
  const std::size_t ny = y.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(x[i % nx], y[i % ny]);
  const int ia = a.id;
  const int ib = b.id;
  return tape.record(op, std::move(out), {ia, ib}, [ia, ib, dfa, dfb](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(ia);
    const Tensor& yv = t.value(ib);
    const std::size_t nxv = xv.size();
    const std::size_t nyv = yv.size();
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i % nxv] += g[i] * dfa(xv[i % nxv], yv[i % nyv]);
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % nyv] += g[i] * dfb(xv[i % nxv], yv[i % nyv]);
    }
  });
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var div(Var a, Var b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Var scale(Var a, double factor) { return mul(a, a.tape->constant(Tensor::scalar(factor))); }

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.rows()) {
    throw ContractError("shape mismatch in matmul: " + shape_string(x.shape()) + " x " + shape_string(y.shape()));
  }
  const std::size_t n = x.rows(), k = x.cols(), m = y.cols();
  Tensor out(Shape{n, m}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += xv * y[p * m + j];
    }
  }
  const int ia = a.id, ib = b.id;
  return a.tape->record("matmul", std::move(out), {ia, ib}, [ia, ib, n, k, m](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(ia);
    const Tensor& yv = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);  // g * y^T
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * yv[p * m + j];
          ga[i * k + p] += s;
        }
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);  // x^T * g
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double xip = xv[i * k + p];
          for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += xip * g[i * m + j];
        }
    }
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const int ia = a.id;
  return a.tape->record("sum", Tensor::scalar(s), {ia}, [ia](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(ia);
    for (auto& v : ga.values()) v += g[0];
  });
}

Var mean(Var a) {
  const auto n = static_cast<double>(a.value().size());
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const int ia = a.id;
  return a.tape->record("mean", Tensor::scalar(s / n), {ia}, [ia, n](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(ia);
    for (auto& v : ga.values()) v += g[0] / n;
  });
}

namespace {

double stable_softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Unary ops share one recording helper that stores the output alongside.
template <class F, class D>
Var elementwise(std::string_view op, Var a, F f, D df) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  const int ia = a.id;
  Tape* tape = a.tape;
  // Output id equals the id this record call will assign.
  const int iy = static_cast<int>(tape->size());
  return tape->record(op, std::move(out), {ia}, [ia, iy, df](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(ia);
    const Tensor& yv = t.value(iy);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(xv[i], yv[i]);
  });
}

}  // namespace

Var exp(Var a) {
  return elementwise(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  for (double v : a.value().data()) {
    if (v < 0.0) throw DomainError("log of negative value " + std::to_string(v));
  }
  return elementwise(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sqrt(Var a) {
  for (double v : a.value().data()) {
    if (v < 0.0) throw DomainError("sqrt of negative value " + std::to_string(v));
  }
  return elementwise(
      "sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Var sin(Var a) {
  return elementwise(
      "sin", a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Var sigmoid(Var a) {
  return elementwise("sigmoid", a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var softplus(Var a) {
  return elementwise("softplus", a, stable_softplus, [](double x, double) { return stable_sigmoid(x); });
}

Var tanh(Var a) {
  return elementwise(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var softmax_masked(Var a, const std::vector<std::uint8_t>& mask) {
  const Tensor& x = a.value();
  const std::size_t cols = x.rank() == 0 ? 1 : x.shape().back();
  const std::size_t rows = cols == 0 ? 0 : x.size() / cols;
  // a mask of one row is shared by every row
  const bool shared = mask.size() == cols && rows != 1;
  if (mask.size() != x.size() && !shared) {
    throw ContractError("softmax_masked: mask has " + std::to_string(mask.size()) + " entries for shape " +
                        shape_string(x.shape()));
  }
  Tensor out(x.shape(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint8_t* mrow = mask.data() + (shared ? 0 : r * cols);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      if (mrow[c]) mx = std::max(mx, x[r * cols + c]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw ContractError("softmax_masked: row " + std::to_string(r) + " is fully masked");
    }
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!mrow[c]) continue;
      out[r * cols + c] = std::exp(x[r * cols + c] - mx);
      z += out[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= z;
  }
  const int ia = a.id;
  const int iy = static_cast<int>(a.tape->size());
  return a.tape->record("softmax_masked", std::move(out), {ia}, [ia, iy, rows, cols](Tape& t, const Tensor& g) {
    const Tensor& y = t.value(iy);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
    }
  });
}

Var logsumexp(Var a) {
  const Tensor& x = a.value();
  if (x.size() == 0) throw ContractError("logsumexp of empty tensor");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : x.data()) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : x.data()) s += std::exp(v - mx);
  const double result = mx + std::log(s);
  const int ia = a.id;
  return a.tape->record("logsumexp", Tensor::scalar(result), {ia}, [ia, result](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(ia);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < xv.size(); ++i) ga[i] += g[0] * std::exp(xv[i] - result);
  });
}

Var gather(Var a, std::size_t axis, const std::vector<std::size_t>& indices) {
  const Tensor& x = a.value();
  const int ia = a.id;
  if (x.rank() == 1 && axis == 0) {
    Tensor out(Shape{indices.size()});
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= x.size()) throw ContractError("gather index out of range");
      out[i] = x[indices[i]];
    }
    return a.tape->record("gather", std::move(out), {ia}, [ia, indices](Tape& t, const Tensor& g) {
      Tensor& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < indices.size(); ++i) ga[indices[i]] += g[i];
    });
  }
  if (x.rank() != 2 || axis > 1) {
    throw ContractError("gather on shape " + shape_string(x.shape()) + " along axis " + std::to_string(axis));
  }
  const std::size_t r = x.rows(), c = x.cols();
  const std::size_t limit = axis == 0 ? r : c;
  for (auto i : indices)
    if (i >= limit) throw ContractError("gather index out of range");
  if (axis == 0) {
    Tensor out(Shape{indices.size(), c});
    for (std::size_t i = 0; i < indices.size(); ++i)
      std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(indices[i] * c), c,
                  out.data().begin() + static_cast<std::ptrdiff_t>(i * c));
    return a.tape->record("gather", std::move(out), {ia}, [ia, indices, c](Tape& t, const Tensor& g) {
      Tensor& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < indices.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) ga[indices[i] * c + j] += g[i * c + j];
    });
  }
  const std::size_t m = indices.size();
  Tensor out(Shape{r, m});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = x[i * c + indices[j]];
  return a.tape->record("gather", std::move(out), {ia}, [ia, indices, r, c, m](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < m; ++j) ga[i * c + indices[j]] += g[i * m + j];
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  Tape* tape = parts.front().tape;
  const std::size_t rank = parts.front().value().rank();
  if (rank < 1 || rank > 2 || axis >= rank) throw ContractError("concat supports rank 1 or 2 along a valid axis");
  std::vector<int> ids;
  for (const auto& p : parts) {
    if (p.tape != tape) throw ContractError("concat operands live on different tapes");
    if (p.value().rank() != rank) throw ContractError("concat rank mismatch");
    ids.push_back(p.id);
  }
  if (rank == 1) {
    std::vector<double> data;
    std::vector<std::size_t> sizes;
    for (const auto& p : parts) {
      data.insert(data.end(), p.value().data().begin(), p.value().data().end());
      sizes.push_back(p.value().size());
    }
    return tape->record("concat", Tensor::vector(std::move(data)), ids, [ids, sizes](Tape& t, const Tensor& g) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < ids.size(); ++k) {
        if (t.requires_grad(ids[k])) {
          Tensor& gk = t.grad_buffer(ids[k]);
          for (std::size_t i = 0; i < sizes[k]; ++i) gk[i] += g[off + i];
        }
        off += sizes[k];
      }
    });
  }
  if (axis == 0) {
    const std::size_t c = parts.front().value().cols();
    std::vector<double> data;
    std::size_t rows = 0;
    for (const auto& p : parts) {
      if (p.value().cols() != c) throw ContractError("concat along rows needs equal column counts");
      data.insert(data.end(), p.value().data().begin(), p.value().data().end());
      rows += p.value().rows();
    }
    std::vector<std::size_t> sizes;
    for (const auto& p : parts) sizes.push_back(p.value().size());
    return tape->record("concat", Tensor::matrix(rows, c, std::move(data)), ids,
                        [ids, sizes](Tape& t, const Tensor& g) {
                          std::size_t off = 0;
                          for (std::size_t k = 0; k < ids.size(); ++k) {
                            if (t.requires_grad(ids[k])) {
                              Tensor& gk = t.grad_buffer(ids[k]);
                              for (std::size_t i = 0; i < sizes[k]; ++i) gk[i] += g[off + i];
                            }
                            off += sizes[k];
                          }
                        });
  }
  const std::size_t r = parts.front().value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().rows() != r) throw ContractError("concat along columns needs equal row counts");
    widths.push_back(p.value().cols());
    total += p.value().cols();
  }
  Tensor out(Shape{r, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + off + j] = v[i * widths[k] + j];
    off += widths[k];
  }
  return tape->record("concat", std::move(out), ids, [ids, widths, r, total](Tape& t, const Tensor& g) {
    std::size_t o = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        Tensor& gk = t.grad_buffer(ids[k]);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) gk[i * widths[k] + j] += g[i * total + o + j];
      }
      o += widths[k];
    }
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const int ia = a.id;
  return a.tape->record("reshape", std::move(out), {ia}, [ia](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var transpose(Var a) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw ContractError("transpose needs a matrix, got " + shape_string(x.shape()));
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  const int ia = a.id;
  return a.tape->record("transpose", std::move(out), {ia}, [ia, r, c](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

}  // namespace marconflow
