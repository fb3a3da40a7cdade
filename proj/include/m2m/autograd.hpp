#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "m2m/errors.hpp"
#include "m2m/tensor.hpp"

namespace m2m {

class Tape;
class Var;
class Adjoints;
Adjoints backward(const Var& loss);

// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& dims() const { return value().dims(); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode gradient tape. Nodes are appended in evaluation order, so a
// reverse sweep over node ids visits every consumer before its inputs.
// Confined to one thread at a time.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), nullptr, false, {}); }

  // Registers a trainable leaf. A name already on the tape returns the existing node.
  Var parameter(const std::string& name, Tensor value) {
    if (auto it = params_.find(name); it != params_.end()) return Var(this, it->second);
    Var v = push(std::move(value), nullptr, true, name);
    params_.emplace(name, v.id());
    return v;
  }

  bool has_parameter(const std::string& name) const { return params_.count(name) != 0; }
  const std::map<std::string, std::size_t>& parameters() const { return params_; }

  // Records an op output. The backward fn is kept only when an input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
  }

  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
    bool needs = false;
    for (const Var& in : inputs) {
      if (in.tape() != this) throw ContractError("op mixes vars from different tapes");
      needs = needs || nodes_[in.id()].requires_grad;
    }
    if (!value.all_finite()) throw ContractError("op produced a non-finite value");
    return push(std::move(value), needs ? std::move(backward) : nullptr, needs, {});
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  void accumulate(std::size_t id, const Tensor& g) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  // Mutable gradient buffer for scatter-style backward passes.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = Tensor::zeros(n.value.dims());
      n.has_grad = true;
    }
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  friend Adjoints backward(const Var& loss);

  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
    std::string param;
  };

  Var push(Tensor value, BackwardFn fn, bool needs_grad, std::string param) {
    nodes_.push_back(Node{std::move(value), Tensor(), false, needs_grad, std::move(fn),
                          std::move(param)});
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  std::map<std::string, std::size_t> params_;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw ContractError("value() on an unbound Var");
  return tape_->value(id_);
}

// d(loss)/d(param) for every parameter registered on the tape.
class Adjoints {
 public:
  const Tensor& at(const std::string& name) const {
    auto it = grads_.find(name);
    if (it == grads_.end()) throw MissingAdjointError("parameter '" + name + "' is not on the tape");
    return it->second;
  }
  bool contains(const std::string& name) const { return grads_.count(name) != 0; }
  const std::map<std::string, Tensor>& all() const { return grads_; }
  std::map<std::string, Tensor>& all() { return grads_; }

 private:
  friend Adjoints backward(const Var& loss);
  std::map<std::string, Tensor> grads_;
};

inline Adjoints backward(const Var& loss) {
  if (!loss.valid()) throw ContractError("backward on an unbound Var");
  if (!loss.value().is_scalar())
    throw ContractError("backward requires a scalar loss, got " + shape_str(loss.dims()));
  Tape& tape = *loss.tape();
  tape.accumulate(loss.id(), Tensor::filled(loss.dims(), 1.0));
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Tape::Node& n = tape.nodes_[id];
    if (n.has_grad && n.backward) {
      // Copy: the backward fn may grow other nodes' grads but never this one.
      const Tensor g = n.grad;
      n.backward(tape, g);
    }
  }
  Adjoints out;
  for (const auto& [name, id] : tape.params_) {
    const Tape::Node& n = tape.nodes_[id];
    out.grads_.emplace(name, n.has_grad ? n.grad : Tensor::zeros(n.value.dims()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable ops. All inputs must live on the same tape.

namespace detail {
inline Tape& tape_of(const Var& v) {
  if (!v.valid()) throw ContractError("op on an unbound Var");
  return *v.tape();
}
inline void same_dims(const Var& a, const Var& b, const char* op) {
  if (a.dims() != b.dims())
    throw ShapeError(std::string(op) + ": " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
}
inline std::size_t rows(const Tensor& t) { return t.rank() == 1 ? 1 : t.size() / t.dims().back(); }
}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(kernels::matmul(a.value(), b.value()), {a, b},
                  [ia, ib](Tape& tp, const Tensor& g) {
                    if (tp.requires_grad(ia)) tp.accumulate(ia, kernels::matmul_nt(g, tp.value(ib)));
                    if (tp.requires_grad(ib)) tp.accumulate(ib, kernels::matmul_tn(tp.value(ia), g));
                  });
}

// a (n,k) · b(m,k)^T
inline Var matmul_nt(const Var& a, const Var& b) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(kernels::matmul_nt(a.value(), b.value()), {a, b},
                  [ia, ib](Tape& tp, const Tensor& g) {
                    if (tp.requires_grad(ia)) tp.accumulate(ia, kernels::matmul(g, tp.value(ib)));
                    if (tp.requires_grad(ib)) tp.accumulate(ib, kernels::matmul_tn(g, tp.value(ia)));
                  });
}

inline Var transpose(const Var& a) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  return t.record(kernels::transpose(a.value()), {a}, [ia](Tape& tp, const Tensor& g) {
    tp.accumulate(ia, kernels::transpose(g));
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::same_dims(a, b, "add");
  Tape& t = detail::tape_of(a);
  Tensor out = a.value();
  out += b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, const Tensor& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_dims(a, b, "sub");
  Tape& t = detail::tape_of(a);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, const Tensor& g) {
    tp.accumulate(ia, g);
    Tensor ng = g;
    ng *= -1.0;
    tp.accumulate(ib, ng);
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::same_dims(a, b, "mul");
  Tape& t = detail::tape_of(a);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(ia);
    const Tensor& bv = tp.value(ib);
    if (tp.requires_grad(ia)) {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= bv[i];
      tp.accumulate(ia, ga);
    }
    if (tp.requires_grad(ib)) {
      Tensor gb = g;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= av[i];
      tp.accumulate(ib, gb);
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tape& t = detail::tape_of(a);
  Tensor out = a.value();
  out *= s;
  const std::size_t ia = a.id();
  return t.record(std::move(out), {a}, [ia, s](Tape& tp, const Tensor& g) {
    Tensor ga = g;
    ga *= s;
    tp.accumulate(ia, ga);
  });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

// a (n,c) + v broadcast over rows; v has c elements.
inline Var add_rowvec(const Var& a, const Var& v) {
  Tape& t = detail::tape_of(a);
  const std::size_t c = a.dims().back();
  if (v.value().size() != c)
    throw ShapeError("add_rowvec: row width " + std::to_string(c) + " vs vector " +
                     shape_str(v.dims()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += v.value()[i % c];
  const std::size_t ia = a.id(), iv = v.id();
  return t.record(std::move(out), {a, v}, [ia, iv, c](Tape& tp, const Tensor& g) {
    tp.accumulate(ia, g);
    if (tp.requires_grad(iv)) {
      Tensor gv(tp.value(iv).dims());
      for (std::size_t i = 0; i < g.size(); ++i) gv[i % c] += g[i];
      tp.accumulate(iv, gv);
    }
  });
}

// a (n,c) ⊙ v broadcast over rows.
inline Var mul_rowvec(const Var& a, const Var& v) {
  Tape& t = detail::tape_of(a);
  const std::size_t c = a.dims().back();
  if (v.value().size() != c)
    throw ShapeError("mul_rowvec: row width " + std::to_string(c) + " vs vector " +
                     shape_str(v.dims()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= v.value()[i % c];
  const std::size_t ia = a.id(), iv = v.id();
  return t.record(std::move(out), {a, v}, [ia, iv, c](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(ia);
    const Tensor& vv = tp.value(iv);
    if (tp.requires_grad(ia)) {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= vv[i % c];
      tp.accumulate(ia, ga);
    }
    if (tp.requires_grad(iv)) {
      Tensor gv(vv.dims());
      for (std::size_t i = 0; i < g.size(); ++i) gv[i % c] += g[i] * av[i];
      tp.accumulate(iv, gv);
    }
  });
}

inline Var softmax_rows(const Var& a) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  Tensor out = kernels::softmax_rows(a.value());
  const std::size_t out_id = t.size();
  return t.record(std::move(out), {a}, [ia, out_id](Tape& tp, const Tensor& g) {
    const Tensor& y = tp.value(out_id);
    Tensor ga(y.dims());
    const std::size_t cols = y.dim(1);
    for (std::size_t r = 0; r < y.dim(0); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g.at(r, c) * y.at(r, c);
      for (std::size_t c = 0; c < cols; ++c) ga.at(r, c) = y.at(r, c) * (g.at(r, c) - dot);
    }
    tp.accumulate(ia, ga);
  });
}

inline Var gelu(const Var& a) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  return t.record(kernels::gelu(a.value()), {a}, [ia](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(ia);
    Tensor ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= kernels::gelu_grad(x[i]);
    tp.accumulate(ia, ga);
  });
}

// Per-row layer normalization over the last axis with affine gamma/beta.
inline Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  const std::size_t c = x.dims().back();
  const std::size_t n = detail::rows(x);
  if (gamma.value().size() != c || beta.value().size() != c)
    throw ShapeError("layer_norm_rows: affine params must have " + std::to_string(c) + " entries");
  Tensor xhat(x.dims());
  std::vector<double> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    double mean = 0.0;
    for (std::size_t k = 0; k < c; ++k) mean += x[r * c + k];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t k = 0; k < c; ++k) var += (x[r * c + k] - mean) * (x[r * c + k] - mean);
    var /= static_cast<double>(c);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t k = 0; k < c; ++k) xhat[r * c + k] = (x[r * c + k] - mean) * inv_std[r];
  }
  Tensor out(x.dims());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = xhat[i] * gamma.value()[i % c] + beta.value()[i % c];
  const std::size_t ia = a.id(), ig = gamma.id(), ib = beta.id();
  return t.record(std::move(out), {a, gamma, beta},
                  [ia, ig, ib, c, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Tape& tp, const Tensor& g) {
                    const Tensor& gm = tp.value(ig);
                    if (tp.requires_grad(ig) || tp.requires_grad(ib)) {
                      Tensor gg(gm.dims()), gb(gm.dims());
                      for (std::size_t i = 0; i < g.size(); ++i) {
                        gg[i % c] += g[i] * xhat[i];
                        gb[i % c] += g[i];
                      }
                      tp.accumulate(ig, gg);
                      tp.accumulate(ib, gb);
                    }
                    if (!tp.requires_grad(ia)) return;
                    Tensor ga(tp.value(ia).dims());
                    const double inv_c = 1.0 / static_cast<double>(c);
                    for (std::size_t r = 0; r < n; ++r) {
                      double s1 = 0.0, s2 = 0.0;
                      for (std::size_t k = 0; k < c; ++k) {
                        const double dy = g[r * c + k] * gm[k];
                        s1 += dy;
                        s2 += dy * xhat[r * c + k];
                      }
                      for (std::size_t k = 0; k < c; ++k) {
                        const double dy = g[r * c + k] * gm[k];
                        ga[r * c + k] =
                            inv_std[r] * (dy - inv_c * s1 - xhat[r * c + k] * inv_c * s2);
                      }
                    }
                    tp.accumulate(ia, ga);
                  });
}

// Flat gather: out.flat[j] = a.flat[index[j]]. Backward scatter-adds.
inline Var gather(const Var& a, std::shared_ptr<const std::vector<std::size_t>> index, Shape dims) {
  Tape& t = detail::tape_of(a);
  if (shape_size(dims) != index->size()) throw ShapeError("gather: index length vs output dims");
  const Tensor& x = a.value();
  Tensor out(std::move(dims));
  for (std::size_t j = 0; j < index->size(); ++j) {
    const std::size_t src = (*index)[j];
    if (src >= x.size()) throw ShapeError("gather: index out of range");
    out[j] = x[src];
  }
  const std::size_t ia = a.id();
  return t.record(std::move(out), {a}, [ia, index](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_buffer(ia);
    for (std::size_t j = 0; j < index->size(); ++j) ga[(*index)[j]] += g[j];
  });
}

inline Var reshape(const Var& a, Shape dims) {
  Tape& t = detail::tape_of(a);
  const std::size_t ia = a.id();
  Shape orig = a.dims();
  return t.record(a.value().reshaped(std::move(dims)), {a},
                  [ia, orig](Tape& tp, const Tensor& g) { tp.accumulate(ia, g.reshaped(orig)); });
}

// Stacks rank-2 blocks sharing a column count.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows of nothing");
  Tape& t = detail::tape_of(parts.front());
  const std::size_t c = parts.front().dims().back();
  std::size_t n = 0;
  std::vector<double> data;
  for (const Var& p : parts) {
    if (p.value().rank() != 2 || p.dims()[1] != c)
      throw ShapeError("concat_rows: part " + shape_str(p.dims()) + " has wrong width");
    n += p.dims()[0];
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return t.record(Tensor({n, c}, std::move(data)), parts, [ids](Tape& tp, const Tensor& g) {
    std::size_t offset = 0;
    for (std::size_t id : ids) {
      const Shape& d = tp.value(id).dims();
      const std::size_t len = d[0] * d[1];
      if (tp.requires_grad(id)) {
        Tensor part(d, std::vector<double>(g.data().begin() + static_cast<std::ptrdiff_t>(offset),
                                           g.data().begin() +
                                               static_cast<std::ptrdiff_t>(offset + len)));
        tp.accumulate(id, part);
      }
      offset += len;
    }
  });
}

// Joins rank-2 blocks sharing a row count side by side.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols of nothing");
  Tape& t = detail::tape_of(parts.front());
  const std::size_t n = parts.front().dims()[0];
  std::size_t c = 0;
  for (const Var& p : parts) {
    if (p.value().rank() != 2 || p.dims()[0] != n)
      throw ShapeError("concat_cols: part " + shape_str(p.dims()) + " has wrong height");
    c += p.dims()[1];
  }
  Tensor out({n, c});
  std::size_t off = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    const std::size_t w = p.dims()[1];
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < w; ++k) out.at(r, off + k) = p.value().at(r, k);
    off += w;
    ids.push_back(p.id());
  }
  return t.record(std::move(out), parts, [ids](Tape& tp, const Tensor& g) {
    std::size_t o = 0;
    const std::size_t rows = g.dim(0);
    for (std::size_t id : ids) {
      const std::size_t w = tp.value(id).dim(1);
      if (tp.requires_grad(id)) {
        Tensor part({rows, w});
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t k = 0; k < w; ++k) part.at(r, k) = g.at(r, o + k);
        tp.accumulate(id, part);
      }
      o += w;
    }
  });
}

inline Var slice_cols(const Var& a, std::size_t start, std::size_t len) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  if (x.rank() != 2 || start + len > x.dim(1)) throw ShapeError("slice_cols out of range");
  const std::size_t n = x.dim(0);
  Tensor out({n, len});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < len; ++k) out.at(r, k) = x.at(r, start + k);
  const std::size_t ia = a.id();
  return t.record(std::move(out), {a}, [ia, start, len](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_buffer(ia);
    for (std::size_t r = 0; r < g.dim(0); ++r)
      for (std::size_t k = 0; k < len; ++k) ga.at(r, start + k) += g.at(r, k);
  });
}

// (n,c) -> (1,c) column means.
inline Var mean_rows(const Var& a) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  if (x.rank() != 2 || x.dim(0) == 0) throw ShapeError("mean_rows expects a non-empty rank-2 tensor");
  const std::size_t n = x.dim(0), c = x.dim(1);
  Tensor out({1, c});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < c; ++k) out[k] += x.at(r, k);
  for (std::size_t k = 0; k < c; ++k) out[k] /= static_cast<double>(n);
  const std::size_t ia = a.id();
  return t.record(std::move(out), {a}, [ia, n, c](Tape& tp, const Tensor& g) {
    Tensor ga({n, c});
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < c; ++k) ga.at(r, k) = g[k] / static_cast<double>(n);
    tp.accumulate(ia, ga);
  });
}

// out[g] = mean of the rows of a listed in groups[g]; (n,c) -> (groups,c).
inline Var mean_row_groups(const Var& a,
                           std::shared_ptr<const std::vector<std::vector<std::size_t>>> groups) {
  Tape& t = detail::tape_of(a);
  const Tensor& x = a.value();
  if (x.rank() != 2) throw ShapeError("mean_row_groups expects a rank-2 tensor");
  const std::size_t c = x.dim(1);
  Tensor out({groups->size(), c});
  for (std::size_t gi = 0; gi < groups->size(); ++gi) {
    const auto& rows = (*groups)[gi];
    if (rows.empty()) throw ShapeError("mean_row_groups: empty group");
    for (std::size_t r : rows) {
      if (r >= x.dim(0)) throw ShapeError("mean_row_groups: row out of range");
      for (std::size_t k = 0; k < c; ++k) out.at(gi, k) += x.at(r, k);
    }
    for (std::size_t k = 0; k < c; ++k) out.at(gi, k) /= static_cast<double>(rows.size());
  }
  const std::size_t ia = a.id();
  return t.record(std::move(out), {a}, [ia, groups, c](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_buffer(ia);
    for (std::size_t gi = 0; gi < groups->size(); ++gi) {
      const auto& rows = (*groups)[gi];
      const double inv = 1.0 / static_cast<double>(rows.size());
      for (std::size_t r : rows)
        for (std::size_t k = 0; k < c; ++k) ga.at(r, k) += g.at(gi, k) * inv;
    }
  });
}

inline Var sum(const Var& a) {
  Tape& t = detail::tape_of(a);
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return t.record(Tensor::scalar(s), {a}, [ia](Tape& tp, const Tensor& g) {
    tp.accumulate(ia, Tensor::filled(tp.value(ia).dims(), g[0]));
  });
}

// Softmax cross-entropy of a logit vector against a class index.
inline Var cross_entropy(const Var& logits, std::size_t label) {
  Tape& t = detail::tape_of(logits);
  const Tensor& z = logits.value();
  if (label >= z.size()) throw ContractError("cross_entropy: label out of range");
  const double mx = *std::max_element(z.data().begin(), z.data().end());
  double s = 0.0;
  for (double v : z.data()) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  const std::size_t il = logits.id();
  return t.record(Tensor::scalar(lse - z[label]), {logits},
                  [il, label, lse](Tape& tp, const Tensor& g) {
                    const Tensor& zz = tp.value(il);
                    Tensor gz(zz.dims());
                    for (std::size_t i = 0; i < zz.size(); ++i)
                      gz[i] = g[0] * (std::exp(zz[i] - lse) - (i == label ? 1.0 : 0.0));
                    tp.accumulate(il, gz);
                  });
}

}  // namespace m2m
