#include "decisive/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "decisive/errors.hpp"

namespace decisive {

const Tensor& Var::value() const { return graph->value(*this); }

Var Graph::leaf(Tensor value) {
  require_finite(value, "leaf");
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  n.op = "leaf";
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::record(const char* op, Tensor value, std::initializer_list<Var> parents,
                  BackwardFn fn) {
  require_finite(value, op);
  Node n;
  n.value = std::move(value);
  n.op = op;
  for (Var p : parents) {
    if (p.graph != this) throw InputError(std::string(op) + ": operand from another graph");
    n.parents.push_back(p.id);
    n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Tensor& Graph::grad_buffer(int id) {
  Node& n = nodes_.at(id);
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) {
    n.grad = Tensor(n.value.shape(), 0.0);
  }
  return n.grad;
}

const Tensor& Graph::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.grad.shape() != n.value.shape()) {
    const_cast<Graph*>(this)->grad_buffer(v.id);
  }
  return n.grad;
}

void Graph::backward(Var root) {
  if (root.graph != this) throw InputError("backward: root from another graph");
  if (nodes_.at(root.id).value.size() != 1) {
    throw InputError("backward: root must be scalar, got shape " +
                     shape_string(nodes_[root.id].value.shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor(n.value.shape(), 0.0);
  nodes_[root.id].grad[0] = 1.0;
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.backward) continue;
    // Copy: the closure may grow other nodes' buffers, never this one.
    const Tensor gout = n.grad;
    n.backward(*this, gout);
  }
}

void Graph::note_kinks(std::span<const double> inputs) {
  if (!track_kinks_) return;
  for (double v : inputs) kinks_.push_back(v > 0.0 ? 1 : (v < 0.0 ? 0 : 2));
}

namespace ops {
namespace {

void require_same_shape(const char* op, Var a, Var b) {
  if (a.value().shape() != b.value().shape()) {
    throw InputError(std::string(op) + ": shape mismatch " +
                     shape_string(a.value().shape()) + " vs " +
                     shape_string(b.value().shape()));
  }
}

void require_rank(const char* op, Var a, std::size_t rank) {
  if (a.value().rank() != rank) {
    throw InputError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got " + shape_string(a.value().shape()));
  }
}

Graph& graph_of(Var a) {
  if (!a.valid()) throw InputError("operation on an invalid Var");
  return *a.graph;
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  int ia = a.id, ib = b.id;
  return graph_of(a).record("add", std::move(out), {a, b}, [ia, ib](Graph& g, const Tensor& go) {
    for (int id : {ia, ib}) {
      if (!g.requires_grad(id)) continue;
      Tensor& gb = g.grad_buffer(id);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  int ia = a.id, ib = b.id;
  return graph_of(a).record("sub", std::move(out), {a, b}, [ia, ib](Graph& g, const Tensor& go) {
    if (g.requires_grad(ia)) {
      Tensor& ga = g.grad_buffer(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (g.requires_grad(ib)) {
      Tensor& gb = g.grad_buffer(ib);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  int ia = a.id, ib = b.id;
  return graph_of(a).record("mul", std::move(out), {a, b}, [ia, ib](Graph& g, const Tensor& go) {
    const Tensor& x = g.value(ia);
    const Tensor& y = g.value(ib);
    if (g.requires_grad(ia)) {
      Tensor& ga = g.grad_buffer(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * y[i];
    }
    if (g.requires_grad(ib)) {
      Tensor& gb = g.grad_buffer(ib);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * x[i];
    }
  });
}

Var div(Var a, Var b) {
  require_same_shape("div", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / y[i];
  int ia = a.id, ib = b.id;
  return graph_of(a).record("div", std::move(out), {a, b}, [ia, ib](Graph& g, const Tensor& go) {
    const Tensor& x = g.value(ia);
    const Tensor& y = g.value(ib);
    if (g.requires_grad(ia)) {
      Tensor& ga = g.grad_buffer(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / y[i];
    }
    if (g.requires_grad(ib)) {
      Tensor& gb = g.grad_buffer(ib);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i] * x[i] / (y[i] * y[i]);
    }
  });
}

Var scale(Var a, double s) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  int ia = a.id;
  return graph_of(a).record("scale", std::move(out), {a}, [ia, s](Graph& g, const Tensor& go) {
    Tensor& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * s;
  });
}

Var add_scalar(Var a, double s) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + s;
  int ia = a.id;
  return graph_of(a).record("add_scalar", std::move(out), {a}, [ia](Graph& g, const Tensor& go) {
    Tensor& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
}

Var square(Var a) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
  int ia = a.id;
  return graph_of(a).record("square", std::move(out), {a}, [ia](Graph& g, const Tensor& go) {
    const Tensor& x = g.value(ia);
    Tensor& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += 2.0 * x[i] * go[i];
  });
}

namespace {

Var clamp_at_zero(const char* name, Var a) {
  const Tensor& x = a.value();
  Graph& g = graph_of(a);
  g.note_kinks(x.data());
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  int ia = a.id;
  // Subgradient 0 at the kink.
  return g.record(name, std::move(out), {a}, [ia](Graph& g, const Tensor& go) {
    const Tensor& x = g.value(ia);
    Tensor& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) {
      if (x[i] > 0.0) ga[i] += go[i];
    }
  });
}

}  // namespace

Var relu(Var a) { return clamp_at_zero("relu", a); }
Var hinge(Var a) { return clamp_at_zero("hinge", a); }

Var matmul(Var a, Var b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  if (y.dim(0) != k) {
    throw InputError("matmul: inner dimension mismatch " + shape_string(x.shape()) +
                     " x " + shape_string(y.shape()));
  }
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out.data()[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      const double* yrow = &y.data()[p * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += xv * yrow[j];
    }
  }
  int ia = a.id, ib = b.id;
  return graph_of(a).record("matmul", std::move(out), {a, b},
                            [ia, ib, m, k, n](Graph& g, const Tensor& go) {
    const Tensor& x = g.value(ia);
    const Tensor& y = g.value(ib);
    if (g.requires_grad(ia)) {
      Tensor& ga = g.grad_buffer(ia);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * y[p * n + j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (g.requires_grad(ib)) {
      Tensor& gb = g.grad_buffer(ib);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double xv = x[i * k + p];
          double* grow = &gb.data()[p * n];
          for (std::size_t j = 0; j < n; ++j) grow[j] += xv * go[i * n + j];
        }
      }
    }
  });
}

Var transpose(Var a) {
  require_rank("transpose", a, 2);
  const Tensor& x = a.value();
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  int ia = a.id;
  return graph_of(a).record("transpose", std::move(out), {a}, [ia, r, c](Graph& g, const Tensor& go) {
    Tensor& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += go[j * r + i];
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  int ia = a.id;
  return graph_of(a).record("reshape", std::move(out), {a}, [ia](Graph& g, const Tensor& go) {
    Tensor& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
}

Var add_row(Var a, Var v) {
  const Tensor& x = a.value();
  const Tensor& b = v.value();
  if (b.size() != x.cols()) {
    throw InputError("add_row: vector of length " + std::to_string(b.size()) +
                     " does not match last extent of " + shape_string(x.shape()));
  }
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] + b[c];
  int ia = a.id, iv = v.id;
  return graph_of(a).record("add_row", std::move(out), {a, v},
                            [ia, iv, rows, cols](Graph& g, const Tensor& go) {
    if (g.requires_grad(ia)) {
      Tensor& ga = g.grad_buffer(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (g.requires_grad(iv)) {
      Tensor& gv = g.grad_buffer(iv);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gv[c] += go[r * cols + c];
    }
  });
}

Var gather_rows(Var a, std::vector<std::size_t> indices) {
  const Tensor& x = a.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor out({indices.size(), cols});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) throw InputError("gather_rows: index out of range");
    std::copy_n(&x.data()[indices[i] * cols], cols, &out.data()[i * cols]);
  }
  int ia = a.id;
  return graph_of(a).record("gather_rows", std::move(out), {a},
                            [ia, idx = std::move(indices), cols](Graph& g, const Tensor& go) {
    Tensor& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < cols; ++c) ga[idx[i] * cols + c] += go[i * cols + c];
  });
}

Var conv2d(Var x, Var kernel, Padding padding) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", kernel, 4);
  const Tensor& in = x.value();
  const Tensor& kw = kernel.value();
  const std::size_t B = in.dim(0), H = in.dim(1), W = in.dim(2), Ci = in.dim(3);
  if (kw.dim(0) != 3 || kw.dim(1) != 3 || kw.dim(2) != Ci) {
    throw InputError("conv2d: kernel " + shape_string(kw.shape()) +
                     " incompatible with input " + shape_string(in.shape()));
  }
  const std::size_t Co = kw.dim(3);
  const bool same = padding == Padding::kSame;
  if (!same && (H < 3 || W < 3)) throw InputError("conv2d: valid padding needs H, W >= 3");
  const std::size_t Ho = same ? H : H - 2, Wo = same ? W : W - 2;
  // Input coordinate of output (y, x) tap (dy, dx) is (y + dy - off, x + dx - off).
  const long off = same ? 1 : 0;

  Tensor out({B, Ho, Wo, Co});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t y = 0; y < Ho; ++y) {
      for (std::size_t xo = 0; xo < Wo; ++xo) {
        double* __restrict acc = &out.data()[((b * Ho + y) * Wo + xo) * Co];
        for (long dy = 0; dy < 3; ++dy) {
          const long iy = static_cast<long>(y) + dy - off;
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          for (long dx = 0; dx < 3; ++dx) {
            const long ix = static_cast<long>(xo) + dx - off;
            if (ix < 0 || ix >= static_cast<long>(W)) continue;
            const double* __restrict ip = &in.data()[((b * H + iy) * W + ix) * Ci];
            const double* __restrict kp = &kw.data()[(dy * 3 + dx) * Ci * Co];
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              const double v = ip[ci];
              const double* __restrict kr = kp + ci * Co;
              for (std::size_t co = 0; co < Co; ++co) acc[co] += v * kr[co];
            }
          }
        }
      }
    }
  }

  int ix_id = x.id, ik = kernel.id;
  return graph_of(x).record(
      "conv2d", std::move(out), {x, kernel},
      [ix_id, ik, B, H, W, Ci, Co, Ho, Wo, off](Graph& g, const Tensor& go) {
        const Tensor& in = g.value(ix_id);
        const Tensor& kw = g.value(ik);
        const bool need_in = g.requires_grad(ix_id);
        const bool need_k = g.requires_grad(ik);
        Tensor* gin = need_in ? &g.grad_buffer(ix_id) : nullptr;
        Tensor* gk = need_k ? &g.grad_buffer(ik) : nullptr;
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t y = 0; y < Ho; ++y) {
            for (std::size_t xo = 0; xo < Wo; ++xo) {
              const double* gr = &go.data()[((b * Ho + y) * Wo + xo) * Co];
              for (long dy = 0; dy < 3; ++dy) {
                const long iy = static_cast<long>(y) + dy - off;
                if (iy < 0 || iy >= static_cast<long>(H)) continue;
                for (long dx = 0; dx < 3; ++dx) {
                  const long ixx = static_cast<long>(xo) + dx - off;
                  if (ixx < 0 || ixx >= static_cast<long>(W)) continue;
                  const std::size_t ibase = ((b * H + iy) * W + ixx) * Ci;
                  const std::size_t kbase = (dy * 3 + dx) * Ci * Co;
                  for (std::size_t ci = 0; ci < Ci; ++ci) {
                    const double* kr = &kw.data()[kbase + ci * Co];
                    if (gin) {
                      double acc = 0.0;
                      for (std::size_t co = 0; co < Co; ++co) acc += gr[co] * kr[co];
                      (*gin)[ibase + ci] += acc;
                    }
                    if (gk) {
                      const double v = in[ibase + ci];
                      double* gkr = &gk->data()[kbase + ci * Co];
                      for (std::size_t co = 0; co < Co; ++co) gkr[co] += v * gr[co];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

Var box_filter3(Var x) {
  require_rank("box_filter3", x, 3);
  const Tensor& in = x.value();
  const std::size_t H = in.dim(0), W = in.dim(1), C = in.dim(2);
  Tensor out(in.shape());
  auto count = [H, W](std::size_t y, std::size_t xx) {
    const double ny = 1.0 + (y > 0) + (y + 1 < H);
    const double nx = 1.0 + (xx > 0) + (xx + 1 < W);
    return ny * nx;
  };
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t xx = 0; xx < W; ++xx) {
      double* o = &out.data()[(y * W + xx) * C];
      for (long dy = -1; dy <= 1; ++dy) {
        const long iy = static_cast<long>(y) + dy;
        if (iy < 0 || iy >= static_cast<long>(H)) continue;
        for (long dx = -1; dx <= 1; ++dx) {
          const long ix = static_cast<long>(xx) + dx;
          if (ix < 0 || ix >= static_cast<long>(W)) continue;
          const double* ip = &in.data()[(iy * W + ix) * C];
          for (std::size_t c = 0; c < C; ++c) o[c] += ip[c];
        }
      }
      const double inv = 1.0 / count(y, xx);
      for (std::size_t c = 0; c < C; ++c) o[c] *= inv;
    }
  }
  int ia = x.id;
  return graph_of(x).record("box_filter3", std::move(out), {x},
                            [ia, H, W, C, count](Graph& g, const Tensor& go) {
    Tensor& ga = g.grad_buffer(ia);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t xx = 0; xx < W; ++xx) {
        const double inv = 1.0 / count(y, xx);
        const double* gr = &go.data()[(y * W + xx) * C];
        for (long dy = -1; dy <= 1; ++dy) {
          const long iy = static_cast<long>(y) + dy;
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          for (long dx = -1; dx <= 1; ++dx) {
            const long ix = static_cast<long>(xx) + dx;
            if (ix < 0 || ix >= static_cast<long>(W)) continue;
            double* gi = &ga.data()[(iy * W + ix) * C];
            for (std::size_t c = 0; c < C; ++c) gi[c] += gr[c] * inv;
          }
        }
      }
    }
  });
}

Var l2_normalize(Var a) {
  const Tensor& x = a.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor out(x.shape());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += x[r * cols + c] * x[r * cols + c];
    norms[r] = std::sqrt(s);
    const double inv = 1.0 / std::max(norms[r], kNormFloor);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] * inv;
  }
  int ia = a.id;
  return graph_of(a).record("l2_normalize", std::move(out), {a},
                            [ia, rows, cols, norms = std::move(norms)](Graph& g, const Tensor& go) {
    const Tensor& x = g.value(ia);
    Tensor& ga = g.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      const double n = norms[r];
      const double s = std::max(n, kNormFloor);
      double gx = 0.0;
      for (std::size_t c = 0; c < cols; ++c) gx += go[r * cols + c] * x[r * cols + c];
      const double coef = n >= kNormFloor ? gx / (s * s * n) : 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        ga[r * cols + c] += go[r * cols + c] / s - x[r * cols + c] * coef;
      }
    }
  });
}

Var cosine_sim(Var a, Var b) {
  require_same_shape("cosine_sim", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double d = 0.0, nx = 0.0, ny = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      d += x[r * cols + c] * y[r * cols + c];
      nx += x[r * cols + c] * x[r * cols + c];
      ny += y[r * cols + c] * y[r * cols + c];
    }
    out[r] = d / (std::max(std::sqrt(nx), kNormFloor) * std::max(std::sqrt(ny), kNormFloor));
  }
  int ia = a.id, ib = b.id;
  return graph_of(a).record("cosine_sim", std::move(out), {a, b},
                            [ia, ib, rows, cols](Graph& g, const Tensor& go) {
    const Tensor& x = g.value(ia);
    const Tensor& y = g.value(ib);
    Tensor* ga = g.requires_grad(ia) ? &g.grad_buffer(ia) : nullptr;
    Tensor* gb = g.requires_grad(ib) ? &g.grad_buffer(ib) : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      double d = 0.0, nx2 = 0.0, ny2 = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        d += x[r * cols + c] * y[r * cols + c];
        nx2 += x[r * cols + c] * x[r * cols + c];
        ny2 += y[r * cols + c] * y[r * cols + c];
      }
      const double nx = std::sqrt(nx2), ny = std::sqrt(ny2);
      const double sx = std::max(nx, kNormFloor), sy = std::max(ny, kNormFloor);
      const double inv = 1.0 / (sx * sy);
      // d/dx [d / (sx sy)] = y/(sx sy) - d x / (sx^2 sy nx) while the floor is inactive
      const double cx = nx >= kNormFloor ? d / (sx * sx * sy * nx) : 0.0;
      const double cy = ny >= kNormFloor ? d / (sy * sy * sx * ny) : 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        if (ga) (*ga)[i] += go[r] * (y[i] * inv - x[i] * cx);
        if (gb) (*gb)[i] += go[r] * (x[i] * inv - y[i] * cy);
      }
    }
  });
}

Var cosine_sim_matrix(Var a, Var b) {
  Var an = l2_normalize(reshape(a, {a.value().rows(), a.value().cols()}));
  Var bn = l2_normalize(reshape(b, {b.value().rows(), b.value().cols()}));
  return matmul(an, transpose(bn));
}

Var softmax(Var a, double temperature, const Tensor* mask) {
  if (!(temperature > 0.0)) throw InputError("softmax: temperature must be positive");
  const Tensor& x = a.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  bool row_mask = false;
  if (mask) {
    if (mask->size() == cols && mask->size() != x.size()) {
      row_mask = true;
    } else if (mask->size() != x.size()) {
      throw InputError("softmax: mask shape " + shape_string(mask->shape()) +
                       " incompatible with " + shape_string(x.shape()));
    }
  }
  auto allowed = [&](std::size_t r, std::size_t c) {
    if (!mask) return true;
    return (*mask)[row_mask ? c : r * cols + c] != 0.0;
  };
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      if (allowed(r, c)) mx = std::max(mx, x[r * cols + c] / temperature);
    if (!std::isfinite(mx)) throw NumericError("softmax: fully masked row");
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!allowed(r, c)) continue;
      const double e = std::exp(x[r * cols + c] / temperature - mx);
      out[r * cols + c] = e;
      s += e;
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= s;
  }
  int ia = a.id;
  int iout = static_cast<int>(graph_of(a).size());
  return graph_of(a).record("softmax", std::move(out), {a},
                            [ia, iout, rows, cols, temperature](Graph& g, const Tensor& go) {
    const Tensor& y = g.value(iout);
    Tensor& ga = g.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += y[r * cols + c] * go[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        ga[i] += y[i] * (go[i] - dot) / temperature;
      }
    }
  });
}

Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  int ia = a.id;
  return graph_of(a).record("sum", Tensor::scalar(s), {a}, [ia](Graph& g, const Tensor& go) {
    Tensor& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[0];
  });
}

Var mean(Var a) {
  const Tensor& x = a.value();
  if (x.size() == 0) throw InputError("mean of empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double n = static_cast<double>(x.size());
  int ia = a.id;
  return graph_of(a).record("mean", Tensor::scalar(s / n), {a}, [ia, n](Graph& g, const Tensor& go) {
    Tensor& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[0] / n;
  });
}

namespace {

Var masked_reduce(const char* name, Var a, const Tensor& mask, bool average) {
  const Tensor& x = a.value();
  if (mask.size() != x.size()) {
    throw InputError(std::string(name) + ": mask shape " + shape_string(mask.shape()) +
                     " does not match " + shape_string(x.shape()));
  }
  double s = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (mask[i] != 0.0) {
      s += x[i];
      ++count;
    }
  }
  if (count == 0) throw InputError(std::string(name) + ": empty mask");
  const double w = average ? 1.0 / static_cast<double>(count) : 1.0;
  int ia = a.id;
  return graph_of(a).record(name, Tensor::scalar(s * w), {a},
                            [ia, mask, w](Graph& g, const Tensor& go) {
    Tensor& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (mask[i] != 0.0) ga[i] += go[0] * w;
  });
}

}  // namespace

Var masked_sum(Var a, const Tensor& mask) { return masked_reduce("masked_sum", a, mask, false); }
Var masked_mean(Var a, const Tensor& mask) { return masked_reduce("masked_mean", a, mask, true); }

Var sum_last(Var a) {
  const Tensor& x = a.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += x[r * cols + c];
    out[r] = s;
  }
  int ia = a.id;
  return graph_of(a).record("sum_last", std::move(out), {a}, [ia, rows, cols](Graph& g, const Tensor& go) {
    Tensor& ga = g.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += go[r];
  });
}

Var sum_first(Var a) {
  require_rank("sum_first", a, 2);
  const Tensor& x = a.value();
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor out({cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += x[r * cols + c];
  int ia = a.id;
  return graph_of(a).record("sum_first", std::move(out), {a}, [ia, rows, cols](Graph& g, const Tensor& go) {
    Tensor& ga = g.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += go[c];
  });
}

}  // namespace ops

GradCheckResult grad_check(const ScalarFn& f, const Tensor& x, double eps, Stencil stencil) {
  GradCheckResult result;
  Tensor analytic;
  std::vector<std::uint8_t> base_kinks;
  {
    Graph g;
    g.set_track_kinks(true);
    Var leaf = g.leaf(x);
    Var root = f(g, leaf);
    g.backward(root);
    analytic = g.grad(leaf);
    base_kinks = g.kink_pattern();
  }
  for (std::uint8_t k : base_kinks) {
    if (k == 2) result.non_smooth = true;
  }
  auto evaluate = [&](const Tensor& at, std::vector<std::uint8_t>& kinks) {
    Graph g;
    g.set_track_kinks(true);
    Var leaf = g.constant(at);
    double v = f(g, leaf).value().item();
    kinks = g.kink_pattern();
    return v;
  };
  Tensor probe = x;
  const bool five = stencil == Stencil::kFivePoint;
  std::vector<std::uint8_t> k2p, kp, km, k2m;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = evaluate(probe, kp);
    probe[i] = orig - eps;
    const double fm = evaluate(probe, km);
    double numeric = (fp - fm) / (2.0 * eps);
    bool kink = kp != km;
    if (five) {
      probe[i] = orig + 2.0 * eps;
      const double f2p = evaluate(probe, k2p);
      probe[i] = orig - 2.0 * eps;
      const double f2m = evaluate(probe, k2m);
      numeric = (8.0 * (fp - fm) - (f2p - f2m)) / (12.0 * eps);
      kink = kink || k2p != kp || k2m != km;
    }
    probe[i] = orig;
    if (kink) {
      result.non_smooth = true;
      continue;
    }
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    if (err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_index = i;
    }
  }
  return result;
}

}  // namespace decisive
