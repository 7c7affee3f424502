// Copyright 2026 The kgcap Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kgcap/array.hpp"
#include "kgcap/error.hpp"
#include "kgcap/sparsemax.hpp"

namespace kgcap {

/// Handle to a node on a ComputationTape.
struct Var {
  int id = -1;
};

using GradientMap = std::map<std::string, Array>;

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;
using EVecMap = Eigen::Map<Eigen::VectorXd>;
using ECVecMap = Eigen::Map<const Eigen::VectorXd>;

/// Reverse-mode tape. Nodes are recorded in creation order, which is a
/// topological order by construction; backward() walks it once in reverse.
/// A tape serves a single forward/backward episode and is then discarded;
/// parameter Arrays are shared with the caller's store, never copied.
class Tape {
 public:
  Tape() { nodes_.reserve(256); }

  // ---- leaves ---------------------------------------------------------

  Var input(Array v) { return make(std::move(v), {}, nullptr); }

  Var constant(double v) { return input(Array::scalar(v)); }

  /// Trainable leaf. The name keys the entry in the gradient map.
  /// Registering a name twice returns the original node so gradients from
  /// every use accumulate in one place.
  Var param(const std::string& name, Array v) {
    for (const auto& [existing, id] : params_)
      if (existing == name) {
        if (v.data() != nodes_[static_cast<std::size_t>(id)].value.data())
          throw ConfigError("param '" + name + "' re-registered with different storage");
        return Var{id};
      }
    Var x = make(std::move(v), {}, nullptr);
    params_.emplace_back(name, x.id);
    return x;
  }

  const Array& value(Var x) const { return nodes_[static_cast<std::size_t>(x.id)].value; }

  // ---- elementwise ----------------------------------------------------

  Var add(Var a, Var b) {
    const Array &va = value(a), &vb = value(b);
    require_same_shape(va, vb, "add");
    Array out = va.clone();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] += vb[i];
    return make(std::move(out), {a, b}, [this, a, b](const Array& g) {
      axpy(grad(a), g, 1.0);
      axpy(grad(b), g, 1.0);
    });
  }

  Var sub(Var a, Var b) {
    const Array &va = value(a), &vb = value(b);
    require_same_shape(va, vb, "sub");
    Array out = va.clone();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
    return make(std::move(out), {a, b}, [this, a, b](const Array& g) {
      axpy(grad(a), g, 1.0);
      axpy(grad(b), g, -1.0);
    });
  }

  Var mul(Var a, Var b) {
    const Array &va = value(a), &vb = value(b);
    require_same_shape(va, vb, "mul");
    Array out = va.clone();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
    return make(std::move(out), {a, b}, [this, a, b](const Array& g) {
      const Array &va = value(a), &vb = value(b);
      Array &ga = grad(a), &gb = grad(b);
      for (std::int64_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i] * vb[i];
        gb[i] += g[i] * va[i];
      }
    });
  }

  Var scale(Var a, double c) {
    Array out = value(a).clone();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= c;
    return make(std::move(out), {a}, [this, a, c](const Array& g) { axpy(grad(a), g, c); });
  }

  Var neg(Var a) { return scale(a, -1.0); }

  Var tanh_(Var a) {
    Array out = value(a).clone();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
    Var r = make(std::move(out), {a}, nullptr);
    set_backward(r, [this, a, r](const Array& g) {
      const Array& y = value(r);
      Array& ga = grad(a);
      for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
    });
    return r;
  }

  Var sigmoid_(Var a) {
    Array out = value(a).clone();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(out[i]);
    Var r = make(std::move(out), {a}, nullptr);
    set_backward(r, [this, a, r](const Array& g) {
      const Array& y = value(r);
      Array& ga = grad(a);
      for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
    });
    return r;
  }

  Var relu_(Var a) {
    Array out = value(a).clone();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
    return make(std::move(out), {a}, [this, a](const Array& g) {
      const Array& x = value(a);
      Array& ga = grad(a);
      for (std::int64_t i = 0; i < g.size(); ++i)
        if (x[i] > 0.0) ga[i] += g[i];
    });
  }

  Var exp_(Var a) {
    Array out = value(a).clone();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
    Var r = make(std::move(out), {a}, nullptr);
    set_backward(r, [this, a, r](const Array& g) {
      const Array& y = value(r);
      Array& ga = grad(a);
      for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    });
    return r;
  }

  /// log with the argument clamped below at eps (flat gradient under eps).
  Var log_clamped(Var a, double eps = 1e-12) {
    Array out = value(a).clone();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(out[i], eps));
    return make(std::move(out), {a}, [this, a, eps](const Array& g) {
      const Array& x = value(a);
      Array& ga = grad(a);
      for (std::int64_t i = 0; i < g.size(); ++i)
        if (x[i] >= eps) ga[i] += g[i] / x[i];
    });
  }

  /// log(1 + exp(x)), overflow-safe.
  Var softplus_(Var a) {
    Array out = value(a).clone();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = stable_softplus(out[i]);
    return make(std::move(out), {a}, [this, a](const Array& g) {
      const Array& x = value(a);
      Array& ga = grad(a);
      for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * stable_sigmoid(x[i]);
    });
  }

  // ---- reductions ------------------------------------------------------

  Var sum(Var a) {
    double s = 0.0;
    const Array& va = value(a);
    for (std::int64_t i = 0; i < va.size(); ++i) s += va[i];
    return make(Array::scalar(s), {a}, [this, a](const Array& g) {
      const double gs = g[0];
      Array& ga = grad(a);
      for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += gs;
    });
  }

  Var mean(Var a) {
    const std::int64_t n = value(a).size();
    if (n == 0) throw DimensionError("mean of empty array");
    return scale(sum(a), 1.0 / static_cast<double>(n));
  }

  Var dot(Var a, Var b) {
    const Array &va = value(a), &vb = value(b);
    if (va.size() != vb.size()) throw DimensionError("dot: length mismatch");
    double s = 0.0;
    for (std::int64_t i = 0; i < va.size(); ++i) s += va[i] * vb[i];
    return make(Array::scalar(s), {a, b}, [this, a, b](const Array& g) {
      const double gs = g[0];
      const Array &va = value(a), &vb = value(b);
      Array &ga = grad(a), &gb = grad(b);
      for (std::int64_t i = 0; i < va.size(); ++i) {
        ga[i] += gs * vb[i];
        gb[i] += gs * va[i];
      }
    });
  }

  /// Column-wise sum of a matrix: out[c] = sum_r M[r, c].
  Var sum_rows(Var m) {
    const Array& vm = value(m);
    require_rank(vm, 2, "sum_rows");
    const int rows = vm.dim(0), cols = vm.dim(1);
    Array out({cols});
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) out[c] += vm.at(r, c);
    return make(std::move(out), {m}, [this, m, rows, cols](const Array& g) {
      Array& gm = grad(m);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) gm.at(r, c) += g[c];
    });
  }

  // ---- linear algebra (Eigen-backed) -----------------------------------

  Var matmul(Var a, Var b) {
    const Array &va = value(a), &vb = value(b);
    require_rank(va, 2, "matmul lhs");
    require_rank(vb, 2, "matmul rhs");
    if (va.dim(1) != vb.dim(0))
      throw DimensionError("matmul: " + va.shape_str() + " x " + vb.shape_str());
    Array out({va.dim(0), vb.dim(1)});
    emap(out) = ecmap(va) * ecmap(vb);
    return make(std::move(out), {a, b}, [this, a, b](const Array& g) {
      const Array &va = value(a), &vb = value(b);
      emap(grad(a)) += ecmap(g) * ecmap(vb).transpose();
      emap(grad(b)) += ecmap(va).transpose() * ecmap(g);
    });
  }

  Var matvec(Var a, Var x) {
    const Array &va = value(a), &vx = value(x);
    require_rank(va, 2, "matvec lhs");
    require_rank(vx, 1, "matvec rhs");
    if (va.dim(1) != vx.dim(0))
      throw DimensionError("matvec: " + va.shape_str() + " x " + vx.shape_str());
    Array out({va.dim(0)});
    evec(out) = ecmap(va) * ecvec(vx);
    return make(std::move(out), {a, x}, [this, a, x](const Array& g) {
      const Array &va = value(a), &vx = value(x);
      emap(grad(a)) += ecvec(g) * ecvec(vx).transpose();
      evec(grad(x)) += ecmap(va).transpose() * ecvec(g);
    });
  }

  /// A B^T without materializing the transpose: (m,k) x (n,k) -> (m,n).
  /// This is the workhorse for weight matrices stored output-major; both
  /// gradient accumulations are plain GEMMs with contiguous outputs.
  Var matmul_bt(Var a, Var b) {
    const Array &va = value(a), &vb = value(b);
    require_rank(va, 2, "matmul_bt lhs");
    require_rank(vb, 2, "matmul_bt rhs");
    if (va.dim(1) != vb.dim(1))
      throw DimensionError("matmul_bt: " + va.shape_str() + " x " + vb.shape_str() + "^T");
    Array out({va.dim(0), vb.dim(0)});
    emap(out) = ecmap(va) * ecmap(vb).transpose();
    return make(std::move(out), {a, b}, [this, a, b](const Array& g) {
      const Array &va = value(a), &vb = value(b);
      emap(grad(a)) += ecmap(g) * ecmap(vb);
      emap(grad(b)) += ecmap(g).transpose() * ecmap(va);
    });
  }

  /// x^T M for a vector x of length k and matrix M of shape (k, n).
  Var vecmat(Var x, Var m) {
    const Array &vx = value(x), &vm = value(m);
    require_rank(vx, 1, "vecmat lhs");
    require_rank(vm, 2, "vecmat rhs");
    if (vx.dim(0) != vm.dim(0))
      throw DimensionError("vecmat: " + vx.shape_str() + " x " + vm.shape_str());
    Array out({vm.dim(1)});
    evec(out) = ecmap(vm).transpose() * ecvec(vx);
    return make(std::move(out), {x, m}, [this, x, m](const Array& g) {
      const Array &vx = value(x), &vm = value(m);
      evec(grad(x)) += ecmap(vm) * ecvec(g);
      emap(grad(m)) += ecvec(vx) * ecvec(g).transpose();
    });
  }

  Var transpose(Var a) {
    const Array& va = value(a);
    require_rank(va, 2, "transpose");
    Array out({va.dim(1), va.dim(0)});
    emap(out) = ecmap(va).transpose();
    return make(std::move(out), {a}, [this, a](const Array& g) {
      emap(grad(a)) += ecmap(g).transpose();
    });
  }

  // ---- broadcasting adds ------------------------------------------------

  /// M[r, c] + v[c] for every row r.
  Var add_rowvec(Var m, Var v) {
    const Array &vm = value(m), &vv = value(v);
    require_rank(vm, 2, "add_rowvec lhs");
    if (vv.size() != vm.dim(1)) throw DimensionError("add_rowvec: width mismatch");
    Array out = vm.clone();
    const int rows = vm.dim(0), cols = vm.dim(1);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) out.at(r, c) += vv[c];
    return make(std::move(out), {m, v}, [this, m, v, rows, cols](const Array& g) {
      axpy(grad(m), g, 1.0);
      Array& gv = grad(v);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) gv[c] += g.at(r, c);
    });
  }

  /// M[r, c] + u[r] for every column c.
  Var add_colvec(Var m, Var u) {
    const Array &vm = value(m), &vu = value(u);
    require_rank(vm, 2, "add_colvec lhs");
    if (vu.size() != vm.dim(0)) throw DimensionError("add_colvec: height mismatch");
    Array out = vm.clone();
    const int rows = vm.dim(0), cols = vm.dim(1);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) out.at(r, c) += vu[r];
    return make(std::move(out), {m, u}, [this, m, u, rows, cols](const Array& g) {
      axpy(grad(m), g, 1.0);
      Array& gu = grad(u);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) gu[r] += g.at(r, c);
    });
  }

  // ---- shape moves -------------------------------------------------------

  Var reshape(Var a, std::vector<int> shape) {
    Array out = Array::from(std::move(shape), value(a).values());
    if (out.size() != value(a).size()) throw DimensionError("reshape: size mismatch");
    return make(std::move(out), {a}, [this, a](const Array& g) {
      Array& ga = grad(a);
      for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }

  Var concat(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat: no parts");
    std::vector<double> vals;
    for (Var p : parts) {
      const Array& vp = value(p);
      vals.insert(vals.end(), vp.values().begin(), vp.values().end());
    }
    Array out = Array::vec(std::move(vals));
    return make(std::move(out), parts, [this, parts](const Array& g) {
      std::int64_t off = 0;
      for (Var p : parts) {
        Array& gp = grad(p);
        for (std::int64_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
        off += gp.size();
      }
    });
  }

  Var slice(Var a, int offset, int len) {
    const Array& va = value(a);
    require_rank(va, 1, "slice");
    if (offset < 0 || len < 0 || offset + len > va.dim(0)) throw DimensionError("slice: out of range");
    Array out({len});
    for (int i = 0; i < len; ++i) out[i] = va[offset + i];
    return make(std::move(out), {a}, [this, a, offset, len](const Array& g) {
      Array& ga = grad(a);
      for (int i = 0; i < len; ++i) ga[offset + i] += g[i];
    });
  }

  Var slice_rows(Var m, int first, int count) {
    const Array& vm = value(m);
    require_rank(vm, 2, "slice_rows");
    if (first < 0 || count < 0 || first + count > vm.dim(0))
      throw DimensionError("slice_rows: out of range");
    const int cols = vm.dim(1);
    Array out({count, cols});
    for (int r = 0; r < count; ++r)
      for (int c = 0; c < cols; ++c) out.at(r, c) = vm.at(first + r, c);
    return make(std::move(out), {m}, [this, m, first, count, cols](const Array& g) {
      Array& gm = grad(m);
      for (int r = 0; r < count; ++r)
        for (int c = 0; c < cols; ++c) gm.at(first + r, c) += g.at(r, c);
    });
  }

  Var slice_cols(Var m, int first, int count) {
    const Array& vm = value(m);
    require_rank(vm, 2, "slice_cols");
    if (first < 0 || count < 0 || first + count > vm.dim(1))
      throw DimensionError("slice_cols: out of range");
    const int rows = vm.dim(0);
    Array out({rows, count});
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < count; ++c) out.at(r, c) = vm.at(r, first + c);
    return make(std::move(out), {m}, [this, m, first, count, rows](const Array& g) {
      Array& gm = grad(m);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < count; ++c) gm.at(r, first + c) += g.at(r, c);
    });
  }

  Var row(Var m, int r) {
    const Array& vm = value(m);
    require_rank(vm, 2, "row");
    if (r < 0 || r >= vm.dim(0)) throw DimensionError("row: index out of range");
    const int cols = vm.dim(1);
    Array out({cols});
    for (int c = 0; c < cols; ++c) out[c] = vm.at(r, c);
    return make(std::move(out), {m}, [this, m, r, cols](const Array& g) {
      Array& gm = grad(m);
      for (int c = 0; c < cols; ++c) gm.at(r, c) += g[c];
    });
  }

  /// Row gather (embedding-style lookup); backward scatter-adds.
  Var gather_rows(Var m, std::vector<int> idx) {
    const Array& vm = value(m);
    require_rank(vm, 2, "gather_rows");
    const int cols = vm.dim(1);
    Array out({static_cast<int>(idx.size()), cols});
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] < 0 || idx[r] >= vm.dim(0)) throw DimensionError("gather_rows: index out of range");
      for (int c = 0; c < cols; ++c) out.at(static_cast<int>(r), c) = vm.at(idx[r], c);
    }
    return make(std::move(out), {m}, [this, m, idx = std::move(idx), cols](const Array& g) {
      Array& gm = grad(m);
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (int c = 0; c < cols; ++c) gm.at(idx[r], c) += g.at(static_cast<int>(r), c);
    });
  }

  /// Stack equal-length vectors into matrix rows.
  Var stack_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw DimensionError("stack_rows: no rows");
    const int cols = value(rows[0]).dim(0);
    Array out({static_cast<int>(rows.size()), cols});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const Array& vr = value(rows[r]);
      if (vr.rank() != 1 || vr.dim(0) != cols) throw DimensionError("stack_rows: ragged rows");
      for (int c = 0; c < cols; ++c) out.at(static_cast<int>(r), c) = vr[c];
    }
    return make(std::move(out), rows, [this, rows, cols](const Array& g) {
      for (std::size_t r = 0; r < rows.size(); ++r) {
        Array& gr = grad(rows[r]);
        for (int c = 0; c < cols; ++c) gr[c] += g.at(static_cast<int>(r), c);
      }
    });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no parts");
    const int cols = value(parts[0]).dim(1);
    int rows = 0;
    for (Var p : parts) {
      require_rank(value(p), 2, "concat_rows");
      if (value(p).dim(1) != cols) throw DimensionError("concat_rows: column mismatch");
      rows += value(p).dim(0);
    }
    Array out({rows, cols});
    int off = 0;
    for (Var p : parts) {
      const Array& vp = value(p);
      for (int r = 0; r < vp.dim(0); ++r)
        for (int c = 0; c < cols; ++c) out.at(off + r, c) = vp.at(r, c);
      off += vp.dim(0);
    }
    return make(std::move(out), parts, [this, parts, cols](const Array& g) {
      int off = 0;
      for (Var p : parts) {
        Array& gp = grad(p);
        for (int r = 0; r < gp.dim(0); ++r)
          for (int c = 0; c < cols; ++c) gp.at(r, c) += g.at(off + r, c);
        off += gp.dim(0);
      }
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no parts");
    const int rows = value(parts[0]).dim(0);
    int cols = 0;
    for (Var p : parts) {
      require_rank(value(p), 2, "concat_cols");
      if (value(p).dim(0) != rows) throw DimensionError("concat_cols: row mismatch");
      cols += value(p).dim(1);
    }
    Array out({rows, cols});
    int off = 0;
    for (Var p : parts) {
      const Array& vp = value(p);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < vp.dim(1); ++c) out.at(r, off + c) = vp.at(r, c);
      off += vp.dim(1);
    }
    return make(std::move(out), parts, [this, parts, rows](const Array& g) {
      int off = 0;
      for (Var p : parts) {
        Array& gp = grad(p);
        const int w = gp.dim(1);
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < w; ++c) gp.at(r, c) += g.at(r, off + c);
        off += w;
      }
    });
  }

  /// v[i] = M[i, cols[i]].
  Var pick(Var m, std::vector<int> cols) {
    const Array& vm = value(m);
    require_rank(vm, 2, "pick");
    if (static_cast<int>(cols.size()) != vm.dim(0)) throw DimensionError("pick: one column per row");
    Array out({vm.dim(0)});
    for (int r = 0; r < vm.dim(0); ++r) {
      if (cols[static_cast<std::size_t>(r)] < 0 || cols[static_cast<std::size_t>(r)] >= vm.dim(1))
        throw DimensionError("pick: column out of range");
      out[r] = vm.at(r, cols[static_cast<std::size_t>(r)]);
    }
    return make(std::move(out), {m}, [this, m, cols = std::move(cols)](const Array& g) {
      Array& gm = grad(m);
      for (std::size_t r = 0; r < cols.size(); ++r) gm.at(static_cast<int>(r), cols[r]) += g[static_cast<int>(r)];
    });
  }

  // ---- normalizers -------------------------------------------------------

  Var softmax_vec(Var a) {
    const Array& va = value(a);
    require_rank(va, 1, "softmax_vec");
    Array out = va.clone();
    softmax_span(out.data(), out.dim(0));
    Var r = make(std::move(out), {a}, nullptr);
    set_backward(r, [this, a, r](const Array& g) {
      const Array& y = value(r);
      Array& ga = grad(a);
      double gy = 0.0;
      for (std::int64_t i = 0; i < y.size(); ++i) gy += g[i] * y[i];
      for (std::int64_t i = 0; i < y.size(); ++i) ga[i] += y[i] * (g[i] - gy);
    });
    return r;
  }

  Var softmax_rows(Var m) {
    const Array& vm = value(m);
    require_rank(vm, 2, "softmax_rows");
    Array out = vm.clone();
    const int rows = vm.dim(0), cols = vm.dim(1);
    for (int r = 0; r < rows; ++r) softmax_span(out.data() + static_cast<std::int64_t>(r) * cols, cols);
    Var res = make(std::move(out), {m}, nullptr);
    set_backward(res, [this, m, res, rows, cols](const Array& g) {
      const Array& y = value(res);
      Array& gm = grad(m);
      for (int r = 0; r < rows; ++r) {
        double gy = 0.0;
        for (int c = 0; c < cols; ++c) gy += g.at(r, c) * y.at(r, c);
        for (int c = 0; c < cols; ++c) gm.at(r, c) += y.at(r, c) * (g.at(r, c) - gy);
      }
    });
    return res;
  }

  Var log_softmax_rows(Var m) {
    const Array& vm = value(m);
    require_rank(vm, 2, "log_softmax_rows");
    const int rows = vm.dim(0), cols = vm.dim(1);
    Array out = vm.clone();
    for (int r = 0; r < rows; ++r) {
      double* p = out.data() + static_cast<std::int64_t>(r) * cols;
      double mx = p[0];
      for (int c = 1; c < cols; ++c) mx = std::max(mx, p[c]);
      double se = 0.0;
      for (int c = 0; c < cols; ++c) se += std::exp(p[c] - mx);
      const double lse = mx + std::log(se);
      for (int c = 0; c < cols; ++c) p[c] -= lse;
    }
    Var res = make(std::move(out), {m}, nullptr);
    set_backward(res, [this, m, res, rows, cols](const Array& g) {
      const Array& y = value(res);
      Array& gm = grad(m);
      for (int r = 0; r < rows; ++r) {
        double gs = 0.0;
        for (int c = 0; c < cols; ++c) gs += g.at(r, c);
        for (int c = 0; c < cols; ++c) gm.at(r, c) += g.at(r, c) - std::exp(y.at(r, c)) * gs;
      }
    });
    return res;
  }

  Var sparsemax_vec(Var a) {
    const Array& va = value(a);
    require_rank(va, 1, "sparsemax_vec");
    Array out({va.dim(0)});
    sparsemax_span(va.data(), va.dim(0), out.data());
    Var r = make(std::move(out), {a}, nullptr);
    set_backward(r, [this, a, r](const Array& g) {
      const Array& y = value(r);
      Array& ga = grad(a);
      std::vector<double> dz(static_cast<std::size_t>(y.size()));
      sparsemax_backward_span(y.data(), g.data(), static_cast<int>(y.size()), dz.data());
      for (std::int64_t i = 0; i < y.size(); ++i) ga[i] += dz[static_cast<std::size_t>(i)];
    });
    return r;
  }

  Var sparsemax_rows(Var m) {
    const Array& vm = value(m);
    require_rank(vm, 2, "sparsemax_rows");
    const int rows = vm.dim(0), cols = vm.dim(1);
    Array out({rows, cols});
    for (int r = 0; r < rows; ++r)
      sparsemax_span(vm.data() + static_cast<std::int64_t>(r) * cols, cols,
                     out.data() + static_cast<std::int64_t>(r) * cols);
    Var res = make(std::move(out), {m}, nullptr);
    set_backward(res, [this, m, res, rows, cols](const Array& g) {
      const Array& y = value(res);
      Array& gm = grad(m);
      std::vector<double> dz(static_cast<std::size_t>(cols));
      for (int r = 0; r < rows; ++r) {
        sparsemax_backward_span(y.data() + static_cast<std::int64_t>(r) * cols,
                                g.data() + static_cast<std::int64_t>(r) * cols, cols, dz.data());
        for (int c = 0; c < cols; ++c) gm.at(r, c) += dz[static_cast<std::size_t>(c)];
      }
    });
    return res;
  }

  // ---- backward ---------------------------------------------------------

  /// Reverse sweep from a scalar output. Gradients of trainable leaves are
  /// returned keyed by name; parameters the output does not reach map to
  /// zero arrays of matching shape.
  GradientMap backward(Var output) {
    if (value(output).size() != 1)
      throw ContractError("backward: output must be scalar, got shape " + value(output).shape_str());
    for (auto& n : nodes_) n.grad = Array();  // reset so backward() is repeatable
    grad(output)[0] = 1.0;
    for (int i = output.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backprop && n.grad.size() > 0) n.backprop(n.grad);
    }
    GradientMap gm;
    for (const auto& [name, id] : params_) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.size() > 0)
        gm[name] = n.grad;
      else
        gm[name] = Array(n.value.shape());
    }
    return gm;
  }

  std::size_t node_count() const { return nodes_.size(); }

  // Eigen views over Arrays (public: module code reuses them).
  static EMap emap(Array& a) { return EMap(a.data(), a.dim(0), a.rank() == 2 ? a.dim(1) : 1); }
  static ECMap ecmap(const Array& a) {
    return ECMap(a.data(), a.dim(0), a.rank() == 2 ? a.dim(1) : 1);
  }
  static EVecMap evec(Array& a) { return EVecMap(a.data(), a.size()); }
  static ECVecMap ecvec(const Array& a) { return ECVecMap(a.data(), a.size()); }

 private:
  struct Node {
    Array value;
    Array grad;  // empty until touched by the reverse sweep
    std::function<void(const Array&)> backprop;
  };

  Var make(Array value, const std::vector<Var>& inputs, std::function<void(const Array&)> backprop) {
    (void)inputs;  // inputs are captured by the closures; kept for readability at call sites
    Node n;
    n.value = std::move(value);
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void set_backward(Var v, std::function<void(const Array&)> fn) {
    nodes_[static_cast<std::size_t>(v.id)].backprop = std::move(fn);
  }

  Array& grad(Var x) {
    Node& n = nodes_[static_cast<std::size_t>(x.id)];
    if (n.grad.size() == 0 && n.value.size() > 0) n.grad = Array(n.value.shape());
    return n.grad;
  }

  static void axpy(Array& y, const Array& x, double a) {
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
  }

  static void require_same_shape(const Array& a, const Array& b, const char* op) {
    if (!a.same_shape(b))
      throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }

  static void require_rank(const Array& a, int rank, const char* op) {
    if (a.rank() != rank)
      throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                           a.shape_str());
  }

  static double stable_sigmoid(double x) {
    if (x >= 0.0) {
      const double e = std::exp(-x);
      return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
  }

  static double stable_softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  }

  static void softmax_span(double* p, int n) {
    double mx = p[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, p[i]);
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
      p[i] = std::exp(p[i] - mx);
      s += p[i];
    }
    for (int i = 0; i < n; ++i) p[i] /= s;
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, int>> params_;
};

}  // namespace kgcap
