#pragma once

// Reverse-mode differentiation on an operation tape. Nodes are appended in
// construction order, which is already a topological order, so the backward
// sweep is a single reverse pass. Every public operation checks its output
// for non-finite values and throws NumericalError on failure.
//
// A tape built with record=false computes values only; backward() on it is
// a contract error. Used for bulk loss evaluation where gradients are not
// needed.

#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "drift/tensor.hpp"

namespace drift {

class Tape {
 public:
  using Var = int;

  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  // Differentiable input. Gradient is available after backward().
  Var leaf(Tensor value) { return push(std::move(value), record_, {}); }

  // Non-differentiable input; gradients are never propagated into it.
  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  const Tensor& value(Var v) const { return nodes_[idx(v)].value; }

  const Tensor& grad(Var v) const {
    const Node& n = nodes_[idx(v)];
    if (!n.requires_grad) {
      throw std::logic_error("Tape::grad: variable does not carry a gradient");
    }
    return n.grad;
  }

  // ---------------------------------------------------------------- matmul
  Var matmul(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows()) {
      throw DimensionError("matmul: incompatible shapes " + shape_str(A) +
                           " x " + shape_str(B));
    }
    const int m = A.rows(), k = A.cols(), n = B.cols();
    Tensor C = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i) {
      double* crow = &C.data[static_cast<std::size_t>(i) * n];
      const double* arow = &A.data[static_cast<std::size_t>(i) * k];
      for (int p = 0; p < k; ++p) {
        const double av = arow[p];
        if (av == 0.0) continue;
        const double* brow = &B.data[static_cast<std::size_t>(p) * n];
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
    return make("matmul", std::move(C), {a, b},
                [a, b, m, k, n](Tape& t, const Tensor& g) {
                  if (t.wants_grad(a)) {
                    const Tensor& B = t.value(b);
                    Tensor& dA = t.grad_buf(a);
                    for (int i = 0; i < m; ++i) {
                      const double* grow = &g.data[(std::size_t)i * n];
                      double* darow = &dA.data[(std::size_t)i * k];
                      for (int p = 0; p < k; ++p) {
                        const double* brow = &B.data[(std::size_t)p * n];
                        double s = 0.0;
                        for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                        darow[p] += s;
                      }
                    }
                  }
                  if (t.wants_grad(b)) {
                    const Tensor& A = t.value(a);
                    Tensor& dB = t.grad_buf(b);
                    for (int i = 0; i < m; ++i) {
                      const double* arow = &A.data[(std::size_t)i * k];
                      const double* grow = &g.data[(std::size_t)i * n];
                      for (int p = 0; p < k; ++p) {
                        const double av = arow[p];
                        if (av == 0.0) continue;
                        double* dbrow = &dB.data[(std::size_t)p * n];
                        for (int j = 0; j < n; ++j) dbrow[j] += av * grow[j];
                      }
                    }
                  }
                });
  }

  // ------------------------------------------------------------ elementwise
  Var add(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require_same_shape(A, B, "add");
    Tensor C = A;
    for (std::size_t i = 0; i < C.data.size(); ++i) C.data[i] += B.data[i];
    return make("add", std::move(C), {a, b}, [a, b](Tape& t, const Tensor& g) {
      t.accumulate(a, g);
      t.accumulate(b, g);
    });
  }

  Var sub(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require_same_shape(A, B, "sub");
    Tensor C = A;
    for (std::size_t i = 0; i < C.data.size(); ++i) C.data[i] -= B.data[i];
    return make("sub", std::move(C), {a, b}, [a, b](Tape& t, const Tensor& g) {
      t.accumulate(a, g);
      if (t.wants_grad(b)) {
        Tensor& dB = t.grad_buf(b);
        for (std::size_t i = 0; i < g.data.size(); ++i) dB.data[i] -= g.data[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require_same_shape(A, B, "mul");
    Tensor C = A;
    for (std::size_t i = 0; i < C.data.size(); ++i) C.data[i] *= B.data[i];
    return make("mul", std::move(C), {a, b}, [a, b](Tape& t, const Tensor& g) {
      if (t.wants_grad(a)) {
        const Tensor& B = t.value(b);
        Tensor& dA = t.grad_buf(a);
        for (std::size_t i = 0; i < g.data.size(); ++i)
          dA.data[i] += g.data[i] * B.data[i];
      }
      if (t.wants_grad(b)) {
        const Tensor& A = t.value(a);
        Tensor& dB = t.grad_buf(b);
        for (std::size_t i = 0; i < g.data.size(); ++i)
          dB.data[i] += g.data[i] * A.data[i];
      }
    });
  }

  Var scale(Var a, double c) {
    Tensor C = value(a);
    for (double& v : C.data) v *= c;
    return make("scale", std::move(C), {a}, [a, c](Tape& t, const Tensor& g) {
      if (t.wants_grad(a)) {
        Tensor& dA = t.grad_buf(a);
        for (std::size_t i = 0; i < g.data.size(); ++i)
          dA.data[i] += c * g.data[i];
      }
    });
  }

  Var add_scalar(Var a, double c) {
    Tensor C = value(a);
    for (double& v : C.data) v += c;
    return make("add_scalar", std::move(C), {a},
                [a](Tape& t, const Tensor& g) { t.accumulate(a, g); });
  }

  // Adds a length-n row vector to every row of an m-by-n matrix.
  Var add_rowvec(Var x, Var b) {
    const Tensor& X = value(x);
    const Tensor& B = value(b);
    const int m = X.rows(), n = X.cols();
    if (static_cast<int>(B.size()) != n) {
      throw DimensionError("add_rowvec: vector length mismatch");
    }
    Tensor C = X;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) C.data[(std::size_t)i * n + j] += B.data[j];
    return make("add_rowvec", std::move(C), {x, b},
                [x, b, m, n](Tape& t, const Tensor& g) {
                  t.accumulate(x, g);
                  if (t.wants_grad(b)) {
                    Tensor& dB = t.grad_buf(b);
                    for (int i = 0; i < m; ++i)
                      for (int j = 0; j < n; ++j)
                        dB.data[j] += g.data[(std::size_t)i * n + j];
                  }
                });
  }

  Var relu(Var a) {
    Tensor C = value(a);
    for (double& v : C.data) v = v > 0.0 ? v : 0.0;
    return make("relu", std::move(C), {a}, [a](Tape& t, const Tensor& g) {
      if (t.wants_grad(a)) {
        const Tensor& A = t.value(a);
        Tensor& dA = t.grad_buf(a);
        for (std::size_t i = 0; i < g.data.size(); ++i)
          if (A.data[i] > 0.0) dA.data[i] += g.data[i];
      }
    });
  }

  Var sigmoid(Var a) {
    Tensor C = value(a);
    for (double& v : C.data) v = sigmoid_scalar(v);
    return make("sigmoid", std::move(C), {a}, [a](Tape& t, const Tensor& g) {
      if (t.wants_grad(a)) {
        const Tensor& P = t.value_of_output();
        Tensor& dA = t.grad_buf(a);
        for (std::size_t i = 0; i < g.data.size(); ++i)
          dA.data[i] += g.data[i] * P.data[i] * (1.0 - P.data[i]);
      }
    });
  }

  // Row-wise softmax; rows sum to one.
  Var softmax_rows(Var a) {
    const Tensor& A = value(a);
    const int m = A.rows(), n = A.cols();
    Tensor C = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i) {
      const double* row = &A.data[(std::size_t)i * n];
      double* out = &C.data[(std::size_t)i * n];
      double mx = row[0];
      for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      double z = 0.0;
      for (int j = 0; j < n; ++j) {
        out[j] = std::exp(row[j] - mx);
        z += out[j];
      }
      for (int j = 0; j < n; ++j) out[j] /= z;
    }
    return make("softmax_rows", std::move(C), {a},
                [a, m, n](Tape& t, const Tensor& g) {
                  if (!t.wants_grad(a)) return;
                  const Tensor& Y = t.value_of_output();
                  Tensor& dA = t.grad_buf(a);
                  for (int i = 0; i < m; ++i) {
                    const double* y = &Y.data[(std::size_t)i * n];
                    const double* gy = &g.data[(std::size_t)i * n];
                    double dot = 0.0;
                    for (int j = 0; j < n; ++j) dot += gy[j] * y[j];
                    double* da = &dA.data[(std::size_t)i * n];
                    for (int j = 0; j < n; ++j) da[j] += y[j] * (gy[j] - dot);
                  }
                });
  }

  // Row-wise layer normalisation with learnable gain and bias vectors.
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
    const Tensor& X = value(x);
    const int m = X.rows(), n = X.cols();
    if (static_cast<int>(value(gain).size()) != n ||
        static_cast<int>(value(bias).size()) != n) {
      throw DimensionError("layer_norm: gain/bias length mismatch");
    }
    const Tensor& G = value(gain);
    const Tensor& Bv = value(bias);
    Tensor C = Tensor::zeros({m, n});
    Tensor xhat = Tensor::zeros({m, n});
    std::vector<double> inv_std(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
      const double* row = &X.data[(std::size_t)i * n];
      double mean = 0.0;
      for (int j = 0; j < n; ++j) mean += row[j];
      mean /= n;
      double var = 0.0;
      for (int j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
      var /= n;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(i)] = is;
      for (int j = 0; j < n; ++j) {
        const double xh = (row[j] - mean) * is;
        xhat.data[(std::size_t)i * n + j] = xh;
        C.data[(std::size_t)i * n + j] = G.data[j] * xh + Bv.data[j];
      }
    }
    return make(
        "layer_norm", std::move(C), {x, gain, bias},
        [x, gain, bias, m, n, xh = std::move(xhat),
         is = std::move(inv_std)](Tape& t, const Tensor& g) {
          if (t.wants_grad(gain)) {
            Tensor& dG = t.grad_buf(gain);
            for (int i = 0; i < m; ++i)
              for (int j = 0; j < n; ++j)
                dG.data[j] += g.data[(std::size_t)i * n + j] *
                              xh.data[(std::size_t)i * n + j];
          }
          if (t.wants_grad(bias)) {
            Tensor& dB = t.grad_buf(bias);
            for (int i = 0; i < m; ++i)
              for (int j = 0; j < n; ++j)
                dB.data[j] += g.data[(std::size_t)i * n + j];
          }
          if (t.wants_grad(x)) {
            const Tensor& G = t.value(gain);
            Tensor& dX = t.grad_buf(x);
            for (int i = 0; i < m; ++i) {
              const double* gy = &g.data[(std::size_t)i * n];
              const double* xr = &xh.data[(std::size_t)i * n];
              double sum_dxh = 0.0, sum_dxh_xh = 0.0;
              for (int j = 0; j < n; ++j) {
                const double dxh = gy[j] * G.data[j];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xr[j];
              }
              const double isr = is[(std::size_t)i];
              for (int j = 0; j < n; ++j) {
                const double dxh = gy[j] * G.data[j];
                dX.data[(std::size_t)i * n + j] +=
                    isr * (dxh - sum_dxh / n - xr[j] * sum_dxh_xh / n);
              }
            }
          }
        });
  }

  // Row gather: out[t, :] = table[ids[t], :]. Gradient flows into the table.
  Var embed(const std::vector<int>& ids, Var table) {
    const Tensor& T = value(table);
    const int n = T.cols();
    const int rows = T.rows();
    Tensor C = Tensor::zeros({static_cast<int>(ids.size()), n});
    for (std::size_t t = 0; t < ids.size(); ++t) {
      if (ids[t] < 0 || ids[t] >= rows) {
        throw DimensionError("embed: id out of range");
      }
      std::copy_n(&T.data[(std::size_t)ids[t] * n], n, &C.data[t * n]);
    }
    return make("embed", std::move(C), {table},
                [table, ids, n](Tape& t, const Tensor& g) {
                  if (!t.wants_grad(table)) return;
                  Tensor& dT = t.grad_buf(table);
                  for (std::size_t r = 0; r < ids.size(); ++r)
                    for (int j = 0; j < n; ++j)
                      dT.data[(std::size_t)ids[r] * n + j] +=
                          g.data[r * static_cast<std::size_t>(n) + j];
                });
  }

  Var slice_cols(Var x, int c0, int c1) {
    const Tensor& X = value(x);
    const int m = X.rows(), n = X.cols();
    if (c0 < 0 || c1 > n || c0 >= c1) {
      throw DimensionError("slice_cols: bad column range");
    }
    const int w = c1 - c0;
    Tensor C = Tensor::zeros({m, w});
    for (int i = 0; i < m; ++i)
      std::copy_n(&X.data[(std::size_t)i * n + c0], w,
                  &C.data[(std::size_t)i * w]);
    return make("slice_cols", std::move(C), {x},
                [x, c0, w, m, n](Tape& t, const Tensor& g) {
                  if (!t.wants_grad(x)) return;
                  Tensor& dX = t.grad_buf(x);
                  for (int i = 0; i < m; ++i)
                    for (int j = 0; j < w; ++j)
                      dX.data[(std::size_t)i * n + c0 + j] +=
                          g.data[(std::size_t)i * w + j];
                });
  }

  Var slice_rows(Var x, int r0, int r1) {
    const Tensor& X = value(x);
    const int m = X.rows(), n = X.cols();
    if (r0 < 0 || r1 > m || r0 >= r1) {
      throw DimensionError("slice_rows: bad row range");
    }
    const int h = r1 - r0;
    Tensor C = Tensor::zeros({h, n});
    std::copy_n(&X.data[(std::size_t)r0 * n], (std::size_t)h * n,
                C.data.data());
    return make("slice_rows", std::move(C), {x},
                [x, r0, h, n](Tape& t, const Tensor& g) {
                  if (!t.wants_grad(x)) return;
                  Tensor& dX = t.grad_buf(x);
                  for (std::size_t i = 0; i < (std::size_t)h * n; ++i)
                    dX.data[(std::size_t)r0 * n + i] += g.data[i];
                });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const int m = value(parts[0]).rows();
    int total = 0;
    for (Var p : parts) {
      if (value(p).rows() != m) {
        throw DimensionError("concat_cols: row count mismatch");
      }
      total += value(p).cols();
    }
    Tensor C = Tensor::zeros({m, total});
    int off = 0;
    for (Var p : parts) {
      const Tensor& P = value(p);
      const int w = P.cols();
      for (int i = 0; i < m; ++i)
        std::copy_n(&P.data[(std::size_t)i * w], w,
                    &C.data[(std::size_t)i * total + off]);
      off += w;
    }
    return make("concat_cols", std::move(C), parts,
                [parts, m, total](Tape& t, const Tensor& g) {
                  int off = 0;
                  for (Var p : parts) {
                    const int w = t.value(p).cols();
                    if (t.wants_grad(p)) {
                      Tensor& dP = t.grad_buf(p);
                      for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j)
                          dP.data[(std::size_t)i * w + j] +=
                              g.data[(std::size_t)i * total + off + j];
                    }
                    off += w;
                  }
                });
  }

  // Single row as a 1-by-n matrix.
  Var slice_row(Var x, int r) {
    const Tensor& X = value(x);
    const int m = X.rows(), n = X.cols();
    if (r < 0 || r >= m) throw DimensionError("slice_row: row out of range");
    Tensor C = Tensor::zeros({1, n});
    std::copy_n(&X.data[(std::size_t)r * n], n, C.data.data());
    return make("slice_row", std::move(C), {x},
                [x, r, n](Tape& t, const Tensor& g) {
                  if (!t.wants_grad(x)) return;
                  Tensor& dX = t.grad_buf(x);
                  for (int j = 0; j < n; ++j)
                    dX.data[(std::size_t)r * n + j] += g.data[j];
                });
  }

  Var mean_rows(Var x) {
    const Tensor& X = value(x);
    const int m = X.rows(), n = X.cols();
    Tensor C = Tensor::zeros({1, n});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        C.data[j] += X.data[(std::size_t)i * n + j] / m;
    return make("mean_rows", std::move(C), {x},
                [x, m, n](Tape& t, const Tensor& g) {
                  if (!t.wants_grad(x)) return;
                  Tensor& dX = t.grad_buf(x);
                  for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                      dX.data[(std::size_t)i * n + j] += g.data[j] / m;
                });
  }

  Var transpose(Var x) {
    const Tensor& X = value(x);
    const int m = X.rows(), n = X.cols();
    Tensor C = Tensor::zeros({n, m});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        C.data[(std::size_t)j * m + i] = X.data[(std::size_t)i * n + j];
    return make("transpose", std::move(C), {x},
                [x, m, n](Tape& t, const Tensor& g) {
                  if (!t.wants_grad(x)) return;
                  Tensor& dX = t.grad_buf(x);
                  for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                      dX.data[(std::size_t)i * n + j] +=
                          g.data[(std::size_t)j * m + i];
                });
  }

  Var sum(Var x) {
    const Tensor& X = value(x);
    double s = 0.0;
    for (double v : X.data) s += v;
    return make("sum", Tensor::scalar(s), {x}, [x](Tape& t, const Tensor& g) {
      if (!t.wants_grad(x)) return;
      Tensor& dX = t.grad_buf(x);
      for (double& v : dX.data) v += g.data[0];
    });
  }

  // Inner product of two equally sized tensors, as a scalar.
  Var dot(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.size() != B.size()) throw DimensionError("dot: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < A.size(); ++i) s += A.data[i] * B.data[i];
    return make("dot", Tensor::scalar(s), {a, b},
                [a, b](Tape& t, const Tensor& g) {
                  const double gv = g.data[0];
                  if (t.wants_grad(a)) {
                    const Tensor& B = t.value(b);
                    Tensor& dA = t.grad_buf(a);
                    for (std::size_t i = 0; i < B.size(); ++i)
                      dA.data[i] += gv * B.data[i];
                  }
                  if (t.wants_grad(b)) {
                    const Tensor& A = t.value(a);
                    Tensor& dB = t.grad_buf(b);
                    for (std::size_t i = 0; i < A.size(); ++i)
                      dB.data[i] += gv * A.data[i];
                  }
                });
  }

  // Mean next-token cross-entropy of row-wise logits against target ids.
  Var cross_entropy_mean(Var logits, const std::vector<int>& targets) {
    const Tensor& L = value(logits);
    const int m = L.rows(), n = L.cols();
    if (static_cast<int>(targets.size()) != m) {
      throw DimensionError("cross_entropy_mean: target count mismatch");
    }
    double loss = 0.0;
    for (int i = 0; i < m; ++i) {
      if (targets[i] < 0 || targets[i] >= n) {
        throw DimensionError("cross_entropy_mean: target id out of range");
      }
      const double* row = &L.data[(std::size_t)i * n];
      double mx = row[0];
      for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      double z = 0.0;
      for (int j = 0; j < n; ++j) z += std::exp(row[j] - mx);
      loss += mx + std::log(z) - row[targets[i]];
    }
    loss /= m;
    return make("cross_entropy_mean", Tensor::scalar(loss), {logits},
                [logits, targets, m, n](Tape& t, const Tensor& g) {
                  if (!t.wants_grad(logits)) return;
                  const Tensor& L = t.value(logits);
                  Tensor& dL = t.grad_buf(logits);
                  const double gv = g.data[0] / m;
                  for (int i = 0; i < m; ++i) {
                    const double* row = &L.data[(std::size_t)i * n];
                    double mx = row[0];
                    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
                    double z = 0.0;
                    for (int j = 0; j < n; ++j) z += std::exp(row[j] - mx);
                    double* drow = &dL.data[(std::size_t)i * n];
                    for (int j = 0; j < n; ++j) {
                      const double p = std::exp(row[j] - mx) / z;
                      drow[j] += gv * (p - (j == targets[i] ? 1.0 : 0.0));
                    }
                  }
                });
  }

  // Binary cross-entropy on a scalar probability; p is clamped to
  // [kBceEps, 1 - kBceEps] before the logs.
  Var bce_loss(Var p, double label) {
    const Tensor& P = value(p);
    if (P.size() != 1) throw DimensionError("bce_loss: probability not scalar");
    const double pc = clamp_prob(P.data[0]);
    const double loss = -(label * std::log(pc) + (1.0 - label) * std::log(1.0 - pc));
    return make("bce_loss", Tensor::scalar(loss), {p},
                [p, label](Tape& t, const Tensor& g) {
                  if (!t.wants_grad(p)) return;
                  const double raw = t.value(p).data[0];
                  if (raw < kBceEps || raw > 1.0 - kBceEps) return;
                  t.grad_buf(p).data[0] +=
                      g.data[0] * (raw - label) / (raw * (1.0 - raw));
                });
  }

  // ---------------------------------------------------------------- backward
  // Gradients of a scalar loss for every differentiable node. Deterministic:
  // a fixed reverse sweep with in-order accumulation.
  void backward(Var loss) {
    if (value(loss).size() != 1) {
      throw std::logic_error("Tape::backward: loss is not scalar");
    }
    backward_from({{loss, Tensor::scalar(1.0)}});
  }

  // Reverse sweep from externally supplied gradient seeds. This is how
  // per-layer probe-loss gradients are injected mid-graph.
  void backward_from(const std::vector<std::pair<Var, Tensor>>& seeds) {
    if (!record_) {
      throw std::logic_error("Tape::backward: tape was built without recording");
    }
    for (Node& n : nodes_) {
      if (n.requires_grad) {
        n.grad.shape = n.value.shape;
        n.grad.data.assign(n.value.data.size(), 0.0);
      }
    }
    for (const auto& [v, seed] : seeds) {
      Node& n = nodes_[idx(v)];
      if (!n.requires_grad) {
        throw std::logic_error("Tape::backward: seed into non-differentiable node");
      }
      if (!seed.same_shape(n.value) && seed.size() != n.value.size()) {
        throw DimensionError("Tape::backward: seed shape mismatch");
      }
      for (std::size_t i = 0; i < seed.data.size(); ++i) {
        n.grad.data[i] += seed.data[i];
      }
    }
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || !n.requires_grad) continue;
      current_output_ = static_cast<Var>(i);
      n.backward(*this, n.grad);
    }
  }

  static double sigmoid_scalar(double x) {
    if (x >= 0.0) {
      const double e = std::exp(-x);
      return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
  }

  static constexpr double kBceEps = 1e-12;

  static double clamp_prob(double p) {
    return std::min(1.0 - kBceEps, std::max(kBceEps, p));
  }

  static double bce_scalar(double p, double label) {
    const double pc = clamp_prob(p);
    return -(label * std::log(pc) + (1.0 - label) * std::log(1.0 - pc));
  }

 private:
  using BackFn = std::function<void(Tape&, const Tensor&)>;

  struct Node {
    Tensor value;
    Tensor grad;
    BackFn backward;
    bool requires_grad = false;
  };

  std::size_t idx(Var v) const {
    if (v < 0 || static_cast<std::size_t>(v) >= nodes_.size()) {
      throw std::logic_error("Tape: variable from another tape");
    }
    return static_cast<std::size_t>(v);
  }

  bool wants_grad(Var v) const { return nodes_[idx(v)].requires_grad; }

  Tensor& grad_buf(Var v) { return nodes_[idx(v)].grad; }

  void accumulate(Var v, const Tensor& g) {
    if (!wants_grad(v)) return;
    Tensor& dst = grad_buf(v);
    for (std::size_t i = 0; i < g.data.size(); ++i) dst.data[i] += g.data[i];
  }

  // Value of the node whose backward fn is currently running.
  const Tensor& value_of_output() const { return nodes_[idx(current_output_)].value; }

  Var push(Tensor value, bool requires_grad, BackFn fn) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
  }

  Var make(const char* op, Tensor value, const std::vector<Var>& inputs,
           BackFn fn) {
    if (!all_finite(value)) {
      throw NumericalError(std::string(op) + ": non-finite result");
    }
    bool rg = false;
    if (record_) {
      for (Var v : inputs) rg = rg || wants_grad(v);
    }
    return push(std::move(value), rg, rg ? std::move(fn) : BackFn{});
  }

  static void require_same_shape(const Tensor& a, const Tensor& b,
                                 const char* op) {
    if (!a.same_shape(b)) {
      throw DimensionError(std::string(op) + ": shape mismatch " +
                           shape_str(a) + " vs " + shape_str(b));
    }
  }

  std::vector<Node> nodes_;
  bool record_;
  Var current_output_ = -1;
};

// Dense one-hot rows for a token sequence; the attack differentiates
// through this as matmul(one_hot, embedding).
inline Tensor make_one_hot(const std::vector<int>& ids, int vocab_size) {
  Tensor t = Tensor::zeros({static_cast<int>(ids.size()), vocab_size});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab_size) {
      throw DimensionError("make_one_hot: id out of range");
    }
    t.data[i * static_cast<std::size_t>(vocab_size) + ids[i]] = 1.0;
  }
  return t;
}

}  // namespace drift
