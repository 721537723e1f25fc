#include "geoformer/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace geoformer::diff {

namespace {

int g_threads = 1;

bool is_suffix(const std::vector<size_t>& small, const std::vector<size_t>& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value()))
    throw shape_error(std::string(op) + ": shape mismatch " + a.value().shape_string() +
                      " vs " + b.value().shape_string());
}

// C[m,n] (+)= sum_k A[m,k] B[k,n]. Parallel over rows of C; each output
// element is written by one thread, accumulation order over k is fixed.
void gemm_nn(const double* A, const double* B, double* C, size_t M, size_t K, size_t N,
             bool accumulate) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(g_threads) if (M * K * N > 16384 && g_threads > 1)
#endif
  for (long long m = 0; m < (long long)M; ++m) {
    double* crow = C + m * N;
    if (!accumulate) std::fill(crow, crow + N, 0.0);
    const double* arow = A + m * K;
    for (size_t k = 0; k < K; ++k) {
      const double a = arow[k];
      if (a == 0.0) continue;
      const double* brow = B + k * N;
      for (size_t n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

// C[m,n] (+)= sum_k A[k,m] B[k,n]   (A is K x M)
void gemm_tn(const double* A, const double* B, double* C, size_t M, size_t K, size_t N,
             bool accumulate) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(g_threads) if (M * K * N > 16384 && g_threads > 1)
#endif
  for (long long m = 0; m < (long long)M; ++m) {
    double* crow = C + m * N;
    if (!accumulate) std::fill(crow, crow + N, 0.0);
    for (size_t k = 0; k < K; ++k) {
      const double a = A[k * M + m];
      if (a == 0.0) continue;
      const double* brow = B + k * N;
      for (size_t n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

// C[m,n] (+)= sum_k A[m,k] B[n,k]   (B is N x K)
void gemm_nt(const double* A, const double* B, double* C, size_t M, size_t K, size_t N,
             bool accumulate) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(g_threads) if (M * K * N > 16384 && g_threads > 1)
#endif
  for (long long m = 0; m < (long long)M; ++m) {
    const double* arow = A + m * K;
    double* crow = C + m * N;
    for (size_t n = 0; n < N; ++n) {
      const double* brow = B + n * K;
      double acc = 0.0;
      for (size_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
      if (accumulate)
        crow[n] += acc;
      else
        crow[n] = acc;
    }
  }
}

Var unary_op(Var a, const char* name, const std::function<double(double)>& f,
             const std::function<double(double, double)>& df /* (x, y) -> dy/dx */) {
  Tape& tape = *a.tape();
  Tensor out(a.shape());
  const Tensor& x = a.value();
  for (size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
  Node* n = tape.new_node(std::move(out), a.node()->requires_grad, name);
  if (n->requires_grad) {
    Node* pa = a.node();
    n->backward = [pa, f, df](Node& self) {
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      const Tensor& x = pa->value;
      const Tensor& y = self.value;
      for (size_t i = 0; i < x.numel(); ++i) pa->grad[i] += self.grad[i] * df(x[i], y[i]);
    };
  }
  return Var(&tape, n);
}

}  // namespace

void set_num_threads(int n) { g_threads = std::max(1, n); }
int num_threads() { return g_threads; }

Var Tape::leaf(Tensor value, bool requires_grad) {
  return Var(this, new_node(std::move(value), requires_grad, "leaf"));
}

Node* Tape::new_node(Tensor value, bool requires_grad, std::string op_name) {
  auto node = std::make_unique<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->op_name = std::move(op_name);
  nodes_.push_back(std::move(node));
  return nodes_.back().get();
}

void Tape::backward(const Var& root) {
  if (root.numel() != 1)
    throw shape_error("backward: root must be scalar, got " + root.value().shape_string());
  root.node()->ensure_grad();
  root.node()->grad[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.backward && n.grad.numel() > 0) n.backward(n);
  }
}

Var add(Var a, Var b) {
  Tape& tape = *a.tape();
  if (!is_suffix(b.shape(), a.shape()))
    throw shape_error("add: " + b.value().shape_string() + " is not a suffix of " +
                      a.value().shape_string());
  Tensor out(a.shape());
  const size_t bn = b.numel();
  for (size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i % bn];
  bool rg = a.node()->requires_grad || b.node()->requires_grad;
  Node* n = tape.new_node(std::move(out), rg, "add");
  if (rg) {
    Node* pa = a.node();
    Node* pb = b.node();
    n->backward = [pa, pb, bn](Node& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < self.grad.numel(); ++i) pb->grad[i % bn] += self.grad[i];
      }
    };
  }
  return Var(&tape, n);
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tape& tape = *a.tape();
  Tensor out(a.shape());
  for (size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  bool rg = a.node()->requires_grad || b.node()->requires_grad;
  Node* n = tape.new_node(std::move(out), rg, "sub");
  if (rg) {
    Node* pa = a.node();
    Node* pb = b.node();
    n->backward = [pa, pb](Node& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < self.grad.numel(); ++i) pb->grad[i] -= self.grad[i];
      }
    };
  }
  return Var(&tape, n);
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tape& tape = *a.tape();
  Tensor out(a.shape());
  for (size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  bool rg = a.node()->requires_grad || b.node()->requires_grad;
  Node* n = tape.new_node(std::move(out), rg, "mul");
  if (rg) {
    Node* pa = a.node();
    Node* pb = b.node();
    n->backward = [pa, pb](Node& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < self.grad.numel(); ++i)
          pa->grad[i] += self.grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < self.grad.numel(); ++i)
          pb->grad[i] += self.grad[i] * pa->value[i];
      }
    };
  }
  return Var(&tape, n);
}

Var scalar_mul(Var a, double c) {
  Tape& tape = *a.tape();
  Tensor out(a.shape());
  for (size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * c;
  Node* n = tape.new_node(std::move(out), a.node()->requires_grad, "scalar_mul");
  if (n->requires_grad) {
    Node* pa = a.node();
    n->backward = [pa, c](Node& self) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i] * c;
    };
  }
  return Var(&tape, n);
}

Var add_const(Var a, const Tensor& c) {
  Tape& tape = *a.tape();
  if (!is_suffix(c.shape(), a.shape()))
    throw shape_error("add_const: " + c.shape_string() + " is not a suffix of " +
                      a.value().shape_string());
  Tensor out(a.shape());
  const size_t cn = c.numel();
  for (size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + c[i % cn];
  Node* n = tape.new_node(std::move(out), a.node()->requires_grad, "add_const");
  if (n->requires_grad) {
    Node* pa = a.node();
    n->backward = [pa](Node& self) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i];
    };
  }
  return Var(&tape, n);
}

Var matmul(Var a, Var b) {
  Tape& tape = *a.tape();
  const auto& as = a.shape();
  const auto& bs = b.shape();
  size_t batch = 1, M, K, N;
  bool a_batched = false, b_batched = false;
  if (as.size() == 2 && bs.size() == 2) {
    M = as[0], K = as[1];
  } else if (as.size() == 3 && bs.size() == 2) {
    batch = as[0], M = as[1], K = as[2];
    a_batched = true;
  } else if (as.size() == 3 && bs.size() == 3) {
    if (as[0] != bs[0])
      throw shape_error("matmul: batch mismatch " + a.value().shape_string() + " vs " +
                        b.value().shape_string());
    batch = as[0], M = as[1], K = as[2];
    a_batched = b_batched = true;
  } else {
    throw shape_error("matmul: unsupported ranks " + a.value().shape_string() + " x " +
                      b.value().shape_string());
  }
  const size_t bk = b_batched ? bs[1] : bs[0];
  N = b_batched ? bs[2] : bs[1];
  if (bk != K)
    throw shape_error("matmul: inner dim mismatch " + a.value().shape_string() + " x " +
                      b.value().shape_string());

  std::vector<size_t> out_shape = a_batched ? std::vector<size_t>{batch, M, N}
                                            : std::vector<size_t>{M, N};
  Tensor out(out_shape);
  for (size_t g = 0; g < batch; ++g) {
    const double* ap = a.value().data() + (a_batched ? g * M * K : 0);
    const double* bp = b.value().data() + (b_batched ? g * K * N : 0);
    gemm_nn(ap, bp, out.data() + g * M * N, M, K, N, false);
  }
  bool rg = a.node()->requires_grad || b.node()->requires_grad;
  Node* n = tape.new_node(std::move(out), rg, "matmul");
  if (rg) {
    Node* pa = a.node();
    Node* pb = b.node();
    n->backward = [pa, pb, batch, M, K, N, a_batched, b_batched](Node& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t g = 0; g < batch; ++g) {
          const double* gp = self.grad.data() + g * M * N;
          const double* bp = pb->value.data() + (b_batched ? g * K * N : 0);
          gemm_nt(gp, bp, pa->grad.data() + (a_batched ? g * M * K : 0), M, N, K, true);
        }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t g = 0; g < batch; ++g) {
          const double* ap = pa->value.data() + (a_batched ? g * M * K : 0);
          const double* gp = self.grad.data() + g * M * N;
          gemm_tn(ap, gp, pb->grad.data() + (b_batched ? g * K * N : 0), K, M, N, true);
        }
      }
    };
  }
  return Var(&tape, n);
}

Var transpose_last2(Var a) {
  Tape& tape = *a.tape();
  const auto& as = a.shape();
  if (as.size() != 2 && as.size() != 3)
    throw shape_error("transpose_last2: rank must be 2 or 3, got " + a.value().shape_string());
  size_t batch = as.size() == 3 ? as[0] : 1;
  size_t M = as[as.size() - 2], N = as[as.size() - 1];
  std::vector<size_t> out_shape = as;
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  Tensor out(out_shape);
  for (size_t g = 0; g < batch; ++g) {
    const double* src = a.value().data() + g * M * N;
    double* dst = out.data() + g * M * N;
    for (size_t m = 0; m < M; ++m)
      for (size_t ncol = 0; ncol < N; ++ncol) dst[ncol * M + m] = src[m * N + ncol];
  }
  Node* n = tape.new_node(std::move(out), a.node()->requires_grad, "transpose");
  if (n->requires_grad) {
    Node* pa = a.node();
    n->backward = [pa, batch, M, N](Node& self) {
      pa->ensure_grad();
      for (size_t g = 0; g < batch; ++g) {
        const double* gsrc = self.grad.data() + g * M * N;
        double* gdst = pa->grad.data() + g * M * N;
        for (size_t m = 0; m < M; ++m)
          for (size_t ncol = 0; ncol < N; ++ncol) gdst[m * N + ncol] += gsrc[ncol * M + m];
      }
    };
  }
  return Var(&tape, n);
}

Var reshape(Var a, std::vector<size_t> shape) {
  Tape& tape = *a.tape();
  if (Tensor::numel_from_shape(shape) != a.numel())
    throw shape_error("reshape: cannot view " + a.value().shape_string() + " as " +
                      Tensor::shape_string(shape));
  Tensor out(shape);
  std::memcpy(out.data(), a.value().data(), a.numel() * sizeof(double));
  Node* n = tape.new_node(std::move(out), a.node()->requires_grad, "reshape");
  if (n->requires_grad) {
    Node* pa = a.node();
    n->backward = [pa](Node& self) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i];
    };
  }
  return Var(&tape, n);
}

Var softmax_last(Var a) {
  Tape& tape = *a.tape();
  const size_t N = a.shape().back();
  const size_t rows = a.numel() / N;
  Tensor out(a.shape());
  for (size_t r = 0; r < rows; ++r) {
    const double* x = a.value().data() + r * N;
    double* y = out.data() + r * N;
    double mx = x[0];
    for (size_t i = 1; i < N; ++i) mx = std::max(mx, x[i]);
    double sum = 0.0;
    for (size_t i = 0; i < N; ++i) {
      y[i] = std::exp(x[i] - mx);
      sum += y[i];
    }
    for (size_t i = 0; i < N; ++i) y[i] /= sum;
  }
  Node* n = tape.new_node(std::move(out), a.node()->requires_grad, "softmax");
  if (n->requires_grad) {
    Node* pa = a.node();
    n->backward = [pa, rows, N](Node& self) {
      pa->ensure_grad();
      for (size_t r = 0; r < rows; ++r) {
        const double* s = self.value.data() + r * N;
        const double* g = self.grad.data() + r * N;
        double dot = 0.0;
        for (size_t i = 0; i < N; ++i) dot += g[i] * s[i];
        double* d = pa->grad.data() + r * N;
        for (size_t i = 0; i < N; ++i) d[i] += s[i] * (g[i] - dot);
      }
    };
  }
  return Var(&tape, n);
}

Var layernorm_last(Var x, Var gamma, Var beta, double eps) {
  Tape& tape = *x.tape();
  const size_t N = x.shape().back();
  if (gamma.numel() != N || beta.numel() != N)
    throw shape_error("layernorm: scale/offset must have " + std::to_string(N) + " elements");
  const size_t rows = x.numel() / N;
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  Tensor inv_std({rows});
  for (size_t r = 0; r < rows; ++r) {
    const double* xp = x.value().data() + r * N;
    double mu = 0.0;
    for (size_t i = 0; i < N; ++i) mu += xp[i];
    mu /= N;
    double var = 0.0;
    for (size_t i = 0; i < N; ++i) var += (xp[i] - mu) * (xp[i] - mu);
    var /= N;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (size_t i = 0; i < N; ++i) {
      const double xh = (xp[i] - mu) * is;
      xhat[r * N + i] = xh;
      out[r * N + i] = gamma.value()[i] * xh + beta.value()[i];
    }
  }
  bool rg = x.node()->requires_grad || gamma.node()->requires_grad || beta.node()->requires_grad;
  Node* n = tape.new_node(std::move(out), rg, "layernorm");
  if (rg) {
    Node* px = x.node();
    Node* pg = gamma.node();
    Node* pb = beta.node();
    auto xhat_p = std::make_shared<Tensor>(std::move(xhat));
    auto istd_p = std::make_shared<Tensor>(std::move(inv_std));
    n->backward = [px, pg, pb, xhat_p, istd_p, rows, N](Node& self) {
      const Tensor& xh = *xhat_p;
      if (pg->requires_grad) {
        pg->ensure_grad();
        for (size_t r = 0; r < rows; ++r)
          for (size_t i = 0; i < N; ++i)
            pg->grad[i] += self.grad[r * N + i] * xh[r * N + i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t r = 0; r < rows; ++r)
          for (size_t i = 0; i < N; ++i) pb->grad[i] += self.grad[r * N + i];
      }
      if (px->requires_grad) {
        px->ensure_grad();
        for (size_t r = 0; r < rows; ++r) {
          const double is = (*istd_p)[r];
          double mean_g = 0.0, mean_gx = 0.0;
          for (size_t i = 0; i < N; ++i) {
            const double gg = self.grad[r * N + i] * pg->value[i];
            mean_g += gg;
            mean_gx += gg * xh[r * N + i];
          }
          mean_g /= N;
          mean_gx /= N;
          for (size_t i = 0; i < N; ++i) {
            const double gg = self.grad[r * N + i] * pg->value[i];
            px->grad[r * N + i] += is * (gg - mean_g - xh[r * N + i] * mean_gx);
          }
        }
      }
    };
  }
  return Var(&tape, n);
}

Var relu(Var a) {
  return unary_op(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
  return unary_op(a, "sigmoid",
                  [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                  [](double, double y) { return y * (1.0 - y); });
}

Var gelu(Var a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return unary_op(
      a, "gelu",
      [](double x) {
        const double u = kC * (x + kA * x * x * x);
        return 0.5 * x * (1.0 + std::tanh(u));
      },
      [](double x, double) {
        const double u = kC * (x + kA * x * x * x);
        const double t = std::tanh(u);
        const double du = kC * (1.0 + 3.0 * kA * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

Var log_op(Var a) {
  return unary_op(a, "log", [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

Var exp_op(Var a) {
  return unary_op(a, "exp", [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

Var square(Var a) {
  return unary_op(a, "square", [](double x) { return x * x; },
                  [](double x, double) { return 2.0 * x; });
}

Var mean_all(Var a) {
  Tape& tape = *a.tape();
  double sum = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) sum += a.value()[i];
  const size_t n_elems = a.numel();
  Tensor out({1}, {sum / n_elems});
  Node* n = tape.new_node(std::move(out), a.node()->requires_grad, "mean_all");
  if (n->requires_grad) {
    Node* pa = a.node();
    n->backward = [pa, n_elems](Node& self) {
      pa->ensure_grad();
      const double g = self.grad[0] / n_elems;
      for (size_t i = 0; i < n_elems; ++i) pa->grad[i] += g;
    };
  }
  return Var(&tape, n);
}

Var mean_last(Var a) {
  Tape& tape = *a.tape();
  const size_t N = a.shape().back();
  const size_t rows = a.numel() / N;
  std::vector<size_t> out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Tensor out(out_shape);
  for (size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (size_t i = 0; i < N; ++i) s += a.value()[r * N + i];
    out[r] = s / N;
  }
  Node* n = tape.new_node(std::move(out), a.node()->requires_grad, "mean_last");
  if (n->requires_grad) {
    Node* pa = a.node();
    n->backward = [pa, rows, N](Node& self) {
      pa->ensure_grad();
      for (size_t r = 0; r < rows; ++r) {
        const double g = self.grad[r] / N;
        for (size_t i = 0; i < N; ++i) pa->grad[r * N + i] += g;
      }
    };
  }
  return Var(&tape, n);
}

Var gather_rows(Var a, std::vector<size_t> indices) {
  Tape& tape = *a.tape();
  if (a.shape().size() != 2)
    throw shape_error("gather_rows: expected rank-2 input, got " + a.value().shape_string());
  const size_t rows = a.shape()[0], D = a.shape()[1];
  for (size_t idx : indices)
    if (idx >= rows)
      throw shape_error("gather_rows: index " + std::to_string(idx) + " out of range " +
                        std::to_string(rows));
  Tensor out({indices.size(), D});
  for (size_t m = 0; m < indices.size(); ++m)
    std::memcpy(out.data() + m * D, a.value().data() + indices[m] * D, D * sizeof(double));
  Node* n = tape.new_node(std::move(out), a.node()->requires_grad, "gather_rows");
  if (n->requires_grad) {
    Node* pa = a.node();
    auto idx = std::make_shared<std::vector<size_t>>(std::move(indices));
    n->backward = [pa, idx, D](Node& self) {
      pa->ensure_grad();
      for (size_t m = 0; m < idx->size(); ++m) {
        double* dst = pa->grad.data() + (*idx)[m] * D;
        const double* src = self.grad.data() + m * D;
        for (size_t i = 0; i < D; ++i) dst[i] += src[i];
      }
    };
  }
  return Var(&tape, n);
}

Var slice_last(Var a, size_t start, size_t len) {
  Tape& tape = *a.tape();
  const size_t N = a.shape().back();
  if (start + len > N)
    throw shape_error("slice_last: [" + std::to_string(start) + "," +
                      std::to_string(start + len) + ") exceeds extent " + std::to_string(N));
  const size_t rows = a.numel() / N;
  std::vector<size_t> out_shape = a.shape();
  out_shape.back() = len;
  Tensor out(out_shape);
  for (size_t r = 0; r < rows; ++r)
    std::memcpy(out.data() + r * len, a.value().data() + r * N + start, len * sizeof(double));
  Node* n = tape.new_node(std::move(out), a.node()->requires_grad, "slice_last");
  if (n->requires_grad) {
    Node* pa = a.node();
    n->backward = [pa, rows, N, start, len](Node& self) {
      pa->ensure_grad();
      for (size_t r = 0; r < rows; ++r)
        for (size_t i = 0; i < len; ++i)
          pa->grad[r * N + start + i] += self.grad[r * len + i];
    };
  }
  return Var(&tape, n);
}

Var concat_last(const std::vector<Var>& parts) {
  if (parts.empty()) throw shape_error("concat_last: no inputs");
  Tape& tape = *parts[0].tape();
  std::vector<size_t> lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  size_t total = 0;
  bool rg = false;
  for (const Var& p : parts) {
    std::vector<size_t> pl(p.shape().begin(), p.shape().end() - 1);
    if (pl != lead)
      throw shape_error("concat_last: leading shape mismatch");
    total += p.shape().back();
    rg = rg || p.node()->requires_grad;
  }
  std::vector<size_t> out_shape = lead;
  out_shape.push_back(total);
  const size_t rows = Tensor::numel_from_shape(lead);
  Tensor out(out_shape);
  size_t off = 0;
  for (const Var& p : parts) {
    const size_t len = p.shape().back();
    for (size_t r = 0; r < rows; ++r)
      std::memcpy(out.data() + r * total + off, p.value().data() + r * len,
                  len * sizeof(double));
    off += len;
  }
  Node* n = tape.new_node(std::move(out), rg, "concat_last");
  if (rg) {
    std::vector<Node*> pnodes;
    std::vector<size_t> lens;
    for (const Var& p : parts) {
      pnodes.push_back(p.node());
      lens.push_back(p.shape().back());
    }
    n->backward = [pnodes, lens, rows, total](Node& self) {
      size_t off = 0;
      for (size_t pi = 0; pi < pnodes.size(); ++pi) {
        Node* p = pnodes[pi];
        const size_t len = lens[pi];
        if (p->requires_grad) {
          p->ensure_grad();
          for (size_t r = 0; r < rows; ++r)
            for (size_t i = 0; i < len; ++i)
              p->grad[r * len + i] += self.grad[r * total + off + i];
        }
        off += len;
      }
    };
  }
  return Var(&tape, n);
}

Var cyclic_shift2d(Var a, long dy, long dx) {
  Tape& tape = *a.tape();
  if (a.shape().size() != 3)
    throw shape_error("cyclic_shift2d: expected [H,W,C], got " + a.value().shape_string());
  const long H = (long)a.shape()[0], W = (long)a.shape()[1];
  const size_t C = a.shape()[2];
  auto wrap = [](long i, long n) { return ((i % n) + n) % n; };
  Tensor out(a.shape());
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      const long sy = wrap(y - dy, H), sx = wrap(x - dx, W);
      std::memcpy(out.data() + ((size_t)y * W + x) * C,
                  a.value().data() + ((size_t)sy * W + sx) * C, C * sizeof(double));
    }
  Node* n = tape.new_node(std::move(out), a.node()->requires_grad, "cyclic_shift2d");
  if (n->requires_grad) {
    Node* pa = a.node();
    n->backward = [pa, H, W, C, dy, dx, wrap](Node& self) {
      pa->ensure_grad();
      for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x) {
          const long sy = wrap(y - dy, H), sx = wrap(x - dx, W);
          double* dst = pa->grad.data() + ((size_t)sy * W + sx) * C;
          const double* src = self.grad.data() + ((size_t)y * W + x) * C;
          for (size_t c = 0; c < C; ++c) dst[c] += src[c];
        }
    };
  }
  return Var(&tape, n);
}

Var huber(Var pred, Var target, double delta) {
  require_same_shape(pred, target, "huber");
  if (delta <= 0.0) throw usage_error("huber: delta must be > 0, got " + std::to_string(delta));
  Tape& tape = *pred.tape();
  Tensor out(pred.shape());
  for (size_t i = 0; i < out.numel(); ++i) {
    const double e = pred.value()[i] - target.value()[i];
    out[i] = std::abs(e) < delta ? e * e / (2.0 * delta) : std::abs(e) - delta / 2.0;
  }
  bool rg = pred.node()->requires_grad || target.node()->requires_grad;
  Node* n = tape.new_node(std::move(out), rg, "huber");
  if (rg) {
    Node* pp = pred.node();
    Node* pt = target.node();
    n->backward = [pp, pt, delta](Node& self) {
      for (size_t i = 0; i < self.grad.numel(); ++i) {
        const double e = pp->value[i] - pt->value[i];
        // dL/de, clipped to [-1, 1] by the linear branch
        const double de = std::abs(e) < delta ? e / delta : (e > 0.0 ? 1.0 : -1.0);
        const double g = self.grad[i] * de;
        if (pp->requires_grad) {
          pp->ensure_grad();
          pp->grad[i] += g;
        }
        if (pt->requires_grad) {
          pt->ensure_grad();
          pt->grad[i] -= g;
        }
      }
    };
  }
  return Var(&tape, n);
}

Var conv2d(Var x, Var w, Var b, size_t stride, size_t pad) {
  Tape& tape = *x.tape();
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4)
    throw shape_error("conv2d: expected x [B,C,H,W] and w [O,C,kh,kw]");
  const size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const size_t O = ws[0], kh = ws[2], kw = ws[3];
  if (ws[1] != C) throw shape_error("conv2d: channel mismatch");
  if (b.numel() != O) throw shape_error("conv2d: bias size mismatch");
  const size_t Ho = (H + 2 * pad - kh) / stride + 1;
  const size_t Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor out({B, O, Ho, Wo});
  auto xin = [&](size_t bi, size_t c, long y, long xx) -> double {
    if (y < 0 || xx < 0 || y >= (long)H || xx >= (long)W) return 0.0;
    return x.value()[((bi * C + c) * H + y) * W + xx];
  };
  for (size_t bi = 0; bi < B; ++bi)
    for (size_t o = 0; o < O; ++o)
      for (size_t oy = 0; oy < Ho; ++oy)
        for (size_t ox = 0; ox < Wo; ++ox) {
          double acc = b.value()[o];
          for (size_t c = 0; c < C; ++c)
            for (size_t ky = 0; ky < kh; ++ky)
              for (size_t kx = 0; kx < kw; ++kx)
                acc += w.value()[((o * C + c) * kh + ky) * kw + kx] *
                       xin(bi, c, (long)(oy * stride + ky) - (long)pad,
                           (long)(ox * stride + kx) - (long)pad);
          out[((bi * O + o) * Ho + oy) * Wo + ox] = acc;
        }
  bool rg = x.node()->requires_grad || w.node()->requires_grad || b.node()->requires_grad;
  Node* n = tape.new_node(std::move(out), rg, "conv2d");
  if (rg) {
    Node* px = x.node();
    Node* pw = w.node();
    Node* pb = b.node();
    n->backward = [px, pw, pb, B, C, H, W, O, kh, kw, Ho, Wo, stride, pad](Node& self) {
      if (px->requires_grad) px->ensure_grad();
      if (pw->requires_grad) pw->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (size_t bi = 0; bi < B; ++bi)
        for (size_t o = 0; o < O; ++o)
          for (size_t oy = 0; oy < Ho; ++oy)
            for (size_t ox = 0; ox < Wo; ++ox) {
              const double g = self.grad[((bi * O + o) * Ho + oy) * Wo + ox];
              if (g == 0.0) continue;
              if (pb->requires_grad) pb->grad[o] += g;
              for (size_t c = 0; c < C; ++c)
                for (size_t ky = 0; ky < kh; ++ky)
                  for (size_t kx = 0; kx < kw; ++kx) {
                    const long y = (long)(oy * stride + ky) - (long)pad;
                    const long xx = (long)(ox * stride + kx) - (long)pad;
                    if (y < 0 || xx < 0 || y >= (long)H || xx >= (long)W) continue;
                    const size_t xi = ((bi * C + c) * H + y) * W + xx;
                    const size_t wi = ((o * C + c) * kh + ky) * kw + kx;
                    if (pw->requires_grad) pw->grad[wi] += g * px->value[xi];
                    if (px->requires_grad) px->grad[xi] += g * pw->value[wi];
                  }
            }
    };
  }
  return Var(&tape, n);
}

GradCheckReport grad_check(const std::function<Var(Tape&, std::vector<Var>&)>& f,
                           const std::vector<Tensor>& leaf_values, double eps, double tol) {
  GradCheckReport report;
  // analytic pass
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(leaf_values.size());
  for (const Tensor& t : leaf_values) leaves.push_back(tape.leaf(t, true));
  Var root = f(tape, leaves);
  if (root.numel() != 1) throw shape_error("grad_check: f must be scalar-valued");
  tape.backward(root);

  auto eval_at = [&](size_t li, size_t ei, double delta) -> double {
    Tape t2;
    std::vector<Var> l2;
    l2.reserve(leaf_values.size());
    for (size_t j = 0; j < leaf_values.size(); ++j) {
      Tensor v = leaf_values[j];
      if (j == li) v[ei] += delta;
      l2.push_back(t2.leaf(std::move(v), false));
    }
    return f(t2, l2).value()[0];
  };

  for (size_t li = 0; li < leaves.size(); ++li) {
    GradCheckLeafReport lr;
    lr.leaf_index = li;
    const Tensor& analytic = leaves[li].grad();
    for (size_t ei = 0; ei < leaf_values[li].numel(); ++ei) {
      const double a = analytic.numel() ? analytic[ei] : 0.0;
      const double fp = eval_at(li, ei, eps);
      const double fm = eval_at(li, ei, -eps);
      const double fd = (fp - fm) / (2.0 * eps);
      if (!std::isfinite(a) || !std::isfinite(fd)) {
        lr.finite = false;
        lr.worst_element = ei;
        break;
      }
      // floor keeps cancellation noise on near-zero gradients from dominating:
      // below 1e-6 the comparison is effectively absolute
      const double denom = std::max({std::abs(a), std::abs(fd), 1e-6});
      const double rel = std::abs(a - fd) / denom;
      if (rel > lr.max_rel_err) {
        lr.max_rel_err = rel;
        lr.worst_element = ei;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, lr.max_rel_err);
    report.all_finite = report.all_finite && lr.finite;
    report.leaves.push_back(lr);
  }
  (void)tol;
  return report;
}

}  // namespace geoformer::diff
