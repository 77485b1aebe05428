#include "sivi/autodiff.hpp"

#include "sivi/special.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace sivi::ad {

const char* to_string(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Constant: return "constant";
    case OpKind::Add: return "add";
    case OpKind::Subtract: return "subtract";
    case OpKind::Multiply: return "multiply";
    case OpKind::Divide: return "divide";
    case OpKind::MatMul: return "matmul";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Relu: return "relu";
    case OpKind::Softplus: return "softplus";
    case OpKind::Sum: return "sum";
    case OpKind::LogGamma: return "lgamma";
    case OpKind::Cholesky: return "cholesky";
    case OpKind::TriSolve: return "tri_solve";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Negate: return "negate";
    case OpKind::Scale: return "scale";
    case OpKind::AddConstant: return "add_constant";
    case OpKind::Square: return "square";
    case OpKind::ClampMax: return "clamp_max";
    case OpKind::Transpose: return "transpose";
    case OpKind::Block: return "block";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::Broadcast: return "broadcast";
    case OpKind::RowSum: return "row_sum";
    case OpKind::Diagonal: return "diagonal";
    case OpKind::LogSumExpRows: return "logsumexp_rows";
    case OpKind::ColumnTransform: return "column_transform";
    case OpKind::CovMatrix: return "cov_matrix";
    case OpKind::VecchiaLogDensity: return "vecchia_log_density";
    case OpKind::InvGammaQuantile: return "invgamma_quantile";
  }
  return "unknown";
}

const Tensor& Var::value() const { return tape_->value(id_); }

double Var::item() const {
  const Tensor& v = value();
  if (v.size() != 1) throw ShapeError("item() on a non-scalar tensor");
  return v(0, 0);
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{OpKind::Leaf, {}, std::move(value), {}, {}, true});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{OpKind::Constant, {}, std::move(value), {}, {}, false});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(OpKind kind, std::vector<Var> inputs, ForwardFn forward,
                 BackwardFn backward) {
  Node node;
  node.kind = kind;
  std::vector<const Tensor*> in_values;
  in_values.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw std::logic_error("input from another tape");
    node.inputs.push_back(v.id());
    in_values.push_back(&nodes_[v.id()].value);
    node.requires_grad = node.requires_grad || nodes_[v.id()].requires_grad;
  }
  node.value = forward(in_values);
  node.forward = std::move(forward);
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

int Tape::replay_divergence() const {
  std::vector<Tensor> replayed(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& node = nodes_[i];
    if (!node.forward) {
      replayed[i] = node.value;
      continue;
    }
    std::vector<const Tensor*> in_values;
    for (int id : node.inputs) in_values.push_back(&replayed[id]);
    replayed[i] = node.forward(in_values);
    const Tensor& a = replayed[i];
    const Tensor& b = node.value;
    if (a.rows() != b.rows() || a.cols() != b.cols() ||
        std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) != 0)
      return static_cast<int>(i);
  }
  return -1;
}

Tensor GradientMap::operator[](const Var& leaf) const {
  auto it = grads_.find(leaf.id());
  if (it != grads_.end()) return it->second;
  const Tensor& v = leaf.value();
  return Tensor::Zero(v.rows(), v.cols());
}

GradientMap backward(const Tape& tape, Var seed, bool verify_replay) {
  if (seed.value().size() != 1)
    throw ShapeError("backward seed must be a scalar");
  if (verify_replay) {
    int bad = tape.replay_divergence();
    if (bad >= 0)
      throw ReplayDivergence("tape replay diverged at node " +
                             std::to_string(bad) + " (" +
                             to_string(tape.kind(bad)) + ")");
  }
  const auto& nodes = tape.nodes_;
  std::vector<Tensor> adj(nodes.size());
  adj[seed.id()] = Tensor::Ones(1, 1);
  for (int i = seed.id(); i >= 0; --i) {
    const auto& node = nodes[i];
    if (adj[i].size() == 0 || !node.requires_grad || !node.backward) continue;
    std::vector<const Tensor*> in_values;
    std::vector<Tensor*> in_adj;
    for (int id : node.inputs) {
      in_values.push_back(&nodes[id].value);
      if (nodes[id].requires_grad) {
        if (adj[id].size() == 0)
          adj[id] = Tensor::Zero(nodes[id].value.rows(), nodes[id].value.cols());
        in_adj.push_back(&adj[id]);
      } else {
        in_adj.push_back(nullptr);
      }
    }
    node.backward(adj[i], node.value, in_values, in_adj);
  }
  std::unordered_map<int, Tensor> grads;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (nodes[i].kind == OpKind::Leaf && adj[i].size() != 0)
      grads.emplace(static_cast<int>(i), std::move(adj[i]));
  return GradientMap(&tape, std::move(grads));
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    std::ostringstream msg;
    msg << op << ": shape mismatch (" << a.rows() << "x" << a.cols() << " vs "
        << b.rows() << "x" << b.cols() << ")";
    throw ShapeError(msg.str());
  }
}

template <typename F, typename D>
Var unary(OpKind kind, Var x, F f, D dfdx) {
  // dfdx(x, y) returns the elementwise derivative given input and output.
  return x.tape().record(
      kind, {x},
      [f](const std::vector<const Tensor*>& in) -> Tensor {
        return in[0]->unaryExpr(f);
      },
      [dfdx](const Tensor& g, const Tensor& y,
             const std::vector<const Tensor*>& in,
             const std::vector<Tensor*>& ga) {
        if (!ga[0]) return;
        const Tensor& x = *in[0];
        for (Index i = 0; i < x.size(); ++i)
          ga[0]->data()[i] += g.data()[i] * dfdx(x.data()[i], y.data()[i]);
      });
}

double softplus_value(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

bool try_llt(const Eigen::MatrixXd& a, Eigen::MatrixXd& lower, Index& pivot) {
  Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() == Eigen::Success) {
    lower = llt.matrixL();
    return true;
  }
  // Locate the failing pivot with an explicit left-looking factorization.
  const Index n = a.rows();
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n, n);
  for (Index j = 0; j < n; ++j) {
    double d = a(j, j) - l.row(j).head(j).squaredNorm();
    if (!(d > 0.0)) {
      pivot = j;
      return false;
    }
    l(j, j) = std::sqrt(d);
    for (Index i = j + 1; i < n; ++i)
      l(i, j) = (a(i, j) - l.row(i).head(j).dot(l.row(j).head(j))) / l(j, j);
  }
  pivot = n - 1;
  return false;
}

}  // namespace

Eigen::MatrixXd cholesky_factor(const Eigen::MatrixXd& a) {
  if (a.rows() != a.cols()) throw ShapeError("cholesky: matrix not square");
  Eigen::MatrixXd sym = 0.5 * (a + a.transpose());
  Eigen::MatrixXd lower;
  Index pivot = 0;
  if (try_llt(sym, lower, pivot)) return lower;
  const double jitter = 1e-8 * sym.diagonal().mean();
  if (jitter > 0.0) {
    sym.diagonal().array() += jitter;
    if (try_llt(sym, lower, pivot)) return lower;
  }
  throw NotPositiveDefinite(pivot, "matrix not positive definite (pivot " +
                                       std::to_string(pivot) + ")");
}

Var operator+(Var a, Var b) {
  require_same_shape(a, b, "add");
  return a.tape().record(
      OpKind::Add, {a, b},
      [](const auto& in) -> Tensor { return *in[0] + *in[1]; },
      [](const Tensor& g, const Tensor&, const auto&, const auto& ga) {
        if (ga[0]) *ga[0] += g;
        if (ga[1]) *ga[1] += g;
      });
}

Var operator-(Var a, Var b) {
  require_same_shape(a, b, "subtract");
  return a.tape().record(
      OpKind::Subtract, {a, b},
      [](const auto& in) -> Tensor { return *in[0] - *in[1]; },
      [](const Tensor& g, const Tensor&, const auto&, const auto& ga) {
        if (ga[0]) *ga[0] += g;
        if (ga[1]) *ga[1] -= g;
      });
}

Var operator-(Var a) {
  return a.tape().record(
      OpKind::Negate, {a}, [](const auto& in) -> Tensor { return -*in[0]; },
      [](const Tensor& g, const Tensor&, const auto&, const auto& ga) {
        if (ga[0]) *ga[0] -= g;
      });
}

Var cwise_mul(Var a, Var b) {
  require_same_shape(a, b, "multiply");
  return a.tape().record(
      OpKind::Multiply, {a, b},
      [](const auto& in) -> Tensor { return in[0]->cwiseProduct(*in[1]); },
      [](const Tensor& g, const Tensor&, const auto& in, const auto& ga) {
        if (ga[0]) *ga[0] += g.cwiseProduct(*in[1]);
        if (ga[1]) *ga[1] += g.cwiseProduct(*in[0]);
      });
}

Var cwise_div(Var a, Var b) {
  require_same_shape(a, b, "divide");
  return a.tape().record(
      OpKind::Divide, {a, b},
      [](const auto& in) -> Tensor { return in[0]->cwiseQuotient(*in[1]); },
      [](const Tensor& g, const Tensor& y, const auto& in, const auto& ga) {
        if (ga[0]) *ga[0] += g.cwiseQuotient(*in[1]);
        if (ga[1]) *ga[1] -= g.cwiseProduct(y).cwiseQuotient(*in[1]);
      });
}

Var scale(Var x, double s) {
  return x.tape().record(
      OpKind::Scale, {x}, [s](const auto& in) -> Tensor { return s * *in[0]; },
      [s](const Tensor& g, const Tensor&, const auto&, const auto& ga) {
        if (ga[0]) *ga[0] += s * g;
      });
}

Var add_constant(Var x, double c) {
  return x.tape().record(
      OpKind::AddConstant, {x},
      [c](const auto& in) -> Tensor { return (in[0]->array() + c).matrix(); },
      [](const Tensor& g, const Tensor&, const auto&, const auto& ga) {
        if (ga[0]) *ga[0] += g;
      });
}

Var operator*(double s, Var x) { return scale(x, s); }
Var operator+(Var x, double c) { return add_constant(x, c); }
Var operator-(Var x, double c) { return add_constant(x, -c); }

Var exp(Var x) {
  return unary(
      OpKind::Exp, x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Var log(Var x) {
  return unary(
      OpKind::Log, x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Var sqrt(Var x) {
  return unary(
      OpKind::Sqrt, x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}

Var square(Var x) {
  return unary(
      OpKind::Square, x, [](double v) { return v * v; },
      [](double v, double) { return 2.0 * v; });
}

Var relu(Var x) {
  return unary(
      OpKind::Relu, x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var softplus(Var x) {
  return unary(
      OpKind::Softplus, x, [](double v) { return softplus_value(v); },
      [](double v, double) { return sigmoid(v); });
}

Var lgamma(Var x) {
  return unary(
      OpKind::LogGamma, x, [](double v) { return special::log_gamma(v); },
      [](double v, double) { return special::digamma(v); });
}

Var clamp_max(Var x, double cap) {
  return unary(
      OpKind::ClampMax, x, [cap](double v) { return v > cap ? cap : v; },
      [cap](double v, double) { return v > cap ? 0.0 : 1.0; });
}

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  return a.tape().record(
      OpKind::MatMul, {a, b},
      [](const auto& in) -> Tensor { return (*in[0]) * (*in[1]); },
      [](const Tensor& g, const Tensor&, const auto& in, const auto& ga) {
        if (ga[0]) ga[0]->noalias() += g * in[1]->transpose();
        if (ga[1]) ga[1]->noalias() += in[0]->transpose() * g;
      });
}

Var transpose(Var x) {
  return x.tape().record(
      OpKind::Transpose, {x},
      [](const auto& in) -> Tensor { return in[0]->transpose(); },
      [](const Tensor& g, const Tensor&, const auto&, const auto& ga) {
        if (ga[0]) *ga[0] += g.transpose();
      });
}

Var sum(Var x) {
  return x.tape().record(
      OpKind::Sum, {x},
      [](const auto& in) -> Tensor { return Tensor::Constant(1, 1, in[0]->sum()); },
      [](const Tensor& g, const Tensor&, const auto&, const auto& ga) {
        if (ga[0]) ga[0]->array() += g(0, 0);
      });
}

Var row_sum(Var x) {
  return x.tape().record(
      OpKind::RowSum, {x},
      [](const auto& in) -> Tensor { return in[0]->rowwise().sum(); },
      [](const Tensor& g, const Tensor&, const auto&, const auto& ga) {
        if (ga[0]) ga[0]->colwise() += g.col(0);
      });
}

Var diagonal(Var x) {
  if (x.rows() != x.cols()) throw ShapeError("diagonal: matrix not square");
  return x.tape().record(
      OpKind::Diagonal, {x},
      [](const auto& in) -> Tensor { return in[0]->diagonal(); },
      [](const Tensor& g, const Tensor&, const auto&, const auto& ga) {
        if (ga[0]) ga[0]->diagonal() += g.col(0);
      });
}

Var block(Var x, Index r, Index c, Index nr, Index nc) {
  if (r < 0 || c < 0 || nr < 0 || nc < 0 || r + nr > x.rows() ||
      c + nc > x.cols())
    throw ShapeError("block: out of range");
  return x.tape().record(
      OpKind::Block, {x},
      [=](const auto& in) -> Tensor { return in[0]->block(r, c, nr, nc); },
      [=](const Tensor& g, const Tensor&, const auto&, const auto& ga) {
        if (ga[0]) ga[0]->block(r, c, nr, nc) += g;
      });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  for (const Var& p : parts)
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
  return parts.front().tape().record(
      OpKind::ConcatCols, parts,
      [rows](const auto& in) -> Tensor {
        Index total = 0;
        for (const Tensor* t : in) total += t->cols();
        Tensor out(rows, total);
        Index c = 0;
        for (const Tensor* t : in) {
          out.middleCols(c, t->cols()) = *t;
          c += t->cols();
        }
        return out;
      },
      [](const Tensor& g, const Tensor&, const auto& in, const auto& ga) {
        Index c = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
          if (ga[k]) *ga[k] += g.middleCols(c, in[k]->cols());
          c += in[k]->cols();
        }
      });
}

Var broadcast_to(Var x, Index rows, Index cols) {
  const Index r = x.rows(), c = x.cols();
  const bool ok = (r == 1 || r == rows) && (c == 1 || c == cols);
  if (!ok) throw ShapeError("broadcast_to: incompatible shape");
  return x.tape().record(
      OpKind::Broadcast, {x},
      [rows, cols](const auto& in) -> Tensor {
        const Tensor& v = *in[0];
        return v.replicate(rows / v.rows(), cols / v.cols());
      },
      [r, c](const Tensor& g, const Tensor&, const auto&, const auto& ga) {
        if (!ga[0]) return;
        if (r == g.rows() && c == g.cols()) {
          *ga[0] += g;
        } else if (r == 1 && c == 1) {
          (*ga[0])(0, 0) += g.sum();
        } else if (r == 1) {
          *ga[0] += g.colwise().sum();
        } else {
          *ga[0] += g.rowwise().sum();
        }
      });
}

Var logsumexp_rows(Var x) {
  return x.tape().record(
      OpKind::LogSumExpRows, {x},
      [](const auto& in) -> Tensor {
        const Tensor& v = *in[0];
        Tensor out(v.rows(), 1);
        for (Index i = 0; i < v.rows(); ++i) {
          const double m = v.row(i).maxCoeff();
          out(i, 0) = m + std::log((v.row(i).array() - m).exp().sum());
        }
        return out;
      },
      [](const Tensor& g, const Tensor& y, const auto& in, const auto& ga) {
        if (!ga[0]) return;
        const Tensor& v = *in[0];
        for (Index i = 0; i < v.rows(); ++i)
          ga[0]->row(i).array() += g(i, 0) * (v.row(i).array() - y(i, 0)).exp();
      });
}

Var cholesky(Var a) {
  if (a.rows() != a.cols()) throw ShapeError("cholesky: matrix not square");
  return a.tape().record(
      OpKind::Cholesky, {a},
      [](const auto& in) -> Tensor { return cholesky_factor(*in[0]); },
      [](const Tensor& g, const Tensor& l, const auto&, const auto& ga) {
        if (!ga[0]) return;
        // P = Phi(L^T Lbar), G = L^{-T} P L^{-1}, Abar = sym(G), where Phi
        // keeps the lower triangle and halves the diagonal.
        Eigen::MatrixXd p = l.transpose() * g.triangularView<Eigen::Lower>();
        p = p.triangularView<Eigen::Lower>();
        p.diagonal() *= 0.5;
        const auto lt = l.triangularView<Eigen::Lower>();
        lt.transpose().solveInPlace(p);
        Eigen::MatrixXd pt = p.transpose();
        lt.transpose().solveInPlace(pt);
        *ga[0] += 0.5 * (pt + pt.transpose());
      });
}

Var tri_solve(Var lower, Var b) {
  if (lower.rows() != lower.cols() || lower.cols() != b.rows())
    throw ShapeError("tri_solve: shape mismatch");
  return lower.tape().record(
      OpKind::TriSolve, {lower, b},
      [](const auto& in) -> Tensor {
        return in[0]->template triangularView<Eigen::Lower>().solve(*in[1]);
      },
      [](const Tensor& g, const Tensor& x, const auto& in, const auto& ga) {
        Tensor bbar = in[0]->template triangularView<Eigen::Lower>()
                          .transpose()
                          .solve(g);
        if (ga[1]) *ga[1] += bbar;
        if (ga[0]) {
          Tensor lbar = -bbar * x.transpose();
          *ga[0] += Tensor(lbar.triangularView<Eigen::Lower>());
        }
      });
}

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
               AdamMoments& moments, long step_index, const AdamOptions& opt) {
  if (step_index < 1) throw std::invalid_argument("adam_step: step_index < 1");
  if (grads.size() != params.size())
    throw ShapeError("adam_step: parameter/gradient count mismatch");
  if (moments.first.empty()) {
    for (const Tensor& p : params) {
      moments.first.push_back(Tensor::Zero(p.rows(), p.cols()));
      moments.second.push_back(Tensor::Zero(p.rows(), p.cols()));
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].rows() != params[k].rows() || grads[k].cols() != params[k].cols() ||
        moments.first[k].rows() != params[k].rows() ||
        moments.first[k].cols() != params[k].cols())
      throw ShapeError("adam_step: shape mismatch");
    if (!grads[k].allFinite())
      throw Diverged(step_index, "diverged at iteration " +
                                     std::to_string(step_index) +
                                     ": non-finite gradient");
  }
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step_index));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step_index));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto m = moments.first[k].array();
    auto v = moments.second[k].array();
    const auto g = grads[k].array();
    m = opt.beta1 * m + (1.0 - opt.beta1) * g;
    v = opt.beta2 * v + (1.0 - opt.beta2) * g.square();
    params[k].array() +=
        opt.learning_rate * (m / c1) / ((v / c2).sqrt() + opt.epsilon);
  }
}

void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
              long step_index, double learning_rate) {
  if (grads.size() != params.size())
    throw ShapeError("sgd_step: parameter/gradient count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!grads[k].allFinite())
      throw Diverged(step_index, "diverged at iteration " +
                                     std::to_string(step_index) +
                                     ": non-finite gradient");
    params[k] += learning_rate * grads[k];
  }
}

}  // namespace sivi::ad
