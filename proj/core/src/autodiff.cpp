#include "roam/autodiff.hpp"

#include "roam/otroute.hpp"

#include <cmath>

namespace roam::ad {

const Matrix& Var::value() const { return tape->value(*this); }

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), true, nullptr});
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), false, nullptr});
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
  bool needs = false;
  for (const auto& p : parents) needs = needs || requires_grad(p);
  nodes_.push_back(Node{std::move(value), Matrix(), needs, needs ? std::move(backward) : nullptr});
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::record(Matrix value, const std::vector<Var>& parents, Backward backward) {
  bool needs = false;
  for (const auto& p : parents) needs = needs || requires_grad(p);
  nodes_.push_back(Node{std::move(value), Matrix(), needs, needs ? std::move(backward) : nullptr});
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Matrix Tape::grad(const Var& v) const {
  const auto& node = nodes_[static_cast<std::size_t>(v.id)];
  if (node.grad.size() == 0) return Matrix::Zero(node.value.rows(), node.value.cols());
  return node.grad;
}

void Tape::accumulate(const Var& v, const Matrix& delta) {
  auto& node = nodes_[static_cast<std::size_t>(v.id)];
  if (!node.requires_grad) return;
  if (node.grad.size() == 0) {
    node.grad = delta;
  } else {
    node.grad += delta;
  }
}

void Tape::backward(const Var& output, double seed) {
  if (value(output).size() != 1) throw InvalidArgument("backward needs a scalar output");
  for (auto& node : nodes_) node.grad.resize(0, 0);
  accumulate(output, Matrix::Constant(1, 1, seed));
  for (int id = output.id; id >= 0; --id) {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.backward || node.grad.size() == 0) continue;
    const Matrix out_grad = node.grad;
    node.backward(*this, out_grad);
  }
}

namespace {

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InvalidArgument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw InvalidArgument("matmul: inner dimensions differ");
  return a.tape->record(a.value() * b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g * b.value().transpose());
    t.accumulate(b, a.value().transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) throw InvalidArgument("matmul_nt: inner dimensions differ");
  return a.tape->record(a.value() * b.value().transpose(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g * b.value());
    t.accumulate(b, g.transpose() * a.value());
  });
}

Var matmul_tn(Var a, Var b) {
  if (a.rows() != b.rows()) throw InvalidArgument("matmul_tn: inner dimensions differ");
  return a.tape->record(a.value().transpose() * b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, b.value() * g.transpose());
    t.accumulate(b, a.value() * g);
  });
}

Var transpose(Var a) {
  return a.tape->record(a.value().transpose(), {a},
                        [a](Tape& t, const Matrix& g) { t.accumulate(a, g.transpose()); });
}

Var add(Var a, Var b) {
  check_same_shape(a, b, "add");
  return a.tape->record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  check_same_shape(a, b, "sub");
  return a.tape->record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var hadamard(Var a, Var b) {
  check_same_shape(a, b, "hadamard");
  return a.tape->record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(b.value()));
    t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw InvalidArgument("add_row: bias shape mismatch");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return a.tape->record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(row, g.colwise().sum());
  });
}

Var scale(Var a, double s) {
  return a.tape->record(a.value() * s, {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate(a, g * s); });
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var add_scalar(Var a, double s) {
  return a.tape->record((a.value().array() + s).matrix(), {a},
                        [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

Var mul_const(Var a, const Matrix& factor) {
  if (factor.rows() != a.rows() || factor.cols() != a.cols()) {
    throw InvalidArgument("mul_const: shape mismatch");
  }
  return a.tape->record(a.value().cwiseProduct(factor), {a},
                        [a, factor](Tape& t, const Matrix& g) { t.accumulate(a, g.cwiseProduct(factor)); });
}

Var scale_rows(Var a, const Vector& factor) {
  if (factor.size() != a.rows()) throw InvalidArgument("scale_rows: size mismatch");
  return a.tape->record(factor.asDiagonal() * a.value(), {a}, [a, factor](Tape& t, const Matrix& g) {
    t.accumulate(a, factor.asDiagonal() * g);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols: nothing to concatenate");
  const auto rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw InvalidArgument("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return parts.front().tape->record(std::move(out), parts, [parts](Tape& t, const Matrix& g) {
    Eigen::Index offset = 0;
    for (const auto& p : parts) {
      t.accumulate(p, g.middleCols(offset, p.cols()));
      offset += p.cols();
    }
  });
}

Var detach(Var a) { return a.tape->constant(a.value()); }

Var relu(Var a) {
  const Matrix& x = a.value();
  Matrix out = x.cwiseMax(0.0);
  auto& log = a.tape->branch_log();
  for (Eigen::Index i = 0; i < x.size(); ++i) log.push_back(x.data()[i] > 0.0 ? 1 : 0);
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, (a.value().array() > 0.0).select(g, 0.0));
  });
}

Var tanh(Var a) {
  Matrix out = a.value().array().tanh();
  Tape* tape = a.tape;
  const int self = static_cast<int>(tape->size());
  return tape->record(std::move(out), {a}, [a, self](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(Var{&t, self});
    t.accumulate(a, g.cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

Var sigmoid(Var a) {
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  Tape* tape = a.tape;
  const int self = static_cast<int>(tape->size());
  return tape->record(std::move(out), {a}, [a, self](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(Var{&t, self});
    t.accumulate(a, g.cwiseProduct((y.array() * (1.0 - y.array())).matrix()));
  });
}

Var exp(Var a) {
  Matrix out = a.value().array().exp();
  Tape* tape = a.tape;
  const int self = static_cast<int>(tape->size());
  return tape->record(std::move(out), {a}, [a, self](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(t.value(Var{&t, self})));
  });
}

Var softmax_rows(Var a) {
  Matrix out = a.value();
  for (Eigen::Index m = 0; m < out.rows(); ++m) {
    const double peak = out.row(m).maxCoeff();
    out.row(m) = (out.row(m).array() - peak).exp();
    out.row(m) /= out.row(m).sum();
  }
  Tape* tape = a.tape;
  const int self = static_cast<int>(tape->size());
  return tape->record(std::move(out), {a}, [a, self](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(Var{&t, self});
    const Vector inner = y.cwiseProduct(g).rowwise().sum();
    Matrix da = y.cwiseProduct(g);
    da -= inner.asDiagonal() * y;
    t.accumulate(a, da);
  });
}

Var row_normalize(Var a) {
  const Matrix& x = a.value();
  Matrix out = x;
  Vector norms(x.rows());
  for (Eigen::Index m = 0; m < x.rows(); ++m) {
    norms(m) = x.row(m).norm();
    if (norms(m) > 0.0) {
      out.row(m) /= norms(m);
    } else {
      out.row(m).setZero();
    }
  }
  Tape* tape = a.tape;
  const int self = static_cast<int>(tape->size());
  return tape->record(std::move(out), {a}, [a, self, norms](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(Var{&t, self});
    Matrix da = Matrix::Zero(y.rows(), y.cols());
    for (Eigen::Index m = 0; m < y.rows(); ++m) {
      if (!(norms(m) > 0.0)) continue;
      const double proj = y.row(m).dot(g.row(m));
      da.row(m) = (g.row(m) - proj * y.row(m)) / norms(m);
    }
    t.accumulate(a, da);
  });
}

Var cross_entropy(Var logits, int label) {
  if (logits.rows() != 1) throw InvalidArgument("cross_entropy expects a 1 x C row");
  if (label < 0 || label >= logits.cols()) throw InvalidArgument("label out of range");
  const RowVector z = logits.value().row(0);
  const double peak = z.maxCoeff();
  const double lse = peak + std::log((z.array() - peak).exp().sum());
  Matrix out(1, 1);
  out(0, 0) = lse - z(label);
  return logits.tape->record(std::move(out), {logits}, [logits, label, lse](Tape& t, const Matrix& g) {
    Matrix probs = (logits.value().array() - lse).exp();
    probs(0, label) -= 1.0;
    t.accumulate(logits, probs * g(0, 0));
  });
}

Var segment_mean(Var values, const tokenizer::RegionBinning& binning) {
  Matrix out = tokenizer::segment_mean(values.value(), binning);
  const tokenizer::RegionBinning* bins = &binning;
  return values.tape->record(std::move(out), {values}, [values, bins](Tape& t, const Matrix& g) {
    Matrix dv = Matrix::Zero(values.rows(), values.cols());
    for (Eigen::Index r = 0; r < bins->num_regions(); ++r) {
      const auto& group = bins->members[static_cast<std::size_t>(r)];
      const RowVector share = g.row(r) / static_cast<double>(group.size());
      for (auto i : group) dv.row(i) = share;
    }
    t.accumulate(values, dv);
  });
}

Var neighbor_mean(Var values, const tokenizer::RegionGraph& graph) {
  if (graph.num_nodes() != values.rows()) throw InvalidArgument("neighbor_mean: node count mismatch");
  const Matrix& x = values.value();
  Matrix out = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index m = 0; m < x.rows(); ++m) {
    const auto& nbrs = graph.neighbors[static_cast<std::size_t>(m)];
    if (nbrs.empty()) continue;
    for (int n : nbrs) out.row(m) += x.row(n);
    out.row(m) /= static_cast<double>(nbrs.size());
  }
  const tokenizer::RegionGraph* g_ptr = &graph;
  return values.tape->record(std::move(out), {values}, [values, g_ptr](Tape& t, const Matrix& g) {
    Matrix dv = Matrix::Zero(values.rows(), values.cols());
    for (Eigen::Index m = 0; m < g.rows(); ++m) {
      const auto& nbrs = g_ptr->neighbors[static_cast<std::size_t>(m)];
      if (nbrs.empty()) continue;
      const RowVector share = g.row(m) / static_cast<double>(nbrs.size());
      for (int n : nbrs) dv.row(n) += share;
    }
    t.accumulate(values, dv);
  });
}

Var project_rows(Var log_plan, const Vector& log_r) {
  Matrix out = log_plan.value();
  otroute::project_rows(out, log_r);
  Tape* tape = log_plan.tape;
  const int self = static_cast<int>(tape->size());
  // y = L - lse_row(L) + log r, so dL = g - softmax_row(L) * rowsum(g) and
  // softmax_row(L) = exp(y) / r.
  return tape->record(std::move(out), {log_plan}, [log_plan, self, log_r](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(Var{&t, self});
    Matrix soft = (y.colwise() - log_r).array().exp();
    const Vector total = g.rowwise().sum();
    t.accumulate(log_plan, g - total.asDiagonal() * soft);
  });
}

Var project_cols(Var log_plan, const Vector& log_q) {
  Matrix out = log_plan.value();
  otroute::project_cols(out, log_q);
  Tape* tape = log_plan.tape;
  const int self = static_cast<int>(tape->size());
  return tape->record(std::move(out), {log_plan}, [log_plan, self, log_q](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(Var{&t, self});
    Matrix soft = (y.rowwise() - log_q.transpose()).array().exp();
    const RowVector total = g.colwise().sum();
    t.accumulate(log_plan, g - soft * total.asDiagonal());
  });
}

Var diffuse(Var log_plan, const tokenizer::RegionGraph& graph, double lambda) {
  Matrix out = otroute::diffuse_log_plan(log_plan.value(), graph, lambda);
  const tokenizer::RegionGraph* g_ptr = &graph;
  return log_plan.tape->record(std::move(out), {log_plan}, [log_plan, g_ptr, lambda](Tape& t, const Matrix& g) {
    Matrix dl = Matrix::Zero(g.rows(), g.cols());
    for (Eigen::Index m = 0; m < g.rows(); ++m) {
      const auto& nbrs = g_ptr->neighbors[static_cast<std::size_t>(m)];
      if (nbrs.empty()) {
        dl.row(m) += g.row(m);
        continue;
      }
      dl.row(m) += (1.0 - lambda) * g.row(m);
      const auto& w = g_ptr->weights[static_cast<std::size_t>(m)];
      for (std::size_t j = 0; j < nbrs.size(); ++j) dl.row(nbrs[j]) += lambda * w[j] * g.row(m);
    }
    t.accumulate(log_plan, dl);
  });
}

Var topk_rescale(Var plan, const Matrix& mask, const Vector& r) {
  const Matrix& p = plan.value();
  if (mask.rows() != p.rows() || mask.cols() != p.cols() || r.size() != p.rows()) {
    throw InvalidArgument("topk_rescale: shape mismatch");
  }
  Vector kept(p.rows());
  Matrix out = Matrix::Zero(p.rows(), p.cols());
  for (Eigen::Index m = 0; m < p.rows(); ++m) {
    double s = 0.0;
    for (Eigen::Index e = 0; e < p.cols(); ++e) {
      if (mask(m, e) != 0.0) s += p(m, e);
    }
    kept(m) = s;
    for (Eigen::Index e = 0; e < p.cols(); ++e) {
      if (mask(m, e) != 0.0) out(m, e) = r(m) * p(m, e) / s;
    }
  }
  auto& log = plan.tape->branch_log();
  for (Eigen::Index i = 0; i < mask.size(); ++i) log.push_back(mask.data()[i] != 0.0 ? 1 : 0);
  // gamma = r P / s on kept entries: dP(m,e) = mask * (r g(m,e) / s - r sum_kept(g P) / s^2).
  return plan.tape->record(std::move(out), {plan}, [plan, mask, r, kept](Tape& t, const Matrix& g) {
    const Matrix& p_val = plan.value();
    Matrix dp = Matrix::Zero(p_val.rows(), p_val.cols());
    for (Eigen::Index m = 0; m < p_val.rows(); ++m) {
      double inner = 0.0;
      for (Eigen::Index e = 0; e < p_val.cols(); ++e) {
        if (mask(m, e) != 0.0) inner += g(m, e) * p_val(m, e);
      }
      const double s = kept(m);
      for (Eigen::Index e = 0; e < p_val.cols(); ++e) {
        if (mask(m, e) != 0.0) dp(m, e) = r(m) * (g(m, e) / s - inner / (s * s));
      }
    }
    t.accumulate(plan, dp);
  });
}

Var support_softmax(Var scores, Var gamma, bool modulate) {
  const Matrix& s = scores.value();
  const Matrix& gm = gamma.value();
  if (s.rows() != gm.rows() || s.cols() != gm.cols()) throw InvalidArgument("support_softmax: shape mismatch");
  Matrix out = Matrix::Zero(s.rows(), s.cols());
  for (Eigen::Index e = 0; e < s.cols(); ++e) {
    double peak = -std::numeric_limits<double>::infinity();
    for (Eigen::Index m = 0; m < s.rows(); ++m) {
      if (gm(m, e) > 0.0) {
        const double logit = s(m, e) + (modulate ? std::log(gm(m, e)) : 0.0);
        out(m, e) = logit;
        peak = std::max(peak, logit);
      }
    }
    if (!std::isfinite(peak)) continue;  // empty support
    double total = 0.0;
    for (Eigen::Index m = 0; m < s.rows(); ++m) {
      if (gm(m, e) > 0.0) {
        out(m, e) = std::exp(out(m, e) - peak);
        total += out(m, e);
      }
    }
    for (Eigen::Index m = 0; m < s.rows(); ++m) {
      if (gm(m, e) > 0.0) out(m, e) /= total;
    }
  }
  Tape* tape = scores.tape;
  const int self = static_cast<int>(tape->size());
  return tape->record(std::move(out), {scores, gamma},
                      [scores, gamma, modulate, self](Tape& t, const Matrix& g) {
                        const Matrix& beta = t.value(Var{&t, self});
                        const Matrix& gm_val = gamma.value();
                        Matrix dlogit = beta.cwiseProduct(g);
                        const RowVector inner = dlogit.colwise().sum();
                        dlogit -= beta * inner.asDiagonal();
                        t.accumulate(scores, dlogit);
                        if (modulate) {
                          Matrix dg = Matrix::Zero(gm_val.rows(), gm_val.cols());
                          for (Eigen::Index i = 0; i < dg.size(); ++i) {
                            if (gm_val.data()[i] > 0.0) dg.data()[i] = dlogit.data()[i] / gm_val.data()[i];
                          }
                          t.accumulate(gamma, dg);
                        }
                      });
}

}  // namespace roam::ad
