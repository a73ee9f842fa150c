#include "omgseg/ad.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "omgseg/core.hpp"
#include "omgseg/rng.hpp"

namespace omgseg::ad {

// ---------------------------------------------------------------- store

ParameterStore::ParameterStore(const ParameterStore& other) { *this = other; }

ParameterStore& ParameterStore::operator=(const ParameterStore& other) {
  if (this == &other) return *this;
  params_.clear();
  index_.clear();
  for (const auto& p : other.params_) add(p->name, p->value, p->trainable);
  return *this;
}

Parameter& ParameterStore::add(std::string name, Matrix value, bool trainable) {
  if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
  params_.push_back(std::make_unique<Parameter>(Parameter{name, std::move(value), trainable}));
  index_.emplace(std::move(name), params_.back().get());
  return *params_.back();
}

bool ParameterStore::contains(std::string_view name) const { return index_.contains(std::string(name)); }

Parameter& ParameterStore::get(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("unknown parameter: " + std::string(name));
  return *it->second;
}

const Parameter& ParameterStore::get(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("unknown parameter: " + std::string(name));
  return *it->second;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::size_t ParameterStore::count(std::string_view prefix) const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p->name.starts_with(prefix)) n += static_cast<std::size_t>(p->value.size());
  }
  return n;
}

std::uint64_t ParameterStore::checksum(std::string_view prefix) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) {
    if (!p->name.starts_with(prefix)) continue;
    h = fnv1a64(p->name, h);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(p->value.data()),
                                 static_cast<std::size_t>(p->value.size()) * sizeof(double)),
                h);
  }
  return h;
}

// ----------------------------------------------------------------- tape

const Matrix& Var::value() const { return tape_->value(id_); }

const Matrix& Tape::value(int id) const {
  const auto& n = nodes_[static_cast<std::size_t>(id)];
  return n.ref ? *n.ref : n.owned;
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), nullptr, {}, false, nullptr, {}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::parameter(const Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  n.ref = &p.value;
  n.param = &p;
  n.requires_grad = grad_enabled_ && p.trainable;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  param_nodes_.emplace(&p, id);
  return Var(this, id);
}

bool Tape::any_requires(std::span<const Var> parents) const {
  if (!grad_enabled_) return false;
  for (const auto& p : parents) {
    if (nodes_[static_cast<std::size_t>(p.id())].requires_grad) return true;
  }
  return false;
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
  return record(std::move(value), std::vector<Var>(parents), std::move(backward));
}

Var Tape::record(Matrix value, const std::vector<Var>& parents, Backward backward) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = any_requires(parents);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Matrix& Tape::grad(const Var& v) {
  auto& n = nodes_[static_cast<std::size_t>(v.id())];
  if (n.grad.size() == 0) {
    const auto& val = n.ref ? *n.ref : n.owned;
    n.grad = Matrix::Zero(val.rows(), val.cols());
  }
  return n.grad;
}

void Tape::backward(const Var& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) throw ShapeError("backward needs a scalar loss");
  if (!requires_grad(loss)) return;
  grad(loss)(0, 0) += 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
    n.backward(*this, n.grad);
  }
}

const Matrix* Tape::param_grad(const Parameter& p) const {
  auto it = param_nodes_.find(&p);
  if (it == param_nodes_.end()) return nullptr;
  const auto& n = nodes_[static_cast<std::size_t>(it->second)];
  return n.grad.size() == 0 ? nullptr : &n.grad;
}

std::vector<std::pair<const Parameter*, const Matrix*>> Tape::param_grads() const {
  std::vector<std::pair<const Parameter*, const Matrix*>> out;
  for (const auto& [p, id] : param_nodes_) {
    const auto& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() != 0) out.emplace_back(p, &n.grad);
  }
  return out;
}

// ------------------------------------------------------------------ ops

namespace {

void check_same(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch");
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimension mismatch");
  Matrix out = a.value() * b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.grad(a).noalias() += g * b.value().transpose();
    if (t.requires_grad(b)) t.grad(b).noalias() += a.value().transpose() * g;
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimension mismatch");
  Matrix out = a.value() * b.value().transpose();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.grad(a).noalias() += g * b.value();
    if (t.requires_grad(b)) t.grad(b).noalias() += g.transpose() * a.value();
  });
}

Var transpose(const Var& a) {
  Matrix out = a.value().transpose();
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.grad(a) += g.transpose();
  });
}

Var add(const Var& a, const Var& b) {
  check_same(a, b, "add");
  Matrix out = a.value() + b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.grad(a) += g;
    if (t.requires_grad(b)) t.grad(b) += g;
  });
}

Var sub(const Var& a, const Var& b) {
  check_same(a, b, "sub");
  Matrix out = a.value() - b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.grad(a) += g;
    if (t.requires_grad(b)) t.grad(b) -= g;
  });
}

Var mul(const Var& a, const Var& b) {
  check_same(a, b, "mul");
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.grad(a) += g.cwiseProduct(b.value());
    if (t.requires_grad(b)) t.grad(b) += g.cwiseProduct(a.value());
  });
}

Var scale(const Var& a, double s) {
  Matrix out = a.value() * s;
  return a.tape().record(std::move(out), {a}, [a, s](Tape& t, const Matrix& g) {
    t.grad(a) += g * s;
  });
}

Var scale_by(const Var& a, const Var& s) {
  if (s.rows() != 1 || s.cols() != 1) throw ShapeError("scale_by: scale must be 1x1");
  Matrix out = a.value() * s.scalar();
  return a.tape().record(std::move(out), {a, s}, [a, s](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.grad(a) += g * s.scalar();
    if (t.requires_grad(s)) t.grad(s)(0, 0) += g.cwiseProduct(a.value()).sum();
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: row shape mismatch");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.tape().record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.grad(a) += g;
    if (t.requires_grad(row)) t.grad(row) += g.colwise().sum();
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  if (x.cols() != weight.rows() || bias.rows() != 1 || bias.cols() != weight.cols())
    throw ShapeError("linear: shape mismatch");
  Matrix out = x.value() * weight.value();
  out.rowwise() += bias.value().row(0);
  return x.tape().record(std::move(out), {x, weight, bias},
                         [x, weight, bias](Tape& t, const Matrix& g) {
                           if (t.requires_grad(x)) t.grad(x).noalias() += g * weight.value().transpose();
                           if (t.requires_grad(weight))
                             t.grad(weight).noalias() += x.value().transpose() * g;
                           if (t.requires_grad(bias)) t.grad(bias) += g.colwise().sum();
                         });
}

Var relu(const Var& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.grad(a) += (a.value().array() > 0.0).cast<double>().matrix().cwiseProduct(g);
  });
}

Var sigmoid(const Var& a) {
  Matrix out = a.value().unaryExpr([](double z) { return sigmoid(z); });
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    const Matrix sv = a.value().unaryExpr([](double z) { return sigmoid(z); });
    t.grad(a) += g.cwiseProduct(sv.cwiseProduct((1.0 - sv.array()).matrix()));
  });
}

Var exp(const Var& a) {
  Matrix out = a.value().array().exp().matrix();
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.grad(a) += g.cwiseProduct(a.value().array().exp().matrix());
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  Eigen::Index rows = 0;
  const auto cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return parts.front().tape().record(std::move(out), parts, [parts](Tape& t, const Matrix& g) {
    Eigen::Index r0 = 0;
    for (const auto& p : parts) {
      if (t.requires_grad(p)) t.grad(p) += g.middleRows(r0, p.rows());
      r0 += p.rows();
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  Eigen::Index cols = 0;
  const auto rows = parts.front().rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return parts.front().tape().record(std::move(out), parts, [parts](Tape& t, const Matrix& g) {
    Eigen::Index c0 = 0;
    for (const auto& p : parts) {
      if (t.requires_grad(p)) t.grad(p) += g.middleCols(c0, p.cols());
      c0 += p.cols();
    }
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: out of range");
  Matrix out = a.value().middleRows(start, count);
  return a.tape().record(std::move(out), {a}, [a, start, count](Tape& t, const Matrix& g) {
    t.grad(a).middleRows(start, count) += g;
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
  Matrix out = a.value().middleCols(start, count);
  return a.tape().record(std::move(out), {a}, [a, start, count](Tape& t, const Matrix& g) {
    t.grad(a).middleCols(start, count) += g;
  });
}

Var gather_rows(const Var& a, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw IndexError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  return a.tape().record(std::move(out), {a}, [a, rows](Tape& t, const Matrix& g) {
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < rows.size(); ++i) ga.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.grad(a).array() += g(0, 0);
  });
}

Var logsumexp_rows(const Var& a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    out(i, 0) = m + std::log((x.row(i).array() - m).exp().sum());
  }
  Matrix lse = out;
  return a.tape().record(std::move(out), {a}, [a, lse](Tape& t, const Matrix& g) {
    const Matrix& xv = a.value();
    auto& ga = t.grad(a);
    for (Eigen::Index i = 0; i < xv.rows(); ++i)
      ga.row(i) += g(i, 0) * (xv.row(i).array() - lse(i, 0)).exp().matrix();
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Matrix& xv = x.value();
  const auto n = xv.rows(), c = xv.cols();
  if (gamma.cols() != c || beta.cols() != c) throw ShapeError("layer_norm: affine shape mismatch");
  Matrix xhat(n, c);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = xv.row(i).mean();
    const double var = (xv.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (xv.row(i).array() - mu) * inv_std(i);
  }
  Matrix out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return x.tape().record(std::move(out), {x, gamma, beta},
                         [x, gamma, beta, xhat, inv_std](Tape& t, const Matrix& g) {
                           if (t.requires_grad(gamma))
                             t.grad(gamma) += g.cwiseProduct(xhat).colwise().sum();
                           if (t.requires_grad(beta)) t.grad(beta) += g.colwise().sum();
                           if (!t.requires_grad(x)) return;
                           const Matrix dxhat = g.array().rowwise() * gamma.value().row(0).array();
                           auto& gx = t.grad(x);
                           for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
                             const double m1 = dxhat.row(i).mean();
                             const double m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
                             gx.row(i) += inv_std(i) *
                                          (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2).matrix();
                           }
                         });
}

Var row_normalize(const Var& a, double eps) {
  const Matrix& x = a.value();
  Eigen::VectorXd norms = x.rowwise().norm().array().max(eps);
  Matrix out = x.array().colwise() / norms.array();
  Matrix y = out;
  return a.tape().record(std::move(out), {a}, [a, y, norms](Tape& t, const Matrix& g) {
    auto& ga = t.grad(a);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const double d = y.row(i).dot(g.row(i));
      ga.row(i) += (g.row(i) - d * y.row(i)) / norms(i);
    }
  });
}

Var attention(const Var& q, const Var& k, const Var& v, int heads, std::span<const std::uint8_t> blocked) {
  const auto nq = q.rows(), nk = k.rows(), dim = q.cols();
  if (k.cols() != dim || v.cols() != dim || v.rows() != nk || heads < 1 || dim % heads != 0)
    throw ShapeError("attention: shape mismatch");
  if (!blocked.empty() && blocked.size() != static_cast<std::size_t>(nq * nk))
    throw ShapeError("attention: mask shape mismatch");
  const auto dh = dim / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  // rows whose mask blocks every key attend everywhere
  std::vector<char> open_row(static_cast<std::size_t>(nq), blocked.empty() ? 1 : 0);
  if (!blocked.empty()) {
    for (Eigen::Index i = 0; i < nq; ++i) {
      bool all = true;
      for (Eigen::Index j = 0; j < nk && all; ++j) all = blocked[static_cast<std::size_t>(i * nk + j)] != 0;
      open_row[static_cast<std::size_t>(i)] = all ? 1 : 0;
    }
  }

  Matrix out(nq, dim);
  auto probs = std::make_shared<std::vector<Matrix>>();
  for (int h = 0; h < heads; ++h) {
    Matrix s = (q.value().middleCols(h * dh, dh) * k.value().middleCols(h * dh, dh).transpose()) * sc;
    for (Eigen::Index i = 0; i < nq; ++i) {
      const bool open = open_row[static_cast<std::size_t>(i)] != 0;
      double m = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < nk; ++j) {
        if (!open && blocked[static_cast<std::size_t>(i * nk + j)]) {
          s(i, j) = -std::numeric_limits<double>::infinity();
        } else {
          m = std::max(m, s(i, j));
        }
      }
      double z = 0;
      for (Eigen::Index j = 0; j < nk; ++j) {
        s(i, j) = std::isinf(s(i, j)) && s(i, j) < 0 ? 0.0 : std::exp(s(i, j) - m);
        z += s(i, j);
      }
      s.row(i) /= z;
    }
    out.middleCols(h * dh, dh).noalias() = s * v.value().middleCols(h * dh, dh);
    probs->push_back(std::move(s));
  }
  return q.tape().record(std::move(out), {q, k, v}, [q, k, v, heads, dh, sc, probs](Tape& t, const Matrix& g) {
    const bool gq = t.requires_grad(q), gk = t.requires_grad(k), gv = t.requires_grad(v);
    for (int h = 0; h < heads; ++h) {
      const Matrix& p = (*probs)[static_cast<std::size_t>(h)];
      const auto go = g.middleCols(h * dh, dh);
      if (gv) t.grad(v).middleCols(h * dh, dh).noalias() += p.transpose() * go;
      if (!gq && !gk) continue;
      Matrix dp = go * v.value().middleCols(h * dh, dh).transpose();
      const Eigen::VectorXd rs = dp.cwiseProduct(p).rowwise().sum();
      Matrix ds = p.cwiseProduct((dp.colwise() - rs));
      ds *= sc;
      if (gq) t.grad(q).middleCols(h * dh, dh).noalias() += ds * k.value().middleCols(h * dh, dh);
      if (gk) t.grad(k).middleCols(h * dh, dh).noalias() += ds.transpose() * q.value().middleCols(h * dh, dh);
    }
  });
}

// --------------------------------------------------------------- losses

Var cross_entropy(const Var& logits, const std::vector<int>& targets, const std::vector<double>& weights,
                  double normalizer) {
  const Matrix& z = logits.value();
  if (static_cast<std::size_t>(z.rows()) != targets.size() || targets.size() != weights.size())
    throw ShapeError("cross_entropy: row count mismatch");
  Matrix soft(z.rows(), z.cols());
  double total = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const int tgt = targets[static_cast<std::size_t>(i)];
    if (tgt < 0 || tgt >= z.cols()) throw IndexError("cross_entropy: target index out of range");
    const double m = z.row(i).maxCoeff();
    soft.row(i) = (z.row(i).array() - m).exp().matrix();
    const double s = soft.row(i).sum();
    soft.row(i) /= s;
    total += weights[static_cast<std::size_t>(i)] * (m + std::log(s) - z(i, tgt));
  }
  Matrix out(1, 1);
  out(0, 0) = total / normalizer;
  return logits.tape().record(std::move(out), {logits},
                              [logits, soft, targets, weights, normalizer](Tape& t, const Matrix& g) {
                                auto& gl = t.grad(logits);
                                for (Eigen::Index i = 0; i < soft.rows(); ++i) {
                                  const double w = weights[static_cast<std::size_t>(i)] * g(0, 0) / normalizer;
                                  gl.row(i) += w * soft.row(i);
                                  gl(i, targets[static_cast<std::size_t>(i)]) -= w;
                                }
                              });
}

double sigmoid_cross_entropy_value(const Eigen::Ref<const Eigen::RowVectorXd>& z,
                                   const Eigen::Ref<const Eigen::RowVectorXd>& y) {
  double s = 0;
  for (Eigen::Index p = 0; p < z.size(); ++p) s += softplus(z(p)) - y(p) * z(p);
  return s / static_cast<double>(z.size());
}

double dice_value(const Eigen::Ref<const Eigen::RowVectorXd>& z, const Eigen::Ref<const Eigen::RowVectorXd>& y,
                  double eps) {
  double inter = 0, ssum = 0, ysum = 0;
  for (Eigen::Index p = 0; p < z.size(); ++p) {
    const double s = sigmoid(z(p));
    inter += s * y(p);
    ssum += s;
    ysum += y(p);
  }
  return 1.0 - (2.0 * inter + eps) / (ssum + ysum + eps);
}

Var sigmoid_cross_entropy(const Var& logits, const Matrix& targets, double normalizer) {
  const Matrix& z = logits.value();
  if (z.rows() != targets.rows() || z.cols() != targets.cols())
    throw ShapeError("sigmoid_cross_entropy: shape mismatch");
  double total = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) total += sigmoid_cross_entropy_value(z.row(i), targets.row(i));
  Matrix out(1, 1);
  out(0, 0) = total / normalizer;
  return logits.tape().record(std::move(out), {logits}, [logits, targets, normalizer](Tape& t, const Matrix& g) {
    const Matrix& zv = logits.value();
    const double f = g(0, 0) / (normalizer * static_cast<double>(zv.cols()));
    t.grad(logits) += f * (zv.unaryExpr([](double v) { return sigmoid(v); }) - targets);
  });
}

Var dice(const Var& logits, const Matrix& targets, double eps, double normalizer) {
  const Matrix& z = logits.value();
  if (z.rows() != targets.rows() || z.cols() != targets.cols()) throw ShapeError("dice: shape mismatch");
  double total = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) total += dice_value(z.row(i), targets.row(i), eps);
  Matrix out(1, 1);
  out(0, 0) = total / normalizer;
  return logits.tape().record(std::move(out), {logits}, [logits, targets, eps, normalizer](Tape& t, const Matrix& g) {
    const Matrix& zv = logits.value();
    auto& gl = t.grad(logits);
    for (Eigen::Index i = 0; i < zv.rows(); ++i) {
      const Eigen::RowVectorXd s = zv.row(i).unaryExpr([](double v) { return sigmoid(v); });
      const double num = 2.0 * s.dot(targets.row(i)) + eps;
      const double den = s.sum() + targets.row(i).sum() + eps;
      // d(1 - num/den)/ds_p = -(2 y_p den - num) / den^2
      const Eigen::RowVectorXd ds = -(2.0 * targets.row(i).array() * den - num) / (den * den);
      gl.row(i) += (g(0, 0) / normalizer) * (ds.array() * s.array() * (1.0 - s.array())).matrix();
    }
  });
}

}  // namespace omgseg::ad
