#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace omgseg::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Parameter {
  std::string name;
  Matrix value;
  bool trainable = true;
};

/// Named parameters in insertion order; addresses are stable.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore& other);
  ParameterStore& operator=(const ParameterStore& other);
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter& add(std::string name, Matrix value, bool trainable = true);
  bool contains(std::string_view name) const;
  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;

  std::vector<const Parameter*> all() const;
  std::vector<Parameter*> all();
  std::size_t size() const { return params_.size(); }
  /// Total scalar count, optionally restricted to a name prefix.
  std::size_t count(std::string_view prefix = "") const;
  /// FNV-1a over names and raw value bytes of parameters whose name starts with prefix.
  std::uint64_t checksum(std::string_view prefix = "") const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, Parameter*> index_;
};

class Tape;

/// Handle to a tape node. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode tape. With gradients disabled no closures are stored and
/// the tape only carries values.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix&)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Matrix value);
  /// Reads the parameter in place; one node per parameter per tape.
  Var parameter(const Parameter& p);
  Var record(Matrix value, std::initializer_list<Var> parents, Backward backward);
  Var record(Matrix value, const std::vector<Var>& parents, Backward backward);

  const Matrix& value(int id) const;
  bool requires_grad(const Var& v) const { return nodes_[static_cast<std::size_t>(v.id())].requires_grad; }
  /// Gradient buffer, zero-initialized on first access.
  Matrix& grad(const Var& v);

  void backward(const Var& scalar_loss);
  /// nullptr when the parameter did not take part or backward was not run.
  const Matrix* param_grad(const Parameter& p) const;
  std::vector<std::pair<const Parameter*, const Matrix*>> param_grads() const;
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix owned;
    const Matrix* ref = nullptr;
    Matrix grad;
    bool requires_grad = false;
    const Parameter* param = nullptr;
    Backward backward;
  };
  bool any_requires(std::span<const Var> parents) const;

  bool grad_enabled_;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
};

// Linear algebra.
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double s);
Var scale_by(const Var& a, const Var& s);  // s is 1x1
Var add_row(const Var& a, const Var& row);  // broadcast 1xC over rows
Var linear(const Var& x, const Var& weight, const Var& bias);  // x W + b, W is in x out

// Pointwise.
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var exp(const Var& a);

// Shape.
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var gather_rows(const Var& a, const std::vector<int>& rows);

// Reductions and normalization.
Var sum(const Var& a);
Var logsumexp_rows(const Var& a);  // N x 1
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var row_normalize(const Var& a, double eps = 1e-12);

/// Multi-head scaled dot-product attention on already projected q, k, v.
/// `blocked` (rows x keys, row-major, 1 = masked) may be empty; a row with
/// every key blocked falls back to attending to all keys.
Var attention(const Var& q, const Var& k, const Var& v, int heads,
              std::span<const std::uint8_t> blocked = {});

// Losses. Each returns 1x1.
/// sum_i w_i * CE(logits_i, target_i) / normalizer.
Var cross_entropy(const Var& logits, const std::vector<int>& targets,
                  const std::vector<double>& weights, double normalizer);
/// sum over rows of mean-over-columns BCE-with-logits, / normalizer. Targets may be soft.
Var sigmoid_cross_entropy(const Var& logits, const Matrix& targets, double normalizer);
/// sum over rows of 1 - (2 sum s*y + eps) / (sum s + sum y + eps), / normalizer.
Var dice(const Var& logits, const Matrix& targets, double eps, double normalizer);

// Value-only counterparts used for matching costs.
double sigmoid_cross_entropy_value(const Eigen::Ref<const Eigen::RowVectorXd>& logits,
                                   const Eigen::Ref<const Eigen::RowVectorXd>& targets);
double dice_value(const Eigen::Ref<const Eigen::RowVectorXd>& logits,
                  const Eigen::Ref<const Eigen::RowVectorXd>& targets, double eps);

inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }
inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace omgseg::ad
