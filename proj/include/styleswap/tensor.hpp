#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace styleswap {

using Scalar = double;
using Index = Eigen::Index;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_string(Index rows, Index cols);

/// Dense rank-2 tensor handle. Copies share storage; use clone() for a deep copy.
/// Vectors are stored as 1 x n rows, scalars as 1 x 1.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Matrix value, bool requires_grad = false);

  static Tensor scalar(Scalar v, bool requires_grad = false);
  static Tensor zeros(Index rows, Index cols, bool requires_grad = false);

  Index rows() const;
  Index cols() const;
  Index size() const;
  std::vector<Index> shape() const;

  const Matrix& value() const;
  Matrix& mutable_value();
  Scalar item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);

  bool has_grad() const;
  const Matrix& grad() const;
  // Handle semantics: mutates the shared gradient buffer.
  void accumulate_grad(const Matrix& g) const;
  void zero_grad();

  Tensor clone() const;
  bool same(const Tensor& other) const { return impl_ == other.impl_; }
  bool defined() const { return impl_ != nullptr; }

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
};

enum class OpKind {
  MatMul,
  Transpose,
  Add,
  AddRow,
  Scale,
  Mul,
  Relu,
  Sum,
  LayerNorm,
  Softmax,
  Embedding,
  CrossEntropy,
  Attention,
  Dropout,
};

const char* op_name(OpKind kind);

/// Ordered record of differentiable operations. Entries are appended in
/// execution order, so the record is already topologically sorted.
class Tape {
 public:
  using BackwardFn = std::function<void(const Matrix& grad_out)>;

  struct Entry {
    OpKind kind;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(OpKind kind, std::vector<Tensor> inputs, Tensor output, BackwardFn fn);

  // Propagates d(loss)/d(.) to every reachable tensor with requires_grad.
  // Leaf gradients accumulate; intermediate gradients are reset first so the
  // same tape can be replayed.
  void backward(const Tensor& loss);

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

  static Tape* active();

 private:
  friend class TapeScope;
  friend class NoTapeScope;
  std::vector<Entry> entries_;
};

/// Makes a tape the recording target for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording on the current thread (inference, finite differences).
class NoTapeScope {
 public:
  NoTapeScope();
  ~NoTapeScope();
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape* previous_;
};

/// backward() against the thread's active tape.
void backward(const Tensor& loss);

// Contiguous run of rows belonging to one sequence in a packed batch.
struct Segment {
  Index offset = 0;
  Index length = 0;
};

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
// a + row broadcast over every row of a.
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor scale(const Tensor& a, Scalar s);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor layer_norm(const Tensor& z, const Tensor& gain, const Tensor& bias, Scalar eps = 1e-5);
// axis 1 normalizes each row, axis 0 each column.
Tensor softmax(const Tensor& z, int axis = 1);
Tensor embedding(const Tensor& table, std::span<const TokenId> ids);
Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets, TokenId ignore_id);
Tensor dropout(const Tensor& a, Scalar p, std::mt19937_64& rng);

// Multi-head scaled dot-product attention over packed sequences. q rows are
// grouped by q_segments, k/v rows by k_segments (same count). With causal,
// query i of a segment sees keys 0..i of the paired segment.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, Index n_heads,
                 std::span<const Segment> q_segments, std::span<const Segment> k_segments,
                 bool causal);

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

}  // namespace ops

// Plain (non-differentiable) kernels shared by the ops and by test oracles.
template <typename Derived>
Matrix softmax_rows(const Eigen::MatrixBase<Derived>& z) {
  Matrix out(z.rows(), z.cols());
  for (Index r = 0; r < z.rows(); ++r) {
    const Scalar m = z.row(r).maxCoeff();
    out.row(r) = (z.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

template <typename Derived>
Vector log_softmax(const Eigen::MatrixBase<Derived>& z) {
  const Scalar m = z.maxCoeff();
  const Scalar lse = m + std::log((z.array() - m).exp().sum());
  return (z.array() - lse).matrix();
}

}  // namespace styleswap
