#include "styleswap/tensor.hpp"

#include <sstream>

namespace styleswap {

std::string shape_string(Index rows, Index cols) {
  std::ostringstream os;
  os << "[" << rows << "x" << cols << "]";
  return os.str();
}

struct Tensor::Impl {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  bool has_grad = false;
};

Tensor::Tensor() : impl_(std::make_shared<Impl>()) {}

Tensor::Tensor(Matrix value, bool requires_grad) : impl_(std::make_shared<Impl>()) {
  impl_->value = std::move(value);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(Scalar v, bool requires_grad) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Tensor(std::move(m), requires_grad);
}

Tensor Tensor::zeros(Index rows, Index cols, bool requires_grad) {
  return Tensor(Matrix::Zero(rows, cols), requires_grad);
}

Index Tensor::rows() const { return impl_->value.rows(); }
Index Tensor::cols() const { return impl_->value.cols(); }
Index Tensor::size() const { return impl_->value.size(); }
std::vector<Index> Tensor::shape() const { return {rows(), cols()}; }

const Matrix& Tensor::value() const { return impl_->value; }
Matrix& Tensor::mutable_value() { return impl_->value; }

Scalar Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on non-scalar " + shape_string(rows(), cols()));
  return impl_->value(0, 0);
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (!on) zero_grad();
}

bool Tensor::has_grad() const { return impl_->has_grad; }

const Matrix& Tensor::grad() const {
  if (!impl_->has_grad) throw std::logic_error("tensor has no gradient");
  return impl_->grad;
}

void Tensor::accumulate_grad(const Matrix& g) const {
  if (!impl_->requires_grad) return;
  if (g.rows() != rows() || g.cols() != cols())
    throw DimensionError("gradient " + shape_string(g.rows(), g.cols()) + " does not match tensor " +
                         shape_string(rows(), cols()));
  if (impl_->has_grad) {
    impl_->grad += g;
  } else {
    impl_->grad = g;
    impl_->has_grad = true;
  }
}

void Tensor::zero_grad() {
  impl_->has_grad = false;
  impl_->grad.resize(0, 0);
}

Tensor Tensor::clone() const { return Tensor(impl_->value, impl_->requires_grad); }

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Add: return "add";
    case OpKind::AddRow: return "add_row";
    case OpKind::Scale: return "scale";
    case OpKind::Mul: return "mul";
    case OpKind::Relu: return "relu";
    case OpKind::Sum: return "sum";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::Softmax: return "softmax";
    case OpKind::Embedding: return "embedding";
    case OpKind::CrossEntropy: return "cross_entropy";
    case OpKind::Attention: return "attention";
    case OpKind::Dropout: return "dropout";
  }
  return "?";
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoTapeScope::NoTapeScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoTapeScope::~NoTapeScope() { g_active_tape = previous_; }

void Tape::record(OpKind kind, std::vector<Tensor> inputs, Tensor output, BackwardFn fn) {
  entries_.push_back(Entry{kind, std::move(inputs), std::move(output), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw DimensionError("backward() needs a scalar loss, got " + shape_string(loss.rows(), loss.cols()));
  for (auto& e : entries_) e.output.zero_grad();
  if (!loss.requires_grad()) return;
  Tensor seed = loss;
  seed.accumulate_grad(Matrix::Ones(1, 1));
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward(it->output.grad());
  }
}

void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (tape == nullptr) throw std::logic_error("backward() without an active tape");
  tape->backward(loss);
}

}  // namespace styleswap
