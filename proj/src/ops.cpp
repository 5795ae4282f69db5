#include <cmath>
#include <string>

#include "styleswap/tensor.hpp"

namespace styleswap::ops {

namespace {

bool tracked(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

Tensor emit(OpKind kind, std::vector<Tensor> inputs, Matrix value, Tape::BackwardFn fn) {
  Tensor out(std::move(value), true);
  Tape::active()->record(kind, std::move(inputs), out, std::move(fn));
  return out;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.rows(), a.cols()) +
                         " vs " + shape_string(b.rows(), b.cols()));
}

void require_row(const char* op, const Tensor& row, Index cols) {
  if (row.rows() != 1 || row.cols() != cols)
    throw DimensionError(std::string(op) + ": expected " + shape_string(1, cols) + " got " +
                         shape_string(row.rows(), row.cols()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.rows(), a.cols()) +
                         " x " + shape_string(b.rows(), b.cols()));
  Matrix out = a.value() * b.value();
  if (!tracked({&a, &b})) return Tensor(std::move(out));
  return emit(OpKind::MatMul, {a, b}, std::move(out), [a, b](const Matrix& g) mutable {
    if (a.requires_grad()) a.accumulate_grad(g * b.value().transpose());
    if (b.requires_grad()) b.accumulate_grad(a.value().transpose() * g);
  });
}

Tensor transpose(const Tensor& a) {
  Matrix out = a.value().transpose();
  if (!tracked({&a})) return Tensor(std::move(out));
  return emit(OpKind::Transpose, {a}, std::move(out),
              [a](const Matrix& g) mutable { a.accumulate_grad(g.transpose()); });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Matrix out = a.value() + b.value();
  if (!tracked({&a, &b})) return Tensor(std::move(out));
  return emit(OpKind::Add, {a, b}, std::move(out), [a, b](const Matrix& g) mutable {
    a.accumulate_grad(g);
    b.accumulate_grad(g);
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require_row("add_row", row, a.cols());
  Matrix out = a.value().rowwise() + row.value().row(0);
  if (!tracked({&a, &row})) return Tensor(std::move(out));
  return emit(OpKind::AddRow, {a, row}, std::move(out), [a, row](const Matrix& g) mutable {
    a.accumulate_grad(g);
    if (row.requires_grad()) row.accumulate_grad(g.colwise().sum());
  });
}

Tensor scale(const Tensor& a, Scalar s) {
  Matrix out = a.value() * s;
  if (!tracked({&a})) return Tensor(std::move(out));
  return emit(OpKind::Scale, {a}, std::move(out),
              [a, s](const Matrix& g) mutable { a.accumulate_grad(g * s); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Matrix out = a.value().cwiseProduct(b.value());
  if (!tracked({&a, &b})) return Tensor(std::move(out));
  return emit(OpKind::Mul, {a, b}, std::move(out), [a, b](const Matrix& g) mutable {
    if (a.requires_grad()) a.accumulate_grad(g.cwiseProduct(b.value()));
    if (b.requires_grad()) b.accumulate_grad(g.cwiseProduct(a.value()));
  });
}

Tensor relu(const Tensor& a) {
  Matrix out = a.value().cwiseMax(0.0);
  if (!tracked({&a})) return Tensor(std::move(out));
  return emit(OpKind::Relu, {a}, std::move(out), [a](const Matrix& g) mutable {
    a.accumulate_grad((a.value().array() > 0.0).select(g, 0.0).matrix());
  });
}

Tensor sum(const Tensor& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  if (!tracked({&a})) return Tensor(std::move(out));
  return emit(OpKind::Sum, {a}, std::move(out), [a](const Matrix& g) mutable {
    a.accumulate_grad(Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Tensor layer_norm(const Tensor& z, const Tensor& gain, const Tensor& bias, Scalar eps) {
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
  const Index h = z.cols();
  require_row("layer_norm gain", gain, h);
  require_row("layer_norm bias", bias, h);
  const Index n = z.rows();
  Matrix xhat(n, h);
  Vector inv_std(n);
  for (Index r = 0; r < n; ++r) {
    const Scalar mean = z.value().row(r).mean();
    const auto centered = z.value().row(r).array() - mean;
    const Scalar var = centered.square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (centered * inv_std(r)).matrix();
  }
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() +
               bias.value().row(0).array();
  if (!tracked({&z, &gain, &bias})) return Tensor(std::move(out));
  return emit(OpKind::LayerNorm, {z, gain, bias}, std::move(out),
              [z, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), h](
                  const Matrix& g) mutable {
                if (bias.requires_grad()) bias.accumulate_grad(g.colwise().sum());
                if (gain.requires_grad()) gain.accumulate_grad(g.cwiseProduct(xhat).colwise().sum());
                if (!z.requires_grad()) return;
                Matrix dxhat = g.array().rowwise() * gain.value().row(0).array();
                Matrix dz(g.rows(), h);
                for (Index r = 0; r < g.rows(); ++r) {
                  const Scalar m1 = dxhat.row(r).mean();
                  const Scalar m2 = dxhat.row(r).dot(xhat.row(r)) / static_cast<Scalar>(h);
                  dz.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2).matrix();
                }
                z.accumulate_grad(dz);
              });
}

Tensor softmax(const Tensor& z, int axis) {
  if (axis != 0 && axis != 1) throw std::invalid_argument("softmax: axis must be 0 or 1");
  Matrix out = axis == 1 ? softmax_rows(z.value()) : Matrix(softmax_rows(z.value().transpose()).transpose());
  if (!tracked({&z})) return Tensor(std::move(out));
  Matrix y = out;
  return emit(OpKind::Softmax, {z}, std::move(out), [z, y = std::move(y), axis](const Matrix& g) mutable {
    Matrix gy = g.cwiseProduct(y);
    if (axis == 1) {
      Vector dots = gy.rowwise().sum();
      z.accumulate_grad(gy - (y.array().colwise() * dots.array()).matrix());
    } else {
      RowVector dots = gy.colwise().sum();
      z.accumulate_grad(gy - (y.array().rowwise() * dots.array()).matrix());
    }
  });
}

Tensor embedding(const Tensor& table, std::span<const TokenId> ids) {
  const Index n = static_cast<Index>(ids.size());
  Matrix out(n, table.cols());
  for (Index i = 0; i < n; ++i) {
    const TokenId id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= table.rows())
      throw DimensionError("embedding: token id " + std::to_string(id) + " outside table of " +
                           std::to_string(table.rows()) + " rows");
    out.row(i) = table.value().row(id);
  }
  if (!tracked({&table})) return Tensor(std::move(out));
  return emit(OpKind::Embedding, {table}, std::move(out),
              [table, ids = TokenIds(ids.begin(), ids.end())](const Matrix& g) mutable {
                Matrix dt = Matrix::Zero(table.rows(), table.cols());
                for (std::size_t i = 0; i < ids.size(); ++i) dt.row(ids[i]) += g.row(static_cast<Index>(i));
                table.accumulate_grad(dt);
              });
}

Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets, TokenId ignore_id) {
  const Index t = logits.rows();
  const Index v = logits.cols();
  if (static_cast<Index>(targets.size()) != t)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_string(t, v) + " logits");
  Matrix probs(t, v);
  Scalar total = 0.0;
  Index count = 0;
  for (Index r = 0; r < t; ++r) {
    const TokenId y = targets[static_cast<std::size_t>(r)];
    if (y == ignore_id) continue;
    if (y < 0 || y >= v) throw DimensionError("cross_entropy: target " + std::to_string(y) + " outside [0," + std::to_string(v) + ")");
    const Scalar m = logits.value().row(r).maxCoeff();
    const auto shifted = (logits.value().row(r).array() - m).exp();
    const Scalar z = shifted.sum();
    probs.row(r) = (shifted / z).matrix();
    total += m + std::log(z) - logits.value()(r, y);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: empty loss (every target ignored)");
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<Scalar>(count);
  if (!tracked({&logits})) return Tensor(std::move(out));
  return emit(OpKind::CrossEntropy, {logits}, std::move(out),
              [logits, probs = std::move(probs), tg = TokenIds(targets.begin(), targets.end()),
               ignore_id, count](const Matrix& g) mutable {
                Matrix d = Matrix::Zero(logits.rows(), logits.cols());
                const Scalar s = g(0, 0) / static_cast<Scalar>(count);
                for (Index r = 0; r < d.rows(); ++r) {
                  const TokenId y = tg[static_cast<std::size_t>(r)];
                  if (y == ignore_id) continue;
                  d.row(r) = probs.row(r) * s;
                  d(r, y) -= s;
                }
                logits.accumulate_grad(d);
              });
}

Tensor dropout(const Tensor& a, Scalar p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must lie in [0,1)");
  if (p == 0.0) return a;
  std::bernoulli_distribution keep(1.0 - p);
  Matrix mask(a.rows(), a.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
  Matrix out = a.value().cwiseProduct(mask);
  if (!tracked({&a})) return Tensor(std::move(out));
  return emit(OpKind::Dropout, {a}, std::move(out), [a, mask = std::move(mask)](const Matrix& g) mutable {
    a.accumulate_grad(g.cwiseProduct(mask));
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, Index n_heads,
                 std::span<const Segment> q_segments, std::span<const Segment> k_segments,
                 bool causal) {
  const Index h = q.cols();
  if (k.cols() != h || v.cols() != h || k.rows() != v.rows())
    throw DimensionError("attention: q " + shape_string(q.rows(), q.cols()) + ", k " +
                         shape_string(k.rows(), k.cols()) + ", v " + shape_string(v.rows(), v.cols()));
  if (n_heads <= 0 || h % n_heads != 0)
    throw DimensionError("attention: width " + std::to_string(h) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
  if (q_segments.size() != k_segments.size())
    throw DimensionError("attention: query/key segment counts differ");
  const Index dh = h / n_heads;
  const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(dh));

  std::vector<Matrix> probs;
  probs.reserve(q_segments.size() * static_cast<std::size_t>(n_heads));
  Matrix out = Matrix::Zero(q.rows(), h);
  for (std::size_t s = 0; s < q_segments.size(); ++s) {
    const Segment qs = q_segments[s];
    const Segment ks = k_segments[s];
    if (causal && qs.length != ks.length) throw DimensionError("attention: causal segments must match");
    for (Index head = 0; head < n_heads; ++head) {
      const auto qh = q.value().block(qs.offset, head * dh, qs.length, dh);
      const auto kh = k.value().block(ks.offset, head * dh, ks.length, dh);
      const auto vh = v.value().block(ks.offset, head * dh, ks.length, dh);
      Matrix scores = (qh * kh.transpose()) * scale;
      Matrix p = Matrix::Zero(qs.length, ks.length);
      for (Index i = 0; i < qs.length; ++i) {
        const Index visible = causal ? i + 1 : ks.length;
        const auto row = scores.row(i).head(visible);
        const Scalar m = row.maxCoeff();
        p.row(i).head(visible) = (row.array() - m).exp().matrix();
        p.row(i).head(visible) /= p.row(i).head(visible).sum();
      }
      out.block(qs.offset, head * dh, qs.length, dh).noalias() = p * vh;
      probs.push_back(std::move(p));
    }
  }
  if (!tracked({&q, &k, &v})) return Tensor(std::move(out));

  std::vector<Segment> qseg(q_segments.begin(), q_segments.end());
  std::vector<Segment> kseg(k_segments.begin(), k_segments.end());
  return emit(OpKind::Attention, {q, k, v}, std::move(out),
              [q, k, v, n_heads, dh, scale, qseg = std::move(qseg), kseg = std::move(kseg),
               probs = std::move(probs)](const Matrix& g) mutable {
                Matrix dq = Matrix::Zero(q.rows(), q.cols());
                Matrix dk = Matrix::Zero(k.rows(), k.cols());
                Matrix dv = Matrix::Zero(v.rows(), v.cols());
                std::size_t idx = 0;
                for (std::size_t s = 0; s < qseg.size(); ++s) {
                  const Segment qs = qseg[s];
                  const Segment ks = kseg[s];
                  for (Index head = 0; head < n_heads; ++head, ++idx) {
                    const Matrix& p = probs[idx];
                    const auto go = g.block(qs.offset, head * dh, qs.length, dh);
                    const auto qh = q.value().block(qs.offset, head * dh, qs.length, dh);
                    const auto kh = k.value().block(ks.offset, head * dh, ks.length, dh);
                    const auto vh = v.value().block(ks.offset, head * dh, ks.length, dh);
                    dv.block(ks.offset, head * dh, ks.length, dh).noalias() += p.transpose() * go;
                    Matrix dp = go * vh.transpose();
                    Vector dots = dp.cwiseProduct(p).rowwise().sum();
                    Matrix ds = p.cwiseProduct((dp.array().colwise() - dots.array()).matrix()) * scale;
                    dq.block(qs.offset, head * dh, qs.length, dh).noalias() += ds * kh;
                    dk.block(ks.offset, head * dh, ks.length, dh).noalias() += ds.transpose() * qh;
                  }
                }
                q.accumulate_grad(dq);
                k.accumulate_grad(dk);
                v.accumulate_grad(dv);
              });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_row(matmul(x, w), b); }

}  // namespace styleswap::ops
