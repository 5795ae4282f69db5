#include <doctest.h>

#include <cmath>
#include <random>

#include "styleswap/gradcheck.hpp"
#include "styleswap/tensor.hpp"

using namespace styleswap;

namespace {

Matrix mat(Index r, Index c, std::initializer_list<Scalar> v) {
  Matrix m(r, c);
  Index i = 0;
  for (Scalar x : v) m.data()[i++] = x;
  return m;
}

Matrix random_matrix(Index r, Index c, std::mt19937_64& rng) {
  std::uniform_real_distribution<Scalar> u(-2.0, 2.0);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

// Reference attention for one head-split, straight loops.
Matrix naive_attention(const Matrix& q, const Matrix& k, const Matrix& v, Index heads, bool causal) {
  const Index d = q.cols() / heads;
  Matrix out = Matrix::Zero(q.rows(), q.cols());
  for (Index h = 0; h < heads; ++h)
    for (Index i = 0; i < q.rows(); ++i) {
      std::vector<Scalar> s;
      Scalar mx = -1e300;
      const Index n = causal ? i + 1 : k.rows();
      for (Index j = 0; j < n; ++j) {
        Scalar dot = 0;
        for (Index c = 0; c < d; ++c) dot += q(i, h * d + c) * k(j, h * d + c);
        s.push_back(dot / std::sqrt(static_cast<Scalar>(d)));
        mx = std::max(mx, s.back());
      }
      Scalar z = 0;
      for (auto& x : s) z += (x = std::exp(x - mx));
      for (Index j = 0; j < n; ++j)
        for (Index c = 0; c < d; ++c) out(i, h * d + c) += s[j] / z * v(j, h * d + c);
    }
  return out;
}

}  // namespace

TEST_SUITE("autograd") {

TEST_CASE("matmul hand cases") {
  const Tensor eye(Matrix::Identity(2, 2));
  const Tensor a(mat(2, 2, {1, 2, 3, 4}));
  CHECK(ops::matmul(eye, a).value() == a.value());
  const Tensor b(mat(2, 1, {5, 6}));
  const Matrix p = ops::matmul(a, b).value();
  CHECK(p(0, 0) == 17.0);
  CHECK(p(1, 0) == 39.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  const Tensor a(Matrix::Zero(4, 2)), b(Matrix::Zero(3, 5));
  try {
    ops::matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(shape_string(4, 2)) != std::string::npos);
    CHECK(msg.find(shape_string(3, 5)) != std::string::npos);
  }
}

TEST_CASE("layer_norm examples") {
  const Tensor ones(Matrix::Ones(1, 2)), zeros(Matrix::Zero(1, 2));
  const Matrix y = ops::layer_norm(Tensor(mat(1, 2, {1, 3})), ones, zeros, 1e-12).value();
  CHECK(y(0, 0) == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(y(0, 1) == doctest::Approx(1.0).epsilon(1e-9));

  const Tensor g(Matrix::Ones(1, 4)), b(Matrix::Zero(1, 4));
  const Matrix c = ops::layer_norm(Tensor(Matrix::Constant(2, 4, 3.5)), g, b).value();
  CHECK(c.cwiseAbs().maxCoeff() == 0.0);

  const Matrix k = ops::layer_norm(Tensor(mat(1, 4, {1, -2, 7, 0.5})), Tensor(Matrix::Zero(1, 4)),
                                   Tensor(Matrix::Constant(1, 4, 0.25)))
                       .value();
  CHECK(k.isConstant(0.25));

  CHECK_THROWS_AS(ops::layer_norm(Tensor(Matrix::Zero(2, 3)), g, b), DimensionError);
  CHECK_THROWS(ops::layer_norm(Tensor(mat(1, 2, {1, 3})), ones, zeros, 0.0));
}

TEST_CASE("softmax examples and invariants") {
  const Matrix a = ops::softmax(Tensor(mat(1, 2, {0, 0}))).value();
  CHECK(a(0, 0) == doctest::Approx(0.5));
  const Matrix b = ops::softmax(Tensor(mat(1, 2, {std::log(2.0), 0}))).value();
  CHECK(b(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(b(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  const Matrix c = ops::softmax(Tensor(mat(1, 2, {1000, 1000}))).value();
  CHECK(c.allFinite());
  CHECK(c(0, 1) == doctest::Approx(0.5));

  std::mt19937_64 rng(3);
  const Matrix z = random_matrix(5, 7, rng);
  const Matrix s = ops::softmax(Tensor(z)).value();
  for (Index i = 0; i < s.rows(); ++i) CHECK(std::abs(s.row(i).sum() - 1.0) < 1e-6);
  const Matrix shifted = ops::softmax(Tensor(Matrix(z.array() + 12.5))).value();
  CHECK((shifted - s).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("cross_entropy examples") {
  const TokenIds t{0};
  CHECK(ops::cross_entropy(Tensor(mat(1, 2, {std::log(3.0), 0})), t, -1).item() ==
        doctest::Approx(std::log(4.0 / 3.0)).epsilon(1e-12));
  const TokenIds t3{4, 1, 2};
  CHECK(ops::cross_entropy(Tensor(Matrix::Constant(3, 6, 0.7)), t3, -1).item() ==
        doctest::Approx(std::log(6.0)).epsilon(1e-12));
  const TokenIds ignored{0, 0};
  CHECK_THROWS_WITH(ops::cross_entropy(Tensor(Matrix::Zero(2, 3)), ignored, 0), doctest::Contains("empty loss"));
}

TEST_CASE("backward basics") {
  Tensor w(Matrix::Constant(2, 3, 0.3), true);
  {
    Tape tape;
    TapeScope scope(tape);
    backward(ops::sum(w));
  }
  CHECK(w.grad().isOnes());

  Tensor x = Tensor::scalar(3.0, true);
  {
    Tape tape;
    TapeScope scope(tape);
    backward(ops::mul(x, x));
  }
  CHECK(x.grad()(0, 0) == 6.0);

  Tensor frozen(Matrix::Constant(1, 2, 1.5), false);
  Tensor live(Matrix::Constant(1, 2, 2.0), true);
  {
    Tape tape;
    TapeScope scope(tape);
    backward(ops::sum(ops::mul(frozen, live)));
  }
  CHECK_FALSE(frozen.has_grad());
  CHECK(live.grad().isConstant(1.5));
}

TEST_CASE("gradients accumulate across uses and calls") {
  Tensor w(mat(1, 2, {1, -2}), true);
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = ops::sum(ops::add(w, ops::scale(w, 3.0)));
  tape.backward(loss);
  CHECK(w.grad().isConstant(4.0));
  tape.backward(loss);
  CHECK(w.grad().isConstant(8.0));
  w.zero_grad();
  tape.backward(loss);
  CHECK(w.grad().isConstant(4.0));
}

TEST_CASE("non-scalar loss is rejected") {
  Tensor w(Matrix::Ones(2, 2), true);
  Tape tape;
  TapeScope scope(tape);
  CHECK_THROWS(tape.backward(ops::relu(w)));
}

TEST_CASE("backward twice gives identical gradients") {
  std::mt19937_64 rng(11);
  Tensor a(random_matrix(4, 5, rng), true), b(random_matrix(5, 3, rng), true);
  const Tensor g(Matrix::Ones(1, 3)), bias(Matrix::Zero(1, 3));
  Matrix first;
  for (int round = 0; round < 2; ++round) {
    a.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    const TokenIds targets{0, 2, 1, 1};
    backward(ops::cross_entropy(ops::layer_norm(ops::matmul(a, b), g, bias), targets, -1));
    if (round == 0) first = a.grad();
    else CHECK(a.grad() == first);
  }
}

TEST_CASE("no tape records nothing") {
  Tensor w(Matrix::Ones(2, 2), true);
  Tape tape;
  TapeScope scope(tape);
  {
    NoTapeScope off;
    ops::sum(ops::mul(w, w));
  }
  CHECK(tape.size() == 0);
  ops::sum(w);
  CHECK(tape.size() == 1);
}

TEST_CASE("grad_check oracle examples") {
  const ScalarFn constant = [](const Tensor&) { return Tensor::scalar(4.0); };
  CHECK(grad_check(constant, Tensor(Matrix::Ones(2, 2)), 1e-4) == 0.0);
  const ScalarFn square = [](const Tensor& w) { return ops::sum(ops::mul(w, w)); };
  CHECK(grad_check(square, Tensor::scalar(3.0), 1e-4) < 1e-6);
  CHECK_THROWS(grad_check(square, Tensor::scalar(3.0), 0.0));
}

TEST_CASE("grad_check restores the tensor") {
  Tensor w(mat(1, 3, {0.1, 0.2, 0.3}));
  const Matrix before = w.value();
  grad_check([](const Tensor& x) { return ops::sum(ops::relu(x)); }, w, 1e-6);
  CHECK(w.value() == before);
  CHECK_FALSE(w.requires_grad());
}

TEST_CASE("every op passes grad_check on random small tensors") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<Index> dim(1, 8);
  for (int trial = 0; trial < 10; ++trial) {
    const Index m = dim(rng), k = dim(rng), n = dim(rng);
    Tensor a(random_matrix(m, k, rng)), b(random_matrix(k, n, rng)), c(random_matrix(m, k, rng));
    Tensor row(random_matrix(1, k, rng));
    const Tensor probe_mn(random_matrix(m, n, rng)), probe_mk(random_matrix(m, k, rng));
    auto probe = [](const Tensor& y, const Tensor& p) { return ops::sum(ops::mul(y, p)); };
    constexpr Scalar eps = 1e-6, tol = 1e-4;
    CHECK(grad_check([&](const Tensor& w) { return probe(ops::matmul(w, b), probe_mn); }, a, eps) < tol);
    CHECK(grad_check([&](const Tensor& w) { return probe(ops::matmul(a, w), probe_mn); }, b, eps) < tol);
    CHECK(grad_check([&](const Tensor& w) { return probe(ops::transpose(ops::transpose(w)), probe_mk); }, a, eps) < tol);
    CHECK(grad_check([&](const Tensor& w) { return probe(ops::add(w, c), probe_mk); }, a, eps) < tol);
    CHECK(grad_check([&](const Tensor& w) { return probe(ops::add_row(a, w), probe_mk); }, row, eps) < tol);
    CHECK(grad_check([&](const Tensor& w) { return probe(ops::mul(w, c), probe_mk); }, a, eps) < tol);
    CHECK(grad_check([&](const Tensor& w) { return probe(ops::relu(w), probe_mk); }, a, eps) < tol);
    CHECK(grad_check([&](const Tensor& w) { return probe(ops::softmax(w), probe_mk); }, a, eps) < tol);
    CHECK(grad_check([&](const Tensor& w) { return probe(ops::softmax(w, 0), probe_mk); }, a, eps) < tol);
    CHECK(grad_check([&](const Tensor& w) { return probe(ops::layer_norm(w, row, row), probe_mk); }, a, eps) < tol);
    CHECK(grad_check([&](const Tensor& w) { return probe(ops::layer_norm(a, w, row), probe_mk); }, row, eps) < tol);
    CHECK(grad_check([&](const Tensor& w) { return probe(ops::linear(a, b, w), probe_mn); },
                     Tensor(random_matrix(1, n, rng)), eps) < tol);
    TokenIds ids, targets;
    std::uniform_int_distribution<TokenId> pick(0, static_cast<TokenId>(k - 1));
    for (Index i = 0; i < m; ++i) ids.push_back(pick(rng)), targets.push_back(pick(rng));
    CHECK(grad_check([&](const Tensor& w) { return probe(ops::embedding(w, ids), probe_mk); },
                     Tensor(random_matrix(k, k, rng)), eps) < tol);
    CHECK(grad_check([&](const Tensor& w) { return ops::cross_entropy(w, targets, -1); }, a, eps) < tol);
  }
}

TEST_CASE("attention matches a straight-line reference") {
  std::mt19937_64 rng(5);
  const Matrix q = random_matrix(4, 6, rng), k = random_matrix(4, 6, rng), v = random_matrix(4, 6, rng);
  const std::vector<Segment> seg{{0, 4}};
  for (bool causal : {false, true}) {
    const Matrix got = ops::attention(Tensor(q), Tensor(k), Tensor(v), 2, seg, seg, causal).value();
    CHECK((got - naive_attention(q, k, v, 2, causal)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("packed attention keeps segments apart") {
  std::mt19937_64 rng(6);
  const Matrix q = random_matrix(5, 4, rng), k = random_matrix(5, 4, rng), v = random_matrix(5, 4, rng);
  const std::vector<Segment> segs{{0, 2}, {2, 3}};
  const Matrix got = ops::attention(Tensor(q), Tensor(k), Tensor(v), 2, segs, segs, false).value();
  const Matrix first = naive_attention(q.topRows(2), k.topRows(2), v.topRows(2), 2, false);
  const Matrix second = naive_attention(q.bottomRows(3), k.bottomRows(3), v.bottomRows(3), 2, false);
  CHECK((got.topRows(2) - first).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((got.bottomRows(3) - second).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("forward ops stay finite on finite input") {
  std::mt19937_64 rng(8);
  const Tensor z(Matrix(random_matrix(3, 5, rng) * 300.0));
  CHECK(ops::softmax(z).value().allFinite());
  CHECK(ops::layer_norm(z, Tensor(Matrix::Ones(1, 5)), Tensor(Matrix::Zero(1, 5))).value().allFinite());
  const TokenIds t{1, 2, 3};
  CHECK(std::isfinite(ops::cross_entropy(z, t, -1).item()));
}

}  // TEST_SUITE
