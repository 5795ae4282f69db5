#include "styleswap/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace styleswap {

Scalar grad_check(const ScalarFn& f, Tensor w, Scalar eps, std::span<const Index> elements) {
  if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be positive");
  const bool had_rg = w.requires_grad();
  w.set_requires_grad(true);
  w.zero_grad();

  Matrix analytic = Matrix::Zero(w.rows(), w.cols());
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = f(w);
    tape.backward(loss);
    if (w.has_grad()) analytic = w.grad();
  }
  w.zero_grad();

  std::vector<Index> all;
  if (elements.empty()) {
    all.resize(static_cast<std::size_t>(w.size()));
    std::iota(all.begin(), all.end(), Index{0});
    elements = all;
  }

  NoTapeScope no_tape;
  Scalar worst = 0.0;
  Scalar* data = w.mutable_value().data();
  for (Index i : elements) {
    const Scalar saved = data[i];
    data[i] = saved + eps;
    const Scalar up = f(w).item();
    data[i] = saved - eps;
    const Scalar down = f(w).item();
    data[i] = saved;
    const Scalar numeric = (up - down) / (2.0 * eps);
    const Scalar a = analytic.data()[i];
    const Scalar denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  w.set_requires_grad(had_rg);
  return worst;
}

}  // namespace styleswap
