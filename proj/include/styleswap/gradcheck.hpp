#pragma once

#include <functional>
#include <span>

#include "styleswap/tensor.hpp"

namespace styleswap {

using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Compares reverse-mode gradients of f at w against central differences.
/// Returns max |a - n| / max(|a|, |n|, 1e-8) over the checked elements
/// (all of w when `elements` is empty). w's values and gradient state are
/// restored on return.
Scalar grad_check(const ScalarFn& f, Tensor w, Scalar eps, std::span<const Index> elements = {});

}  // namespace styleswap
