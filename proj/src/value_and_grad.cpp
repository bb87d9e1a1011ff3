#include "ads/value_and_grad.hpp"

#include <cmath>
#include <stdexcept>

#include "ads/errors.hpp"

namespace ads {

ParamLeafMap make_param_leaves(Tape& tape, const ParamVector& params) {
  ParamLeafMap leaves;
  leaves.reserve(params.layout().size());
  for (const auto& e : params.layout()) leaves.emplace(e.name, tape.leaf(params.tensor(e.name)));
  return leaves;
}

std::pair<double, ParamVector> value_and_grad(const DifferentiableLoss& fn,
                                              const ParamVector& params) {
  Tape tape;
  ParamLeafMap leaves = make_param_leaves(tape, params);
  const Tape::Id loss = fn(tape, leaves);
  if (tape.val(loss).numel() != 1)
    throw std::invalid_argument("value_and_grad: loss must be scalar");
  const double value = tape.val(loss).data[0];
  if (!std::isfinite(value)) {
    tape.throw_if_nonfinite();
    throw NumericError("loss", "non-finite loss with finite intermediate values");
  }
  tape.backward(loss);
  ParamVector grad = ParamVector::zeros_like(params);
  for (const auto& e : params.layout()) {
    const Tensor& g = tape.grad(leaves.at(e.name));
    std::copy(g.data.begin(), g.data.end(), grad.values().begin() + static_cast<long>(e.offset));
  }
  return {value, grad};
}

}  // namespace ads
