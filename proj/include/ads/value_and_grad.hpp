#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <utility>

#include "ads/param_vector.hpp"
#include "ads/tape.hpp"

namespace ads {

// Parameter leaves on a tape, addressable by layout entry name.
using ParamLeafMap = std::unordered_map<std::string, Tape::Id>;

// A scalar loss built from tape primitives over the parameter leaves.
using DifferentiableLoss = std::function<Tape::Id(Tape&, const ParamLeafMap&)>;

ParamLeafMap make_param_leaves(Tape& tape, const ParamVector& params);

// Evaluates fn at params and returns (loss value, gradient in the same
// layout). Throws NumericError naming the offending primitive if the loss
// comes out non-finite.
std::pair<double, ParamVector> value_and_grad(const DifferentiableLoss& fn,
                                              const ParamVector& params);

}  // namespace ads
