#pragma once

// Whole-model gradient check: finite differences of sum(w * logits) for a
// random input batch and random positive weights w.

#include "mtsc/models.hpp"
#include "mtsc/verify/gradcheck.hpp"

namespace mtsc::verify {

// In training mode batch norm removes any constant added before it, so the
// biases of the convolutions feeding it have an exact zero gradient that
// finite differences only resolve to round-off. Those are skipped there.
bool feeds_batch_norm(const std::string& name);

GradCheckReport check_model_gradients(const Model& model, bool training, const GradCheckOptions& options,
                                      std::uint64_t seed, std::size_t batch = 2);

}  // namespace mtsc::verify
