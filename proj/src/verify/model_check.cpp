#include "mtsc/verify/model_check.hpp"

namespace mtsc::verify {

bool feeds_batch_norm(const std::string& name) {
  return name.find("conv") != std::string::npos && name.size() > 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
}

GradCheckReport check_model_gradients(const Model& model, bool training, const GradCheckOptions& options,
                                      std::uint64_t seed, std::size_t batch) {
  const auto& spec = model.spec();
  Rng rng(derive_seed(seed, "model-gradcheck"));
  std::vector<double> xs(batch * spec.d_dataset * spec.length), ws(batch * spec.num_classes);
  for (auto& v : xs) v = rng.uniform(-2.0, 2.0);
  for (auto& v : ws) v = rng.uniform(0.5, 1.5);
  Tensor x({batch, spec.d_dataset, spec.length}, std::move(xs));
  Tensor w({batch, spec.num_classes}, std::move(ws));
  std::vector<Parameter> params;
  for (const auto& p : model.parameters())
    if (!training || !feeds_batch_norm(p.name)) params.push_back(p);
  return gradcheck([&] { return ops::sum(ops::mul(model.forward(x, training), w)); }, params, options);
}

}  // namespace mtsc::verify
