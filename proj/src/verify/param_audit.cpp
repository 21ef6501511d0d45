#include "mtsc/verify/param_audit.hpp"

#include <cmath>

#include "mtsc/models.hpp"

namespace mtsc::verify {

namespace {

bool ends_with(const std::string& s, const std::string& tail) {
  return s.size() >= tail.size() && s.compare(s.size() - tail.size(), tail.size(), tail) == 0;
}

// Which closed-form term a weight array is charged to.
std::string term_of(const std::string& name) {
  if (name == "input.weight") return "d_dataset*d";
  if (name == "input.bias") return "d: input projection bias";
  for (const char* proj : {"w_q", "w_k", "w_v"})
    if (ends_with(name, std::string("attention.") + proj)) return "d^2: attention projection";
  if (ends_with(name, "ff_in.weight") || ends_with(name, "ff_out.weight")) return "d^2: feed-forward (4 d^2 each)";
  if (ends_with(name, "ff_in.bias")) return "d: feed-forward hidden bias (4d)";
  if (ends_with(name, "ff_out.bias")) return "d: feed-forward output bias";
  if (ends_with(name, "value_bias")) return "d: value bias";
  if (ends_with(name, "w_sigma_hat") || ends_with(name, "w_sigma")) return "d: spread projection";
  if (ends_with(name, "gamma") || ends_with(name, "beta")) return "d: layer norm";
  if (ends_with(name, "log_scale")) return "h: learnable scaling (no formula term)";
  return "unmapped";
}

}  // namespace

double encoder_formula(const AttentionConfig& cfg, std::size_t d_dataset) {
  const double l = double(cfg.layers), h = double(cfg.heads), d = double(cfg.d);
  return (l + 9.0 + l / h) * d * d + (double(d_dataset) + 2.0 * l + 11.0) * d;
}

EncoderAudit audit_encoder_parameters(const AttentionConfig& cfg, std::size_t d_dataset) {
  EncoderAudit a;
  a.d_dataset = d_dataset;
  a.cfg = cfg;
  ModelSpec spec;
  spec.variant = ModelVariant::tps_pe;
  spec.d_dataset = d_dataset;
  spec.length = 1;
  spec.num_classes = 2;
  spec.attention = cfg;
  Model m = build_model(spec, 0);
  for (const auto& p : m.parameters()) {
    if (p.name.rfind("head.", 0) == 0)
      a.excluded.push_back({p.name, p.tensor.numel(), "classification head"});
    else if (p.name.rfind("pe.", 0) == 0)
      a.excluded.push_back({p.name, p.tensor.numel(), "positional table (N x d)"});
    else {
      a.items.push_back({p.name, p.tensor.numel(), term_of(p.name)});
      a.enumerated += p.tensor.numel();
    }
  }
  a.formula = encoder_formula(cfg, d_dataset);
  a.delta = double(a.enumerated) - a.formula;
  a.approximation = double(d_dataset) * 128.0 + 182000.0;
  a.approximation_rel_error = std::fabs(double(a.enumerated) - a.approximation) / a.approximation;
  return a;
}

nlohmann::json EncoderAudit::to_json() const {
  auto list = [](const std::vector<AuditItem>& items) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& i : items) j.push_back({{"name", i.name}, {"count", i.count}, {"term", i.term}});
    return j;
  };
  return {{"d_dataset", d_dataset},
          {"attention", cfg.to_json()},
          {"enumerated", enumerated},
          {"formula", formula},
          {"delta", delta},
          {"approximation", approximation},
          {"approximation_rel_error", approximation_rel_error},
          {"items", list(items)},
          {"excluded", list(excluded)}};
}

ConvAudit audit_conv_parameters(std::size_t d_dataset, std::size_t num_classes) {
  ConvAudit a;
  a.d_dataset = d_dataset;
  a.num_classes = num_classes;
  a.fcn = build_fcn(d_dataset, 16, num_classes, false, 0).parameter_count();
  a.resnet = build_resnet(d_dataset, 16, num_classes, false, 0).parameter_count();
  a.fcn_reference = (8.0 * double(d_dataset) + 1.0) * 128.0 + 267000.0;
  a.fcn_rel_error = std::fabs(double(a.fcn) - a.fcn_reference) / a.fcn_reference;
  a.resnet_ratio = double(a.resnet) / double(a.fcn);
  return a;
}

nlohmann::json ConvAudit::to_json() const {
  return {{"d_dataset", d_dataset},     {"num_classes", num_classes},     {"fcn", fcn},
          {"resnet", resnet},           {"fcn_reference", fcn_reference}, {"fcn_rel_error", fcn_rel_error},
          {"resnet_ratio", resnet_ratio}};
}

}  // namespace mtsc::verify
