#pragma once

// Parameter accounting of built models against closed-form counts.

#include <string>
#include <vector>

#include "json.hpp"
#include "mtsc/attention.hpp"

namespace mtsc::verify {

struct AuditItem {
  std::string name;
  std::size_t count = 0;
  std::string term;  // formula term this array is charged to, or why it is excluded
};

// Encoder classifier against (l + 9 + l/h) d^2 + (d_dataset + 2l + 11) d.
// The classification head and the positional table sit outside that scope
// and are listed under `excluded`.
struct EncoderAudit {
  std::size_t d_dataset = 0;
  AttentionConfig cfg;
  std::size_t enumerated = 0;
  double formula = 0.0;
  double delta = 0.0;  // enumerated - formula
  double approximation = 0.0;  // d_dataset * 128 + 182k
  double approximation_rel_error = 0.0;
  std::vector<AuditItem> items;
  std::vector<AuditItem> excluded;

  nlohmann::json to_json() const;
};

double encoder_formula(const AttentionConfig& cfg, std::size_t d_dataset);
EncoderAudit audit_encoder_parameters(const AttentionConfig& cfg, std::size_t d_dataset);

// FCN against (8 d_dataset + 1) * 128 + 267k and ResNet against twice the FCN.
struct ConvAudit {
  std::size_t d_dataset = 0;
  std::size_t num_classes = 0;
  std::size_t fcn = 0;
  std::size_t resnet = 0;
  double fcn_reference = 0.0;
  double fcn_rel_error = 0.0;
  double resnet_ratio = 0.0;  // resnet / fcn

  nlohmann::json to_json() const;
};

ConvAudit audit_conv_parameters(std::size_t d_dataset, std::size_t num_classes);

}  // namespace mtsc::verify
