#include <cmath>
#include <fstream>
#include <set>

#include "doctest.h"
#include "mtsc/errors.hpp"
#include "mtsc/models.hpp"
#include "mtsc/verify/gradcheck.hpp"
#include "mtsc/verify/model_check.hpp"
#include "mtsc/verify/param_audit.hpp"
#include "support.hpp"

using namespace mtsc;
using namespace mtsc::testing;

namespace {

ModelSpec small_spec(ModelVariant v, std::size_t d_dataset = 3, std::size_t n = 10) {
  ModelSpec s;
  s.variant = v;
  s.d_dataset = d_dataset;
  s.length = n;
  s.num_classes = 3;
  s.attention.d = 8;
  s.attention.r = 4;
  return s;
}

bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

TEST_CASE("variant names round-trip and unknown names list the valid ones") {
  CHECK(all_variants().size() == 12);
  std::set<std::string> names;
  for (auto v : all_variants()) {
    names.insert(to_string(v));
    CHECK(parse_variant(to_string(v)) == v);
  }
  CHECK(names.size() == 12);
  CHECK(names.count("tps+pe") == 1);
  CHECK(names.count("sa-standalone") == 1);
  try {
    parse_variant("lstm");
    FAIL("expected a usage error");
  } catch (const UsageError& e) {
    CHECK(std::string(e.what()).find("resnet+tps+pe") != std::string::npos);
  }
}

TEST_CASE("FCN logits have one row per sample") {
  Model m = build_fcn(3, 50, 4, false, 1);
  Rng rng(1);
  CHECK(m.forward(random_tensor({2, 3, 50}, rng), true).shape() == Shape{2, 4});
  CHECK(m.forward(random_tensor({3, 50}, rng), false).shape() == Shape{1, 4});
  CHECK_THROWS_AS(m.forward(random_tensor({2, 2, 50}, rng), false), DimensionError);
}

TEST_CASE("FCN parameter count") {
  for (std::size_t d : {1, 2, 9, 61})
    for (std::size_t c : {2, 10}) {
      Model m = build_fcn(d, 16, c, false, 0);
      // conv stack 1024 d + 263,680 plus a 128 -> C head.
      CHECK(m.parameter_count() == 1024 * d + 263680 + 129 * c);
    }
}

TEST_CASE("GTA variants add three gate groups") {
  Model plain = build_fcn(2, 32, 3, false, 0);
  Model gated = build_fcn(2, 32, 3, true, 0);
  std::set<std::string> groups;
  for (const auto& p : gated.parameters())
    if (p.name.rfind("gta.", 0) == 0) groups.insert(p.name.substr(0, p.name.find('.', 4)));
  CHECK(groups == std::set<std::string>{"gta.1", "gta.2", "gta.3"});
  // Each block: w1 [1, C], w2 [T/16, T], w3 [T, T/16] with T = 32.
  CHECK(gated.parameter_count() - plain.parameter_count() == (128 + 256 + 128) + 3 * 2 * 64);
  CHECK(gated.gates(Tensor::zeros({2, 32})).size() == 3);
  CHECK_THROWS_AS(gated.forward(Tensor::zeros({1, 2, 31}), false), DimensionError);
}

TEST_CASE("ResNet parameter count and shapes") {
  for (std::size_t d : {1, 2, 9, 61}) {
    Model m = build_resnet(d, 16, 5, false, 0);
    CHECK(m.parameter_count() == 503424 + 576 * d + 129 * 5);
  }
  Model m = build_resnet(3, 20, 4, true, 2);
  Rng rng(2);
  Tensor logits = m.forward(random_tensor({2, 3, 20}, rng), true);
  CHECK(logits.shape() == Shape{2, 4});
  CHECK(all_finite(logits));
}

TEST_CASE("ResNet with zeroed conv weights is carried by its shortcuts") {
  Model m = build_resnet(3, 12, 3, false, 4);
  for (const auto& p : m.parameters())
    if (p.name.find(".conv") != std::string::npos && p.name.find("weight") != std::string::npos) {
      Tensor t = p.tensor;
      for (auto& v : t.mutable_data()) v = 0.0;
    }
  Rng rng(4);
  Tensor logits = m.forward(random_tensor({4, 3, 12}, rng), true);
  CHECK(all_finite(logits));
  double spread = 0.0;
  for (double v : logits.data()) spread = std::max(spread, std::fabs(v - logits.data()[0]));
  CHECK(spread > 0.0);
}

TEST_CASE("standalone encoder parameter accounting") {
  AttentionConfig cfg;  // d = 128, l = 1, h = 1
  Model core = build_tps_standalone(2, 64, 3, false, cfg, 0);
  std::size_t head = 128 * 3 + 3;
  CHECK(core.parameter_count() - head == 182144);
  Model with_pe = build_tps_standalone(2, 64, 3, true, cfg, 0);
  CHECK(with_pe.parameter_count() - core.parameter_count() == 64 * 128);
  Rng rng(5);
  Tensor x = random_tensor({2, 2, 64}, rng);
  CHECK(core.forward(x, false).shape() == Shape{2, 3});
  CHECK(core.parameter_count() == count_parameters(core).total);
}

TEST_CASE("encoder audit is exact for one layer and one head") {
  AttentionConfig cfg;
  for (std::size_t dd : {1, 2, 144, 1345}) {
    auto a = verify::audit_encoder_parameters(cfg, dd);
    CHECK(a.delta == 0.0);
    CHECK(a.enumerated == 11 * 128 * 128 + (dd + 13) * 128);
    CHECK(a.approximation_rel_error < 0.005);
    for (const auto& item : a.items) CHECK(item.term != "unmapped");
    CHECK(a.excluded.size() == 3);  // head weight, head bias, positional table
  }
  auto two = verify::audit_encoder_parameters(cfg, 2);
  CHECK(two.to_json()["enumerated"] == 182144);
}

TEST_CASE("encoder audit off the one-layer one-head configuration") {
  // Each extra layer brings 11 d^2 + 12 d weights while the closed form grows
  // by (1 + 1/h) d^2 + 2d, so the two part ways.
  AttentionConfig cfg;
  cfg.layers = 2;
  auto a = verify::audit_encoder_parameters(cfg, 2);
  CHECK(a.formula > verify::encoder_formula(AttentionConfig{}, 2));
  CHECK(a.enumerated == 2 * (11 * 128 * 128 + 12 * 128) + 3 * 128);
  CHECK(a.delta != 0.0);
}

TEST_CASE("attaching an encoder to conv bases") {
  Rng rng(6);
  for (auto v : {ModelVariant::fcn_tps, ModelVariant::fcn_tps_pe, ModelVariant::resnet_tps}) {
    ModelSpec s = small_spec(v);
    Model m = build_model(s, 3);
    CHECK(m.has_encoder());
    bool bridge = false;
    for (const auto& p : m.parameters()) bridge = bridge || p.name.rfind("bridge.", 0) == 0;
    CHECK(bridge);  // conv width 128 differs from d = 8
    CHECK(m.forward(random_tensor({2, 3, 10}, rng), true).shape() == Shape{2, 3});
  }
  ModelSpec s = small_spec(ModelVariant::fcn);
  s.attention.d = 128;
  Rng build(1);
  Model direct = attach_tps(build_base(BaseKind::fcn, s, false, build), AttentionKind::sa, s.attention, false, build, 3);
  for (const auto& p : direct.parameters()) CHECK(p.name.rfind("bridge.", 0) != 0);

  Rng again(2);
  Model standalone = build_model(small_spec(ModelVariant::tps_standalone), 0);
  CHECK_THROWS_AS(attach_tps(std::move(standalone), AttentionKind::tps, s.attention, false, again, 3),
                  CompositionError);
}

TEST_CASE("every variant yields finite logits and a stable parameter count") {
  Rng rng(7);
  for (auto v : all_variants()) {
    Model m = build_model(small_spec(v), 11);
    std::size_t before = m.parameter_count();
    Tensor logits = m.forward(random_tensor({3, 3, 10}, rng), true);
    CHECK_MESSAGE(all_finite(logits), to_string(v));
    CHECK(logits.shape() == Shape{3, 3});
    CHECK(m.parameter_count() == before);
  }
}

TEST_CASE("construction is deterministic in the seed") {
  ModelSpec s = small_spec(ModelVariant::resnet_tps_pe);
  Model a = build_model(s, 9), b = build_model(s, 9), c = build_model(s, 10);
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(max_abs_diff(a.parameters()[i].tensor.data(), b.parameters()[i].tensor.data()) == 0.0);
    differs = differs || max_abs_diff(a.parameters()[i].tensor.data(), c.parameters()[i].tensor.data()) > 0.0;
  }
  CHECK(differs);
}

TEST_CASE("model spec JSON round-trip") {
  ModelSpec s = small_spec(ModelVariant::sa_pe);
  s.attention.scaling = ScalingMode::learnable;
  CHECK(ModelSpec::from_json(s.to_json()).to_json() == s.to_json());
  CHECK_THROWS_AS(ModelSpec::from_json({{"variant", "nope"}, {"d_dataset", 1}, {"length", 1}, {"num_classes", 2}}),
                  UsageError);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  ModelSpec s = small_spec(ModelVariant::fcn_gta);
  Model m = build_model(s, 21);
  Rng rng(8);
  Tensor x = random_tensor({4, 3, 10}, rng);
  m.forward(x, true);  // moves the running statistics off their defaults
  nlohmann::json meta = {{"spec", s.to_json()}, {"seed", 21}, {"classes", {"a", "b", "c"}}};
  const std::string path = "test_models_ckpt.bin";
  save_checkpoint(path, m, meta);
  auto [loaded, meta_back] = load_checkpoint(path);
  CHECK(meta_back == meta);
  CHECK(max_abs_diff(loaded.forward(x, false).data(), m.forward(x, false).data()) == 0.0);
  CHECK(encode_checkpoint(snapshot(loaded, meta)) == encode_checkpoint(snapshot(m, meta)));

  std::string bytes = encode_checkpoint(snapshot(m, meta));
  std::string flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x10;
  CHECK_THROWS_AS(decode_checkpoint(flipped), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 9)), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint("not a checkpoint"), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint("does/not/exist.bin"), CheckpointError);

  Model other = build_model(small_spec(ModelVariant::fcn), 21);
  CHECK_THROWS_AS(restore(other, decode_checkpoint(bytes)), CheckpointError);
  std::remove(path.c_str());
}

TEST_CASE("gradient checks for composed variants") {
  verify::GradCheckOptions opt;
  opt.max_coords_per_param = 4;
  for (bool training : {false, true})
    for (auto v : all_variants()) {
      ModelSpec s = small_spec(v, 2, 8);
      s.attention.d = 4;
      Model m = build_model(s, 5);
      opt.seed = derive_seed(6, to_string(v));
      auto rep = verify::check_model_gradients(m, training, opt, derive_seed(5, to_string(v)));
      CHECK_MESSAGE(rep.pass, (to_string(v) + (training ? " train " : " eval ") + rep.to_json().dump()));
    }
}
