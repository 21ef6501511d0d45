// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails. `--quick` skips the two training experiments.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <unistd.h>

#include "mtsc/cli.hpp"
#include "mtsc/train.hpp"
#include "mtsc/verify/model_check.hpp"
#include "mtsc/verify/param_audit.hpp"
#include "oracle_bridge.hpp"

using namespace mtsc;
using namespace mtsc::testing;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kEncoderApproxTol = 0.005;
constexpr double kFcnTol = 0.01;
constexpr double kResnetRatioTol = 0.15;
constexpr double kOracleTol = 1e-10;
constexpr double kGradTol = 1e-4;
constexpr double kGradStep = 1e-5;
constexpr double kRowSumTol = 1e-9;
constexpr double kChanceBand = 0.10;
constexpr double kTpsMinAccuracy = 0.90;
constexpr double kPermutationTol = 1e-9;

struct Outcome {
  bool pass;
  std::string detail;
};

int failures = 0;

void report(const std::string& name, const std::function<Outcome()>& check) {
  auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("%s %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Outcome encoder_audit() {
  AttentionConfig cfg;
  std::string detail;
  bool ok = true;
  for (std::size_t dd : {1, 2, 144, 1345}) {
    auto a = verify::audit_encoder_parameters(cfg, dd);
    ok = ok && a.delta == 0.0 && a.approximation_rel_error <= kEncoderApproxTol;
    detail += fmt("d_dataset=%zu enumerated=%zu delta=%g approx_err=%.4f%%; ", dd, a.enumerated, a.delta,
                  100.0 * a.approximation_rel_error);
  }
  return {ok, detail};
}

Outcome conv_audit() {
  std::string detail;
  bool ok = true;
  // Class counts of the reference archives with these dimensions.
  const std::pair<std::size_t, std::size_t> cases[] = {{2, 10}, {9, 9}, {61, 2}};
  for (auto [dd, classes] : cases) {
    auto a = verify::audit_conv_parameters(dd, classes);
    bool fcn_ok = a.fcn_rel_error <= kFcnTol;
    bool res_ok = std::fabs(a.resnet_ratio - 2.0) <= kResnetRatioTol * 2.0;
    ok = ok && fcn_ok && res_ok;
    detail += fmt("d_dataset=%zu C=%zu fcn=%zu err=%.3f%%%s resnet/fcn=%.3f%s; ", dd, classes, a.fcn, 100.0 * a.fcn_rel_error,
                  fcn_ok ? "" : " (out)", a.resnet_ratio, res_ok ? "" : " (out)");
  }
  return {ok, detail};
}

Outcome oracle_equivalence() {
  double worst[4] = {0, 0, 0, 0};
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    {
      Rng rng(derive_seed(seed, "acc-cta"));
      std::size_t d = 1 + rng.below(8), n = 1 + rng.below(16), r = 1 + rng.below(4);
      ParamStore store;
      CtaBlock blk(ParamBuilder(store, rng), d, r);
      Tensor f = random_tensor({d, n}, rng);
      GateResult got = blk.forward(f);
      auto want = oracle::attention(oracle::Kind::cta, weights_of(blk), to_matrix(f));
      worst[0] = std::max({worst[0], max_abs_diff(got.out.data(), want.out.v),
                           max_abs_diff(got.attention.data(), want.attention.v)});
    }
    {
      Rng rng(derive_seed(seed, "acc-gta"));
      std::size_t d = 1 + rng.below(8), n = 1 + rng.below(16), r = 1 + rng.below(8);
      ParamStore store;
      GtaBlock blk(ParamBuilder(store, rng), d, n, r);
      Tensor f = random_tensor({d, n}, rng);
      GateResult got = blk.forward(f);
      auto want = oracle::attention(oracle::Kind::gta, weights_of(blk), to_matrix(f));
      worst[1] = std::max({worst[1], max_abs_diff(got.out.data(), want.out.v),
                           max_abs_diff(got.attention.data(), want.attention.v)});
    }
    for (AttentionKind kind : {AttentionKind::sa, AttentionKind::tps}) {
      const bool tps = kind == AttentionKind::tps;
      Rng rng(derive_seed(seed, tps ? "acc-tps" : "acc-sa"));
      SelfAttentionCase c = random_self_attention_case(rng);
      ParamStore store;
      SelfAttention blk(ParamBuilder(store, rng), kind, c.cfg);
      randomize(blk.value_bias, rng);
      if (blk.log_scale.defined()) randomize(blk.log_scale, rng);
      Tensor x = random_tensor({c.n, c.cfg.d}, rng);
      AttentionOutput got = blk.forward(x);
      auto want = oracle::attention(tps ? oracle::Kind::tps : oracle::Kind::sa, weights_of(blk), to_matrix(x));
      double& w = worst[tps ? 3 : 2];
      w = std::max({w, max_abs_diff(got.out.data(), want.out.v), max_abs_diff(got.attention.data(), want.attention.v),
                    max_abs_diff(got.content.data(), want.content.v)});
      if (tps)
        w = std::max({w, max_abs_diff(got.positional.data(), want.positional.v),
                      max_abs_diff(got.sigma_hat.data(), want.sigma_hat), max_abs_diff(got.sigma.data(), want.sigma)});
    }
  }
  bool ok = true;
  for (double w : worst) ok = ok && w < kOracleTol;
  return {ok, fmt("100 cases each, max |diff| cta=%.2e gta=%.2e sa=%.2e tps=%.2e (tol %.0e)", worst[0], worst[1],
                  worst[2], worst[3], kOracleTol)};
}

verify::GradCheckOptions grad_options() {
  verify::GradCheckOptions opt;
  opt.step = kGradStep;
  opt.tolerance = kGradTol;
  return opt;
}

verify::GradCheckReport check_block(const std::function<Tensor()>& forward, const ParamStore& store, Rng& rng) {
  Tensor probe;
  {
    NoGradGuard guard;
    probe = random_tensor(forward().shape(), rng, false, 0.5, 1.5);
  }
  return verify::gradcheck([&] { return ops::sum(ops::mul(forward(), probe)); }, store.parameters(), grad_options());
}

Outcome gradient_suite() {
  Rng rng(31);
  std::vector<std::string> failed;
  std::size_t checks = 0, coords = 0, kinks = 0;
  double worst = 0.0;
  auto record = [&](const std::string& name, const verify::GradCheckReport& rep) {
    ++checks;
    coords += rep.checked;
    kinks += rep.nonsmooth;
    worst = std::max(worst, rep.max_rel_error);
    if (!rep.pass) failed.push_back(name);
  };
  {
    ParamStore store;
    CtaBlock blk(ParamBuilder(store, rng), 6, 2);
    Tensor f = random_tensor({2, 6, 7}, rng);
    record("cta", check_block([&] { return blk.forward(f).out; }, store, rng));
  }
  {
    ParamStore store;
    GtaBlock blk(ParamBuilder(store, rng), 4, 12, 3);
    Tensor f = random_tensor({2, 4, 12}, rng);
    record("gta", check_block([&] { return blk.forward(f).out; }, store, rng));
  }
  for (auto kind : {AttentionKind::sa, AttentionKind::tps})
    for (auto scaling : {ScalingMode::identity, ScalingMode::learnable})
      for (bool squared : {false, true}) {
        if (kind == AttentionKind::sa && (scaling == ScalingMode::learnable || squared)) continue;
        AttentionConfig cfg;
        cfg.d = 4;
        cfg.heads = 2;
        cfg.b = 0.6;
        cfg.scaling = scaling;
        cfg.squared_distance = squared;
        ParamStore store;
        SelfAttention blk(ParamBuilder(store, rng), kind, cfg);
        randomize(blk.value_bias, rng);
        if (blk.log_scale.defined()) randomize(blk.log_scale, rng, -0.5, 0.5);
        Tensor x = random_tensor({2, 9, 4}, rng);
        record(kind == AttentionKind::sa ? "sa" : "tps", check_block([&] { return blk.forward(x).out; }, store, rng));
      }
  {
    ParamStore store;
    PositionalEncoding pe(ParamBuilder(store, rng), 12, 3);
    Tensor x = random_tensor({2, 10, 3}, rng);
    record("pe", check_block([&] { return pe.apply(x); }, store, rng));
  }
  for (auto kind : {AttentionKind::sa, AttentionKind::tps}) {
    AttentionConfig cfg;
    cfg.d = 4;
    cfg.layers = 2;
    ParamStore store;
    Encoder enc(ParamBuilder(store, rng), kind, cfg);
    Tensor x = random_tensor({2, 12, 4}, rng);
    record("encoder", check_block([&] { return enc.forward(x); }, store, rng));
  }
  auto opt = grad_options();
  opt.max_coords_per_param = 4;
  for (bool training : {false, true})
    for (auto v : all_variants()) {
      ModelSpec s;
      s.variant = v;
      s.d_dataset = 2;
      s.length = 8;
      s.num_classes = 3;
      s.attention.d = 4;
      s.attention.r = 4;
      Model m = build_model(s, 5);
      opt.seed = derive_seed(6, to_string(v));
      record(to_string(v) + (training ? "/train" : "/eval"),
             verify::check_model_gradients(m, training, opt, derive_seed(5, to_string(v))));
    }
  std::string detail = fmt("%zu checks, %zu coordinates, %zu at kinks, max rel err %.2e", checks, coords, kinks, worst);
  for (const auto& f : failed) detail += " failed:" + f;
  return {failed.empty(), detail};
}

Outcome normalization_invariants() {
  std::size_t violations = 0;
  double worst_row = 0.0, min_spread_gap = 1e300;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(derive_seed(seed, "acc-invariants"));
    SelfAttentionCase c = random_self_attention_case(rng);
    ParamStore store;
    SelfAttention tps(ParamBuilder(store, rng), AttentionKind::tps, c.cfg);
    randomize(tps.value_bias, rng);
    if (tps.log_scale.defined()) randomize(tps.log_scale, rng);
    AttentionOutput r = tps.forward(random_tensor({c.n, c.cfg.d}, rng, false, -3.0, 3.0));
    const std::size_t n = c.n;
    for (std::size_t h = 0; h < c.cfg.heads; ++h)
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += r.attention.at({h, i, j});
        worst_row = std::max(worst_row, std::fabs(s - 1.0));
      }
    for (std::size_t i = 0; i < n; ++i) {
      if (r.positional.at({i, i}) != 1.0) ++violations;
      for (std::size_t j = 0; j < n; ++j) {
        double a = r.positional.at({i, j});
        if (!(a > 0.0 && a <= 1.0)) ++violations;
      }
      min_spread_gap = std::min({min_spread_gap, r.sigma.at({i}) - c.cfg.b, r.sigma_hat.at({i}) - c.cfg.b});
    }
  }
  bool ok = worst_row <= kRowSumTol && violations == 0 && min_spread_gap >= 0.0;
  return {ok, fmt("1000 cases, max |row sum - 1| %.2e, A2 violations %zu, min(sigma - b) %.3g", worst_row, violations,
                  min_spread_gap)};
}

// Logits of a model without positional encoding, before and after shuffling time.
double permutation_gap(const Model& m, const data::Dataset& ds, std::uint64_t seed) {
  Rng rng(seed);
  NoGradGuard guard;
  double worst = 0.0;
  for (std::size_t s = 0; s < std::min<std::size_t>(ds.samples.size(), 10); ++s) {
    Tensor x = data::batch_tensor(ds, {s});
    const std::size_t d = x.size(1), n = x.size(2);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    shuffle(perm, rng);
    std::vector<double> v(d * n);
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t t = 0; t < n; ++t) v[c * n + t] = x.at({0, c, perm[t]});
    Tensor a = m.forward(x, false), b = m.forward(Tensor({1, d, n}, std::move(v)), false);
    worst = std::max(worst, max_abs_diff(a.data(), b.data()));
  }
  return worst;
}

Outcome positional_experiment() {
  constexpr int kSeeds = 5;
  double sa_sum = 0.0, tps_sum = 0.0, gap = 0.0;
  std::string per_seed;
  for (int seed = 0; seed < kSeeds; ++seed) {
    data::SyntheticSpec sp;
    sp.n_samples = 120;
    sp.seed = std::uint64_t(seed);
    auto [train_set, test_set] = data::generate_synthetic(sp);
    double acc[2];
    for (int k = 0; k < 2; ++k) {
      ModelSpec s;
      s.variant = k == 0 ? ModelVariant::sa_standalone : ModelVariant::tps_standalone;
      s.d_dataset = sp.dims;
      s.length = sp.length;
      s.num_classes = sp.n_classes;
      s.attention.d = 32;
      Model m = build_model(s, std::uint64_t(seed));
      train::TrainConfig cfg;
      cfg.learning_rate = 1e-3;
      cfg.epochs = 300;
      cfg.seed = std::uint64_t(seed);
      train::fit(m, train_set, nullptr, cfg);
      acc[k] = train::evaluate(m, test_set).accuracy;
      if (k == 0) gap = std::max(gap, permutation_gap(m, test_set, derive_seed(seed, "perm")));
    }
    sa_sum += acc[0];
    tps_sum += acc[1];
    per_seed += fmt(" [%d: sa %.3f tps %.3f]", seed, acc[0], acc[1]);
  }
  const double chance = 1.0 / 3.0, sa = sa_sum / kSeeds, tps = tps_sum / kSeeds;
  bool ok = std::fabs(sa - chance) <= kChanceBand && tps >= kTpsMinAccuracy && gap <= kPermutationTol;
  return {ok, fmt("mean test accuracy sa-standalone %.3f (chance %.3f +/- %.2f), tps-standalone %.3f (>= %.2f), "
                  "sa logit change under time shuffles %.1e;",
                  sa, chance, kChanceBand, tps, kTpsMinAccuracy, gap) +
                  per_seed};
}

Outcome overfit_smoke() {
  data::SyntheticSpec sp;
  sp.kind = data::SyntheticKind::shifted_pattern;
  sp.n_samples = 20;
  sp.n_classes = 2;
  sp.length = 32;
  sp.noise = 0.1;
  auto train_set = data::generate_synthetic(sp).first;
  bool ok = train_set.samples.size() == 10;
  std::string detail = fmt("%zu samples;", train_set.samples.size());
  for (auto v : all_variants()) {
    if (base_of(v) == BaseKind::dense) continue;
    ModelSpec s;
    s.variant = v;
    s.d_dataset = sp.dims;
    s.length = sp.length;
    s.num_classes = sp.n_classes;
    Model m = build_model(s, 0);
    train::TrainConfig cfg;
    cfg.epochs = 300;
    cfg.validation_fraction = 0.0;
    cfg.stop_at_train_accuracy = 1.0;
    auto r = train::fit(m, train_set, nullptr, cfg);
    ok = ok && r.train_accuracy == 1.0;
    detail += fmt(" %s %.2f@%zu", to_string(v).c_str(), r.train_accuracy, r.history.size());
  }
  return {ok, detail};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// Every file under `root`, keyed by relative path.
std::map<std::string, std::string> snapshot_tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
  return files;
}

Outcome cli_determinism() {
  const fs::path base = fs::temp_directory_path() / ("mtsc_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(base);
  auto run_all = [&](const fs::path& dir) {
    const std::string out = dir.string();
    auto sh = [&](std::vector<std::string> args) {
      std::ostringstream o, e;
      args.push_back("--output-dir");
      args.push_back(out);
      int code = cli::run(args, o, e);
      if (code != 0) throw std::runtime_error(args[0] + " exited " + std::to_string(code) + ": " + e.str());
      return o.str();
    };
    std::string stdout_all;
    stdout_all += sh({"synth", "--synth", "shifted-pattern", "--n-samples", "16", "--length", "16", "--seed", "3"});
    for (const char* variant : {"tps-standalone", "fcn+gta"})
      stdout_all += sh({"train", "--variant", variant, "--synth", "positioned-bump", "--n-samples", "24", "--length",
                        "16", "--d", "8", "--epochs", "3", "--batch-size", "8", "--seed", "4"});
    const std::string ckpt = (dir / "tps-standalone-seed4" / "checkpoint.mtsc").string();
    const std::vector<std::string> data = {"--synth", "positioned-bump", "--n-samples", "24", "--length", "16", "--seed", "4"};
    auto with_data = [&](std::vector<std::string> args) {
      args.insert(args.end(), data.begin(), data.end());
      return args;
    };
    stdout_all += sh(with_data({"eval", "--checkpoint", ckpt}));
    stdout_all += sh(with_data({"dump-attention", "--checkpoint", ckpt, "--index", "1"}));
    stdout_all += sh({"gradcheck", "--variant", "tps-standalone", "--seed", "2"});
    stdout_all += sh({"params", "--variant", "resnet+tps"});
    stdout_all += sh({"aggregate", "--results", out});
    auto files = snapshot_tree(dir);
    files["<stdout>"] = stdout_all;
    return files;
  };
  auto a = run_all(base);
  fs::remove_all(base);
  auto b = run_all(base);
  fs::remove_all(base);
  std::vector<std::string> differing;
  for (const auto& [name, bytes] : a)
    if (!b.count(name) || b.at(name) != bytes) differing.push_back(name);
  if (a.size() != b.size()) differing.push_back("<file set>");
  std::string detail = fmt("synth, train x2, eval, dump-attention, gradcheck, params, aggregate: %zu artifacts", a.size());
  for (const auto& d : differing) detail += " differs:" + d;
  return {differing.empty(), detail};
}

Outcome rank_average_fixture() {
  // Rows are datasets, columns methods; higher accuracy ranks first and ties
  // share the mean of their ranks.
  std::vector<std::vector<std::optional<double>>> acc = {
      {0.90, 0.80, 0.70},
      {0.60, 0.60, 0.90},
      {0.50, 0.70, 0.60},
  };
  const std::vector<double> want = {(1.0 + 2.5 + 3.0) / 3.0, (2.0 + 2.5 + 1.0) / 3.0, (3.0 + 1.0 + 2.0) / 3.0};
  auto got = train::rank_average(acc);
  double worst = 0.0;
  for (std::size_t i = 0; i < want.size(); ++i) worst = std::max(worst, std::fabs(got.at(i) - want[i]));
  return {worst < 1e-12, fmt("got %.4f %.4f %.4f, want %.4f %.4f %.4f", got[0], got[1], got[2], want[0], want[1], want[2])};
}

}  // namespace

int main(int argc, char** argv) {
  const bool quick = argc > 1 && std::string(argv[1]) == "--quick";
  report("encoder parameter audit", encoder_audit);
  report("conv parameter audit", conv_audit);
  report("oracle equivalence", oracle_equivalence);
  report("gradient suite", gradient_suite);
  report("normalization invariants", normalization_invariants);
  if (!quick) {
    report("positional sensitivity", positional_experiment);
    report("overfit smoke", overfit_smoke);
  }
  report("cli determinism", cli_determinism);
  report("rank average", rank_average_fixture);
  return failures == 0 ? 0 : 1;
}
