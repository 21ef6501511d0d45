#include "mtsc/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "mtsc/data.hpp"
#include "mtsc/errors.hpp"
#include "mtsc/models.hpp"
#include "mtsc/train.hpp"
#include "mtsc/verify/model_check.hpp"
#include "mtsc/verify/param_audit.hpp"

namespace mtsc::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

// A flag that overrides one value of the effective configuration.
struct Flag {
  std::string name;
  std::string pointer;
  char type;  // 'u' unsigned, 'f' float, 's' string, 'b' switch
  std::string help;
};

struct Command {
  std::string name;
  CLI::App* app = nullptr;
  json defaults;
  std::vector<Flag> flags;
  std::map<std::string, std::string> values;
  std::map<std::string, bool> switches;
  std::map<std::string, CLI::Option*> options;
  std::string config_path;
};

std::string default_output_dir() {
  const char* env = std::getenv("MTSC_OUTPUT_DIR");
  return env && *env ? env : "mtsc-output";
}

json synth_defaults() {
  json j = data::SyntheticSpec{}.to_json();
  j["seed"] = nullptr;  // null: use the root seed
  return j;
}

json data_defaults() { return {{"train", nullptr}, {"test", nullptr}, {"normalize", "auto"}}; }

json train_defaults() {
  json j = train::TrainConfig{}.to_json();
  j.erase("seed");
  return j;
}

const std::vector<Flag> kDataFlags = {
    {"--data", "/data/train", 's', "training (or evaluated) .ts file"},
    {"--test-data", "/data/test", 's', "test .ts file"},
    {"--normalize", "/data/normalize", 's', "z-normalisation: auto (files only), on, off"},
    {"--synth", "/synth/kind", 's', "synthetic generator: positioned-bump, shifted-pattern, frequency-mix"},
    {"--n-samples", "/synth/n_samples", 'u', "synthetic samples, split evenly train/test"},
    {"--dims", "/synth/dims", 'u', "synthetic dimensions"},
    {"--length", "/synth/length", 'u', "synthetic series length"},
    {"--classes", "/synth/n_classes", 'u', "synthetic classes"},
    {"--noise", "/synth/noise", 'f', "synthetic noise standard deviation"},
    {"--synth-seed", "/synth/seed", 'u', "synthetic data seed (default: --seed)"},
};

const std::vector<Flag> kAttentionFlags = {
    {"--d", "/attention/d", 'u', "encoder width"},
    {"--heads", "/attention/heads", 'u', "attention heads"},
    {"--layers", "/attention/layers", 'u', "encoder layers"},
    {"--b", "/attention/b", 'f', "spread floor of the pseudo-Gaussian"},
    {"--r", "/attention/r", 'u', "temporal-attention reduction factor"},
    {"--scaling", "/attention/scaling", 's', "identity or learnable"},
    {"--squared-distance", "/attention/squared_distance", 'b', "use (i-j)^2 in the pseudo-Gaussian"},
};

const std::vector<Flag> kTrainFlags = {
    {"--lr", "/train/learning_rate", 'f', "initial learning rate"},
    {"--epochs", "/train/epochs", 'u', "training epochs"},
    {"--batch-size", "/train/batch_size", 'u', "mini-batch size"},
    {"--patience", "/train/plateau_patience", 'u', "plateau scheduler patience"},
    {"--factor", "/train/plateau_factor", 'f', "plateau scheduler factor"},
    {"--val-fraction", "/train/validation_fraction", 'f', "held-out share of train for the scheduler"},
    {"--stop-at-train-accuracy", "/train/stop_at_train_accuracy", 'f', "stop once train accuracy reaches this"},
    {"--runs", "/runs", 'u', "number of runs, seeds seed..seed+runs-1"},
    {"--record-time", "/record_time", 'b', "store wall time in result.json"},
};

const std::vector<Flag> kShapeFlags = {
    {"--dims", "/dims", 'u', "input dimensions"},
    {"--length", "/length", 'u', "series length"},
    {"--classes", "/classes", 'u', "number of classes"},
};

void append(std::vector<Flag>& to, const std::vector<Flag>& from) { to.insert(to.end(), from.begin(), from.end()); }

json parse_value(const Flag& f, const std::string& text) {
  try {
    std::size_t used = 0;
    switch (f.type) {
      case 'u': {
        if (text.empty() || text[0] == '-') throw std::invalid_argument("negative");
        unsigned long long v = std::stoull(text, &used);
        if (used != text.size()) throw std::invalid_argument("trailing");
        return v;
      }
      case 'f': {
        double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument("trailing");
        return v;
      }
      default: return text;
    }
  } catch (const std::logic_error&) {
    throw UsageError(f.name + ": cannot parse '" + text + "' as " + (f.type == 'u' ? "a non-negative integer" : "a number"));
  }
}

// Every key of `given` must exist in `schema`; null schema entries accept anything.
void check_keys(const json& given, const json& schema, const std::string& where) {
  if (!given.is_object()) throw UsageError("config " + (where.empty() ? "root" : where) + " must be a JSON object");
  for (const auto& [key, value] : given.items()) {
    if (!schema.contains(key)) throw UsageError("unknown config key '" + where + "/" + key + "'");
    if (schema.at(key).is_object() && !value.is_null()) check_keys(value, schema.at(key), where + "/" + key);
  }
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config file '" + path + "' is not valid JSON: " + e.what());
  }
}

// defaults < config file < flags.
json effective_config(Command& c) {
  json eff = c.defaults;
  if (!c.config_path.empty()) {
    json file = read_json_file(c.config_path);
    json schema = c.defaults;
    if (schema.contains("synth") && schema["synth"].is_null()) schema["synth"] = synth_defaults();
    check_keys(file, schema, "");
    file.erase("command");
    eff.merge_patch(file);
    // merge_patch drops keys set to null; restore them.
    for (const auto& [key, value] : c.defaults.items())
      if (!eff.contains(key)) eff[key] = value;
  }
  for (const auto& f : c.flags) {
    const bool given = f.type == 'b' ? c.switches[f.name] : c.options.at(f.name)->count() > 0;
    if (!given) continue;
    json::json_pointer ptr(f.pointer);
    if (f.pointer.rfind("/synth/", 0) == 0 && eff["synth"].is_null()) eff["synth"] = synth_defaults();
    eff[ptr] = f.type == 'b' ? json(true) : parse_value(f, c.values[f.name]);
  }
  return eff;
}

template <class F>
auto from_config(const char* what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad ") + what + " configuration: " + e.what());
  }
}

std::uint64_t root_seed(const json& eff) {
  return from_config("seed", [&] { return eff.at("seed").get<std::uint64_t>(); });
}

std::optional<data::SyntheticSpec> synth_spec(const json& eff) {
  if (!eff.contains("synth") || eff["synth"].is_null()) return std::nullopt;
  json j = eff["synth"];
  if (j["seed"].is_null()) j["seed"] = root_seed(eff);
  return data::SyntheticSpec::from_json(j);
}

AttentionConfig attention_config(const json& eff) {
  return from_config("attention", [&] { return AttentionConfig::from_json(eff.at("attention")); });
}

train::TrainConfig train_config(const json& eff) {
  auto c = train::TrainConfig::from_json(eff.at("train"));
  c.seed = root_seed(eff);
  return c;
}

ModelVariant variant_of(const json& eff) {
  return parse_variant(from_config("variant", [&] { return eff.at("variant").get<std::string>(); }));
}

std::size_t get_size(const json& eff, const char* key) {
  return from_config(key, [&] { return eff.at(key).get<std::size_t>(); });
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << bytes;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

fs::path output_dir(const json& eff) {
  return from_config("output_dir", [&] { return fs::path(eff.at("output_dir").get<std::string>()); });
}

std::string with_commas(std::size_t n) {
  std::string s = std::to_string(n);
  for (int i = int(s.size()) - 3; i > 0; i -= 3) s.insert(std::size_t(i), ",");
  return s;
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

// ------------------------------------------------------------------- data

struct Loaded {
  data::Dataset train;
  std::optional<data::Dataset> test;
  bool normalized = false;
  std::size_t length = 0;
};

Loaded load_data(const json& eff, std::ostream& err, std::optional<std::size_t> length = std::nullopt,
                 std::optional<bool> normalize = std::nullopt) {
  Loaded l;
  const json& d = eff.at("data");
  bool from_file = false;
  if (!d.at("train").is_null()) {
    from_file = true;
    auto read = [&](const std::string& path) {
      auto r = data::parse_ts_file(path);
      for (const auto& w : r.warnings) err << "warning: " << path << ": " << w << '\n';
      return r.dataset;
    };
    l.train = read(d.at("train").get<std::string>());
    l.train.split = "train";
    if (!d.at("test").is_null()) {
      l.test = read(d.at("test").get<std::string>());
      l.test->split = "test";
    }
  } else if (auto spec = synth_spec(eff)) {
    auto [tr, te] = data::generate_synthetic(*spec);
    l.train = std::move(tr);
    l.test = std::move(te);
  } else {
    if (!d.at("test").is_null()) throw UsageError("--test-data needs --data");
    throw IoError("no dataset given: pass --data FILE or --synth KIND");
  }
  if (l.test) {
    if (l.test->dims != l.train.dims)
      throw DimensionError("test set has " + std::to_string(l.test->dims) + " dimensions, train has " +
                           std::to_string(l.train.dims));
    if (l.test->class_names != l.train.class_names)
      throw StructureError("test set declares different class labels from the training set", 0);
  }

  const std::string mode = d.at("normalize").get<std::string>();
  if (mode != "auto" && mode != "on" && mode != "off")
    throw UsageError("--normalize must be auto, on or off, got '" + mode + "'");
  l.normalized = normalize.value_or(mode == "on" || (mode == "auto" && from_file));
  if (l.normalized) {
    l.train = data::znormalize(l.train);
    if (l.test) l.test = data::znormalize(*l.test);
  }

  l.length = length.value_or(std::max(l.train.max_length(), l.test ? l.test->max_length() : 0));
  auto pad = [&](data::Dataset& ds) {
    if (ds.max_length() > l.length)
      throw DimensionError(ds.split + " set holds a series of length " + std::to_string(ds.max_length()) +
                           ", longer than the model length " + std::to_string(l.length));
    ds = data::pad_to(ds, l.length);
  };
  pad(l.train);
  if (l.test) pad(*l.test);
  return l;
}

const data::Dataset& pick_split(const Loaded& l, const json& eff) {
  const std::string split = eff.at("split").get<std::string>();
  if (split != "train" && split != "test") throw UsageError("--split must be train or test");
  if (split == "test" && l.test) return *l.test;
  return l.train;
}

// ------------------------------------------------------------- subcommands

int cmd_train(const json& eff, std::ostream& out, std::ostream& err) {
  const ModelVariant variant = variant_of(eff);
  const AttentionConfig attention = attention_config(eff);
  const train::TrainConfig base_cfg = train_config(eff);
  const std::size_t runs = get_size(eff, "runs");
  if (runs == 0) throw UsageError("--runs must be at least 1");
  const bool record_time = eff.at("record_time").get<bool>();
  const Loaded l = load_data(eff, err);

  ModelSpec spec;
  spec.variant = variant;
  spec.d_dataset = l.train.dims;
  spec.length = l.length;
  spec.num_classes = l.train.num_classes();
  spec.attention = attention;
  spec.validate();

  const fs::path dir = output_dir(eff);
  for (std::size_t r = 0; r < runs; ++r) {
    const std::uint64_t seed = base_cfg.seed + r;
    train::TrainConfig cfg = base_cfg;
    cfg.seed = seed;
    Model model = build_model(spec, seed);
    train::RunResult result = train::fit(model, l.train, nullptr, cfg);
    if (!record_time) result.wall_time_seconds.reset();
    if (l.test) result.test_accuracy = train::evaluate(model, *l.test, cfg.batch_size).accuracy;

    const fs::path run_dir = dir / (to_string(variant) + "-seed" + std::to_string(seed));
    json meta = {{"spec", spec.to_json()},
                 {"seed", seed},
                 {"dataset", l.train.name},
                 {"class_names", l.train.class_names},
                 {"normalize", l.normalized},
                 {"length", l.length}};
    std::error_code ec;
    fs::create_directories(run_dir, ec);
    save_checkpoint((run_dir / "checkpoint.mtsc").string(), model, meta);
    write_file(run_dir / "result.json", result.to_json().dump(2) + "\n");

    out << "run seed " << seed << ": epochs " << result.history.size() << ", train accuracy "
        << fixed(result.train_accuracy);
    if (result.val_accuracy) out << ", val accuracy " << fixed(*result.val_accuracy);
    if (result.test_accuracy) out << ", test accuracy " << fixed(*result.test_accuracy);
    out << "\n  wrote " << (run_dir / "checkpoint.mtsc").string() << " and " << (run_dir / "result.json").string()
        << '\n';
  }
  return kOk;
}

std::pair<Model, json> open_checkpoint(const json& eff) {
  if (eff.at("checkpoint").is_null()) throw UsageError("--checkpoint is required");
  return load_checkpoint(eff.at("checkpoint").get<std::string>());
}

Loaded load_for(const json& meta, const json& eff, std::ostream& err) {
  std::size_t length = 0;
  bool normalize = false;
  try {
    length = meta.at("length").get<std::size_t>();
    normalize = meta.at("normalize").get<bool>();
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata lacks preprocessing: ") + e.what());
  }
  return load_data(eff, err, length, normalize);
}

int cmd_eval(const json& eff, std::ostream& out, std::ostream& err) {
  auto [model, meta] = open_checkpoint(eff);
  const Loaded l = load_for(meta, eff, err);
  const data::Dataset& ds = pick_split(l, eff);
  auto ev = train::evaluate(model, ds, get_size(eff, "batch_size"));
  json report = {{"checkpoint", eff.at("checkpoint")},
                 {"dataset", ds.name},
                 {"split", ds.split},
                 {"samples", ds.size()},
                 {"accuracy", ev.accuracy},
                 {"loss", ev.loss},
                 {"predictions", ev.predictions}};
  const fs::path path = output_dir(eff) / "eval.json";
  write_file(path, report.dump(2) + "\n");
  out << "accuracy " << fixed(ev.accuracy) << " on " << ds.size() << " " << (ds.split.empty() ? "" : ds.split + " ")
      << "samples, loss " << fixed(ev.loss, 6) << "\n  wrote " << path.string() << '\n';
  return kOk;
}

ModelSpec shape_spec(const json& eff) {
  ModelSpec spec;
  spec.variant = variant_of(eff);
  spec.d_dataset = get_size(eff, "dims");
  spec.length = get_size(eff, "length");
  spec.num_classes = get_size(eff, "classes");
  spec.attention = attention_config(eff);
  spec.validate();
  return spec;
}

int cmd_gradcheck(const json& eff, std::ostream& out, std::ostream&) {
  const ModelSpec spec = shape_spec(eff);
  const std::uint64_t seed = root_seed(eff);
  const std::string mode = eff.at("mode").get<std::string>();
  std::vector<bool> modes;
  if (mode == "eval" || mode == "both") modes.push_back(false);
  if (mode == "train" || mode == "both") modes.push_back(true);
  if (modes.empty()) throw UsageError("--mode must be eval, train or both");

  verify::GradCheckOptions opt;
  opt.max_coords_per_param = get_size(eff, "coords_per_param");
  opt.seed = derive_seed(seed, "coordinates");
  Model model = build_model(spec, seed);

  bool pass = true;
  json report = {{"variant", to_string(spec.variant)}, {"spec", spec.to_json()}, {"modes", json::object()}};
  for (bool training : modes) {
    auto rep = verify::check_model_gradients(model, training, opt, seed);
    pass = pass && rep.pass;
    const char* name = training ? "train" : "eval";
    report["modes"][name] = rep.to_json();
    char line[256];
    out << "mode " << name << " (step " << sci(rep.step) << ", tolerance " << sci(rep.tolerance) << ")\n";
    std::snprintf(line, sizeof line, "  %-36s %8s %12s %8s %10s\n", "parameter", "checked", "max rel err", "failing",
                  "nonsmooth");
    out << line;
    for (const auto& p : rep.params) {
      std::snprintf(line, sizeof line, "  %-36s %8zu %12.3e %8zu %10zu\n", p.name.c_str(), p.checked, p.max_rel_error,
                    p.failing.size(), p.nonsmooth.size());
      out << line;
    }
    out << "  " << (rep.pass ? "PASS" : "FAIL") << ": " << rep.checked << " coordinates, max rel err "
        << sci(rep.max_rel_error) << ", " << rep.nonsmooth << " at kinks\n";
  }
  report["pass"] = pass;
  const fs::path path = output_dir(eff) / "gradcheck.json";
  write_file(path, report.dump(2) + "\n");
  out << "wrote " << path.string() << '\n';
  return pass ? kOk : kVerificationFailed;
}

std::string shape_text(const Shape& s) {
  std::string t;
  for (std::size_t i = 0; i < s.size(); ++i) t += (i ? "x" : "") + std::to_string(s[i]);
  return t;
}

int cmd_params(const json& eff, std::ostream& out, std::ostream&) {
  const ModelSpec spec = shape_spec(eff);
  Model model = build_model(spec, root_seed(eff));
  json report = {{"variant", to_string(spec.variant)}, {"spec", spec.to_json()}};
  json list = json::array();
  char line[256];
  for (const auto& p : model.parameters()) {
    std::snprintf(line, sizeof line, "  %-36s %-14s %12s\n", p.name.c_str(), shape_text(p.tensor.shape()).c_str(),
                  with_commas(p.tensor.numel()).c_str());
    out << line;
    list.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"count", p.tensor.numel()}});
  }
  out << "total parameters: " << with_commas(model.parameter_count()) << '\n';
  report["parameters"] = list;
  report["total"] = model.parameter_count();

  if (spec.variant == ModelVariant::tps_standalone || spec.variant == ModelVariant::tps_pe) {
    auto a = verify::audit_encoder_parameters(spec.attention, spec.d_dataset);
    out << "encoder audit (head and positional table excluded):\n"
        << "  enumerated " << with_commas(a.enumerated) << "\n"
        << "  formula    " << with_commas(std::size_t(a.formula)) << "\n"
        << "  delta      " << a.delta << "\n"
        << "  vs d_dataset*128 + 182000 = " << with_commas(std::size_t(a.approximation)) << ": relative error "
        << fixed(a.approximation_rel_error * 100.0, 3) << "%\n";
    report["encoder_audit"] = a.to_json();
  } else if (spec.variant == ModelVariant::fcn || spec.variant == ModelVariant::resnet) {
    auto a = verify::audit_conv_parameters(spec.d_dataset, spec.num_classes);
    out << "conv audit:\n"
        << "  fcn " << with_commas(a.fcn) << " vs (8*d_dataset+1)*128 + 267000 = "
        << with_commas(std::size_t(a.fcn_reference)) << ": relative error " << fixed(a.fcn_rel_error * 100.0, 3)
        << "%\n"
        << "  resnet " << with_commas(a.resnet) << " = " << fixed(a.resnet_ratio, 3) << " x fcn\n";
    report["conv_audit"] = a.to_json();
  }
  const fs::path path = output_dir(eff) / "params.json";
  write_file(path, report.dump(2) + "\n");
  out << "wrote " << path.string() << '\n';
  return kOk;
}

void write_matrix_csv(const fs::path& path, std::span<const double> m, std::size_t n) {
  std::string s;
  for (std::size_t j = 0; j < n; ++j) s += (j ? ",t" : "t") + std::to_string(j);
  s += '\n';
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) s += (j ? "," : "") + data::format_double(m[i * n + j]);
    s += '\n';
  }
  write_file(path, s);
}

int cmd_dump_attention(const json& eff, std::ostream& out, std::ostream& err) {
  auto [model, meta] = open_checkpoint(eff);
  if (!model.has_encoder())
    throw UsageError("variant " + to_string(model.spec().variant) + " has no self-attention encoder to dump");
  const Loaded l = load_for(meta, eff, err);
  const data::Dataset& ds = pick_split(l, eff);
  const std::size_t index = get_size(eff, "index");
  if (index >= ds.size())
    throw DimensionError("sample index " + std::to_string(index) + " out of range for " + std::to_string(ds.size()) +
                         " samples");
  const std::size_t layer = get_size(eff, "layer"), head = get_size(eff, "head");
  const auto& cfg = model.spec().attention;
  if (layer < 1 || layer > cfg.layers) throw UsageError("--layer must lie in 1.." + std::to_string(cfg.layers));
  if (head < 1 || head > cfg.heads) throw UsageError("--head must lie in 1.." + std::to_string(cfg.heads));

  std::vector<AttentionOutput> trace;
  {
    NoGradGuard guard;
    model.forward(data::batch_tensor(ds, {index}), false, &trace);
  }
  const AttentionOutput& t = trace.at(layer - 1);
  const std::size_t n = t.attention.shape()[2];
  const std::size_t offset = (head - 1) * n * n;
  const fs::path dir = output_dir(eff);
  std::vector<std::string> written;
  write_matrix_csv(dir / "A.csv", t.attention.data().subspan(offset, n * n), n);
  write_matrix_csv(dir / "A1.csv", t.content.data().subspan(offset, n * n), n);
  written = {"A.csv", "A1.csv"};
  if (t.positional.defined()) {
    write_matrix_csv(dir / "A2.csv", t.positional.data(), n);
    std::string s = "sigma_hat,sigma\n";
    for (std::size_t i = 0; i < n; ++i)
      s += data::format_double(t.sigma_hat.data()[i]) + "," + data::format_double(t.sigma.data()[i]) + "\n";
    write_file(dir / "sigma.csv", s);
    written.push_back("A2.csv");
    written.push_back("sigma.csv");
  } else {
    out << "note: plain self-attention has no A2 or sigma\n";
  }
  out << "sample " << index << " of the " << ds.split << " split (label " << ds.class_names[ds.samples[index].label]
      << "), layer " << layer << ", head " << head << ", N = " << n << '\n';
  for (const auto& w : written) out << "  wrote " << (dir / w).string() << '\n';
  return kOk;
}

int cmd_synth(const json& eff, std::ostream& out, std::ostream&) {
  auto spec = synth_spec(eff);
  auto [train, test] = data::generate_synthetic(*spec);
  const fs::path dir = output_dir(eff);
  const fs::path tr = dir / (train.name + "_TRAIN.ts"), te = dir / (train.name + "_TEST.ts");
  std::ostringstream a, b;
  data::write_ts(a, train);
  data::write_ts(b, test);
  write_file(tr, a.str());
  write_file(te, b.str());
  out << "wrote " << tr.string() << " (" << train.size() << " samples) and " << te.string() << " (" << test.size()
      << " samples)\n"
      << "1-NN test accuracy " << fixed(data::nearest_neighbour_accuracy(train, test)) << '\n';
  return kOk;
}

int cmd_aggregate(const json& eff, std::ostream& out, std::ostream&) {
  const fs::path root =
      eff.at("results_dir").is_null() ? output_dir(eff) : fs::path(eff.at("results_dir").get<std::string>());
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw IoError("results directory '" + root.string() + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(root, ec))
    if (entry.is_regular_file() && entry.path().filename() == "result.json") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no result.json files under '" + root.string() + "'");
  std::vector<train::RunResult> results;
  for (const auto& f : files) {
    std::ifstream in(f);
    try {
      results.push_back(train::RunResult::from_json(json::parse(in)));
    } catch (const json::exception& e) {
      throw ParseError(f.string() + ": " + e.what(), 0);
    } catch (const UsageError& e) {
      throw ParseError(f.string() + ": " + e.what(), 0);
    }
  }
  auto agg = train::aggregate(results);
  char cell[64];
  out << "mean test accuracy over " << files.size() << " runs\n";
  std::snprintf(cell, sizeof cell, "%-28s", "dataset");
  out << cell;
  for (const auto& v : agg.variants) {
    std::snprintf(cell, sizeof cell, " %14s", v.c_str());
    out << cell;
  }
  out << '\n';
  for (std::size_t d = 0; d < agg.datasets.size(); ++d) {
    std::snprintf(cell, sizeof cell, "%-28s", agg.datasets[d].c_str());
    out << cell;
    for (const auto& a : agg.mean_accuracy[d]) {
      std::snprintf(cell, sizeof cell, " %14s", a ? fixed(*a).c_str() : "-");
      out << cell;
    }
    out << '\n';
  }
  if (agg.rank_average) {
    std::snprintf(cell, sizeof cell, "%-28s", "rank average");
    out << cell;
    for (double r : *agg.rank_average) {
      std::snprintf(cell, sizeof cell, " %14s", fixed(r, 3).c_str());
      out << cell;
    }
    out << '\n';
  } else {
    out << "rank average skipped: some (dataset, variant) cells have no runs\n";
  }
  const fs::path path = output_dir(eff) / "aggregate.json";
  write_file(path, agg.to_json().dump(2) + "\n");
  out << "wrote " << path.string() << '\n';
  return kOk;
}

// -------------------------------------------------------------- assembly

using Handler = int (*)(const json&, std::ostream&, std::ostream&);

struct Spec {
  std::string name, help;
  json defaults;
  std::vector<Flag> flags;
  Handler handler;
};

std::vector<Spec> command_specs() {
  const json attention = AttentionConfig{}.to_json();
  std::vector<Spec> specs;

  Spec train{"train", "train a model and write checkpoint.mtsc and result.json per run", {}, {}, cmd_train};
  train.defaults = {{"variant", "fcn"},   {"data", data_defaults()}, {"synth", nullptr},
                    {"attention", attention}, {"train", train_defaults()}, {"runs", 1}, {"record_time", false}};
  train.flags = {{"--variant", "/variant", 's', "model variant"}};
  append(train.flags, kDataFlags);
  append(train.flags, kAttentionFlags);
  append(train.flags, kTrainFlags);
  specs.push_back(train);

  Spec eval{"eval", "evaluate a checkpoint and write eval.json", {}, {}, cmd_eval};
  eval.defaults = {{"checkpoint", nullptr}, {"data", data_defaults()}, {"synth", nullptr}, {"split", "test"},
                   {"batch_size", 64}};
  eval.flags = {{"--checkpoint", "/checkpoint", 's', "checkpoint file"},
                {"--split", "/split", 's', "train or test (test falls back to --data)"},
                {"--batch-size", "/batch_size", 'u', "evaluation batch size"}};
  append(eval.flags, kDataFlags);
  specs.push_back(eval);

  Spec grad{"gradcheck", "finite-difference check of a model's gradients", {}, {}, cmd_gradcheck};
  grad.defaults = {{"variant", "fcn"}, {"dims", 2}, {"length", 8}, {"classes", 3}, {"attention", attention},
                   {"mode", "both"}, {"coords_per_param", 8}};
  grad.flags = {{"--variant", "/variant", 's', "model variant"},
                {"--mode", "/mode", 's', "eval, train or both"},
                {"--coords", "/coords_per_param", 'u', "coordinates checked per tensor (0 = all)"}};
  append(grad.flags, kShapeFlags);
  append(grad.flags, kAttentionFlags);
  specs.push_back(grad);

  Spec params{"params", "list parameters and audit the counts", {}, {}, cmd_params};
  params.defaults = {{"variant", "fcn"}, {"dims", 2}, {"length", 64}, {"classes", 2}, {"attention", attention}};
  params.flags = {{"--variant", "/variant", 's', "model variant"}};
  append(params.flags, kShapeFlags);
  append(params.flags, kAttentionFlags);
  specs.push_back(params);

  Spec dump{"dump-attention", "write A, A1, A2 and sigma of one sample as CSV", {}, {}, cmd_dump_attention};
  dump.defaults = {{"checkpoint", nullptr}, {"data", data_defaults()}, {"synth", nullptr}, {"split", "test"},
                   {"index", 0},           {"layer", 1},              {"head", 1}};
  dump.flags = {{"--checkpoint", "/checkpoint", 's', "checkpoint file"},
                {"--split", "/split", 's', "train or test"},
                {"--index", "/index", 'u', "sample index"},
                {"--layer", "/layer", 'u', "encoder layer, 1-based"},
                {"--head", "/head", 'u', "attention head, 1-based"}};
  append(dump.flags, kDataFlags);
  specs.push_back(dump);

  Spec synth{"synth", "write a synthetic train/test pair as .ts files", {}, {}, cmd_synth};
  synth.defaults = {{"synth", synth_defaults()}};
  for (const auto& f : kDataFlags)
    if (f.pointer.rfind("/synth/", 0) == 0) synth.flags.push_back(f);
  specs.push_back(synth);

  Spec agg{"aggregate", "mean test accuracy and rank average over result.json files", {}, {}, cmd_aggregate};
  agg.defaults = {{"results_dir", nullptr}};
  agg.flags = {{"--results", "/results_dir", 's', "directory searched for result.json (default: output dir)"}};
  specs.push_back(agg);

  for (auto& s : specs) {
    json common = {{"command", s.name}, {"seed", 0}, {"output_dir", default_output_dir()}};
    common.update(s.defaults);
    s.defaults = common;
    s.flags.push_back({"--seed", "/seed", 'u', "root seed"});
    s.flags.push_back({"--output-dir", "/output_dir", 's', "artifact directory (default $MTSC_OUTPUT_DIR)"});
  }
  return specs;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multivariate time-series classification with temporal attention blocks", "mtsc"};
  app.require_subcommand(1);
  const auto specs = command_specs();
  std::deque<Command> commands;
  for (const auto& s : specs) {
    Command& c = commands.emplace_back();
    c.name = s.name;
    c.defaults = s.defaults;
    c.flags = s.flags;
    c.app = app.add_subcommand(s.name, s.help);
    c.app->add_option("--config", c.config_path, "JSON config file (flags override it)");
    for (const auto& f : c.flags) {
      if (f.type == 'b')
        c.app->add_flag(f.name, c.switches[f.name], f.help);
      else
        c.options[f.name] = c.app->add_option(f.name, c.values[f.name], f.help);
    }
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  for (std::size_t i = 0; i < commands.size(); ++i) {
    Command& c = commands[i];
    if (!c.app->parsed()) continue;
    json eff = effective_config(c);
    out << "config " << eff.dump() << '\n';
    return specs[i].handler(eff, out, err);
  }
  return kConfigError;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    return dispatch(args, out, err);
  } catch (const DivergenceError& e) {
    err << "error: training diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const CapacityError& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }
}

}  // namespace mtsc::cli
