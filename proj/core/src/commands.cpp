#include "qalign/commands.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <map>
#include <sstream>

#include "json.hpp"

#include "qalign/metrics.hpp"
#include "qalign/rng.hpp"

#ifndef QALIGN_VERSION
#define QALIGN_VERSION "dev"
#endif

namespace qalign {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string tool_version() { return QALIGN_VERSION; }

OutputFormat parse_format(const std::string& text) {
  if (text == "csv") return OutputFormat::csv;
  if (text == "json") return OutputFormat::json;
  if (text == "both") return OutputFormat::both;
  throw ValidationError("--format must be csv, json or both, got '" + text + "'");
}

int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::validation:
      return 2;
    case ErrorKind::numerical:
      return 4;
    case ErrorKind::format:
    case ErrorKind::corruption:
    case ErrorKind::data:
    case ErrorKind::dimension:
    case ErrorKind::undefined_metric:
    case ErrorKind::io:
      return 3;
  }
  return 3;
}

double cross_corr_threshold(std::size_t n) { return 0.02 + 5.0 / std::sqrt(static_cast<double>(n)); }

double signal_noise_threshold(std::size_t n) { return 0.05 + 5.0 / std::sqrt(static_cast<double>(n)); }

// ---- synth spec parsing ---------------------------------------------------

namespace {

[[noreturn]] void schema_error(const std::string& path, const std::string& what) {
  throw ValidationError("field '" + path + "': " + what);
}

const json& require(const json& obj, const std::string& key, const std::string& path) {
  if (!obj.is_object() || !obj.contains(key)) schema_error(path + key, "required");
  return obj[key];
}

/// Field that may also be spelled with a short alias; errors name the long form.
const json& aliased(const json& obj, const std::string& key, const std::string& alias, const std::string& path) {
  if (obj.contains(key)) return obj[key];
  if (obj.contains(alias)) return obj[alias];
  schema_error(path + key, "required");
}

std::size_t as_count(const json& v, const std::string& path) {
  if (!v.is_number_integer() || v.get<std::int64_t>() < 1) schema_error(path, "must be a positive integer");
  return v.get<std::size_t>();
}

double as_number(const json& v, const std::string& path) {
  if (!v.is_number()) schema_error(path, "must be a number");
  return v.get<double>();
}

std::string as_string(const json& v, const std::string& path) {
  if (!v.is_string()) schema_error(path, "must be a string");
  return v.get<std::string>();
}

FamilySpec parse_family_field(const json& obj, const std::string& path) {
  const std::string name = obj.contains("family") ? as_string(obj["family"], path + "family") : "gaussian";
  const double nu = obj.contains("nu") ? as_number(obj["nu"], path + "nu") : 0.0;
  try {
    return parse_family(name, nu);
  } catch (const ValidationError& e) {
    schema_error(path + (name == "student_t" ? "nu" : "family"), e.what());
  }
}

CovarianceSpec parse_covariance(const json& obj, const std::string& path) {
  CovarianceSpec cov;
  if (!obj.contains("covariance")) return cov;
  const json& c = obj["covariance"];
  const std::string p = path + "covariance.";
  const std::string type = c.is_string() ? c.get<std::string>() : as_string(require(c, "type", p), p + "type");
  if (type == "identity") {
    cov.type = CovarianceSpec::Type::identity;
  } else if (type == "diagonal") {
    cov.type = CovarianceSpec::Type::diagonal;
    const json& s = require(c, "scales", p);
    if (!s.is_array()) schema_error(p + "scales", "must be a list of numbers");
    for (std::size_t i = 0; i < s.size(); ++i) {
      cov.scales.push_back(as_number(s[i], p + "scales[" + std::to_string(i) + "]"));
    }
  } else if (type == "random_spd") {
    cov.type = CovarianceSpec::Type::random_spd;
    cov.condition_number = as_number(require(c, "condition_number", p), p + "condition_number");
  } else {
    schema_error(p + "type", "unknown covariance type '" + type + "'");
  }
  return cov;
}

std::vector<OutlierChannel> parse_outliers(const json& obj, const std::string& path) {
  std::vector<OutlierChannel> out;
  if (!obj.contains("outliers")) return out;
  const json& list = obj["outliers"];
  if (!list.is_array()) schema_error(path + "outliers", "must be a list");
  for (std::size_t i = 0; i < list.size(); ++i) {
    const std::string p = path + "outliers[" + std::to_string(i) + "]";
    const json& o = list[i];
    OutlierChannel oc;
    if (o.is_array() && o.size() == 2) {
      oc.channel = as_count(json(o[0].get<std::int64_t>() + 1), p + "[0]") - 1;
      oc.factor = as_number(o[1], p + "[1]");
    } else {
      const json& ch = require(o, "channel", p + ".");
      if (!ch.is_number_integer() || ch.get<std::int64_t>() < 0) schema_error(p + ".channel", "must be >= 0");
      oc.channel = ch.get<std::size_t>();
      oc.factor = as_number(require(o, "factor", p + "."), p + ".factor");
    }
    out.push_back(oc);
  }
  return out;
}

}  // namespace

SynthSpec parse_synth_spec(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("synth spec is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ValidationError("synth spec must be a JSON object");

  SynthSpec spec;
  if (doc.contains("seed")) {
    if (!doc["seed"].is_number_unsigned() && !doc["seed"].is_number_integer()) schema_error("seed", "must be an integer");
    spec.seed = doc["seed"].get<std::uint64_t>();
  }

  json acts = require(doc, "activations", "");
  if (acts.is_object()) acts = json::array({acts});
  if (!acts.is_array() || acts.empty()) schema_error("activations", "must be a non-empty list");
  for (std::size_t i = 0; i < acts.size(); ++i) {
    const std::string p = "activations[" + std::to_string(i) + "].";
    const json& a = acts[i];
    if (!a.is_object()) schema_error(p, "must be an object");
    SynthActivations s;
    s.name = a.contains("name") ? as_string(a["name"], p + "name") : (i == 0 ? "x" : "x" + std::to_string(i));
    s.channels = as_count(aliased(a, "channels", "d", p), p + "channels");
    s.tokens = as_count(aliased(a, "tokens", "n", p), p + "tokens");
    s.dist.family = parse_family_field(a, p);
    s.dist.covariance = parse_covariance(a, p);
    s.dist.outliers = parse_outliers(a, p);
    try {
      s.dist.validate(s.channels);
    } catch (const ValidationError& e) {
      schema_error(p.substr(0, p.size() - 1), e.what());
    }
    spec.activations.push_back(std::move(s));
  }

  if (doc.contains("layers")) {
    const json& layers = doc["layers"];
    if (!layers.is_array()) schema_error("layers", "must be a list");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layers[" + std::to_string(i) + "].";
      const json& l = layers[i];
      if (!l.is_object()) schema_error(p, "must be an object");
      SynthLayer s;
      s.name = as_string(require(l, "name", p), p + "name");
      s.input = l.contains("input") ? as_string(l["input"], p + "input") : spec.activations.front().name;
      const auto it = std::find_if(spec.activations.begin(), spec.activations.end(),
                                   [&](const SynthActivations& a) { return a.name == s.input; });
      if (it == spec.activations.end()) schema_error(p + "input", "no activations named '" + s.input + "'");
      s.d_out = l.contains("d_out") ? as_count(l["d_out"], p + "d_out") : it->channels;
      s.family = parse_family_field(l, p);
      spec.layers.push_back(std::move(s));
    }
  }
  return spec;
}

TensorBundle synthesize(const SynthSpec& spec) {
  TensorBundle bundle;
  std::map<std::string, std::size_t> channels;
  for (const auto& a : spec.activations) {
    const Seed seed{mix64(spec.seed ^ fnv1a64("activations:" + a.name))};
    ActivationSet x = gen_activations(a.channels, a.tokens, a.dist, seed);
    bundle.add(a.name, TensorKind::activations, x.data());
    channels[a.name] = a.channels;
  }
  for (const auto& l : spec.layers) {
    const Seed seed{mix64(spec.seed ^ fnv1a64("layer:" + l.name))};
    LinearLayer layer = gen_layer(l.name, l.d_out, channels.at(l.input), l.family, seed);
    bundle.add(l.name, TensorKind::weight, layer.weight(), l.input);
  }
  return bundle;
}

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_outputs(const CommonOptions& opts, const std::string& stem, const std::string& csv,
                   const std::string& json_text) {
  if (opts.out.empty()) return;
  if (opts.format != OutputFormat::json) write_text(opts.out / (stem + ".csv"), csv);
  if (opts.format != OutputFormat::csv) write_text(opts.out / (stem + ".json"), json_text);
}

}  // namespace

TensorBundle cmd_synth(const fs::path& spec_file, const CommonOptions& opts) {
  SynthSpec spec = parse_synth_spec(read_text(spec_file));
  if (opts.seed) spec.seed = *opts.seed;
  TensorBundle bundle = synthesize(spec);
  if (!opts.out.empty()) save_bundle(bundle, opts.out);
  return bundle;
}

// ---- workloads ------------------------------------------------------------

const ActivationSet& Workload::activations_for(const std::string& name) const {
  for (const auto& [n, x] : activations) {
    if (n == name) return x;
  }
  throw ValidationError("no activations named '" + name + "'");
}

Workload load_workload(const TensorBundle& bundle) {
  Workload w;
  for (const auto* e : bundle.of_kind(TensorKind::activations)) {
    w.activations.emplace_back(e->name, ActivationSet(e->values));
  }
  const auto weights = bundle.of_kind(TensorKind::weight);
  if (weights.empty()) throw ValidationError("bundle contains no weight tensors");
  for (const auto* e : weights) {
    std::string input = e->input;
    if (input.empty()) {
      if (w.activations.size() != 1) {
        throw ValidationError("weight '" + e->name + "' does not name its input and the bundle has " +
                              std::to_string(w.activations.size()) + " activations tensors");
      }
      input = w.activations.front().first;
    }
    const auto it = std::find_if(w.activations.begin(), w.activations.end(),
                                 [&](const auto& p) { return p.first == input; });
    if (it == w.activations.end()) {
      throw ValidationError("weight '" + e->name + "' names missing activations '" + input + "'");
    }
    if (static_cast<std::size_t>(e->values.cols()) != it->second.channels()) {
      throw DimensionError("weight '" + e->name + "' has " + std::to_string(e->values.cols()) +
                           " input channels but activations '" + input + "' have " +
                           std::to_string(it->second.channels()));
    }
    w.layers.push_back({LinearLayer(e->name, e->values, input), input});
  }
  return w;
}

QuantConfig weight_config(const QuantFlags& flags, int bits) {
  QuantConfig c = QuantConfig::weights(bits, flags.sym_w);
  c.validate(true);
  return c;
}

QuantConfig activation_config(const QuantFlags& flags, int bits, const std::string& input,
                              const ActivationSet& x, const TensorBundle* static_ranges) {
  QuantConfig c = QuantConfig::activations(bits, flags.sym_a);
  if (static_ranges != nullptr) {
    const BundleEntry* e = static_ranges->find(input);
    if (e == nullptr) {
      throw ValidationError("static range bundle has no entry for activations '" + input + "'");
    }
    if (e->values.cols() != 2) throw ValidationError("static ranges for '" + input + "' must have shape [groups, 2]");
    const auto groups = static_cast<std::size_t>(e->values.rows());
    if (groups == 1) {
      c.granularity = Granularity::per_tensor;
    } else if (groups != x.tokens()) {
      throw ValidationError("static ranges for '" + input + "' cover " + std::to_string(groups) +
                            " groups; expected 1 or " + std::to_string(x.tokens()));
    }
    c.policy = RangePolicy::static_ranges;
    for (Eigen::Index r = 0; r < e->values.rows(); ++r) {
      c.static_ranges.push_back({e->values(r, 0), e->values(r, 1)});
    }
    c.percentile_calibrated = flags.static_percentile;
  }
  c.validate(false);
  return c;
}

SweepSpec SweepSpec::parse(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("sweep spec is not valid JSON: ") + e.what());
  }
  SweepSpec s;
  const json& bundles = require(doc, "bundles", "");
  if (!bundles.is_array() || bundles.empty()) schema_error("bundles", "must be a non-empty list");
  for (std::size_t i = 0; i < bundles.size(); ++i) {
    s.bundles.emplace_back(as_string(bundles[i], "bundles[" + std::to_string(i) + "]"));
  }
  const json& bits = require(doc, "bit_pairs", "");
  if (!bits.is_array() || bits.empty()) schema_error("bit_pairs", "must be a non-empty list");
  for (std::size_t i = 0; i < bits.size(); ++i) {
    const std::string p = "bit_pairs[" + std::to_string(i) + "]";
    if (!bits[i].is_array() || bits[i].size() != 2 || !bits[i][0].is_number_integer() ||
        !bits[i][1].is_number_integer()) {
      schema_error(p, "must be [b_w, b_x]");
    }
    s.bit_pairs.emplace_back(bits[i][0].get<int>(), bits[i][1].get<int>());
  }
  const json& transforms = require(doc, "transforms", "");
  if (!transforms.is_array()) schema_error("transforms", "must be a list");
  for (std::size_t i = 0; i < transforms.size(); ++i) {
    s.transforms.push_back(as_string(transforms[i], "transforms[" + std::to_string(i) + "]"));
  }
  if (doc.contains("seeds")) {
    for (const auto& v : doc["seeds"]) {
      if (!v.is_number_integer()) schema_error("seeds", "must be integers");
      s.seeds.push_back(v.get<std::uint64_t>());
    }
  }
  if (doc.contains("sym_w")) s.quant.sym_w = doc["sym_w"].get<bool>() ? Symmetry::symmetric : Symmetry::asymmetric;
  if (doc.contains("sym_a")) s.quant.sym_a = doc["sym_a"].get<bool>() ? Symmetry::symmetric : Symmetry::asymmetric;
  return s;
}

// ---- analysis engine ------------------------------------------------------

namespace {

struct GroupTask {
  const Workload* workload;
  std::string input;
  std::vector<const LayerInput*> members;
  std::string prefix;
};

std::vector<ReportRow> run_group(const GroupTask& task, const std::vector<TransformSpec>& transforms,
                                 const std::vector<std::pair<int, int>>& bit_pairs, const QuantFlags& quant,
                                 const TensorBundle* static_ranges, double eps, bool with_shift_check) {
  const ActivationSet& x = task.workload->activations_for(task.input);
  std::vector<LinearLayer> members;
  for (const auto* m : task.members) members.push_back(m->layer);
  const LinearLayer stacked = group_layers(members);

  std::vector<ReportRow> rows;
  for (const auto& spec : transforms) {
    const AppliedTransform t = build_transform(spec, stacked, x, eps);
    const auto [stacked_t, xt] = apply_transform(stacked, x, t);
    for (const auto& member : members) {
      const LinearLayer layer_t(member.name(), member.weight() * t.inverse, member.group());
      for (const auto& [b_w, b_x] : bit_pairs) {
        ReportRow row;
        row.layer = task.prefix + member.name();
        row.group = task.input;
        row.transform = spec.id();
        row.b_w = b_w;
        row.b_x = b_x;
        row.analysis = analyze_layer(layer_t, xt, weight_config(quant, b_w),
                                     activation_config(quant, b_x, task.input, xt, static_ranges));
        if (!t.flagged_channels.empty()) row.analysis.flags.emplace_back("flagged_channels");
        if (with_shift_check) row.shift = shift_check(row.analysis);
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

std::vector<GroupTask> group_tasks(const std::vector<Workload>& workloads, bool prefix_names,
                                   const std::vector<std::string>& prefixes) {
  std::vector<GroupTask> tasks;
  for (std::size_t wi = 0; wi < workloads.size(); ++wi) {
    const Workload& w = workloads[wi];
    std::map<std::string, std::vector<const LayerInput*>> groups;
    for (const auto& l : w.layers) groups[l.input].push_back(&l);
    for (auto& [input, members] : groups) {
      tasks.push_back({&w, input, members, prefix_names ? prefixes.at(wi) + "/" : ""});
    }
  }
  return tasks;
}

Report run_tasks(const std::vector<GroupTask>& tasks, const std::vector<TransformSpec>& transforms,
                 const std::vector<std::pair<int, int>>& bit_pairs, const QuantFlags& quant,
                 const TensorBundle* static_ranges, double eps, bool with_shift_check) {
  std::vector<std::future<std::vector<ReportRow>>> futures;
  for (const auto& task : tasks) {
    futures.push_back(std::async(std::launch::async, [&, task] {
      return run_group(task, transforms, bit_pairs, quant, static_ranges, eps, with_shift_check);
    }));
  }
  Report report;
  for (auto& f : futures) {
    auto rows = f.get();
    for (auto& r : rows) report.rows.push_back(std::move(r));
  }
  report.sort_rows();
  return report;
}

std::vector<TransformSpec> parse_transforms(const std::vector<std::string>& ids) {
  if (ids.empty()) throw ValidationError("transform list is empty");
  std::vector<TransformSpec> out;
  for (const auto& id : ids) out.push_back(TransformSpec::parse(id));
  return out;
}

std::unique_ptr<TensorBundle> load_static(const QuantFlags& quant) {
  if (!quant.static_a) return nullptr;
  return std::make_unique<TensorBundle>(load_bundle(*quant.static_a));
}

std::string describe(const QuantFlags& q) {
  std::ostringstream s;
  s << "sym_w=" << to_string(q.sym_w) << ";sym_a=" << to_string(q.sym_a)
    << ";static_a=" << (q.static_a ? q.static_a->generic_string() : "") << ";pct=" << q.static_percentile;
  return s.str();
}

}  // namespace

Report run_grid(const std::vector<Workload>& workloads, const std::vector<TransformSpec>& transforms,
                const std::vector<std::pair<int, int>>& bit_pairs, const QuantFlags& quant,
                const TensorBundle* static_ranges, double eps, bool with_shift_check) {
  if (transforms.empty()) throw ValidationError("transform list is empty");
  if (bit_pairs.empty()) throw ValidationError("bit pair list is empty");
  for (const auto& [bw, bx] : bit_pairs) {
    step_count(bw);
    step_count(bx);
  }
  const auto tasks = group_tasks(workloads, false, {});
  return run_tasks(tasks, transforms, bit_pairs, quant, static_ranges, eps, with_shift_check);
}

Report cmd_analyze(const fs::path& bundle_dir, const QuantFlags& quant,
                   const std::vector<std::string>& transforms, const CommonOptions& opts) {
  const auto specs = parse_transforms(transforms.empty() ? std::vector<std::string>{"none"} : transforms);
  const TensorBundle bundle = load_bundle(bundle_dir);
  const std::vector<Workload> workloads{load_workload(bundle)};
  const auto static_ranges = load_static(quant);

  Report report = run_grid(workloads, specs, {{quant.bits_w, quant.bits_a}}, quant, static_ranges.get(),
                           opts.eps, false);
  std::string config = "analyze;" + describe(quant) + ";bits=" + std::to_string(quant.bits_w) + "," +
                       std::to_string(quant.bits_a) + ";eps=" + std::to_string(opts.eps);
  for (const auto& s : specs) config += ";" + s.id();
  report.meta = {"analyze", {}, fnv1a64(config), tool_version()};
  if (opts.seed) report.meta.seeds.push_back(*opts.seed);
  write_outputs(opts, "report", report.to_csv(), report.to_json());
  return report;
}

Report cmd_sweep(const SweepSpec& sweep, const CommonOptions& opts) {
  if (sweep.bundles.empty()) throw ValidationError("sweep names no bundles");
  if (sweep.bit_pairs.empty()) throw ValidationError("sweep has no bit pairs");
  if (sweep.transforms.empty()) throw ValidationError("sweep transform list is empty");

  std::vector<std::uint64_t> seeds = sweep.seeds;
  if (seeds.empty()) seeds.push_back(opts.seed.value_or(0));
  // "ortho" without an explicit seed expands to one transform per sweep seed.
  std::vector<std::string> ids;
  for (const auto& t : sweep.transforms) {
    if (t == "ortho") {
      for (auto s : seeds) ids.push_back("ortho:" + std::to_string(s));
    } else {
      ids.push_back(t);
    }
  }
  const auto specs = parse_transforms(ids);
  for (const auto& [bw, bx] : sweep.bit_pairs) {
    step_count(bw);
    step_count(bx);
  }

  std::vector<Workload> workloads;
  std::vector<std::string> prefixes;
  std::vector<TensorBundle> bundles;
  for (const auto& b : sweep.bundles) {
    bundles.push_back(load_bundle(b));
    workloads.push_back(load_workload(bundles.back()));
    prefixes.push_back(b.filename().empty() ? b.parent_path().filename().string() : b.filename().string());
  }
  const auto static_ranges = load_static(sweep.quant);
  const auto tasks = group_tasks(workloads, workloads.size() > 1, prefixes);
  Report report = run_tasks(tasks, specs, sweep.bit_pairs, sweep.quant, static_ranges.get(), opts.eps, true);

  std::string config = "sweep;" + describe(sweep.quant) + ";eps=" + std::to_string(opts.eps);
  for (const auto& p : prefixes) config += ";bundle=" + p;
  for (const auto& [bw, bx] : sweep.bit_pairs) config += ";bits=" + std::to_string(bw) + "," + std::to_string(bx);
  for (const auto& s : specs) config += ";" + s.id();
  report.meta = {"sweep", seeds, fnv1a64(config), tool_version()};
  write_outputs(opts, "report", report.to_csv(), report.to_json());
  return report;
}

ValidationReport cmd_validate(const fs::path& bundle_dir, const QuantFlags& quant, const CommonOptions& opts) {
  const TensorBundle bundle = load_bundle(bundle_dir);
  const Workload workload = load_workload(bundle);
  const auto static_ranges = load_static(quant);

  ValidationReport report;
  for (const auto& li : workload.layers) {
    const ActivationSet& x = workload.activations_for(li.input);
    const QuantConfig cfg_w = weight_config(quant, quant.bits_w);
    const QuantConfig cfg_a = activation_config(quant, quant.bits_a, li.input, x, static_ranges.get());

    ValidationRow row;
    row.layer = li.layer.name();
    row.group = li.input;
    row.b_w = quant.bits_w;
    row.b_x = quant.bits_a;
    row.analysis = analyze_layer(li.layer, x, cfg_w, cfg_a);

    const QuantizedMatrix xq = quantize_activations(x, cfg_a);
    row.act_noise = noise_stats(x.data(), xq.values);
    const QuantizedMatrix wq = quantize_weights(li.layer.weight(), cfg_w);
    const Matrix& w = li.layer.weight();
    const Eigen::Map<const Eigen::VectorXd> w_flat(w.data(), w.size());
    const Eigen::Map<const Eigen::VectorXd> wq_flat(wq.values.data(), wq.values.size());
    if (w.size() >= 2) row.weight_noise = noise_stats(Matrix(w_flat), Matrix(wq_flat));

    // Uniform-noise model: each entry carries variance s_t^2 / 12 with s_t = rho_t / N.
    const double steps = step_count(cfg_a.bits);
    double model = 0.0;
    for (Eigen::Index t = 0; t < x.data().rows(); ++t) {
      QuantRange r;
      if (cfg_a.policy == RangePolicy::static_ranges) {
        r = cfg_a.static_ranges.size() == 1 ? cfg_a.static_ranges.front()
                                            : cfg_a.static_ranges[static_cast<std::size_t>(t)];
      } else {
        r = compute_range({x.data().row(t).data(), x.channels()}, cfg_a.symmetry);
      }
      const double s = r.width() / steps;
      model += s * s / 12.0;
    }
    model /= static_cast<double>(x.tokens());
    double measured = 0.0;
    for (std::size_t c = 0; c < row.act_noise.variance.size(); ++c) {
      measured += row.act_noise.variance[c] + row.act_noise.mean[c] * row.act_noise.mean[c];
    }
    measured /= static_cast<double>(row.act_noise.variance.size());
    row.act_noise_variance_ratio = model > 0.0 ? measured / model : 0.0;

    const Ratio composed = parallel(row.analysis.sqnr_measured_act_only, row.analysis.sqnr_measured_w_only);
    if (!composed.is_exact() && !row.analysis.sqnr_measured_joint.is_exact()) {
      row.composition_residual_db = row.analysis.sqnr_measured_joint.db().value - composed.db().value;
    }
    row.clipped_token_fraction =
        static_cast<double>(row.analysis.clipped_tokens) / static_cast<double>(x.tokens());

    row.flags = row.analysis.flags;
    const bool decorrelation_violated =
        row.act_noise.signal_noise_corr > signal_noise_threshold(x.tokens()) ||
        row.act_noise.cross_channel_corr > cross_corr_threshold(x.tokens()) ||
        row.weight_noise.signal_noise_corr > signal_noise_threshold(static_cast<std::size_t>(w.size()));
    if (decorrelation_violated) row.flags.emplace_back("decorrelation");
    report.rows.push_back(std::move(row));
  }
  report.sort_rows();
  report.meta = {"validate", {}, fnv1a64("validate;" + describe(quant) + ";bits=" +
                                         std::to_string(quant.bits_w) + "," + std::to_string(quant.bits_a)),
                 tool_version()};
  write_outputs(opts, "validation", report.to_csv(), report.to_json());
  return report;
}

TensorBundle cmd_transform(const fs::path& bundle_dir, const std::string& transform, const CommonOptions& opts) {
  const TransformSpec spec = TransformSpec::parse(transform);
  const TensorBundle bundle = load_bundle(bundle_dir);
  const Workload workload = load_workload(bundle);

  std::map<std::string, std::vector<LinearLayer>> groups;
  for (const auto& l : workload.layers) groups[l.input].push_back(l.layer);

  TensorBundle out;
  for (const auto& [input, members] : groups) {
    const LinearLayer stacked = group_layers(members);
    const AppliedTransform t = build_transform(spec, stacked, workload.activations_for(input), opts.eps);
    if (!(t.residual <= kMaxTransformResidual)) {
      throw NumericalError("transform for '" + input + "' has residual " + std::to_string(t.residual));
    }
    out.add("T." + input, TensorKind::matrix, t.forward);
    out.add("T_inv." + input, TensorKind::matrix, t.inverse);
  }
  if (!opts.out.empty()) save_bundle(out, opts.out);
  return out;
}

}  // namespace qalign
