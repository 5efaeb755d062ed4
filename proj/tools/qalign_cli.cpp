// qalign: quantization SQNR analysis for linear layers.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "qalign/commands.hpp"

namespace {

struct QuantArgs {
  int bits_w = 4;
  int bits_a = 4;
  bool asym_w = false;
  bool sym_a = false;
  std::string static_a;
  bool static_percentile = false;
};

void add_quant_flags(CLI::App* cmd, QuantArgs& q) {
  cmd->add_option("--bits-w", q.bits_w, "weight bit width")->capture_default_str();
  cmd->add_option("--bits-a", q.bits_a, "activation bit width")->capture_default_str();
  auto* sw = cmd->add_flag("--sym-w{false},--asym-w{true}", q.asym_w, "weight range symmetry (default symmetric)");
  sw->disable_flag_override();
  auto* sa = cmd->add_flag("--sym-a{true},--asym-a{false}", q.sym_a, "activation range symmetry (default asymmetric)");
  sa->disable_flag_override();
  cmd->add_option("--static-a", q.static_a, "bundle of static activation ranges");
  cmd->add_flag("--static-percentile", q.static_percentile, "static ranges came from percentile calibration");
}

qalign::QuantFlags to_flags(const QuantArgs& q) {
  qalign::QuantFlags f;
  f.bits_w = q.bits_w;
  f.bits_a = q.bits_a;
  f.sym_w = q.asym_w ? qalign::Symmetry::asymmetric : qalign::Symmetry::symmetric;
  f.sym_a = q.sym_a ? qalign::Symmetry::symmetric : qalign::Symmetry::asymmetric;
  if (!q.static_a.empty()) f.static_a = q.static_a;
  f.static_percentile = q.static_percentile;
  return f;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw qalign::ValidationError("cannot read " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantization SQNR analysis, prediction and alignment transforms"};
  app.set_version_flag("--version", qalign::tool_version());
  app.require_subcommand(1);

  std::optional<std::uint64_t> seed;
  std::string out;
  std::string format = "both";
  double eps = 1e-6;
  app.add_option("--seed", seed, "master seed");
  app.add_option("--out", out, "output directory");
  app.add_option("--format", format, "report format")->check(CLI::IsMember({"csv", "json", "both"}));
  app.add_option("--eps", eps, "relative ridge added to the activation autocorrelation")->capture_default_str();

  std::string synth_spec;
  auto* synth = app.add_subcommand("synth", "generate a synthetic tensor bundle from a JSON spec");
  synth->add_option("spec", synth_spec, "synth spec JSON")->required();

  std::string analyze_bundle;
  std::vector<std::string> analyze_transforms;
  QuantArgs analyze_q;
  auto* analyze = app.add_subcommand("analyze", "measure and predict SQNR for every layer of a bundle");
  analyze->add_option("bundle", analyze_bundle, "bundle directory")->required();
  analyze->add_option("--transform", analyze_transforms,
                      "none, scale:a, hadamard, ortho:seed, opt, cat:k[,+h], diag-sqrt (repeatable)");
  add_quant_flags(analyze, analyze_q);

  std::string sweep_spec;
  std::string sweep_static;
  auto* sweep = app.add_subcommand("sweep", "run a grid of bundles, bit pairs and transforms");
  sweep->add_option("spec", sweep_spec, "sweep spec JSON")->required();
  sweep->add_option("--static-a", sweep_static, "bundle of static activation ranges");

  std::string validate_bundle;
  QuantArgs validate_q;
  auto* validate = app.add_subcommand("validate", "check the noise-model assumptions on a bundle");
  validate->add_option("bundle", validate_bundle, "bundle directory")->required();
  add_quant_flags(validate, validate_q);

  std::string transform_bundle;
  std::string transform_id = "opt";
  auto* transform = app.add_subcommand("transform", "export transform matrices per input group");
  transform->add_option("bundle", transform_bundle, "bundle directory")->required();
  transform->add_option("--transform", transform_id, "transform id")->capture_default_str();

  for (auto* sub : {synth, analyze, sweep, validate, transform}) {
    sub->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    qalign::CommonOptions opts;
    opts.seed = seed;
    opts.out = out;
    opts.format = qalign::parse_format(format);
    if (!(eps >= 0.0)) throw qalign::ValidationError("--eps must be >= 0");
    opts.eps = eps;

    if (*synth) {
      if (opts.out.empty()) throw qalign::ValidationError("synth requires --out");
      const auto bundle = qalign::cmd_synth(synth_spec, opts);
      std::printf("wrote %zu tensors to %s\n", bundle.entries().size(), opts.out.string().c_str());
    } else if (*analyze) {
      const auto report = qalign::cmd_analyze(analyze_bundle, to_flags(analyze_q), analyze_transforms, opts);
      if (opts.out.empty()) std::fputs(report.to_csv().c_str(), stdout);
    } else if (*sweep) {
      auto spec = qalign::SweepSpec::parse(slurp(sweep_spec));
      if (!sweep_static.empty()) spec.quant.static_a = sweep_static;
      const auto report = qalign::cmd_sweep(spec, opts);
      if (opts.out.empty()) std::fputs(report.to_csv().c_str(), stdout);
    } else if (*validate) {
      const auto report = qalign::cmd_validate(validate_bundle, to_flags(validate_q), opts);
      if (opts.out.empty()) std::fputs(report.to_csv().c_str(), stdout);
    } else if (*transform) {
      if (opts.out.empty()) throw qalign::ValidationError("transform requires --out");
      const auto bundle = qalign::cmd_transform(transform_bundle, transform_id, opts);
      std::printf("wrote %zu matrices to %s\n", bundle.entries().size(), opts.out.string().c_str());
    }
  } catch (const qalign::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return qalign::exit_code_for(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
  return 0;
}
