#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qalign/bundle.hpp"
#include "qalign/error.hpp"
#include "qalign/quantizer.hpp"
#include "qalign/report.hpp"
#include "qalign/synth.hpp"
#include "qalign/transforms.hpp"

namespace qalign {

enum class OutputFormat { csv, json, both };

OutputFormat parse_format(const std::string& text);

struct CommonOptions {
  std::optional<std::uint64_t> seed;
  std::filesystem::path out;
  OutputFormat format = OutputFormat::both;
  double eps = 1e-6;
};

/// Bit widths and schemes. Defaults: weights symmetric per row, activations
/// asymmetric per token with dynamic ranges.
struct QuantFlags {
  int bits_w = 4;
  int bits_a = 4;
  Symmetry sym_w = Symmetry::symmetric;
  Symmetry sym_a = Symmetry::asymmetric;
  /// Bundle of static activation ranges: one matrix per activations tensor,
  /// named after it, shape [groups, 2] holding (lo, hi).
  std::optional<std::filesystem::path> static_a;
  bool static_percentile = false;
};

// ---- synth ----------------------------------------------------------------

struct SynthActivations {
  std::string name;
  std::size_t channels = 0;
  std::size_t tokens = 0;
  DistSpec dist;
};

struct SynthLayer {
  std::string name;
  std::string input;
  std::size_t d_out = 0;
  FamilySpec family;
};

struct SynthSpec {
  std::uint64_t seed = 0;
  std::vector<SynthActivations> activations;
  std::vector<SynthLayer> layers;
};

/// Parses the synth JSON document; ValidationError messages name the field path.
SynthSpec parse_synth_spec(const std::string& json_text);
TensorBundle synthesize(const SynthSpec& spec);
/// Reads the spec file, applies --seed, writes the bundle to opts.out.
TensorBundle cmd_synth(const std::filesystem::path& spec_file, const CommonOptions& opts);

// ---- analysis -------------------------------------------------------------

struct LayerInput {
  LinearLayer layer;
  std::string input;
};

/// Weights of a bundle paired with their activations tensors.
struct Workload {
  std::vector<LayerInput> layers;
  std::vector<std::pair<std::string, ActivationSet>> activations;

  const ActivationSet& activations_for(const std::string& name) const;
};

Workload load_workload(const TensorBundle& bundle);

QuantConfig weight_config(const QuantFlags& flags, int bits);
QuantConfig activation_config(const QuantFlags& flags, int bits, const std::string& input,
                              const ActivationSet& x, const TensorBundle* static_ranges);

struct SweepSpec {
  std::vector<std::filesystem::path> bundles;
  std::vector<std::pair<int, int>> bit_pairs;  // (b_w, b_x)
  std::vector<std::string> transforms;
  std::vector<std::uint64_t> seeds;
  QuantFlags quant;

  static SweepSpec parse(const std::string& json_text);
};

/// Shared engine of analyze and sweep: every (layer, transform, bit pair).
Report run_grid(const std::vector<Workload>& workloads, const std::vector<TransformSpec>& transforms,
                const std::vector<std::pair<int, int>>& bit_pairs, const QuantFlags& quant,
                const TensorBundle* static_ranges, double eps, bool with_shift_check);

Report cmd_analyze(const std::filesystem::path& bundle_dir, const QuantFlags& quant,
                   const std::vector<std::string>& transforms, const CommonOptions& opts);
Report cmd_sweep(const SweepSpec& sweep, const CommonOptions& opts);
ValidationReport cmd_validate(const std::filesystem::path& bundle_dir, const QuantFlags& quant,
                              const CommonOptions& opts);
/// Builds one transform per input group and writes T.<group> / T_inv.<group>.
TensorBundle cmd_transform(const std::filesystem::path& bundle_dir, const std::string& transform,
                           const CommonOptions& opts);

/// Validation thresholds for the decorrelation flag given n samples.
double cross_corr_threshold(std::size_t n);
double signal_noise_threshold(std::size_t n);

/// 0 success, 2 config/schema, 3 data/dimension, 4 numerical.
int exit_code_for(const Error& e);

std::string tool_version();

}  // namespace qalign
