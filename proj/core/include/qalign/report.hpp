#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "qalign/metrics.hpp"
#include "qalign/quantizer.hpp"

namespace qalign {

/// Predicted effect of four extra bits on either side, at fixed C and A.
struct ShiftCheck {
  std::optional<double> weight_single_db;  // SQNR(Wq x) shift for b_w -> b_w + 4
  std::optional<double> act_single_db;     // SQNR(W xq) shift for b_x -> b_x + 4
  std::optional<double> weight_joint_db;   // joint prediction shift, b_w -> b_w + 4
  std::optional<double> act_joint_db;      // joint prediction shift, b_x -> b_x + 4
};

ShiftCheck shift_check(const LayerAnalysis& a);

struct ReportRow {
  std::string layer;
  std::string group;
  std::string transform;
  int b_w = 0;
  int b_x = 0;
  LayerAnalysis analysis;
  std::optional<ShiftCheck> shift;
};

struct ReportMeta {
  std::string command;
  std::vector<std::uint64_t> seeds;
  std::uint64_t config_hash = 0;
  std::string tool_version;
};

/// Fixed CSV column order.
inline constexpr const char* kReportColumns[] = {
    "layer",        "group",         "transform",  "b_w",     "b_x",     "sqnr_measured_db",
    "sqnr_pred_db", "gap_db",        "sqnr_act_only_db", "sqnr_w_only_db", "C_x_db", "C_W_db",
    "A_db",         "A_max_db",      "r_db",       "degenerate_groups", "flags"};

struct Report {
  std::vector<ReportRow> rows;
  ReportMeta meta;

  /// Orders rows by (layer, transform, b_w, b_x).
  void sort_rows();
  std::string to_csv() const;
  std::string to_json() const;
};

struct ValidationRow {
  std::string layer;
  std::string group;
  int b_w = 0;
  int b_x = 0;
  LayerAnalysis analysis;
  NoiseStats act_noise;
  /// Weight noise with all entries pooled into one channel.
  NoiseStats weight_noise;
  /// Mean measured activation-noise variance over the uniform-noise model E[s^2]/12.
  double act_noise_variance_ratio = 0.0;
  /// Measured joint SQNR minus the parallel composition of the single-side measurements, dB.
  std::optional<double> composition_residual_db;
  double clipped_token_fraction = 0.0;
  std::vector<std::string> flags;
};

struct ValidationReport {
  std::vector<ValidationRow> rows;
  ReportMeta meta;

  void sort_rows();
  std::string to_csv() const;
  std::string to_json() const;
};

/// Joins flags with ';'.
std::string join_flags(const std::vector<std::string>& flags);

/// Writes `text` to `path`, throwing IoError on failure.
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace qalign
