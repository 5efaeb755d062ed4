#include "qalign/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <tuple>

#include "json.hpp"

#include "qalign/error.hpp"

namespace qalign {

using json = nlohmann::json;

namespace {

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string db_or_exact(const Ratio& r) { return r.db_string(4); }

std::string db_or_exact(double ratio) { return fixed(10.0 * std::log10(ratio), 4); }

json db_json(const Ratio& r) {
  if (r.is_exact()) return "exact";
  return r.db().value;
}

json db_json(double ratio) { return 10.0 * std::log10(ratio); }

json optional_json(const std::optional<double>& v) {
  if (!v) return "exact";
  return *v;
}

std::string optional_csv(const std::optional<double>& v) {
  return v ? fixed(*v, 4) : "exact";
}

double shift_db(int from_bits, int to_bits) {
  return 20.0 * std::log10(step_count(to_bits) / step_count(from_bits));
}

json noise_json(const NoiseStats& s) {
  return {{"mean", s.mean},
          {"variance", s.variance},
          {"cross_channel_corr", s.cross_channel_corr},
          {"signal_noise_corr", s.signal_noise_corr}};
}

json meta_json(const ReportMeta& m) {
  char hash[32];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(m.config_hash));
  return {{"command", m.command}, {"seeds", m.seeds}, {"config_hash", hash}, {"tool_version", m.tool_version}};
}

json analysis_json(const LayerAnalysis& a) {
  return {{"sqnr_measured_db", db_json(a.sqnr_measured_joint)},
          {"sqnr_pred_db", db_json(a.sqnr_predicted)},
          {"gap_db", optional_json(a.gap_db())},
          {"sqnr_act_only_db", db_json(a.sqnr_measured_act_only)},
          {"sqnr_w_only_db", db_json(a.sqnr_measured_w_only)},
          {"C_x_db", db_json(a.c_x)},
          {"C_W_db", db_json(a.c_w)},
          {"A_db", db_json(a.alignment)},
          {"A_max_db", db_json(a.max_alignment)},
          {"r_db", db_json(a.r)},
          {"degenerate_groups", a.degenerate_groups},
          {"max_token_signal_share", a.max_token_signal_share},
          {"clipped_tokens", a.clipped_tokens},
          {"flags", join_flags(a.flags)}};
}

}  // namespace

std::string join_flags(const std::vector<std::string>& flags) {
  std::string out;
  for (const auto& f : flags) out += (out.empty() ? "" : ";") + f;
  return out;
}

ShiftCheck shift_check(const LayerAnalysis& a) {
  ShiftCheck s;
  const auto joint_db = [&](int bx, int bw) -> std::optional<double> {
    const Ratio p = predicted_sqnr(bx, bw, a.c_x, a.c_w, a.alignment);
    if (p.is_exact()) return std::nullopt;
    return p.db().value;
  };
  const auto base = joint_db(a.b_x, a.b_w);
  if (a.b_w + 4 <= 16) {
    s.weight_single_db = shift_db(a.b_w, a.b_w + 4);
    const auto up = joint_db(a.b_x, a.b_w + 4);
    if (base && up) s.weight_joint_db = *up - *base;
  }
  if (a.b_x + 4 <= 16) {
    s.act_single_db = shift_db(a.b_x, a.b_x + 4);
    const auto up = joint_db(a.b_x + 4, a.b_w);
    if (base && up) s.act_joint_db = *up - *base;
  }
  return s;
}

void Report::sort_rows() {
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    return std::tie(a.layer, a.transform, a.b_w, a.b_x) < std::tie(b.layer, b.transform, b.b_w, b.b_x);
  });
}

std::string Report::to_csv() const {
  std::ostringstream out;
  bool first = true;
  for (const char* c : kReportColumns) {
    out << (first ? "" : ",") << c;
    first = false;
  }
  out << '\n';
  for (const auto& r : rows) {
    const auto& a = r.analysis;
    out << csv_field(r.layer) << ',' << csv_field(r.group) << ',' << csv_field(r.transform) << ','
        << r.b_w << ',' << r.b_x << ',' << db_or_exact(a.sqnr_measured_joint) << ','
        << db_or_exact(a.sqnr_predicted) << ',' << optional_csv(a.gap_db()) << ','
        << db_or_exact(a.sqnr_measured_act_only) << ',' << db_or_exact(a.sqnr_measured_w_only) << ','
        << db_or_exact(a.c_x) << ',' << db_or_exact(a.c_w) << ',' << db_or_exact(a.alignment) << ','
        << db_or_exact(a.max_alignment) << ',' << db_or_exact(a.r) << ',' << a.degenerate_groups << ','
        << csv_field(join_flags(a.flags)) << '\n';
  }
  return out.str();
}

std::string Report::to_json() const {
  json rows_json = json::array();
  for (const auto& r : rows) {
    json row = {{"layer", r.layer}, {"group", r.group}, {"transform", r.transform}, {"b_w", r.b_w},
                {"b_x", r.b_x}};
    row.update(analysis_json(r.analysis));
    row["alignment"] = r.analysis.alignment;
    row["max_alignment"] = r.analysis.max_alignment;
    if (r.shift) {
      row["shift_check"] = {{"weight_single_db", optional_json(r.shift->weight_single_db)},
                            {"act_single_db", optional_json(r.shift->act_single_db)},
                            {"weight_joint_db", optional_json(r.shift->weight_joint_db)},
                            {"act_joint_db", optional_json(r.shift->act_joint_db)}};
    }
    rows_json.push_back(std::move(row));
  }
  return json{{"meta", meta_json(meta)}, {"rows", rows_json}}.dump(2) + "\n";
}

void ValidationReport::sort_rows() {
  std::stable_sort(rows.begin(), rows.end(), [](const ValidationRow& a, const ValidationRow& b) {
    return std::tie(a.layer, a.b_w, a.b_x) < std::tie(b.layer, b.b_w, b.b_x);
  });
}

std::string ValidationReport::to_csv() const {
  std::ostringstream out;
  out << "layer,group,b_w,b_x,sqnr_measured_db,sqnr_pred_db,gap_db,composition_residual_db,"
         "act_noise_var_ratio,act_noise_cross_corr,act_signal_noise_corr,w_signal_noise_corr,"
         "clipped_token_fraction,flags\n";
  for (const auto& r : rows) {
    out << csv_field(r.layer) << ',' << csv_field(r.group) << ',' << r.b_w << ',' << r.b_x << ','
        << db_or_exact(r.analysis.sqnr_measured_joint) << ',' << db_or_exact(r.analysis.sqnr_predicted)
        << ',' << optional_csv(r.analysis.gap_db()) << ',' << optional_csv(r.composition_residual_db) << ','
        << fixed(r.act_noise_variance_ratio, 4) << ',' << fixed(r.act_noise.cross_channel_corr, 4) << ','
        << fixed(r.act_noise.signal_noise_corr, 4) << ',' << fixed(r.weight_noise.signal_noise_corr, 4)
        << ',' << fixed(r.clipped_token_fraction, 4) << ',' << csv_field(join_flags(r.flags)) << '\n';
  }
  return out.str();
}

std::string ValidationReport::to_json() const {
  json rows_json = json::array();
  for (const auto& r : rows) {
    json row = {{"layer", r.layer},
                {"group", r.group},
                {"b_w", r.b_w},
                {"b_x", r.b_x},
                {"analysis", analysis_json(r.analysis)},
                {"composition_residual_db", optional_json(r.composition_residual_db)},
                {"act_noise_var_ratio", r.act_noise_variance_ratio},
                {"act_noise", noise_json(r.act_noise)},
                {"weight_noise", noise_json(r.weight_noise)},
                {"clipped_token_fraction", r.clipped_token_fraction},
                {"flags", join_flags(r.flags)}};
    rows_json.push_back(std::move(row));
  }
  return json{{"meta", meta_json(meta)}, {"rows", rows_json}}.dump(2) + "\n";
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace qalign
