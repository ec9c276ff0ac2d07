#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace mad {

/// (ca_defended - ca_attacked) / (cca - ca_attacked). Inputs in percent, the
/// result is a fraction and may exceed 1. UndefinedMetricError if cca <= ca_attacked.
double compute_dsr(double ca_defended, double ca_attacked, double cca);

/// dsr * exp(-ot_hours). DomainError for negative or non-finite OT.
double compute_edsr(double dsr, double ot_hours);

struct DefenseRecord {
  int attack_id = 0;
  std::string role = "new";  // "learned" or "new"
  double cca = 0.0;          // clean model, clean test set
  double ca_attacked = 0.0;  // clean model, attacked data
  double ca_defended = 0.0;  // defended model, attacked data
  double ot_hours = 0.0;
  double ot_end_to_end_hours = 0.0;  // including sampling and evaluation
  double dsr = 0.0;
  double edsr = 0.0;

  bool operator==(const DefenseRecord&) const = default;
};

/// Fills dsr and edsr from the other fields.
DefenseRecord make_record(int attack_id, const std::string& role, double cca, double ca_attacked,
                          double ca_defended, double ot_hours, double ot_end_to_end_hours = -1.0);

struct RoleSummary {
  std::size_t count = 0;
  double dsr = 0.0;
  double edsr = 0.0;
  double ca_defended = 0.0;
  double ot_hours = 0.0;
  bool operator==(const RoleSummary&) const = default;
};

struct DefenseReport {
  std::string dataset;
  std::string method;
  std::vector<DefenseRecord> records;
  std::map<std::string, RoleSummary> by_role;  // plus "all"
  double ccadefended = 0.0;                    // defended model, clean test set

  bool operator==(const DefenseReport&) const = default;
};

/// Recomputes every record's dsr/edsr (IntegrityError beyond 1e-9) and the
/// per-role means. DataError on an empty record list.
DefenseReport build_report(const std::string& dataset, const std::string& method,
                           const std::vector<DefenseRecord>& records, double ccadefended);

nlohmann::json to_json(const DefenseRecord& r);
DefenseRecord defense_record_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DefenseReport& r);
/// Re-validates through build_report.
DefenseReport defense_report_from_json(const nlohmann::json& j);

/// Column order of report CSV files.
const std::vector<std::string>& report_csv_columns();

/// One CSV for any number of reports. DataError if there are no records; IoError on write failure.
void export_csv(const std::vector<DefenseReport>& reports, const std::filesystem::path& path);
void export_json(const DefenseReport& report, const std::filesystem::path& path);
DefenseReport import_json(const std::filesystem::path& path);

/// PNG of EDSR against OT: one exp-decay curve per report starting at its mean
/// DSR, with a marker at the method's mean OT. A JSON legend (colors, sampled
/// points) is written next to the image as <stem>.legend.json.
void plot_edsr_curves(const std::vector<DefenseReport>& reports, const std::filesystem::path& png_path,
                      double max_ot_hours = 1.0);

/// Writes an RGB8 image; rows top to bottom.
void write_png(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<unsigned char>& rgb);

}  // namespace mad
