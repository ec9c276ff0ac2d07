#include "mad/metrics.hpp"

#include <png.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

#include "mad/errors.hpp"
#include "mad/io.hpp"

namespace mad {

double compute_dsr(double ca_defended, double ca_attacked, double cca) {
  if (!(cca > ca_attacked)) {
    throw UndefinedMetricError("DSR undefined: clean accuracy " + std::to_string(cca) +
                               " does not exceed attacked accuracy " + std::to_string(ca_attacked));
  }
  return (ca_defended - ca_attacked) / (cca - ca_attacked);
}

double compute_edsr(double dsr, double ot_hours) {
  if (!(ot_hours >= 0.0) || !std::isfinite(ot_hours)) {
    throw DomainError("EDSR needs a finite, non-negative OT (got " + std::to_string(ot_hours) + ")");
  }
  return dsr * std::exp(-ot_hours);
}

DefenseRecord make_record(int attack_id, const std::string& role, double cca, double ca_attacked,
                          double ca_defended, double ot_hours, double ot_end_to_end_hours) {
  DefenseRecord r;
  r.attack_id = attack_id;
  r.role = role;
  r.cca = cca;
  r.ca_attacked = ca_attacked;
  r.ca_defended = ca_defended;
  r.ot_hours = ot_hours;
  r.ot_end_to_end_hours = ot_end_to_end_hours < 0.0 ? ot_hours : ot_end_to_end_hours;
  r.dsr = compute_dsr(ca_defended, ca_attacked, cca);
  r.edsr = compute_edsr(r.dsr, ot_hours);
  return r;
}

DefenseReport build_report(const std::string& dataset, const std::string& method,
                           const std::vector<DefenseRecord>& records, double ccadefended) {
  if (records.empty()) throw DataError("build_report: no records");
  DefenseReport rep;
  rep.dataset = dataset;
  rep.method = method;
  rep.records = records;
  rep.ccadefended = ccadefended;
  for (const auto& r : records) {
    if (r.role != "learned" && r.role != "new") {
      throw DataError("build_report: record role must be 'learned' or 'new', got '" + r.role + "'");
    }
    const double dsr = compute_dsr(r.ca_defended, r.ca_attacked, r.cca);
    const double edsr = compute_edsr(dsr, r.ot_hours);
    if (std::abs(dsr - r.dsr) > 1e-9 || std::abs(edsr - r.edsr) > 1e-9) {
      throw IntegrityError("build_report: stored dsr/edsr of attack " + std::to_string(r.attack_id) +
                           " disagree with the recomputed values");
    }
    for (const std::string& key : {r.role, std::string("all")}) {
      auto& s = rep.by_role[key];
      ++s.count;
      s.dsr += r.dsr;
      s.edsr += r.edsr;
      s.ca_defended += r.ca_defended;
      s.ot_hours += r.ot_hours;
    }
  }
  for (auto& [role, s] : rep.by_role) {
    const auto n = static_cast<double>(s.count);
    s.dsr /= n;
    s.edsr /= n;
    s.ca_defended /= n;
    s.ot_hours /= n;
  }
  return rep;
}

nlohmann::json to_json(const DefenseRecord& r) {
  return {{"attack_id", r.attack_id},   {"role", r.role},
          {"cca", r.cca},               {"ca_attacked", r.ca_attacked},
          {"ca_defended", r.ca_defended}, {"ot_hours", r.ot_hours},
          {"ot_end_to_end_hours", r.ot_end_to_end_hours}, {"dsr", r.dsr},
          {"edsr", r.edsr}};
}

DefenseRecord defense_record_from_json(const nlohmann::json& j) {
  try {
    DefenseRecord r;
    r.attack_id = j.at("attack_id").get<int>();
    r.role = j.at("role").get<std::string>();
    r.cca = j.at("cca").get<double>();
    r.ca_attacked = j.at("ca_attacked").get<double>();
    r.ca_defended = j.at("ca_defended").get<double>();
    r.ot_hours = j.at("ot_hours").get<double>();
    r.ot_end_to_end_hours = j.value("ot_end_to_end_hours", r.ot_hours);
    r.dsr = j.at("dsr").get<double>();
    r.edsr = j.at("edsr").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("defense record: ") + e.what());
  }
}

nlohmann::json to_json(const DefenseReport& r) {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& x : r.records) recs.push_back(to_json(x));
  nlohmann::json roles = nlohmann::json::object();
  for (const auto& [k, s] : r.by_role) {
    roles[k] = {{"count", s.count}, {"dsr", s.dsr}, {"edsr", s.edsr}, {"ca_defended", s.ca_defended},
                {"ot_hours", s.ot_hours}};
  }
  return {{"dataset", r.dataset}, {"method", r.method}, {"ccadefended", r.ccadefended},
          {"records", recs},      {"by_role", roles}};
}

DefenseReport defense_report_from_json(const nlohmann::json& j) {
  try {
    std::vector<DefenseRecord> recs;
    for (const auto& x : j.at("records")) recs.push_back(defense_record_from_json(x));
    return build_report(j.at("dataset").get<std::string>(), j.at("method").get<std::string>(), recs,
                        j.at("ccadefended").get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("defense report: ") + e.what());
  }
}

const std::vector<std::string>& report_csv_columns() {
  static const std::vector<std::string> cols = {"dataset",  "method",      "attack_id", "role",
                                                "cca",      "ca_attacked", "ca_defended", "ot_hours",
                                                "dsr",      "edsr",        "ot_end_to_end_hours"};
  return cols;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
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

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace

void export_csv(const std::vector<DefenseReport>& reports, const std::filesystem::path& path) {
  std::size_t rows = 0;
  for (const auto& r : reports) rows += r.records.size();
  if (rows == 0) throw DataError("export_csv: nothing to export");
  std::string out;
  const auto& cols = report_csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out += (i ? "," : "") + cols[i];
  out += "\n";
  for (const auto& rep : reports) {
    for (const auto& r : rep.records) {
      out += csv_field(rep.dataset) + "," + csv_field(rep.method) + "," + std::to_string(r.attack_id) + "," +
             r.role + "," + fmt(r.cca) + "," + fmt(r.ca_attacked) + "," + fmt(r.ca_defended) + "," +
             fmt(r.ot_hours) + "," + fmt(r.dsr) + "," + fmt(r.edsr) + "," + fmt(r.ot_end_to_end_hours) + "\n";
    }
  }
  write_text(path, out);
}

void export_json(const DefenseReport& report, const std::filesystem::path& path) {
  if (report.records.empty()) throw DataError("export_json: empty report");
  write_text(path, to_json(report).dump(2) + "\n");
}

DefenseReport import_json(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return defense_report_from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------- plotting

void write_png(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<unsigned char>& rgb) {
  if (rgb.size() != width * height * 3) throw DataError("write_png: pixel buffer size mismatch");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(rgb.data() + y * width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void plot_edsr_curves(const std::vector<DefenseReport>& reports, const std::filesystem::path& png_path,
                      double max_ot_hours) {
  if (reports.empty()) throw DataError("plot_edsr_curves: no reports");
  if (!(max_ot_hours > 0.0)) throw ConfigError("plot_edsr_curves: max_ot_hours must be > 0");
  constexpr std::size_t W = 640, H = 400, margin = 40;
  std::vector<unsigned char> img(W * H * 3, 255);
  auto put = [&](long x, long y, std::array<unsigned char, 3> c) {
    if (x < 0 || y < 0 || x >= static_cast<long>(W) || y >= static_cast<long>(H)) return;
    std::copy(c.begin(), c.end(), img.begin() + static_cast<long>((y * static_cast<long>(W) + x) * 3));
  };
  double ymax = 1.0;
  for (const auto& r : reports) ymax = std::max(ymax, r.by_role.at("all").dsr);
  ymax *= 1.05;
  const double pw = W - 2 * margin, ph = H - 2 * margin;
  auto px = [&](double ot) { return static_cast<long>(margin + ot / max_ot_hours * pw); };
  auto py = [&](double v) { return static_cast<long>(H - margin - v / ymax * ph); };

  for (std::size_t x = margin; x <= W - margin; ++x) put(static_cast<long>(x), py(0.0), {0, 0, 0});
  for (std::size_t y = margin; y <= H - margin; ++y) put(margin, static_cast<long>(y), {0, 0, 0});
  for (double g = 0.25; g <= ymax; g += 0.25) {
    for (std::size_t x = margin; x <= W - margin; x += 4) put(static_cast<long>(x), py(g), {190, 190, 190});
  }

  static const std::array<std::array<unsigned char, 3>, 6> palette = {
      {{31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {214, 39, 40}, {148, 103, 189}, {140, 86, 75}}};
  nlohmann::json legend = {{"x", "ot_hours"}, {"y", "edsr"}, {"max_ot_hours", max_ot_hours}, {"series", nlohmann::json::array()}};
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& rep = reports[i];
    const auto color = palette[i % palette.size()];
    const auto& all = rep.by_role.at("all");
    nlohmann::json pts = nlohmann::json::array();
    long prev_y = -1;
    for (std::size_t x = 0; x <= static_cast<std::size_t>(pw); ++x) {
      const double ot = max_ot_hours * static_cast<double>(x) / pw;
      const long y = py(compute_edsr(all.dsr, ot));
      const long from = prev_y < 0 ? y : std::min(prev_y, y);
      const long to = prev_y < 0 ? y : std::max(prev_y, y);
      for (long yy = from; yy <= to; ++yy) {
        put(static_cast<long>(margin + x), yy, color);
        put(static_cast<long>(margin + x), yy + 1, color);
      }
      prev_y = y;
      if (x % 64 == 0) pts.push_back({ot, compute_edsr(all.dsr, ot)});
    }
    const long mx = px(std::min(all.ot_hours, max_ot_hours)), my = py(all.edsr);
    for (long dy = -4; dy <= 4; ++dy)
      for (long dx = -4; dx <= 4; ++dx)
        if (dx * dx + dy * dy <= 16) put(mx + dx, my + dy, color);
    legend["series"].push_back({{"method", rep.method},
                                {"dataset", rep.dataset},
                                {"color", color},
                                {"mean_dsr", all.dsr},
                                {"mean_ot_hours", all.ot_hours},
                                {"mean_edsr", all.edsr},
                                {"points", pts}});
  }
  write_png(png_path, W, H, img);
  auto legend_path = png_path;
  legend_path.replace_extension(".legend.json");
  write_text(legend_path, legend.dump(2) + "\n");
}

}  // namespace mad
