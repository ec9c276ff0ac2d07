#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "criteria.hpp"
#include "mad/errors.hpp"
#include "mad/metrics.hpp"

namespace {

using namespace mad;
namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "mad_test_metrics";
  fs::create_directories(dir);
  return dir / name;
}

DefenseReport sample_report(const std::string& method, double ot) {
  std::vector<DefenseRecord> recs{make_record(14, "new", 95.0, 10.0, 60.0, ot),
                                  make_record(18, "learned", 95.0, 0.0, 80.0, ot)};
  return build_report("toy", method, recs, 94.0);
}

TEST(Metrics, OracleSuite) {
  const auto r = mad::testing::metric_oracle_suite(1e-9);
  for (const auto& f : r.failures) ADD_FAILURE() << f;
  EXPECT_TRUE(r.pass) << r.summary;
}

TEST(Metrics, ErrorCases) {
  EXPECT_THROW(compute_dsr(50.0, 90.0, 90.0), UndefinedMetricError);
  EXPECT_THROW(compute_dsr(50.0, 95.0, 90.0), UndefinedMetricError);
  EXPECT_THROW(compute_edsr(0.5, -0.1), DomainError);
  EXPECT_THROW(compute_edsr(0.5, std::nan("")), DomainError);
  EXPECT_THROW(build_report("d", "m", {}, 90.0), DataError);
}

TEST(Report, RoleMeans) {
  const auto rep = sample_report("meta_at", 0.01);
  EXPECT_EQ(rep.by_role.at("all").count, 2u);
  EXPECT_EQ(rep.by_role.at("new").count, 1u);
  EXPECT_NEAR(rep.by_role.at("new").dsr, 50.0 / 85.0, 1e-12);
  EXPECT_NEAR(rep.by_role.at("learned").dsr, 80.0 / 95.0, 1e-12);
  EXPECT_NEAR(rep.by_role.at("all").dsr, 0.5 * (50.0 / 85.0 + 80.0 / 95.0), 1e-12);
}

TEST(Report, TamperedRecordIsRejected) {
  auto j = to_json(sample_report("meta_at", 0.0));
  j["records"][0]["dsr"] = 0.9;
  EXPECT_THROW(defense_report_from_json(j), IntegrityError);
}

TEST(Report, JsonRoundTrip) {
  const auto rep = sample_report("meta_at", 0.02);
  export_json(rep, scratch("r.json"));
  EXPECT_EQ(import_json(scratch("r.json")), rep);
  std::ofstream(scratch("bad.json")) << "{";
  EXPECT_THROW(import_json(scratch("bad.json")), SchemaError);
}

TEST(Report, CsvHoldsEveryRecordOfEveryReport) {
  export_csv({sample_report("meta_at", 0.01), sample_report("finetune_only", 0.02)}, scratch("r.csv"));
  std::ifstream in(scratch("r.csv"));
  std::string header;
  std::getline(in, header);
  std::string expected;
  for (const auto& c : report_csv_columns()) expected += (expected.empty() ? "" : ",") + c;
  EXPECT_EQ(header, expected);
  int rows = 0;
  std::set<std::string> methods;
  for (std::string line; std::getline(in, line);) {
    ++rows;
    std::stringstream ss(line);
    std::string dataset, method;
    std::getline(ss, dataset, ',');
    std::getline(ss, method, ',');
    methods.insert(method);
  }
  EXPECT_EQ(rows, 4);
  EXPECT_EQ(methods.size(), 2u);
  EXPECT_THROW(export_csv({}, scratch("empty.csv")), DataError);
}

TEST(Plot, WritesPngAndLegend) {
  const auto png = scratch("edsr.png");
  plot_edsr_curves({sample_report("meta_at", 0.01), sample_report("at", 0.5)}, png, 1.0);
  std::ifstream in(png, std::ios::binary);
  char sig[8];
  in.read(sig, 8);
  EXPECT_EQ(std::string(sig + 1, 3), "PNG");
  const auto legend = nlohmann::json::parse(std::ifstream(scratch("edsr.legend.json")));
  ASSERT_EQ(legend.at("series").size(), 2u);
  for (const auto& s : legend.at("series")) {
    const double dsr = s.at("mean_dsr").get<double>();
    for (const auto& p : s.at("points")) EXPECT_NEAR(p[1].get<double>(), dsr * std::exp(-p[0].get<double>()), 1e-12);
  }
  EXPECT_THROW(plot_edsr_curves({}, png), DataError);
  EXPECT_THROW(plot_edsr_curves({sample_report("m", 0.0)}, png, 0.0), ConfigError);
}

TEST(Png, RejectsBadBuffer) {
  EXPECT_THROW(write_png(scratch("x.png"), 2, 2, std::vector<unsigned char>(5)), DataError);
}

}  // namespace
