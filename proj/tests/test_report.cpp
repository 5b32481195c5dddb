#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "hijackfl/report.hpp"

using namespace hijackfl;
using report::MetricsRecord;

TEST(MetricsCsv, RoundTripsThroughReader) {
  std::vector<MetricsRecord> recs;
  recs.push_back(MetricsRecord{"hijackfl", "hijackfl", 1, "final", 0.91, 0.55, {}});
  recs.back().extra("mapping", "3,0,1").extra("alpha", 0.5);
  recs.push_back(MetricsRecord{"hijackfl", "clean", 1, "12", 0.8, std::nullopt, {}});
  recs.back().extra("note", "say \"hi\"");
  std::stringstream ss;
  report::write_metrics_csv(ss, recs);
  const auto rows = report::read_csv(ss);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].at("schema_version"), "1");
  EXPECT_EQ(rows[0].at("mapping"), "3,0,1");
  EXPECT_EQ(rows[0].at("alpha"), "0.5");
  EXPECT_EQ(std::stod(rows[0].at("asr")), 0.55);
  EXPECT_EQ(rows[1].at("asr"), "");
  EXPECT_EQ(rows[1].at("mapping"), "");
  EXPECT_EQ(rows[1].at("note"), "say \"hi\"");
  EXPECT_EQ(rows[1].at("round"), "12");
}

TEST(MetricsCsv, ColumnsAreStableAndOrdered) {
  std::vector<MetricsRecord> recs(2);
  recs[0].extra("b", "1");
  recs[1].extra("a", "2").extra("b", "3");
  const auto cols = report::metrics_columns(recs);
  const std::vector<std::string> expect{"schema_version", "scenario", "method", "seed", "round", "utility", "asr",
                                        "b", "a"};
  EXPECT_EQ(cols, expect);
}

TEST(MetricsCsv, RejectsOutOfRangeRates) {
  std::stringstream ss;
  EXPECT_THROW(report::write_metrics_csv(ss, {MetricsRecord{"s", "m", 0, "final", 1.2, {}, {}}}), InvalidArgument);
  EXPECT_THROW(report::write_metrics_csv(ss, {MetricsRecord{"s", "m", 0, "final", {}, -0.1, {}}}), InvalidArgument);
}

TEST(MetricsCsv, ReaderRejectsRaggedRows) {
  std::stringstream ss("a,b\n1,2,3\n");
  EXPECT_THROW(report::read_csv(ss), FormatError);
}

TEST(Plots, LinePlotIsWellFormedSvg) {
  std::ostringstream os;
  report::write_line_plot(os, "Utility <clean>", "round", "utility",
                          {{"clean", {0, 1, 2}, {0.1, 0.5, 0.9}}, {"attack", {0, 1, 2}, {0.1, 0.4, 0.8}}});
  const auto svg = os.str();
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  EXPECT_NE(svg.find("&lt;clean&gt;"), std::string::npos);
  std::size_t lines = 0;
  for (auto p = svg.find("<polyline"); p != std::string::npos; p = svg.find("<polyline", p + 1)) ++lines;
  EXPECT_EQ(lines, 2u);
}

TEST(Plots, ScatterHandlesEmptyAndDegenerateInput) {
  std::ostringstream a, b;
  EXPECT_NO_THROW(report::write_scatter_plot(a, "empty", {}));
  EXPECT_NO_THROW(report::write_scatter_plot(b, "point", {{"g", {1.0}, {1.0}}}));
  EXPECT_EQ(b.str().find("nan"), std::string::npos);
  EXPECT_EQ(b.str().find("inf"), std::string::npos);
}

TEST(OutputDir, EnvironmentOverridesConfig) {
  ::unsetenv("HIJACKFL_OUTPUT_DIR");
  EXPECT_EQ(report::resolve_output_dir("cfg_dir"), "cfg_dir");
  ::setenv("HIJACKFL_OUTPUT_DIR", "/tmp/env_dir", 1);
  EXPECT_EQ(report::resolve_output_dir("cfg_dir"), "/tmp/env_dir");
  ::unsetenv("HIJACKFL_OUTPUT_DIR");
}
