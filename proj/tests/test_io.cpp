#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "support.hpp"

using namespace rded;
using namespace testing_support;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("rded-test-" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(RDED_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return rc;
}

IngestResult ingest_text(const std::string& s, const IngestOptions& opt = {}) {
  std::istringstream in(s);
  return ingest_long_csv(in, opt);
}

const char* kSmall =
    "subject,date,variable,value\n"
    "a,2020-01-01,X,1\n"
    "a,2020-01-01,U,10\n"
    "a,2020-01-02,X,2\n"
    "a,2020-01-02,U,20\n"
    "a,2020-01-03,X,3\n"
    "a,2020-01-03,U,30\n"
    "b,2020-01-01,X,4\n"
    "b,2020-01-01,U,40\n"
    "b,2020-01-02,X,5\n"
    "b,2020-01-02,U,50\n"
    "b,2020-01-03,X,6\n"
    "b,2020-01-03,U,60\n";

}  // namespace

TEST(Dates, IsoRoundTrip) {
  EXPECT_EQ(parse_iso_date("1970-01-01"), 0L);
  EXPECT_EQ(parse_iso_date("2020-03-01").value() - parse_iso_date("2020-02-28").value(), 2L);
  EXPECT_EQ(format_iso_date(*parse_iso_date("2024-12-31")), "2024-12-31");
  EXPECT_FALSE(parse_iso_date("2020-02-30"));
  EXPECT_FALSE(parse_iso_date("yesterday"));
}

TEST(Csv, QuotedFields) {
  EXPECT_EQ(split_csv_line("a,\"b,c\",\"d\"\"e\""), (std::vector<std::string>{"a", "b,c", "d\"e"}));
  EXPECT_EQ(csv_field("x,y"), "\"x,y\"");
  EXPECT_EQ(csv_field("plain"), "plain");
}

TEST(Ingest, CompletePanel) {
  const auto r = ingest_text(kSmall);
  const auto& p = r.panel;
  EXPECT_EQ(r.originDate, "2020-01-01");
  EXPECT_EQ(p.subjects, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(p.covariateNames, std::vector<std::string>{"U"});
  EXPECT_EQ(p.K(), 3u);
  EXPECT_EQ(p.response[1].values, (std::vector<double>{4, 5, 6}));
  EXPECT_EQ(p.covariates[0][0].values, (std::vector<double>{10, 20, 30}));
  EXPECT_FALSE(p.response[0].has_missing());
}

TEST(Ingest, MissingRowIsMasked) {
  std::string s = kSmall;
  s.erase(s.find("b,2020-01-02,X,5\n"), std::string("b,2020-01-02,X,5\n").size());
  const auto p = ingest_text(s).panel;
  EXPECT_TRUE(p.response[1].missing(1));
  EXPECT_TRUE(std::isnan(p.response[1].values[1]));
  EXPECT_FALSE(p.covariates[0][1].missing(1));
}

TEST(Ingest, NaValueIsMasked) {
  std::string s = kSmall;
  s.replace(s.find("a,2020-01-03,U,30"), 17, "a,2020-01-03,U,NA");
  EXPECT_TRUE(ingest_text(s).panel.covariates[0][0].missing(2));
}

TEST(Ingest, DateGapIsIrregular) {
  const std::string s =
      "subject,date,variable,value\n"
      "a,2020-01-01,X,1\n"
      "a,2020-01-04,X,2\n";
  try {
    (void)ingest_text(s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IrregularGrid);
  }
}

TEST(Ingest, DuplicateRow) {
  try {
    (void)ingest_text(std::string(kSmall) + "a,2020-01-02,U,99\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DuplicateRow);
  }
}

TEST(Ingest, ParseErrorNamesLine) {
  std::string s = kSmall;
  s.replace(s.find("a,2020-01-02,X,2"), 16, "a,2020-01-02,X,oops");
  try {
    (void)ingest_text(s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ParseError);
    EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos);
  }
  EXPECT_THROW((void)ingest_text("id,date,variable,value\n"), Error);
}

TEST(Ingest, SubjectFiltersAndDrops) {
  IngestOptions opt;
  opt.exclude = {"a"};
  EXPECT_EQ(ingest_text(kSmall, opt).panel.subjects, std::vector<std::string>{"b"});
  opt = {};
  opt.include = {"a"};
  EXPECT_EQ(ingest_text(kSmall, opt).panel.subjects, std::vector<std::string>{"a"});
  std::string s = kSmall;
  for (const char* d : {"b,2020-01-01,U,40\n", "b,2020-01-02,U,50\n", "b,2020-01-03,U,60\n"})
    s.erase(s.find(d), std::string(d).size());
  const auto r = ingest_text(s);
  EXPECT_EQ(r.panel.subjects, std::vector<std::string>{"a"});
  EXPECT_EQ(r.dropped, std::vector<std::string>{"b"});
}

TEST(Simulate, RoundTripIsExact) {
  auto sc = parse_simulation_config(load_json(fs::path(RDED_FIXTURES) / "lag_recovery_generator.json"));
  sc.generator.subjects = 4;
  const auto sim = simulate(sc, 5);
  std::ostringstream os;
  write_long_csv(os, sim.panel, sc.startDate);
  std::istringstream in(os.str());
  const auto back = ingest_long_csv(in).panel;
  EXPECT_EQ(back.subjects, sim.panel.subjects);
  EXPECT_EQ(back.covariateNames, sim.panel.covariateNames);
  for (std::size_t i = 0; i < back.n(); ++i) {
    EXPECT_EQ(back.response[i].values, sim.panel.response[i].values);
    for (std::size_t j = 0; j < back.J(); ++j) EXPECT_EQ(back.covariates[j][i].values, sim.panel.covariates[j][i].values);
  }
}

TEST(Simulate, AllZeroGeneratorIsConstant) {
  const auto sc = parse_simulation_config(json::parse(R"({"subjects": 2, "days": 5, "tau0": 0,
      "initial": {"level_mean": 2.0, "level_sd": 0.0}})"));
  const auto sim = simulate(sc, 1);
  for (const auto& tr : sim.panel.response)
    for (double v : tr.values) EXPECT_DOUBLE_EQ(v, 2.0);
}

TEST(Simulate, ConfigValidation) {
  EXPECT_THROW((void)parse_simulation_config(json::parse(R"({"subjects": 1})")), Error);
  EXPECT_THROW((void)parse_simulation_config(json::parse(R"({"days": 10, "tau0": 10})")), Error);
}

TEST(RunConfig, DefaultsAndOverrides) {
  const auto c = parse_run_config(json::parse(R"({"input": "d.csv"})"), "/base");
  EXPECT_EQ(c.inputPath, fs::path("/base/d.csv"));
  EXPECT_EQ(c.pipeline.tau0, 14u);
  EXPECT_EQ(c.pipeline.searchMax, 21u);
  EXPECT_EQ(c.pipeline.pStar, 0.3);
  EXPECT_DOUBLE_EQ(c.pipeline.dataBandwidth, 1.5);
  EXPECT_DOUBLE_EQ(c.pipeline.coefBandwidth, 20.0);
  EXPECT_FALSE(c.pipeline.derivativeBandwidth);
  EXPECT_EQ(c.pipeline.cycleCap, 10u);
  const auto d = parse_run_config(json::parse(R"({"input": "d.csv", "p_star": "cv", "bandwidths": {"derivative": 3}})"));
  EXPECT_FALSE(d.pipeline.pStar);
  EXPECT_EQ(d.pipeline.derivativeBandwidth, 3.0);
  EXPECT_THROW((void)parse_run_config(json::parse(R"({"input": "d.csv", "p_star": 2})")), Error);
  EXPECT_THROW((void)parse_run_config(json::parse(R"({"input": "d.csv", "bandwidths": {"data": 0}})")), Error);
  EXPECT_THROW((void)parse_run_config(json::parse(R"({"tau0": 3})")), Error);
}

TEST(ArtifactWriter, UncommittedFilesVanish) {
  const auto dir = scratch("writer");
  {
    ArtifactWriter w(dir);
    w.write("a.txt", "x");
  }
  EXPECT_TRUE(fs::is_empty(dir));
  {
    ArtifactWriter w(dir);
    w.write("a.txt", "x");
    w.commit();
  }
  EXPECT_EQ(slurp(dir / "a.txt"), "x");
  EXPECT_EQ(std::distance(fs::directory_iterator(dir), fs::directory_iterator{}), 1);
}

TEST(Cli, SimulateFitReproducible) {
  const auto dir = scratch("cli");
  const auto gen = fs::path(RDED_FIXTURES) / "lag_recovery_generator.json";
  ASSERT_EQ(cli("simulate --config " + gen.string() + " --out " + (dir / "sim").string(), dir / "log0"), 0);
  ASSERT_EQ(cli("simulate --config " + gen.string() + " --out " + (dir / "sim2").string(), dir / "log0b"), 0);
  EXPECT_EQ(slurp(dir / "sim" / "data.csv"), slurp(dir / "sim2" / "data.csv"));
  const auto truth = load_json(dir / "sim" / "truth.json");
  EXPECT_EQ(truth["seed"], 20200919);

  write_file(dir / "run.json", R"({"input": "sim/data.csv", "output_dir": "fit1"})");
  ASSERT_EQ(cli("fit --config " + (dir / "run.json").string(), dir / "log1"), 0) << slurp(dir / "log1");
  ASSERT_EQ(cli("fit --config " + (dir / "run.json").string() + " --out " + (dir / "fit2").string(), dir / "log2"), 0);
  const std::string a = slurp(dir / "fit1" / "fit.json");
  EXPECT_EQ(a, slurp(dir / "fit2" / "fit.json"));
  EXPECT_EQ(slurp(dir / "fit1" / "residuals.csv"), slurp(dir / "fit2" / "residuals.csv"));

  const auto fit = json::parse(a);
  for (const char* name : {"U1", "U2", "U3", "U4"}) EXPECT_EQ(fit["lags"][name], truth["lags"][name]) << name;
  for (const char* f : {"fit.json", "residuals.csv", "predictions.csv", "surface.csv", "comparison.json", "run_manifest.json"})
    EXPECT_TRUE(fs::exists(dir / "fit1" / f)) << f;

  const auto manifest = load_json(dir / "fit1" / "run_manifest.json");
  double sum = 0.0;
  for (const auto& s : manifest["stages"]) sum += s["seconds"].get<double>();
  const double total = manifest["total_seconds"].get<double>();
  EXPECT_LE(sum, total * 1.0001);
  EXPECT_GE(sum, total * 0.95);
  EXPECT_EQ(manifest["subjects"], 50);
  EXPECT_EQ(manifest["origin_date"], "2020-04-01");
}

TEST(Cli, FailureIsTaggedAndLeavesNoArtifacts) {
  const auto dir = scratch("cli-fail");
  auto sc = parse_simulation_config(load_json(fs::path(RDED_FIXTURES) / "lag_recovery_generator.json"));
  sc.generator.subjects = 5;
  sc.generator.grid.count = 40;
  write_simulation(simulate(sc, 1), sc.startDate, dir / "sim");
  write_file(dir / "run.json", R"({"input": "sim/data.csv", "tau0": 200, "output_dir": "out"})");
  EXPECT_NE(cli("fit --config " + (dir / "run.json").string(), dir / "log"), 0);
  const std::string log = slurp(dir / "log");
  EXPECT_NE(log.find("EmptyDomain"), std::string::npos) << log;
  EXPECT_NE(log.find("[validate]"), std::string::npos) << log;
  EXPECT_TRUE(!fs::exists(dir / "out") || fs::is_empty(dir / "out"));

  write_file(dir / "bad.json", R"({"input": "sim/missing.csv"})");
  EXPECT_NE(cli("evaluate --config " + (dir / "bad.json").string(), dir / "log2"), 0);
  EXPECT_NE(slurp(dir / "log2").find("[ingest]"), std::string::npos);
}

TEST(Cli, EvaluateAndCompareModes) {
  const auto dir = scratch("cli-modes");
  auto sc = parse_simulation_config(load_json(fs::path(RDED_FIXTURES) / "lag_recovery_generator.json"));
  sc.generator.subjects = 12;
  sc.generator.grid.count = 60;
  write_simulation(simulate(sc, 2), sc.startDate, dir / "sim");
  write_file(dir / "run.json", R"({"input": "sim/data.csv", "tau0": 5, "search_max": 8})");
  ASSERT_EQ(cli("evaluate --config " + (dir / "run.json").string() + " --out " + (dir / "e").string(), dir / "l1"), 0)
      << slurp(dir / "l1");
  EXPECT_TRUE(fs::exists(dir / "e" / "evaluation.json"));
  EXPECT_FALSE(fs::exists(dir / "e" / "fit.json"));
  ASSERT_EQ(cli("compare --config " + (dir / "run.json").string() + " --out " + (dir / "c").string(), dir / "l2"), 0);
  const auto cmp = load_json(dir / "c" / "comparison.json");
  EXPECT_GT(cmp["imse_ratio"].get<double>(), 0.0);
  EXPECT_FALSE(fs::exists(dir / "c" / "fit.json"));
}
