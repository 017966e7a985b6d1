#pragma once

// Long-format CSV ingestion and emission, JSON configuration for runs and the
// synthetic generator, and artifact writing for the command-line tool.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rded/evaluation.hpp"
#include "rded/pipeline.hpp"
#include "rded/solver.hpp"

namespace rded {

using json = nlohmann::json;
namespace fs = std::filesystem;

/// Shortest-safe round-trip text form: 17 significant digits.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------- dates

/// Days since 1970-01-01 of an ISO-8601 calendar date (YYYY-MM-DD).
inline std::optional<long> parse_iso_date(const std::string& s) {
  int y = 0;
  unsigned m = 0, d = 0;
  char tail = 0;
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
  if (std::sscanf(s.c_str(), "%4d-%2u-%2u%c", &y, &m, &d, &tail) != 3) return std::nullopt;
  const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!ymd.ok()) return std::nullopt;
  return std::chrono::sys_days{ymd}.time_since_epoch().count();
}

inline std::string format_iso_date(long days) {
  const std::chrono::year_month_day ymd{std::chrono::sys_days{std::chrono::days{days}}};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                static_cast<unsigned>(ymd.day()));
  return buf;
}

// ---------------------------------------------------------------- CSV

/// Splits one CSV record, honouring double-quoted fields.
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t c = 0; c < line.size(); ++c) {
    const char ch = line[c];
    if (quoted) {
      if (ch == '"' && c + 1 < line.size() && line[c + 1] == '"') {
        cur += '"';
        ++c;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return q + "\"";
}

struct IngestOptions {
  std::string response = "X";
  std::vector<std::string> covariates;  // empty: every other variable, sorted by name
  std::vector<std::string> include;     // empty: all subjects
  std::vector<std::string> exclude;
};

struct IngestResult {
  TrajectoryPanel panel;
  std::string originDate;
  std::vector<std::string> dropped;  // subjects missing a variable entirely
};

/// Pivots a long CSV (subject,date,variable,value) onto the common daily grid.
/// Absent rows become masked entries; every subject must have rows on every date.
inline IngestResult ingest_long_csv(std::istream& in, const IngestOptions& opt = {}) {
  std::string line;
  std::size_t lineNo = 0;
  if (!std::getline(in, line)) throw Error(ErrorCode::ParseError, "line 1: empty input");
  ++lineNo;
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);
  const auto header = split_csv_line(line);
  if (header != std::vector<std::string>{"subject", "date", "variable", "value"})
    throw Error(ErrorCode::ParseError, "line 1: header must be subject,date,variable,value");

  struct Cell {
    double value;
    bool missing;
  };
  std::map<std::string, std::map<std::string, std::map<long, Cell>>> data;  // subject -> variable -> day
  std::map<std::string, std::set<long>> subjectDays;
  std::set<std::string> variables;
  std::vector<std::string> subjectOrder;
  long lo = std::numeric_limits<long>::max(), hi = std::numeric_limits<long>::min();
  const std::set<std::string> include(opt.include.begin(), opt.include.end());
  const std::set<std::string> exclude(opt.exclude.begin(), opt.exclude.end());

  while (std::getline(in, line)) {
    ++lineNo;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    const std::string where = "line " + std::to_string(lineNo);
    if (f.size() != 4) throw Error(ErrorCode::ParseError, where + ": expected 4 fields");
    const auto day = parse_iso_date(f[1]);
    if (!day) throw Error(ErrorCode::ParseError, where + ": bad date '" + f[1] + "'");
    Cell cell{0.0, true};
    if (!f[3].empty() && f[3] != "NA") {
      char* end = nullptr;
      cell.value = std::strtod(f[3].c_str(), &end);
      if (end == f[3].c_str() || *end != '\0') throw Error(ErrorCode::ParseError, where + ": bad value '" + f[3] + "'");
      cell.missing = false;
    }
    if ((!include.empty() && !include.count(f[0])) || exclude.count(f[0])) continue;
    if (!data.count(f[0])) subjectOrder.push_back(f[0]);
    auto& slot = data[f[0]][f[2]];
    if (!slot.emplace(*day, cell).second)
      throw Error(ErrorCode::DuplicateRow, where + ": duplicate (" + f[0] + ", " + f[1] + ", " + f[2] + ")");
    subjectDays[f[0]].insert(*day);
    variables.insert(f[2]);
    lo = std::min(lo, *day);
    hi = std::max(hi, *day);
  }
  if (data.empty()) throw Error(ErrorCode::ParseError, "no data rows");
  if (!variables.count(opt.response))
    throw Error(ErrorCode::InvalidConfig, "response variable '" + opt.response + "' not present");

  std::vector<std::string> covs = opt.covariates;
  if (covs.empty())
    for (const auto& v : variables)
      if (v != opt.response) covs.push_back(v);
  for (const auto& c : covs)
    if (!variables.count(c)) throw Error(ErrorCode::InvalidConfig, "covariate '" + c + "' not present");

  const auto K = static_cast<std::size_t>(hi - lo + 1);
  for (const auto& [subject, days] : subjectDays) {
    if (days.size() != K) {
      long gap = lo;
      while (days.count(gap)) ++gap;
      throw Error(ErrorCode::IrregularGrid, "subject '" + subject + "' has no rows on " + format_iso_date(gap) +
                                                 "; dates must be daily over " + format_iso_date(lo) + ".." +
                                                 format_iso_date(hi));
    }
  }

  IngestResult res;
  res.originDate = format_iso_date(lo);
  TrajectoryPanel& p = res.panel;
  p.grid = TimeGrid{0.0, 1.0, K};
  p.responseName = opt.response;
  p.covariateNames = covs;
  p.covariates.assign(covs.size(), {});
  auto pivot = [&](const std::map<long, Cell>& cells) {
    Trajectory tr;
    tr.values.assign(K, 0.0);
    tr.mask.assign(K, false);
    for (std::size_t k = 0; k < K; ++k) {
      auto it = cells.find(lo + static_cast<long>(k));
      if (it == cells.end() || it->second.missing) {
        tr.values[k] = std::numeric_limits<double>::quiet_NaN();
        tr.mask[k] = true;
      } else {
        tr.values[k] = it->second.value;
      }
    }
    if (!tr.has_missing()) tr.mask.clear();
    return tr;
  };
  for (const auto& subject : subjectOrder) {
    const auto& vars = data[subject];
    bool complete = vars.count(opt.response) > 0;
    for (const auto& c : covs) complete = complete && vars.count(c) > 0;
    if (!complete) {
      res.dropped.push_back(subject);
      continue;
    }
    p.subjects.push_back(subject);
    p.response.push_back(pivot(vars.at(opt.response)));
    for (std::size_t j = 0; j < covs.size(); ++j) p.covariates[j].push_back(pivot(vars.at(covs[j])));
  }
  return res;
}

inline IngestResult ingest_long_csv(const fs::path& path, const IngestOptions& opt = {}) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::ParseError, "cannot open " + path.string());
  return ingest_long_csv(in, opt);
}

/// Long CSV of the observed response and covariates; masked entries are omitted.
inline void write_long_csv(std::ostream& out, const TrajectoryPanel& p, const std::string& originDate) {
  const long origin = *parse_iso_date(originDate);
  out << "subject,date,variable,value\n";
  for (std::size_t i = 0; i < p.n(); ++i) {
    for (std::size_t k = 0; k < p.K(); ++k) {
      const std::string date = format_iso_date(origin + std::lround(p.grid.at(k)));
      auto row = [&](const std::string& var, const Trajectory& tr) {
        if (tr.missing(k)) return;
        out << csv_field(p.subjects[i]) << ',' << date << ',' << csv_field(var) << ',' << format_double(tr.values[k])
            << '\n';
      };
      row(p.responseName, p.response[i]);
      for (std::size_t j = 0; j < p.J(); ++j) row(p.covariateNames[j], p.covariates[j][i]);
    }
  }
}

// ---------------------------------------------------------------- artifacts

/// Stages files in a hidden directory and moves them into place on commit; anything
/// staged is removed if the writer is destroyed without committing.
class ArtifactWriter {
 public:
  explicit ArtifactWriter(fs::path outDir) : out_(std::move(outDir)) {
    fs::create_directories(out_);
    staging_ = out_ / (".staging-" + std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
    fs::create_directories(staging_);
  }
  ArtifactWriter(const ArtifactWriter&) = delete;
  ArtifactWriter& operator=(const ArtifactWriter&) = delete;
  ~ArtifactWriter() {
    std::error_code ec;
    fs::remove_all(staging_, ec);
  }

  void write(const std::string& name, const std::string& content) {
    std::ofstream f(staging_ / name, std::ios::binary);
    f << content;
    if (!f) throw Error(ErrorCode::InvalidConfig, "cannot write " + (staging_ / name).string());
    names_.push_back(name);
  }

  void commit() {
    for (const auto& n : names_) fs::rename(staging_ / n, out_ / n);
    names_.clear();
  }

  const fs::path& dir() const { return out_; }

 private:
  fs::path out_, staging_;
  std::vector<std::string> names_;
};

// ---------------------------------------------------------------- JSON encoders

inline json to_json(const LagConfig& c, const std::vector<std::string>& names) {
  json lags = json::object();
  for (std::size_t j = 0; j < c.lags.size(); ++j) lags[j < names.size() ? names[j] : std::to_string(j)] = c.lags[j];
  return {{"tau0", c.tau0}, {"search_max", c.searchMax}, {"lags", lags}};
}

inline json to_json(const HistorySurface& s) {
  std::vector<std::vector<double>> rows(s.lags(), std::vector<double>(s.times()));
  for (std::size_t a = 0; a < s.lags(); ++a)
    for (std::size_t c = 0; c < s.times(); ++c) rows[a][c] = s(a, c);
  return {{"lag_axis", s.lagAxis}, {"time_axis", s.timeAxis}, {"gamma", rows}};
}

inline json to_json(const SelectionReport& r, const std::vector<std::string>& names) {
  json props = json::object();
  for (std::size_t j = 0; j < r.proportions.size(); ++j) props[names[j]] = r.proportions[j];
  std::vector<std::string> sel;
  for (auto j : r.selected) sel.push_back(names[j]);
  json out = {{"proportions", props}, {"threshold", r.threshold}, {"selected", sel}, {"lambdas", r.lambdas}};
  if (!r.thresholdCriterion.empty()) {
    json cv = json::array();
    for (auto [p, c] : r.thresholdCriterion) cv.push_back({{"p_star", p}, {"loo_imse", c}});
    out["threshold_cv"] = cv;
  }
  return out;
}

inline json to_json(const BackfitTrace& t, const std::vector<std::string>& names) {
  json it = json::array();
  for (const auto& s : t.iterations)
    it.push_back({{"cycle", s.cycle}, {"covariate", names[s.covariate]}, {"lags", s.lags},
                  {"criterion", s.criterion}, {"before", s.before}, {"after", s.after}});
  return {{"converged", t.converged}, {"cycles", t.cycles}, {"iterations", it}};
}

/// Deterministic summary of a learned model (no timings or paths).
inline json fit_json(const PipelineResult& r) {
  const auto& names = r.prepared.covariateNames;
  const auto& f = r.fit;
  json coefs = json::object();
  json raw = json::object();
  for (std::size_t q = 0; q < f.selected.size(); ++q) {
    coefs[f.selectedNames[q]] = f.covariateCoefs[q];
    raw[f.selectedNames[q]] = f.rawCovariateCoefs[q];
  }
  json initial = json::object();
  for (std::size_t j = 0; j < r.initialLags.size(); ++j)
    initial[names[j]] = {{"lag", r.initialLags[j].lag}, {"criterion", r.initialLags[j].criterion}};
  json lags = json::object();
  for (auto j : f.selected) lags[names[j]] = r.lags.lags[j];
  return {
      {"response", r.prepared.responseName},
      {"subjects", r.prepared.subjects},
      {"tau0", r.lags.tau0},
      {"lags", lags},
      {"lag_config", to_json(r.lags, names)},
      {"initial_lags", initial},
      {"selection", to_json(r.selection, names)},
      {"backfit", to_json(r.backfit, names)},
      {"fit_domain", {{"first_index", f.fitDomain.first}, {"last_index", f.fitDomain.last}}},
      {"time", f.time},
      {"coefficients", {{"intercept", f.intercept}, {"history", f.historyCoef}, {"covariates", coefs}}},
      {"raw_coefficients", {{"intercept", f.rawIntercept}, {"history", f.rawHistoryCoef}, {"covariates", raw}}},
      {"surface", to_json(r.surface)},
  };
}

// ---------------------------------------------------------------- run configuration

struct RunConfig {
  fs::path inputPath;
  std::string responseName = "X";
  std::vector<std::string> covariateNames;
  std::vector<std::string> includeSubjects;
  std::vector<std::string> excludeSubjects;
  PipelineConfig pipeline;  // tau0 14, searchMax 21, p* 0.3, bandwidths 1.5 / 20 / cv
  std::uint64_t seed = 0;
  fs::path outputDir = "out";
  bool strictLoo = false;
  bool refitSurfacePerFold = false;
};

inline RunConfig parse_run_config(const json& j, const fs::path& baseDir = {}) {
  RunConfig c;
  auto path_of = [&](const std::string& s) {
    fs::path p(s);
    return p.is_relative() && !baseDir.empty() ? baseDir / p : p;
  };
  try {
    if (!j.contains("input")) throw Error(ErrorCode::InvalidConfig, "config needs 'input'");
    c.inputPath = path_of(j.at("input").get<std::string>());
    c.responseName = j.value("response", c.responseName);
    c.covariateNames = j.value("covariates", c.covariateNames);
    c.includeSubjects = j.value("include_subjects", c.includeSubjects);
    c.excludeSubjects = j.value("exclude_subjects", c.excludeSubjects);
    c.pipeline.tau0 = j.value("tau0", c.pipeline.tau0);
    c.pipeline.searchMax = j.value("search_max", c.pipeline.searchMax);
    c.pipeline.cycleCap = j.value("cycle_cap", c.pipeline.cycleCap);
    if (j.contains("p_star")) {
      const auto& ps = j.at("p_star");
      if (ps.is_string() && ps.get<std::string>() == "cv") c.pipeline.pStar.reset();
      else c.pipeline.pStar = ps.get<double>();
    }
    if (j.contains("bandwidths")) {
      const auto& b = j.at("bandwidths");
      c.pipeline.dataBandwidth = b.value("data", c.pipeline.dataBandwidth);
      c.pipeline.coefBandwidth = b.value("coefficients", c.pipeline.coefBandwidth);
      if (b.contains("derivative")) {
        const auto& d = b.at("derivative");
        if (d.is_string() && d.get<std::string>() == "cv") c.pipeline.derivativeBandwidth.reset();
        else c.pipeline.derivativeBandwidth = d.get<double>();
      }
      c.pipeline.surface.bandwidth.lagSteps = b.value("surface_lag_steps", c.pipeline.surface.bandwidth.lagSteps);
      c.pipeline.surface.bandwidth.timeSteps = b.value("surface_time_steps", c.pipeline.surface.bandwidth.timeSteps);
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("output_dir")) c.outputDir = path_of(j.at("output_dir").get<std::string>());
    c.strictLoo = j.value("strict_loo", c.strictLoo);
    c.refitSurfacePerFold = j.value("refit_surface_per_fold", c.refitSurfacePerFold);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, e.what());
  }
  const auto& pc = c.pipeline;
  if (!(pc.dataBandwidth > 0) || !(pc.coefBandwidth > 0) || (pc.derivativeBandwidth && !(*pc.derivativeBandwidth > 0)))
    throw Error(ErrorCode::InvalidConfig, "bandwidths must be positive");
  if (pc.pStar && (*pc.pStar < 0.0 || *pc.pStar > 1.0)) throw Error(ErrorCode::InvalidConfig, "p_star must lie in [0, 1]");
  return c;
}

inline json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::InvalidConfig, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
}

inline RunConfig load_run_config(const fs::path& path) {
  return parse_run_config(load_json(path), path.parent_path());
}

inline json config_echo(const RunConfig& c) {
  const auto& p = c.pipeline;
  json j = {{"input", c.inputPath.string()},
            {"response", c.responseName},
            {"covariates", c.covariateNames},
            {"include_subjects", c.includeSubjects},
            {"exclude_subjects", c.excludeSubjects},
            {"tau0", p.tau0},
            {"search_max", p.searchMax},
            {"cycle_cap", p.cycleCap},
            {"seed", c.seed},
            {"output_dir", c.outputDir.string()},
            {"strict_loo", c.strictLoo},
            {"refit_surface_per_fold", c.refitSurfacePerFold}};
  j["p_star"] = p.pStar ? json(*p.pStar) : json("cv");
  j["bandwidths"] = {{"data", p.dataBandwidth},
                     {"coefficients", p.coefBandwidth},
                     {"derivative", p.derivativeBandwidth ? json(*p.derivativeBandwidth) : json("cv")},
                     {"surface_lag_steps", p.surface.bandwidth.lagSteps},
                     {"surface_time_steps", p.surface.bandwidth.timeSteps}};
  return j;
}

// ---------------------------------------------------------------- generator configuration

/// Curve of time t (days from the first grid point): a constant, {"polynomial": [c0, c1, ...]}
/// or {"table": [v_0, ..., v_{K-1}]} on the grid with linear interpolation.
inline TimeFn parse_curve(const json& j, const TimeGrid& grid) {
  if (j.is_number()) {
    const double c = j.get<double>();
    return [c](double) { return c; };
  }
  if (j.contains("polynomial")) {
    const auto c = j.at("polynomial").get<std::vector<double>>();
    const double t0 = grid.start;
    return [c, t0](double t) {
      double v = 0.0;
      for (std::size_t a = c.size(); a-- > 0;) v = v * (t - t0) + c[a];
      return v;
    };
  }
  if (j.contains("table")) {
    const auto v = j.at("table").get<std::vector<double>>();
    if (v.empty()) throw Error(ErrorCode::InvalidConfig, "empty table curve");
    const TimeGrid g = grid;
    return [v, g](double t) {
      const double u = std::clamp((t - g.start) / g.step, 0.0, static_cast<double>(v.size() - 1));
      const auto k = static_cast<std::size_t>(std::floor(u));
      if (k + 1 >= v.size()) return v.back();
      const double w = u - static_cast<double>(k);
      return (1.0 - w) * v[k] + w * v[k + 1];
    };
  }
  throw Error(ErrorCode::InvalidConfig, "curve must be a number, {polynomial} or {table}");
}

/// Surface gamma(s, t): a constant, {"product": [curve of s, curve of t]} or
/// {"polynomial": [[c_00, c_01, ...], [c_10, ...]]} meaning sum c_ab s^a (t - t0)^b.
inline SurfaceFn parse_surface(const json& j, const TimeGrid& grid) {
  if (j.is_number()) {
    const double c = j.get<double>();
    return [c](double, double) { return c; };
  }
  if (j.contains("product")) {
    const auto& pr = j.at("product");
    const TimeGrid sgrid{0.0, grid.step, grid.count};
    auto fs_ = parse_curve(pr.at(0), sgrid);
    auto ft = parse_curve(pr.at(1), grid);
    return [fs_, ft](double s, double t) { return fs_(s) * ft(t); };
  }
  if (j.contains("polynomial")) {
    const auto c = j.at("polynomial").get<std::vector<std::vector<double>>>();
    const double t0 = grid.start;
    return [c, t0](double s, double t) {
      double v = 0.0, sp = 1.0;
      for (const auto& row : c) {
        double tp = 1.0;
        for (double cab : row) {
          v += cab * sp * tp;
          tp *= (t - t0);
        }
        sp *= s;
      }
      return v;
    };
  }
  throw Error(ErrorCode::InvalidConfig, "surface must be a number, {product} or {polynomial}");
}

struct SimulationConfig {
  GeneratorSpec generator;
  std::string startDate = "2020-01-01";
  json source;
};

inline SmoothNoiseLaw parse_noise_law(const json& j, SmoothNoiseLaw d) {
  d.mean = j.value("mean", d.mean);
  d.sd = j.value("sd", d.sd);
  d.correlation = j.value("correlation", d.correlation);
  return d;
}

/// Generator specification: subjects, days, coefficient curves, lags, history weight,
/// covariate laws, drift amplitude and observation noise.
inline SimulationConfig parse_simulation_config(const json& j) {
  SimulationConfig sc;
  sc.source = j;
  auto& g = sc.generator;
  try {
    g.subjects = j.value("subjects", std::size_t{50});
    g.grid = TimeGrid{0.0, 1.0, j.value("days", std::size_t{130})};
    sc.startDate = j.value("start_date", sc.startDate);
    if (!parse_iso_date(sc.startDate)) throw Error(ErrorCode::InvalidConfig, "bad start_date");
    g.responseName = j.value("response", g.responseName);
    g.noiseSd = j.value("noise_sd", 0.0);
    if (g.noiseSd < 0.0) throw Error(ErrorCode::InvalidConfig, "noise_sd must be nonnegative");
    if (j.contains("drift")) g.drift = parse_noise_law(j.at("drift"), g.drift);
    if (j.contains("initial")) {
      const auto& in = j.at("initial");
      g.initialLaw.levelMean = in.value("level_mean", g.initialLaw.levelMean);
      g.initialLaw.levelSd = in.value("level_sd", g.initialLaw.levelSd);
      g.initialLaw.slopeSd = in.value("slope_sd", g.initialLaw.slopeSd);
      g.initialLaw.wiggle.sd = in.value("wiggle_sd", g.initialLaw.wiggle.sd);
      g.initialLaw.wiggle.correlation = in.value("wiggle_correlation", g.initialLaw.wiggle.correlation);
    }
    auto& m = g.model;
    m.lagConfig.tau0 = j.value("tau0", std::size_t{0});
    m.lagConfig.searchMax = j.value("search_max", std::size_t{21});
    if (j.contains("intercept")) m.intercept = parse_curve(j.at("intercept"), g.grid);
    if (j.contains("history_coefficient")) m.historyCoef = parse_curve(j.at("history_coefficient"), g.grid);
    if (j.contains("history_weight")) m.historyWeight = parse_surface(j.at("history_weight"), g.grid);
    for (const auto& c : j.value("covariates", json::array())) {
      g.covariateNames.push_back(c.at("name").get<std::string>());
      g.covariateLaws.push_back(parse_noise_law(c, SmoothNoiseLaw{}));
      m.covariateCoefs.push_back(c.contains("coefficient") ? parse_curve(c.at("coefficient"), g.grid) : TimeFn{});
      m.lagConfig.lags.push_back(c.value("lag", std::size_t{0}));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, e.what());
  }
  if (g.subjects < 2) throw Error(ErrorCode::TooFewSubjects, "subjects must be at least 2");
  if (g.grid.count < 2) throw Error(ErrorCode::InvalidConfig, "days must be at least 2");
  if (g.model.lagConfig.tau0 >= g.grid.count) throw Error(ErrorCode::InvalidConfig, "tau0 must be below days");
  return sc;
}

/// Generated panel plus its truth record.
struct Simulation {
  TrajectoryPanel panel;
  json truth;
};

inline Simulation simulate(const SimulationConfig& sc, std::uint64_t seed) {
  Simulation out;
  out.panel = generate_panel(sc.generator, seed);
  json lags = json::object();
  for (std::size_t j = 0; j < sc.generator.covariateNames.size(); ++j)
    lags[sc.generator.covariateNames[j]] = sc.generator.model.lagConfig.lags[j];
  out.truth = {{"seed", seed},
               {"start_date", sc.startDate},
               {"tau0", sc.generator.model.lagConfig.tau0},
               {"lags", lags},
               {"generator", sc.source}};
  return out;
}

/// Writes data.csv and truth.json.
inline void write_simulation(const Simulation& s, const std::string& startDate, const fs::path& outDir) {
  ArtifactWriter w(outDir);
  std::ostringstream csv;
  write_long_csv(csv, s.panel, startDate);
  w.write("data.csv", csv.str());
  w.write("truth.json", s.truth.dump(2) + "\n");
  w.commit();
}

// ---------------------------------------------------------------- runs

struct RunOutcome {
  PipelineResult result;
  std::optional<ComparisonReport> comparison;
  std::vector<StageTiming> timings;
  double totalSeconds = 0.0;
};

inline std::string residuals_csv(const PipelineResult& r) {
  std::ostringstream os;
  os << "subject,time,residual\n";
  for (std::size_t i = 0; i < r.prepared.n(); ++i)
    for (std::size_t c = 0; c < r.fit.time.size(); ++c)
      os << csv_field(r.prepared.subjects[i]) << ',' << format_double(r.fit.time[c]) << ','
         << format_double(r.fit.residuals[i][c]) << '\n';
  return os.str();
}

inline std::string surface_csv(const HistorySurface& s) {
  std::ostringstream os;
  os << "s,t,gamma\n";
  for (std::size_t a = 0; a < s.lags(); ++a)
    for (std::size_t c = 0; c < s.times(); ++c)
      os << format_double(s.lagAxis[a]) << ',' << format_double(s.timeAxis[c]) << ',' << format_double(s(a, c)) << '\n';
  return os.str();
}

inline std::string predictions_csv(const PredictionReport& lagged, const PredictionReport* zero) {
  std::ostringstream os;
  os << "subject,time,observed,predicted" << (zero ? ",predicted_zero_lag" : "") << '\n';
  for (std::size_t i = 0; i < lagged.subjects.size(); ++i)
    for (std::size_t c = 0; c < lagged.time.size(); ++c) {
      os << csv_field(lagged.subjects[i]) << ',' << format_double(lagged.time[c]) << ','
         << format_double(lagged.observed[i][c]) << ',' << format_double(lagged.predicted[i][c]);
      if (zero) os << ',' << format_double(zero->predicted[i][c]);
      os << '\n';
    }
  return os.str();
}

inline json prediction_json(const PredictionReport& r) {
  json per = json::object();
  for (std::size_t i = 0; i < r.subjects.size(); ++i) per[r.subjects[i]] = r.perSubjectIMSE[i];
  return {{"total_imse", r.totalIMSE}, {"per_subject_imse", per},
          {"domain", {{"first_index", r.domain.first}, {"last_index", r.domain.last}}}};
}

inline json comparison_json(const ComparisonReport& c) {
  json per = json::object();
  for (std::size_t i = 0; i < c.lagged.subjects.size(); ++i) per[c.lagged.subjects[i]] = c.perSubjectRatio[i];
  return {{"imse_ratio", c.ratio}, {"per_subject_ratio", per}, {"lagged", prediction_json(c.lagged)},
          {"zero_lag", prediction_json(c.zeroLag)}};
}

enum class RunMode { Fit, Evaluate, Compare };

/// Ingests the data, learns the model and writes the artifacts of the chosen mode.
/// Fit writes fit.json, residuals.csv, predictions.csv, surface.csv and run_manifest.json.
/// Nothing is left behind in the output directory when a stage fails.
inline RunOutcome run_pipeline(const RunConfig& cfg, RunMode mode = RunMode::Fit) {
  const auto start = std::chrono::steady_clock::now();
  RunOutcome out;
  auto& tm = out.timings;
  const IngestResult data = timed_stage(tm, "ingest", [&] {
    return ingest_long_csv(cfg.inputPath, IngestOptions{cfg.responseName, cfg.covariateNames, cfg.includeSubjects,
                                                        cfg.excludeSubjects});
  });
  TrajectoryPanel prepared = prepare_panel(data.panel, cfg.pipeline, &tm);
  out.result = learn_prepared(std::move(prepared), cfg.pipeline, tm);
  tm = out.result.timings;
  const auto& res = out.result;
  const LooOptions loo{cfg.refitSurfacePerFold, cfg.strictLoo, cfg.pipeline};
  const ModelStructure lagged = structure_of(res);

  ArtifactWriter w(cfg.outputDir);
  if (mode == RunMode::Evaluate) {
    const auto rep = timed_stage(tm, "loo_evaluation", [&] { return loo_predict(res.prepared, lagged, loo); });
    timed_stage(tm, "write_artifacts", [&] {
      w.write("predictions.csv", predictions_csv(rep, nullptr));
      w.write("evaluation.json", prediction_json(rep).dump(2) + "\n");
    });
  } else {
    out.comparison = timed_stage(tm, "loo_comparison", [&] {
      return compare_models(res.prepared, lagged, zero_lag_structure(res.prepared.grid, lagged), loo);
    });
    timed_stage(tm, "write_artifacts", [&] {
      w.write("predictions.csv", predictions_csv(out.comparison->lagged, &out.comparison->zeroLag));
      w.write("comparison.json", comparison_json(*out.comparison).dump(2) + "\n");
      if (mode == RunMode::Fit) {
        w.write("fit.json", fit_json(res).dump(2) + "\n");
        w.write("residuals.csv", residuals_csv(res));
        w.write("surface.csv", surface_csv(res.surface));
      }
    });
  }
  out.totalSeconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  json stages = json::array();
  for (const auto& s : tm) stages.push_back({{"stage", s.stage}, {"seconds", s.seconds}});
  json manifest = {{"config", config_echo(cfg)},
                   {"seed", cfg.seed},
                   {"origin_date", data.originDate},
                   {"dropped_subjects", data.dropped},
                   {"subjects", res.prepared.n()},
                   {"stages", stages},
                   {"total_seconds", out.totalSeconds}};
  w.write("run_manifest.json", manifest.dump(2) + "\n");
  w.commit();
  return out;
}

}  // namespace rded
