#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "marlin/stats.hpp"
#include "marlin/trainer.hpp"

namespace marlin {

/// A seed sweep over (scenario, mode) cells plus the reporting grid.
struct ExperimentSpec {
  std::vector<std::string> scenarios;
  std::vector<TrainMode> modes;
  std::vector<std::uint64_t> seeds;
  std::vector<int> checkpoints{100, 850, 1600};
  std::string backend = "oracle";
  TrainerConfig trainer{};  // per-cell seed/mode are overwritten while running
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> items;
  std::string item;
  std::istringstream in(value);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ParseError("empty item in list: " + value);
    items.push_back(item);
  }
  if (items.empty()) throw ParseError("empty list");
  return items;
}

inline int parse_int(const std::string& text, const std::string& what) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(text, &used);
    if (used != text.size()) throw ParseError(what + " wants an integer: " + text);
    return v;
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception&) {
    throw ParseError(what + " wants an integer: " + text);
  }
}

}  // namespace detail

/// Parses the experiment document: `key = value` lines, '#' starts a comment.
/// Lists are comma-separated; seeds also accept `a..b` inclusive ranges.
/// Required keys: scenarios, modes, seeds. Optional: episodes, m, step_max,
/// checkpoints, backend, eval_start, eval_every.
inline ExperimentSpec parse_experiment_spec(const std::string& text) {
  ExperimentSpec spec;
  bool have_checkpoints = false;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("experiment line missing '=': " + line);
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key == "scenarios") {
      spec.scenarios = detail::split_list(value);
    } else if (key == "modes") {
      for (const std::string& item : detail::split_list(value)) {
        const auto mode = train_mode_from_string(item);
        if (!mode) throw ParseError("unknown mode: " + item);
        spec.modes.push_back(*mode);
      }
    } else if (key == "seeds") {
      for (const std::string& item : detail::split_list(value)) {
        const auto dots = item.find("..");
        try {
          if (dots == std::string::npos) {
            spec.seeds.push_back(std::stoull(item));
          } else {
            const std::uint64_t lo = std::stoull(item.substr(0, dots));
            const std::uint64_t hi = std::stoull(item.substr(dots + 2));
            if (hi < lo) throw ParseError("descending seed range: " + item);
            for (std::uint64_t s = lo; s <= hi; ++s) spec.seeds.push_back(s);
          }
        } catch (const ParseError&) {
          throw;
        } catch (const std::exception&) {
          throw ParseError("bad seed: " + item);
        }
      }
    } else if (key == "checkpoints") {
      spec.checkpoints.clear();
      for (const std::string& item : detail::split_list(value)) {
        spec.checkpoints.push_back(detail::parse_int(item, "checkpoint"));
      }
      have_checkpoints = true;
    } else if (key == "episodes") {
      spec.trainer.episode_max = detail::parse_int(value, "episodes");
    } else if (key == "m") {
      spec.trainer.m = detail::parse_int(value, "m");
    } else if (key == "step_max") {
      spec.trainer.step_max = detail::parse_int(value, "step_max");
    } else if (key == "eval_start") {
      spec.trainer.eval_start = detail::parse_int(value, "eval_start");
    } else if (key == "eval_every") {
      spec.trainer.eval_every = detail::parse_int(value, "eval_every");
    } else if (key == "backend") {
      spec.backend = value;
    } else {
      throw ParseError("unknown experiment key: " + key);
    }
  }

  if (spec.scenarios.empty()) throw ParseError("experiment wants a 'scenarios' list");
  if (spec.modes.empty()) throw ParseError("experiment wants a 'modes' list");
  if (spec.seeds.empty()) throw ParseError("experiment wants a 'seeds' list");
  if (spec.trainer.episode_max < 1) throw ValidationError("episodes must be positive");
  if (spec.trainer.m < 1) throw ValidationError("m must be positive");
  if (spec.trainer.step_max < 1) throw ValidationError("step_max must be positive");

  std::set<std::string> scenario_set(spec.scenarios.begin(), spec.scenarios.end());
  if (scenario_set.size() != spec.scenarios.size()) throw ValidationError("duplicate scenario");
  std::set<TrainMode> mode_set(spec.modes.begin(), spec.modes.end());
  if (mode_set.size() != spec.modes.size()) throw ValidationError("duplicate mode");
  std::set<std::uint64_t> seed_set(spec.seeds.begin(), spec.seeds.end());
  if (seed_set.size() != spec.seeds.size()) throw ValidationError("duplicate seed");
  if (spec.modes.size() >= 2 && spec.seeds.size() < 2) {
    throw ValidationError("mode comparisons want at least two seeds");
  }

  if (!have_checkpoints) {
    // keep the default grid inside the episode budget
    std::vector<int> kept;
    for (int c : spec.checkpoints) {
      if (c <= spec.trainer.episode_max) kept.push_back(c);
    }
    if (kept.empty()) kept.push_back(spec.trainer.episode_max);
    spec.checkpoints = std::move(kept);
  } else {
    for (int c : spec.checkpoints) {
      if (c < 1) throw ValidationError("checkpoints must be positive");
      if (c > spec.trainer.episode_max) {
        throw ValidationError("checkpoint beyond the episode budget: " + std::to_string(c));
      }
    }
    std::sort(spec.checkpoints.begin(), spec.checkpoints.end());
    if (std::adjacent_find(spec.checkpoints.begin(), spec.checkpoints.end()) !=
        spec.checkpoints.end()) {
      throw ValidationError("duplicate checkpoint");
    }
  }
  return spec;
}

/// Half-open episode range [lo, hi).
struct EpisodeWindow {
  int lo = 0;
  int hi = 0;
};

inline double window_mean(const TrainingRecord& record, EpisodeWindow window) {
  if (window.lo < 0 || window.hi <= window.lo ||
      window.hi > static_cast<int>(record.episodes.size())) {
    throw ValidationError("episode window out of range");
  }
  double sum = 0.0;
  for (int i = window.lo; i < window.hi; ++i) sum += record.episodes[i].performance;
  return sum / static_cast<double>(window.hi - window.lo);
}

/// Paired test over per-seed window means. Records must be aligned by seed.
inline PairedTest paired_test(const std::vector<TrainingRecord>& a,
                              const std::vector<TrainingRecord>& b, EpisodeWindow window) {
  if (a.size() != b.size()) throw ValidationError("paired test wants matched seed sets");
  std::vector<double> means_a;
  std::vector<double> means_b;
  for (std::size_t i = 0; i < a.size(); ++i) {
    means_a.push_back(window_mean(a[i], window));
    means_b.push_back(window_mean(b[i], window));
  }
  return paired_test(means_a, means_b);
}

/// Cross-seed quartiles of per-episode performance.
struct CurvePoint {
  int episode = 0;
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
};

struct CurveSummary {
  // scenario -> mode name -> one point per episode
  std::map<std::string, std::map<std::string, std::vector<CurvePoint>>> curves;
};

inline std::vector<CurvePoint> aggregate_curve(const std::vector<TrainingRecord>& records) {
  if (records.empty()) throw ValidationError("no records to aggregate");
  std::size_t episodes = records.front().episodes.size();
  for (const TrainingRecord& r : records) episodes = std::min(episodes, r.episodes.size());
  std::vector<CurvePoint> curve;
  curve.reserve(episodes);
  for (std::size_t i = 0; i < episodes; ++i) {
    std::vector<double> sample;
    sample.reserve(records.size());
    for (const TrainingRecord& r : records) sample.push_back(r.episodes[i].performance);
    CurvePoint point;
    point.episode = static_cast<int>(i);
    point.q1 = quantile(sample, 0.25);
    point.median = quantile(sample, 0.5);
    point.q3 = quantile(sample, 0.75);
    curve.push_back(point);
  }
  return curve;
}

inline void write_curve_csv(std::ostream& out, const std::vector<CurvePoint>& curve) {
  out << "episode,q1,median,q3\n" << std::setprecision(17);
  for (const CurvePoint& p : curve) {
    out << p.episode << ',' << p.q1 << ',' << p.median << ',' << p.q3 << '\n';
  }
}

inline std::vector<CurvePoint> read_curve_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "episode,q1,median,q3") {
    throw ParseError("curve csv wants an 'episode,q1,median,q3' header");
  }
  std::vector<CurvePoint> curve;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string field;
    CurvePoint p;
    try {
      std::getline(row, field, ',');
      p.episode = std::stoi(field);
      std::getline(row, field, ',');
      p.q1 = std::stod(field);
      std::getline(row, field, ',');
      p.median = std::stod(field);
      if (!std::getline(row, field, ',')) throw ParseError("short curve row: " + line);
      p.q3 = std::stod(field);
    } catch (const std::exception&) {
      throw ParseError("bad curve row: " + line);
    }
    curve.push_back(p);
  }
  return curve;
}

namespace detail {

inline const char* mode_color(const std::string& mode) {
  if (mode == "marlin") return "#2f6fb4";
  if (mode == "mappo") return "#c8452c";
  if (mode == "llm-only") return "#3d8f54";
  return "#777777";
}

inline std::string fmt(double v, int digits = 3) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(digits) << v;
  return out.str();
}

}  // namespace detail

/// Median learning curves with interquartile bands, one SVG per scenario.
inline std::string render_curve_svg(
    const std::string& scenario,
    const std::map<std::string, std::vector<CurvePoint>>& modes) {
  constexpr double kWidth = 720, kHeight = 420;
  constexpr double kLeft = 56, kRight = 14, kTop = 34, kBottom = 42;
  const double plot_w = kWidth - kLeft - kRight;
  const double plot_h = kHeight - kTop - kBottom;

  int episode_max = 1;
  for (const auto& [mode, curve] : modes) {
    if (!curve.empty()) episode_max = std::max(episode_max, curve.back().episode + 1);
  }
  const auto sx = [&](double e) { return kLeft + e / episode_max * plot_w; };
  const auto sy = [&](double v) { return kTop + (1.0 - std::clamp(v, 0.0, 1.0)) * plot_h; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << kWidth << ' '
      << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"" << kWidth << "\" height=\"" << kHeight << "\" fill=\"white\"/>\n";
  svg << "<text x=\"" << kLeft << "\" y=\"20\" font-size=\"15\">" << scenario
      << " — median performance with interquartile band</text>\n";

  for (int i = 0; i <= 4; ++i) {
    const double v = i / 4.0;
    const double y = sy(v);
    svg << "<line x1=\"" << kLeft << "\" y1=\"" << y << "\" x2=\"" << kLeft + plot_w
        << "\" y2=\"" << y << "\" stroke=\"#dddddd\"/>\n";
    svg << "<text x=\"" << kLeft - 8 << "\" y=\"" << y + 4
        << "\" text-anchor=\"end\">" << detail::fmt(v, 2) << "</text>\n";
    const int e = episode_max * i / 4;
    const double x = sx(e);
    svg << "<line x1=\"" << x << "\" y1=\"" << kTop << "\" x2=\"" << x << "\" y2=\""
        << kTop + plot_h << "\" stroke=\"#dddddd\"/>\n";
    svg << "<text x=\"" << x << "\" y=\"" << kTop + plot_h + 18
        << "\" text-anchor=\"middle\">" << e << "</text>\n";
  }
  svg << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << plot_w
      << "\" height=\"" << plot_h << "\" fill=\"none\" stroke=\"#444444\"/>\n";
  svg << "<text x=\"" << kLeft + plot_w / 2 << "\" y=\"" << kHeight - 8
      << "\" text-anchor=\"middle\">episode</text>\n";

  for (const auto& [mode, curve] : modes) {
    if (curve.empty()) continue;
    const char* color = detail::mode_color(mode);
    std::ostringstream band;
    band << 'M';
    for (const CurvePoint& p : curve) {
      band << detail::fmt(sx(p.episode)) << ',' << detail::fmt(sy(p.q3)) << ' ';
    }
    for (auto it = curve.rbegin(); it != curve.rend(); ++it) {
      band << 'L' << detail::fmt(sx(it->episode)) << ',' << detail::fmt(sy(it->q1)) << ' ';
    }
    band << 'Z';
    svg << "<path d=\"" << band.str() << "\" fill=\"" << color
        << "\" fill-opacity=\"0.18\" stroke=\"none\"/>\n";
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const CurvePoint& p : curve) {
      svg << detail::fmt(sx(p.episode)) << ',' << detail::fmt(sy(p.median)) << ' ';
    }
    svg << "\"/>\n";
  }

  int row = 0;
  for (const auto& [mode, curve] : modes) {
    const double y = kTop + plot_h - 14.0 - 18.0 * row++;
    svg << "<line x1=\"" << kLeft + plot_w - 150 << "\" y1=\"" << y << "\" x2=\""
        << kLeft + plot_w - 122 << "\" y2=\"" << y << "\" stroke=\""
        << detail::mode_color(mode) << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << kLeft + plot_w - 116 << "\" y=\"" << y + 4 << "\">" << mode
        << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

struct ExperimentCell {
  std::string scenario;
  TrainMode mode = TrainMode::Marlin;
  std::uint64_t seed = 0;
};

struct CellFailure {
  ExperimentCell cell;
  std::string reason;
};

/// Surviving runs of one (scenario, mode) column, aligned by seed.
struct ModeRuns {
  std::vector<std::uint64_t> seeds;
  std::vector<TrainingRecord> records;
};

struct ExperimentResult {
  CurveSummary summary;
  std::vector<CellFailure> failures;
  std::map<std::string, std::map<std::string, ModeRuns>> runs;
};

using CellRunner =
    std::function<TrainingRecord(const std::string& scenario, TrainMode mode, std::uint64_t seed)>;

inline const char* significance_marker(double p) {
  if (p < 0.001) return "***";
  if (p < 0.01) return "**";
  if (p < 0.05) return "*";
  return "";
}

namespace detail {

/// Performance near a checkpoint: mean of the up-to-50 episodes ending there.
inline double checkpoint_score(const TrainingRecord& record, int checkpoint) {
  const int hi = std::min(checkpoint, static_cast<int>(record.episodes.size()));
  const int lo = std::max(0, hi - 50);
  return window_mean(record, {lo, hi});
}

inline void describe_pair(std::ostream& out, const std::string& name_a,
                          const std::string& name_b, const ModeRuns& a, const ModeRuns& b,
                          EpisodeWindow window) {
  // pair rows by the seeds that survived in both columns
  std::vector<TrainingRecord> rec_a;
  std::vector<TrainingRecord> rec_b;
  for (std::size_t i = 0; i < a.seeds.size(); ++i) {
    const auto it = std::find(b.seeds.begin(), b.seeds.end(), a.seeds[i]);
    if (it == b.seeds.end()) continue;
    rec_a.push_back(a.records[i]);
    rec_b.push_back(b.records[static_cast<std::size_t>(it - b.seeds.begin())]);
  }
  out << "- " << name_a << " vs " << name_b << ", episodes [" << window.lo << ", "
      << window.hi << "): ";
  if (rec_a.size() < 2) {
    out << "not enough shared seeds for a paired test\n";
    return;
  }
  const PairedTest test = paired_test(rec_a, rec_b, window);
  out << "mean diff " << (test.mean_diff >= 0 ? "+" : "") << fmt(test.mean_diff, 4) << ", ";
  if (test.degenerate()) {
    out << "constant differences leave t undefined; sign test only: p = "
        << fmt(test.sign_p, 4) << ' ' << significance_marker(test.sign_p) << '\n';
  } else {
    out << "t(" << test.n - 1 << ") = " << fmt(*test.statistic, 3) << ", p = "
        << fmt(*test.p_value, 4) << ' ' << significance_marker(*test.p_value)
        << "; sign test p = " << fmt(test.sign_p, 4) << ' '
        << significance_marker(test.sign_p) << '\n';
  }
}

}  // namespace detail

inline void write_report_md(std::ostream& out, const ExperimentSpec& spec,
                            const ExperimentResult& result) {
  out << "# Experiment report\n\n";
  out << "Seeds per cell: " << spec.seeds.size() << ". Episodes per run: "
      << spec.trainer.episode_max << ". Backend: " << spec.backend << ".\n";

  for (const std::string& scenario : spec.scenarios) {
    out << "\n## " << scenario << "\n\n";
    const auto scenario_runs = result.runs.find(scenario);
    out << "| mode | seeds |";
    for (int c : spec.checkpoints) out << " ep " << c << " |";
    out << "\n| --- | --- |";
    for (std::size_t i = 0; i < spec.checkpoints.size(); ++i) out << " --- |";
    out << '\n';
    for (const TrainMode mode : spec.modes) {
      const std::string mode_name = to_string(mode);
      out << "| " << mode_name << " | ";
      const ModeRuns* runs = nullptr;
      if (scenario_runs != result.runs.end()) {
        const auto it = scenario_runs->second.find(mode_name);
        if (it != scenario_runs->second.end() && !it->second.records.empty()) {
          runs = &it->second;
        }
      }
      if (!runs) {
        out << "0 |";
        for (std::size_t i = 0; i < spec.checkpoints.size(); ++i) out << " — |";
        out << '\n';
        continue;
      }
      out << runs->records.size() << " |";
      for (int c : spec.checkpoints) {
        std::vector<double> scores;
        for (const TrainingRecord& r : runs->records) {
          scores.push_back(detail::checkpoint_score(r, c));
        }
        out << ' ' << detail::fmt(median(scores), 4) << " |";
      }
      out << '\n';
    }

    if (scenario_runs != result.runs.end() && spec.modes.size() >= 2) {
      out << '\n';
      const EpisodeWindow window{0, spec.trainer.episode_max};
      for (std::size_t i = 0; i < spec.modes.size(); ++i) {
        for (std::size_t j = i + 1; j < spec.modes.size(); ++j) {
          const std::string name_a = to_string(spec.modes[i]);
          const std::string name_b = to_string(spec.modes[j]);
          const auto it_a = scenario_runs->second.find(name_a);
          const auto it_b = scenario_runs->second.find(name_b);
          if (it_a == scenario_runs->second.end() || it_b == scenario_runs->second.end()) {
            continue;
          }
          detail::describe_pair(out, name_a, name_b, it_a->second, it_b->second, window);
        }
      }
    }
  }

  if (!result.failures.empty()) {
    out << "\n## Failed cells\n\n";
    for (const CellFailure& failure : result.failures) {
      out << "- " << failure.cell.scenario << " / " << to_string(failure.cell.mode)
          << " / seed " << failure.cell.seed << ": " << failure.reason << '\n';
    }
  }

  out << "\nCheckpoint columns are cross-seed medians of the mean performance over the "
         "(up to) 50 episodes ending at each checkpoint. Markers: * p<0.05, ** p<0.01, "
         "*** p<0.001.\n";
}

/// Runs every (scenario, mode, seed) cell through `run_cell`, aggregates the
/// survivors, and writes curves/, plots/, summary.csv and report.md under
/// `out_dir`. Cell failures are collected, not fatal.
inline ExperimentResult run_experiment(const ExperimentSpec& spec, const CellRunner& run_cell,
                                       const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "curves");
  fs::create_directories(out_dir / "plots");

  ExperimentResult result;
  std::ofstream summary_csv(out_dir / "summary.csv");
  summary_csv << "scenario,mode,seed,status,episodes,mean_performance,final_eval\n"
              << std::setprecision(17);

  for (const std::string& scenario : spec.scenarios) {
    for (const TrainMode mode : spec.modes) {
      for (const std::uint64_t seed : spec.seeds) {
        summary_csv << scenario << ',' << to_string(mode) << ',' << seed << ',';
        TrainingRecord record;
        try {
          record = run_cell(scenario, mode, seed);
        } catch (const std::exception& error) {
          std::string reason = error.what();
          std::replace(reason.begin(), reason.end(), ',', ';');
          std::replace(reason.begin(), reason.end(), '\n', ' ');
          result.failures.push_back(CellFailure{{scenario, mode, seed}, reason});
          summary_csv << "failed,0,," << '\n';
          continue;
        }
        double mean_perf = 0.0;
        for (const EpisodeRecord& e : record.episodes) mean_perf += e.performance;
        if (!record.episodes.empty()) {
          mean_perf /= static_cast<double>(record.episodes.size());
        }
        summary_csv << "ok," << record.episodes.size() << ',' << mean_perf << ',';
        if (!record.evals.empty()) summary_csv << record.evals.back().performance;
        summary_csv << '\n';
        ModeRuns& runs = result.runs[scenario][to_string(mode)];
        runs.seeds.push_back(seed);
        runs.records.push_back(std::move(record));
      }
    }
  }

  for (const auto& [scenario, by_mode] : result.runs) {
    for (const auto& [mode_name, runs] : by_mode) {
      auto curve = aggregate_curve(runs.records);
      std::ofstream csv(out_dir / "curves" / (scenario + "_" + mode_name + ".csv"));
      write_curve_csv(csv, curve);
      result.summary.curves[scenario][mode_name] = std::move(curve);
    }
    std::ofstream svg(out_dir / "plots" / (scenario + ".svg"));
    svg << render_curve_svg(scenario, result.summary.curves[scenario]);
  }

  std::ofstream report(out_dir / "report.md");
  write_report_md(report, spec, result);
  return result;
}

}  // namespace marlin
