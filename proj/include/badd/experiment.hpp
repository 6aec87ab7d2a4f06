// Copyright 2026 The badd-mnist Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// End-to-end runs: dataset generation, training with diagnostics, reports
// and their aggregation.

#pragma once

#include <chrono>

#include "badd/config.hpp"
#include "badd/hash.hpp"

namespace badd {

/// Train split at `q` (seed data_seed) and q = 0.1 test split (seed
/// data_seed + 1).
inline DatasetBundle generate_bundle(const RunConfig& c, double q) {
  const auto train_base = load_mnist(c.mnist_dir, "train");
  const auto test_base = load_mnist(c.mnist_dir, "t10k");
  BiasSpec s;
  s.q = q;
  s.seed = c.data_seed;
  if (c.fb()) s.fg_palette = default_foreground_palette();
  BiasSpec t = s;
  t.q = 0.1;
  t.seed = c.data_seed + 1;
  DatasetBundle b;
  b.variant = c.dataset;
  if (c.fb()) {
    b.train = generate_fb_biased_mnist(train_base, s, Split::train, c.train_samples);
    b.test = generate_fb_biased_mnist(test_base, t, Split::test, c.test_samples);
  } else {
    b.train = generate_biased_mnist(train_base, s, Split::train, c.train_samples);
    b.test = generate_biased_mnist(test_base, t, Split::test, c.test_samples);
  }
  return b;
}

/// Loads the dataset for `q`; ConfigError when it has not been generated.
inline DatasetBundle load_bundle(const RunConfig& c, double q) {
  const auto dir = dataset_dir(c, q);
  if (!std::filesystem::exists(dir / "manifest.json"))
    throw ConfigError("dataset " + dir.string() + " does not exist (run `badd generate` first)");
  auto b = load_dataset(dir);
  if (b.variant != c.dataset) throw ConfigError(dir.string() + " holds " + b.variant + ", config wants " + c.dataset);
  return b;
}

inline json eval_to_json(const EvalResult& e) {
  json j{{"n", e.n}, {"unbiased_acc", e.unbiased_acc}, {"n_aligned", e.n_aligned}, {"n_conflicting", e.n_conflicting}};
  j["conflicting_acc"] = e.conflicting_acc ? json(*e.conflicting_acc) : json(nullptr);
  j["aligned_acc"] = e.aligned_acc ? json(*e.aligned_acc) : json(nullptr);
  return j;
}

inline json group_gradient_to_json(const std::optional<GroupGradient>& g) {
  if (!g) return nullptr;
  return {{"count", g->count},
          {"total_norm", g->total_norm},
          {"mean_sigma", g->mean_sigma},
          {"a0_norm", g->a0_norm},
          {"block_norms", g->block_norms}};
}

inline json grad_contribution_to_json(const GradContribution& g) {
  return {{"aligned", group_gradient_to_json(g.aligned)},
          {"conflicting", group_gradient_to_json(g.conflicting)},
          {"reassembly_error", g.reassembly_error ? json(*g.reassembly_error) : json(nullptr)}};
}

inline json spike_stats_to_json(const SpikeStats& s, double max_late) {
  return {{"threshold", s.threshold},
          {"window", s.window},
          {"count", s.count},
          {"max_loss_aligned", s.max_loss_aligned},
          {"max_loss_aligned_late", max_late},
          {"spike_batches", s.spike_batches},
          {"windowed_max", s.windowed_max}};
}

/// Gradient diagnostics on the first training batch of epoch 0.
inline GradContribution first_batch_grad_contribution(const Model<Real>& m, const BiasedDataset& train,
                                                      const TrainConfig& cfg) {
  const auto order = shuffled_order(train.size(), cfg.seed, 0);
  const std::span<const std::size_t> idx(order.data(), std::min(cfg.batch_size, order.size()));
  std::vector<std::uint8_t> flags(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) flags[r] = train.aligned[idx[r]];
  return grad_contribution(m.spec, m.state, train.batch(idx), train.targets(idx), flags);
}

struct RunOutcome {
  json report;
  PipelineResult result;
  std::string checkpoint_bytes;
};

/// One (q, seed, mode) run with diagnostics. Writes report.json, trace.csv
/// and model.ckpt into `out_dir` when it is non-empty.
inline RunOutcome run_single(const RunConfig& c, const DatasetBundle& data, double q, std::uint64_t seed,
                             const std::filesystem::path& out_dir,
                             const std::vector<BiasClassifier>* pretrained = nullptr) {
  TrainConfig tc = c.train;
  tc.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  RunOutcome o;
  o.result = run_pipeline(data.train, data.test, tc, pretrained);
  const auto& r = o.result;
  const auto spikes = detect_loss_spikes(r.trace.loss_aligned(), c.spike_threshold, c.spike_window);
  const auto sim = color_variation_similarity(r.model.spec, r.model.state, data.test,
                                              data.test.spec.bg_palette, c.probe_samples);
  const double bg = mean_bias_region_activation(r.model.spec, r.model.state, data.test, c.bg_layer, c.probe_samples);
  const auto gc = first_batch_grad_contribution(r.model, data.train, tc);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  Checkpoint ck{r.model, seed, r.source, json{{"mode", to_string(tc.mode)}, {"q", q}, {"dataset", c.dataset}}};
  o.checkpoint_bytes = serialize_checkpoint(ck);

  RunConfig echo = c;
  echo.q = {q};
  echo.seeds = {seed};
  json& j = o.report;
  j["format"] = "badd-report-v1";
  j["name"] = c.name;
  j["dataset"] = c.dataset;
  j["q"] = q;
  j["mode"] = to_string(tc.mode);
  j["seed"] = seed;
  j["injection_layer"] = tc.injection_layer;
  j["bias_source"] = to_string(tc.bias_source);
  j["unbiased_acc"] = r.eval.unbiased_acc;
  j["conflicting_acc"] = r.eval.conflicting_acc ? json(*r.eval.conflicting_acc) : json(nullptr);
  j["aligned_acc"] = r.eval.aligned_acc ? json(*r.eval.aligned_acc) : json(nullptr);
  j["evaluation"] = eval_to_json(r.eval);
  j["pre_finetune"] = eval_to_json(evaluate(r.trained, data.test));
  j["bias_accuracy"] = r.bias_accuracy;
  j["similarity_probe"] = {{"mean", sim.mean}, {"samples", sim.per_sample.size()}};
  j["bg_activation"] = {{"layer", c.bg_layer}, {"mean", bg}};
  j["spike_stats"] = spike_stats_to_json(spikes, r.trace.max_loss_aligned_from(tc.second_segment_start()));
  j["grad_contribution"] = grad_contribution_to_json(gc);
  j["checkpoint_sha256"] = sha256_hex(o.checkpoint_bytes);
  j["config"] = config_to_json(echo);
  j["wall_clock_seconds"] = secs;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    j["trace_path"] = (out_dir / "trace.csv").string();
    j["checkpoint_path"] = (out_dir / "model.ckpt").string();
    write_text(out_dir / "trace.csv", trace_csv(r.trace));
    write_text(out_dir / "model.ckpt", o.checkpoint_bytes);
    write_text(out_dir / "report.json", j.dump(2) + "\n");
  }
  return o;
}

/// Run directory name for a single run.
inline std::string run_id(const RunConfig& c, double q, std::uint64_t seed) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%s_q%g_%s_L%zu_s%llu", c.dataset.c_str(), q, to_string(c.train.mode).c_str(),
                c.train.injection_layer, static_cast<unsigned long long>(seed));
  return buf;
}

struct MeanStd {
  double mean = 0;
  double std = 0;
  std::size_t n = 0;
};

/// Sample standard deviation (n - 1); 0 for a single value.
inline MeanStd mean_std(std::span<const double> v) {
  MeanStd m;
  m.n = v.size();
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= double(v.size());
  if (v.size() > 1) {
    double s = 0;
    for (double x : v) s += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(s / double(v.size() - 1));
  }
  return m;
}

inline std::string format_pm(const MeanStd& m, double scale = 100) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f +- %.2f", m.mean * scale, m.std * scale);
  return buf;
}

// ---------------------------------------------------------------------------
// Aggregation of report files.

struct ReportRow {
  std::filesystem::path path;
  json report;
};

/// Every report.json under the given directories (or files), sorted by path.
/// A report that fails to parse or lacks required keys raises RuntimeError
/// naming its path.
inline std::vector<ReportRow> collect_reports(const std::vector<std::filesystem::path>& roots) {
  std::vector<std::filesystem::path> files;
  for (const auto& r : roots) {
    if (!std::filesystem::exists(r)) throw RuntimeError("no such run directory: " + r.string());
    if (std::filesystem::is_regular_file(r)) {
      files.push_back(r);
      continue;
    }
    for (const auto& e : std::filesystem::recursive_directory_iterator(r))
      if (e.is_regular_file() && e.path().filename() == "report.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw RuntimeError("no report.json found");
  std::vector<ReportRow> rows;
  for (const auto& f : files) {
    ReportRow row{f, {}};
    try {
      row.report = json::parse(read_text(f));
      for (const char* k : {"dataset", "q", "mode", "seed", "unbiased_acc"})
        if (!row.report.contains(k)) throw RuntimeError(std::string("missing key '") + k + "'");
      row.report.at("q").get<double>();
      row.report.at("unbiased_acc").get<double>();
    } catch (const std::exception& e) {
      throw RuntimeError("corrupt report " + f.string() + ": " + e.what());
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

struct Aggregate {
  json table = json::array();
  std::string csv;
  std::string long_csv;
};

/// Groups by (dataset, q, mode, injection_layer); mean/std over seeds.
inline Aggregate aggregate_reports(const std::vector<ReportRow>& rows) {
  using Key = std::tuple<std::string, double, std::string, std::size_t>;
  std::map<Key, std::map<std::string, std::vector<double>>> groups;
  std::map<Key, std::vector<std::uint64_t>> seeds;
  std::ostringstream lo;
  lo.precision(10);
  lo << "dataset,q,mode,injection_layer,seed,metric,value\n";
  const std::vector<std::string> metrics{"unbiased_acc", "conflicting_acc", "aligned_acc"};
  for (const auto& r : rows) {
    const auto& j = r.report;
    Key k{j.at("dataset").get<std::string>(), j.at("q").get<double>(), j.at("mode").get<std::string>(),
          j.value("injection_layer", std::size_t{4})};
    const auto seed = j.at("seed").get<std::uint64_t>();
    seeds[k].push_back(seed);
    std::vector<std::pair<std::string, double>> vals;
    for (const auto& m : metrics)
      if (j.contains(m) && j.at(m).is_number()) vals.emplace_back(m, j.at(m).get<double>());
    if (j.contains("similarity_probe")) vals.emplace_back("similarity", j["similarity_probe"]["mean"].get<double>());
    if (j.contains("bg_activation")) vals.emplace_back("bg_activation", j["bg_activation"]["mean"].get<double>());
    if (j.contains("spike_stats")) {
      vals.emplace_back("spike_count", j["spike_stats"]["count"].get<double>());
      vals.emplace_back("max_loss_aligned_late", j["spike_stats"]["max_loss_aligned_late"].get<double>());
    }
    for (const auto& [m, v] : vals) {
      groups[k][m].push_back(v);
      lo << std::get<0>(k) << ',' << std::get<1>(k) << ',' << std::get<2>(k) << ',' << std::get<3>(k) << ','
         << seed << ',' << m << ',' << v << '\n';
    }
  }
  Aggregate a;
  std::ostringstream cs;
  cs.precision(10);
  cs << "dataset,q,mode,injection_layer,n_seeds,metric,mean,std\n";
  for (const auto& [k, ms] : groups) {
    json row{{"dataset", std::get<0>(k)}, {"q", std::get<1>(k)}, {"mode", std::get<2>(k)},
             {"injection_layer", std::get<3>(k)}, {"seeds", seeds[k]}};
    for (const auto& [m, v] : ms) {
      const auto s = mean_std(v);
      row[m] = {{"mean", s.mean}, {"std", s.std}, {"n", s.n}};
      cs << std::get<0>(k) << ',' << std::get<1>(k) << ',' << std::get<2>(k) << ',' << std::get<3>(k) << ',' << s.n
         << ',' << m << ',' << s.mean << ',' << s.std << '\n';
    }
    a.table.push_back(row);
  }
  a.csv = cs.str();
  a.long_csv = lo.str();
  return a;
}

}  // namespace badd
