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

// badd: dataset generation, training, ablations and reports.
// Exit codes: 0 success, 2 configuration error, 3 runtime failure.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>

#include "badd/experiment.hpp"

namespace {

using namespace badd;

/// Options shared by every run-style subcommand. Values are applied on top
/// of the profile and config file only when given.
struct Overrides {
  std::string config_path, profile, name, dataset, mnist_dir, data_dir, output_dir, mode, bias_source;
  std::vector<double> q;
  std::vector<std::uint64_t> seeds;
  std::vector<std::size_t> widths, layers;
  std::uint64_t data_seed = 0;
  std::size_t train_samples = 0, test_samples = 0, epochs = 0, batch_size = 0, injection_layer = 0,
              finetune_epochs = 0, bias_epochs = 0, probe_samples = 0;
  double lr = 0, weight_decay = 0;
  bool reinit_head = false, freeze_embedding = false;
  std::map<std::string, CLI::Option*> opts;

  void attach(CLI::App* app) {
    opts["config"] = app->add_option("-c,--config", config_path, "JSON run configuration");
    opts["profile"] = app->add_option("--profile", profile, "desk or full");
    opts["name"] = app->add_option("--name", name, "experiment name");
    opts["dataset"] = app->add_option("--dataset", dataset, "biased-mnist or fb-biased-mnist");
    opts["q"] = app->add_option("--q", q, "correlation ratio(s)");
    opts["seeds"] = app->add_option("--seeds", seeds, "training seed(s)");
    opts["data_seed"] = app->add_option("--data-seed", data_seed, "dataset generation seed");
    opts["train_samples"] = app->add_option("--train-samples", train_samples, "0 = all");
    opts["test_samples"] = app->add_option("--test-samples", test_samples, "0 = all");
    opts["mnist_dir"] = app->add_option("--mnist-dir", mnist_dir, "directory with IDX files");
    opts["data_dir"] = app->add_option("--data-dir", data_dir, "generated dataset root");
    opts["output_dir"] = app->add_option("--output-dir", output_dir, "run output root");
    opts["epochs"] = app->add_option("--epochs", epochs);
    opts["batch_size"] = app->add_option("--batch-size", batch_size);
    opts["lr"] = app->add_option("--lr", lr, "initial learning rate");
    opts["weight_decay"] = app->add_option("--weight-decay", weight_decay);
    opts["mode"] = app->add_option("--mode", mode, "vanilla, badd-add or badd-concat");
    opts["injection_layer"] = app->add_option("--injection-layer", injection_layer, "1-4");
    opts["bias_source"] = app->add_option("--bias-source", bias_source, "classifier or label-embedding");
    opts["finetune_epochs"] = app->add_option("--finetune-epochs", finetune_epochs);
    opts["bias_epochs"] = app->add_option("--bias-epochs", bias_epochs);
    opts["widths"] = app->add_option("--widths", widths, "four channel widths");
    opts["layers"] = app->add_option("--layers", layers, "injection layers for ablate-layers");
    opts["probe_samples"] = app->add_option("--probe-samples", probe_samples, "0 = whole test split");
    opts["reinit_head"] = app->add_flag("--reinit-head", reinit_head, "reinitialise the head before fine-tuning");
    opts["freeze_embedding"] = app->add_flag("--freeze-embedding", freeze_embedding);
  }

  bool given(const std::string& k) const { return opts.at(k)->count() > 0; }

  RunConfig resolve() const {
    json j = json::object();
    if (given("config")) {
      try {
        j = json::parse(read_text(config_path));
      } catch (const json::exception& e) {
        throw ConfigError(config_path + ": " + e.what());
      } catch (const RuntimeError& e) {
        throw ConfigError(e.what());
      }
    }
    if (given("profile")) j["profile"] = profile;
    RunConfig c;
    apply_config_json(c, j);
    auto& t = c.train;
    if (given("name")) c.name = name;
    if (given("dataset")) c.dataset = dataset;
    if (given("q")) c.q = q;
    if (given("seeds")) c.seeds = seeds;
    if (given("data_seed")) c.data_seed = data_seed;
    if (given("train_samples")) c.train_samples = train_samples;
    if (given("test_samples")) c.test_samples = test_samples;
    if (given("mnist_dir")) c.mnist_dir = mnist_dir;
    if (given("data_dir")) c.data_dir = data_dir;
    if (given("output_dir")) c.output_dir = output_dir;
    if (given("epochs")) t.epochs = epochs;
    if (given("batch_size")) t.batch_size = batch_size;
    if (given("lr")) t.initial_lr = lr;
    if (given("weight_decay")) t.weight_decay = weight_decay;
    if (given("mode")) t.mode = train_mode_from_string(mode);
    if (given("injection_layer")) t.injection_layer = injection_layer;
    if (given("bias_source")) t.bias_source = bias_source_kind_from_string(bias_source);
    if (given("finetune_epochs")) t.finetune_epochs = finetune_epochs;
    if (given("bias_epochs")) t.bias_epochs = bias_epochs;
    if (given("widths")) t.widths = widths;
    if (given("layers")) c.layers = layers;
    if (given("probe_samples")) c.probe_samples = probe_samples;
    if (given("reinit_head")) t.reinit_head = reinit_head;
    if (given("freeze_embedding")) t.freeze_embedding = freeze_embedding;
    resolve_paths(c);
    c.validate();
    return c;
  }
};

void print_audit(const std::string& split, const json& m) {
  if (!m.contains("audit")) return;
  const auto& a = m["audit"];
  std::printf("  %-5s n=%zu q=%g  bg-aligned %.4f", split.c_str(), m["count"].get<std::size_t>(),
              m["q"].get<double>(), a["overall_bg"].get<double>());
  if (a.contains("overall_fg")) std::printf("  fg-aligned %.4f", a["overall_fg"].get<double>());
  std::printf("  |A|=%zu |C|=%zu\n", a["n_aligned"].get<std::size_t>(), a["n_conflicting"].get<std::size_t>());
}

int cmd_generate(const RunConfig& c) {
  for (double q : c.q) {
    const auto dir = dataset_dir(c, q);
    const auto bundle = generate_bundle(c, q);
    save_dataset(dir, bundle);
    const auto m = dataset_manifest(bundle);
    std::printf("%s\n", dir.string().c_str());
    print_audit("train", m["splits"]["train"]);
    print_audit("test", m["splits"]["test"]);
  }
  return 0;
}

std::string acc_str(const json& v) {
  if (v.is_null()) return "  n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%5.2f", 100 * v.get<double>());
  return buf;
}

/// Runs every seed for one q; returns the per-seed reports.
std::vector<json> run_seeds(const RunConfig& c, const DatasetBundle& data, double q, const std::filesystem::path& root) {
  std::vector<json> reports;
  for (auto seed : c.seeds) {
    const auto dir = root / run_id(c, q, seed);
    auto o = run_single(c, data, q, seed, dir);
    const auto& r = o.report;
    std::printf("%-48s unbiased %s  conflicting %s  aligned %s  sim %.3f  spikes %zu  (%.0fs)\n",
                run_id(c, q, seed).c_str(), acc_str(r["unbiased_acc"]).c_str(), acc_str(r["conflicting_acc"]).c_str(),
                acc_str(r["aligned_acc"]).c_str(), r["similarity_probe"]["mean"].get<double>(),
                r["spike_stats"]["count"].get<std::size_t>(), r["wall_clock_seconds"].get<double>());
    std::fflush(stdout);
    reports.push_back(r);
  }
  return reports;
}

json seed_summary(const std::vector<json>& reports) {
  json s;
  for (const char* k : {"unbiased_acc", "conflicting_acc", "aligned_acc"}) {
    std::vector<double> v;
    for (const auto& r : reports)
      if (r[k].is_number()) v.push_back(r[k].get<double>());
    if (v.empty()) continue;
    const auto m = mean_std(v);
    s[k] = {{"mean", m.mean}, {"std", m.std}, {"n", m.n}, {"formatted", format_pm(m)}};
  }
  return s;
}

int cmd_train(const RunConfig& c) {
  const auto root = std::filesystem::path(c.output_dir) / c.name;
  json summary = json::array();
  for (double q : c.q) {
    const auto data = load_bundle(c, q);
    const auto reports = run_seeds(c, data, q, root);
    auto s = seed_summary(reports);
    s["q"] = q;
    s["mode"] = to_string(c.train.mode);
    s["dataset"] = c.dataset;
    s["seeds"] = c.seeds;
    std::printf("q=%g %s: unbiased %s over %zu seed(s)\n", q, to_string(c.train.mode).c_str(),
                s["unbiased_acc"]["formatted"].get<std::string>().c_str(), c.seeds.size());
    summary.push_back(s);
  }
  std::filesystem::create_directories(root);
  write_text(root / "summary.json", summary.dump(2) + "\n");
  return 0;
}

int cmd_ablate(RunConfig c, bool with_concat) {
  const auto root = std::filesystem::path(c.output_dir) / c.name;
  std::ostringstream table;
  table << "dataset,q,mode,injection_layer,n_seeds,unbiased_mean,unbiased_std\n";
  std::vector<std::pair<TrainMode, std::size_t>> variants;
  for (auto l : c.layers) variants.emplace_back(TrainMode::badd_add, l);
  if (with_concat) variants.emplace_back(TrainMode::badd_concat, 4);
  for (double q : c.q) {
    const auto data = load_bundle(c, q);
    for (const auto& [mode, layer] : variants) {
      c.train.mode = mode;
      c.train.injection_layer = layer;
      const auto s = seed_summary(run_seeds(c, data, q, root));
      const auto& u = s["unbiased_acc"];
      table << c.dataset << ',' << q << ',' << to_string(mode) << ',' << layer << ',' << u["n"] << ','
            << u["mean"].get<double>() << ',' << u["std"].get<double>() << '\n';
    }
  }
  std::filesystem::create_directories(root);
  write_text(root / "ablation.csv", table.str());
  std::cout << "\n" << table.str();
  return 0;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& out) {
  std::vector<std::filesystem::path> roots(dirs.begin(), dirs.end());
  const auto rows = collect_reports(roots);
  const auto agg = aggregate_reports(rows);
  const std::filesystem::path o(out);
  std::filesystem::create_directories(o);
  write_text(o / "aggregate.json", agg.table.dump(2) + "\n");
  write_text(o / "aggregate.csv", agg.csv);
  write_text(o / "metrics_long.csv", agg.long_csv);
  std::ostringstream traces;
  traces << "run,epoch,step,loss,loss_aligned,loss_conflicting,n_aligned,n_conflicting\n";
  for (const auto& r : rows) {
    const auto trace = r.path.parent_path() / "trace.csv";
    if (!std::filesystem::exists(trace)) continue;
    std::istringstream in(read_text(trace));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) traces << r.path.parent_path().filename().string() << ',' << line << '\n';
  }
  write_text(o / "traces_long.csv", traces.str());
  std::printf("%zu report(s) -> %s\n", rows.size(), o.string().c_str());
  for (const auto& row : agg.table) {
    const auto& u = row["unbiased_acc"];
    std::printf("  %-16s q=%-6g %-12s L%zu  unbiased %.2f +- %.2f (n=%zu)\n",
                row["dataset"].get<std::string>().c_str(), row["q"].get<double>(),
                row["mode"].get<std::string>().c_str(), row["injection_layer"].get<std::size_t>(),
                100 * u["mean"].get<double>(), 100 * u["std"].get<double>(), u["n"].get<std::size_t>());
  }
  return 0;
}

int cmd_probe(const std::string& ckpt, const std::string& dataset, std::size_t samples) {
  const auto c = load_checkpoint(ckpt);
  const auto data = load_dataset(dataset);
  const auto sim = color_variation_similarity(c.model.spec, c.model.state, data.test, data.test.spec.bg_palette, samples);
  const double bg = mean_bias_region_activation(c.model.spec, c.model.state, data.test, 1, samples);
  json j{{"similarity_probe", {{"mean", sim.mean}, {"samples", sim.per_sample.size()}}},
         {"bg_activation", {{"layer", 1}, {"mean", bg}}},
         {"evaluation", eval_to_json(evaluate(c.model, data.test))}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_grad_diag(const std::string& ckpt, const std::string& dataset, std::size_t batch_size) {
  const auto c = load_checkpoint(ckpt);
  const auto data = load_dataset(dataset);
  TrainConfig tc;
  tc.seed = c.seed;
  tc.batch_size = batch_size;
  const auto g = first_batch_grad_contribution(c.model, data.train, tc);
  std::cout << json{{"grad_contribution", grad_contribution_to_json(g)}}.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bias mitigation by feature addition on colour-biased MNIST"};
  app.require_subcommand(1);

  Overrides gen_o, train_o, abl_o;
  auto* gen = app.add_subcommand("generate", "write biased train/test datasets (badd-ds-v1)");
  gen_o.attach(gen);
  auto* train = app.add_subcommand("train", "train, fine-tune, evaluate and report");
  train_o.attach(train);
  auto* abl = app.add_subcommand("ablate-layers", "compare injection layers (and concatenation)");
  abl_o.attach(abl);
  bool with_concat = false;
  abl->add_flag("--with-concat", with_concat, "also run the concatenation variant");

  auto* rep = app.add_subcommand("report", "aggregate run reports");
  std::vector<std::string> rep_dirs;
  std::string rep_out = "report";
  rep->add_option("runs", rep_dirs, "run directories or report files")->required();
  rep->add_option("-o,--out", rep_out, "output directory");

  std::string ckpt, ds_dir;
  std::size_t probe_samples = 256, diag_batch = 128;
  auto* probe = app.add_subcommand("probe-similarity", "colour-variation similarity of h for a checkpoint");
  probe->add_option("--checkpoint", ckpt)->required();
  probe->add_option("--dataset-dir", ds_dir)->required();
  probe->add_option("--probe-samples", probe_samples, "0 = whole test split");
  auto* diag = app.add_subcommand("grad-diag", "per-group gradient contributions for a checkpoint");
  diag->add_option("--checkpoint", ckpt)->required();
  diag->add_option("--dataset-dir", ds_dir)->required();
  diag->add_option("--batch-size", diag_batch);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_generate(gen_o.resolve());
    if (train->parsed()) return cmd_train(train_o.resolve());
    if (abl->parsed()) {
      auto c = abl_o.resolve();
      return cmd_ablate(c, with_concat);
    }
    if (rep->parsed()) return cmd_report(rep_dirs, rep_out);
    if (probe->parsed()) return cmd_probe(ckpt, ds_dir, probe_samples);
    if (diag->parsed()) return cmd_grad_diag(ckpt, ds_dir, diag_batch);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
