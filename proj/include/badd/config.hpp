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

// Run configuration. JSON objects are flat; unknown keys are rejected.
// "profile" (desk | full) is applied first, then the remaining keys, then
// command-line overrides.

#pragma once

#include <cstdlib>
#include <set>

#include "badd/io.hpp"

namespace badd {

struct RunConfig {
  std::string name = "run";
  std::string profile;
  std::string dataset = "biased-mnist";
  std::vector<double> q{0.99};
  std::vector<std::uint64_t> seeds{1};
  std::uint64_t data_seed = 0;
  /// 0 = every available sample.
  std::size_t train_samples = 0;
  std::size_t test_samples = 0;
  std::string mnist_dir;
  std::string data_dir;
  std::string output_dir = "runs";
  TrainConfig train;
  /// Injection layers visited by ablate-layers.
  std::vector<std::size_t> layers{1, 2, 3, 4};
  std::size_t probe_samples = 256;
  double spike_threshold = 10;
  std::size_t spike_window = 100;
  std::size_t bg_layer = 1;

  bool fb() const { return dataset == "fb-biased-mnist"; }

  void validate() const {
    if (name.empty()) throw ConfigError("name must be non-empty");
    if (dataset != "biased-mnist" && dataset != "fb-biased-mnist")
      throw ConfigError("dataset must be biased-mnist or fb-biased-mnist, got '" + dataset + "'");
    if (q.empty()) throw ConfigError("q list must be non-empty");
    for (double v : q)
      if (!(v > 0 && v <= 1)) throw ConfigError("q must lie in (0,1], got " + std::to_string(v));
    if (seeds.empty()) throw ConfigError("seeds list must be non-empty");
    if (layers.empty()) throw ConfigError("layers list must be non-empty");
    for (auto l : layers)
      if (l < 1 || l > 4) throw ConfigError("layers entries must lie in {1,2,3,4}");
    if (bg_layer < 1 || bg_layer > 4) throw ConfigError("bg_layer must lie in {1,2,3,4}");
    if (spike_window == 0) throw ConfigError("spike_window must be positive");
    train.validate();
  }
};

/// Named presets. desk: 10000 train samples, 15 epochs, 5 fine-tune
/// epochs, widths [8,16,32,64]. full: every sample, 80 + 20 epochs, widths
/// [16,32,64,128].
inline void apply_profile(RunConfig& c, const std::string& profile) {
  if (profile == "desk") {
    c.train_samples = 10000;
    c.train.epochs = 15;
    c.train.finetune_epochs = 5;
    c.train.widths = {8, 16, 32, 64};
    c.train.bias_epochs = 2;
  } else if (profile == "full") {
    c.train_samples = 0;
    c.train.epochs = 80;
    c.train.finetune_epochs = 20;
    c.train.widths = {16, 32, 64, 128};
    c.train.bias_epochs = 5;
  } else {
    throw ConfigError("unknown profile '" + profile + "' (expected desk or full)");
  }
  c.profile = profile;
}

namespace detail {
template <typename T>
T get_checked(const json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

template <typename T>
std::vector<T> scalar_or_list(const json& j, const std::string& key) {
  if (j.is_array()) return get_checked<std::vector<T>>(j, key);
  return {get_checked<T>(j, key)};
}
}  // namespace detail

/// Applies a flat JSON object on top of `c`.
inline void apply_config_json(RunConfig& c, const json& j) {
  using detail::get_checked;
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (j.contains("profile")) apply_profile(c, get_checked<std::string>(j.at("profile"), "profile"));
  auto& t = c.train;
  for (const auto& [k, v] : j.items()) {
    if (k == "profile") continue;
    else if (k == "name") c.name = get_checked<std::string>(v, k);
    else if (k == "dataset") c.dataset = get_checked<std::string>(v, k);
    else if (k == "q") c.q = detail::scalar_or_list<double>(v, k);
    else if (k == "seeds") c.seeds = detail::scalar_or_list<std::uint64_t>(v, k);
    else if (k == "data_seed") c.data_seed = get_checked<std::uint64_t>(v, k);
    else if (k == "train_samples") c.train_samples = get_checked<std::size_t>(v, k);
    else if (k == "test_samples") c.test_samples = get_checked<std::size_t>(v, k);
    else if (k == "mnist_dir") c.mnist_dir = get_checked<std::string>(v, k);
    else if (k == "data_dir") c.data_dir = get_checked<std::string>(v, k);
    else if (k == "output_dir") c.output_dir = get_checked<std::string>(v, k);
    else if (k == "layers") c.layers = detail::scalar_or_list<std::size_t>(v, k);
    else if (k == "probe_samples") c.probe_samples = get_checked<std::size_t>(v, k);
    else if (k == "spike_threshold") c.spike_threshold = get_checked<double>(v, k);
    else if (k == "spike_window") c.spike_window = get_checked<std::size_t>(v, k);
    else if (k == "bg_layer") c.bg_layer = get_checked<std::size_t>(v, k);
    else if (k == "epochs") t.epochs = get_checked<std::size_t>(v, k);
    else if (k == "batch_size") t.batch_size = get_checked<std::size_t>(v, k);
    else if (k == "initial_lr") t.initial_lr = get_checked<double>(v, k);
    else if (k == "weight_decay") t.weight_decay = get_checked<double>(v, k);
    else if (k == "mode") t.mode = train_mode_from_string(get_checked<std::string>(v, k));
    else if (k == "injection_layer") t.injection_layer = get_checked<std::size_t>(v, k);
    else if (k == "bias_source") t.bias_source = bias_source_kind_from_string(get_checked<std::string>(v, k));
    else if (k == "finetune_epochs") t.finetune_epochs = get_checked<std::size_t>(v, k);
    else if (k == "reinit_head") t.reinit_head = get_checked<bool>(v, k);
    else if (k == "freeze_embedding") t.freeze_embedding = get_checked<bool>(v, k);
    else if (k == "widths") t.widths = get_checked<std::vector<std::size_t>>(v, k);
    else if (k == "bias_epochs") t.bias_epochs = get_checked<std::size_t>(v, k);
    else throw ConfigError("unknown config key '" + k + "'");
  }
}

inline RunConfig load_run_config(const std::filesystem::path& p) {
  json j;
  try {
    j = json::parse(read_text(p));
  } catch (const json::exception& e) {
    throw ConfigError(p.string() + ": " + e.what());
  } catch (const RuntimeError& e) {
    throw ConfigError(e.what());
  }
  RunConfig c;
  apply_config_json(c, j);
  return c;
}

/// Round-trips through apply_config_json.
inline json config_to_json(const RunConfig& c) {
  const auto& t = c.train;
  json j{{"name", c.name},
         {"dataset", c.dataset},
         {"q", c.q},
         {"seeds", c.seeds},
         {"data_seed", c.data_seed},
         {"train_samples", c.train_samples},
         {"test_samples", c.test_samples},
         {"mnist_dir", c.mnist_dir},
         {"data_dir", c.data_dir},
         {"output_dir", c.output_dir},
         {"layers", c.layers},
         {"probe_samples", c.probe_samples},
         {"spike_threshold", c.spike_threshold},
         {"spike_window", c.spike_window},
         {"bg_layer", c.bg_layer},
         {"epochs", t.epochs},
         {"batch_size", t.batch_size},
         {"initial_lr", t.initial_lr},
         {"weight_decay", t.weight_decay},
         {"mode", to_string(t.mode)},
         {"injection_layer", t.injection_layer},
         {"bias_source", to_string(t.bias_source)},
         {"finetune_epochs", t.finetune_epochs},
         {"reinit_head", t.reinit_head},
         {"freeze_embedding", t.freeze_embedding},
         {"widths", t.widths},
         {"bias_epochs", t.bias_epochs}};
  return j;
}

/// Fills unset paths from BADD_DATA_DIR (default "data"): MNIST under
/// <root>/mnist and generated datasets under <root>/generated.
inline void resolve_paths(RunConfig& c) {
  const char* env = std::getenv("BADD_DATA_DIR");
  const std::filesystem::path root = env && *env ? env : "data";
  if (c.mnist_dir.empty()) c.mnist_dir = (root / "mnist").string();
  if (c.data_dir.empty()) c.data_dir = (root / "generated").string();
}

/// Directory holding the generated dataset for one q value.
inline std::filesystem::path dataset_dir(const RunConfig& c, double q) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "_q%g_s%llu_n%zu", q, static_cast<unsigned long long>(c.data_seed), c.train_samples);
  return std::filesystem::path(c.data_dir) / (c.dataset + buf);
}

}  // namespace badd
