#include "neti/runconfig.hpp"

#include <cmath>
#include <cstdint>
#include <variant>

#include "neti/bundle.hpp"
#include "neti/common.hpp"
#include "neti/weightfile.hpp"

namespace neti {

namespace {

using json = nlohmann::json;

// One row per config-file key: the key name and the RunConfig field it sets.
struct Entry {
  const char* key;
  std::variant<int RunConfig::*, uint64_t RunConfig::*, double RunConfig::*,
               bool RunConfig::*, std::string RunConfig::*,
               std::optional<int> RunConfig::*,
               std::optional<double> RunConfig::*,
               std::vector<double> RunConfig::*, std::vector<int> RunConfig::*>
      field;
};

const std::vector<Entry>& schema() {
  static const std::vector<Entry> s = {
      {"context", &RunConfig::context},
      {"dim", &RunConfig::dim},
      {"layers", &RunConfig::layers},
      {"hidden", &RunConfig::hidden},
      {"freqs", &RunConfig::freqs},
      {"time_anchors", &RunConfig::time_anchors},
      {"sigma_t", &RunConfig::sigma_t},
      {"sigma_l", &RunConfig::sigma_l},
      {"bypass", &RunConfig::bypass},
      {"alpha", &RunConfig::alpha},
      {"sample_steps", &RunConfig::sample_steps},
      {"guidance", &RunConfig::guidance},
      {"truncation", &RunConfig::truncation},
      {"sample_count", &RunConfig::sample_count},
      {"mode", &RunConfig::mode},
      {"train_steps", &RunConfig::train_steps},
      {"batch_size", &RunConfig::batch_size},
      {"grad_accum", &RunConfig::grad_accum},
      {"base_lr", &RunConfig::base_lr},
      {"effective_lr", &RunConfig::effective_lr},
      {"dropout_prob", &RunConfig::dropout_prob},
      {"checkpoint_every", &RunConfig::checkpoint_every},
      {"debug_checks", &RunConfig::debug_checks},
      {"pretrain_steps", &RunConfig::pretrain_steps},
      {"pretrain_batch", &RunConfig::pretrain_batch},
      {"pretrain_lr", &RunConfig::pretrain_lr},
      {"caption_dropout", &RunConfig::caption_dropout},
      {"probe_size", &RunConfig::probe_size},
      {"count", &RunConfig::count},
      {"seed", &RunConfig::seed},
      {"out", &RunConfig::out},
      {"bundle", &RunConfig::bundle_path},
      {"mapper", &RunConfig::mapper_path},
      {"appearance_mapper", &RunConfig::appearance_mapper_path},
      {"concept_dir", &RunConfig::concept_dir},
      {"corpus_dir", &RunConfig::corpus_dir},
      {"prompt", &RunConfig::prompt},
      {"fixed_t", &RunConfig::fixed_t},
      {"mix_start_t", &RunConfig::mix_start_t},
      {"geometry_layers", &RunConfig::geometry_layers},
      {"ks", &RunConfig::ks},
  };
  return s;
}

[[noreturn]] void type_error(const std::string& key, const char* want,
                             const json& got) {
  fail("config: key '", key, "' expects ", want, ", got ", got.type_name());
}

int64_t as_integer(const std::string& key, const json& j) {
  if (!j.is_number_integer()) {
    type_error(key, "an integer", j);
  }
  return j.get<int64_t>();
}

int as_int(const std::string& key, const json& j) {
  const int64_t v = as_integer(key, j);
  require(v >= INT32_MIN && v <= INT32_MAX, "config: key '", key, "' value ", v,
          " out of range");
  return static_cast<int>(v);
}

void apply_entry(RunConfig& cfg, const Entry& e, const std::string& key,
                 const json& j) {
  struct Visitor {
    RunConfig& cfg;
    const std::string& key;
    const json& j;

    void operator()(int RunConfig::* f) const { cfg.*f = as_int(key, j); }
    void operator()(uint64_t RunConfig::* f) const {
      if (!j.is_number_integer() || (j.is_number_integer() && !j.is_number_unsigned() &&
                                     j.get<int64_t>() < 0)) {
        type_error(key, "a non-negative integer", j);
      }
      cfg.*f = j.get<uint64_t>();
    }
    void operator()(double RunConfig::* f) const {
      if (!j.is_number() || j.is_boolean()) {
        type_error(key, "a number", j);
      }
      cfg.*f = j.get<double>();
    }
    void operator()(bool RunConfig::* f) const {
      if (!j.is_boolean()) {
        type_error(key, "a boolean", j);
      }
      cfg.*f = j.get<bool>();
    }
    void operator()(std::string RunConfig::* f) const {
      if (!j.is_string()) {
        type_error(key, "a string", j);
      }
      cfg.*f = j.get<std::string>();
    }
    void operator()(std::optional<int> RunConfig::* f) const {
      if (j.is_null()) {
        cfg.*f = std::nullopt;
        return;
      }
      cfg.*f = as_int(key, j);
    }
    void operator()(std::optional<double> RunConfig::* f) const {
      if (j.is_null()) {
        cfg.*f = std::nullopt;
        return;
      }
      if (!j.is_number()) {
        type_error(key, "a number or null", j);
      }
      cfg.*f = j.get<double>();
    }
    void operator()(std::vector<double> RunConfig::* f) const {
      if (!j.is_array()) {
        type_error(key, "an array of numbers", j);
      }
      std::vector<double> out;
      for (const json& item : j) {
        if (!item.is_number()) {
          type_error(key, "an array of numbers", item);
        }
        out.push_back(item.get<double>());
      }
      cfg.*f = std::move(out);
    }
    void operator()(std::vector<int> RunConfig::* f) const {
      if (!j.is_array()) {
        type_error(key, "an array of integers", j);
      }
      std::vector<int> out;
      for (const json& item : j) {
        out.push_back(as_int(key, item));
      }
      cfg.*f = std::move(out);
    }
  };
  std::visit(Visitor{cfg, key, j}, e.field);
}

json field_to_json(const RunConfig& cfg, const Entry& e) {
  struct Visitor {
    const RunConfig& cfg;

    json operator()(int RunConfig::* f) const { return cfg.*f; }
    json operator()(uint64_t RunConfig::* f) const { return cfg.*f; }
    json operator()(double RunConfig::* f) const { return cfg.*f; }
    json operator()(bool RunConfig::* f) const { return cfg.*f; }
    json operator()(std::string RunConfig::* f) const { return cfg.*f; }
    json operator()(std::optional<int> RunConfig::* f) const {
      return (cfg.*f) ? json(*(cfg.*f)) : json(nullptr);
    }
    json operator()(std::optional<double> RunConfig::* f) const {
      return (cfg.*f) ? json(*(cfg.*f)) : json(nullptr);
    }
    json operator()(std::vector<double> RunConfig::* f) const { return cfg.*f; }
    json operator()(std::vector<int> RunConfig::* f) const { return cfg.*f; }
  };
  return std::visit(Visitor{cfg}, e.field);
}

}  // namespace

MapperConfig RunConfig::mapper_config() const {
  MapperConfig m;
  m.num_layers = layers;
  m.time_anchors = time_anchors;
  m.freqs = freqs;
  m.hidden = hidden;
  m.out_dim = dim;
  m.sigma_t = sigma_t;
  m.sigma_l = sigma_l;
  m.bypass = bypass;
  // The anchor matrix is part of the trained, serialized state; the reported
  // parameter budget and on-disk size both include it.
  m.train_anchor_matrix = true;
  m.dropout_prob = dropout_prob;
  return m;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.mode = inversion_mode_from_name(mode);
  t.steps = train_steps;
  t.batch_size = batch_size;
  t.grad_accum = grad_accum;
  t.base_lr = base_lr;
  t.effective_lr =
      effective_lr ? *effective_lr : base_lr * batch_size * grad_accum;
  t.dropout_prob = dropout_prob;
  t.alpha = alpha;
  t.seed = seed;
  t.mapper = mapper_config();
  t.checkpoint_every = checkpoint_every;
  if (checkpoint_every > 0) {
    require(!out.empty(), "config: checkpoint_every requires --out");
    t.checkpoint_dir = out + "/weights";
  }
  t.debug_checks = debug_checks;
  return t;
}

PretrainConfig RunConfig::pretrain_config() const {
  PretrainConfig p;
  p.steps = pretrain_steps;
  p.batch_size = pretrain_batch;
  p.lr = pretrain_lr;
  p.caption_dropout = caption_dropout;
  p.seed = seed;
  p.probe_size = probe_size;
  return p;
}

nlohmann::json RunConfig::to_json() const {
  json j;
  j["preset"] = preset;
  for (const Entry& e : schema()) {
    j[e.key] = field_to_json(*this, e);
  }
  // Record the lr actually applied, derived when not given explicitly.
  j["effective_lr"] = effective_lr
                          ? *effective_lr
                          : base_lr * batch_size * grad_accum;
  return j;
}

void RunConfig::validate() const {
  require(preset == "toy" || preset == "paper", "config: unknown preset '",
          preset, "' (expected 'toy' or 'paper')");
  require(context > 0 && dim > 0 && layers > 0 && hidden > 0 && freqs > 0 &&
              time_anchors > 0,
          "config: model dimensions must be positive");
  require(sigma_t > 0.0 && sigma_l > 0.0,
          "config: fourier scales must be positive");
  require(alpha >= 0.0, "config: alpha must be non-negative");
  require(guidance >= 0.0, "config: guidance must be non-negative");
  require(sample_steps >= 1, "config: sample_steps must be at least 1");
  require(sample_count >= 1, "config: sample_count must be at least 1");
  require(train_steps >= 0, "config: train_steps must be non-negative");
  require(pretrain_steps >= 0, "config: pretrain_steps must be non-negative");
  require(batch_size >= 1 && grad_accum >= 1 && pretrain_batch >= 1,
          "config: batch sizes must be at least 1");
  require(base_lr > 0.0 && pretrain_lr > 0.0,
          "config: learning rates must be positive");
  require(dropout_prob >= 0.0 && dropout_prob <= 1.0,
          "config: dropout_prob must be in [0,1]");
  require(caption_dropout >= 0.0 && caption_dropout <= 1.0,
          "config: caption_dropout must be in [0,1]");
  require(probe_size >= 1, "config: probe_size must be at least 1");
  require(count >= 1, "config: count must be at least 1");
  require(checkpoint_every >= 0,
          "config: checkpoint_every must be non-negative");
  if (truncation) {
    require(*truncation >= 1 && *truncation <= hidden, "config: truncation ",
            *truncation, " outside [1, ", hidden, "]");
  }
  if (effective_lr) {
    const double expect = base_lr * batch_size * grad_accum;
    require(std::abs(*effective_lr - expect) <=
                1e-12 * std::max(1.0, std::abs(expect)),
            "config: effective_lr ", *effective_lr,
            " does not equal base_lr * batch_size * grad_accum = ", expect);
  }
  inversion_mode_from_name(mode);  // rejects unknown modes
  for (double t : fixed_t) {
    require(t >= 0.0 && t < 1000.0, "config: fixed_t value ", t,
            " outside [0, 1000)");
  }
  for (int k : ks) {
    require(k >= 1, "config: ks entries must be at least 1");
  }
  for (int l : geometry_layers) {
    require(l >= 0, "config: geometry_layers entries must be non-negative");
  }
}

RunConfig preset_config(const std::string& name) {
  RunConfig cfg;  // toy defaults
  if (name == "toy") {
    // declared defaults
  } else if (name == "paper") {
    cfg.context = 77;
    cfg.dim = 768;
    cfg.layers = 16;
    cfg.freqs = 1024;
    cfg.guidance = 7.5;
  } else {
    fail("config: unknown preset '", name, "' (expected 'toy' or 'paper')");
  }
  cfg.preset = name;
  return cfg;
}

void apply_config_json(RunConfig& cfg, const nlohmann::json& file) {
  require(file.is_object(), "config: top level must be a JSON object");
  for (const auto& item : file.items()) {
    const std::string& key = item.key();
    if (key == "preset") {
      continue;  // consumed during preset selection
    }
    const Entry* found = nullptr;
    for (const Entry& e : schema()) {
      if (key == e.key) {
        found = &e;
        break;
      }
    }
    if (found == nullptr) {
      fail("config: unknown key '", key, "'");
    }
    apply_entry(cfg, *found, key, item.value());
  }
}

RunConfig resolve_config(const FlagOverrides& flags) {
  json file;
  bool have_file = false;
  if (flags.config) {
    const std::string text = read_text_file(*flags.config);
    file = json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (file.is_discarded()) {
      fail("config: ", *flags.config, " is not valid JSON");
    }
    require(file.is_object(), "config: top level of ", *flags.config,
            " must be a JSON object");
    have_file = true;
  }

  std::string preset_name = "toy";
  if (have_file && file.contains("preset")) {
    const json& p = file.at("preset");
    if (!p.is_string()) {
      fail("config: key 'preset' expects a string, got ", p.type_name());
    }
    preset_name = p.get<std::string>();
  }
  if (flags.preset) {
    preset_name = *flags.preset;
  }

  RunConfig cfg = preset_config(preset_name);
  if (have_file) {
    apply_config_json(cfg, file);
  }

  if (flags.mode) cfg.mode = *flags.mode;
  if (flags.out) cfg.out = *flags.out;
  if (flags.bundle) cfg.bundle_path = *flags.bundle;
  if (flags.mapper) cfg.mapper_path = *flags.mapper;
  if (flags.appearance_mapper) cfg.appearance_mapper_path = *flags.appearance_mapper;
  if (flags.concept_dir) cfg.concept_dir = *flags.concept_dir;
  if (flags.corpus_dir) cfg.corpus_dir = *flags.corpus_dir;
  if (flags.prompt) cfg.prompt = *flags.prompt;
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.sample_steps) cfg.sample_steps = *flags.sample_steps;
  if (flags.train_steps) cfg.train_steps = *flags.train_steps;
  if (flags.pretrain_steps) cfg.pretrain_steps = *flags.pretrain_steps;
  if (flags.truncation) cfg.truncation = *flags.truncation;
  if (flags.count) cfg.count = *flags.count;
  if (flags.sample_count) cfg.sample_count = *flags.sample_count;
  if (flags.checkpoint_every) cfg.checkpoint_every = *flags.checkpoint_every;
  if (flags.guidance) cfg.guidance = *flags.guidance;
  if (flags.alpha) cfg.alpha = *flags.alpha;
  if (flags.bypass) cfg.bypass = *flags.bypass;
  if (flags.debug_checks) cfg.debug_checks = *flags.debug_checks;
  if (flags.fixed_t) cfg.fixed_t = *flags.fixed_t;
  if (flags.mix_start_t) cfg.mix_start_t = *flags.mix_start_t;
  if (flags.geometry_layers) cfg.geometry_layers = *flags.geometry_layers;
  if (flags.ks) cfg.ks = *flags.ks;

  cfg.validate();
  return cfg;
}

}  // namespace neti
