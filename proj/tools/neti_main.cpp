// Command-line front end: procedural data generation, generator pretraining,
// concept inversion, sampling, analysis (conditioning decomposition,
// truncation sweeps, style mixing), evaluation metrics, and a parameter
// calculator. Every command resolves its configuration as
// flags > config file > preset defaults, and every command that produces
// artifacts writes them under one run directory together with the fully
// resolved config, input hashes, and a metrics table.
//
// Exit codes: 0 success, 1 runtime failure (structured "error: ..." on
// stderr), 2 command-line usage errors.

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "neti/analysis.hpp"
#include "neti/bundle.hpp"
#include "neti/data.hpp"
#include "neti/evalmetrics.hpp"
#include "neti/image.hpp"
#include "neti/runconfig.hpp"
#include "neti/sha256.hpp"
#include "neti/training.hpp"
#include "neti/weightfile.hpp"

namespace {

namespace fs = std::filesystem;
using neti::fail;
using neti::require;
using neti::RunConfig;
using json = nlohmann::json;

// Shortest decimal form that round-trips the exact double; keeps every CSV
// bit-identical across runs.
std::string format_double(double v) {
  char buf[64];
  if (v == static_cast<double>(static_cast<long long>(v)) &&
      std::abs(v) < 1e15) {
    std::snprintf(buf, sizeof(buf), "%lld", static_cast<long long>(v));
    return buf;
  }
  for (int prec = 1; prec <= 16; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) {
      return buf;
    }
  }
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// 464384 -> "464 384"; used for the parameter calculator's report.
std::string group_digits(long v) {
  std::string digits = std::to_string(v);
  std::string out;
  const int n = static_cast<int>(digits.size());
  for (int i = 0; i < n; ++i) {
    if (i > 0 && (n - i) % 3 == 0) {
      out.push_back(' ');
    }
    out.push_back(digits[static_cast<size_t>(i)]);
  }
  return out;
}

std::string hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    fail("cannot open '", path, "' for hashing");
  }
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  return neti::Sha256::hex_digest(bytes.data(), bytes.size());
}

// Content hash of a directory: relative paths (sorted) and file bytes.
std::string hash_dir(const std::string& dir) {
  require(fs::is_directory(dir), "'", dir, "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) {
      files.push_back(fs::relative(entry.path(), dir));
    }
  }
  std::sort(files.begin(), files.end());
  neti::Sha256 h;
  for (const fs::path& rel : files) {
    const std::string name = rel.generic_string();
    h.update(name.data(), name.size());
    h.update("\0", 1);
    std::ifstream in(fs::path(dir) / rel, std::ios::binary);
    if (!in) {
      fail("cannot open '", (fs::path(dir) / rel).string(), "' for hashing");
    }
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    h.update(bytes.data(), bytes.size());
  }
  return neti::Sha256::hex(h.finish());
}

// Accumulates everything a run directory records besides the artifacts
// themselves: the resolved config, hashes of the inputs consumed, and a
// (run_id, metric, value) table.
class RunDir {
 public:
  RunDir(std::string command, const RunConfig& cfg)
      : command_(std::move(command)), cfg_(cfg) {
    require(!cfg.out.empty(), command_, " requires --out");
    fs::create_directories(cfg.out);
    run_id_ = fs::path(cfg.out).filename().string();
    if (run_id_.empty()) {  // trailing slash
      run_id_ = fs::path(cfg.out).parent_path().filename().string();
    }
  }

  const std::string& run_id() const { return run_id_; }
  std::string path(const std::string& rel) const { return cfg_.out + "/" + rel; }

  std::string samples_dir() const {
    fs::create_directories(path("samples"));
    return path("samples");
  }
  std::string weights_dir() const {
    fs::create_directories(path("weights"));
    return path("weights");
  }

  void note_input_file(const std::string& name, const std::string& p) {
    inputs_[name] = {{"path", p}, {"sha256", hash_file(p)}};
  }
  void note_input_dir(const std::string& name, const std::string& p) {
    inputs_[name] = {{"path", p}, {"sha256", hash_dir(p)}};
  }

  void metric(const std::string& name, double value) {
    rows_.emplace_back(name, format_double(value));
  }
  void metric(const std::string& name, const std::string& value) {
    rows_.emplace_back(name, value);
  }

  // Writes config.json and metrics.csv; call once, after the work succeeds.
  void finalize() {
    json doc;
    doc["command"] = command_;
    doc["config"] = cfg_.to_json();
    doc["inputs"] = inputs_;
    neti::write_text_atomic(path("config.json"), doc.dump(2) + "\n");

    std::string csv = "run_id,metric,value\n";
    for (const auto& [name, value] : rows_) {
      csv += run_id_ + "," + name + "," + value + "\n";
    }
    neti::write_text_atomic(path("metrics.csv"), csv);
  }

 private:
  std::string command_;
  const RunConfig& cfg_;
  std::string run_id_;
  json inputs_ = json::object();
  std::vector<std::pair<std::string, std::string>> rows_;
};

// Seed for the i-th sample of a run: well-spread, stable across commands.
uint64_t sample_seed(const RunConfig& cfg, int i) {
  return neti::Rng(cfg.seed).fork(static_cast<uint64_t>(i)).next_u64();
}

// "999" / "50.5" -> filename-safe "999" / "50p5".
std::string t_tag(double t) {
  std::string s = format_double(t);
  for (char& c : s) {
    if (c == '.') c = 'p';
    if (c == '-') c = 'm';
  }
  return s;
}

std::string replace_placeholder(const std::string& prompt,
                                const std::string& word) {
  const size_t pos = prompt.find("S*");
  require(pos != std::string::npos, "prompt '", prompt,
          "' does not contain the placeholder S*");
  std::string out = prompt;
  out.replace(pos, 2, word);
  return out;
}

// Attributes the prompt asserts, read off the fixed caption grammar.
neti::PromptAttrs attrs_from_prompt(const std::string& prompt) {
  neti::PromptAttrs attrs;
  std::istringstream ss(prompt);
  std::string word;
  while (ss >> word) {
    for (const std::string& c : neti::corpus_colors()) {
      if (word == c) attrs.color = c;
    }
    for (const std::string& s : neti::corpus_shapes()) {
      if (word == s) attrs.shape = s;
    }
    for (const std::string& b : neti::corpus_backgrounds()) {
      if (word == b) attrs.background = b;
    }
  }
  return attrs;
}

neti::Image sample_image(neti::GeneratorBundle& bundle, neti::ConceptModel* cm,
                         const neti::TokenizedPrompt& toks,
                         const RunConfig& cfg, uint64_t noise_seed) {
  neti::SampleResult<float> res = neti::sample_with_concept(
      bundle, cm, toks, cfg.sample_steps, cfg.guidance, cfg.truncation,
      noise_seed);
  return neti::decode_latent_to_image(res.latent, bundle.dcfg().latent_hw);
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_gen_data(const RunConfig& cfg) {
  RunDir run("gen-data", cfg);
  neti::ProceduralCorpus corpus = neti::generate_corpus(cfg.seed, cfg.count);
  neti::save_corpus(run.path("corpus"), corpus);
  neti::ConceptDataset ds = neti::generate_concept(cfg.seed);
  neti::save_concept_dataset(run.path("concept"), ds);

  run.metric("corpus_images", static_cast<double>(corpus.examples.size()));
  run.metric("concept_images", static_cast<double>(ds.images.size()));
  run.finalize();
  std::cout << "wrote " << corpus.examples.size() << " corpus images and "
            << ds.images.size() << " concept views under " << cfg.out << "\n";
  return 0;
}

int cmd_pretrain(const RunConfig& cfg) {
  require(!cfg.corpus_dir.empty(), "pretrain requires --corpus-dir");
  RunDir run("pretrain", cfg);
  run.note_input_dir("corpus", cfg.corpus_dir);

  neti::ProceduralCorpus corpus = neti::load_corpus(cfg.corpus_dir);
  neti::PretrainConfig pc = cfg.pretrain_config();
  pc.log_every = 500;
  neti::PretrainReport report;
  neti::GeneratorBundle bundle = neti::pretrain_generator(corpus, pc, &report);

  const std::string bundle_path = run.weights_dir() + "/bundle.weights";
  neti::save_bundle(bundle_path, bundle);
  neti::save_trace_csv(run.path("trace.csv"), report.trace);

  run.metric("steps", static_cast<double>(pc.steps));
  run.metric("init_probe_loss", report.init_probe_loss);
  run.metric("final_probe_loss", report.final_probe_loss);
  run.metric("bundle_hash", report.bundle_hash);
  run.finalize();
  std::cout << "pretrained generator for " << pc.steps
            << " steps: probe loss " << format_double(report.init_probe_loss)
            << " -> " << format_double(report.final_probe_loss) << "\n"
            << "frozen bundle " << bundle_path << " (sha256 "
            << report.bundle_hash.substr(0, 12) << "...)\n";
  return 0;
}

int cmd_invert(const RunConfig& cfg) {
  require(!cfg.bundle_path.empty(), "invert requires --bundle");
  require(!cfg.concept_dir.empty(), "invert requires --concept-dir");
  RunDir run("invert", cfg);
  run.note_input_file("bundle", cfg.bundle_path);
  run.note_input_dir("concept", cfg.concept_dir);

  neti::GeneratorBundle bundle = neti::load_bundle(cfg.bundle_path);
  neti::ConceptDataset ds = neti::load_concept_dataset(cfg.concept_dir);
  neti::TrainConfig tc = cfg.train_config();
  neti::InversionResult res = neti::invert_concept(bundle, ds, tc);

  const std::string concept_path = run.weights_dir() + "/concept.weights";
  neti::save_concept(concept_path, res.cm);
  neti::save_trace_csv(run.path("trace.csv"), res.trace);

  run.metric("mode", cfg.mode);
  run.metric("steps", static_cast<double>(tc.steps));
  if (!res.trace.empty()) {
    run.metric("final_raw_loss", res.trace.back().raw_loss);
    run.metric("final_smoothed_loss", res.trace.back().smoothed_loss);
  }
  run.metric("bundle_hash", neti::bundle_hash(bundle));
  run.finalize();
  std::cout << "inverted concept (mode " << cfg.mode << ", " << tc.steps
            << " steps)";
  if (!res.trace.empty()) {
    std::cout << ", final smoothed loss "
              << format_double(res.trace.back().smoothed_loss);
  }
  std::cout << "\nconcept weights " << concept_path << "\n";
  return 0;
}

int cmd_sample(const RunConfig& cfg) {
  require(!cfg.bundle_path.empty(), "sample requires --bundle");
  require(!cfg.prompt.empty(), "sample requires --prompt");
  RunDir run("sample", cfg);
  run.note_input_file("bundle", cfg.bundle_path);

  neti::GeneratorBundle bundle = neti::load_bundle(cfg.bundle_path);
  neti::ConceptModel cm;
  neti::ConceptModel* cmp = nullptr;
  if (!cfg.mapper_path.empty()) {
    run.note_input_file("mapper", cfg.mapper_path);
    cm = neti::load_concept(cfg.mapper_path);
    cmp = &cm;
    require(cfg.prompt.find("S*") != std::string::npos,
            "--mapper given but the prompt has no S* placeholder");
  }
  neti::TokenizedPrompt toks =
      neti::tokenize(cfg.prompt, bundle.vocab, bundle.tcfg().context);

  char name[32];
  for (int i = 0; i < cfg.sample_count; ++i) {
    neti::Image img = sample_image(bundle, cmp, toks, cfg, sample_seed(cfg, i));
    std::snprintf(name, sizeof(name), "sample_%04d.ppm", i);
    neti::write_ppm(run.samples_dir() + "/" + name, img);
  }

  run.metric("samples", static_cast<double>(cfg.sample_count));
  run.metric("steps", static_cast<double>(cfg.sample_steps));
  run.metric("guidance", cfg.guidance);
  run.finalize();
  std::cout << "wrote " << cfg.sample_count << " samples under "
            << run.samples_dir() << "\n";
  return 0;
}

int cmd_analyze_decompose(const RunConfig& cfg) {
  require(!cfg.bundle_path.empty(), "analyze decompose requires --bundle");
  require(!cfg.mapper_path.empty(), "analyze decompose requires --mapper");
  require(!cfg.prompt.empty(), "analyze decompose requires --prompt");
  require(!cfg.fixed_t.empty(), "analyze decompose requires --fixed-t");
  RunDir run("analyze decompose", cfg);
  run.note_input_file("bundle", cfg.bundle_path);
  run.note_input_file("mapper", cfg.mapper_path);

  neti::GeneratorBundle bundle = neti::load_bundle(cfg.bundle_path);
  neti::ConceptModel cm = neti::load_concept(cfg.mapper_path);
  neti::TokenizedPrompt toks =
      neti::tokenize(cfg.prompt, bundle.vocab, bundle.tcfg().context);

  const uint64_t noise_seed = sample_seed(cfg, 0);
  neti::Image full = sample_image(bundle, &cm, toks, cfg, noise_seed);
  neti::write_ppm(run.samples_dir() + "/full.ppm", full);

  std::vector<neti::Image> grid;
  std::vector<std::pair<double, double>> rows;
  for (double t : cfg.fixed_t) {
    neti::SampleResult<float> res = neti::decompose_timestep(
        bundle, cm, toks, cfg.sample_steps, cfg.guidance, t, cfg.truncation,
        noise_seed);
    neti::Image img =
        neti::decode_latent_to_image(res.latent, bundle.dcfg().latent_hw);
    neti::write_ppm(run.samples_dir() + "/decompose_t" + t_tag(t) + ".ppm",
                    img);
    const double dist = neti::mean_abs_diff(full, img);
    rows.emplace_back(t, dist);
    run.metric("pixel_dist_t" + t_tag(t), dist);
    grid.push_back(std::move(img));
  }
  neti::save_decompose_csv(run.path("decompose.csv"), rows);
  neti::write_ppm(run.samples_dir() + "/decompose_grid.ppm",
                  neti::tile_images(grid, static_cast<int>(grid.size())));

  run.finalize();
  std::cout << "decomposed conditioning at " << cfg.fixed_t.size()
            << " fixed timesteps; pixel distance to the full sample:\n";
  for (const auto& [t, d] : rows) {
    std::cout << "  t=" << format_double(t) << "  " << format_double(d) << "\n";
  }
  return 0;
}

int cmd_analyze_sweep(const RunConfig& cfg) {
  require(!cfg.bundle_path.empty(), "analyze sweep requires --bundle");
  require(!cfg.mapper_path.empty(), "analyze sweep requires --mapper");
  require(!cfg.concept_dir.empty(), "analyze sweep requires --concept-dir");
  RunDir run("analyze sweep", cfg);
  run.note_input_file("bundle", cfg.bundle_path);
  run.note_input_file("mapper", cfg.mapper_path);
  run.note_input_dir("concept", cfg.concept_dir);

  neti::GeneratorBundle bundle = neti::load_bundle(cfg.bundle_path);
  neti::ConceptModel cm = neti::load_concept(cfg.mapper_path);
  neti::ConceptDataset ds = neti::load_concept_dataset(cfg.concept_dir);
  const std::string prompt =
      cfg.prompt.empty() ? ds.caption_template : cfg.prompt;
  neti::TokenizedPrompt toks =
      neti::tokenize(prompt, bundle.vocab, bundle.tcfg().context);

  neti::FrozenFeatureExtractor fx;
  neti::SweepResult sweep =
      neti::truncation_sweep(bundle, cm, toks, cfg.ks, cfg.sample_steps,
                             cfg.guidance, sample_seed(cfg, 0), ds.images, fx);

  char name[32];
  std::vector<neti::Image> grid;
  for (const neti::SweepEntry& e : sweep.entries) {
    std::snprintf(name, sizeof(name), "sweep_k%03d.ppm", e.k);
    neti::write_ppm(run.samples_dir() + "/" + name, e.image);
    run.metric("score_k" + std::to_string(e.k), e.score);
    grid.push_back(e.image);
  }
  neti::save_sweep_csv(run.path("sweep.csv"), sweep);
  neti::write_ppm(run.samples_dir() + "/sweep_grid.ppm",
                  neti::tile_images(grid, static_cast<int>(grid.size())));

  run.finalize();
  std::cout << "truncation sweep (similarity to the concept images):\n";
  for (const neti::SweepEntry& e : sweep.entries) {
    std::cout << "  k=" << e.k << "  " << format_double(e.score) << "\n";
  }
  return 0;
}

int cmd_analyze_mix(const RunConfig& cfg) {
  require(!cfg.bundle_path.empty(), "analyze mix requires --bundle");
  require(!cfg.mapper_path.empty(),
          "analyze mix requires --mapper (geometry concept)");
  require(!cfg.appearance_mapper_path.empty(),
          "analyze mix requires --appearance-mapper");
  require(!cfg.prompt.empty(), "analyze mix requires --prompt");
  require(!cfg.mix_start_t.empty(), "analyze mix requires --mix-start-t");
  RunDir run("analyze mix", cfg);
  run.note_input_file("bundle", cfg.bundle_path);
  run.note_input_file("geometry_mapper", cfg.mapper_path);
  run.note_input_file("appearance_mapper", cfg.appearance_mapper_path);

  neti::GeneratorBundle bundle = neti::load_bundle(cfg.bundle_path);
  neti::ConceptModel geometry = neti::load_concept(cfg.mapper_path);
  neti::ConceptModel appearance =
      neti::load_concept(cfg.appearance_mapper_path);
  neti::TokenizedPrompt toks =
      neti::tokenize(cfg.prompt, bundle.vocab, bundle.tcfg().context);

  std::vector<int> layers = cfg.geometry_layers.empty()
                                ? neti::default_geometry_layers(bundle.dcfg())
                                : cfg.geometry_layers;
  const uint64_t noise_seed = sample_seed(cfg, 0);
  neti::Image pure =
      sample_image(bundle, &geometry, toks, cfg, noise_seed);
  neti::write_ppm(run.samples_dir() + "/geometry.ppm", pure);

  std::vector<neti::Image> grid;
  std::vector<std::pair<double, double>> rows;
  for (double mst : cfg.mix_start_t) {
    neti::Image img =
        neti::style_mix(bundle, geometry, appearance, toks, cfg.sample_steps,
                        cfg.guidance, mst, layers, noise_seed);
    neti::write_ppm(run.samples_dir() + "/mix_t" + t_tag(mst) + ".ppm", img);
    const double dist = neti::mean_abs_diff(pure, img);
    rows.emplace_back(mst, dist);
    run.metric("pixel_dist_t" + t_tag(mst), dist);
    grid.push_back(std::move(img));
  }
  neti::save_decompose_csv(run.path("mix.csv"), rows);
  neti::write_ppm(run.samples_dir() + "/mix_grid.ppm",
                  neti::tile_images(grid, static_cast<int>(grid.size())));

  run.finalize();
  std::cout << "style mix sweep (pixel distance to the pure-geometry "
               "sample):\n";
  for (const auto& [t, d] : rows) {
    std::cout << "  mix_start_t=" << format_double(t) << "  "
              << format_double(d) << "\n";
  }
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  require(!cfg.bundle_path.empty(), "eval requires --bundle");
  require(!cfg.mapper_path.empty(), "eval requires --mapper");
  require(!cfg.concept_dir.empty(), "eval requires --concept-dir");
  require(!cfg.corpus_dir.empty(), "eval requires --corpus-dir");
  RunDir run("eval", cfg);
  run.note_input_file("bundle", cfg.bundle_path);
  run.note_input_file("mapper", cfg.mapper_path);
  run.note_input_dir("concept", cfg.concept_dir);
  run.note_input_dir("corpus", cfg.corpus_dir);

  neti::GeneratorBundle bundle = neti::load_bundle(cfg.bundle_path);
  neti::ConceptModel cm = neti::load_concept(cfg.mapper_path);
  neti::ConceptDataset ds = neti::load_concept_dataset(cfg.concept_dir);
  neti::ProceduralCorpus corpus = neti::load_corpus(cfg.corpus_dir);

  const std::string prompt =
      cfg.prompt.empty() ? ds.caption_template : cfg.prompt;
  require(prompt.find("S*") != std::string::npos,
          "eval prompt must contain the S* placeholder");
  neti::TokenizedPrompt toks =
      neti::tokenize(prompt, bundle.vocab, bundle.tcfg().context);

  std::cerr << "training attribute probe on " << corpus.examples.size()
            << " corpus images...\n";
  neti::AttributeProbe probe = neti::train_attribute_probe(corpus);
  run.metric("probe_accuracy_color", probe.accuracy("color"));
  run.metric("probe_accuracy_shape", probe.accuracy("shape"));
  run.metric("probe_accuracy_background", probe.accuracy("background"));
  run.metric("probe_accuracy_joint", probe.held_out_accuracy());

  // Concept samples.
  char name[32];
  std::vector<neti::Image> gen;
  for (int i = 0; i < cfg.sample_count; ++i) {
    gen.push_back(sample_image(bundle, &cm, toks, cfg, sample_seed(cfg, i)));
    std::snprintf(name, sizeof(name), "sample_%04d.ppm", i);
    neti::write_ppm(run.samples_dir() + "/" + name, gen.back());
  }

  // Baseline: the same prompt with the placeholder replaced by an existing
  // vocabulary word, drawn deterministically from the seed.
  const std::vector<std::string>& shapes = neti::corpus_shapes();
  const std::string baseline_word =
      shapes[neti::Rng(cfg.seed).fork(99).below(shapes.size())];
  const std::string baseline_prompt =
      replace_placeholder(prompt, baseline_word);
  neti::TokenizedPrompt btoks =
      neti::tokenize(baseline_prompt, bundle.vocab, bundle.tcfg().context);
  std::vector<neti::Image> baseline;
  for (int i = 0; i < cfg.sample_count; ++i) {
    baseline.push_back(
        sample_image(bundle, nullptr, btoks, cfg, sample_seed(cfg, i)));
    std::snprintf(name, sizeof(name), "baseline_%04d.ppm", i);
    neti::write_ppm(run.samples_dir() + "/" + name, baseline.back());
  }

  const double sim =
      neti::image_similarity(gen, ds.images, probe.extractor());
  const double base_sim =
      neti::image_similarity(baseline, ds.images, probe.extractor());
  run.metric("image_similarity", sim);
  run.metric("baseline_token", baseline_word);
  run.metric("baseline_similarity", base_sim);
  run.metric("similarity_margin", sim - base_sim);

  const neti::PromptAttrs attrs = attrs_from_prompt(prompt);
  const double adherence = neti::prompt_adherence(gen, attrs, probe);
  run.metric("prompt_adherence", adherence);

  // Norm statistics of the rescaled concept embeddings over random queries.
  if (neti::mode_uses_mapper(cm.mode)) {
    const neti::Tensor<float> v_super =
        neti::super_embedding(bundle, cm.super_category);
    neti::Rng qrng = neti::Rng(cfg.seed).fork(5);
    std::vector<double> norms;
    for (int i = 0; i < 1000; ++i) {
      const double t = qrng.uniform(0.0, 1000.0);
      const int layer =
          static_cast<int>(qrng.below(cm.mapper.cfg.num_layers));
      neti::Tape<float> tape;
      neti::MapperQueryResult q = neti::mapper_forward(
          tape, cm.mapper, t, layer, std::nullopt, v_super);
      norms.push_back(tape.val(q.v_base).norm());
    }
    const neti::NormStats stats = neti::norm_stats(norms);
    run.metric("embed_norm_median", stats.median);
    run.metric("embed_norm_min", stats.min);
    run.metric("embed_norm_max", stats.max);
    run.metric("embed_norm_ratio",
               stats.min > 0.0 ? stats.max / stats.min : 0.0);
  }

  run.finalize();
  std::cout << "probe held-out accuracy (color/shape/background/joint): "
            << format_double(probe.accuracy("color")) << " / "
            << format_double(probe.accuracy("shape")) << " / "
            << format_double(probe.accuracy("background")) << " / "
            << format_double(probe.held_out_accuracy()) << "\n"
            << "image similarity " << format_double(sim) << " vs baseline '"
            << baseline_word << "' " << format_double(base_sim)
            << " (margin " << format_double(sim - base_sim) << ")\n"
            << "prompt adherence " << format_double(adherence) << "\n";
  return 0;
}

int cmd_info(const RunConfig& cfg) {
  const neti::MapperConfig mc = cfg.mapper_config();
  const long params = neti::param_count(mc);
  const long bytes = neti::serialized_size_bytes(mc);
  char mb[32];
  std::snprintf(mb, sizeof(mb), "%.2f", static_cast<double>(bytes) / 1e6);
  std::cout << "preset: " << cfg.preset << "\n"
            << "bypass: " << (cfg.bypass ? "on" : "off") << "\n"
            << "mapper: layers=" << mc.num_layers
            << " anchors=" << mc.anchors() << " freqs=" << mc.freqs
            << " hidden=" << mc.hidden << " out_dim=" << mc.out_dim << "\n"
            << "parameter count " << group_digits(params) << "\n"
            << "estimated file size " << group_digits(bytes) << " bytes ("
            << mb << " MB)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Concept inversion for a frozen toy latent-diffusion generator: a "
      "space-time neural mapper learns one concept's per-layer, per-timestep "
      "embeddings while the generator stays byte-identical."};
  app.require_subcommand(1);

  neti::FlagOverrides flags;
  std::optional<int> steps_raw;
  std::string fixed_t_str, mix_start_t_str, geometry_layers_str, ks_str;
  bool flag_bypass = false, flag_no_bypass = false, flag_debug = false;

  // Validators for comma-separated list flags.
  auto int_list = CLI::Validator(
      [](std::string& s) -> std::string {
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ',')) {
          char* end = nullptr;
          (void)std::strtol(item.c_str(), &end, 10);
          if (item.empty() || end == nullptr || *end != '\0') {
            return "'" + item + "' is not an integer";
          }
        }
        return {};
      },
      "INT[,INT...]", "int_list");
  auto double_list = CLI::Validator(
      [](std::string& s) -> std::string {
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ',')) {
          char* end = nullptr;
          (void)std::strtod(item.c_str(), &end);
          if (item.empty() || end == nullptr || *end != '\0') {
            return "'" + item + "' is not a number";
          }
        }
        return {};
      },
      "NUM[,NUM...]", "double_list");

  auto parse_int_list = [](const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
      out.push_back(static_cast<int>(std::strtol(item.c_str(), nullptr, 10)));
    }
    return out;
  };
  auto parse_double_list = [](const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
      out.push_back(std::strtod(item.c_str(), nullptr));
    }
    return out;
  };

  auto add_common = [&](CLI::App* c) {
    c->add_option("--preset", flags.preset, "configuration preset: toy or paper");
    c->add_option("--config", flags.config, "JSON config file");
    c->add_option("--seed", flags.seed, "root RNG seed");
    c->add_option("--out", flags.out, "run directory for all outputs");
  };

  CLI::App* gen = app.add_subcommand(
      "gen-data", "generate the procedural corpus and the concept image set");
  add_common(gen);
  gen->add_option("--count", flags.count, "corpus size (>= 64)");

  CLI::App* pre = app.add_subcommand(
      "pretrain", "train the generator on a corpus, then freeze it");
  add_common(pre);
  pre->add_option("--corpus-dir", flags.corpus_dir, "corpus directory");
  pre->add_option("--steps", steps_raw, "pretraining steps");

  CLI::App* inv = app.add_subcommand(
      "invert", "optimize a concept against a frozen generator");
  add_common(inv);
  inv->add_option("--bundle", flags.bundle, "frozen generator bundle");
  inv->add_option("--concept-dir", flags.concept_dir, "concept image set");
  inv->add_option("--mode", flags.mode,
                  "neti | neti_bypass | ti_baseline | ablate_no_time | "
                  "ablate_no_space | ablate_neither");
  inv->add_option("--steps", steps_raw, "inversion steps");
  inv->add_option("--alpha", flags.alpha, "textual bypass strength");
  inv->add_option("--checkpoint-every", flags.checkpoint_every,
                  "write intermediate weights every N steps");
  inv->add_flag("--debug-checks", flag_debug,
                "assert frozen-generator gradients are zero every step");

  CLI::App* smp = app.add_subcommand(
      "sample", "sample images from a bundle, optionally with a concept");
  add_common(smp);
  smp->add_option("--bundle", flags.bundle, "frozen generator bundle");
  smp->add_option("--mapper", flags.mapper, "concept weights (inversion output)");
  smp->add_option("--prompt", flags.prompt, "prompt; use S* for the concept");
  smp->add_option("--steps", steps_raw, "sampling steps");
  smp->add_option("--guidance", flags.guidance, "guidance scale");
  smp->add_option("--truncation", flags.truncation,
                  "truncate the mapper's hidden vector to this width");
  smp->add_option("--samples", flags.sample_count, "number of images");

  CLI::App* ana = app.add_subcommand("analyze", "post-hoc concept analyses");
  ana->require_subcommand(1);

  CLI::App* dec = ana->add_subcommand(
      "decompose", "sample with the conditioning frozen at fixed timesteps");
  add_common(dec);
  dec->add_option("--bundle", flags.bundle, "frozen generator bundle");
  dec->add_option("--mapper", flags.mapper, "concept weights");
  dec->add_option("--prompt", flags.prompt, "prompt; use S* for the concept");
  dec->add_option("--fixed-t", fixed_t_str, "query timesteps, e.g. 999,666,333,50")
      ->check(double_list);
  dec->add_option("--steps", steps_raw, "sampling steps");
  dec->add_option("--guidance", flags.guidance, "guidance scale");
  dec->add_option("--truncation", flags.truncation, "hidden-vector width");

  CLI::App* swp = ana->add_subcommand(
      "sweep", "sample at increasing hidden-vector truncation widths");
  add_common(swp);
  swp->add_option("--bundle", flags.bundle, "frozen generator bundle");
  swp->add_option("--mapper", flags.mapper, "concept weights");
  swp->add_option("--concept-dir", flags.concept_dir,
                  "concept images to score against");
  swp->add_option("--prompt", flags.prompt,
                  "prompt (default: the concept's caption template)");
  swp->add_option("--ks", ks_str, "truncation widths, e.g. 8,16,32,64,128")
      ->check(int_list);
  swp->add_option("--steps", steps_raw, "sampling steps");
  swp->add_option("--guidance", flags.guidance, "guidance scale");

  CLI::App* mix = ana->add_subcommand(
      "mix", "style-mix two concepts across layers and timesteps");
  add_common(mix);
  mix->add_option("--bundle", flags.bundle, "frozen generator bundle");
  mix->add_option("--mapper", flags.mapper, "geometry concept weights");
  mix->add_option("--appearance-mapper", flags.appearance_mapper,
                  "appearance concept weights");
  mix->add_option("--prompt", flags.prompt, "prompt; use S* for the concept");
  mix->add_option("--mix-start-t", mix_start_t_str,
                  "appearance takes over at and below these timesteps")
      ->check(double_list);
  mix->add_option("--geometry-layers", geometry_layers_str,
                  "layers kept on geometry, e.g. 0,3")
      ->check(int_list);
  mix->add_option("--steps", steps_raw, "sampling steps");
  mix->add_option("--guidance", flags.guidance, "guidance scale");

  CLI::App* evl = app.add_subcommand(
      "eval", "similarity, prompt adherence, and embedding-norm metrics");
  add_common(evl);
  evl->add_option("--bundle", flags.bundle, "frozen generator bundle");
  evl->add_option("--mapper", flags.mapper, "concept weights");
  evl->add_option("--concept-dir", flags.concept_dir, "concept image set");
  evl->add_option("--corpus-dir", flags.corpus_dir,
                  "corpus for attribute-probe training");
  evl->add_option("--prompt", flags.prompt,
                  "prompt (default: the concept's caption template)");
  evl->add_option("--steps", steps_raw, "sampling steps");
  evl->add_option("--guidance", flags.guidance, "guidance scale");
  evl->add_option("--truncation", flags.truncation, "hidden-vector width");
  evl->add_option("--samples", flags.sample_count, "number of images");

  CLI::App* inf = app.add_subcommand(
      "info", "report the mapper's parameter count and file size");
  inf->add_option("--preset", flags.preset, "configuration preset: toy or paper");
  inf->add_option("--config", flags.config, "JSON config file");
  CLI::Option* o_bypass =
      inf->add_flag("--bypass", flag_bypass, "include the textual bypass head");
  inf->add_flag("--no-bypass", flag_no_bypass, "exclude the textual bypass head")
      ->excludes(o_bypass);

  // Bypass toggles on training-facing commands too.
  for (CLI::App* c : {inv, smp}) {
    CLI::Option* ob = c->add_flag("--bypass", flag_bypass,
                                  "enable the textual bypass head");
    c->add_flag("--no-bypass", flag_no_bypass,
                "disable the textual bypass head")
        ->excludes(ob);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (flag_bypass) flags.bypass = true;
  if (flag_no_bypass) flags.bypass = false;
  if (flag_debug) flags.debug_checks = true;
  if (!fixed_t_str.empty()) flags.fixed_t = parse_double_list(fixed_t_str);
  if (!mix_start_t_str.empty())
    flags.mix_start_t = parse_double_list(mix_start_t_str);
  if (!geometry_layers_str.empty())
    flags.geometry_layers = parse_int_list(geometry_layers_str);
  if (!ks_str.empty()) flags.ks = parse_int_list(ks_str);

  // --steps routes to the parsed command's own step count.
  if (steps_raw) {
    if (pre->parsed()) {
      flags.pretrain_steps = steps_raw;
    } else if (inv->parsed()) {
      flags.train_steps = steps_raw;
    } else {
      flags.sample_steps = steps_raw;
    }
  }

  try {
    const RunConfig cfg = neti::resolve_config(flags);
    if (gen->parsed()) return cmd_gen_data(cfg);
    if (pre->parsed()) return cmd_pretrain(cfg);
    if (inv->parsed()) return cmd_invert(cfg);
    if (smp->parsed()) return cmd_sample(cfg);
    if (ana->parsed()) {
      if (dec->parsed()) return cmd_analyze_decompose(cfg);
      if (swp->parsed()) return cmd_analyze_sweep(cfg);
      if (mix->parsed()) return cmd_analyze_mix(cfg);
    }
    if (evl->parsed()) return cmd_eval(cfg);
    if (inf->parsed()) return cmd_info(cfg);
    fail("no command dispatched");
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
