#include "neti/analysis.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

#include "neti/weightfile.hpp"

namespace neti {

namespace {

// Shared sampler entry replicating sample_with_concept's noise and
// unconditional-cache handling, so analyses with custom builders stay
// comparable (and, where promised, bit-identical) with ordinary sampling.
SampleResult<float> run_with_builder(GeneratorBundle& bundle,
                                     const CondBuilder<float>& builder,
                                     int steps, double guidance,
                                     uint64_t noise_seed) {
  const DenoiserConfig& cfg = bundle.dcfg();
  Rng rng(noise_seed);
  Tensor<float> init =
      Tensor<float>::randn(cfg.pixels(), cfg.channels_in, rng);
  CachedConditioning<float> uncond;
  const CachedConditioning<float>* up = nullptr;
  if (guidance != 1.0) {
    uncond = uncond_conditioning(bundle);
    up = &uncond;
  }
  return sample_latent<float>(cfg, bundle.den, bundle.schedule, builder, up,
                              bundle.uncond_trained, steps, guidance, init);
}

std::string format_score(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", x);
  return buf;
}

}  // namespace

SampleResult<float> decompose_timestep(GeneratorBundle& bundle,
                                       ConceptModel& cm,
                                       const TokenizedPrompt& toks, int steps,
                                       double guidance, double fixed_t,
                                       std::optional<int> truncation,
                                       uint64_t noise_seed) {
  require(fixed_t >= 0.0 && fixed_t < 1000.0, "decompose_timestep: fixed_t ",
          fixed_t, " outside [0, 1000)");
  const CachedConditioning<float> cached =
      materialize_conditioning(bundle, &cm, toks, fixed_t, truncation);
  // Re-leaf the cached tensors on the step's tape each call; the builder
  // counter in the sampler still ticks once per step.
  CondBuilder<float> frozen_builder =
      [&cached](Tape<float>& tape, int /*t*/) {
        std::vector<LayerConditioning> cond;
        cond.reserve(cached.kv.size());
        for (const auto& [k, v] : cached.kv) {
          cond.push_back({tape.constant(k), tape.constant(v)});
        }
        return cond;
      };
  return run_with_builder(bundle, frozen_builder, steps, guidance, noise_seed);
}

SweepResult truncation_sweep(GeneratorBundle& bundle, ConceptModel& cm,
                             const TokenizedPrompt& toks,
                             const std::vector<int>& ks, int steps,
                             double guidance, uint64_t noise_seed,
                             const std::vector<Image>& concept_images,
                             const FrozenFeatureExtractor& fx) {
  require(!ks.empty(), "truncation_sweep: no truncation widths given");
  require(mode_uses_mapper(cm.mode),
          "truncation_sweep: concept has no hidden representation to truncate");
  const int hidden = cm.mapper.cfg.hidden;
  for (int k : ks) {
    require(k >= 1 && k <= hidden, "truncation_sweep: width ", k,
            " outside [1, ", hidden, "]");
  }
  require(!concept_images.empty(),
          "truncation_sweep: no reference images to score against");

  SweepResult out;
  out.entries.reserve(ks.size());
  for (int k : ks) {
    SampleResult<float> run =
        sample_with_concept(bundle, &cm, toks, steps, guidance, k, noise_seed);
    SweepEntry e;
    e.k = k;
    e.image = decode_latent_to_image(run.latent, bundle.dcfg().latent_hw);
    e.score = image_similarity({e.image}, concept_images, fx);
    out.entries.push_back(std::move(e));
  }
  return out;
}

Image style_mix(GeneratorBundle& bundle, ConceptModel& geometry,
                ConceptModel& appearance, const TokenizedPrompt& toks,
                int steps, double guidance, double mix_start_t,
                std::vector<int> geometry_layers, uint64_t noise_seed) {
  const int blocks = bundle.dcfg().blocks;
  std::set<int> geom_set;
  for (int l : geometry_layers) {
    require(l >= 0 && l < blocks, "style_mix: layer ", l, " outside [0, ",
            blocks, ")");
    geom_set.insert(l);
  }
  if (geom_set.empty() && mix_start_t >= 999.0) {
    std::fprintf(stderr,
                 "warning: style_mix never uses the geometry concept "
                 "(no geometry layers and mix_start_t >= 999)\n");
  }
  if (static_cast<int>(geom_set.size()) == blocks && mix_start_t <= 0.0) {
    std::fprintf(stderr,
                 "warning: style_mix never uses the appearance concept "
                 "(all layers are geometry layers)\n");
  }

  CondBuilder<float> mix_builder = [&](Tape<float>& tape, int t) {
    std::vector<LayerConditioning> geom =
        build_conditioning(tape, bundle, &geometry, toks,
                           static_cast<double>(t), std::nullopt);
    if (static_cast<double>(t) > mix_start_t) {
      return geom;  // early steps: geometry everywhere
    }
    std::vector<LayerConditioning> app =
        build_conditioning(tape, bundle, &appearance, toks,
                           static_cast<double>(t), std::nullopt);
    std::vector<LayerConditioning> mixed;
    mixed.reserve(geom.size());
    for (int l = 0; l < blocks; ++l) {
      mixed.push_back(geom_set.count(l) ? geom[l] : app[l]);
    }
    return mixed;
  };

  SampleResult<float> run =
      run_with_builder(bundle, mix_builder, steps, guidance, noise_seed);
  return decode_latent_to_image(run.latent, bundle.dcfg().latent_hw);
}

std::vector<int> default_geometry_layers(const DenoiserConfig& cfg) {
  if (cfg.blocks == 1) return {0};
  return {0, cfg.blocks - 1};
}

void save_sweep_csv(const std::string& path, const SweepResult& sweep) {
  std::ostringstream csv;
  csv << "k,score\n";
  for (const SweepEntry& e : sweep.entries) {
    csv << e.k << ',' << format_score(e.score) << '\n';
  }
  write_text_atomic(path, csv.str());
}

void save_decompose_csv(const std::string& path,
                        const std::vector<std::pair<double, double>>& rows) {
  std::ostringstream csv;
  csv << "t,score\n";
  for (const auto& [t, score] : rows) {
    csv << format_score(t) << ',' << format_score(score) << '\n';
  }
  write_text_atomic(path, csv.str());
}

Image tile_images(const std::vector<Image>& images, int cols) {
  require(!images.empty(), "tile_images: no images");
  require(cols >= 1, "tile_images: cols must be positive");
  const int w = images.front().width;
  const int h = images.front().height;
  for (const Image& img : images) {
    require(img.width == w && img.height == h,
            "tile_images: images must share dimensions");
  }
  const int n = static_cast<int>(images.size());
  const int c = std::min(cols, n);
  const int rows = (n + c - 1) / c;
  Image grid(c * w, rows * h);
  for (int i = 0; i < n; ++i) {
    const int ox = (i % c) * w;
    const int oy = (i / c) * h;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const float* src = images[i].pixel(x, y);
        float* dst = grid.pixel(ox + x, oy + y);
        dst[0] = src[0];
        dst[1] = src[1];
        dst[2] = src[2];
      }
    }
  }
  return grid;
}

}  // namespace neti
