#include "neti/bundle.hpp"

#include <filesystem>
#include <fstream>
#include <utility>

#include <nlohmann/json.hpp>

#include "neti/sha256.hpp"

namespace neti {

using nlohmann::json;

namespace {

json parse_json(const std::string& text, const std::string& context) {
  json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) {
    fail(context, ": invalid JSON");
  }
  return j;
}

std::vector<std::pair<std::string, Tensor<float>*>> textenc_named(
    TextEncoderParams<float>& p) {
  std::vector<std::pair<std::string, Tensor<float>*>> out;
  out.emplace_back("textenc.table", &p.table);
  out.emplace_back("textenc.pos", &p.pos);
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    auto& b = p.blocks[i];
    std::string pre = msg_cat("textenc.blk", i, ".");
    out.emplace_back(pre + "ln1.g", &b.ln1_g);
    out.emplace_back(pre + "ln1.b", &b.ln1_b);
    out.emplace_back(pre + "wq", &b.wq);
    out.emplace_back(pre + "wk", &b.wk);
    out.emplace_back(pre + "wv", &b.wv);
    out.emplace_back(pre + "wo", &b.wo);
    out.emplace_back(pre + "ln2.g", &b.ln2_g);
    out.emplace_back(pre + "ln2.b", &b.ln2_b);
    out.emplace_back(pre + "ffn1.w", &b.ffn1_w);
    out.emplace_back(pre + "ffn1.b", &b.ffn1_b);
    out.emplace_back(pre + "ffn2.w", &b.ffn2_w);
    out.emplace_back(pre + "ffn2.b", &b.ffn2_b);
  }
  out.emplace_back("textenc.lnf.g", &p.lnf_g);
  out.emplace_back("textenc.lnf.b", &p.lnf_b);
  return out;
}

json bundle_metadata(const GeneratorBundle& b) {
  json meta;
  meta["format"] = "generator_bundle";
  meta["version"] = 1;
  meta["timesteps"] = b.schedule.T;
  meta["beta_start"] = b.beta_start;
  meta["beta_end"] = b.beta_end;
  meta["uncond_trained"] = b.uncond_trained;
  meta["text"] = {{"context", b.tcfg().context},
                  {"dim", b.tcfg().dim},
                  {"blocks", b.tcfg().blocks},
                  {"ffn_mult", b.tcfg().ffn_mult}};
  meta["denoiser"] = {{"latent_hw", b.dcfg().latent_hw},
                      {"channels_in", b.dcfg().channels_in},
                      {"channels", b.dcfg().channels},
                      {"attn_dim", b.dcfg().attn_dim},
                      {"blocks", b.dcfg().blocks},
                      {"temb_dim", b.dcfg().temb_dim},
                      {"cond_dim", b.dcfg().cond_dim},
                      {"context", b.dcfg().context}};
  meta["vocab"] = b.vocab.tokens;
  return meta;
}

// Linear layer packed as one section: weight rows followed by one bias row.
WeightSection pack_linear(const std::string& name, const Tensor<float>& w,
                          const Tensor<float>& bias) {
  require(bias.rows == 1 && bias.cols == w.cols, "pack_linear('", name,
          "'): bias shape mismatch");
  Tensor<float> packed(w.rows + 1, w.cols);
  std::copy(w.data.begin(), w.data.end(), packed.data.begin());
  std::copy(bias.data.begin(), bias.data.end(),
            packed.data.begin() + static_cast<long>(w.data.size()));
  return section_from_tensor(name, packed);
}

void unpack_linear(const WeightSection& s, Tensor<float>& w, Tensor<float>& bias) {
  require(s.dims.size() == 2, "section '", s.name, "': expected rank 2");
  require(static_cast<int>(s.dims[0]) == w.rows + 1 &&
              static_cast<int>(s.dims[1]) == w.cols,
          "section '", s.name, "': shape ", s.dims[0], "x", s.dims[1],
          " does not match ", w.rows + 1, "x", w.cols);
  std::copy(s.data.begin(), s.data.begin() + static_cast<long>(w.data.size()),
            w.data.begin());
  std::copy(s.data.begin() + static_cast<long>(w.data.size()), s.data.end(),
            bias.data.begin());
}

// LayerNorm affine packed as one section: [gamma; beta].
WeightSection pack_affine(const std::string& name, const Tensor<float>& g,
                          const Tensor<float>& bta) {
  require(g.rows == 1 && bta.rows == 1 && g.cols == bta.cols, "pack_affine('",
          name, "'): shape mismatch");
  Tensor<float> packed(2, g.cols);
  std::copy(g.data.begin(), g.data.end(), packed.data.begin());
  std::copy(bta.data.begin(), bta.data.end(),
            packed.data.begin() + static_cast<long>(g.data.size()));
  return section_from_tensor(name, packed);
}

void unpack_affine(const WeightSection& s, Tensor<float>& g, Tensor<float>& bta) {
  require(s.dims.size() == 2 && static_cast<int>(s.dims[0]) == 2 &&
              static_cast<int>(s.dims[1]) == g.cols,
          "section '", s.name, "': expected 2x", g.cols);
  std::copy(s.data.begin(), s.data.begin() + static_cast<long>(g.data.size()),
            g.data.begin());
  std::copy(s.data.begin() + static_cast<long>(g.data.size()), s.data.end(),
            bta.data.begin());
}

}  // namespace

// ---------------------------------------------------------------------------
// Inversion modes
// ---------------------------------------------------------------------------

const char* inversion_mode_name(InversionMode m) {
  switch (m) {
    case InversionMode::Neti: return "neti";
    case InversionMode::NetiBypass: return "neti_bypass";
    case InversionMode::TiBaseline: return "ti_baseline";
    case InversionMode::AblateNoTime: return "ablate_no_time";
    case InversionMode::AblateNoSpace: return "ablate_no_space";
    case InversionMode::AblateNeither: return "ablate_neither";
  }
  return "?";
}

InversionMode inversion_mode_from_name(const std::string& s) {
  if (s == "neti") return InversionMode::Neti;
  if (s == "neti_bypass") return InversionMode::NetiBypass;
  if (s == "ti_baseline") return InversionMode::TiBaseline;
  if (s == "ablate_no_time") return InversionMode::AblateNoTime;
  if (s == "ablate_no_space") return InversionMode::AblateNoSpace;
  if (s == "ablate_neither") return InversionMode::AblateNeither;
  fail("unknown inversion mode '", s,
       "' (expected neti, neti_bypass, ti_baseline, ablate_no_time, "
       "ablate_no_space, or ablate_neither)");
}

// ---------------------------------------------------------------------------
// Generator bundle
// ---------------------------------------------------------------------------

void GeneratorBundle::freeze() {
  text.set_requires_grad(false);
  den.set_requires_grad(false);
  // Drop any gradient buffers left behind by training; a frozen parameter
  // must show exactly zero gradient from here on.
  for (Tensor<float>* p : text.trainable()) {
    p->grad.clear();
  }
  for (auto& [name, p] : den.trainable()) {
    p->grad.clear();
  }
}

GeneratorBundle make_toy_bundle(uint64_t seed) {
  GeneratorBundle b;
  b.schedule = NoiseSchedule::linear(1000, b.beta_start, b.beta_end);
  b.vocab = Vocab::builtin();
  TextEncoderConfig tc;
  DenoiserConfig dc;
  require(tc.dim == dc.cond_dim && tc.context == dc.context,
          "text encoder and denoiser disagree on conditioning shape");
  b.text = init_textenc<float>(tc, b.vocab.size(), Rng::mix64(seed + 1));
  b.den = init_denoiser<float>(dc, Rng::mix64(seed + 2));
  return b;
}

std::vector<WeightSection> bundle_sections(GeneratorBundle& b) {
  std::vector<WeightSection> out;
  for (auto& [name, t] : textenc_named(b.text)) {
    out.push_back(section_from_tensor(name, *t));
  }
  for (auto& [name, t] : b.den.trainable()) {
    out.push_back(section_from_tensor(name, *t));
  }
  return out;
}

std::string bundle_hash(GeneratorBundle& b) {
  std::vector<uint8_t> bytes = encode_weight_sections(bundle_sections(b));
  std::string meta = bundle_metadata(b).dump();
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  h.update(meta.data(), meta.size());
  return Sha256::hex(h.finish());
}

void save_bundle(const std::string& path, GeneratorBundle& b) {
  save_weight_file(path, bundle_sections(b));
  write_text_atomic(path + ".json", bundle_metadata(b).dump(2) + "\n");
}

GeneratorBundle load_bundle(const std::string& path) {
  const std::string sidecar = path + ".json";
  json meta = parse_json(read_text_file(sidecar), sidecar);
  require(meta.value("format", "") == "generator_bundle", sidecar,
          ": not a generator bundle");
  require(meta.value("version", 0) == 1, sidecar, ": unsupported version");

  GeneratorBundle b;
  b.beta_start = meta.at("beta_start").get<double>();
  b.beta_end = meta.at("beta_end").get<double>();
  b.schedule = NoiseSchedule::linear(meta.at("timesteps").get<int>(),
                                     b.beta_start, b.beta_end);
  b.uncond_trained = meta.at("uncond_trained").get<bool>();
  b.vocab = Vocab::from_tokens(meta.at("vocab").get<std::vector<std::string>>());

  TextEncoderConfig tc;
  const json& jt = meta.at("text");
  tc.context = jt.at("context").get<int>();
  tc.dim = jt.at("dim").get<int>();
  tc.blocks = jt.at("blocks").get<int>();
  tc.ffn_mult = jt.at("ffn_mult").get<int>();

  DenoiserConfig dc;
  const json& jd = meta.at("denoiser");
  dc.latent_hw = jd.at("latent_hw").get<int>();
  dc.channels_in = jd.at("channels_in").get<int>();
  dc.channels = jd.at("channels").get<int>();
  dc.attn_dim = jd.at("attn_dim").get<int>();
  dc.blocks = jd.at("blocks").get<int>();
  dc.temb_dim = jd.at("temb_dim").get<int>();
  dc.cond_dim = jd.at("cond_dim").get<int>();
  dc.context = jd.at("context").get<int>();

  b.text = init_textenc<float>(tc, b.vocab.size(), 0);
  b.den = init_denoiser<float>(dc, 0);

  std::vector<WeightSection> sections = load_weight_file(path);
  std::vector<std::string> expected;
  auto named_text = textenc_named(b.text);
  auto named_den = b.den.trainable();
  for (auto& [name, t] : named_text) {
    (void)t;
    expected.push_back(name);
  }
  for (auto& [name, t] : named_den) {
    (void)t;
    expected.push_back(name);
  }
  check_section_names(sections, expected, path);
  for (auto& [name, t] : named_text) {
    tensor_from_section(find_section(sections, name), *t);
  }
  for (auto& [name, t] : named_den) {
    tensor_from_section(find_section(sections, name), *t);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Concept model
// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, Tensor<float>*>> ConceptModel::trainable_named() {
  std::vector<std::pair<std::string, Tensor<float>*>> out;
  if (mode == InversionMode::TiBaseline) {
    out.emplace_back("ti.v", &ti_vector);
    return out;
  }
  if (mapper.cfg.train_anchor_matrix) {
    out.emplace_back("pe.E", &mapper.pe_e);
  }
  out.emplace_back("fc1.w", &mapper.fc1_w);
  out.emplace_back("fc1.b", &mapper.fc1_b);
  out.emplace_back("ln1.g", &mapper.ln1_g);
  out.emplace_back("ln1.b", &mapper.ln1_b);
  out.emplace_back("fc2.w", &mapper.fc2_w);
  out.emplace_back("fc2.b", &mapper.fc2_b);
  out.emplace_back("ln2.g", &mapper.ln2_g);
  out.emplace_back("ln2.b", &mapper.ln2_b);
  out.emplace_back("head_base.w", &mapper.head_base_w);
  out.emplace_back("head_base.b", &mapper.head_base_b);
  if (mapper.cfg.bypass) {
    out.emplace_back("head_pass.w", &mapper.head_pass_w);
    out.emplace_back("head_pass.b", &mapper.head_pass_b);
  }
  return out;
}

void ConceptModel::set_requires_grad(bool on) {
  for (auto& [name, t] : trainable_named()) {
    (void)name;
    t->requires_grad = on;
    if (!on) {
      t->grad.clear();
    }
  }
}

ConceptModel make_concept_model(InversionMode mode, GeneratorBundle& bundle,
                                const MapperConfig& base_cfg,
                                const std::string& super_category, double alpha,
                                uint64_t seed) {
  require(bundle.vocab.contains(super_category),
          "super-category token '", super_category, "' is not in the vocabulary");
  require(bundle.vocab.id_of(super_category) != bundle.vocab.placeholder_id &&
              bundle.vocab.id_of(super_category) != bundle.vocab.pad_id,
          "super-category must be an ordinary vocabulary token");
  ConceptModel c;
  c.mode = mode;
  c.super_category = super_category;
  c.alpha = alpha;
  if (mode == InversionMode::TiBaseline) {
    c.ti_vector = super_embedding(bundle, super_category);
    return c;
  }
  MapperConfig cfg = base_cfg;
  cfg.bypass = (mode == InversionMode::NetiBypass);
  cfg.query_mode = query_mode_for(mode);
  require(cfg.out_dim == bundle.tcfg().dim,
          "mapper out_dim ", cfg.out_dim, " must match the text encoder dim ",
          bundle.tcfg().dim);
  require(cfg.num_layers == bundle.dcfg().blocks,
          "mapper num_layers ", cfg.num_layers,
          " must match the denoiser's cross-attention layer count ",
          bundle.dcfg().blocks);
  c.mapper = init_mapper<float>(cfg, seed);
  return c;
}

void save_concept(const std::string& path, ConceptModel& c) {
  json meta;
  meta["format"] = "concept_model";
  meta["version"] = 1;
  meta["mode"] = inversion_mode_name(c.mode);
  meta["alpha"] = c.alpha;
  meta["super_category"] = c.super_category;

  std::vector<WeightSection> sections;
  if (c.mode == InversionMode::TiBaseline) {
    sections.push_back(section_from_tensor("ti.v", c.ti_vector));
  } else {
    const MapperConfig& m = c.mapper.cfg;
    meta["mapper"] = {{"num_layers", m.num_layers},
                      {"time_anchors", m.time_anchors},
                      {"freqs", m.freqs},
                      {"hidden", m.hidden},
                      {"out_dim", m.out_dim},
                      {"sigma_t", m.sigma_t},
                      {"sigma_l", m.sigma_l},
                      {"bypass", m.bypass},
                      {"train_anchor_matrix", m.train_anchor_matrix},
                      {"dropout_prob", m.dropout_prob},
                      {"query_mode", query_mode_name(m.query_mode)}};
    sections.push_back(section_from_tensor("pe.W", c.mapper.pe_w));
    sections.push_back(section_from_tensor("pe.E", c.mapper.pe_e));
    sections.push_back(pack_linear("fc1", c.mapper.fc1_w, c.mapper.fc1_b));
    sections.push_back(pack_affine("ln1", c.mapper.ln1_g, c.mapper.ln1_b));
    sections.push_back(pack_linear("fc2", c.mapper.fc2_w, c.mapper.fc2_b));
    sections.push_back(pack_affine("ln2", c.mapper.ln2_g, c.mapper.ln2_b));
    sections.push_back(
        pack_linear("head_base", c.mapper.head_base_w, c.mapper.head_base_b));
    if (c.mapper.cfg.bypass) {
      sections.push_back(
          pack_linear("head_pass", c.mapper.head_pass_w, c.mapper.head_pass_b));
    }
  }
  save_weight_file(path, sections);
  write_text_atomic(path + ".json", meta.dump(2) + "\n");
}

ConceptModel load_concept(const std::string& path) {
  const std::string sidecar = path + ".json";
  json meta = parse_json(read_text_file(sidecar), sidecar);
  require(meta.value("format", "") == "concept_model", sidecar,
          ": not a concept model");
  require(meta.value("version", 0) == 1, sidecar, ": unsupported version");

  ConceptModel c;
  c.mode = inversion_mode_from_name(meta.at("mode").get<std::string>());
  c.alpha = meta.at("alpha").get<double>();
  c.super_category = meta.at("super_category").get<std::string>();

  std::vector<WeightSection> sections = load_weight_file(path);
  if (c.mode == InversionMode::TiBaseline) {
    check_section_names(sections, {"ti.v"}, path);
    const WeightSection& s = find_section(sections, "ti.v");
    require(s.dims.size() == 2 && s.dims[0] == 1, "section 'ti.v': expected 1xD");
    c.ti_vector = Tensor<float>(1, static_cast<int>(s.dims[1]));
    tensor_from_section(s, c.ti_vector);
    return c;
  }

  MapperConfig cfg;
  const json& jm = meta.at("mapper");
  cfg.num_layers = jm.at("num_layers").get<int>();
  cfg.time_anchors = jm.at("time_anchors").get<int>();
  cfg.freqs = jm.at("freqs").get<int>();
  cfg.hidden = jm.at("hidden").get<int>();
  cfg.out_dim = jm.at("out_dim").get<int>();
  cfg.sigma_t = jm.at("sigma_t").get<double>();
  cfg.sigma_l = jm.at("sigma_l").get<double>();
  cfg.bypass = jm.at("bypass").get<bool>();
  cfg.train_anchor_matrix = jm.at("train_anchor_matrix").get<bool>();
  cfg.dropout_prob = jm.at("dropout_prob").get<double>();
  cfg.query_mode = query_mode_from_name(jm.at("query_mode").get<std::string>());
  cfg.validate();

  // Allocate at the recorded shape, then fill from sections.
  c.mapper = init_mapper<float>(cfg, 0);
  std::vector<std::string> expected = {"pe.W", "pe.E", "fc1", "ln1",
                                       "fc2",  "ln2",  "head_base"};
  if (cfg.bypass) {
    expected.push_back("head_pass");
  }
  check_section_names(sections, expected, path);
  tensor_from_section(find_section(sections, "pe.W"), c.mapper.pe_w);
  tensor_from_section(find_section(sections, "pe.E"), c.mapper.pe_e);
  unpack_linear(find_section(sections, "fc1"), c.mapper.fc1_w, c.mapper.fc1_b);
  unpack_affine(find_section(sections, "ln1"), c.mapper.ln1_g, c.mapper.ln1_b);
  unpack_linear(find_section(sections, "fc2"), c.mapper.fc2_w, c.mapper.fc2_b);
  unpack_affine(find_section(sections, "ln2"), c.mapper.ln2_g, c.mapper.ln2_b);
  unpack_linear(find_section(sections, "head_base"), c.mapper.head_base_w,
                c.mapper.head_base_b);
  if (cfg.bypass) {
    unpack_linear(find_section(sections, "head_pass"), c.mapper.head_pass_w,
                  c.mapper.head_pass_b);
  }
  return c;
}

Tensor<float> super_embedding(const GeneratorBundle& b, const std::string& token) {
  const int id = b.vocab.id_of(token);
  const int D = b.tcfg().dim;
  Tensor<float> v(1, D);
  for (int j = 0; j < D; ++j) {
    v.at(0, j) = b.text.table.at(id, j);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Conditioning
// ---------------------------------------------------------------------------

std::vector<LayerConditioning> build_conditioning(
    Tape<float>& tape, GeneratorBundle& bundle, ConceptModel* cm,
    const TokenizedPrompt& toks, double t, std::optional<int> truncation) {
  const int L = bundle.dcfg().blocks;
  std::vector<LayerConditioning> cond;
  cond.reserve(static_cast<size_t>(L));

  if (!toks.placeholder_pos) {
    Value e = encode_prompt(tape, bundle.text, toks);
    for (int l = 0; l < L; ++l) {
      cond.push_back(LayerConditioning{e, e});
    }
    return cond;
  }

  require(cm != nullptr,
          "prompt contains the placeholder but no concept model was given");

  if (cm->mode == InversionMode::TiBaseline) {
    require(cm->ti_vector.rows == 1 &&
                cm->ti_vector.cols == bundle.tcfg().dim,
            "ti_baseline vector must be 1 x ", bundle.tcfg().dim);
    Value inj = tape.leaf(cm->ti_vector);
    Value e = encode_prompt(tape, bundle.text, toks, inj);
    for (int l = 0; l < L; ++l) {
      cond.push_back(LayerConditioning{e, e});
    }
    return cond;
  }

  require(cm->mapper.cfg.num_layers == L,
          "cm mapper serves ", cm->mapper.cfg.num_layers,
          " layers but the denoiser has ", L);
  const Tensor<float> v_super =
      super_embedding(bundle, cm->super_category);

  // When the layer input is fixed, every layer's query is identical, so one
  // encoder pass serves all layers.
  const QueryMode qm = cm->mapper.cfg.query_mode;
  const bool shared_layers =
      (qm == QueryMode::FixedSpace || qm == QueryMode::FixedBoth);
  const int distinct = shared_layers ? 1 : L;

  for (int l = 0; l < distinct; ++l) {
    MapperQueryResult q =
        mapper_forward(tape, cm->mapper, t, l, truncation, v_super);
    Value key = encode_prompt(tape, bundle.text, toks, q.v_base);
    Value value = key;
    if (cm->mapper.cfg.bypass) {
      value = mix_bypass(tape, key, *toks.placeholder_pos, q.v_pass,
                         cm->alpha);
    }
    cond.push_back(LayerConditioning{key, value});
  }
  while (static_cast<int>(cond.size()) < L) {
    cond.push_back(cond.front());
  }
  return cond;
}

CachedConditioning<float> materialize_conditioning(
    GeneratorBundle& bundle, ConceptModel* cm, const TokenizedPrompt& toks,
    double t, std::optional<int> truncation) {
  Tape<float> tape;
  std::vector<LayerConditioning> cond =
      build_conditioning(tape, bundle, cm, toks, t, truncation);
  CachedConditioning<float> out;
  out.kv.reserve(cond.size());
  for (const LayerConditioning& lc : cond) {
    out.kv.emplace_back(tape.val(lc.key), tape.val(lc.value));
  }
  return out;
}

CachedConditioning<float> uncond_conditioning(GeneratorBundle& bundle) {
  TokenizedPrompt empty = tokenize("", bundle.vocab, bundle.tcfg().context);
  return materialize_conditioning(bundle, nullptr, empty, 0.0, std::nullopt);
}

CondBuilder<float> concept_builder(GeneratorBundle& bundle, ConceptModel* cm,
                                   const TokenizedPrompt& toks,
                                   std::optional<int> truncation) {
  GeneratorBundle* bp = &bundle;
  const TokenizedPrompt* tp = &toks;
  return [bp, cm, tp, truncation](Tape<float>& tape, int t) {
    return build_conditioning(tape, *bp, cm, *tp, static_cast<double>(t),
                              truncation);
  };
}

SampleResult<float> sample_with_concept(GeneratorBundle& bundle,
                                        ConceptModel* cm,
                                        const TokenizedPrompt& toks, int steps,
                                        double guidance,
                                        std::optional<int> truncation,
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
  return sample_latent<float>(cfg, bundle.den, bundle.schedule,
                              concept_builder(bundle, cm, toks, truncation),
                              up, bundle.uncond_trained, steps, guidance, init);
}

}  // namespace neti
