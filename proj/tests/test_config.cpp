#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <string>

#include "neti/mapper.hpp"
#include "neti/runconfig.hpp"
#include "neti/weightfile.hpp"

using neti::FlagOverrides;
using neti::resolve_config;
using neti::RunConfig;

namespace {

std::string temp_config(const std::string& name, const std::string& body) {
  const std::string path =
      (std::filesystem::temp_directory_path() / ("neti_cfg_" + name + ".json"))
          .string();
  neti::write_text_atomic(path, body);
  return path;
}

}  // namespace

TEST_CASE("toy preset defaults") {
  const RunConfig cfg = resolve_config({});
  CHECK(cfg.preset == "toy");
  CHECK(cfg.context == 12);
  CHECK(cfg.dim == 64);
  CHECK(cfg.layers == 4);
  CHECK(cfg.hidden == 128);
  CHECK(cfg.freqs == 64);
  CHECK(cfg.time_anchors == 10);
  CHECK(cfg.alpha == 0.2);
  CHECK(cfg.guidance == 1.0);
  CHECK(cfg.sample_steps == 50);
  CHECK(cfg.train_steps == 500);
  CHECK(cfg.batch_size == 2);
  CHECK(cfg.grad_accum == 4);
  CHECK(cfg.base_lr == 0.001);
  CHECK(cfg.dropout_prob == 0.5);
  CHECK_FALSE(cfg.bypass);
  CHECK_FALSE(cfg.truncation.has_value());
}

TEST_CASE("paper preset dimensions and sampling hyperparameters") {
  FlagOverrides f;
  f.preset = "paper";
  const RunConfig cfg = resolve_config(f);
  CHECK(cfg.context == 77);
  CHECK(cfg.dim == 768);
  CHECK(cfg.layers == 16);
  CHECK(cfg.hidden == 128);
  CHECK(cfg.freqs == 1024);
  CHECK(cfg.mapper_config().anchors() == 160);
  CHECK(cfg.alpha == 0.2);
  CHECK(cfg.guidance == 7.5);
  CHECK(cfg.sample_steps == 50);
}

TEST_CASE("unknown preset is rejected") {
  FlagOverrides f;
  f.preset = "huge";
  CHECK_THROWS(resolve_config(f));
}

TEST_CASE("flags override file, file overrides preset") {
  const std::string path = temp_config(
      "prec", R"({"preset":"paper","guidance":3.5,"seed":11,"alpha":0.4})");
  FlagOverrides f;
  f.config = path;

  // file overrides the paper preset's guidance and alpha
  RunConfig cfg = resolve_config(f);
  CHECK(cfg.preset == "paper");
  CHECK(cfg.guidance == 3.5);
  CHECK(cfg.alpha == 0.4);
  CHECK(cfg.seed == 11);
  CHECK(cfg.dim == 768);  // untouched preset value survives

  // flags override the file
  f.guidance = 9.0;
  f.seed = 77;
  cfg = resolve_config(f);
  CHECK(cfg.guidance == 9.0);
  CHECK(cfg.seed == 77);
  CHECK(cfg.alpha == 0.4);  // file value survives where no flag given

  // a preset flag beats the file's preset but file keys still apply on top
  f.preset = "toy";
  cfg = resolve_config(f);
  CHECK(cfg.preset == "toy");
  CHECK(cfg.dim == 64);
  CHECK(cfg.alpha == 0.4);
}

TEST_CASE("unknown config keys are rejected") {
  const std::string path = temp_config("unk", R"({"guidanse": 3.0})");
  FlagOverrides f;
  f.config = path;
  CHECK_THROWS_WITH_AS(resolve_config(f),
                       doctest::Contains("unknown key 'guidanse'"),
                       std::runtime_error);
}

TEST_CASE("config type mismatches are rejected") {
  FlagOverrides f;
  f.config = temp_config("ty1", R"({"guidance":"high"})");
  CHECK_THROWS(resolve_config(f));
  f.config = temp_config("ty2", R"({"train_steps": 2.5})");
  CHECK_THROWS(resolve_config(f));
  f.config = temp_config("ty3", R"({"bypass": 1})");
  CHECK_THROWS(resolve_config(f));
  f.config = temp_config("ty4", R"({"mode": 3})");
  CHECK_THROWS(resolve_config(f));
  f.config = temp_config("ty5", R"({"ks": [8, "x"]})");
  CHECK_THROWS(resolve_config(f));
  f.config = temp_config("ty6", R"({"seed": -4})");
  CHECK_THROWS(resolve_config(f));
  f.config = temp_config("ty7", R"(["not","an","object"])");
  CHECK_THROWS(resolve_config(f));
  f.config = temp_config("ty8", R"({broken json)");
  CHECK_THROWS(resolve_config(f));
  // integers are acceptable where a float is expected
  f.config = temp_config("ty9", R"({"guidance": 2})");
  CHECK(resolve_config(f).guidance == 2.0);
}

TEST_CASE("effective_lr must equal base_lr * batch * accum") {
  FlagOverrides f;
  f.config = temp_config("lr1", R"({"effective_lr": 0.008})");
  const RunConfig good = resolve_config(f);
  CHECK(good.train_config().effective_lr == 0.008);

  f.config = temp_config("lr2", R"({"effective_lr": 0.004})");
  CHECK_THROWS(resolve_config(f));

  // identity re-checked against file-provided batch sizes
  f.config =
      temp_config("lr3", R"({"effective_lr":0.004,"grad_accum":2})");
  CHECK(resolve_config(f).grad_accum == 2);
}

TEST_CASE("derived effective lr when not given") {
  const RunConfig cfg = resolve_config({});
  CHECK(cfg.train_config().effective_lr ==
        doctest::Approx(0.001 * 2 * 4).epsilon(1e-15));
}

TEST_CASE("validation rejects out-of-range values") {
  FlagOverrides f;
  f.truncation = 0;
  CHECK_THROWS(resolve_config(f));
  f.truncation = 129;
  CHECK_THROWS(resolve_config(f));
  f.truncation = 128;
  CHECK_NOTHROW(resolve_config(f));

  FlagOverrides g;
  g.mode = "netti";
  CHECK_THROWS(resolve_config(g));
  g.mode = "ablate_no_time";
  CHECK_NOTHROW(resolve_config(g));

  FlagOverrides h;
  h.guidance = -1.0;
  CHECK_THROWS(resolve_config(h));

  FlagOverrides ft;
  ft.fixed_t = std::vector<double>{1000.0};
  CHECK_THROWS(resolve_config(ft));
  ft.fixed_t = std::vector<double>{999.0, 0.0};
  CHECK_NOTHROW(resolve_config(ft));
}

TEST_CASE("mapper config carries the run geometry") {
  FlagOverrides f;
  f.preset = "paper";
  f.bypass = true;
  const neti::MapperConfig mc = resolve_config(f).mapper_config();
  CHECK(mc.num_layers == 16);
  CHECK(mc.freqs == 1024);
  CHECK(mc.hidden == 128);
  CHECK(mc.out_dim == 768);
  CHECK(mc.anchors() == 160);
  CHECK(mc.bypass);
  CHECK(mc.train_anchor_matrix);
  CHECK(neti::param_count(mc) == 563456);
}

TEST_CASE("resolved config round-trips through its JSON form") {
  const std::string path = temp_config(
      "rt", R"({"preset":"paper","guidance":2.25,"ks":[4,8],"truncation":16})");
  FlagOverrides f;
  f.config = path;
  f.seed = 123456789012345ull;
  const RunConfig a = resolve_config(f);

  const std::string again =
      temp_config("rt2", a.to_json().dump(2) + "\n");
  FlagOverrides g;
  g.config = again;
  const RunConfig b = resolve_config(g);

  CHECK(b.preset == a.preset);
  CHECK(b.guidance == a.guidance);
  CHECK(b.seed == a.seed);
  CHECK(b.ks == a.ks);
  CHECK(b.truncation == a.truncation);
  CHECK(b.dim == a.dim);
  CHECK(b.to_json() == a.to_json());
}
