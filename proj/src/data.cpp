#include "neti/data.hpp"

#include "neti/weightfile.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace neti {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Rgb {
  float r, g, b;
};

const std::array<Rgb, 4>& color_values() {
  static const std::array<Rgb, 4> v = {Rgb{0.85f, 0.12f, 0.10f},   // red
                                       Rgb{0.10f, 0.65f, 0.20f},   // green
                                       Rgb{0.15f, 0.25f, 0.85f},   // blue
                                       Rgb{0.95f, 0.85f, 0.15f}};  // yellow
  return v;
}

const std::array<Rgb, 4>& background_values() {
  static const std::array<Rgb, 4> v = {Rgb{0.97f, 0.97f, 0.97f},   // white
                                       Rgb{0.06f, 0.06f, 0.06f},   // black
                                       Rgb{0.50f, 0.50f, 0.50f},   // gray
                                       Rgb{0.82f, 0.70f, 0.55f}};  // tan
  return v;
}

struct ShapePose {
  double cx, cy, s;
};

ShapePose jitter_pose(Rng& rng) {
  ShapePose p;
  p.cx = kImageSide / 2.0 + rng.uniform(-2.0, 2.0);
  p.cy = kImageSide / 2.0 + rng.uniform(-2.0, 2.0);
  p.s = rng.uniform(8.5, 11.5);
  return p;
}

bool inside_shape(int shape, const ShapePose& p, double x, double y) {
  const double dx = x - p.cx;
  const double dy = y - p.cy;
  switch (shape) {
    case 0:  // circle
      return dx * dx + dy * dy <= p.s * p.s;
    case 1:  // square
      return std::max(std::abs(dx), std::abs(dy)) <= p.s * 0.9;
    case 2: {  // upward triangle via three half-plane tests
      const double ax = p.cx, ay = p.cy - p.s;
      const double bx = p.cx - p.s * 0.95, by = p.cy + p.s * 0.8;
      const double cx = p.cx + p.s * 0.95, cy = p.cy + p.s * 0.8;
      auto side = [&](double x1, double y1, double x2, double y2) {
        return (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1);
      };
      const double d1 = side(ax, ay, bx, by);
      const double d2 = side(bx, by, cx, cy);
      const double d3 = side(cx, cy, ax, ay);
      const bool has_neg = (d1 < 0) || (d2 < 0) || (d3 < 0);
      const bool has_pos = (d1 > 0) || (d2 > 0) || (d3 > 0);
      return !(has_neg && has_pos);
    }
    case 3:  // cross
      return (std::abs(dx) <= p.s * 0.35 && std::abs(dy) <= p.s) ||
             (std::abs(dy) <= p.s * 0.35 && std::abs(dx) <= p.s);
    default:
      fail("unknown shape index ", shape);
  }
}

// Separable 3x3 binomial blur with edge clamp. Keeps flat regions exact and
// turns hard silhouette steps into short ramps the 16x16 latent can carry.
void soften(Image& img) {
  const int W = img.width, H = img.height;
  Image tmp = img;
  auto clamp = [](int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < 3; ++c) {
        tmp.pixel(x, y)[c] = 0.25f * img.pixel(clamp(x - 1, W - 1), y)[c] +
                             0.5f * img.pixel(x, y)[c] +
                             0.25f * img.pixel(clamp(x + 1, W - 1), y)[c];
      }
    }
  }
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < 3; ++c) {
        img.pixel(x, y)[c] = 0.25f * tmp.pixel(x, clamp(y - 1, H - 1))[c] +
                             0.5f * tmp.pixel(x, y)[c] +
                             0.25f * tmp.pixel(x, clamp(y + 1, H - 1))[c];
      }
    }
  }
}

// Anti-aliased render: 4x4 subsamples per pixel; the foreground color may
// vary per subsample (checkerboard texture).
template <typename FgFn>
Image render(const Rgb& bg, int shape, const ShapePose& pose, FgFn fg_at) {
  constexpr int kSub = 4;
  Image img(kImageSide, kImageSide);
  for (int py = 0; py < kImageSide; ++py) {
    for (int px = 0; px < kImageSide; ++px) {
      double r = 0.0, g = 0.0, b = 0.0;
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const double x = px + (sx + 0.5) / kSub;
          const double y = py + (sy + 0.5) / kSub;
          if (inside_shape(shape, pose, x, y)) {
            const Rgb fg = fg_at(x, y);
            r += fg.r;
            g += fg.g;
            b += fg.b;
          } else {
            r += bg.r;
            g += bg.g;
            b += bg.b;
          }
        }
      }
      const double inv = 1.0 / (kSub * kSub);
      float* px_out = img.pixel(px, py);
      px_out[0] = static_cast<float>(r * inv);
      px_out[1] = static_cast<float>(g * inv);
      px_out[2] = static_cast<float>(b * inv);
    }
  }
  soften(img);
  return img;
}

std::string caption_for(int color, int shape, int background) {
  return msg_cat("a photo of a ", corpus_colors()[static_cast<size_t>(color)],
                 " ", corpus_shapes()[static_cast<size_t>(shape)], " on a ",
                 corpus_backgrounds()[static_cast<size_t>(background)],
                 " background");
}

std::string image_filename(int index, int digits) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%0*d.ppm", digits, index);
  return buf;
}

int attr_index(const std::vector<std::string>& values, const std::string& name,
               const std::string& what) {
  for (size_t i = 0; i < values.size(); ++i) {
    if (values[i] == name) return static_cast<int>(i);
  }
  fail("unknown ", what, " '", name, "'");
}

}  // namespace

const std::vector<std::string>& corpus_colors() {
  static const std::vector<std::string> v = {"red", "green", "blue", "yellow"};
  return v;
}

const std::vector<std::string>& corpus_shapes() {
  static const std::vector<std::string> v = {"circle", "square", "triangle",
                                             "cross"};
  return v;
}

const std::vector<std::string>& corpus_backgrounds() {
  static const std::vector<std::string> v = {"white", "black", "gray", "tan"};
  return v;
}

void ConceptDataset::validate(const Vocab& vocab, int context) const {
  require(!images.empty() && images.size() <= 6,
          "concept dataset must hold 1 to 6 images, got ", images.size());
  for (const Image& im : images) {
    require(im.width == images[0].width && im.height == images[0].height,
            "concept images must all share one size");
  }
  TokenizedPrompt toks = tokenize(caption_template, vocab, context);
  require(toks.placeholder_pos.has_value(),
          "concept caption template must contain the S* placeholder");
  require(vocab.contains(super_category), "super-category token '",
          super_category, "' is not in the vocabulary");
}

Image render_example(int color, int shape, int background, Rng& rng) {
  require(color >= 0 && color < 4 && shape >= 0 && shape < 4 &&
              background >= 0 && background < 4,
          "attribute indices must be in [0, 4)");
  const ShapePose pose = jitter_pose(rng);
  const Rgb fg = color_values()[static_cast<size_t>(color)];
  return render(background_values()[static_cast<size_t>(background)], shape,
                pose, [&](double, double) { return fg; });
}

Image render_checkerboard_square(int background, Rng& rng) {
  require(background >= 0 && background < 4, "background index out of range");
  const ShapePose pose = jitter_pose(rng);
  const Rgb red = color_values()[0];
  const Rgb blue = color_values()[2];
  return render(background_values()[static_cast<size_t>(background)],
                /*square*/ 1, pose, [&](double x, double y) {
                  const int cell = static_cast<int>(std::floor(x / 4.0)) +
                                   static_cast<int>(std::floor(y / 4.0));
                  return ((cell & 1) == 0) ? red : blue;
                });
}

ProceduralCorpus generate_corpus(uint64_t seed, int count) {
  require(count >= 64,
          "corpus needs at least 64 images (one per grammar combination), got ",
          count);
  Rng root(seed);
  std::vector<int> combos;
  combos.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    combos.push_back(i < 64 ? i : static_cast<int>(root.below(64)));
  }
  ProceduralCorpus corpus;
  corpus.seed = seed;
  corpus.examples.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int combo = combos[static_cast<size_t>(i)];
    CorpusExample ex;
    ex.color = combo / 16;
    ex.shape = (combo / 4) % 4;
    ex.background = combo % 4;
    Rng img_rng = root.fork(static_cast<uint64_t>(1000 + i));
    ex.image = render_example(ex.color, ex.shape, ex.background, img_rng);
    ex.caption = caption_for(ex.color, ex.shape, ex.background);
    corpus.examples.push_back(std::move(ex));
  }
  return corpus;
}

ConceptDataset generate_concept(uint64_t seed) {
  Rng root(seed);
  ConceptDataset ds;
  ds.seed = seed;
  ds.caption_template = "a photo of S*";
  ds.super_category = "square";
  for (int i = 0; i < 4; ++i) {
    Rng img_rng = root.fork(static_cast<uint64_t>(2000 + i));
    ds.images.push_back(render_checkerboard_square(/*white*/ 0, img_rng));
  }
  return ds;
}

void save_corpus(const std::string& dir, const ProceduralCorpus& corpus) {
  fs::create_directories(fs::path(dir) / "images");
  std::ostringstream csv;
  csv << "filename,color,shape,background,caption\n";
  for (size_t i = 0; i < corpus.examples.size(); ++i) {
    const CorpusExample& ex = corpus.examples[i];
    const std::string name = image_filename(static_cast<int>(i), 4);
    write_ppm((fs::path(dir) / "images" / name).string(), ex.image);
    csv << "images/" << name << ','
        << corpus_colors()[static_cast<size_t>(ex.color)] << ','
        << corpus_shapes()[static_cast<size_t>(ex.shape)] << ','
        << corpus_backgrounds()[static_cast<size_t>(ex.background)] << ','
        << ex.caption << '\n';
  }
  write_text_atomic((fs::path(dir) / "captions.csv").string(), csv.str());
  json meta;
  meta["format"] = "procedural_corpus";
  meta["version"] = 1;
  meta["seed"] = corpus.seed;
  meta["count"] = corpus.examples.size();
  write_text_atomic((fs::path(dir) / "corpus.json").string(), meta.dump(2) + "\n");
}

ProceduralCorpus load_corpus(const std::string& dir) {
  const std::string meta_text =
      read_text_file((fs::path(dir) / "corpus.json").string());
  json meta = json::parse(meta_text, nullptr, false);
  require(!meta.is_discarded(), dir, "/corpus.json: invalid JSON");
  require(meta.value("format", "") == "procedural_corpus", dir,
          "/corpus.json: not a corpus");
  require(meta.value("version", 0) == 1, dir, "/corpus.json: unsupported version");

  ProceduralCorpus corpus;
  corpus.seed = meta.at("seed").get<uint64_t>();

  std::istringstream csv(
      read_text_file((fs::path(dir) / "captions.csv").string()));
  std::string line;
  require(static_cast<bool>(std::getline(csv, line)), dir,
          "/captions.csv: empty file");
  require(line == "filename,color,shape,background,caption", dir,
          "/captions.csv: unexpected header '", line, "'");
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::array<std::string, 4> head;
    size_t pos = 0;
    for (auto& part : head) {
      const size_t comma = line.find(',', pos);
      require(comma != std::string::npos, dir, "/captions.csv: malformed row '",
              line, "'");
      part = line.substr(pos, comma - pos);
      pos = comma + 1;
    }
    CorpusExample ex;
    ex.color = attr_index(corpus_colors(), head[1], "color");
    ex.shape = attr_index(corpus_shapes(), head[2], "shape");
    ex.background = attr_index(corpus_backgrounds(), head[3], "background");
    ex.caption = line.substr(pos);
    ex.image = read_ppm((fs::path(dir) / head[0]).string());
    corpus.examples.push_back(std::move(ex));
  }
  require(corpus.examples.size() == meta.at("count").get<size_t>(), dir,
          ": captions.csv row count does not match corpus.json");
  return corpus;
}

void save_concept_dataset(const std::string& dir, const ConceptDataset& ds) {
  fs::create_directories(fs::path(dir) / "images");
  json meta;
  meta["format"] = "concept_dataset";
  meta["version"] = 1;
  meta["seed"] = ds.seed;
  meta["caption_template"] = ds.caption_template;
  meta["super_category"] = ds.super_category;
  json names = json::array();
  for (size_t i = 0; i < ds.images.size(); ++i) {
    const std::string name = image_filename(static_cast<int>(i), 2);
    write_ppm((fs::path(dir) / "images" / name).string(), ds.images[i]);
    names.push_back("images/" + name);
  }
  meta["images"] = names;
  write_text_atomic((fs::path(dir) / "concept.json").string(), meta.dump(2) + "\n");
}

ConceptDataset load_concept_dataset(const std::string& dir) {
  const std::string meta_text =
      read_text_file((fs::path(dir) / "concept.json").string());
  json meta = json::parse(meta_text, nullptr, false);
  require(!meta.is_discarded(), dir, "/concept.json: invalid JSON");
  require(meta.value("format", "") == "concept_dataset", dir,
          "/concept.json: not a concept dataset");
  require(meta.value("version", 0) == 1, dir,
          "/concept.json: unsupported version");
  ConceptDataset ds;
  ds.seed = meta.at("seed").get<uint64_t>();
  ds.caption_template = meta.at("caption_template").get<std::string>();
  ds.super_category = meta.at("super_category").get<std::string>();
  for (const auto& rel : meta.at("images")) {
    ds.images.push_back(
        read_ppm((fs::path(dir) / rel.get<std::string>()).string()));
  }
  return ds;
}

}  // namespace neti
