#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "neti/data.hpp"
#include "neti/evalmetrics.hpp"
#include "neti/image.hpp"
#include "neti/rng.hpp"

using neti::AttributeProbe;
using neti::FrozenFeatureExtractor;
using neti::Image;
using neti::PromptAttrs;

namespace {

std::vector<Image> renders(int color, int shape, int background, int count,
                           uint64_t seed) {
  neti::Rng rng(seed);
  std::vector<Image> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    out.push_back(neti::render_example(color, shape, background, rng));
  }
  return out;
}

// One probe trained on a large corpus, reused by every case that needs it.
AttributeProbe& probe() {
  static AttributeProbe p =
      neti::train_attribute_probe(neti::generate_corpus(501, 1024), 9001);
  return p;
}

}  // namespace

TEST_CASE("frozen features are deterministic, unit-norm, and discriminative") {
  FrozenFeatureExtractor a(9001);
  FrozenFeatureExtractor b(9001);
  neti::Rng rng(1);
  Image img = neti::render_example(0, 0, 0, rng);

  const std::vector<double> fa = a.features(img);
  const std::vector<double> fb = b.features(img);
  REQUIRE(fa.size() == FrozenFeatureExtractor::kFeatureDim);
  CHECK(fa == fb);

  double norm = 0.0;
  for (double v : fa) norm += v * v;
  CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-9));

  // A different seed defines a different descriptor.
  FrozenFeatureExtractor c(9002);
  CHECK(c.features(img) != fa);

  // Different content maps to different features.
  Image other = neti::render_example(2, 1, 1, rng);
  CHECK(a.features(other) != fa);
}

TEST_CASE("image similarity: identity, symmetry, permutation invariance") {
  FrozenFeatureExtractor fx(9001);
  std::vector<Image> set_a = renders(0, 0, 0, 6, 11);
  std::vector<Image> set_b = renders(2, 1, 1, 6, 12);

  CHECK(neti::image_similarity(set_a, set_a, fx) ==
        doctest::Approx(1.0).epsilon(1e-12));

  const double ab = neti::image_similarity(set_a, set_b, fx);
  const double ba = neti::image_similarity(set_b, set_a, fx);
  CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
  CHECK(ab >= -1.0);
  CHECK(ab <= 1.0);

  std::vector<Image> shuffled = set_a;
  std::rotate(shuffled.begin(), shuffled.begin() + 3, shuffled.end());
  CHECK(neti::image_similarity(shuffled, set_b, fx) ==
        doctest::Approx(ab).epsilon(1e-12));

  // Same-attribute views resemble each other more than a disjoint combo.
  std::vector<Image> set_a2 = renders(0, 0, 0, 6, 13);
  const double same = neti::image_similarity(set_a, set_a2, fx);
  INFO("same-combo ", same, " vs cross-combo ", ab);
  CHECK(same > ab);

  CHECK_THROWS(neti::image_similarity({}, set_b, fx));
  CHECK_THROWS(neti::image_similarity(set_a, {}, fx));
}

TEST_CASE("attribute probe reaches strong held-out accuracy on a 1024-image corpus") {
  AttributeProbe& p = probe();
  INFO("joint ", p.held_out_accuracy(), " color ", p.accuracy("color"),
       " shape ", p.accuracy("shape"), " background ",
       p.accuracy("background"));
  CHECK(p.held_out_accuracy() >= 0.9);
  // Each marginal accuracy can only beat the joint requirement.
  CHECK(p.accuracy("color") >= p.held_out_accuracy());
  CHECK(p.accuracy("shape") >= p.held_out_accuracy());
  CHECK(p.accuracy("background") >= p.held_out_accuracy());
  CHECK_THROWS(p.accuracy("texture"));

  // Fresh renders (unseen jitter) are still classified correctly most of
  // the time.
  neti::Rng rng(601);
  int joint_correct = 0;
  const int trials = 24;
  for (int i = 0; i < trials; ++i) {
    const int color = static_cast<int>(rng.below(4));
    const int shape = static_cast<int>(rng.below(4));
    const int bg = static_cast<int>(rng.below(4));
    Image img = neti::render_example(color, shape, bg, rng);
    neti::AttributePrediction pred = p.predict(img);
    if (pred.color == neti::corpus_colors()[color] &&
        pred.shape == neti::corpus_shapes()[shape] &&
        pred.background == neti::corpus_backgrounds()[bg]) {
      ++joint_correct;
    }
  }
  INFO("fresh-render joint correct ", joint_correct, "/", trials);
  CHECK(joint_correct >= (trials * 7) / 10);
}

TEST_CASE("prompt adherence scores the probed attributes against the prompt") {
  AttributeProbe& p = probe();
  std::vector<Image> red_circles_white = renders(0, 0, 0, 30, 701);

  PromptAttrs full;
  full.color = "red";
  full.shape = "circle";
  full.background = "white";
  const double match = neti::prompt_adherence(red_circles_white, full, p);
  INFO("matching adherence ", match);
  CHECK(match >= 0.8);

  PromptAttrs wrong = full;
  wrong.color = "blue";
  const double mismatch = neti::prompt_adherence(red_circles_white, wrong, p);
  INFO("mismatching adherence ", mismatch);
  CHECK(mismatch <= 0.15);

  // Checking fewer attributes can only help.
  PromptAttrs partial;
  partial.color = "red";
  CHECK(neti::prompt_adherence(red_circles_white, partial, p) >= match);

  // An empty attribute list is vacuously satisfied.
  PromptAttrs none;
  CHECK(neti::prompt_adherence(red_circles_white, none, p) == 1.0);

  CHECK_THROWS(neti::prompt_adherence({}, full, p));
}

TEST_CASE("norm statistics: order stats, bins, and degenerate inputs") {
  neti::NormStats s = neti::norm_stats({2.0, 2.0, 2.0});
  CHECK(s.median == 2.0);
  CHECK(s.min == 2.0);
  CHECK(s.max == 2.0);
  CHECK(s.bin_width == doctest::Approx(0.2).epsilon(1e-12));
  long total = std::accumulate(s.histogram.begin(), s.histogram.end(), 0L);
  CHECK(total == 3);
  CHECK(s.histogram.back() == 3);  // the single populated bin is the top one

  neti::NormStats t = neti::norm_stats({5.0, 1.0, 3.0, 2.0, 4.0});
  CHECK(t.median == 3.0);
  CHECK(t.min == 1.0);
  CHECK(t.max == 5.0);
  CHECK(t.bin_width == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(std::accumulate(t.histogram.begin(), t.histogram.end(), 0L) == 5);

  // Even count: median is the midpoint of the central pair.
  neti::NormStats e = neti::norm_stats({1.0, 3.0});
  CHECK(e.median == 2.0);

  // All-zero norms: no meaningful bins, a single absorbing one.
  neti::NormStats z = neti::norm_stats({0.0, 0.0});
  CHECK(z.median == 0.0);
  CHECK(z.bin_width == 0.0);
  REQUIRE(z.histogram.size() == 1);
  CHECK(z.histogram[0] == 2);

  // Heavy outliers hit the bin cap; the top bin absorbs the overflow.
  std::vector<double> heavy(9, 1.0);
  heavy.push_back(1000.0);
  neti::NormStats h = neti::norm_stats(heavy);
  CHECK(h.histogram.size() <= 200);
  CHECK(std::accumulate(h.histogram.begin(), h.histogram.end(), 0L) == 10);
  CHECK(h.histogram.back() == 1);

  CHECK_THROWS(neti::norm_stats({}));
}
