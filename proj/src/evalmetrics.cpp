#include "neti/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "neti/common.hpp"
#include "neti/rng.hpp"

namespace neti {

namespace {

// Channel widths of the three descriptor stages. Global pooling reads all
// three: per-channel averages of every stage plus per-channel maxima of the
// last, so fine texture statistics survive alongside global layout.
constexpr int kC1 = 16;
constexpr int kC2 = 16;
constexpr int kC3 = 16;
// Kernel sizes per stage; the 5x5 front stage gives the filters enough
// support to tell corners and texture cells from straight edges.
constexpr int kK1 = 5;
constexpr int kK2 = 3;
constexpr int kK3 = 3;
static_assert(kC1 + kC2 + 2 * kC3 == FrozenFeatureExtractor::kFeatureDim);

// Square convolution, stride 2, zero padding (k-1)/2, abs rectification, on
// HWC-packed floats. Full-wave rectification makes the pooled responses
// measure local contrast energy rather than mean brightness, which is what
// separates shapes and textures. Each output element accumulates in double
// so results do not depend on summation batching.
std::vector<float> conv_s2(const std::vector<float>& in, int h, int w, int cin,
                           const std::vector<float>& weight, int cout, int k,
                           int* out_h, int* out_w) {
  const int pad = (k - 1) / 2;
  const int oh = (h + 2 * pad - k) / 2 + 1;
  const int ow = (w + 2 * pad - k) / 2 + 1;
  const int taps = k * k;
  std::vector<float> out(static_cast<size_t>(oh) * ow * cout, 0.0f);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      for (int co = 0; co < cout; ++co) {
        double acc = 0.0;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * 2 + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * 2 + kx - pad;
            if (ix < 0 || ix >= w) continue;
            const float* px = in.data() + (static_cast<size_t>(iy) * w + ix) * cin;
            const float* wk =
                weight.data() +
                ((static_cast<size_t>(co) * cin) * k + ky) * k + kx;
            for (int ci = 0; ci < cin; ++ci) {
              acc += static_cast<double>(px[ci]) *
                     static_cast<double>(wk[static_cast<size_t>(ci) * taps]);
            }
          }
        }
        out[(static_cast<size_t>(oy) * ow + ox) * cout + co] =
            static_cast<float>(std::abs(acc));
      }
    }
  }
  *out_h = oh;
  *out_w = ow;
  return out;
}

// Random k x k filters; the first `zero_mean` output channels have each
// spatial slice centered to zero mean, so they respond only to local
// contrast (edges, texture) and ignore flat color. The remaining channels
// keep their raw draws and carry mean-color information.
std::vector<float> random_conv_weight(Rng& rng, int cout, int cin, int k,
                                      int zero_mean) {
  const int taps = k * k;
  const double stddev = std::sqrt(2.0 / (static_cast<double>(taps) * cin));
  std::vector<float> w(static_cast<size_t>(cout) * cin * taps);
  for (float& x : w) {
    x = static_cast<float>(rng.normal() * stddev);
  }
  for (int co = 0; co < zero_mean; ++co) {
    for (int ci = 0; ci < cin; ++ci) {
      float* slice = w.data() + (static_cast<size_t>(co) * cin + ci) * taps;
      double mean = 0.0;
      for (int t = 0; t < taps; ++t) mean += slice[t];
      mean /= taps;
      for (int t = 0; t < taps; ++t) {
        slice[t] = static_cast<float>(slice[t] - mean);
      }
    }
  }
  return w;
}

// One hidden-layer softmax head, fit by full-batch gradient descent with
// momentum from a seeded init. Small enough to stay a probe, nonlinear
// enough to separate shapes whose pooled statistics are not linearly
// separable. Deterministic: fixed init, fixed iteration count.
constexpr int kProbeHidden = 32;

void head_logits(const ProbeHead& head, const std::vector<double>& f,
                 std::vector<double>* hid, std::vector<double>* logits) {
  const int dim = FrozenFeatureExtractor::kFeatureDim;
  hid->assign(head.hidden, 0.0);
  for (int j = 0; j < head.hidden; ++j) {
    double z = head.b1[j];
    for (int d = 0; d < dim; ++d) {
      z += head.w1[static_cast<size_t>(d) * head.hidden + j] * f[d];
    }
    (*hid)[j] = std::tanh(z);
  }
  logits->assign(head.classes, 0.0);
  for (int k = 0; k < head.classes; ++k) {
    double z = head.b2[k];
    for (int j = 0; j < head.hidden; ++j) {
      z += head.w2[static_cast<size_t>(j) * head.classes + k] * (*hid)[j];
    }
    (*logits)[k] = z;
  }
}

ProbeHead fit_probe_head(const std::vector<std::vector<double>>& feats,
                         const std::vector<int>& labels,
                         const std::vector<size_t>& train_idx, int classes,
                         Rng rng) {
  const int dim = FrozenFeatureExtractor::kFeatureDim;
  ProbeHead head;
  head.hidden = kProbeHidden;
  head.classes = classes;
  head.w1.resize(static_cast<size_t>(dim) * head.hidden);
  for (double& x : head.w1) x = rng.normal() * std::sqrt(1.0 / dim);
  head.b1.assign(head.hidden, 0.0);
  head.w2.assign(static_cast<size_t>(head.hidden) * classes, 0.0);
  head.b2.assign(classes, 0.0);

  const double lr = 0.5;
  const double momentum = 0.9;
  const double decay = 1e-4;
  const int iters = 1500;
  const double inv_m = 1.0 / static_cast<double>(train_idx.size());

  std::vector<double> gw1(head.w1.size()), gb1(head.b1.size()),
      gw2(head.w2.size()), gb2(head.b2.size());
  std::vector<double> vw1(head.w1.size(), 0.0), vb1(head.b1.size(), 0.0),
      vw2(head.w2.size(), 0.0), vb2(head.b2.size(), 0.0);
  std::vector<double> hid, logits, dh(head.hidden);

  for (int it = 0; it < iters; ++it) {
    std::fill(gw1.begin(), gw1.end(), 0.0);
    std::fill(gb1.begin(), gb1.end(), 0.0);
    std::fill(gw2.begin(), gw2.end(), 0.0);
    std::fill(gb2.begin(), gb2.end(), 0.0);
    for (size_t idx : train_idx) {
      const std::vector<double>& f = feats[idx];
      head_logits(head, f, &hid, &logits);
      const double zmax = *std::max_element(logits.begin(), logits.end());
      double denom = 0.0;
      for (int k = 0; k < classes; ++k) {
        logits[k] = std::exp(logits[k] - zmax);
        denom += logits[k];
      }
      std::fill(dh.begin(), dh.end(), 0.0);
      for (int k = 0; k < classes; ++k) {
        double r = logits[k] / denom;
        if (k == labels[idx]) r -= 1.0;
        gb2[k] += r;
        for (int j = 0; j < head.hidden; ++j) {
          gw2[static_cast<size_t>(j) * classes + k] += hid[j] * r;
          dh[j] += head.w2[static_cast<size_t>(j) * classes + k] * r;
        }
      }
      for (int j = 0; j < head.hidden; ++j) {
        const double dz = dh[j] * (1.0 - hid[j] * hid[j]);
        gb1[j] += dz;
        for (int d = 0; d < dim; ++d) {
          gw1[static_cast<size_t>(d) * head.hidden + j] += f[d] * dz;
        }
      }
    }
    auto apply = [&](std::vector<double>& w, std::vector<double>& v,
                     const std::vector<double>& g, bool decayed) {
      for (size_t i = 0; i < w.size(); ++i) {
        v[i] = momentum * v[i] - lr * (g[i] * inv_m + (decayed ? decay * w[i] : 0.0));
        w[i] += v[i];
      }
    };
    apply(head.w1, vw1, gw1, true);
    apply(head.b1, vb1, gb1, false);
    apply(head.w2, vw2, gw2, true);
    apply(head.b2, vb2, gb2, false);
  }
  return head;
}

int head_argmax(const ProbeHead& head, const std::vector<double>& f) {
  std::vector<double> hid, logits;
  head_logits(head, f, &hid, &logits);
  int best = 0;
  for (int k = 1; k < head.classes; ++k) {
    if (logits[k] > logits[best]) best = k;
  }
  return best;
}

}  // namespace

FrozenFeatureExtractor::FrozenFeatureExtractor(uint64_t seed) : seed_(seed) {
  Rng root(seed);
  Rng r1 = root.fork(1), r2 = root.fork(2), r3 = root.fork(3);
  w1_ = random_conv_weight(r1, kC1, 3, kK1, kC1 / 2);
  w2_ = random_conv_weight(r2, kC2, kC1, kK2, kC2 / 2);
  w3_ = random_conv_weight(r3, kC3, kC2, kK3, 0);

  // Calibration pass: pooled statistics of a deterministic reference set
  // define the per-channel standardization. The reference renders come from
  // the procedural grammar with a seed derived from the extractor's own, so
  // identical seeds still give identical features.
  const uint64_t cal_seed = Rng::mix64(seed ^ 0xFEA7CA1Bull);
  const ProceduralCorpus cal = generate_corpus(cal_seed, 128);
  std::vector<std::vector<double>> pooled;
  pooled.reserve(cal.examples.size());
  for (const CorpusExample& ex : cal.examples) {
    pooled.push_back(pooled_stats(ex.image));
  }
  pool_mean_.assign(kFeatureDim, 0.0);
  pool_scale_.assign(kFeatureDim, 1.0);
  for (int d = 0; d < kFeatureDim; ++d) {
    double mean = 0.0;
    for (const auto& p : pooled) mean += p[d];
    mean /= static_cast<double>(pooled.size());
    double var = 0.0;
    for (const auto& p : pooled) var += (p[d] - mean) * (p[d] - mean);
    var /= static_cast<double>(pooled.size());
    pool_mean_[d] = mean;
    pool_scale_[d] = 1.0 / std::max(std::sqrt(var), 1e-8);
  }
}

std::vector<double> FrozenFeatureExtractor::pooled_stats(
    const Image& img) const {
  require(img.width > 0 && img.height > 0, "features: empty image");
  int h = img.height, w = img.width;
  int h1 = 0, w1 = 0, h2 = 0, w2 = 0;
  std::vector<float> a1 = conv_s2(img.rgb, h, w, 3, w1_, kC1, kK1, &h1, &w1);
  std::vector<float> a2 = conv_s2(a1, h1, w1, kC1, w2_, kC2, kK2, &h2, &w2);
  std::vector<float> a3 = conv_s2(a2, h2, w2, kC2, w3_, kC3, kK3, &h, &w);

  std::vector<double> feat(kFeatureDim, 0.0);
  auto avg_into = [](const std::vector<float>& act, int pixels, int channels,
                     double* dst) {
    for (int c = 0; c < channels; ++c) {
      double sum = 0.0;
      for (int p = 0; p < pixels; ++p) {
        sum += act[static_cast<size_t>(p) * channels + c];
      }
      dst[c] = sum / pixels;
    }
  };
  avg_into(a1, h1 * w1, kC1, feat.data());
  avg_into(a2, h2 * w2, kC2, feat.data() + kC1);
  avg_into(a3, h * w, kC3, feat.data() + kC1 + kC2);
  for (int c = 0; c < kC3; ++c) {
    double mx = -1e300;
    for (int p = 0; p < h * w; ++p) {
      mx = std::max(mx, static_cast<double>(a3[static_cast<size_t>(p) * kC3 + c]));
    }
    feat[kC1 + kC2 + kC3 + c] = mx;
  }
  return feat;
}

std::vector<double> FrozenFeatureExtractor::features(const Image& img) const {
  std::vector<double> feat = pooled_stats(img);
  for (int d = 0; d < kFeatureDim; ++d) {
    feat[d] = (feat[d] - pool_mean_[d]) * pool_scale_[d];
  }
  double norm = 0.0;
  for (double v : feat) norm += v * v;
  norm = std::sqrt(norm);
  if (norm > 1e-30) {
    for (double& v : feat) v /= norm;
  }
  return feat;
}

double image_similarity(const std::vector<Image>& gen,
                        const std::vector<Image>& ref,
                        const FrozenFeatureExtractor& fx) {
  require(!gen.empty() && !ref.empty(),
          "image_similarity: both image sets must be nonempty");
  auto centroid = [&fx](const std::vector<Image>& set) {
    std::vector<double> c(FrozenFeatureExtractor::kFeatureDim, 0.0);
    for (const Image& img : set) {
      const std::vector<double> f = fx.features(img);
      for (size_t i = 0; i < c.size(); ++i) c[i] += f[i];
    }
    for (double& v : c) v /= static_cast<double>(set.size());
    return c;
  };
  const std::vector<double> a = centroid(gen);
  const std::vector<double> b = centroid(ref);
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na <= 0.0 || nb <= 0.0) return 0.0;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

AttributeProbe train_attribute_probe(const ProceduralCorpus& corpus,
                                     uint64_t seed) {
  const size_t n = corpus.examples.size();
  require(n >= 10, "train_attribute_probe: corpus too small (", n,
          " examples)");

  AttributeProbe probe(seed);
  std::vector<std::vector<double>> feats;
  std::vector<int> color_l, shape_l, bg_l;
  feats.reserve(n);
  for (const CorpusExample& ex : corpus.examples) {
    require(ex.color >= 0 && ex.color < 4 && ex.shape >= 0 && ex.shape < 4 &&
                ex.background >= 0 && ex.background < 4,
            "train_attribute_probe: attribute index out of range");
    feats.push_back(probe.fx_.features(ex.image));
    color_l.push_back(ex.color);
    shape_l.push_back(ex.shape);
    bg_l.push_back(ex.background);
  }

  // Deterministic shuffle, then 80/20 train/held-out split.
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng = Rng(seed).fork(3);
  for (size_t i = n - 1; i > 0; --i) {
    const size_t j = shuffle_rng.below(i + 1);
    std::swap(order[i], order[j]);
  }
  const size_t train_n = (n * 8 + 9) / 10;
  std::vector<size_t> train_idx(order.begin(), order.begin() + train_n);
  std::vector<size_t> test_idx(order.begin() + train_n, order.end());
  require(!test_idx.empty(), "train_attribute_probe: held-out split is empty");

  const int classes = 4;
  Rng head_rng = Rng(seed).fork(4);
  probe.color_head_ =
      fit_probe_head(feats, color_l, train_idx, classes, head_rng.fork(0));
  probe.shape_head_ =
      fit_probe_head(feats, shape_l, train_idx, classes, head_rng.fork(1));
  probe.bg_head_ =
      fit_probe_head(feats, bg_l, train_idx, classes, head_rng.fork(2));

  long ok_c = 0, ok_s = 0, ok_b = 0, ok_j = 0;
  for (size_t idx : test_idx) {
    const bool c = head_argmax(probe.color_head_, feats[idx]) == color_l[idx];
    const bool s = head_argmax(probe.shape_head_, feats[idx]) == shape_l[idx];
    const bool b = head_argmax(probe.bg_head_, feats[idx]) == bg_l[idx];
    ok_c += c;
    ok_s += s;
    ok_b += b;
    ok_j += (c && s && b);
  }
  const double m = static_cast<double>(test_idx.size());
  probe.acc_color_ = ok_c / m;
  probe.acc_shape_ = ok_s / m;
  probe.acc_bg_ = ok_b / m;
  probe.acc_joint_ = ok_j / m;
  return probe;
}

AttributePrediction AttributeProbe::predict(const Image& img) const {
  const std::vector<double> f = fx_.features(img);
  AttributePrediction out;
  out.color = corpus_colors()[head_argmax(color_head_, f)];
  out.shape = corpus_shapes()[head_argmax(shape_head_, f)];
  out.background = corpus_backgrounds()[head_argmax(bg_head_, f)];
  return out;
}

double AttributeProbe::accuracy(const std::string& attribute) const {
  if (attribute == "color") return acc_color_;
  if (attribute == "shape") return acc_shape_;
  if (attribute == "background") return acc_bg_;
  fail("AttributeProbe: unknown attribute '", attribute, "'");
}

double prompt_adherence(const std::vector<Image>& gen, const PromptAttrs& attrs,
                        const AttributeProbe& probe) {
  if (attrs.empty()) return 1.0;
  require(!gen.empty(), "prompt_adherence: image set must be nonempty");
  long ok = 0;
  for (const Image& img : gen) {
    const AttributePrediction pred = probe.predict(img);
    bool match = true;
    if (attrs.color && *attrs.color != pred.color) match = false;
    if (attrs.shape && *attrs.shape != pred.shape) match = false;
    if (attrs.background && *attrs.background != pred.background) match = false;
    ok += match;
  }
  return static_cast<double>(ok) / static_cast<double>(gen.size());
}

NormStats norm_stats(const std::vector<double>& norms) {
  require(!norms.empty(), "norm_stats: input is empty");
  std::vector<double> sorted = norms;
  std::sort(sorted.begin(), sorted.end());
  NormStats s;
  s.min = sorted.front();
  s.max = sorted.back();
  const size_t n = sorted.size();
  s.median = (n % 2 == 1) ? sorted[n / 2]
                          : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  if (s.median > 0.0) {
    s.bin_width = s.median / 10.0;
    // Cap the bin count; the final bin absorbs everything past the cap.
    const long want = static_cast<long>(std::floor(s.max / s.bin_width)) + 1;
    const long bins = std::min<long>(want, 200);
    s.histogram.assign(static_cast<size_t>(bins), 0);
    for (double v : sorted) {
      long bin = static_cast<long>(std::floor(v / s.bin_width));
      bin = std::clamp<long>(bin, 0, bins - 1);
      ++s.histogram[static_cast<size_t>(bin)];
    }
  } else {
    s.bin_width = 0.0;
    s.histogram.assign(1, static_cast<long>(n));
  }
  return s;
}

}  // namespace neti
