#pragma once

// Procedural dataset: colored shapes on solid backgrounds, rendered with
// supersampled anti-aliasing, captioned by a fixed grammar. The held-out
// concept (a red/blue checkerboard-textured square) never appears in the
// pretraining corpus.

#include <cstdint>
#include <string>
#include <vector>

#include "neti/image.hpp"
#include "neti/rng.hpp"
#include "neti/textenc.hpp"

namespace neti {

inline constexpr int kImageSide = 32;

// Grammar attribute values (4 each).
const std::vector<std::string>& corpus_colors();
const std::vector<std::string>& corpus_shapes();
const std::vector<std::string>& corpus_backgrounds();

struct CorpusExample {
  Image image;
  std::string caption;
  int color = 0;
  int shape = 0;
  int background = 0;
};

struct ProceduralCorpus {
  uint64_t seed = 0;
  std::vector<CorpusExample> examples;
};

// A small concept image set for inversion.
struct ConceptDataset {
  uint64_t seed = 0;
  std::vector<Image> images;          // 1 to 6, all the same size
  std::string caption_template;       // contains exactly one "S*"
  std::string super_category;         // ordinary vocabulary token

  void validate(const Vocab& vocab, int context) const;
};

// One anti-aliased 32x32 render of a grammar combination; position and size
// are jittered from `rng`.
Image render_example(int color, int shape, int background, Rng& rng);

// The held-out concept render: red/blue checkerboard-textured square.
Image render_checkerboard_square(int background, Rng& rng);

// Deterministic corpus of at least 64 images: the first 64 cover every
// grammar combination once, the rest are random combinations. Captions
// follow "a photo of a <color> <shape> on a <bg> background".
ProceduralCorpus generate_corpus(uint64_t seed, int count);

// Four views of the held-out concept with the caption template
// "a photo of S*" and super-category "square".
ConceptDataset generate_concept(uint64_t seed);

// Directory layout: images/%04d.ppm, captions.csv, corpus.json.
void save_corpus(const std::string& dir, const ProceduralCorpus& corpus);
ProceduralCorpus load_corpus(const std::string& dir);

// Directory layout: images/%02d.ppm, concept.json.
void save_concept_dataset(const std::string& dir, const ConceptDataset& ds);
ConceptDataset load_concept_dataset(const std::string& dir);

}  // namespace neti
