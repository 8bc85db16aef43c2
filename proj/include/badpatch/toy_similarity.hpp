#pragma once

#include "badpatch/backends.hpp"

namespace badpatch {

/// Soft joint RGB histogram (bins^3 cells) as a stand-in embedding.
///
/// Each channel value spreads linearly over its two nearest bin centres. Text
/// maps colour words ("red", "dark green", ...) onto the histogram cells of
/// their RGB values; unknown words are ignored.
class ToyHistogramScorer final : public SimilarityBackend {
 public:
  explicit ToyHistogramScorer(int bins = 6);

  std::string name() const override { return "toy-histogram"; }
  std::vector<double> embed_image(const Image& image, const Mask* mask) const override;
  std::vector<double> embed_text(std::string_view text) const override;

  int bins() const { return bins_; }

 private:
  void accumulate(std::vector<double>& hist, double r, double g, double b, double weight) const;

  int bins_;
};

}  // namespace badpatch
