#pragma once

// Synthetic patch sets shared by the unit and acceptance tests.

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "mop/defocus.hpp"
#include "mop/degrade.hpp"
#include "mop/random.hpp"

namespace mop::testing {

/// One `size`-square field per sample, integer offset drawn from [lo, hi] with a random sign
/// when `signed_offsets`, plane blurred with the slide tilt.
struct PatchDraw {
  ImagePatch sharp;
  ImagePatch blurred;
  DefocusLabel label;
  double offset = 0.0;
};

inline PatchDraw draw_patch(uint64_t seed, int64_t size, int64_t lo, int64_t hi, bool random_sign,
                            const OpticsParams& optics = {}, double tilt = 1.0) {
  Rng rng(derive_seed(seed, {0xd1a5u}));
  double off = static_cast<double>(rng.integer(lo, hi));
  if (random_sign && rng.uniform() < 0.5) off = -off;
  PatchDraw d;
  d.sharp = procedural_texture(size, size, seed);
  const double offsets[] = {off};
  auto st = synth_focal_stack(d.sharp, offsets, optics, tilt, 32);
  d.blurred = st.stack.planes.front().patch;
  d.label = st.labels.front().mean_over(0, 0, size, size);
  d.offset = off;
  return d;
}

/// Defocus regression set: offsets uniform over -6..6.
inline std::vector<DefocusSample> defocus_set(uint64_t seed, int64_t n, int64_t size = 64) {
  std::vector<DefocusSample> out;
  for (int64_t i = 0; i < n; ++i) {
    auto d = draw_patch(derive_seed(seed, {static_cast<uint64_t>(i)}), size, -6, 6, false);
    out.push_back({d.blurred.chw(), d.label});
  }
  return out;
}

struct PairSet {
  torch::Tensor lq, hq;  // N x 3 x S x S
  std::vector<double> offsets;
};

/// Restoration pairs with |offset| in [lo, hi].
inline PairSet pair_set(uint64_t seed, int64_t n, int64_t size = 64, int64_t lo = 1, int64_t hi = 4) {
  std::vector<torch::Tensor> lq, hq;
  PairSet p;
  for (int64_t i = 0; i < n; ++i) {
    auto d = draw_patch(derive_seed(seed, {static_cast<uint64_t>(i)}), size, lo, hi, true);
    lq.push_back(d.blurred.chw());
    hq.push_back(d.sharp.chw());
    p.offsets.push_back(d.offset);
  }
  p.lq = torch::stack(lq);
  p.hq = torch::stack(hq);
  return p;
}

}  // namespace mop::testing
