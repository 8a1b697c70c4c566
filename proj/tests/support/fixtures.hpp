// Small models and layouts shared by unit tests.
#pragma once

#include <numbers>

#include "cofs/layout.hpp"
#include "cofs/model.hpp"

namespace cofs::testing {

inline ModelConfig tiny_config(std::size_t classes = 3, std::size_t max_objects = 4) {
  ModelConfig c;
  c.encoder_layers = 2;
  c.decoder_layers = 2;
  c.d_model = 16;
  c.heads = 2;
  c.ffn_hidden = 32;
  c.mixture_components = 3;
  c.num_classes = classes;
  c.max_objects = max_objects;
  c.raster_side = 16;
  c.boundary_channels = 2;
  c.head_hidden1 = 16;
  c.head_hidden2 = 8;
  return c;
}

inline BoundaryRaster room_raster(std::size_t side, std::size_t margin) {
  BoundaryRaster b(side, side, 0.25);
  for (std::size_t r = margin; r < side - margin; ++r)
    for (std::size_t c = margin; c < side - margin; ++c) b.set(c, r, true);
  return b;
}

inline Layout random_room(Rng& rng, std::size_t k, std::size_t classes, std::size_t side = 16) {
  Layout l;
  l.boundary = room_raster(side, 2 + rng.uniform_index(3));
  for (std::size_t i = 0; i < k; ++i) {
    BoundingBox b;
    b.cls = rng.uniform_index(classes);
    b.t = {rng.uniform(-1.0, 1.0), rng.uniform(0.2, 0.8), rng.uniform(-1.0, 1.0)};
    b.e = {rng.uniform(0.3, 1.5), rng.uniform(0.3, 1.5), rng.uniform(0.3, 1.5)};
    b.r = rng.uniform(-std::numbers::pi, std::numbers::pi);
    l.boxes.push_back(b);
  }
  return l;
}

inline AttributeNormalizer unit_normalizer() {
  return AttributeNormalizer({-1.5, 0, -1.5, 0, 0, 0, -std::numbers::pi},
                             {1.5, 1, 1.5, 2, 2, 2, std::numbers::pi});
}

}  // namespace cofs::testing
