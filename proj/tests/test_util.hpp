#pragma once

#include <initializer_list>
#include <string>
#include <vector>

#include "omgseg/core.hpp"
#include "omgseg/rng.hpp"

namespace omgseg::testing {

inline BinaryMask rect(int h, int w, int y0, int x0, int y1, int x1) {
  BinaryMask m(h, w);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.set(y, x, true);
  return m;
}

inline BinaryMask random_mask(int h, int w, Rng& rng, double p = 0.5) {
  BinaryMask m(h, w);
  for (std::size_t i = 0; i < m.size(); ++i) m.set(i, rng.uniform() < p);
  return m;
}

inline BinaryMask pattern(int h, int w, std::initializer_list<int> bits) {
  BinaryMask m(h, w);
  std::size_t i = 0;
  for (int b : bits) m.set(i++, b != 0);
  return m;
}

inline Entity thing(BinaryMask m, int cls, int id) { return {std::move(m), cls, id, true}; }
inline Entity stuff(BinaryMask m, int cls) { return {std::move(m), cls, 0, false}; }

inline EntitySet entity_set(int h, int w, std::vector<Entity> es) { return {h, w, std::move(es)}; }

}  // namespace omgseg::testing
