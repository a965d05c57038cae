#pragma once

#include <algorithm>
#include <cstdint>

namespace decaps {

// Inclusive pixel box: (r1, c1) is the last row/column inside the box.
struct Box {
  int r0 = 0, c0 = 0, r1 = 0, c1 = 0;

  int height() const { return r1 - r0 + 1; }
  int width() const { return c1 - c0 + 1; }
  int64_t area() const {
    return static_cast<int64_t>(height()) * static_cast<int64_t>(width());
  }
  bool valid() const { return r0 <= r1 && c0 <= c1; }

  Box clamped(int h, int w) const {
    Box b{std::max(r0, 0), std::max(c0, 0), std::min(r1, h - 1), std::min(c1, w - 1)};
    return b;
  }

  friend bool operator==(const Box&, const Box&) = default;
};

inline int64_t intersection_area(const Box& a, const Box& b) {
  const int r0 = std::max(a.r0, b.r0), c0 = std::max(a.c0, b.c0);
  const int r1 = std::min(a.r1, b.r1), c1 = std::min(a.c1, b.c1);
  if (r0 > r1 || c0 > c1) return 0;
  return static_cast<int64_t>(r1 - r0 + 1) * static_cast<int64_t>(c1 - c0 + 1);
}

}  // namespace decaps
