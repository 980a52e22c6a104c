// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

namespace mmkd {

// Synthetic RGB image; values in [0,1], row-major, 3 channels interleaved.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> rgb;  // height * width * 3

  double& at(std::size_t y, std::size_t x, std::size_t c) {
    return rgb[(y * width + x) * 3 + c];
  }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return rgb[(y * width + x) * 3 + c];
  }
};

}  // namespace mmkd
