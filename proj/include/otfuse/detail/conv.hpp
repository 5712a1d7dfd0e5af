#pragma once

// Stride-1, zero "same" padding convolution helpers on CHW-flattened samples.

#include <limits>
#include <vector>

#include "otfuse/types.hpp"

namespace otfuse::detail {

struct ConvGeometry {
  Index channels, height, width, kernel_h, kernel_w;
  Index pad_h() const { return (kernel_h - 1) / 2; }
  Index pad_w() const { return (kernel_w - 1) / 2; }
  Index patch() const { return channels * kernel_h * kernel_w; }
  Index positions() const { return height * width; }
};

/// cols(c*kh*kw + ky*kw + kx, y*W + x) = input(c, y+ky-pad, x+kx-pad).
inline void im2col(const double* input, const ConvGeometry& g, Matrix& cols) {
  cols.setZero(g.patch(), g.positions());
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ky = 0; ky < g.kernel_h; ++ky) {
      for (Index kx = 0; kx < g.kernel_w; ++kx) {
        const Index row = (c * g.kernel_h + ky) * g.kernel_w + kx;
        for (Index y = 0; y < g.height; ++y) {
          const Index sy = y + ky - g.pad_h();
          if (sy < 0 || sy >= g.height) continue;
          for (Index x = 0; x < g.width; ++x) {
            const Index sx = x + kx - g.pad_w();
            if (sx < 0 || sx >= g.width) continue;
            cols(row, y * g.width + x) = input[(c * g.height + sy) * g.width + sx];
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: accumulates column gradients back into the input image.
inline void col2im(const Matrix& cols, const ConvGeometry& g, double* grad_input) {
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ky = 0; ky < g.kernel_h; ++ky) {
      for (Index kx = 0; kx < g.kernel_w; ++kx) {
        const Index row = (c * g.kernel_h + ky) * g.kernel_w + kx;
        for (Index y = 0; y < g.height; ++y) {
          const Index sy = y + ky - g.pad_h();
          if (sy < 0 || sy >= g.height) continue;
          for (Index x = 0; x < g.width; ++x) {
            const Index sx = x + kx - g.pad_w();
            if (sx < 0 || sx >= g.width) continue;
            grad_input[(c * g.height + sy) * g.width + sx] += cols(row, y * g.width + x);
          }
        }
      }
    }
  }
}

/// 2x2 max pooling with floor semantics. `argmax` receives, per output cell,
/// the flat input index that won (first maximum in scan order).
inline void max_pool2(const double* input, Index channels, Index height, Index width, double* output,
                      Index* argmax) {
  const Index oh = height / 2, ow = width / 2;
  for (Index c = 0; c < channels; ++c) {
    for (Index y = 0; y < oh; ++y) {
      for (Index x = 0; x < ow; ++x) {
        double best = -std::numeric_limits<double>::infinity();
        Index best_at = 0;
        for (Index dy = 0; dy < 2; ++dy) {
          for (Index dx = 0; dx < 2; ++dx) {
            const Index at = (c * height + 2 * y + dy) * width + 2 * x + dx;
            if (input[at] > best) {
              best = input[at];
              best_at = at;
            }
          }
        }
        const Index out = (c * oh + y) * ow + x;
        output[out] = best;
        if (argmax) argmax[out] = best_at;
      }
    }
  }
}

}  // namespace otfuse::detail
