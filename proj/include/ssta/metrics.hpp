#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "ssta/tensor.hpp"

namespace ssta::metrics {

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

/// Returned by psnr() for identical frames.
inline constexpr double kPsnrInfinite = std::numeric_limits<double>::infinity();

namespace detail {

/// Accepts [H,W] or [1,H,W] and returns (H, W).
template <Real T>
std::pair<std::size_t, std::size_t> plane_extents(const Tensor<T>& t, const char* op) {
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  if (t.rank() == 3 && t.dim(0) == 1) return {t.dim(1), t.dim(2)};
  throw ShapeError(std::string(op) + ": expected a single-channel frame, got " + shape_str(t.shape()));
}

template <Real A, Real B>
void require_same_extents(const Tensor<A>& a, const Tensor<B>& b, const char* op) {
  if (plane_extents(a, op) != plane_extents(b, op))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline std::array<double, kSsimWindow> gaussian_1d() {
  std::array<double, kSsimWindow> w{};
  double s = 0;
  const int r = int(kSsimWindow / 2);
  for (int i = -r; i <= r; ++i) s += w[std::size_t(i + r)] = std::exp(-double(i * i) / (2 * kSsimSigma * kSsimSigma));
  for (double& v : w) v /= s;
  return w;
}

}  // namespace detail

template <Real A, Real B>
double mse(const Tensor<A>& a, const Tensor<B>& b) {
  detail::require_same_extents(a, b, "mse");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    s += d * d;
  }
  return s / double(a.size());
}

inline double psnr_from_mse(double m, double max_val = 1.0) {
  if (m == 0.0) return kPsnrInfinite;
  return 10.0 * std::log10(max_val * max_val / m);
}

template <Real A, Real B>
double psnr(const Tensor<A>& a, const Tensor<B>& b, double max_val = 1.0) {
  return psnr_from_mse(mse(a, b), max_val);
}

/**
 * Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), dynamic range 1,
 * population statistics, averaged over all window positions fully inside the frame.
 */
template <Real A, Real B>
double ssim(const Tensor<A>& a, const Tensor<B>& b) {
  detail::require_same_extents(a, b, "ssim");
  const auto [h, w] = detail::plane_extents(a, "ssim");
  if (h < kSsimWindow || w < kSsimWindow)
    throw ShapeError("ssim: frame " + std::to_string(h) + "x" + std::to_string(w) + " is smaller than the " +
                     std::to_string(kSsimWindow) + "x" + std::to_string(kSsimWindow) + " window");
  const auto g = detail::gaussian_1d();
  constexpr double L = 1.0;
  const double c1 = (kSsimK1 * L) * (kSsimK1 * L), c2 = (kSsimK2 * L) * (kSsimK2 * L);
  const std::size_t oh = h - kSsimWindow + 1, ow = w - kSsimWindow + 1;
  double total = 0;
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
      for (std::size_t i = 0; i < kSsimWindow; ++i)
        for (std::size_t j = 0; j < kSsimWindow; ++j) {
          const double wt = g[i] * g[j];
          const double u = double(a[(y + i) * w + x + j]), v = double(b[(y + i) * w + x + j]);
          mx += wt * u;
          my += wt * v;
          xx += wt * u * u;
          yy += wt * v * v;
          xy += wt * u * v;
        }
      const double vx = xx - mx * mx, vy = yy - my * my, cxy = xy - mx * my;
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
  return total / double(oh * ow);
}

/// Per-view averages over evaluation steps; `lpips` is reserved and always empty.
struct MetricReport {
  struct Row {
    int view = 0;
    double mse = 0;
    double psnr = 0;
    double ssim = 0;
  };
  std::vector<Row> views;
  Row mean;

  void finalize() {
    mean = Row{0, 0, 0, 0};
    for (const auto& r : views) {
      mean.mse += r.mse;
      mean.psnr += r.psnr;
      mean.ssim += r.ssim;
    }
    if (!views.empty()) {
      const double n = double(views.size());
      mean.mse /= n;
      mean.psnr /= n;
      mean.ssim /= n;
    }
  }
};

/// Running per-view accumulator.
class MetricAccumulator {
 public:
  template <Real A, Real B>
  void add(const Tensor<A>& truth, const Tensor<B>& pred) {
    const double m = mse(truth, pred);
    mse_ += m;
    psnr_ += psnr_from_mse(m);
    const auto [h, w] = detail::plane_extents(truth, "ssim");
    if (h >= kSsimWindow && w >= kSsimWindow) ssim_ += ssim(truth, pred);
    ++n_;
  }
  std::size_t count() const { return n_; }
  MetricReport::Row row(int view) const {
    const double n = n_ ? double(n_) : 1.0;
    return {view, mse_ / n, psnr_ / n, ssim_ / n};
  }

 private:
  double mse_ = 0, psnr_ = 0, ssim_ = 0;
  std::size_t n_ = 0;
};

}  // namespace ssta::metrics
