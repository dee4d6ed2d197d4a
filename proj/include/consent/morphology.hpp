#pragma once

// Letter-morphology voting baseline: per-word stroke thickness from
// skeleton + distance transform, then an image-local median/sigma vote.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "consent/common.hpp"
#include "consent/image.hpp"

namespace consent {

struct BinaryMask {
  int w = 0, h = 0;
  std::vector<std::uint8_t> bits;  // 1 = letter foreground

  BinaryMask() = default;
  BinaryMask(int width, int height) : w(width), h(height), bits(std::size_t(width) * height, 0) {}

  std::uint8_t at(int x, int y) const { return bits[std::size_t(y) * w + x]; }
  std::uint8_t& at(int x, int y) { return bits[std::size_t(y) * w + x]; }

  std::size_t count() const {
    std::size_t n = 0;
    for (std::uint8_t b : bits) n += b;
    return n;
  }
};

struct BinarizeResult {
  BinaryMask mask;
  bool degenerate = false;  // constant-intensity patch, no letters detectable
  int threshold = -1;
  bool foreground_dark = true;
};

/// Otsu threshold; the minority side of the split becomes foreground.
inline BinarizeResult binarize(const GrayImage& patch) {
  if (patch.width() <= 0 || patch.height() <= 0) throw ValidationError("binarize: empty patch");
  std::size_t hist[256] = {0};
  for (std::uint8_t v : patch.pixels()) ++hist[v];
  const std::size_t total = patch.pixels().size();

  int lo = 0, hi = 255;
  while (lo < 256 && hist[lo] == 0) ++lo;
  while (hi >= 0 && hist[hi] == 0) --hi;
  BinarizeResult res;
  res.mask = BinaryMask(patch.width(), patch.height());
  if (lo >= hi) {  // constant intensity
    res.degenerate = true;
    return res;
  }

  double sum_all = 0.0;
  for (int v = 0; v < 256; ++v) sum_all += double(v) * double(hist[v]);
  double best_var = -1.0;
  int best_t = lo;
  double w0 = 0.0, sum0 = 0.0;
  for (int t = lo; t < hi; ++t) {  // classes: <= t and > t
    w0 += double(hist[t]);
    sum0 += double(t) * double(hist[t]);
    const double w1 = double(total) - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double mu0 = sum0 / w0, mu1 = (sum_all - sum0) / w1;
    const double var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
    if (var > best_var) {  // strict: ties keep the smallest threshold
      best_var = var;
      best_t = t;
    }
  }
  res.threshold = best_t;

  std::size_t dark = 0;
  for (int v = lo; v <= best_t; ++v) dark += hist[v];
  res.foreground_dark = dark <= total - dark;
  for (int y = 0; y < patch.height(); ++y) {
    for (int x = 0; x < patch.width(); ++x) {
      const bool is_dark = patch.at(x, y) <= best_t;
      res.mask.at(x, y) = (is_dark == res.foreground_dark) ? 1 : 0;
    }
  }
  if (res.mask.count() == 0) res.degenerate = true;
  return res;
}

// ---------------------------------------------------------------------------
// Zhang-Suen iterative thinning.

namespace detail {
inline int zs_neighbors(const BinaryMask& m, int x, int y, int p[8]) {
  // p2..p9 clockwise from north; outside the image counts as background.
  static const int dx[8] = {0, 1, 1, 1, 0, -1, -1, -1};
  static const int dy[8] = {-1, -1, 0, 1, 1, 1, 0, -1};
  int b = 0;
  for (int i = 0; i < 8; ++i) {
    const int xx = x + dx[i], yy = y + dy[i];
    p[i] = (xx >= 0 && yy >= 0 && xx < m.w && yy < m.h) ? m.at(xx, yy) : 0;
    b += p[i];
  }
  return b;
}
}  // namespace detail

/// Thins foreground to a 1-pixel-wide skeleton; output is a subset of input.
inline BinaryMask skeletonize(const BinaryMask& mask) {
  BinaryMask cur = mask;
  std::vector<std::size_t> kill;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int pass = 0; pass < 2; ++pass) {
      kill.clear();
      for (int y = 0; y < cur.h; ++y) {
        for (int x = 0; x < cur.w; ++x) {
          if (!cur.at(x, y)) continue;
          int p[8];
          const int b = detail::zs_neighbors(cur, x, y, p);
          if (b < 2 || b > 6) continue;
          int a = 0;
          for (int i = 0; i < 8; ++i)
            if (p[i] == 0 && p[(i + 1) % 8] == 1) ++a;
          if (a != 1) continue;
          // p[0]=N p[2]=E p[4]=S p[6]=W
          if (pass == 0) {
            if (p[0] * p[2] * p[4] != 0) continue;
            if (p[2] * p[4] * p[6] != 0) continue;
          } else {
            if (p[0] * p[2] * p[6] != 0) continue;
            if (p[0] * p[4] * p[6] != 0) continue;
          }
          kill.push_back(std::size_t(y) * cur.w + x);
        }
      }
      if (!kill.empty()) {
        changed = true;
        for (std::size_t i : kill) cur.bits[i] = 0;
      }
    }
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Exact Euclidean distance transform (two-pass squared EDT, lower-envelope
// scan per row then per column). Everything outside the border counts as
// background, so the grid is padded with a background ring first.

namespace detail {

inline void edt_1d(const std::vector<double>& f, std::vector<double>& d, std::size_t n,
                   std::vector<int>& v, std::vector<double>& z) {
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (std::size_t q = 1; q < n; ++q) {
    const double fq = f[q] + double(q) * double(q);
    double s = (fq - (f[std::size_t(v[k])] + double(v[k]) * double(v[k]))) /
               (2.0 * double(q) - 2.0 * double(v[k]));
    while (s <= z[k]) {
      --k;
      s = (fq - (f[std::size_t(v[k])] + double(v[k]) * double(v[k]))) /
          (2.0 * double(q) - 2.0 * double(v[k]));
    }
    ++k;
    v[std::size_t(k)] = int(q);
    z[std::size_t(k)] = s;
    z[std::size_t(k) + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[std::size_t(k) + 1] < double(q)) ++k;
    const double dq = double(q) - double(v[k]);
    d[q] = dq * dq + f[std::size_t(v[k])];
  }
}

}  // namespace detail

/// Squared Euclidean distance to the nearest background pixel (the region
/// outside the image counts as background). Background pixels map to 0.
inline std::vector<std::int64_t> squared_distance_transform(const BinaryMask& mask) {
  const int pw = mask.w + 2, ph = mask.h + 2;
  const double INF = 1e18;
  std::vector<double> grid(std::size_t(pw) * ph, 0.0);
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x)
      grid[std::size_t(y + 1) * pw + (x + 1)] = mask.at(x, y) ? INF : 0.0;

  const std::size_t maxn = std::size_t(std::max(pw, ph));
  std::vector<double> f(maxn), d(maxn), z(maxn + 1);
  std::vector<int> v(maxn);
  for (int y = 0; y < ph; ++y) {  // rows
    for (int x = 0; x < pw; ++x) f[std::size_t(x)] = grid[std::size_t(y) * pw + x];
    detail::edt_1d(f, d, std::size_t(pw), v, z);
    for (int x = 0; x < pw; ++x) grid[std::size_t(y) * pw + x] = d[std::size_t(x)];
  }
  for (int x = 0; x < pw; ++x) {  // columns
    for (int y = 0; y < ph; ++y) f[std::size_t(y)] = grid[std::size_t(y) * pw + x];
    detail::edt_1d(f, d, std::size_t(ph), v, z);
    for (int y = 0; y < ph; ++y) grid[std::size_t(y) * pw + x] = d[std::size_t(y)];
  }

  std::vector<std::int64_t> out(std::size_t(mask.w) * mask.h);
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x)
      out[std::size_t(y) * mask.w + x] =
          std::int64_t(grid[std::size_t(y + 1) * pw + (x + 1)] + 0.5);
  return out;
}

/// Euclidean distances (sqrt of the exact squared transform).
inline std::vector<double> distance_transform(const BinaryMask& mask) {
  const auto sq = squared_distance_transform(mask);
  std::vector<double> out(sq.size());
  for (std::size_t i = 0; i < sq.size(); ++i) out[i] = std::sqrt(double(sq[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Thickness statistics and the voting rule.

struct ThicknessProfile {
  std::vector<double> samples;  // distance values at skeleton pixels
  int word_index = -1;
  bool degenerate = false;

  bool empty() const { return samples.empty(); }
  double mean() const {
    double acc = 0.0;
    for (double v : samples) acc += v;
    return acc / double(samples.size());
  }
};

/// Distance-transform values sampled at all skeleton pixels of one patch.
inline ThicknessProfile thickness(const GrayImage& patch, int word_index = -1) {
  ThicknessProfile prof;
  prof.word_index = word_index;
  const BinarizeResult bin = binarize(patch);
  prof.degenerate = bin.degenerate;
  if (bin.degenerate) return prof;
  const BinaryMask skel = skeletonize(bin.mask);
  const auto dist = distance_transform(bin.mask);
  for (int y = 0; y < skel.h; ++y)
    for (int x = 0; x < skel.w; ++x)
      if (skel.at(x, y)) prof.samples.push_back(dist[std::size_t(y) * skel.w + x]);
  return prof;
}

/// Which multiset the image statistics (median, sigma) are computed over.
enum class SigmaMode {
  PooledSamples,  // every skeleton sample of every word, pooled
  WordMeans,      // one mean-thickness value per word
};

struct ImageThicknessStats {
  std::vector<ThicknessProfile> profiles;

  std::vector<double> pooled(SigmaMode mode) const {
    std::vector<double> v;
    for (const auto& p : profiles) {
      if (p.empty()) continue;
      if (mode == SigmaMode::PooledSamples)
        v.insert(v.end(), p.samples.begin(), p.samples.end());
      else
        v.push_back(p.mean());
    }
    return v;
  }
};

namespace detail {
inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}
inline double pop_stddev_of(const std::vector<double>& v) {
  double mu = 0.0;
  for (double x : v) mu += x;
  mu /= double(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mu) * (x - mu);
  return std::sqrt(var / double(v.size()));
}
}  // namespace detail

/// Bold iff the word's mean thickness strictly exceeds med + alpha * sigma
/// of the image statistic. Words with empty profiles are non-bold.
inline std::vector<int> vote(const ImageThicknessStats& stats, double alpha,
                             SigmaMode mode = SigmaMode::PooledSamples) {
  const std::vector<double> pool = stats.pooled(mode);
  if (pool.empty()) throw ValidationError("vote: every profile is empty");
  const double med = detail::median_of(pool);
  const double sigma = detail::pop_stddev_of(pool);
  const double threshold = med + alpha * sigma;
  std::vector<int> labels(stats.profiles.size(), 0);
  for (std::size_t i = 0; i < stats.profiles.size(); ++i) {
    const auto& p = stats.profiles[i];
    if (!p.empty() && p.mean() > threshold) labels[i] = 1;
  }
  return labels;
}

}  // namespace consent
