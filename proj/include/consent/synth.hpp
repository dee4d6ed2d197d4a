#pragma once

// Deterministic generator of labeled text-like images. Words are built
// from procedural glyphs (line strokes of controlled width) so stroke
// thickness — the label-generating variable — is exact and font-free.
// Also renders the rock-paper-scissors context task in the same format.
//
// Dataset layout: PPM P6 images plus manifest.json
//   {"images":[{"file":str,"split":"train|test|val",
//               "words":[{"box":[x,y,w,h],"label":0|1}]}]}

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "consent/common.hpp"
#include "consent/image.hpp"

namespace consent {

struct SynthConfig {
  std::uint64_t seed = 42;
  int images = 100;  // base layouts
  int views = 1;     // rendered views per layout; views share a split

  // words-per-image: lognormal fit to the target moments, clamped
  double words_mean = 32.0;
  double words_std = 42.0;
  int words_min = 1;
  int words_max = 701;

  double bold_ratio = 0.10;
  double stroke_min = 1.0, stroke_max = 4.0;    // per-image base stroke width
  double bold_mult_min = 1.4, bold_mult_max = 2.2;

  // noise toggles
  bool illumination = true;
  double gauss_sigma = 0.02;
  double rotation_deg = 8.0;
  double invert_prob = 0.10;

  int canvas_width = 640;
  int max_canvas_height = 4096;

  // rock-paper-scissors mode
  int rps_icon = 40;

  void validate() const {
    if (images <= 0) throw ValidationError("synth: images must be positive");
    if (views <= 0) throw ValidationError("synth: views must be positive");
    if (words_min < 1 || words_max < words_min) throw ValidationError("synth: bad word range");
    if (bold_ratio < 0.0 || bold_ratio > 1.0) throw ValidationError("synth: bad bold ratio");
    if (stroke_min <= 0.0 || stroke_max < stroke_min)
      throw ValidationError("synth: bad stroke range");
    if (bold_mult_min <= 1.0 || bold_mult_max < bold_mult_min)
      throw ValidationError("synth: bold multiplier must exceed 1");
    if (gauss_sigma < 0.0 || invert_prob < 0.0 || invert_prob > 1.0 || rotation_deg < 0.0)
      throw ValidationError("synth: bad noise settings");
    if (canvas_width < 64) throw ValidationError("synth: canvas too narrow");
    if (rps_icon < 16) throw ValidationError("synth: rps icon too small");
  }
};

struct WordRecord {
  Box box;
  int label = 0;
  double stroke_width = 0.0;  // generation metadata, not serialized
};

struct SynthImageRecord {
  std::string file;
  std::string split;
  std::vector<WordRecord> words;
};

struct SynthManifest {
  std::vector<SynthImageRecord> images;

  std::size_t word_count() const {
    std::size_t n = 0;
    for (const auto& im : images) n += im.words.size();
    return n;
  }
  std::size_t bold_count() const {
    std::size_t n = 0;
    for (const auto& im : images)
      for (const auto& w : im.words) n += std::size_t(w.label);
    return n;
  }
};

// ---------------------------------------------------------------------------
// Procedural glyph alphabet: polylines in the unit square, y pointing down.

namespace glyphs {

using Pt = std::pair<double, double>;
using Stroke = std::vector<Pt>;
using Glyph = std::vector<Stroke>;

inline const std::vector<Glyph>& alphabet() {
  static const std::vector<Glyph> shapes = {
      // bar
      {{{0.5, 0.05}, {0.5, 0.95}}},
      // L
      {{{0.2, 0.05}, {0.2, 0.95}, {0.85, 0.95}}},
      // T
      {{{0.1, 0.05}, {0.9, 0.05}}, {{0.5, 0.05}, {0.5, 0.95}}},
      // V
      {{{0.1, 0.05}, {0.5, 0.95}, {0.9, 0.05}}},
      // N
      {{{0.15, 0.95}, {0.15, 0.05}, {0.85, 0.95}, {0.85, 0.05}}},
      // Z
      {{{0.1, 0.05}, {0.9, 0.05}, {0.1, 0.95}, {0.9, 0.95}}},
      // U
      {{{0.15, 0.05}, {0.15, 0.8}, {0.5, 0.95}, {0.85, 0.8}, {0.85, 0.05}}},
      // H
      {{{0.15, 0.05}, {0.15, 0.95}}, {{0.85, 0.05}, {0.85, 0.95}}, {{0.15, 0.5}, {0.85, 0.5}}},
      // X
      {{{0.1, 0.05}, {0.9, 0.95}}, {{0.9, 0.05}, {0.1, 0.95}}},
      // box
      {{{0.15, 0.1}, {0.85, 0.1}, {0.85, 0.9}, {0.15, 0.9}, {0.15, 0.1}}},
      // slash
      {{{0.2, 0.95}, {0.8, 0.05}}},
      // C
      {{{0.85, 0.1}, {0.2, 0.1}, {0.2, 0.9}, {0.85, 0.9}}},
      // A
      {{{0.1, 0.95}, {0.5, 0.05}, {0.9, 0.95}}, {{0.3, 0.6}, {0.7, 0.6}}},
      // zigzag
      {{{0.1, 0.2}, {0.4, 0.8}, {0.6, 0.2}, {0.9, 0.8}}},
  };
  return shapes;
}

}  // namespace glyphs

// ---------------------------------------------------------------------------
// Rendering helpers.

namespace detail {

struct Seg {
  double x0, y0, x1, y1;
};

inline void draw_segment(std::vector<double>& canvas, int W, int H, const Seg& s, double radius,
                         double ink) {
  const double r = radius;
  const int px0 = std::max(0, int(std::floor(std::min(s.x0, s.x1) - r - 1)));
  const int px1 = std::min(W - 1, int(std::ceil(std::max(s.x0, s.x1) + r + 1)));
  const int py0 = std::max(0, int(std::floor(std::min(s.y0, s.y1) - r - 1)));
  const int py1 = std::min(H - 1, int(std::ceil(std::max(s.y0, s.y1) + r + 1)));
  const double vx = s.x1 - s.x0, vy = s.y1 - s.y0;
  const double len2 = vx * vx + vy * vy;
  for (int y = py0; y <= py1; ++y) {
    for (int x = px0; x <= px1; ++x) {
      const double dx0 = x - s.x0, dy0 = y - s.y0;
      double t = len2 > 0.0 ? (dx0 * vx + dy0 * vy) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const double ddx = dx0 - t * vx, ddy = dy0 - t * vy;
      if (ddx * ddx + ddy * ddy <= r * r)
        canvas[std::size_t(y) * std::size_t(W) + std::size_t(x)] = ink;
    }
  }
}

/// Collects a word's segments in canvas space, rotated about the word
/// center, and returns the tight pixel box (inflated by the stroke radius).
inline Box word_segments(std::vector<Seg>& out, const std::vector<int>& glyph_ids, double ox,
                         double oy, double glyph_h, double glyph_w, double gap, double angle_rad,
                         double stroke, int W, int H) {
  out.clear();
  const double word_w = double(glyph_ids.size()) * (glyph_w + gap) - gap;
  const double cx = ox + word_w / 2.0, cy = oy + glyph_h / 2.0;
  const double ca = std::cos(angle_rad), sa = std::sin(angle_rad);
  auto place = [&](double gx, double gy, int gi) {
    const auto& shape = glyphs::alphabet()[std::size_t(gi)];
    for (const auto& stroke_pts : shape) {
      for (std::size_t i = 0; i + 1 < stroke_pts.size(); ++i) {
        double x0 = gx + stroke_pts[i].first * glyph_w;
        double y0 = gy + stroke_pts[i].second * glyph_h;
        double x1 = gx + stroke_pts[i + 1].first * glyph_w;
        double y1 = gy + stroke_pts[i + 1].second * glyph_h;
        // rotate about the word center
        const double rx0 = cx + ca * (x0 - cx) - sa * (y0 - cy);
        const double ry0 = cy + sa * (x0 - cx) + ca * (y0 - cy);
        const double rx1 = cx + ca * (x1 - cx) - sa * (y1 - cy);
        const double ry1 = cy + sa * (x1 - cx) + ca * (y1 - cy);
        out.push_back({rx0, ry0, rx1, ry1});
      }
    }
  };
  double gx = ox;
  for (int gi : glyph_ids) {
    place(gx, oy, gi);
    gx += glyph_w + gap;
  }
  double minx = 1e30, miny = 1e30, maxx = -1e30, maxy = -1e30;
  for (const Seg& s : out) {
    minx = std::min({minx, s.x0, s.x1});
    maxx = std::max({maxx, s.x0, s.x1});
    miny = std::min({miny, s.y0, s.y1});
    maxy = std::max({maxy, s.y0, s.y1});
  }
  const double r = stroke / 2.0;
  int bx0 = std::max(0, int(std::floor(minx - r)));
  int by0 = std::max(0, int(std::floor(miny - r)));
  int bx1 = std::min(W - 1, int(std::ceil(maxx + r)));
  int by1 = std::min(H - 1, int(std::ceil(maxy + r)));
  return Box{bx0, by0, bx1 - bx0 + 1, by1 - by0 + 1};
}

inline RgbImage quantize(const std::vector<double>& canvas, int W, int H) {
  RgbImage img(W, H);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double v = std::clamp(canvas[std::size_t(y) * std::size_t(W) + std::size_t(x)],
                                  0.0, 1.0);
      const auto q = std::uint8_t(std::lround(v * 255.0));
      img.set(x, y, q, q, q);
    }
  return img;
}

inline void apply_view_noise(std::vector<double>& canvas, int W, int H, Rng& rng,
                             const SynthConfig& cfg) {
  if (cfg.illumination) {
    const double k = rng.uniform(0.05, 0.30);
    const double phi = rng.uniform(0.0, 6.28318530717958647692);
    const double cx = std::cos(phi), cy = std::sin(phi);
    const double span = std::abs(cx) * W + std::abs(cy) * H;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double proj = (cx * x + cy * y + span) / (2.0 * span);
        canvas[std::size_t(y) * std::size_t(W) + std::size_t(x)] *= 1.0 - k * proj;
      }
  }
  if (cfg.gauss_sigma > 0.0) {
    for (double& v : canvas) v = std::clamp(v + rng.normal() * cfg.gauss_sigma, 0.0, 1.0);
  }
  if (cfg.invert_prob > 0.0 && rng.bernoulli(cfg.invert_prob)) {
    for (double& v : canvas) v = 1.0 - v;
  }
}

inline std::vector<std::string> assign_splits(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(Rng::mix(seed, 0x5eedull));
  rng.shuffle(order);
  const auto n_test = std::size_t(std::lround(0.15 * double(n)));
  const auto n_val = std::size_t(std::lround(0.05 * double(n)));
  std::vector<std::string> split(n, "train");
  for (std::size_t i = 0; i < n_test && i < n; ++i) split[order[i]] = "test";
  for (std::size_t i = n_test; i < n_test + n_val && i < n; ++i) split[order[i]] = "val";
  return split;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Word-image generation.

namespace detail {

struct LayoutWord {
  std::vector<int> glyph_ids;
  int label = 0;
  double stroke = 1.0;
};

struct Layout {
  std::vector<LayoutWord> words;
  double glyph_h = 20.0;
  double base_stroke = 1.0;
  double bold_mult = 2.0;
};

inline Layout make_layout(Rng& rng, const SynthConfig& cfg) {
  Layout lay;
  const double var = cfg.words_std * cfg.words_std;
  const double m2 = cfg.words_mean * cfg.words_mean;
  const double sigma2 = std::log(1.0 + var / m2);
  const double mu = std::log(cfg.words_mean) - sigma2 / 2.0;
  const double draw = std::min(std::exp(mu + std::sqrt(sigma2) * rng.normal()), 1e6);
  const int n_words =
      int(std::clamp<long>(std::lround(draw), cfg.words_min, cfg.words_max));

  lay.base_stroke = rng.uniform(cfg.stroke_min, cfg.stroke_max);
  lay.bold_mult = rng.uniform(cfg.bold_mult_min, cfg.bold_mult_max);
  const double bold_stroke_max = lay.base_stroke * lay.bold_mult * 1.03;
  lay.glyph_h = std::max(rng.uniform(16.0, 26.0), 3.5 * bold_stroke_max);

  const auto n_glyph_shapes = std::int64_t(glyphs::alphabet().size());
  lay.words.resize(std::size_t(n_words));
  for (auto& w : lay.words) {
    const int n_g = int(rng.uniform_int(3, 10));
    w.glyph_ids.resize(std::size_t(n_g));
    for (auto& g : w.glyph_ids) g = int(rng.uniform_int(0, n_glyph_shapes - 1));
    w.label = rng.bernoulli(cfg.bold_ratio) ? 1 : 0;
    // +-3% jitter keeps bold strictly thicker than non-bold (mult >= 1.4)
    const double jitter = rng.uniform(0.97, 1.03);
    w.stroke = (w.label ? lay.base_stroke * lay.bold_mult : lay.base_stroke) * jitter;
  }
  return lay;
}

struct Placement {
  double x, y;
};

/// Flows words left-to-right with wrapping; returns origins and the canvas
/// height needed (capped by shrinking glyphs).
inline std::vector<Placement> plan_layout(Layout& lay, const SynthConfig& cfg,
                                          int& canvas_h_out) {
  for (;;) {
    const double gh = lay.glyph_h;
    const double gw = 0.62 * gh;
    const double gap = std::max(1.0, 0.12 * gh);
    const double space = 0.55 * gh;
    const double margin = 6.0 + lay.base_stroke * lay.bold_mult;
    const double pitch = gh + std::max(6.0, 0.45 * gh);
    std::vector<Placement> out;
    out.reserve(lay.words.size());
    double x = margin, y = margin;
    for (const auto& w : lay.words) {
      const double ww = double(w.glyph_ids.size()) * (gw + gap) - gap;
      if (x + ww > double(cfg.canvas_width) - margin && x > margin) {
        x = margin;
        y += pitch;
      }
      out.push_back({x, y});
      x += ww + space;
    }
    const int need_h = int(std::ceil(y + gh + margin));
    if (need_h <= cfg.max_canvas_height || lay.glyph_h <= 8.0) {
      canvas_h_out = std::max(need_h, 32);
      return out;
    }
    lay.glyph_h *= 0.85;  // shrink and retry
  }
}

}  // namespace detail

/// Renders every view of every layout into out_dir and writes manifest.json.
/// (seed, cfg) fully determine the output bytes.
inline SynthManifest generate_dataset(const SynthConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IoError("generate_dataset: cannot create " + out_dir);

  const auto splits = detail::assign_splits(std::size_t(cfg.images), cfg.seed);
  SynthManifest manifest;
  manifest.images.resize(std::size_t(cfg.images) * std::size_t(cfg.views));

  parallel_for(std::size_t(cfg.images), [&](std::size_t li) {
    Rng lay_rng(Rng::mix(cfg.seed, li));
    detail::Layout lay = detail::make_layout(lay_rng, cfg);
    int canvas_h = 0;
    const auto placements = detail::plan_layout(lay, cfg, canvas_h);
    const int W = cfg.canvas_width, H = canvas_h;

    for (int view = 0; view < cfg.views; ++view) {
      Rng view_rng(Rng::mix(Rng::mix(cfg.seed, li), 0x100 + std::uint64_t(view)));
      const double bg = view_rng.uniform(0.72, 0.95);
      const double ink = view_rng.uniform(0.03, 0.25);
      const double angle =
          cfg.rotation_deg > 0.0
              ? view_rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) * (3.14159265358979 / 180.0)
              : 0.0;

      std::vector<double> canvas(std::size_t(W) * std::size_t(H), bg);
      SynthImageRecord rec;
      char name[64];
      std::snprintf(name, sizeof name, "img_%05zu_v%02d.ppm", li, view);
      rec.file = name;
      rec.split = splits[li];

      const double gh = lay.glyph_h;
      const double gw = 0.62 * gh;
      const double gap = std::max(1.0, 0.12 * gh);
      std::vector<detail::Seg> segs;
      for (std::size_t wi = 0; wi < lay.words.size(); ++wi) {
        const auto& w = lay.words[wi];
        const Box box =
            detail::word_segments(segs, w.glyph_ids, placements[wi].x, placements[wi].y, gh, gw,
                                  gap, angle, w.stroke, W, H);
        for (const auto& s : segs) detail::draw_segment(canvas, W, H, s, w.stroke / 2.0, ink);
        rec.words.push_back({box, w.label, w.stroke});
      }
      detail::apply_view_noise(canvas, W, H, view_rng, cfg);
      const RgbImage img = detail::quantize(canvas, W, H);
      write_ppm((fs::path(out_dir) / rec.file).string(), img);
      manifest.images[li * std::size_t(cfg.views) + std::size_t(view)] = std::move(rec);
    }
  });

  // manifest.json (fixed schema; metadata like stroke width stays in memory)
  nlohmann::ordered_json root;
  root["images"] = nlohmann::ordered_json::array();
  for (const auto& im : manifest.images) {
    nlohmann::ordered_json jim;
    jim["file"] = im.file;
    jim["split"] = im.split;
    jim["words"] = nlohmann::ordered_json::array();
    for (const auto& w : im.words) {
      nlohmann::ordered_json jw;
      jw["box"] = {w.box.x, w.box.y, w.box.w, w.box.h};
      jw["label"] = w.label;
      jim["words"].push_back(std::move(jw));
    }
    root["images"].push_back(std::move(jim));
  }
  std::ofstream mf(fs::path(out_dir) / "manifest.json", std::ios::binary);
  if (!mf) throw IoError("generate_dataset: cannot write manifest");
  mf << root.dump(2) << "\n";
  if (!mf) throw IoError("generate_dataset: short manifest write");
  return manifest;
}

// ---------------------------------------------------------------------------
// Rock-paper-scissors: 2-element sequences; per-element target is 1 iff
// that element wins (draws are [0,0]).

enum class RpsHand { Rock = 0, Paper = 1, Scissors = 2 };

inline std::pair<int, int> rps_targets(RpsHand a, RpsHand b) {
  if (a == b) return {0, 0};
  const bool first_wins = (a == RpsHand::Rock && b == RpsHand::Scissors) ||
                          (a == RpsHand::Scissors && b == RpsHand::Paper) ||
                          (a == RpsHand::Paper && b == RpsHand::Rock);
  return first_wins ? std::pair<int, int>{1, 0} : std::pair<int, int>{0, 1};
}

namespace detail {

/// Distinct stroke topologies: rock = concentric rings, paper = page with
/// text lines, scissors = crossing blades with handle rings.
inline void rps_icon_segments(std::vector<Seg>& out, RpsHand hand, double cx, double cy,
                              double size, double angle) {
  out.clear();
  auto ring = [&](double rx, double ry, double radius, int sides) {
    for (int i = 0; i < sides; ++i) {
      const double a0 = 6.283185307179586 * double(i) / sides;
      const double a1 = 6.283185307179586 * double(i + 1) / sides;
      out.push_back({rx + radius * std::cos(a0), ry + radius * std::sin(a0),
                     rx + radius * std::cos(a1), ry + radius * std::sin(a1)});
    }
  };
  const double s = size / 2.0;
  switch (hand) {
    case RpsHand::Rock:
      ring(cx, cy, s * 0.85, 12);
      ring(cx, cy, s * 0.55, 10);
      ring(cx, cy, s * 0.25, 8);
      break;
    case RpsHand::Paper: {
      const double x0 = cx - s * 0.7, x1 = cx + s * 0.7;
      const double y0 = cy - s * 0.9, y1 = cy + s * 0.9;
      out.push_back({x0, y0, x1, y0});
      out.push_back({x1, y0, x1, y1});
      out.push_back({x1, y1, x0, y1});
      out.push_back({x0, y1, x0, y0});
      for (int i = 1; i <= 3; ++i) {
        const double yy = y0 + (y1 - y0) * double(i) / 4.0;
        out.push_back({x0 + s * 0.2, yy, x1 - s * 0.2, yy});
      }
      break;
    }
    case RpsHand::Scissors:
      out.push_back({cx - s * 0.6, cy + s * 0.9, cx + s * 0.55, cy - s * 0.9});
      out.push_back({cx + s * 0.6, cy + s * 0.9, cx - s * 0.55, cy - s * 0.9});
      ring(cx - s * 0.7, cy + s * 0.95, s * 0.18, 8);
      ring(cx + s * 0.7, cy + s * 0.95, s * 0.18, 8);
      break;
  }
  if (angle != 0.0) {
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (Seg& sg : out) {
      const double rx0 = cx + ca * (sg.x0 - cx) - sa * (sg.y0 - cy);
      const double ry0 = cy + sa * (sg.x0 - cx) + ca * (sg.y0 - cy);
      const double rx1 = cx + ca * (sg.x1 - cx) - sa * (sg.y1 - cy);
      const double ry1 = cy + sa * (sg.x1 - cx) + ca * (sg.y1 - cy);
      sg = {rx0, ry0, rx1, ry1};
    }
  }
}

}  // namespace detail

/// Two-icon game images with per-element win targets; same manifest schema.
inline SynthManifest generate_rps(const SynthConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IoError("generate_rps: cannot create " + out_dir);

  const auto splits = detail::assign_splits(std::size_t(cfg.images), cfg.seed);
  SynthManifest manifest;
  manifest.images.resize(std::size_t(cfg.images));

  const int icon = cfg.rps_icon;
  const int gapv = 6;
  const int W = 2 * icon + 3 * gapv, H = icon + 2 * gapv;

  parallel_for(std::size_t(cfg.images), [&](std::size_t i) {
    Rng rng(Rng::mix(Rng::mix(cfg.seed, 0x8995ull), i));
    const auto a = RpsHand(rng.uniform_int(0, 2));
    const auto b = RpsHand(rng.uniform_int(0, 2));
    const auto [ta, tb] = rps_targets(a, b);
    const double bg = rng.uniform(0.72, 0.95);
    const double ink = rng.uniform(0.03, 0.25);
    std::vector<double> canvas(std::size_t(W) * std::size_t(H), bg);

    SynthImageRecord rec;
    char name[64];
    std::snprintf(name, sizeof name, "rps_%06zu.ppm", i);
    rec.file = name;
    rec.split = splits[i];

    std::vector<detail::Seg> segs;
    for (int e = 0; e < 2; ++e) {
      const double scale = rng.uniform(0.78, 0.95);
      const double angle = cfg.rotation_deg > 0.0
                               ? rng.uniform(-2.0, 2.0) * cfg.rotation_deg * 0.125
                               : 0.0;
      const double stroke = rng.uniform(2.0, 3.5);
      const double cx = gapv + icon / 2.0 + e * (icon + gapv) + rng.uniform(-2.0, 2.0);
      const double cy = gapv + icon / 2.0 + rng.uniform(-2.0, 2.0);
      detail::rps_icon_segments(segs, e == 0 ? a : b, cx, cy, icon * scale, angle);
      double minx = 1e30, miny = 1e30, maxx = -1e30, maxy = -1e30;
      for (const auto& sg : segs) {
        minx = std::min({minx, sg.x0, sg.x1});
        maxx = std::max({maxx, sg.x0, sg.x1});
        miny = std::min({miny, sg.y0, sg.y1});
        maxy = std::max({maxy, sg.y0, sg.y1});
      }
      for (const auto& sg : segs) detail::draw_segment(canvas, W, H, sg, stroke / 2.0, ink);
      const double r = stroke / 2.0;
      Box box{std::max(0, int(std::floor(minx - r))), std::max(0, int(std::floor(miny - r))), 0,
              0};
      box.w = std::min(W - 1, int(std::ceil(maxx + r))) - box.x + 1;
      box.h = std::min(H - 1, int(std::ceil(maxy + r))) - box.y + 1;
      rec.words.push_back({box, e == 0 ? ta : tb, stroke});
    }
    detail::apply_view_noise(canvas, W, H, rng, cfg);
    write_ppm((fs::path(out_dir) / rec.file).string(), detail::quantize(canvas, W, H));
    manifest.images[i] = std::move(rec);
  });

  nlohmann::ordered_json root;
  root["images"] = nlohmann::ordered_json::array();
  for (const auto& im : manifest.images) {
    nlohmann::ordered_json jim;
    jim["file"] = im.file;
    jim["split"] = im.split;
    jim["words"] = nlohmann::ordered_json::array();
    for (const auto& w : im.words) {
      nlohmann::ordered_json jw;
      jw["box"] = {w.box.x, w.box.y, w.box.w, w.box.h};
      jw["label"] = w.label;
      jim["words"].push_back(std::move(jw));
    }
    root["images"].push_back(std::move(jim));
  }
  std::ofstream mf(fs::path(out_dir) / "manifest.json", std::ios::binary);
  if (!mf) throw IoError("generate_rps: cannot write manifest");
  mf << root.dump(2) << "\n";
  return manifest;
}

// ---------------------------------------------------------------------------
// Loading. The manifest parses eagerly; images load lazily, with box
// bounds validated against the actual raster on access.

class Dataset {
 public:
  Dataset(std::string dir, SynthManifest manifest)
      : dir_(std::move(dir)), manifest_(std::move(manifest)) {}

  const SynthManifest& manifest() const { return manifest_; }
  const std::string& dir() const { return dir_; }
  std::size_t size() const { return manifest_.images.size(); }

  const SynthImageRecord& record(std::size_t i) const { return manifest_.images[i]; }

  /// Loads one image and validates its word boxes against the raster.
  RgbImage load_image(std::size_t i) const {
    const auto& rec = manifest_.images[i];
    const std::string path = (std::filesystem::path(dir_) / rec.file).string();
    if (!std::filesystem::exists(path)) throw IoError("dataset: missing image file " + path);
    RgbImage img = read_ppm(path);
    for (const auto& w : rec.words) {
      if (w.box.x < 0 || w.box.y < 0 || w.box.w <= 0 || w.box.h <= 0 ||
          w.box.x + w.box.w > img.width() || w.box.y + w.box.h > img.height())
        throw ValidationError("dataset: box out of bounds in " + rec.file);
    }
    return img;
  }

  std::vector<std::size_t> split_indices(const std::string& split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < manifest_.images.size(); ++i)
      if (manifest_.images[i].split == split) out.push_back(i);
    return out;
  }

 private:
  std::string dir_;
  SynthManifest manifest_;
};

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string mpath = (fs::path(dir) / "manifest.json").string();
  std::ifstream mf(mpath, std::ios::binary);
  if (!mf) throw IoError("load_dataset: cannot open " + mpath);
  nlohmann::json root;
  try {
    mf >> root;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("load_dataset: malformed manifest: ") + e.what());
  }
  SynthManifest manifest;
  try {
    if (!root.is_object() || !root.contains("images") || !root["images"].is_array())
      throw ValidationError("load_dataset: manifest must contain an images array");
    for (const auto& jim : root["images"]) {
      SynthImageRecord rec;
      rec.file = jim.at("file").get<std::string>();
      rec.split = jim.at("split").get<std::string>();
      if (rec.split != "train" && rec.split != "test" && rec.split != "val")
        throw ValidationError("load_dataset: unknown split '" + rec.split + "'");
      for (const auto& jw : jim.at("words")) {
        WordRecord w;
        const auto& jb = jw.at("box");
        if (!jb.is_array() || jb.size() != 4)
          throw ValidationError("load_dataset: box must be [x,y,w,h]");
        w.box = Box{jb[0].get<int>(), jb[1].get<int>(), jb[2].get<int>(), jb[3].get<int>()};
        w.label = jw.at("label").get<int>();
        if (w.label != 0 && w.label != 1)
          throw ValidationError("load_dataset: label must be 0 or 1");
        rec.words.push_back(w);
      }
      manifest.images.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("load_dataset: malformed manifest: ") + e.what());
  }
  return Dataset(dir, std::move(manifest));
}

}  // namespace consent
