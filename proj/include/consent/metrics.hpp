#pragma once

// Bold-class precision/recall/F1, image-level accuracy, and bold-ratio
// bucketing. Pure functions over per-image (prediction, truth) pairs.

#include <cstdint>
#include <cstdio>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "consent/common.hpp"

namespace consent {

/// One image's word labels, keyed by word id.
struct ImageEval {
  std::vector<std::pair<int, int>> pred;   // (word id, label)
  std::vector<std::pair<int, int>> truth;  // (word id, label)
};

struct BucketStat {
  double lo = 0.0, hi = 0.0;
  std::size_t images = 0;
  std::size_t correct = 0;
  double accuracy() const { return images ? double(correct) / double(images) : 0.0; }
};

struct EvalReport {
  std::string method;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  double image_accuracy = 0.0;
  std::vector<BucketStat> buckets;
};

inline const std::vector<double>& default_bucket_bounds() {
  static const std::vector<double> bounds = {0.0, 0.05, 0.1, 0.2, 0.5, 1.0};
  return bounds;
}

/// Metrics over word-level predictions; bold (label 1) is the positive
/// class. Every prediction set must cover exactly its image's truth set.
inline EvalReport evaluate(const std::vector<ImageEval>& images, const std::string& method,
                           const std::vector<double>& bucket_bounds = default_bucket_bounds()) {
  EvalReport rep;
  rep.method = method;
  for (std::size_t b = 0; b + 1 < bucket_bounds.size(); ++b)
    rep.buckets.push_back({bucket_bounds[b], bucket_bounds[b + 1], 0, 0});

  std::size_t correct_images = 0;
  for (std::size_t ix = 0; ix < images.size(); ++ix) {
    const ImageEval& im = images[ix];
    std::unordered_map<int, int> pred(im.pred.begin(), im.pred.end());
    if (pred.size() != im.pred.size())
      throw ValidationError("evaluate: duplicate predicted word id in image " +
                            std::to_string(ix));
    std::string missing, extra;
    std::unordered_map<int, int> truth(im.truth.begin(), im.truth.end());
    for (const auto& [id, label] : im.truth)
      if (!pred.count(id)) missing += " " + std::to_string(id);
    for (const auto& [id, label] : im.pred)
      if (!truth.count(id)) extra += " " + std::to_string(id);
    if (!missing.empty() || !extra.empty())
      throw ValidationError("evaluate: image " + std::to_string(ix) +
                            " coverage mismatch; missing:[" + missing + " ] extra:[" + extra +
                            " ]");

    bool all_correct = true;
    std::size_t bold_truth = 0;
    for (const auto& [id, t] : im.truth) {
      const int p = pred.at(id);
      if (t == 1) ++bold_truth;
      if (p == 1 && t == 1) ++rep.tp;
      if (p == 1 && t == 0) ++rep.fp;
      if (p == 0 && t == 1) ++rep.fn;
      if (p == 0 && t == 0) ++rep.tn;
      if (p != t) all_correct = false;
    }
    if (all_correct) ++correct_images;

    if (!im.truth.empty() && !rep.buckets.empty()) {
      const double ratio = double(bold_truth) / double(im.truth.size());
      std::size_t bi = rep.buckets.size() - 1;  // last interval is closed
      for (std::size_t b = 0; b + 1 < rep.buckets.size(); ++b) {
        if (ratio >= rep.buckets[b].lo && ratio < rep.buckets[b].hi) {
          bi = b;
          break;
        }
      }
      ++rep.buckets[bi].images;
      if (all_correct) ++rep.buckets[bi].correct;
    }
  }

  rep.precision = (rep.tp + rep.fp) ? double(rep.tp) / double(rep.tp + rep.fp) : 0.0;
  rep.recall = (rep.tp + rep.fn) ? double(rep.tp) / double(rep.tp + rep.fn) : 0.0;
  rep.f1 = (rep.precision + rep.recall) > 0.0
               ? 2.0 * rep.precision * rep.recall / (rep.precision + rep.recall)
               : 0.0;
  rep.image_accuracy = images.empty() ? 0.0 : double(correct_images) / double(images.size());
  return rep;
}

inline nlohmann::ordered_json report_to_json(const EvalReport& rep) {
  nlohmann::ordered_json j;
  j["method"] = rep.method;
  j["counts"] = {{"tp", rep.tp}, {"fp", rep.fp}, {"fn", rep.fn}, {"tn", rep.tn}};
  j["precision"] = rep.precision;
  j["recall"] = rep.recall;
  j["f1"] = rep.f1;
  j["image_accuracy"] = rep.image_accuracy;
  j["buckets"] = nlohmann::ordered_json::array();
  for (const auto& b : rep.buckets)
    j["buckets"].push_back({{"lo", b.lo},
                            {"hi", b.hi},
                            {"images", b.images},
                            {"accuracy", b.accuracy()}});
  return j;
}

inline std::string report_to_text(const EvalReport& rep) {
  char line[256];
  std::string out;
  std::snprintf(line, sizeof line, "%-18s %9s %9s %9s %10s\n", "method", "precision", "recall",
                "f1", "image-acc");
  out += line;
  std::snprintf(line, sizeof line, "%-18s %9.4f %9.4f %9.4f %10.4f\n", rep.method.c_str(),
                rep.precision, rep.recall, rep.f1, rep.image_accuracy);
  out += line;
  std::snprintf(line, sizeof line, "counts: tp=%zu fp=%zu fn=%zu tn=%zu\n", rep.tp, rep.fp,
                rep.fn, rep.tn);
  out += line;
  for (const auto& b : rep.buckets) {
    std::snprintf(line, sizeof line, "  bold-ratio [%.2f, %.2f%c  images %6zu  acc %.4f\n", b.lo,
                  b.hi, &b == &rep.buckets.back() ? ']' : ')', b.images, b.accuracy());
    out += line;
  }
  return out;
}

}  // namespace consent
