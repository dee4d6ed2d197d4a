#pragma once

// Optimization loop: Adam over shuffled sequence batches, BCE or focal
// loss, gradient clipping, best-val-F1 checkpointing. Fully deterministic
// for a fixed (seed, config, dataset): batches are walked in a seeded
// order and per-sequence gradients are reduced in sequence order no
// matter how many worker threads computed them.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "consent/common.hpp"
#include "consent/metrics.hpp"
#include "consent/model.hpp"
#include "consent/morphology.hpp"
#include "consent/synth.hpp"

namespace consent {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 8;
  double lr = 3e-4;
  double beta1 = 0.9, beta2 = 0.999;
  double adam_eps = 1e-8;

  enum class Loss { Bce, Focal };
  Loss loss = Loss::Focal;
  double gamma = 2.0;        // focal focusing parameter
  double alpha_bold = 0.75;  // focal bold-class weight

  std::uint64_t seed = 0;
  double clip_norm = 1.0;  // global gradient norm cap; 0 disables
  int checkpoint_every = 0;
  std::size_t max_train_sequences = 0;  // 0 = use the full split
  bool shuffle_words_in_chunks = false;

  void validate() const {
    if (epochs <= 0 || batch_size <= 0) throw ValidationError("train: epochs/batch must be > 0");
    if (lr < 0.0) throw ValidationError("train: negative learning rate");
    if (clip_norm < 0.0) throw ValidationError("train: negative clip norm");
  }
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_f1 = 0.0;
  double wall_ms = 0.0;
  std::string rng_digest;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_val_f1 = -1.0;
};

// ---------------------------------------------------------------------------
// Split preparation: images -> block sequences plus per-image word truth.

struct SplitData {
  SequenceBatch seqs;                        // image_index is local to this split
  std::vector<std::vector<int>> word_truth;  // [local image][word id] = label
  std::vector<std::size_t> dataset_indices;  // local image -> dataset index
};

inline SplitData prepare_split(const Dataset& ds, const std::string& split,
                               const ModelConfig& cfg, std::size_t max_sequences = 0,
                               Rng* chunk_shuffle = nullptr) {
  SplitData out;
  for (std::size_t idx : ds.split_indices(split)) {
    const auto& rec = ds.record(idx);
    const RgbImage img = ds.load_image(idx);
    std::vector<Box> boxes;
    std::vector<int> labels;
    for (const auto& w : rec.words) {
      boxes.push_back(w.box);
      labels.push_back(w.label);
    }
    const int local = int(out.word_truth.size());
    auto seqs = build_sequences(img, boxes, labels, cfg, local, chunk_shuffle);
    out.word_truth.push_back(labels);
    out.dataset_indices.push_back(idx);
    for (auto& s : seqs) out.seqs.push_back(std::move(s));
    if (max_sequences > 0 && out.seqs.size() >= max_sequences) {
      out.seqs.resize(max_sequences);
      break;
    }
  }
  return out;
}

/// Runs the model over every sequence (worker pool, outputs slotted per
/// sequence) and aggregates block probabilities into word labels per image.
inline std::vector<std::vector<int>> predict_word_labels(const ConsentModel& model,
                                                         const SplitData& data) {
  std::vector<Tensor> probs(data.seqs.size());
  parallel_for(data.seqs.size(), [&](std::size_t i) {
    probs[i] = consent_forward(model, data.seqs[i]);
  });

  std::vector<std::vector<double>> sums(data.word_truth.size());
  std::vector<std::vector<std::size_t>> counts(data.word_truth.size());
  for (std::size_t i = 0; i < data.word_truth.size(); ++i) {
    sums[i].assign(data.word_truth[i].size(), 0.0);
    counts[i].assign(data.word_truth[i].size(), 0);
  }
  for (std::size_t si = 0; si < data.seqs.size(); ++si) {
    const PatchSequence& seq = data.seqs[si];
    const std::size_t im = std::size_t(seq.image_index);
    for (std::size_t k = 0; k < seq.length(); ++k) {
      if (!seq.mask[k]) continue;
      const int wi = seq.word_ids[k];
      if (wi < 0 || std::size_t(wi) >= sums[im].size())
        throw ValidationError("predict: unknown word id " + std::to_string(wi));
      sums[im][std::size_t(wi)] += probs[si](k, 1);
      ++counts[im][std::size_t(wi)];
    }
  }
  std::vector<std::vector<int>> labels(sums.size());
  for (std::size_t i = 0; i < sums.size(); ++i) {
    labels[i].assign(sums[i].size(), 0);
    for (std::size_t w = 0; w < sums[i].size(); ++w)
      if (counts[i][w] > 0 && sums[i][w] / double(counts[i][w]) >= 0.5) labels[i][w] = 1;
  }
  return labels;
}

inline std::vector<ImageEval> to_image_evals(const std::vector<std::vector<int>>& preds,
                                             const std::vector<std::vector<int>>& truths) {
  if (preds.size() != truths.size()) throw ValidationError("eval: image count mismatch");
  std::vector<ImageEval> out(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (std::size_t w = 0; w < preds[i].size(); ++w)
      out[i].pred.emplace_back(int(w), preds[i][w]);
    for (std::size_t w = 0; w < truths[i].size(); ++w)
      out[i].truth.emplace_back(int(w), truths[i][w]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient plumbing.

namespace detail {

/// Per-sequence loss + gradients, aligned with the parameter registry.
struct SeqGrads {
  double loss = 0.0;
  std::vector<std::vector<double>> grads;
};

inline SeqGrads sequence_gradients(const ConsentModel& model,
                                   std::vector<std::pair<std::string, Tensor*>>& params,
                                   const PatchSequence& seq, const TrainConfig& cfg) {
  GradTape tape;
  const Tensor probs = consent_forward(model, seq);
  const Tensor loss = cfg.loss == TrainConfig::Loss::Bce
                          ? bce_loss(probs, seq.labels, seq.mask)
                          : focal_loss(probs, seq.labels, seq.mask, cfg.gamma, cfg.alpha_bold);
  SeqGrads out;
  out.loss = loss.value();
  GradMap grads = tape.backward(loss);
  out.grads.reserve(params.size());
  for (auto& [name, t] : params) {
    const Tensor g = grads.grad(*t);
    out.grads.emplace_back(g.data().begin(), g.data().end());
  }
  return out;
}

}  // namespace detail

/// Scales gradients in place so the global L2 norm is at most `clip`.
/// Returns the post-clip norm.
inline double clip_global_norm(std::vector<std::vector<double>>& grads, double clip) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("train: non-finite gradient norm");
  if (clip <= 0.0 || norm <= clip) return norm;
  const double s = clip / norm;
  for (auto& g : grads)
    for (double& v : g) v *= s;
  return clip;
}

// ---------------------------------------------------------------------------
// The training loop.

struct TrainResult {
  ConsentModel model;  // best val-F1 parameters
  TrainLog log;
};

using CheckpointFn = std::function<void(int epoch, ConsentModel& model)>;

inline TrainResult train(ConsentModel model, const Dataset& ds, const TrainConfig& cfg,
                         const CheckpointFn& checkpoint = nullptr) {
  cfg.validate();
  Rng chunk_rng(Rng::mix(cfg.seed, 0xC11Cull));
  Rng* chunk = cfg.shuffle_words_in_chunks ? &chunk_rng : nullptr;
  SplitData train_data =
      prepare_split(ds, "train", model.cfg, cfg.max_train_sequences, chunk);
  SplitData val_data = prepare_split(ds, "val", model.cfg);
  if (train_data.seqs.empty()) throw ValidationError("train: empty train split");
  if (val_data.seqs.empty()) throw ValidationError("train: empty val split");

  auto params = model.parameters();
  std::vector<std::vector<double>> adam_m(params.size()), adam_v(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    adam_m[p].assign(params[p].second->size(), 0.0);
    adam_v[p].assign(params[p].second->size(), 0.0);
  }

  TrainResult result;
  result.model = model;  // snapshot of handles; replaced on improvement
  Rng order_rng(Rng::mix(cfg.seed, 0x50bull));

  std::vector<std::size_t> order(train_data.seqs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    order_rng.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += std::size_t(cfg.batch_size)) {
      const std::size_t bn = std::min(order.size() - b0, std::size_t(cfg.batch_size));
      std::vector<detail::SeqGrads> results(bn);
      parallel_for(bn, [&](std::size_t i) {
        results[i] = detail::sequence_gradients(model, params, train_data.seqs[order[b0 + i]],
                                                cfg);
      });

      // fixed-order reduction: mean loss and mean gradient over the batch
      double batch_loss = 0.0;
      std::vector<std::vector<double>> acc(params.size());
      for (std::size_t p = 0; p < params.size(); ++p)
        acc[p].assign(params[p].second->size(), 0.0);
      for (std::size_t i = 0; i < bn; ++i) {
        batch_loss += results[i].loss;
        for (std::size_t p = 0; p < params.size(); ++p) {
          const auto& g = results[i].grads[p];
          for (std::size_t j = 0; j < g.size(); ++j) acc[p][j] += g[j];
        }
      }
      batch_loss /= double(bn);
      if (!std::isfinite(batch_loss)) throw NumericError("train: NaN loss");
      for (auto& g : acc)
        for (double& v : g) v /= double(bn);
      clip_global_norm(acc, cfg.clip_norm);

      // Adam
      ++step;
      const double bc1 = 1.0 - std::pow(cfg.beta1, double(step));
      const double bc2 = 1.0 - std::pow(cfg.beta2, double(step));
      for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor* t = params[p].second;
        std::vector<double> data(t->data().begin(), t->data().end());
        for (std::size_t j = 0; j < data.size(); ++j) {
          adam_m[p][j] = cfg.beta1 * adam_m[p][j] + (1.0 - cfg.beta1) * acc[p][j];
          adam_v[p][j] = cfg.beta2 * adam_v[p][j] + (1.0 - cfg.beta2) * acc[p][j] * acc[p][j];
          const double mhat = adam_m[p][j] / bc1;
          const double vhat = adam_v[p][j] / bc2;
          data[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
        *t = Tensor::from_data(t->shape(), std::move(data), true);
      }

      epoch_loss += batch_loss;
      ++batches;
    }

    const auto preds = predict_word_labels(model, val_data);
    const EvalReport rep = evaluate(to_image_evals(preds, val_data.word_truth), "val");
    const auto t1 = std::chrono::steady_clock::now();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / double(batches);
    rec.val_f1 = rep.f1;
    rec.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    rec.rng_digest = order_rng.digest();
    result.log.epochs.push_back(rec);

    if (rep.f1 > result.log.best_val_f1) {
      result.log.best_val_f1 = rep.f1;
      result.log.best_epoch = epoch;
      result.model = model;  // immutable tensors: handle copies snapshot
    }
    if (checkpoint && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
      checkpoint(epoch, model);
  }
  return result;
}

inline nlohmann::ordered_json train_log_to_json(const TrainLog& log) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& e : log.epochs)
    j.push_back({{"epoch", e.epoch},
                 {"train_loss", e.train_loss},
                 {"val_f1", e.val_f1},
                 {"wall_ms", e.wall_ms},
                 {"rng_digest", e.rng_digest}});
  return j;
}

// ---------------------------------------------------------------------------
// Morphology-baseline alpha validation: grid search on the val split.

/// Thickness statistics per image of a split, computed once.
inline std::vector<ImageThicknessStats> split_thickness_stats(const Dataset& ds,
                                                              const std::string& split) {
  const auto indices = ds.split_indices(split);
  std::vector<ImageThicknessStats> stats(indices.size());
  parallel_for(indices.size(), [&](std::size_t i) {
    const auto& rec = ds.record(indices[i]);
    const GrayImage gray = ds.load_image(indices[i]).to_gray();
    ImageThicknessStats st;
    for (std::size_t w = 0; w < rec.words.size(); ++w)
      st.profiles.push_back(thickness(gray.crop(rec.words[w].box), int(w)));
    stats[i] = std::move(st);
  });
  return stats;
}

inline std::vector<std::vector<int>> baseline_predict(
    const std::vector<ImageThicknessStats>& stats, double alpha,
    SigmaMode mode = SigmaMode::PooledSamples) {
  std::vector<std::vector<int>> preds(stats.size());
  for (std::size_t i = 0; i < stats.size(); ++i) {
    try {
      preds[i] = vote(stats[i], alpha, mode);
    } catch (const ValidationError&) {
      // image unusable for the baseline (every profile empty): all non-bold
      preds[i].assign(stats[i].profiles.size(), 0);
    }
  }
  return preds;
}

inline const std::vector<double>& default_alpha_grid() {
  static const std::vector<double> grid = {0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0};
  return grid;
}

/// Best grid alpha by bold-class F1 on the validation split; ties go to
/// the smaller alpha.
inline double validate_alpha(const Dataset& ds,
                             const std::vector<double>& grid = default_alpha_grid(),
                             SigmaMode mode = SigmaMode::PooledSamples) {
  if (grid.empty()) throw ValidationError("validate_alpha: empty grid");
  const auto indices = ds.split_indices("val");
  if (indices.empty()) throw ValidationError("validate_alpha: empty val split");
  const auto stats = split_thickness_stats(ds, "val");
  std::vector<std::vector<int>> truths(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& rec = ds.record(indices[i]);
    for (const auto& w : rec.words) truths[i].push_back(w.label);
  }
  double best_alpha = 0.0, best_f1 = -1.0;
  for (double alpha : grid) {
    const auto preds = baseline_predict(stats, alpha, mode);
    const EvalReport rep = evaluate(to_image_evals(preds, truths), "alpha-grid");
    if (rep.f1 > best_f1 || (rep.f1 == best_f1 && alpha < best_alpha)) {
      best_f1 = rep.f1;
      best_alpha = alpha;
    }
  }
  return best_alpha;
}

}  // namespace consent
