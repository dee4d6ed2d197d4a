#pragma once

// Dataset-level evaluation drivers for both methods, plus the
// embed-size x stacks ablation harness.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "consent/metrics.hpp"
#include "consent/train.hpp"

namespace consent {

/// Ground-truth labels per image of a split.
inline std::vector<std::vector<int>> split_truth(const Dataset& ds, const std::string& split) {
  std::vector<std::vector<int>> out;
  for (std::size_t idx : ds.split_indices(split)) {
    const auto& rec = ds.record(idx);
    std::vector<int> labels;
    for (const auto& w : rec.words) labels.push_back(w.label);
    out.push_back(std::move(labels));
  }
  return out;
}

inline EvalReport evaluate_model_on_split(const ConsentModel& model, const Dataset& ds,
                                          const std::string& split,
                                          const std::string& method = "consent") {
  const SplitData data = prepare_split(ds, split, model.cfg);
  if (data.word_truth.empty()) throw ValidationError("evaluate: split '" + split + "' is empty");
  const auto preds = predict_word_labels(model, data);
  return evaluate(to_image_evals(preds, data.word_truth), method);
}

inline EvalReport evaluate_baseline_on_split(const Dataset& ds, const std::string& split,
                                             double alpha,
                                             SigmaMode mode = SigmaMode::PooledSamples) {
  const auto truths = split_truth(ds, split);
  if (truths.empty()) throw ValidationError("evaluate: split '" + split + "' is empty");
  const auto stats = split_thickness_stats(ds, split);
  const auto preds = baseline_predict(stats, alpha, mode);
  return evaluate(to_image_evals(preds, truths), "baseline-vote");
}

/// Sanity path: the truth scored against itself must be all ones.
inline EvalReport evaluate_truth_on_split(const Dataset& ds, const std::string& split) {
  const auto truths = split_truth(ds, split);
  if (truths.empty()) throw ValidationError("evaluate: split '" + split + "' is empty");
  return evaluate(to_image_evals(truths, truths), "truth");
}

// ---------------------------------------------------------------------------
// Ablation harness: one trained model per (embed_dim, stacks) cell with a
// shared TrainConfig; per-cell seeds derive from (base seed, cell index).

struct AblationCell {
  int embed_dim = 0;
  int stacks = 0;
  double f1 = 0.0;
  bool failed = false;
  std::string error;
};

struct AblationGrid {
  std::vector<int> embed_dims;
  std::vector<int> stack_counts;
  std::vector<AblationCell> cells;  // row-major: stacks x dims
  int best_index = -1;

  const AblationCell* best() const {
    return best_index >= 0 ? &cells[std::size_t(best_index)] : nullptr;
  }
};

inline std::uint64_t ablate_cell_seed(std::uint64_t base_seed, std::size_t cell_index) {
  return Rng::mix(base_seed, 0xAB1A7E00ull + cell_index);
}

inline AblationGrid ablate(const Dataset& ds, const std::vector<int>& embed_dims,
                           const std::vector<int>& stack_counts, const ModelConfig& proto,
                           const TrainConfig& shared_except_seed) {
  if (embed_dims.empty() || stack_counts.empty())
    throw ValidationError("ablate: empty dimension grid");
  AblationGrid grid;
  grid.embed_dims = embed_dims;
  grid.stack_counts = stack_counts;
  grid.cells.resize(embed_dims.size() * stack_counts.size());

  std::size_t index = 0;
  double best_f1 = -1.0;
  for (int stacks : stack_counts) {
    for (int dim : embed_dims) {
      AblationCell cell;
      cell.embed_dim = dim;
      cell.stacks = stacks;
      const std::uint64_t cell_seed = ablate_cell_seed(shared_except_seed.seed, index);
      try {
        ModelConfig cfg = proto;
        cfg.embed_dim = dim;
        cfg.num_stacks = stacks;
        cfg.ffn_hidden = 0;  // track 4 * embed_dim
        cfg.validate();
        TrainConfig tcfg = shared_except_seed;
        tcfg.seed = cell_seed;
        TrainResult res = train(init_model(cfg, cell_seed), ds, tcfg);
        cell.f1 = evaluate_model_on_split(res.model, ds, "val").f1;
      } catch (const Error& e) {
        cell.failed = true;
        cell.error = e.what();
      }
      if (!cell.failed && cell.f1 > best_f1) {
        best_f1 = cell.f1;
        grid.best_index = int(index);
      }
      grid.cells[index] = std::move(cell);
      ++index;
    }
  }
  return grid;
}

inline nlohmann::ordered_json ablation_to_json(const AblationGrid& grid) {
  nlohmann::ordered_json j;
  j["embed_dims"] = grid.embed_dims;
  j["stack_counts"] = grid.stack_counts;
  j["cells"] = nlohmann::ordered_json::array();
  for (const auto& c : grid.cells) {
    nlohmann::ordered_json jc;
    jc["embed_dim"] = c.embed_dim;
    jc["stacks"] = c.stacks;
    if (c.failed) {
      jc["failed"] = true;
      jc["error"] = c.error;
    } else {
      jc["f1"] = c.f1;
    }
    j["cells"].push_back(std::move(jc));
  }
  j["best_index"] = grid.best_index;
  return j;
}

inline std::string ablation_to_text(const AblationGrid& grid) {
  std::string out = "f1 by (stacks x embed_dim)\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%8s", "");
  out += buf;
  for (int d : grid.embed_dims) {
    std::snprintf(buf, sizeof buf, " d=%-6d", d);
    out += buf;
  }
  out += "\n";
  std::size_t i = 0;
  for (int s : grid.stack_counts) {
    std::snprintf(buf, sizeof buf, "T=%-6d", s);
    out += buf;
    for (std::size_t k = 0; k < grid.embed_dims.size(); ++k, ++i) {
      if (grid.cells[i].failed)
        std::snprintf(buf, sizeof buf, " %-8s", "failed");
      else
        std::snprintf(buf, sizeof buf, " %-8.4f", grid.cells[i].f1);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

}  // namespace consent
