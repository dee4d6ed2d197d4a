// consent: dataset generation, training, evaluation, baseline voting,
// prediction and the ablation grid in one binary.
//
// Exit codes: 0 success, 2 config/validation error, 3 I/O error,
// 4 numerical failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "consent/eval.hpp"
#include "consent/model.hpp"
#include "consent/synth.hpp"
#include "consent/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// Config file plumbing: strict keys, CLI flags override file values.

template <typename Handler>
void walk_object(const json& j, const std::string& section, Handler&& handler) {
  if (!j.is_object())
    throw consent::ValidationError("config: section '" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!handler(key, value))
      throw consent::ValidationError("config: unknown key '" + key + "' in section '" +
                                     section + "'");
  }
}

void apply_synth_json(consent::SynthConfig& cfg, const json& j) {
  walk_object(j, "synth", [&](const std::string& k, const json& v) {
    if (k == "seed") cfg.seed = v.get<std::uint64_t>();
    else if (k == "images") cfg.images = v.get<int>();
    else if (k == "views") cfg.views = v.get<int>();
    else if (k == "words_mean") cfg.words_mean = v.get<double>();
    else if (k == "words_std") cfg.words_std = v.get<double>();
    else if (k == "words_min") cfg.words_min = v.get<int>();
    else if (k == "words_max") cfg.words_max = v.get<int>();
    else if (k == "bold_ratio") cfg.bold_ratio = v.get<double>();
    else if (k == "stroke_min") cfg.stroke_min = v.get<double>();
    else if (k == "stroke_max") cfg.stroke_max = v.get<double>();
    else if (k == "bold_mult_min") cfg.bold_mult_min = v.get<double>();
    else if (k == "bold_mult_max") cfg.bold_mult_max = v.get<double>();
    else if (k == "illumination") cfg.illumination = v.get<bool>();
    else if (k == "gauss_sigma") cfg.gauss_sigma = v.get<double>();
    else if (k == "rotation_deg") cfg.rotation_deg = v.get<double>();
    else if (k == "invert_prob") cfg.invert_prob = v.get<double>();
    else if (k == "canvas_width") cfg.canvas_width = v.get<int>();
    else if (k == "max_canvas_height") cfg.max_canvas_height = v.get<int>();
    else if (k == "rps_icon") cfg.rps_icon = v.get<int>();
    else return false;
    return true;
  });
}

void apply_model_json(consent::ModelConfig& cfg, const json& j) {
  walk_object(j, "model", [&](const std::string& k, const json& v) {
    if (k == "block_h") cfg.block_h = v.get<int>();
    else if (k == "block_w") cfg.block_w = v.get<int>();
    else if (k == "channels") cfg.channels = v.get<int>();
    else if (k == "embed_dim") cfg.embed_dim = v.get<int>();
    else if (k == "num_heads") cfg.num_heads = v.get<int>();
    else if (k == "num_stacks") cfg.num_stacks = v.get<int>();
    else if (k == "ffn_hidden") cfg.ffn_hidden = v.get<int>();
    else if (k == "max_seq_len") cfg.max_seq_len = v.get<int>();
    else if (k == "positional_encoding") cfg.positional_encoding = v.get<bool>();
    else return false;
    return true;
  });
}

void apply_train_json(consent::TrainConfig& cfg, const json& j) {
  walk_object(j, "train", [&](const std::string& k, const json& v) {
    if (k == "epochs") cfg.epochs = v.get<int>();
    else if (k == "batch_size") cfg.batch_size = v.get<int>();
    else if (k == "lr") cfg.lr = v.get<double>();
    else if (k == "beta1") cfg.beta1 = v.get<double>();
    else if (k == "beta2") cfg.beta2 = v.get<double>();
    else if (k == "adam_eps") cfg.adam_eps = v.get<double>();
    else if (k == "loss") {
      const auto s = v.get<std::string>();
      if (s == "bce") cfg.loss = consent::TrainConfig::Loss::Bce;
      else if (s == "focal") cfg.loss = consent::TrainConfig::Loss::Focal;
      else throw consent::ValidationError("config: loss must be 'bce' or 'focal'");
    } else if (k == "gamma") cfg.gamma = v.get<double>();
    else if (k == "alpha_bold") cfg.alpha_bold = v.get<double>();
    else if (k == "seed") cfg.seed = v.get<std::uint64_t>();
    else if (k == "clip_norm") cfg.clip_norm = v.get<double>();
    else if (k == "checkpoint_every") cfg.checkpoint_every = v.get<int>();
    else if (k == "max_train_sequences") cfg.max_train_sequences = v.get<std::size_t>();
    else if (k == "shuffle_words_in_chunks") cfg.shuffle_words_in_chunks = v.get<bool>();
    else return false;
    return true;
  });
}

struct FileConfig {
  json synth = json::object();
  json model = json::object();
  json train = json::object();
};

FileConfig load_config_file(const std::string& path) {
  FileConfig out;
  if (path.empty()) return out;
  std::ifstream f(path);
  if (!f) throw consent::IoError("config: cannot open " + path);
  json root;
  try {
    f >> root;
  } catch (const json::exception& e) {
    throw consent::ValidationError(std::string("config: malformed JSON: ") + e.what());
  }
  walk_object(root, "<root>", [&](const std::string& k, const json& v) {
    if (k == "synth") out.synth = v;
    else if (k == "model") out.model = v;
    else if (k == "train") out.train = v;
    else return false;
    return true;
  });
  return out;
}

ordered_json synth_to_json(const consent::SynthConfig& c) {
  return ordered_json{{"seed", c.seed},
                      {"images", c.images},
                      {"views", c.views},
                      {"words_mean", c.words_mean},
                      {"words_std", c.words_std},
                      {"words_min", c.words_min},
                      {"words_max", c.words_max},
                      {"bold_ratio", c.bold_ratio},
                      {"stroke_min", c.stroke_min},
                      {"stroke_max", c.stroke_max},
                      {"bold_mult_min", c.bold_mult_min},
                      {"bold_mult_max", c.bold_mult_max},
                      {"illumination", c.illumination},
                      {"gauss_sigma", c.gauss_sigma},
                      {"rotation_deg", c.rotation_deg},
                      {"invert_prob", c.invert_prob},
                      {"canvas_width", c.canvas_width},
                      {"max_canvas_height", c.max_canvas_height},
                      {"rps_icon", c.rps_icon}};
}

ordered_json model_to_json(const consent::ModelConfig& c) {
  return ordered_json{{"block_h", c.block_h},
                      {"block_w", c.block_w},
                      {"channels", c.channels},
                      {"embed_dim", c.embed_dim},
                      {"num_heads", c.num_heads},
                      {"num_stacks", c.num_stacks},
                      {"ffn_hidden", c.ffn()},
                      {"max_seq_len", c.max_seq_len},
                      {"positional_encoding", c.positional_encoding}};
}

ordered_json train_to_json(const consent::TrainConfig& c) {
  return ordered_json{
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"lr", c.lr},
      {"beta1", c.beta1},
      {"beta2", c.beta2},
      {"adam_eps", c.adam_eps},
      {"loss", c.loss == consent::TrainConfig::Loss::Bce ? "bce" : "focal"},
      {"gamma", c.gamma},
      {"alpha_bold", c.alpha_bold},
      {"seed", c.seed},
      {"clip_norm", c.clip_norm},
      {"checkpoint_every", c.checkpoint_every},
      {"max_train_sequences", c.max_train_sequences},
      {"shuffle_words_in_chunks", c.shuffle_words_in_chunks}};
}

void write_run_manifest(const fs::path& dir, const std::string& command,
                        const ordered_json& config) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  ordered_json j;
  j["command"] = command;
  j["config"] = config;
  std::ofstream f(dir / "run_manifest.json", std::ios::binary);
  if (!f) throw consent::IoError("cannot write run manifest in " + dir.string());
  f << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Subcommand state.

struct GenArgs {
  std::string out, config;
  consent::SynthConfig cfg;
  bool rps = false;
  bool quiet = false;
};

struct TrainArgs {
  std::string data, out, config;
  consent::ModelConfig mcfg;
  consent::TrainConfig tcfg;
  std::uint64_t init_seed_offset = 0;
  bool quiet = false;
};

struct EvalArgs {
  std::string data, model, report, split = "test", config;
  bool baseline = false;
  bool debug_truth = false;
  double alpha = -1.0;  // <0: validate on the val split
  std::string sigma_mode = "pooled";
  bool quiet = false;
};

struct PredictArgs {
  std::string model, image, boxes, annotate;
  bool quiet = false;
};

struct AblateArgs {
  std::string data, out, config;
  std::vector<int> dims = {32, 64, 128, 256};
  std::vector<int> stacks = {2, 3, 4, 5};
  consent::ModelConfig mcfg;
  consent::TrainConfig tcfg;
  bool quiet = false;
};

int run_gen(const GenArgs& a) {
  const auto manifest = a.rps ? consent::generate_rps(a.cfg, a.out)
                              : consent::generate_dataset(a.cfg, a.out);
  ordered_json cfgj;
  cfgj["synth"] = synth_to_json(a.cfg);
  cfgj["rps"] = a.rps;
  write_run_manifest(a.out, "gen", cfgj);
  if (!a.quiet) {
    std::size_t train = 0, test = 0, val = 0;
    for (const auto& im : manifest.images) {
      if (im.split == "train") ++train;
      else if (im.split == "test") ++test;
      else ++val;
    }
    const std::size_t words = manifest.word_count(), bold = manifest.bold_count();
    std::cout << "wrote " << (fs::path(a.out) / "manifest.json").string() << "\n"
              << "images " << manifest.images.size() << " (train " << train << " / test "
              << test << " / val " << val << ")\n"
              << "words " << words << ", bold " << bold << " (ratio "
              << (words ? double(bold) / double(words) : 0.0) << ")\n";
  }
  return 0;
}

int run_train(const TrainArgs& a) {
  const consent::Dataset ds = consent::load_dataset(a.data);
  consent::ConsentModel model = consent::init_model(a.mcfg, a.tcfg.seed);

  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec || !fs::is_directory(a.out))
    throw consent::IoError("train: cannot create output dir " + a.out);

  consent::CheckpointFn checkpoint;
  if (a.tcfg.checkpoint_every > 0) {
    checkpoint = [&](int epoch, consent::ConsentModel& m) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoint_epoch_%04d.cnsnt", epoch);
      consent::save_model(m, (fs::path(a.out) / name).string());
    };
  }
  consent::TrainResult res = consent::train(model, ds, a.tcfg, checkpoint);

  const std::string model_path = (fs::path(a.out) / "model.cnsnt").string();
  consent::save_model(res.model, model_path);
  {
    std::ofstream logf(fs::path(a.out) / "trainlog.jsonl", std::ios::binary);
    if (!logf) throw consent::IoError("train: cannot write trainlog");
    for (const auto& e : res.log.epochs) {
      ordered_json j{{"epoch", e.epoch},
                     {"train_loss", e.train_loss},
                     {"val_f1", e.val_f1},
                     {"wall_ms", e.wall_ms},
                     {"rng_digest", e.rng_digest}};
      logf << j.dump() << "\n";
    }
  }
  ordered_json cfgj;
  cfgj["model"] = model_to_json(a.mcfg);
  cfgj["train"] = train_to_json(a.tcfg);
  write_run_manifest(a.out, "train", cfgj);
  if (!a.quiet) {
    std::cout << "wrote " << model_path << "\n"
              << "best epoch " << res.log.best_epoch << " val f1 " << res.log.best_val_f1
              << "\n";
  }
  return 0;
}

int run_eval(const EvalArgs& a) {
  const consent::Dataset ds = consent::load_dataset(a.data);
  const consent::SigmaMode mode = a.sigma_mode == "word-means"
                                      ? consent::SigmaMode::WordMeans
                                      : consent::SigmaMode::PooledSamples;
  if (a.sigma_mode != "pooled" && a.sigma_mode != "word-means")
    throw consent::ValidationError("eval: sigma-mode must be 'pooled' or 'word-means'");

  consent::EvalReport rep;
  if (a.debug_truth) {
    rep = consent::evaluate_truth_on_split(ds, a.split);
  } else if (a.baseline) {
    double alpha = a.alpha;
    if (alpha < 0.0) {
      alpha = consent::validate_alpha(ds, consent::default_alpha_grid(), mode);
      if (!a.quiet) std::cout << "validated alpha " << alpha << "\n";
    }
    rep = consent::evaluate_baseline_on_split(ds, a.split, alpha, mode);
  } else {
    if (a.model.empty())
      throw consent::ValidationError("eval: need --model or --baseline-vote");
    const consent::ConsentModel model = consent::load_model(a.model);
    rep = consent::evaluate_model_on_split(model, ds, a.split);
  }

  if (!a.report.empty()) {
    std::ofstream f(a.report, std::ios::binary);
    if (!f) throw consent::IoError("eval: cannot write report " + a.report);
    f << consent::report_to_json(rep).dump(2) << "\n";
  }
  if (!a.quiet) std::cout << consent::report_to_text(rep);
  return 0;
}

void draw_box_outline(consent::RgbImage& img, const consent::Box& b, std::uint8_t r,
                      std::uint8_t g, std::uint8_t bl) {
  const int stroke = 2;
  for (int y = b.y; y < b.y + b.h; ++y) {
    for (int x = b.x; x < b.x + b.w; ++x) {
      if (x < 0 || y < 0 || x >= img.width() || y >= img.height()) continue;
      const bool border = x < b.x + stroke || x >= b.x + b.w - stroke || y < b.y + stroke ||
                          y >= b.y + b.h - stroke;
      if (border) img.set(x, y, r, g, bl);
    }
  }
}

int run_predict(const PredictArgs& a) {
  const consent::ConsentModel model = consent::load_model(a.model);
  const consent::RgbImage img = consent::read_ppm(a.image);

  std::ifstream bf(a.boxes);
  if (!bf) throw consent::IoError("predict: cannot open boxes file " + a.boxes);
  json broot;
  try {
    bf >> broot;
  } catch (const json::exception& e) {
    throw consent::ValidationError(std::string("predict: malformed boxes JSON: ") + e.what());
  }
  if (!broot.is_object() || !broot.contains("boxes") || !broot["boxes"].is_array())
    throw consent::ValidationError("predict: boxes file must hold {\"boxes\": [[x,y,w,h],...]}");
  std::vector<consent::Box> boxes;
  for (const auto& jb : broot["boxes"]) {
    if (!jb.is_array() || jb.size() != 4)
      throw consent::ValidationError("predict: each box must be [x,y,w,h]");
    consent::Box b{jb[0].get<int>(), jb[1].get<int>(), jb[2].get<int>(), jb[3].get<int>()};
    if (b.x < 0 || b.y < 0 || b.w <= 0 || b.h <= 0 || b.x + b.w > img.width() ||
        b.y + b.h > img.height())
      throw consent::ValidationError("predict: box outside image bounds");
    boxes.push_back(b);
  }

  std::vector<double> p_bold(boxes.size(), 0.0);
  std::vector<int> labels(boxes.size(), 0);
  if (!boxes.empty()) {
    auto seqs = consent::build_sequences(img, boxes, {}, model.cfg, 0);
    std::vector<double> sums(boxes.size(), 0.0);
    std::vector<std::size_t> counts(boxes.size(), 0);
    for (const auto& seq : seqs) {
      const consent::Tensor probs = consent::consent_forward(model, seq);
      for (std::size_t k = 0; k < seq.length(); ++k) {
        if (!seq.mask[k]) continue;
        sums[std::size_t(seq.word_ids[k])] += probs(k, 1);
        ++counts[std::size_t(seq.word_ids[k])];
      }
    }
    for (std::size_t w = 0; w < boxes.size(); ++w) {
      if (counts[w] == 0) continue;
      p_bold[w] = sums[w] / double(counts[w]);
      labels[w] = p_bold[w] >= 0.5 ? 1 : 0;
    }
  }

  ordered_json out;
  out["words"] = ordered_json::array();
  for (std::size_t w = 0; w < boxes.size(); ++w)
    out["words"].push_back({{"box", {boxes[w].x, boxes[w].y, boxes[w].w, boxes[w].h}},
                            {"label", labels[w]},
                            {"p_bold", p_bold[w]}});
  std::cout << out.dump(2) << "\n";

  if (!a.annotate.empty()) {
    consent::RgbImage annotated = img;
    for (std::size_t w = 0; w < boxes.size(); ++w) {
      if (labels[w] == 1)
        draw_box_outline(annotated, boxes[w], 0, 0, 255);  // bold: blue
      else
        draw_box_outline(annotated, boxes[w], 0, 255, 0);  // non-bold: green
    }
    consent::write_ppm(a.annotate, annotated);
  }
  return 0;
}

int run_ablate(const AblateArgs& a) {
  const consent::Dataset ds = consent::load_dataset(a.data);
  const consent::AblationGrid grid = consent::ablate(ds, a.dims, a.stacks, a.mcfg, a.tcfg);

  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec || !fs::is_directory(a.out))
    throw consent::IoError("ablate: cannot create output dir " + a.out);
  {
    std::ofstream f(fs::path(a.out) / "ablation.json", std::ios::binary);
    if (!f) throw consent::IoError("ablate: cannot write grid");
    f << consent::ablation_to_json(grid).dump(2) << "\n";
  }
  {
    std::ofstream f(fs::path(a.out) / "ablation.txt", std::ios::binary);
    f << consent::ablation_to_text(grid);
  }
  ordered_json cfgj;
  cfgj["model"] = model_to_json(a.mcfg);
  cfgj["train"] = train_to_json(a.tcfg);
  cfgj["dims"] = a.dims;
  cfgj["stacks"] = a.stacks;
  write_run_manifest(a.out, "ablate", cfgj);
  if (!a.quiet) {
    std::cout << consent::ablation_to_text(grid);
    if (const auto* best = grid.best())
      std::cout << "best: embed_dim " << best->embed_dim << ", stacks " << best->stacks
                << ", f1 " << best->f1 << "\n";
  }
  return 0;
}

void add_model_flags(CLI::App* cmd, consent::ModelConfig& cfg, bool with_stacks = true) {
  cmd->add_option("--block-h", cfg.block_h, "block height in px");
  cmd->add_option("--block-w", cfg.block_w, "block width in px");
  cmd->add_option("--channels", cfg.channels, "input channels (1 or 3)");
  cmd->add_option("--embed-dim", cfg.embed_dim, "embedding size d");
  cmd->add_option("--heads", cfg.num_heads, "attention heads");
  if (with_stacks)
    cmd->add_option("--stacks", cfg.num_stacks, "encoder stacks T (0 = context-free)");
  cmd->add_option("--ffn", cfg.ffn_hidden, "FFN hidden width (0 = 4d)");
  cmd->add_option("--max-seq-len", cfg.max_seq_len, "sequence capacity");
  cmd->add_flag("--positional", cfg.positional_encoding, "enable sinusoidal positions");
}

void add_train_flags(CLI::App* cmd, consent::TrainConfig& cfg, std::string& loss_name) {
  cmd->add_option("--epochs", cfg.epochs, "training epochs");
  cmd->add_option("--batch", cfg.batch_size, "sequences per batch");
  cmd->add_option("--lr", cfg.lr, "Adam learning rate");
  cmd->add_option("--loss", loss_name, "loss: bce|focal");
  cmd->add_option("--gamma", cfg.gamma, "focal gamma");
  cmd->add_option("--alpha-bold", cfg.alpha_bold, "focal bold-class weight");
  cmd->add_option("--clip", cfg.clip_norm, "global grad-norm cap (0 = off)");
  cmd->add_option("--checkpoint-every", cfg.checkpoint_every, "checkpoint cadence (epochs)");
  cmd->add_option("--max-train-seqs", cfg.max_train_sequences, "cap on train sequences");
  cmd->add_flag("--shuffle-chunks", cfg.shuffle_words_in_chunks,
                "randomize word order before chunking");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"context-dependent bold-word classification"};
  app.require_subcommand(1);

  GenArgs gen;
  TrainArgs train;
  EvalArgs eval;
  PredictArgs predict;
  AblateArgs ablate;
  std::string train_loss = "focal", ablate_loss = "focal";

  // gen
  auto* cgen = app.add_subcommand("gen", "generate a synthetic dataset");
  cgen->add_option("--out", gen.out, "output directory")->required();
  cgen->add_option("--config", gen.config, "JSON config file");
  cgen->add_option("--images", gen.cfg.images, "number of base layouts");
  cgen->add_option("--views", gen.cfg.views, "views per layout");
  cgen->add_option("--seed", gen.cfg.seed, "generator seed");
  cgen->add_option("--bold-ratio", gen.cfg.bold_ratio, "target bold fraction");
  cgen->add_flag("--rps", gen.rps, "rock-paper-scissors sequences instead of text");
  cgen->add_flag("--quiet", gen.quiet, "suppress chatter");

  // train
  auto* ctrain = app.add_subcommand("train", "train a model");
  ctrain->add_option("--data", train.data, "dataset directory")->required();
  ctrain->add_option("--out", train.out, "output directory")->required();
  ctrain->add_option("--config", train.config, "JSON config file");
  ctrain->add_option("--seed", train.tcfg.seed, "training seed");
  add_model_flags(ctrain, train.mcfg);
  add_train_flags(ctrain, train.tcfg, train_loss);
  ctrain->add_flag("--quiet", train.quiet, "suppress chatter");

  // eval
  auto* ceval = app.add_subcommand("eval", "evaluate a model or the baseline");
  ceval->add_option("--data", eval.data, "dataset directory")->required();
  ceval->add_option("--model", eval.model, "CNSNT model file");
  ceval->add_flag("--baseline-vote", eval.baseline, "evaluate the morphology baseline");
  ceval->add_option("--alpha", eval.alpha, "voting threshold (default: validate on val)");
  ceval->add_option("--sigma-mode", eval.sigma_mode, "pooled|word-means");
  ceval->add_option("--split", eval.split, "split to evaluate (default test)");
  ceval->add_option("--report", eval.report, "write the JSON report here");
  ceval->add_flag("--debug-truth", eval.debug_truth, "score ground truth against itself");
  ceval->add_flag("--quiet", eval.quiet, "suppress chatter");

  // baseline-vote: alias of eval with the baseline preselected
  EvalArgs bv;
  bv.baseline = true;
  auto* cbv = app.add_subcommand("baseline-vote", "morphology voting baseline (eval alias)");
  cbv->add_option("--data", bv.data, "dataset directory")->required();
  cbv->add_option("--alpha", bv.alpha, "voting threshold (default: validate on val)");
  cbv->add_option("--sigma-mode", bv.sigma_mode, "pooled|word-means");
  cbv->add_option("--split", bv.split, "split to evaluate (default test)");
  cbv->add_option("--report", bv.report, "write the JSON report here");
  cbv->add_flag("--quiet", bv.quiet, "suppress chatter");

  // predict
  auto* cpred = app.add_subcommand("predict", "label word boxes in one image");
  cpred->add_option("--model", predict.model, "CNSNT model file")->required();
  cpred->add_option("--image", predict.image, "input PPM (P6) image")->required();
  cpred->add_option("--boxes", predict.boxes, "JSON file {\"boxes\":[[x,y,w,h],...]}")
      ->required();
  cpred->add_option("--annotate", predict.annotate, "write annotated PPM here");
  cpred->add_flag("--quiet", predict.quiet, "suppress chatter");

  // ablate
  auto* cabl = app.add_subcommand("ablate", "embed-size x stacks grid");
  cabl->add_option("--data", ablate.data, "dataset directory")->required();
  cabl->add_option("--out", ablate.out, "output directory")->required();
  cabl->add_option("--config", ablate.config, "JSON config file");
  cabl->add_option("--dims", ablate.dims, "embedding sizes")->delimiter(',');
  cabl->add_option("--stacks", ablate.stacks, "stack counts")->delimiter(',');
  cabl->add_option("--seed", ablate.tcfg.seed, "base seed");
  add_model_flags(cabl, ablate.mcfg, /*with_stacks=*/false);
  add_train_flags(cabl, ablate.tcfg, ablate_loss);
  cabl->add_flag("--quiet", ablate.quiet, "suppress chatter");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*cgen) {
      const FileConfig fc = load_config_file(gen.config);
      consent::SynthConfig merged;  // defaults
      apply_synth_json(merged, fc.synth);
      // CLI flags beat the file; gen.cfg already carries the parsed values
      if (cgen->count("--images")) merged.images = gen.cfg.images;
      if (cgen->count("--views")) merged.views = gen.cfg.views;
      if (cgen->count("--seed")) merged.seed = gen.cfg.seed;
      if (cgen->count("--bold-ratio")) merged.bold_ratio = gen.cfg.bold_ratio;
      gen.cfg = merged;
      return run_gen(gen);
    }
    if (*ctrain) {
      const FileConfig fc = load_config_file(train.config);
      consent::ModelConfig mbase;
      consent::TrainConfig tbase;
      apply_model_json(mbase, fc.model);
      apply_train_json(tbase, fc.train);
      // file values fill anything the CLI did not set explicitly
      auto pick_i = [&](const char* flag, int cli_v, int file_v) {
        return ctrain->count(flag) ? cli_v : file_v;
      };
      auto pick_d = [&](const char* flag, double cli_v, double file_v) {
        return ctrain->count(flag) ? cli_v : file_v;
      };
      consent::ModelConfig m = mbase;
      m.block_h = pick_i("--block-h", train.mcfg.block_h, mbase.block_h);
      m.block_w = pick_i("--block-w", train.mcfg.block_w, mbase.block_w);
      m.channels = pick_i("--channels", train.mcfg.channels, mbase.channels);
      m.embed_dim = pick_i("--embed-dim", train.mcfg.embed_dim, mbase.embed_dim);
      m.num_heads = pick_i("--heads", train.mcfg.num_heads, mbase.num_heads);
      m.num_stacks = pick_i("--stacks", train.mcfg.num_stacks, mbase.num_stacks);
      m.ffn_hidden = pick_i("--ffn", train.mcfg.ffn_hidden, mbase.ffn_hidden);
      m.max_seq_len = pick_i("--max-seq-len", train.mcfg.max_seq_len, mbase.max_seq_len);
      m.positional_encoding =
          ctrain->count("--positional") ? train.mcfg.positional_encoding : mbase.positional_encoding;
      consent::TrainConfig t = tbase;
      t.epochs = pick_i("--epochs", train.tcfg.epochs, tbase.epochs);
      t.batch_size = pick_i("--batch", train.tcfg.batch_size, tbase.batch_size);
      t.lr = pick_d("--lr", train.tcfg.lr, tbase.lr);
      t.gamma = pick_d("--gamma", train.tcfg.gamma, tbase.gamma);
      t.alpha_bold = pick_d("--alpha-bold", train.tcfg.alpha_bold, tbase.alpha_bold);
      t.clip_norm = pick_d("--clip", train.tcfg.clip_norm, tbase.clip_norm);
      t.checkpoint_every =
          pick_i("--checkpoint-every", train.tcfg.checkpoint_every, tbase.checkpoint_every);
      t.max_train_sequences = ctrain->count("--max-train-seqs")
                                  ? train.tcfg.max_train_sequences
                                  : tbase.max_train_sequences;
      t.shuffle_words_in_chunks = ctrain->count("--shuffle-chunks")
                                      ? train.tcfg.shuffle_words_in_chunks
                                      : tbase.shuffle_words_in_chunks;
      t.seed = ctrain->count("--seed") ? train.tcfg.seed : tbase.seed;
      if (ctrain->count("--loss")) {
        if (train_loss == "bce") t.loss = consent::TrainConfig::Loss::Bce;
        else if (train_loss == "focal") t.loss = consent::TrainConfig::Loss::Focal;
        else throw consent::ValidationError("train: loss must be 'bce' or 'focal'");
      }
      train.mcfg = m;
      train.tcfg = t;
      return run_train(train);
    }
    if (*ceval) return run_eval(eval);
    if (*cbv) return run_eval(bv);
    if (*cpred) return run_predict(predict);
    if (*cabl) {
      const FileConfig fc = load_config_file(ablate.config);
      if (!fc.model.empty()) apply_model_json(ablate.mcfg, fc.model);
      if (!fc.train.empty()) apply_train_json(ablate.tcfg, fc.train);
      if (cabl->count("--loss")) {
        if (ablate_loss == "bce") ablate.tcfg.loss = consent::TrainConfig::Loss::Bce;
        else if (ablate_loss == "focal") ablate.tcfg.loss = consent::TrainConfig::Loss::Focal;
        else throw consent::ValidationError("ablate: loss must be 'bce' or 'focal'");
      }
      return run_ablate(ablate);
    }
  } catch (const consent::NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const consent::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const consent::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
