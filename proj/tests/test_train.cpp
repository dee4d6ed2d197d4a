#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "consent/eval.hpp"
#include "consent/train.hpp"

using namespace consent;
namespace fs = std::filesystem;

namespace {

std::string make_dataset(const std::string& tag, std::uint64_t seed, int images,
                         double words = 4.0) {
  SynthConfig cfg;
  cfg.seed = seed;
  cfg.images = images;
  cfg.words_mean = words;
  cfg.words_std = 2.0;
  cfg.canvas_width = 220;
  cfg.illumination = false;
  cfg.gauss_sigma = 0.0;
  cfg.rotation_deg = 0.0;
  cfg.invert_prob = 0.0;
  cfg.bold_ratio = 0.25;  // denser positives keep tiny val splits meaningful
  const std::string dir = (fs::temp_directory_path() / ("consent_train_" + tag)).string();
  fs::remove_all(dir);
  generate_dataset(cfg, dir);
  return dir;
}

ModelConfig tiny_model_cfg() {
  ModelConfig cfg;
  cfg.block_h = 16;
  cfg.block_w = 16;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.num_stacks = 1;
  cfg.ffn_hidden = 16;
  cfg.max_seq_len = 16;
  return cfg;
}

bool models_identical(ConsentModel& a, ConsentModel& b) {
  auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto da = pa[i].second->data(), db = pb[i].second->data();
    if (da.size() != db.size()) return false;
    for (std::size_t j = 0; j < da.size(); ++j)
      if (da[j] != db[j]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("clip_global_norm caps the gradient norm") {
  Rng rng(404);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::vector<double>> grads(3);
    for (auto& g : grads) {
      g.resize(std::size_t(rng.uniform_int(1, 40)));
      for (auto& v : g) v = rng.uniform(-5.0, 5.0);
    }
    const double clip = rng.uniform(0.1, 3.0);
    clip_global_norm(grads, clip);
    double sq = 0.0;
    for (const auto& g : grads)
      for (double v : g) sq += v * v;
    REQUIRE(std::sqrt(sq) <= clip + 1e-9);
  }
  SECTION("norms below the cap are untouched") {
    std::vector<std::vector<double>> grads = {{0.1, 0.1}};
    const double norm = clip_global_norm(grads, 10.0);
    REQUIRE(grads[0][0] == 0.1);
    REQUIRE(norm == Catch::Approx(std::sqrt(0.02)));
  }
}

TEST_CASE("training runs") {
  const std::string dir = make_dataset("core", 71, 14);
  const Dataset ds = load_dataset(dir);
  const ModelConfig mcfg = tiny_model_cfg();

  SECTION("lr = 0 leaves parameters unchanged") {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.lr = 0.0;
    cfg.seed = 1;
    ConsentModel before = init_model(mcfg, 3);
    ConsentModel copy = before;
    TrainResult res = train(before, ds, cfg);
    // the final (not best-F1) weights equal the initial ones
    REQUIRE(models_identical(copy, before));
  }

  SECTION("loss decreases when overfitting a single batch") {
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.batch_size = 1;
    cfg.lr = 3e-4;
    cfg.seed = 2;
    cfg.max_train_sequences = 1;  // one fixed batch, 50 steps
    TrainResult res = train(init_model(mcfg, 4), ds, cfg);
    REQUIRE(res.log.epochs.size() == 50);
    REQUIRE(res.log.epochs.back().train_loss < res.log.epochs.front().train_loss);
  }

  SECTION("same seed gives bit-identical weights and log") {
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.seed = 9;
    TrainResult a = train(init_model(mcfg, 5), ds, cfg);
    TrainResult b = train(init_model(mcfg, 5), ds, cfg);
    REQUIRE(models_identical(a.model, b.model));
    REQUIRE(a.log.epochs.size() == b.log.epochs.size());
    for (std::size_t i = 0; i < a.log.epochs.size(); ++i) {
      REQUIRE(a.log.epochs[i].train_loss == b.log.epochs[i].train_loss);
      REQUIRE(a.log.epochs[i].val_f1 == b.log.epochs[i].val_f1);
      REQUIRE(a.log.epochs[i].rng_digest == b.log.epochs[i].rng_digest);
    }
    REQUIRE(a.log.best_epoch == b.log.best_epoch);
  }

  SECTION("bce and focal losses both drive the loop") {
    for (auto loss : {TrainConfig::Loss::Bce, TrainConfig::Loss::Focal}) {
      TrainConfig cfg;
      cfg.epochs = 1;
      cfg.batch_size = 4;
      cfg.seed = 10;
      cfg.loss = loss;
      TrainResult res = train(init_model(mcfg, 6), ds, cfg);
      REQUIRE(res.log.epochs.size() == 1);
      REQUIRE(std::isfinite(res.log.epochs[0].train_loss));
    }
  }

  SECTION("checkpoint callback fires on the configured cadence") {
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 4;
    cfg.seed = 11;
    cfg.checkpoint_every = 2;
    std::vector<int> seen;
    train(init_model(mcfg, 7), ds, cfg,
          [&](int epoch, ConsentModel&) { seen.push_back(epoch); });
    REQUIRE(seen == std::vector<int>{1, 3});
  }

  SECTION("exploding updates abort with a numeric error") {
    TrainConfig cfg;
    cfg.epochs = 8;
    cfg.batch_size = 4;
    cfg.lr = 1e30;
    cfg.clip_norm = 0.0;  // disabled
    cfg.seed = 12;
    REQUIRE_THROWS_AS(train(init_model(mcfg, 8), ds, cfg), NumericError);
  }

  SECTION("train log serializes to line-parseable JSON records") {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.seed = 13;
    TrainResult res = train(init_model(mcfg, 9), ds, cfg);
    const auto j = train_log_to_json(res.log);
    REQUIRE(j.is_array());
    REQUIRE(j.size() == 2);
    REQUIRE(j[0].contains("train_loss"));
    REQUIRE(j[0].contains("rng_digest"));
  }
  fs::remove_all(dir);
}

TEST_CASE("empty splits are rejected") {
  const std::string dir = make_dataset("empty", 72, 6);
  // rewrite every split to train: no val left
  {
    Dataset ds = load_dataset(dir);
    nlohmann::ordered_json root;
    root["images"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < ds.size(); ++i) {
      nlohmann::ordered_json jim;
      jim["file"] = ds.record(i).file;
      jim["split"] = "val";  // nothing to train on
      jim["words"] = nlohmann::ordered_json::array();
      for (const auto& w : ds.record(i).words)
        jim["words"].push_back(
            {{"box", {w.box.x, w.box.y, w.box.w, w.box.h}}, {"label", w.label}});
      root["images"].push_back(std::move(jim));
    }
    std::ofstream f(fs::path(dir) / "manifest.json", std::ios::binary);
    f << root.dump(2);
  }
  const Dataset ds = load_dataset(dir);
  TrainConfig cfg;
  cfg.epochs = 1;
  REQUIRE_THROWS_AS(train(init_model(tiny_model_cfg(), 1), ds, cfg), ValidationError);
  fs::remove_all(dir);
}

TEST_CASE("validate_alpha") {
  const std::string dir = make_dataset("alpha", 73, 20, 6.0);
  const Dataset ds = load_dataset(dir);

  SECTION("single-element grid returns that element") {
    REQUIRE(validate_alpha(ds, {0.75}) == 0.75);
  }
  SECTION("empty grid is an error") {
    REQUIRE_THROWS_AS(validate_alpha(ds, {}), ValidationError);
  }
  SECTION("returns the grid argmax, smaller alpha on ties") {
    // compute both F1 values independently, then check the pick
    const auto stats = split_thickness_stats(ds, "val");
    std::vector<std::vector<int>> truths;
    for (std::size_t idx : ds.split_indices("val")) {
      std::vector<int> t;
      for (const auto& w : ds.record(idx).words) t.push_back(w.label);
      truths.push_back(std::move(t));
    }
    auto f1_of = [&](double alpha) {
      return evaluate(to_image_evals(baseline_predict(stats, alpha), truths), "x").f1;
    };
    const double f_half = f1_of(0.5), f_one = f1_of(1.0);
    const double picked = validate_alpha(ds, {0.5, 1.0});
    if (f_one > f_half)
      REQUIRE(picked == 1.0);
    else
      REQUIRE(picked == 0.5);  // greater-or-equal: ties go to the smaller
  }
  SECTION("empty val split is an error") {
    SynthConfig cfg;
    cfg.seed = 1;
    cfg.images = 2;  // too few for a val assignment
    cfg.words_mean = 3;
    cfg.words_std = 1;
    cfg.canvas_width = 200;
    const std::string d2 = (fs::temp_directory_path() / "consent_train_noval").string();
    fs::remove_all(d2);
    generate_dataset(cfg, d2);
    const Dataset ds2 = load_dataset(d2);
    REQUIRE(ds2.split_indices("val").empty());
    REQUIRE_THROWS_AS(validate_alpha(ds2), ValidationError);
    fs::remove_all(d2);
  }
  fs::remove_all(dir);
}
