#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "consent/model.hpp"
#include "consent/synth.hpp"

using namespace consent;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kCli = CONSENT_CLI_PATH;

struct CliResult {
  int exit_code = -1;
  std::string out;
};

CliResult run_cli(const std::string& args) {
  const auto out_file = fs::temp_directory_path() / "consent_cli_out.txt";
  const std::string cmd = kCli + " " + args + " > " + out_file.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  CliResult res;
  res.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream f(out_file);
  res.out.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  return res;
}

std::string temp_dir(const std::string& tag) {
  const auto p = fs::temp_directory_path() / ("consent_cli_" + tag);
  fs::remove_all(p);
  return p.string();
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::vector<char>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

/// Small dataset + matching tiny-model flags shared by the train/eval tests.
const char* kTinyModelFlags =
    " --block-h 16 --block-w 16 --embed-dim 8 --heads 2 --stacks 1 --ffn 16"
    " --max-seq-len 16 ";

std::string make_dataset(const std::string& tag, int images, std::uint64_t seed) {
  const std::string dir = temp_dir(tag);
  SynthConfig cfg;
  cfg.seed = seed;
  cfg.images = images;
  cfg.words_mean = 4;
  cfg.words_std = 2;
  cfg.canvas_width = 220;
  cfg.illumination = false;
  cfg.gauss_sigma = 0.0;
  cfg.rotation_deg = 0.0;
  cfg.invert_prob = 0.0;
  cfg.bold_ratio = 0.25;
  generate_dataset(cfg, dir);
  return dir;
}

}  // namespace

TEST_CASE("cli: gen determinism and config errors") {
  SECTION("same seed twice gives identical directories") {
    const std::string d1 = temp_dir("gen1"), d2 = temp_dir("gen2");
    auto r1 = run_cli("gen --out " + d1 + " --images 4 --seed 7 --quiet");
    auto r2 = run_cli("gen --out " + d2 + " --images 4 --seed 7 --quiet");
    REQUIRE(r1.exit_code == 0);
    REQUIRE(r2.exit_code == 0);
    for (const auto& e : fs::directory_iterator(d1))
      REQUIRE(slurp(e.path()) == slurp(fs::path(d2) / e.path().filename()));
    fs::remove_all(d1);
    fs::remove_all(d2);
  }
  SECTION("zero images is a config error (exit 2)") {
    auto r = run_cli("gen --out " + temp_dir("gen0") + " --images 0");
    REQUIRE(r.exit_code == 2);
  }
  SECTION("gen prints the manifest path and label statistics") {
    const std::string d = temp_dir("genstats");
    auto r = run_cli("gen --out " + d + " --images 4 --seed 9");
    REQUIRE(r.exit_code == 0);
    REQUIRE(r.out.find("manifest.json") != std::string::npos);
    REQUIRE(r.out.find("bold") != std::string::npos);
    REQUIRE(fs::exists(fs::path(d) / "run_manifest.json"));
    fs::remove_all(d);
  }
}

TEST_CASE("cli: gen --rps emits the game target table") {
  const std::string d = temp_dir("genrps");
  auto r = run_cli("gen --rps --out " + d + " --images 60 --seed 3 --quiet");
  REQUIRE(r.exit_code == 0);
  const Dataset ds = load_dataset(d);
  REQUIRE(ds.size() == 60);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    REQUIRE(ds.record(i).words.size() == 2);
    const int a = ds.record(i).words[0].label, b = ds.record(i).words[1].label;
    REQUIRE_FALSE((a == 1 && b == 1));  // someone cannot beat everyone
  }
  fs::remove_all(d);
}

TEST_CASE("cli: train") {
  const std::string data = make_dataset("traindata", 12, 31);

  SECTION("missing data directory is an I/O error (exit 3)") {
    auto r = run_cli("train --data /nonexistent/nowhere --out " + temp_dir("tnull"));
    REQUIRE(r.exit_code == 3);
  }
  SECTION("default run writes a loadable model, log, and manifest") {
    const std::string out = temp_dir("trainout");
    auto r = run_cli("train --data " + data + " --out " + out + kTinyModelFlags +
                     " --epochs 1 --batch 4 --seed 5 --quiet");
    REQUIRE(r.exit_code == 0);
    REQUIRE(fs::exists(fs::path(out) / "trainlog.jsonl"));
    REQUIRE(fs::exists(fs::path(out) / "run_manifest.json"));
    ConsentModel m = load_model((fs::path(out) / "model.cnsnt").string());
    REQUIRE(m.cfg.embed_dim == 8);
    // every trainlog line parses as JSON
    std::ifstream lf(fs::path(out) / "trainlog.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(lf, line)) {
      REQUIRE_NOTHROW(json::parse(line));
      ++lines;
    }
    REQUIRE(lines == 1);
    fs::remove_all(out);
  }
  SECTION("same seed gives identical model bytes") {
    const std::string o1 = temp_dir("train1"), o2 = temp_dir("train2");
    const std::string args = std::string(kTinyModelFlags) + " --epochs 2 --batch 4 --seed 11 --quiet";
    REQUIRE(run_cli("train --data " + data + " --out " + o1 + args).exit_code == 0);
    REQUIRE(run_cli("train --data " + data + " --out " + o2 + args).exit_code == 0);
    REQUIRE(slurp(fs::path(o1) / "model.cnsnt") == slurp(fs::path(o2) / "model.cnsnt"));
    fs::remove_all(o1);
    fs::remove_all(o2);
  }
  SECTION("unknown config key is rejected (exit 2)") {
    const auto cfgp = fs::temp_directory_path() / "consent_badcfg.json";
    std::ofstream(cfgp) << R"({"train": {"epochz": 3}})";
    auto r = run_cli("train --data " + data + " --out " + temp_dir("tbad") + " --config " +
                     cfgp.string());
    REQUIRE(r.exit_code == 2);
    fs::remove(cfgp);
  }
  SECTION("config file values apply and CLI flags override them") {
    const auto cfgp = fs::temp_directory_path() / "consent_okcfg.json";
    std::ofstream(cfgp) << R"({"model": {"block_h":16,"block_w":16,"embed_dim":8,"num_heads":2,
                               "num_stacks":1,"ffn_hidden":16,"max_seq_len":16},
                              "train": {"epochs": 1, "batch_size": 4, "seed": 3}})";
    const std::string out = temp_dir("traincfg");
    auto r = run_cli("train --data " + data + " --out " + out + " --config " + cfgp.string() +
                     " --epochs 2 --quiet");
    REQUIRE(r.exit_code == 0);
    const auto rm = json::parse(slurp(fs::path(out) / "run_manifest.json"));
    REQUIRE(rm["config"]["train"]["epochs"] == 2);      // CLI override
    REQUIRE(rm["config"]["train"]["batch_size"] == 4);  // file value
    REQUIRE(rm["config"]["model"]["embed_dim"] == 8);
    fs::remove(cfgp);
    fs::remove_all(out);
  }
  fs::remove_all(data);
}

TEST_CASE("cli: eval") {
  const std::string data = make_dataset("evaldata", 12, 37);

  SECTION("debug-truth scores all ones") {
    const auto rep = fs::temp_directory_path() / "consent_truth_report.json";
    auto r = run_cli("eval --data " + data + " --debug-truth --split train --report " +
                     rep.string() + " --quiet");
    REQUIRE(r.exit_code == 0);
    const auto j = json::parse(slurp(rep));
    REQUIRE(j["f1"] == 1.0);
    REQUIRE(j["image_accuracy"] == 1.0);
    fs::remove(rep);
  }
  SECTION("baseline-vote report follows the documented schema") {
    const auto rep = fs::temp_directory_path() / "consent_bv_report.json";
    auto r = run_cli("baseline-vote --data " + data + " --alpha 1.0 --split test --report " +
                     rep.string() + " --quiet");
    REQUIRE(r.exit_code == 0);
    const auto j = json::parse(slurp(rep));
    for (const char* key : {"method", "counts", "precision", "recall", "f1", "image_accuracy",
                            "buckets"})
      REQUIRE(j.contains(key));
    REQUIRE(j["method"] == "baseline-vote");
    REQUIRE(j["buckets"].is_array());
    fs::remove(rep);
  }
  SECTION("eval of a trained model emits a report (exit 0)") {
    const std::string out = temp_dir("evaltrain");
    REQUIRE(run_cli("train --data " + data + " --out " + out + kTinyModelFlags +
                    " --epochs 1 --batch 4 --seed 2 --quiet")
                .exit_code == 0);
    const auto rep = fs::temp_directory_path() / "consent_model_report.json";
    auto r = run_cli("eval --data " + data + " --model " + (fs::path(out) / "model.cnsnt").string() +
                     " --split test --report " + rep.string());
    REQUIRE(r.exit_code == 0);
    REQUIRE(r.out.find("consent") != std::string::npos);  // text table on stdout
    REQUIRE_NOTHROW(json::parse(slurp(rep)));
    fs::remove(rep);
    fs::remove_all(out);
  }
  fs::remove_all(data);
}

TEST_CASE("cli: predict") {
  // a deterministic constant-decision model: bias the head hard one way
  ModelConfig mcfg;
  mcfg.block_h = 16;
  mcfg.block_w = 16;
  mcfg.embed_dim = 8;
  mcfg.num_heads = 2;
  mcfg.num_stacks = 1;
  mcfg.ffn_hidden = 16;
  mcfg.max_seq_len = 16;

  const auto model_bold = fs::temp_directory_path() / "consent_predict_bold.cnsnt";
  const auto model_plain = fs::temp_directory_path() / "consent_predict_plain.cnsnt";
  {
    ConsentModel m = init_model(mcfg, 77);
    m.dec_w = Tensor::zeros({8, 2}, true);
    m.dec_b = Tensor::from_data({2}, {-20.0, 20.0}, true);
    save_model(m, model_bold.string());
    m.dec_b = Tensor::from_data({2}, {20.0, -20.0}, true);
    save_model(m, model_plain.string());
  }

  const auto img_path = fs::temp_directory_path() / "consent_predict_in.ppm";
  {
    RgbImage img(64, 48, 220);
    for (int y = 10; y < 20; ++y)
      for (int x = 8; x < 30; ++x) img.set(x, y, 40, 40, 40);
    write_ppm(img_path.string(), img);
  }
  const auto boxes_path = fs::temp_directory_path() / "consent_predict_boxes.json";

  SECTION("zero boxes: empty labels, annotated image equals the input") {
    std::ofstream(boxes_path) << R"({"boxes": []})";
    const auto ann = fs::temp_directory_path() / "consent_predict_ann0.ppm";
    auto r = run_cli("predict --model " + model_bold.string() + " --image " + img_path.string() +
                     " --boxes " + boxes_path.string() + " --annotate " + ann.string());
    REQUIRE(r.exit_code == 0);
    const auto j = json::parse(r.out);
    REQUIRE(j["words"].empty());
    REQUIRE(slurp(ann) == slurp(img_path));
    fs::remove(ann);
  }
  SECTION("bold boxes are pure blue, non-bold pure green, 2 px stroke") {
    std::ofstream(boxes_path) << R"({"boxes": [[8, 10, 22, 10]]})";
    for (bool bold : {true, false}) {
      const auto ann = fs::temp_directory_path() / "consent_predict_ann.ppm";
      auto r = run_cli("predict --model " + (bold ? model_bold : model_plain).string() +
                       " --image " + img_path.string() + " --boxes " + boxes_path.string() +
                       " --annotate " + ann.string());
      REQUIRE(r.exit_code == 0);
      const auto j = json::parse(r.out);
      REQUIRE(j["words"].size() == 1);
      REQUIRE(j["words"][0]["label"] == (bold ? 1 : 0));
      const RgbImage a = read_ppm(ann.string());
      // corners and all four 2-px edges carry the convention color
      const std::uint8_t want_r = 0, want_g = bold ? 0 : 255, want_b = bold ? 255 : 0;
      for (auto [x, y] : {std::pair<int, int>{8, 10}, {29, 19}, {8 + 11, 10}, {8 + 11, 19},
                          {8, 10 + 5}, {29, 10 + 5}, {9, 11}, {28, 18}}) {
        const std::uint8_t* px = a.at(x, y);
        REQUIRE(int(px[0]) == int(want_r));
        REQUIRE(int(px[1]) == int(want_g));
        REQUIRE(int(px[2]) == int(want_b));
      }
      fs::remove(ann);
    }
  }
  SECTION("identical inputs give identical output bytes") {
    std::ofstream(boxes_path) << R"({"boxes": [[8, 10, 22, 10], [32, 10, 20, 12]]})";
    const auto a1 = fs::temp_directory_path() / "consent_predict_a1.ppm";
    const auto a2 = fs::temp_directory_path() / "consent_predict_a2.ppm";
    auto r1 = run_cli("predict --model " + model_bold.string() + " --image " + img_path.string() +
                      " --boxes " + boxes_path.string() + " --annotate " + a1.string());
    auto r2 = run_cli("predict --model " + model_bold.string() + " --image " + img_path.string() +
                      " --boxes " + boxes_path.string() + " --annotate " + a2.string());
    REQUIRE(r1.exit_code == 0);
    REQUIRE(r1.out == r2.out);
    REQUIRE(slurp(a1) == slurp(a2));
    fs::remove(a1);
    fs::remove(a2);
  }
  SECTION("box outside the image is a validation error (exit 2)") {
    std::ofstream(boxes_path) << R"({"boxes": [[60, 40, 20, 20]]})";
    auto r = run_cli("predict --model " + model_bold.string() + " --image " + img_path.string() +
                     " --boxes " + boxes_path.string());
    REQUIRE(r.exit_code == 2);
  }
  fs::remove(model_bold);
  fs::remove(model_plain);
  fs::remove(img_path);
  fs::remove(boxes_path);
}

TEST_CASE("cli: ablate writes the grid") {
  const std::string data = make_dataset("abldata", 12, 41);
  const std::string out = temp_dir("ablout");
  auto r = run_cli("ablate --data " + data + " --out " + out +
                   " --block-h 16 --block-w 16 --embed-dim 8 --heads 2 --ffn 16"
                   " --max-seq-len 16 --dims 8 --stacks 0,1 --epochs 1 --batch 4"
                   " --seed 1 --quiet");
  REQUIRE(r.exit_code == 0);
  const auto j = json::parse(slurp(fs::path(out) / "ablation.json"));
  REQUIRE(j["cells"].size() == 2);
  for (const auto& c : j["cells"]) {
    REQUIRE(c.contains("f1"));
    REQUIRE(c["f1"].get<double>() >= 0.0);
    REQUIRE(c["f1"].get<double>() <= 1.0);
  }
  REQUIRE(fs::exists(fs::path(out) / "ablation.txt"));
  REQUIRE(fs::exists(fs::path(out) / "run_manifest.json"));
  fs::remove_all(out);
  fs::remove_all(data);
}
