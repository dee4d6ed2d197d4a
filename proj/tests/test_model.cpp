#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "consent/model.hpp"
#include "oracles.hpp"

using namespace consent;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.block_h = 16;
  cfg.block_w = 16;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.num_stacks = 2;
  cfg.ffn_hidden = 16;
  cfg.max_seq_len = 12;
  return cfg;
}

Tensor random_block(Rng& rng, const ModelConfig& cfg) {
  std::vector<double> data(std::size_t(cfg.channels) * cfg.block_h * cfg.block_w);
  for (auto& v : data) v = rng.uniform(0.0, 1.0);
  return Tensor::from_data(
      {std::size_t(cfg.channels), std::size_t(cfg.block_h), std::size_t(cfg.block_w)},
      std::move(data));
}

PatchSequence random_sequence(Rng& rng, const ModelConfig& cfg, std::size_t n) {
  PatchSequence seq;
  for (std::size_t i = 0; i < n; ++i) {
    seq.blocks.push_back(random_block(rng, cfg));
    seq.mask.push_back(1);
    seq.labels.push_back(rng.bernoulli(0.3) ? 1 : 0);
    seq.word_ids.push_back(int(i));
  }
  seq.n_words = int(n);
  return seq;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg = tiny_cfg();
  REQUIRE_NOTHROW(cfg.validate());
  cfg.embed_dim = 9;  // not divisible by heads
  REQUIRE_THROWS_AS(cfg.validate(), DimensionError);
  cfg = tiny_cfg();
  cfg.max_seq_len = 0;
  REQUIRE_THROWS_AS(cfg.validate(), DimensionError);
  cfg = tiny_cfg();
  cfg.ffn_hidden = 0;
  REQUIRE(cfg.ffn() == 4 * cfg.embed_dim);
}

TEST_CASE("model init is seed-deterministic and counts parameters") {
  const ModelConfig cfg = tiny_cfg();
  ConsentModel a = init_model(cfg, 9);
  ConsentModel b = init_model(cfg, 9);
  auto pa = a.parameters(), pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(pa[i].first == pb[i].first);
    const auto da = pa[i].second->data(), db = pb[i].second->data();
    for (std::size_t j = 0; j < da.size(); ++j) REQUIRE(da[j] == db[j]);
  }
  ConsentModel c = init_model(cfg, 10);
  REQUIRE(c.parameters()[0].second->data()[0] != a.parameters()[0].second->data()[0]);
}

TEST_CASE("extract_features") {
  ModelConfig cfg = tiny_cfg();
  ConsentModel m = init_model(cfg, 1);

  SECTION("zero block with zero biases maps to the zero embedding") {
    for (Tensor* b : {&m.conv1_b, &m.conv2_b, &m.conv3_b, &m.proj_b})
      *b = Tensor::zeros(b->shape(), true);
    const Tensor zero = Tensor::zeros({1, 16, 16});
    Tensor e = extract_features(m, {zero}, {1});
    for (std::size_t j = 0; j < e.size(); ++j) REQUIRE(e.data()[j] == 0.0);
  }
  SECTION("identical blocks share identical embeddings") {
    Rng rng(3);
    const Tensor blk = random_block(rng, cfg);
    Tensor e = extract_features(m, {blk, blk}, {1, 1});
    for (std::size_t j = 0; j < 8; ++j) REQUIRE(e(0, j) == e(1, j));
  }
  SECTION("masked positions produce zero embeddings") {
    Rng rng(4);
    const Tensor blk = random_block(rng, cfg);
    Tensor e = extract_features(m, {blk, Tensor{}}, {1, 0});
    for (std::size_t j = 0; j < 8; ++j) REQUIRE(e(1, j) == 0.0);
  }
  SECTION("gradients flow to the conv weights") {
    Rng rng(5);
    PatchSequence seq = random_sequence(rng, cfg, 2);
    auto loss = [&] { return sum(extract_features(m, seq.blocks, seq.mask)); };
    auto res = oracle::check_gradients(
        {&m.conv1_w, &m.conv1_b, &m.conv2_w, &m.conv3_w, &m.proj_w, &m.proj_b}, loss, 6, rng);
    REQUIRE(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("encode") {
  ModelConfig cfg = tiny_cfg();
  ConsentModel m = init_model(cfg, 2);
  Rng rng(7);

  SECTION("length-1 sequence: attention weight matrix is [1]") {
    std::vector<double> e(8);
    for (auto& v : e) v = rng.uniform(-1, 1);
    std::vector<Tensor> attn;
    encode(m, Tensor::from_data({1, 8}, e), {1}, &attn);
    REQUIRE(attn.size() == std::size_t(cfg.num_stacks * cfg.num_heads));
    for (const auto& a : attn) {
      REQUIRE(a.size() == 1);
      REQUIRE(a(0, 0) == 1.0);
    }
  }
  SECTION("identical embeddings attend uniformly") {
    std::vector<double> row(8);
    for (auto& v : row) v = rng.uniform(-1, 1);
    std::vector<double> e;
    for (int i = 0; i < 5; ++i) e.insert(e.end(), row.begin(), row.end());
    std::vector<Tensor> attn;
    encode(m, Tensor::from_data({5, 8}, e), {1, 1, 1, 1, 1}, &attn);
    // only the first stack sees identical rows
    for (int h = 0; h < cfg.num_heads; ++h)
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t k = 0; k < 5; ++k)
          REQUIRE(attn[std::size_t(h)](i, k) == Catch::Approx(0.2).margin(1e-15));
  }
  SECTION("zero stacks is the identity (context-free ablation)") {
    ModelConfig cfg0 = tiny_cfg();
    cfg0.num_stacks = 0;
    ConsentModel m0 = init_model(cfg0, 2);
    std::vector<double> e(3 * 8);
    for (auto& v : e) v = rng.uniform(-1, 1);
    const Tensor x = Tensor::from_data({3, 8}, e);
    Tensor y = encode(m0, x, {1, 1, 1});
    for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(y.data()[i] == x.data()[i]);
  }
}

TEST_CASE("decode") {
  ModelConfig cfg = tiny_cfg();
  ConsentModel m = init_model(cfg, 3);
  Rng rng(11);

  SECTION("zero-initialized head yields 0.5/0.5") {
    m.dec_w = Tensor::zeros({8, 2}, true);
    m.dec_b = Tensor::zeros({2}, true);
    std::vector<double> e(4 * 8);
    for (auto& v : e) v = rng.uniform(-1, 1);
    Tensor p = decode(m, Tensor::from_data({4, 8}, e));
    for (std::size_t i = 0; i < 4; ++i) {
      REQUIRE(p(i, 0) == 0.5);
      REQUIRE(p(i, 1) == 0.5);
    }
  }
  SECTION("rows sum to one") {
    std::vector<double> e(6 * 8);
    for (auto& v : e) v = rng.uniform(-3, 3);
    Tensor p = decode(m, Tensor::from_data({6, 8}, e));
    for (std::size_t i = 0; i < 6; ++i)
      REQUIRE(p(i, 0) + p(i, 1) == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("argmax over probabilities equals argmax over logits") {
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> e(8);
      for (auto& v : e) v = rng.uniform(-2, 2);
      const Tensor x = Tensor::from_data({1, 8}, e);
      const Tensor logits = linear(x, m.dec_w, m.dec_b);
      const Tensor p = decode(m, x);
      REQUIRE((logits(0, 0) > logits(0, 1)) == (p(0, 0) > p(0, 1)));
    }
  }
}

TEST_CASE("losses") {
  SECTION("perfect predictions give zero BCE") {
    const Tensor probs = Tensor::from_data({3, 2}, {1, 0, 0, 1, 1, 0});
    const Tensor loss = bce_loss(probs, {0, 1, 0}, {1, 1, 1});
    REQUIRE(loss.value() == Catch::Approx(0.0).margin(1e-11));
  }
  SECTION("coin-flip predictions give ln 2") {
    const Tensor probs = Tensor::full({4, 2}, 0.5);
    const Tensor loss = bce_loss(probs, {0, 1, 1, 0}, {1, 1, 1, 1});
    REQUIRE(loss.value() == Catch::Approx(0.6931471805599453).epsilon(1e-12));
  }
  SECTION("masked elements are excluded") {
    const Tensor probs = Tensor::from_data({2, 2}, {0.5, 0.5, 0.99, 0.01});
    const Tensor loss = bce_loss(probs, {0, 0}, {1, 0});
    REQUIRE(loss.value() == Catch::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SECTION("no unmasked elements is an error") {
    const Tensor probs = Tensor::full({2, 2}, 0.5);
    REQUIRE_THROWS_AS(bce_loss(probs, {0, 1}, {0, 0}), ValidationError);
  }
  SECTION("focal with gamma 0 and alpha 0.5 is half the BCE") {
    Rng rng(13);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t n = std::size_t(rng.uniform_int(1, 12));
      std::vector<double> p(n * 2);
      std::vector<int> labels(n);
      std::vector<std::uint8_t> mask(n, 1);
      for (std::size_t i = 0; i < n; ++i) {
        const double q = rng.uniform(0.01, 0.99);
        p[i * 2] = 1 - q;
        p[i * 2 + 1] = q;
        labels[i] = rng.bernoulli(0.5) ? 1 : 0;
      }
      const Tensor probs = Tensor::from_data({n, 2}, p);
      const double bce = bce_loss(probs, labels, mask).value();
      const double focal = focal_loss(probs, labels, mask, 0.0, 0.5).value();
      REQUIRE(std::abs(focal - 0.5 * bce) < 1e-12);
    }
  }
  SECTION("hand-evaluated focal value") {
    // p_t = 0.5, bold target, gamma = 2: (1-0.5)^2 * ln 2 = 0.25 * ln 2
    const Tensor probs = Tensor::from_data({1, 2}, {0.5, 0.5});
    const Tensor loss = focal_loss(probs, {1}, {1}, 2.0, 0.999999999999);
    REQUIRE(loss.value() == Catch::Approx(0.25 * std::log(2.0)).epsilon(1e-6));
  }
  SECTION("confident correct predictions give zero focal loss") {
    const Tensor probs = Tensor::from_data({2, 2}, {0, 1, 1, 0});
    const Tensor loss = focal_loss(probs, {1, 0}, {1, 1}, 2.0, 0.75);
    REQUIRE(loss.value() == Catch::Approx(0.0).margin(1e-11));
  }
  SECTION("parameter validation") {
    const Tensor probs = Tensor::full({1, 2}, 0.5);
    REQUIRE_THROWS_AS(focal_loss(probs, {1}, {1}, -1.0, 0.5), ValidationError);
    REQUIRE_THROWS_AS(focal_loss(probs, {1}, {1}, 2.0, 0.0), ValidationError);
    REQUIRE_THROWS_AS(focal_loss(probs, {1}, {1}, 2.0, 1.0), ValidationError);
  }
}

TEST_CASE("aggregate_word_predictions") {
  SECTION("single-block word") {
    const Tensor probs = Tensor::from_data({1, 2}, {0.1, 0.9});
    auto agg = aggregate_word_predictions(probs, {0}, {1}, 1);
    REQUIRE(agg.labels[0] == 1);
    REQUIRE(agg.p_bold[0] == 0.9);
  }
  SECTION("mean over blocks decides") {
    const Tensor probs = Tensor::from_data({3, 2}, {0.6, 0.4, 0.6, 0.4, 0.1, 0.9});
    auto agg = aggregate_word_predictions(probs, {0, 0, 0}, {1, 1, 1}, 1);
    REQUIRE(agg.p_bold[0] == Catch::Approx(0.5666666666666667).epsilon(1e-12));
    REQUIRE(agg.labels[0] == 1);
  }
  SECTION("exact 0.5 resolves to bold") {
    const Tensor probs = Tensor::from_data({2, 2}, {0.5, 0.5, 0.5, 0.5});
    auto agg = aggregate_word_predictions(probs, {0, 0}, {1, 1}, 1);
    REQUIRE(agg.labels[0] == 1);
  }
  SECTION("unknown word id is an error") {
    const Tensor probs = Tensor::full({1, 2}, 0.5);
    REQUIRE_THROWS_AS(aggregate_word_predictions(probs, {3}, {1}, 2), ValidationError);
  }
}

TEST_CASE("permutation equivariance of the full forward") {
  ModelConfig cfg = tiny_cfg();
  ConsentModel m = init_model(cfg, 21);
  Rng rng(22);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = std::size_t(rng.uniform_int(2, 6));
    PatchSequence seq = random_sequence(rng, cfg, n);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    rng.shuffle(perm);
    PatchSequence pseq = seq;
    for (std::size_t i = 0; i < n; ++i) {
      pseq.blocks[perm[i]] = seq.blocks[i];
      pseq.labels[perm[i]] = seq.labels[i];
      pseq.word_ids[perm[i]] = seq.word_ids[i];
    }
    const Tensor base = consent_forward(m, seq);
    const Tensor permuted = consent_forward(m, pseq);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < 2; ++c) REQUIRE(permuted(perm[i], c) == base(i, c));
  }
}

TEST_CASE("padding invariance of the full forward") {
  ModelConfig cfg = tiny_cfg();
  ConsentModel m = init_model(cfg, 31);
  Rng rng(32);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = std::size_t(rng.uniform_int(1, 5));
    PatchSequence seq = random_sequence(rng, cfg, n);
    PatchSequence padded = seq;
    const std::size_t extra = std::size_t(rng.uniform_int(1, 6));
    for (std::size_t i = 0; i < extra; ++i) {
      padded.blocks.emplace_back();
      padded.mask.push_back(0);
      padded.labels.push_back(-1);
      padded.word_ids.push_back(-1);
    }
    const Tensor base = consent_forward(m, seq);
    const Tensor padded_out = consent_forward(m, padded);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < 2; ++c) REQUIRE(padded_out(i, c) == base(i, c));
  }
}

TEST_CASE("end-to-end gradient check") {
  ModelConfig cfg = tiny_cfg();
  ConsentModel m = init_model(cfg, 41);
  Rng rng(42);
  PatchSequence seq = random_sequence(rng, cfg, 3);

  auto loss = [&] {
    return focal_loss(consent_forward(m, seq), seq.labels, seq.mask, 2.0, 0.75);
  };
  std::vector<Tensor*> params;
  for (auto& [name, t] : m.parameters()) params.push_back(t);
  auto res = oracle::check_gradients(params, loss, 4, rng);
  INFO("max relative error " << res.max_rel_err << " over " << res.checked << " points");
  REQUIRE(res.max_rel_err < 1e-4);
}

TEST_CASE("positional encoding switch breaks permutation symmetry") {
  ModelConfig cfg = tiny_cfg();
  cfg.positional_encoding = true;
  ConsentModel m = init_model(cfg, 51);
  Rng rng(52);
  PatchSequence seq = random_sequence(rng, cfg, 3);
  PatchSequence rev = seq;
  std::swap(rev.blocks[0], rev.blocks[2]);
  const Tensor a = consent_forward(m, seq);
  const Tensor b = consent_forward(m, rev);
  // with positions attached, swapping elements changes their outputs
  bool any_diff = false;
  for (std::size_t c = 0; c < 2; ++c)
    if (b(2, c) != a(0, c)) any_diff = true;
  REQUIRE(any_diff);
}

TEST_CASE("model serialization") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "consent_model_test.cnsnt").string();
  ModelConfig cfg = tiny_cfg();
  ConsentModel m = init_model(cfg, 61);

  SECTION("round trip is bit-exact") {
    save_model(m, path);
    ConsentModel loaded = load_model(path);
    REQUIRE(loaded.cfg.embed_dim == cfg.embed_dim);
    REQUIRE(loaded.cfg.num_stacks == cfg.num_stacks);
    auto pa = m.parameters(), pb = loaded.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      REQUIRE(pa[i].first == pb[i].first);
      const auto da = pa[i].second->data(), db = pb[i].second->data();
      REQUIRE(da.size() == db.size());
      for (std::size_t j = 0; j < da.size(); ++j) REQUIRE(da[j] == db[j]);
    }
  }
  SECTION("corrupted magic is a distinct error") {
    save_model(m, path);
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("BOGUS", 5);
    f.close();
    try {
      load_model(path);
      FAIL("expected ModelLoadError");
    } catch (const ModelLoadError& e) {
      REQUIRE(e.kind == ModelLoadError::Kind::BadMagic);
    }
  }
  SECTION("unsupported version is a distinct error") {
    save_model(m, path);
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(5);
    f.put(char(0x7F));
    f.close();
    try {
      load_model(path);
      FAIL("expected ModelLoadError");
    } catch (const ModelLoadError& e) {
      REQUIRE(e.kind == ModelLoadError::Kind::BadVersion);
    }
  }
  SECTION("truncated tensor payload is a distinct error") {
    save_model(m, path);
    const auto size = fs::file_size(path);
    fs::resize_file(path, size - 200);
    try {
      load_model(path);
      FAIL("expected ModelLoadError");
    } catch (const ModelLoadError& e) {
      REQUIRE(e.kind == ModelLoadError::Kind::Truncated);
    }
  }
  SECTION("tensor-count mismatch is a structure error") {
    save_model(m, path);
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(5 + 1 + 8 * 4);
    // header claims one more tensor than the registry holds
    const std::uint32_t bogus = std::uint32_t(m.parameters().size() + 1);
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = char((bogus >> (8 * i)) & 0xFF);
    f.write(b, 4);
    f.close();
    try {
      load_model(path);
      FAIL("expected ModelLoadError");
    } catch (const ModelLoadError& e) {
      REQUIRE(e.kind == ModelLoadError::Kind::BadStructure);
    }
  }
  fs::remove(path);
}

TEST_CASE("word_blocks splits by aspect ratio") {
  ModelConfig cfg = tiny_cfg();  // blocks are 16x16, aspect 1:1
  RgbImage img(200, 40, 200);
  SECTION("narrow word maps to a single block") {
    auto blocks = word_blocks(img, Box{0, 0, 20, 30}, cfg);
    REQUIRE(blocks.size() == 1);
    REQUIRE(blocks[0].shape() == Shape{1, 16, 16});
  }
  SECTION("wide word is covered by ceil(w / (h * aspect)) blocks") {
    // block width in patch coords = h * (16/16) = 30 -> ceil(100/30) = 4
    auto blocks = word_blocks(img, Box{0, 0, 100, 30}, cfg);
    REQUIRE(blocks.size() == 4);
  }
  SECTION("box outside the raster is rejected") {
    REQUIRE_THROWS_AS(word_blocks(img, Box{190, 0, 20, 30}, cfg), ValidationError);
  }
}

TEST_CASE("build_sequences chunks by max_seq_len without splitting words") {
  ModelConfig cfg = tiny_cfg();
  cfg.max_seq_len = 5;
  RgbImage img(400, 200, 220);
  std::vector<Box> boxes;
  std::vector<int> labels;
  for (int i = 0; i < 4; ++i) {
    boxes.push_back(Box{5 + 90 * i, 10, 80, 30});  // 80 / 30 -> 3 blocks each
    labels.push_back(i % 2);
  }
  auto seqs = build_sequences(img, boxes, labels, cfg, 0);
  REQUIRE(seqs.size() == 4);  // 3 blocks per word, 5 max: one word per chunk
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    REQUIRE(seqs[s].length() == 3);
    for (std::size_t i = 0; i < seqs[s].length(); ++i) {
      REQUIRE(seqs[s].word_ids[i] == int(s));
      REQUIRE(seqs[s].labels[i] == labels[s]);
    }
  }
}
