#pragma once

// The CONSENT network: a shared-weight conv feature extractor over word
// blocks, a stack of self-attention encoder layers mixing information
// across the words of one image, and a per-element linear+softmax head.
//
// There is no positional encoding by default: bold-vs-context is a
// set statistic, which also gives the model exact permutation
// equivariance. A sinusoidal encoding can be switched on for ablations.

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "consent/common.hpp"
#include "consent/image.hpp"
#include "consent/tensor.hpp"

namespace consent {

struct ModelConfig {
  int block_h = 128;
  int block_w = 96;  // 3:4 aspect
  int channels = 1;  // 1 = grayscale, 3 = rgb
  int embed_dim = 64;
  int num_heads = 4;
  int num_stacks = 4;   // 0 = context-free ablation (encoder bypassed)
  int ffn_hidden = 0;   // 0 resolves to 4 * embed_dim
  int max_seq_len = 100;
  bool positional_encoding = false;  // ablation switch; not serialized

  int ffn() const { return ffn_hidden > 0 ? ffn_hidden : 4 * embed_dim; }

  void validate() const {
    if (block_h < 8 || block_w < 8) throw DimensionError("config: block size below 8px");
    if (channels != 1 && channels != 3) throw DimensionError("config: channels must be 1 or 3");
    if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0)
      throw DimensionError("config: embed_dim must be a positive multiple of num_heads");
    if (num_stacks < 0) throw DimensionError("config: negative stack count");
    if (max_seq_len < 1) throw DimensionError("config: max_seq_len must be >= 1");
  }
};

// Conv widths of the three extractor stages.
inline constexpr int kPhiChannels[3] = {8, 16, 32};

struct EncoderStack {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln1_g, ln1_b;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Tensor ln2_g, ln2_b;
};

struct ConsentModel {
  ModelConfig cfg;
  Tensor conv1_w, conv1_b, conv2_w, conv2_b, conv3_w, conv3_b;
  Tensor proj_w, proj_b;
  std::vector<EncoderStack> stacks;
  Tensor dec_w, dec_b;

  /// Named parameters in fixed registry order (serialization, optimizer).
  std::vector<std::pair<std::string, Tensor*>> parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.reserve(10 + stacks.size() * 16);
    out.emplace_back("phi.conv1.w", &conv1_w);
    out.emplace_back("phi.conv1.b", &conv1_b);
    out.emplace_back("phi.conv2.w", &conv2_w);
    out.emplace_back("phi.conv2.b", &conv2_b);
    out.emplace_back("phi.conv3.w", &conv3_w);
    out.emplace_back("phi.conv3.b", &conv3_b);
    out.emplace_back("phi.proj.w", &proj_w);
    out.emplace_back("phi.proj.b", &proj_b);
    for (std::size_t t = 0; t < stacks.size(); ++t) {
      const std::string p = "gamma." + std::to_string(t) + ".";
      EncoderStack& st = stacks[t];
      out.emplace_back(p + "attn.wq", &st.wq);
      out.emplace_back(p + "attn.bq", &st.bq);
      out.emplace_back(p + "attn.wk", &st.wk);
      out.emplace_back(p + "attn.bk", &st.bk);
      out.emplace_back(p + "attn.wv", &st.wv);
      out.emplace_back(p + "attn.bv", &st.bv);
      out.emplace_back(p + "attn.wo", &st.wo);
      out.emplace_back(p + "attn.bo", &st.bo);
      out.emplace_back(p + "ln1.g", &st.ln1_g);
      out.emplace_back(p + "ln1.b", &st.ln1_b);
      out.emplace_back(p + "ffn.w1", &st.ffn_w1);
      out.emplace_back(p + "ffn.b1", &st.ffn_b1);
      out.emplace_back(p + "ffn.w2", &st.ffn_w2);
      out.emplace_back(p + "ffn.b2", &st.ffn_b2);
      out.emplace_back(p + "ln2.g", &st.ln2_g);
      out.emplace_back(p + "ln2.b", &st.ln2_b);
    }
    out.emplace_back("psi.w", &dec_w);
    out.emplace_back("psi.b", &dec_b);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto& [name, t] : parameters()) n += t->size();
    return n;
  }
};

namespace detail {
inline Tensor init_uniform(Rng& rng, Shape shape, std::size_t fan_in) {
  const double bound = std::sqrt(1.0 / double(fan_in));
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = rng.uniform(-bound, bound);
  return Tensor::from_data(std::move(shape), std::move(data), true);
}
}  // namespace detail

inline ConsentModel init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(Rng::mix(seed, 0x434e534eull));  // param stream
  ConsentModel m;
  m.cfg = cfg;
  const std::size_t C = std::size_t(cfg.channels);
  const std::size_t d = std::size_t(cfg.embed_dim);
  const std::size_t f = std::size_t(cfg.ffn());
  using detail::init_uniform;
  m.conv1_w = init_uniform(rng, {8, C, 3, 3}, C * 9);
  m.conv1_b = init_uniform(rng, {8}, C * 9);
  m.conv2_w = init_uniform(rng, {16, 8, 3, 3}, 8 * 9);
  m.conv2_b = init_uniform(rng, {16}, 8 * 9);
  m.conv3_w = init_uniform(rng, {32, 16, 3, 3}, 16 * 9);
  m.conv3_b = init_uniform(rng, {32}, 16 * 9);
  m.proj_w = init_uniform(rng, {32, d}, 32);
  m.proj_b = init_uniform(rng, {d}, 32);
  m.stacks.resize(std::size_t(cfg.num_stacks));
  for (auto& st : m.stacks) {
    st.wq = init_uniform(rng, {d, d}, d);
    st.bq = init_uniform(rng, {d}, d);
    st.wk = init_uniform(rng, {d, d}, d);
    st.bk = init_uniform(rng, {d}, d);
    st.wv = init_uniform(rng, {d, d}, d);
    st.bv = init_uniform(rng, {d}, d);
    st.wo = init_uniform(rng, {d, d}, d);
    st.bo = init_uniform(rng, {d}, d);
    st.ln1_g = Tensor::full({d}, 1.0, true);
    st.ln1_b = Tensor::zeros({d}, true);
    st.ffn_w1 = init_uniform(rng, {d, f}, d);
    st.ffn_b1 = init_uniform(rng, {f}, d);
    st.ffn_w2 = init_uniform(rng, {f, d}, f);
    st.ffn_b2 = init_uniform(rng, {d}, f);
    st.ln2_g = Tensor::full({d}, 1.0, true);
    st.ln2_b = Tensor::zeros({d}, true);
  }
  m.dec_w = init_uniform(rng, {d, 2}, d);
  m.dec_b = init_uniform(rng, {2}, d);
  return m;
}

// ---------------------------------------------------------------------------
// Sequences of word blocks.

struct PatchSequence {
  std::vector<Tensor> blocks;       // defined only where mask == 1
  std::vector<std::uint8_t> mask;   // 1 = real element
  std::vector<int> labels;          // {0,1}, or -1 where unknown/masked
  std::vector<int> word_ids;        // -1 where masked
  int n_words = 0;                  // words of the source image in this chunk
  int image_index = -1;

  std::size_t length() const { return mask.size(); }
  std::size_t real_count() const {
    std::size_t n = 0;
    for (auto m : mask) n += m;
    return n;
  }
};

using SequenceBatch = std::vector<PatchSequence>;

/// Splits one word patch into the minimum number of aspect-true blocks
/// covering its width (stride = block width, last block right-aligned),
/// each resized to the configured block resolution, values in [0, 1].
inline std::vector<Tensor> word_blocks(const RgbImage& img, const Box& box,
                                       const ModelConfig& cfg) {
  if (box.w <= 0 || box.h <= 0 || box.x < 0 || box.y < 0 || box.x + box.w > img.width() ||
      box.y + box.h > img.height())
    throw ValidationError("word_blocks: box outside image bounds");
  const int wb = std::max(1, int(std::lround(double(box.h) * cfg.block_w / cfg.block_h)));
  int n = (box.w + wb - 1) / wb;
  n = std::max(1, std::min(n, cfg.max_seq_len));
  std::vector<Tensor> out;
  out.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    Box slice = box;
    if (n > 1) {
      slice.x = box.x + (i + 1 == n ? box.w - wb : i * wb);
      slice.w = wb;
    }
    const RgbImage sub = img.crop(slice);
    std::vector<double> data;
    data.reserve(std::size_t(cfg.channels) * cfg.block_h * cfg.block_w);
    if (cfg.channels == 1) {
      data = resize_bilinear(sub.to_gray(), cfg.block_w, cfg.block_h);
    } else {
      for (int c = 0; c < 3; ++c) {
        auto plane = resize_bilinear(sub.channel(c), cfg.block_w, cfg.block_h);
        data.insert(data.end(), plane.begin(), plane.end());
      }
    }
    out.push_back(Tensor::from_data(
        {std::size_t(cfg.channels), std::size_t(cfg.block_h), std::size_t(cfg.block_w)},
        std::move(data)));
  }
  return out;
}

/// Chunks one image's words into sequences of at most max_seq_len blocks.
/// Blocks of the same word never straddle a sequence boundary. Word order
/// is manifest (reading) order unless a shuffle stream is supplied.
inline SequenceBatch build_sequences(const RgbImage& img, const std::vector<Box>& boxes,
                                     const std::vector<int>& labels, const ModelConfig& cfg,
                                     int image_index = -1, Rng* chunk_shuffle = nullptr) {
  if (!labels.empty() && labels.size() != boxes.size())
    throw ValidationError("build_sequences: label/box count mismatch");
  std::vector<std::size_t> order(boxes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (chunk_shuffle) chunk_shuffle->shuffle(order);

  SequenceBatch out;
  PatchSequence cur;
  cur.image_index = image_index;
  auto flush = [&] {
    if (!cur.mask.empty()) {
      cur.n_words = int(boxes.size());
      out.push_back(std::move(cur));
      cur = PatchSequence{};
      cur.image_index = image_index;
    }
  };
  for (std::size_t wi : order) {
    auto blocks = word_blocks(img, boxes[wi], cfg);
    if (cur.mask.size() + blocks.size() > std::size_t(cfg.max_seq_len)) flush();
    const int label = labels.empty() ? -1 : labels[wi];
    for (auto& b : blocks) {
      cur.blocks.push_back(std::move(b));
      cur.mask.push_back(1);
      cur.labels.push_back(label);
      cur.word_ids.push_back(int(wi));
    }
  }
  flush();
  return out;
}

// ---------------------------------------------------------------------------
// Forward passes.

/// Phi applied independently per block (shared weights) -> [S x d].
/// Masked positions produce zero embeddings.
inline Tensor extract_features(const ConsentModel& m, const std::vector<Tensor>& blocks,
                               const std::vector<std::uint8_t>& mask) {
  if (blocks.size() != mask.size())
    throw DimensionError("extract_features: block/mask count mismatch");
  if (mask.empty()) throw DimensionError("extract_features: empty sequence");
  const std::size_t d = std::size_t(m.cfg.embed_dim);
  const Tensor zero_row = Tensor::zeros({d});
  std::vector<Tensor> rows;
  rows.reserve(blocks.size());
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (!mask[i]) {
      rows.push_back(zero_row);
      continue;
    }
    const Tensor& blk = blocks[i];
    if (blk.rank() != 3 || blk.shape()[0] != std::size_t(m.cfg.channels) ||
        blk.shape()[1] != std::size_t(m.cfg.block_h) ||
        blk.shape()[2] != std::size_t(m.cfg.block_w))
      throw DimensionError("extract_features: block shape does not match config");
    Tensor t = max_pool2(relu(conv2d_3x3(blk, m.conv1_w, m.conv1_b)));
    t = max_pool2(relu(conv2d_3x3(t, m.conv2_w, m.conv2_b)));
    t = max_pool2(relu(conv2d_3x3(t, m.conv3_w, m.conv3_b)));
    Tensor v = reshape(global_avg_pool(t), {1, 32});
    Tensor e = linear(v, m.proj_w, m.proj_b);
    rows.push_back(reshape(e, {d}));
  }
  return stack_rows(rows);
}

/// Sinusoidal position table (ablation only; disabled by default).
inline Tensor sinusoidal_encoding(std::size_t seq_len, std::size_t d) {
  std::vector<double> pe(seq_len * d);
  for (std::size_t pos = 0; pos < seq_len; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double div = std::exp(-std::log(10000.0) * double(i) / double(d));
      pe[pos * d + i] = std::sin(double(pos) * div);
      if (i + 1 < d) pe[pos * d + i + 1] = std::cos(double(pos) * div);
    }
  }
  return Tensor::from_data({seq_len, d}, std::move(pe));
}

/// T post-norm encoder stacks of masked multi-head self-attention.
/// Masked positions are excluded as keys and zeroed as queries; real
/// positions are bit-identical under permutation and appended padding.
inline Tensor encode(const ConsentModel& m, const Tensor& embeddings,
                     const std::vector<std::uint8_t>& mask,
                     std::vector<Tensor>* attention_out = nullptr) {
  if (embeddings.rank() != 2 || embeddings.shape()[1] != std::size_t(m.cfg.embed_dim))
    throw DimensionError("encode: embeddings must be [S x d]");
  const std::size_t seq = embeddings.shape()[0];
  if (mask.size() != seq) throw DimensionError("encode: mask length mismatch");
  const std::size_t d = std::size_t(m.cfg.embed_dim);
  const std::size_t heads = std::size_t(m.cfg.num_heads);
  const std::size_t dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));

  Tensor x = embeddings;
  if (m.cfg.positional_encoding) x = add(x, sinusoidal_encoding(seq, d));
  if (m.stacks.empty()) return x;

  std::vector<double> mrow(seq);
  for (std::size_t i = 0; i < seq; ++i) mrow[i] = mask[i] ? 1.0 : 0.0;
  const Tensor row_mask = Tensor::from_data({seq}, mrow);

  for (const EncoderStack& st : m.stacks) {
    const Tensor q = linear(x, st.wq, st.bq);
    const Tensor k = linear(x, st.wk, st.bk);
    const Tensor v = linear(x, st.wv, st.bv);
    std::vector<Tensor> head_out;
    head_out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      const Tensor qh = slice_cols(q, h * dh, dh);
      const Tensor kh = slice_cols(k, h * dh, dh);
      const Tensor vh = slice_cols(v, h * dh, dh);
      const Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
      const Tensor probs = attention_probs(scores, mask);
      if (attention_out) attention_out->push_back(probs);
      head_out.push_back(attend(probs, vh));
    }
    Tensor attn = linear(concat_cols(head_out), st.wo, st.bo);
    attn = scale_rows(attn, row_mask);
    x = layer_norm(add(x, attn), st.ln1_g, st.ln1_b);
    Tensor ff = linear(relu(linear(x, st.ffn_w1, st.ffn_b1)), st.ffn_w2, st.ffn_b2);
    x = layer_norm(add(x, ff), st.ln2_g, st.ln2_b);
    x = scale_rows(x, row_mask);  // keep masked rows exactly zero
  }
  return x;
}

/// Per-element linear d -> 2 + softmax. Column 1 is P(bold).
inline Tensor decode(const ConsentModel& m, const Tensor& encoded) {
  if (encoded.rank() != 2 || encoded.shape()[1] != std::size_t(m.cfg.embed_dim))
    throw DimensionError("decode: input must be [S x d]");
  return softmax(linear(encoded, m.dec_w, m.dec_b), 1);
}

/// Full forward: probabilities [S x 2] for one sequence.
inline Tensor consent_forward(const ConsentModel& m, const PatchSequence& seq,
                              std::vector<Tensor>* attention_out = nullptr) {
  return decode(m, encode(m, extract_features(m, seq.blocks, seq.mask), seq.mask,
                          attention_out));
}

// ---------------------------------------------------------------------------
// Losses. Probabilities are clamped to [1e-12, 1-1e-12]; the mean runs
// over unmasked elements only.

inline constexpr double kProbClamp = 1e-12;

namespace detail {
inline std::size_t checked_mask_count(const Tensor& probs, const std::vector<int>& labels,
                                      const std::vector<std::uint8_t>& mask) {
  if (probs.rank() != 2 || probs.shape()[1] != 2)
    throw DimensionError("loss: probabilities must be [S x 2]");
  if (labels.size() != probs.shape()[0] || mask.size() != probs.shape()[0])
    throw DimensionError("loss: label/mask count mismatch");
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    if (labels[i] != 0 && labels[i] != 1) throw ValidationError("loss: labels must be 0/1");
    ++n;
  }
  if (n == 0) throw ValidationError("loss: no unmasked elements");
  return n;
}
inline std::vector<int> masked_indices(const std::vector<int>& labels,
                                       const std::vector<std::uint8_t>& mask) {
  std::vector<int> idx(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) idx[i] = mask[i] ? labels[i] : 0;
  return idx;
}
}  // namespace detail

/// Mean over unmasked elements of -log p(true class).
inline Tensor bce_loss(const Tensor& probs, const std::vector<int>& labels,
                       const std::vector<std::uint8_t>& mask) {
  const std::size_t n = detail::checked_mask_count(probs, labels, mask);
  const Tensor pt = gather_index(probs, detail::masked_indices(labels, mask));
  const Tensor lg = log(clamp(pt, kProbClamp, 1.0 - kProbClamp));
  std::vector<double> w(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) w[i] = mask[i] ? 1.0 : 0.0;
  const Tensor weighted = mul(lg, Tensor::from_data({mask.size()}, std::move(w)));
  return scale(sum(weighted), -1.0 / double(n));
}

/// Mean over unmasked elements of -w * (1-p_t)^gamma * log(p_t), where
/// w = alpha_bold for bold targets and (1 - alpha_bold) otherwise.
inline Tensor focal_loss(const Tensor& probs, const std::vector<int>& labels,
                         const std::vector<std::uint8_t>& mask, double gamma,
                         double alpha_bold) {
  if (gamma < 0.0) throw ValidationError("focal_loss: gamma must be >= 0");
  if (alpha_bold <= 0.0 || alpha_bold >= 1.0)
    throw ValidationError("focal_loss: alpha_bold must be in (0, 1)");
  const std::size_t n = detail::checked_mask_count(probs, labels, mask);
  const Tensor pt = clamp(gather_index(probs, detail::masked_indices(labels, mask)),
                          kProbClamp, 1.0 - kProbClamp);
  const Tensor focal = mul(pow_scalar(affine(pt, -1.0, 1.0), gamma), log(pt));
  std::vector<double> w(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i)
    w[i] = mask[i] ? (labels[i] == 1 ? alpha_bold : 1.0 - alpha_bold) : 0.0;
  const Tensor weighted = mul(focal, Tensor::from_data({mask.size()}, std::move(w)));
  return scale(sum(weighted), -1.0 / double(n));
}

// ---------------------------------------------------------------------------
// Word-level aggregation: word P(bold) = mean of its blocks' P(bold),
// bold iff >= 0.5 (ties resolve to bold).

struct WordPredictions {
  std::vector<double> p_bold;
  std::vector<int> labels;
};

inline WordPredictions aggregate_word_predictions(const Tensor& probs,
                                                  const std::vector<int>& word_ids,
                                                  const std::vector<std::uint8_t>& mask,
                                                  int n_words) {
  if (probs.rank() != 2 || probs.shape()[1] != 2)
    throw DimensionError("aggregate: probabilities must be [S x 2]");
  if (word_ids.size() != probs.shape()[0] || mask.size() != probs.shape()[0])
    throw DimensionError("aggregate: id/mask count mismatch");
  if (n_words < 0) throw ValidationError("aggregate: negative word count");
  std::vector<double> acc(std::size_t(n_words), 0.0);
  std::vector<std::size_t> cnt(std::size_t(n_words), 0);
  for (std::size_t i = 0; i < word_ids.size(); ++i) {
    if (!mask[i]) continue;
    const int wi = word_ids[i];
    if (wi < 0 || wi >= n_words)
      throw ValidationError("aggregate: unknown word id " + std::to_string(wi));
    acc[std::size_t(wi)] += probs(i, 1);
    ++cnt[std::size_t(wi)];
  }
  WordPredictions out;
  out.p_bold.resize(std::size_t(n_words), 0.0);
  out.labels.resize(std::size_t(n_words), 0);
  for (int wi = 0; wi < n_words; ++wi) {
    if (cnt[std::size_t(wi)] == 0) continue;  // no blocks seen: stays non-bold
    const double p = acc[std::size_t(wi)] / double(cnt[std::size_t(wi)]);
    out.p_bold[std::size_t(wi)] = p;
    out.labels[std::size_t(wi)] = p >= 0.5 ? 1 : 0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model file: magic "CNSNT", version 0x01, config as fixed-order u32 LE,
// then named tensors with f64 LE payloads. Round-trips bit-exactly.

struct ModelLoadError : IoError {
  enum class Kind { BadMagic, BadVersion, Truncated, BadStructure };
  Kind kind;
  ModelLoadError(Kind k, const std::string& msg) : IoError(msg), kind(k) {}
};

namespace detail {

inline void put_u16(std::ostream& f, std::uint16_t v) {
  char b[2] = {char(v & 0xFF), char(v >> 8)};
  f.write(b, 2);
}
inline void put_u32(std::ostream& f, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = char((v >> (8 * i)) & 0xFF);
  f.write(b, 4);
}
inline void put_f64(std::ostream& f, double v) {
  const auto u = std::bit_cast<std::uint64_t>(v);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = char((u >> (8 * i)) & 0xFF);
  f.write(b, 8);
}

inline bool get_bytes(std::istream& f, char* out, std::size_t n) {
  f.read(out, std::streamsize(n));
  return std::size_t(f.gcount()) == n;
}
inline std::uint16_t get_u16(std::istream& f) {
  unsigned char b[2];
  if (!get_bytes(f, reinterpret_cast<char*>(b), 2))
    throw ModelLoadError(ModelLoadError::Kind::Truncated, "model file: truncated u16");
  return std::uint16_t(b[0] | (b[1] << 8));
}
inline std::uint32_t get_u32(std::istream& f) {
  unsigned char b[4];
  if (!get_bytes(f, reinterpret_cast<char*>(b), 4))
    throw ModelLoadError(ModelLoadError::Kind::Truncated, "model file: truncated u32");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}
inline double get_f64(std::istream& f) {
  unsigned char b[8];
  if (!get_bytes(f, reinterpret_cast<char*>(b), 8))
    throw ModelLoadError(ModelLoadError::Kind::Truncated, "model file: truncated payload");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return std::bit_cast<double>(v);
}

}  // namespace detail

inline void save_model(ConsentModel& model, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("save_model: cannot open " + path);
  f.write("CNSNT", 5);
  f.put(char(0x01));
  const ModelConfig& c = model.cfg;
  for (int v : {c.block_h, c.block_w, c.channels, c.embed_dim, c.num_heads, c.num_stacks,
                c.ffn(), c.max_seq_len})
    detail::put_u32(f, std::uint32_t(v));
  auto params = model.parameters();
  detail::put_u32(f, std::uint32_t(params.size()));
  for (auto& [name, t] : params) {
    detail::put_u16(f, std::uint16_t(name.size()));
    f.write(name.data(), std::streamsize(name.size()));
    f.put(char(t->rank()));
    for (std::size_t dim : t->shape()) detail::put_u32(f, std::uint32_t(dim));
    for (double v : t->data()) detail::put_f64(f, v);
  }
  if (!f) throw IoError("save_model: short write to " + path);
}

inline ConsentModel load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_model: cannot open " + path);
  char magic[5];
  if (!detail::get_bytes(f, magic, 5) || std::string(magic, 5) != "CNSNT")
    throw ModelLoadError(ModelLoadError::Kind::BadMagic, "model file: bad magic");
  const int version = f.get();
  if (version != 0x01)
    throw ModelLoadError(ModelLoadError::Kind::BadVersion,
                         "model file: unsupported version " + std::to_string(version));
  ModelConfig cfg;
  cfg.block_h = int(detail::get_u32(f));
  cfg.block_w = int(detail::get_u32(f));
  cfg.channels = int(detail::get_u32(f));
  cfg.embed_dim = int(detail::get_u32(f));
  cfg.num_heads = int(detail::get_u32(f));
  cfg.num_stacks = int(detail::get_u32(f));
  cfg.ffn_hidden = int(detail::get_u32(f));
  cfg.max_seq_len = int(detail::get_u32(f));
  try {
    cfg.validate();
  } catch (const DimensionError& e) {
    throw ModelLoadError(ModelLoadError::Kind::BadStructure,
                         std::string("model file: invalid config: ") + e.what());
  }

  ConsentModel model = init_model(cfg, 0);  // shape template; data overwritten below
  auto params = model.parameters();
  std::vector<Shape> expected;
  expected.reserve(params.size());
  for (auto& [name, slot] : params) expected.push_back(slot->shape());
  const std::uint32_t count = detail::get_u32(f);
  if (count != params.size())
    throw ModelLoadError(ModelLoadError::Kind::BadStructure,
                         "model file: expected " + std::to_string(params.size()) +
                             " tensors, header says " + std::to_string(count));
  std::size_t pi = 0;
  for (auto& [name, slot] : params) {
    const std::uint16_t nlen = detail::get_u16(f);
    std::string tname(nlen, '\0');
    if (!detail::get_bytes(f, tname.data(), nlen))
      throw ModelLoadError(ModelLoadError::Kind::Truncated, "model file: truncated name");
    if (tname != name)
      throw ModelLoadError(ModelLoadError::Kind::BadStructure,
                           "model file: unexpected tensor '" + tname + "', want '" + name +
                               "'");
    const int rank = f.get();
    if (rank < 0)
      throw ModelLoadError(ModelLoadError::Kind::Truncated, "model file: truncated rank");
    Shape shape;
    for (int r = 0; r < rank; ++r) shape.push_back(detail::get_u32(f));
    if (shape != expected[pi])
      throw ModelLoadError(ModelLoadError::Kind::BadStructure,
                           "model file: tensor '" + name + "' has shape " +
                               detail::shape_str(shape) + ", want " +
                               detail::shape_str(expected[pi]));
    ++pi;
    std::vector<double> data(detail::shape_numel(shape));
    for (double& v : data) v = detail::get_f64(f);
    *slot = Tensor::from_data(std::move(shape), std::move(data), true);
  }
  return model;
}

}  // namespace consent
