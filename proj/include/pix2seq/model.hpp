#pragma once

// Encoder-decoder sequence model: a patch-embedding transformer encoder over
// pixels, a causal transformer decoder over tokens, one softmax over the
// shared vocabulary, and the weighted likelihood objective.
//
// The decoder reads [EOS, y_0, ..., y_{L-2}] and row j of its output predicts
// target y_j; EOS doubles as the start-of-sequence token.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pix2seq/codec.hpp"
#include "pix2seq/image.hpp"
#include "pix2seq/nn.hpp"
#include "pix2seq/rng.hpp"

namespace pix2seq {

struct ModelConfig {
  int image_size = 64;
  int patch_size = 8;
  int channels = 3;
  int d_model = 256;
  int n_heads = 8;
  int d_ffn = 1024;
  int n_encoder_layers = 6;
  int n_decoder_layers = 6;
  int vocab_size = 0;
  int max_target_len = 501;
  double dropout_rate = 0.0;
  double stochastic_depth_rate = 0.0;

  int grid() const { return image_size / patch_size; }
  int n_patches() const { return grid() * grid(); }
  int patch_dim() const { return patch_size * patch_size * channels; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate(const ModelConfig& c) {
  if (c.image_size < 1 || c.patch_size < 1 || c.image_size % c.patch_size != 0)
    throw std::invalid_argument("model.image_size must be a positive multiple of model.patch_size");
  if (c.channels < 1) throw std::invalid_argument("model.channels must be positive");
  if (c.d_model < 1 || c.n_heads < 1 || c.d_model % c.n_heads != 0)
    throw std::invalid_argument("model.d_model must be divisible by model.n_heads");
  if (c.d_ffn < 1) throw std::invalid_argument("model.d_ffn must be positive");
  if (c.n_encoder_layers < 0 || c.n_decoder_layers < 0)
    throw std::invalid_argument("model layer counts must be non-negative");
  if (c.vocab_size < 1) throw std::invalid_argument("model.vocab_size must be positive");
  if (c.max_target_len < 1) throw std::invalid_argument("model.max_target_len must be positive");
  if (c.dropout_rate < 0 || c.dropout_rate >= 1 || c.stochastic_depth_rate < 0 || c.stochastic_depth_rate >= 1)
    throw std::invalid_argument("model dropout rates must be in [0, 1)");
}

template <class S>
struct EncoderLayerParams {
  LayerNormParams<S> norm1;
  AttentionParams<S> self_attn;
  LayerNormParams<S> norm2;
  FeedForwardParams<S> ffn;
};

template <class S>
struct DecoderLayerParams {
  LayerNormParams<S> norm1;
  AttentionParams<S> self_attn;
  LayerNormParams<S> norm2;
  AttentionParams<S> cross_attn;
  LayerNormParams<S> norm3;
  FeedForwardParams<S> ffn;
};

template <class S>
struct ModelParams {
  Tensor<S> patch_proj, patch_bias, encoder_pos;
  std::vector<EncoderLayerParams<S>> encoder;
  LayerNormParams<S> encoder_norm;
  Tensor<S> token_embedding, decoder_pos;
  std::vector<DecoderLayerParams<S>> decoder;
  LayerNormParams<S> decoder_norm;
  Tensor<S> output_proj, output_bias;

  using Named = std::vector<std::pair<std::string, Tensor<S>*>>;

  // Every array with its stable name, in canonical order.
  Named named_tensors() {
    Named out;
    auto add = [&](std::string name, Tensor<S>& t) { out.emplace_back(std::move(name), &t); };
    auto add_norm = [&](const std::string& pre, LayerNormParams<S>& n) {
      add(pre + ".gain", n.gain);
      add(pre + ".bias", n.bias);
    };
    auto add_attn = [&](const std::string& pre, AttentionParams<S>& a) {
      add(pre + ".wq", a.wq), add(pre + ".bq", a.bq), add(pre + ".wk", a.wk), add(pre + ".bk", a.bk);
      add(pre + ".wv", a.wv), add(pre + ".bv", a.bv), add(pre + ".wo", a.wo), add(pre + ".bo", a.bo);
    };
    auto add_ffn = [&](const std::string& pre, FeedForwardParams<S>& f) {
      add(pre + ".w1", f.w1), add(pre + ".b1", f.b1), add(pre + ".w2", f.w2), add(pre + ".b2", f.b2);
    };
    add("patch_proj", patch_proj);
    add("patch_bias", patch_bias);
    add("encoder_pos", encoder_pos);
    for (std::size_t i = 0; i < encoder.size(); ++i) {
      const auto pre = "encoder." + std::to_string(i);
      add_norm(pre + ".norm1", encoder[i].norm1);
      add_attn(pre + ".self_attn", encoder[i].self_attn);
      add_norm(pre + ".norm2", encoder[i].norm2);
      add_ffn(pre + ".ffn", encoder[i].ffn);
    }
    add_norm("encoder_norm", encoder_norm);
    add("token_embedding", token_embedding);
    add("decoder_pos", decoder_pos);
    for (std::size_t i = 0; i < decoder.size(); ++i) {
      const auto pre = "decoder." + std::to_string(i);
      add_norm(pre + ".norm1", decoder[i].norm1);
      add_attn(pre + ".self_attn", decoder[i].self_attn);
      add_norm(pre + ".norm2", decoder[i].norm2);
      add_attn(pre + ".cross_attn", decoder[i].cross_attn);
      add_norm(pre + ".norm3", decoder[i].norm3);
      add_ffn(pre + ".ffn", decoder[i].ffn);
    }
    add_norm("decoder_norm", decoder_norm);
    add("output_proj", output_proj);
    add("output_bias", output_bias);
    return out;
  }

  std::vector<std::pair<std::string, const Tensor<S>*>> named_tensors() const {
    std::vector<std::pair<std::string, const Tensor<S>*>> out;
    for (auto& [n, t] : const_cast<ModelParams*>(this)->named_tensors()) out.emplace_back(n, t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named_tensors()) n += static_cast<std::size_t>(t->size());
    return n;
  }

  // All-zero arrays with the shapes implied by `c`; LayerNorm gains included.
  static ModelParams zeros(const ModelConfig& c) {
    ModelParams p;
    const int d = c.d_model;
    auto z = [](Eigen::Index r, Eigen::Index k) { return Tensor<S>::Zero(r, k); };
    auto norm = [&] { return LayerNormParams<S>{z(1, d), z(1, d)}; };
    auto attn = [&] { return AttentionParams<S>{z(d, d), z(1, d), z(d, d), z(1, d), z(d, d), z(1, d), z(d, d), z(1, d)}; };
    auto ffn = [&] { return FeedForwardParams<S>{z(d, c.d_ffn), z(1, c.d_ffn), z(c.d_ffn, d), z(1, d)}; };
    p.patch_proj = z(c.patch_dim(), d);
    p.patch_bias = z(1, d);
    p.encoder_pos = z(c.n_patches(), d);
    for (int i = 0; i < c.n_encoder_layers; ++i) p.encoder.push_back({norm(), attn(), norm(), ffn()});
    p.encoder_norm = norm();
    p.token_embedding = z(c.vocab_size, d);
    p.decoder_pos = z(c.max_target_len, d);
    for (int i = 0; i < c.n_decoder_layers; ++i) p.decoder.push_back({norm(), attn(), norm(), attn(), norm(), ffn()});
    p.decoder_norm = norm();
    p.output_proj = z(d, c.vocab_size);
    p.output_bias = z(1, c.vocab_size);
    return p;
  }

  // Xavier-uniform (gain 1) for every matrix including embeddings; zero
  // biases; unit LayerNorm gains.
  static ModelParams initialize(const ModelConfig& c, std::uint64_t seed) {
    validate(c);
    ModelParams p = zeros(c);
    Rng rng(seed);
    for (auto& [name, t] : p.named_tensors()) {
      const bool is_gain = name.size() >= 5 && name.compare(name.size() - 5, 5, ".gain") == 0;
      if (is_gain) {
        t->setOnes();
      } else if (t->rows() > 1) {
        const double a = std::sqrt(6.0 / static_cast<double>(t->rows() + t->cols()));
        for (Eigen::Index i = 0; i < t->size(); ++i) t->data()[i] = static_cast<S>(rng.uniform(-a, a));
      }
    }
    return p;
  }

  template <class T>
  ModelParams<T> cast() const {
    ModelParams<T> out = ModelParams<T>::zeros_like_shapes(*this);
    auto src = named_tensors();
    auto dst = out.named_tensors();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<T>();
    return out;
  }

  template <class U>
  static ModelParams zeros_like_shapes(const ModelParams<U>& other) {
    ModelParams p;
    p.encoder.resize(other.encoder.size());
    p.decoder.resize(other.decoder.size());
    auto src = const_cast<ModelParams<U>&>(other).named_tensors();
    auto dst = p.named_tensors();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].second->setZero(src[i].second->rows(), src[i].second->cols());
    return p;
  }

  void set_zero() {
    for (auto& [name, t] : named_tensors()) t->setZero();
  }

  bool all_finite() const {
    for (auto& [name, t] : named_tensors())
      if (!t->allFinite()) return false;
    return true;
  }
};

enum class LossNormalization { mean, sum };

// -sum_j w_j log softmax(logits_j)[target_j] / max(1, sum_j w_j) (or the raw
// sum). Rows past target.size() are ignored. Positions with zero weight are
// skipped entirely, so their logits never reach the loss or the gradient.
template <class S>
S sequence_loss(const Tensor<S>& logits, std::span<const Token> target, std::span<const float> weights,
                LossNormalization norm = LossNormalization::mean, Tensor<S>* dlogits = nullptr, S grad_scale = S(1)) {
  if (target.size() != weights.size()) throw std::invalid_argument("sequence_loss: target/weights length mismatch");
  if (static_cast<std::size_t>(logits.rows()) < target.size())
    throw std::invalid_argument("sequence_loss: fewer logit rows than targets");
  double wsum = 0;
  for (float w : weights) wsum += w;
  const double denom = norm == LossNormalization::mean ? std::max(1.0, wsum) : 1.0;
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  double total = 0;
  for (std::size_t j = 0; j < target.size(); ++j) {
    if (weights[j] == 0.0f) continue;
    const auto row = logits.row(static_cast<Eigen::Index>(j));
    const S mx = row.maxCoeff();
    const S lse = mx + std::log((row.array() - mx).exp().sum());
    total += static_cast<double>(weights[j]) * static_cast<double>(lse - row(target[j]));
    if (dlogits) {
      const S coef = static_cast<S>(weights[j] / denom) * grad_scale;
      auto drow = dlogits->row(static_cast<Eigen::Index>(j));
      drow = (row.array() - lse).exp().matrix() * coef;
      drow(target[j]) -= coef;
    }
  }
  return static_cast<S>(total / denom);
}

// One training/evaluation example: image plus aligned token sequence.
struct Example {
  const Image* image = nullptr;
  const TokenSequence* sequence = nullptr;
};

struct LossOptions {
  LossNormalization normalization = LossNormalization::mean;
};

template <class S>
class Model {
 public:
  Model() = default;
  Model(ModelConfig config, ModelParams<S> params) : config_(std::move(config)), params_(std::move(params)) {
    validate(config_);
  }

  static Model initialize(const ModelConfig& config, std::uint64_t seed) {
    return Model(config, ModelParams<S>::initialize(config, seed));
  }

  const ModelConfig& config() const { return config_; }
  const ModelParams<S>& params() const { return params_; }
  ModelParams<S>& params() { return params_; }

  // Flattened (py, px, channel) patches scaled to [-1, 1]; one row per patch.
  Tensor<S> patchify(const Image& image) const {
    if (image.height != config_.image_size || image.width != config_.image_size || image.channels != config_.channels)
      throw std::invalid_argument("image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                                  "x" + std::to_string(image.channels) + ", model expects " +
                                  std::to_string(config_.image_size) + "x" + std::to_string(config_.image_size) +
                                  "x" + std::to_string(config_.channels));
    const int g = config_.grid(), ps = config_.patch_size, ch = config_.channels;
    Tensor<S> out(config_.n_patches(), config_.patch_dim());
    for (int gy = 0; gy < g; ++gy)
      for (int gx = 0; gx < g; ++gx) {
        S* row = out.row(gy * g + gx).data();
        for (int py = 0; py < ps; ++py)
          for (int px = 0; px < ps; ++px)
            for (int c = 0; c < ch; ++c)
              *row++ = static_cast<S>(image.at(gy * ps + py, gx * ps + px, c)) / S(127.5) - S(1);
      }
    return out;
  }

  // Encoder input: patch projection plus spatial positional embedding.
  Tensor<S> embed_patches(const Tensor<S>& patches, Eigen::Index batch) const {
    Tensor<S> x = linear(patches, params_.patch_proj, params_.patch_bias);
    const Eigen::Index np = config_.n_patches();
    for (Eigen::Index b = 0; b < batch; ++b) x.middleRows(b * np, np) += params_.encoder_pos;
    return x;
  }

  // Eval-mode encoding of one image: n_patches x d_model.
  Tensor<S> encode_image(const Image& image) const {
    const Tensor<S> patches = patchify(image);
    return encode(patches, 1, nullptr, nullptr);
  }

  // Eval-mode logits, one row per input token; row j predicts the token after
  // input_tokens[j].
  Tensor<S> decode_logits(const Tensor<S>& features, std::span<const Token> input_tokens) const {
    check_tokens(input_tokens);
    return decode(features, std::vector<Token>(input_tokens.begin(), input_tokens.end()), 1,
                  static_cast<Eigen::Index>(input_tokens.size()), nullptr, nullptr);
  }

  // Decoder input for a training sequence: EOS then input[0..L-2].
  static std::vector<Token> shift_right(const TokenSequence& seq) {
    std::vector<Token> in;
    in.reserve(seq.size());
    in.push_back(Vocabulary::eos());
    for (std::size_t j = 0; j + 1 < seq.size(); ++j) in.push_back(seq.input[j]);
    return in;
  }

  // Mean per-sequence loss over the batch. When `grad` is given it receives
  // (accumulates into) the gradient; `train_rng` enables dropout and
  // stochastic depth.
  S loss_and_gradients(std::span<const Example> batch, const LossOptions& opts, ModelParams<S>* grad,
                       Rng* train_rng) const {
    if (batch.empty()) throw std::invalid_argument("loss_and_gradients: empty batch");
    const auto b_count = static_cast<Eigen::Index>(batch.size());
    std::size_t t_max = 1;
    for (const auto& ex : batch) {
      if (!ex.image || !ex.sequence) throw std::invalid_argument("loss_and_gradients: null example");
      const auto& s = *ex.sequence;
      if (s.input.size() != s.target.size() || s.weights.size() != s.target.size() || s.target.empty())
        throw std::invalid_argument("loss_and_gradients: misaligned token sequence");
      t_max = std::max(t_max, s.size());
    }
    const auto t = static_cast<Eigen::Index>(t_max);
    if (t > config_.max_target_len) throw std::invalid_argument("sequence longer than model.max_target_len");

    Tensor<S> patches(b_count * config_.n_patches(), config_.patch_dim());
    std::vector<Token> tokens;
    tokens.reserve(batch.size() * t_max);
    for (Eigen::Index b = 0; b < b_count; ++b) {
      patches.middleRows(b * config_.n_patches(), config_.n_patches()) = patchify(*batch[b].image);
      auto in = shift_right(*batch[b].sequence);
      in.resize(t_max, Vocabulary::eos());  // right padding never influences earlier rows
      tokens.insert(tokens.end(), in.begin(), in.end());
    }
    check_tokens(tokens);

    ForwardCache cache;
    ForwardCache* cp = grad ? &cache : nullptr;
    const Tensor<S> features = encode(patches, b_count, cp, train_rng);
    const Tensor<S> logits = decode(features, tokens, b_count, t, cp, train_rng);

    S total = 0;
    Tensor<S> dlogits;
    if (grad) dlogits.setZero(logits.rows(), logits.cols());
    Tensor<S> dseq;
    const S inv_b = S(1) / static_cast<S>(b_count);
    for (Eigen::Index b = 0; b < b_count; ++b) {
      const auto& s = *batch[b].sequence;
      const Tensor<S> rows = logits.middleRows(b * t, static_cast<Eigen::Index>(s.size()));
      total += sequence_loss<S>(rows, s.target, s.weights, opts.normalization, grad ? &dseq : nullptr, inv_b);
      if (grad) dlogits.middleRows(b * t, static_cast<Eigen::Index>(s.size())) = dseq;
    }
    if (grad) {
      const Tensor<S> dfeatures = decode_backward(dlogits, cache, *grad);
      encode_backward(dfeatures, cache, *grad);
    }
    return total * inv_b;
  }

  // Incremental decoding with cached keys/values.
  class DecoderState {
   public:
    // Logits for the token following `token`; `cross_attention`, if given,
    // receives the cross-attention over patches averaged over layers and heads.
    ColVector<S> step(Token token, ColVector<S>* cross_attention = nullptr) {
      const auto& c = model_->config_;
      const auto& p = model_->params_;
      if (pos_ >= c.max_target_len) throw std::out_of_range("decoder: sequence exceeds model.max_target_len");
      if (token < 0 || token >= c.vocab_size) throw std::invalid_argument("decoder: token id out of range");
      const Eigen::Index d = c.d_model, dh = d / c.n_heads;
      const S scale = S(1) / std::sqrt(static_cast<S>(dh));
      Tensor<S> x = p.token_embedding.row(token) + p.decoder_pos.row(pos_);
      if (cross_attention) cross_attention->setZero(c.n_patches());
      Tensor<S> concat(1, d);
      for (std::size_t l = 0; l < p.decoder.size(); ++l) {
        const auto& lp = p.decoder[l];
        Tensor<S> h = layer_norm<S>(x, lp.norm1, nullptr);
        const Tensor<S> q = linear(h, lp.self_attn.wq, lp.self_attn.bq);
        self_k_[l].row(pos_) = linear(h, lp.self_attn.wk, lp.self_attn.bk);
        self_v_[l].row(pos_) = linear(h, lp.self_attn.wv, lp.self_attn.bv);
        for (int hd = 0; hd < c.n_heads; ++hd) {
          Eigen::Matrix<S, 1, Eigen::Dynamic> sc =
              q.block(0, hd * dh, 1, dh) * self_k_[l].block(0, hd * dh, pos_ + 1, dh).transpose() * scale;
          softmax_prefix(sc, sc.size());
          concat.block(0, hd * dh, 1, dh).noalias() = sc * self_v_[l].block(0, hd * dh, pos_ + 1, dh);
        }
        x += linear(concat, lp.self_attn.wo, lp.self_attn.bo);

        h = layer_norm<S>(x, lp.norm2, nullptr);
        const Tensor<S> qc = linear(h, lp.cross_attn.wq, lp.cross_attn.bq);
        for (int hd = 0; hd < c.n_heads; ++hd) {
          Eigen::Matrix<S, 1, Eigen::Dynamic> sc =
              qc.block(0, hd * dh, 1, dh) * cross_k_[l].middleCols(hd * dh, dh).transpose() * scale;
          softmax_prefix(sc, sc.size());
          concat.block(0, hd * dh, 1, dh).noalias() = sc * cross_v_[l].middleCols(hd * dh, dh);
          if (cross_attention)
            *cross_attention += sc.transpose() / static_cast<S>(c.n_heads * static_cast<int>(p.decoder.size()));
        }
        x += linear(concat, lp.cross_attn.wo, lp.cross_attn.bo);

        h = layer_norm<S>(x, lp.norm3, nullptr);
        x += feed_forward<S>(h, lp.ffn, nullptr);
      }
      const Tensor<S> h = layer_norm<S>(x, p.decoder_norm, nullptr);
      ++pos_;
      return linear(h, p.output_proj, p.output_bias).row(0).transpose();
    }

    int position() const { return pos_; }

   private:
    friend class Model;
    const Model* model_ = nullptr;
    int pos_ = 0;
    std::vector<Tensor<S>> self_k_, self_v_, cross_k_, cross_v_;
  };

  DecoderState begin_decode(const Tensor<S>& features) const {
    DecoderState st;
    st.model_ = this;
    for (const auto& lp : params_.decoder) {
      st.cross_k_.push_back(linear(features, lp.cross_attn.wk, lp.cross_attn.bk));
      st.cross_v_.push_back(linear(features, lp.cross_attn.wv, lp.cross_attn.bv));
      st.self_k_.push_back(Tensor<S>::Zero(config_.max_target_len, config_.d_model));
      st.self_v_.push_back(Tensor<S>::Zero(config_.max_target_len, config_.d_model));
    }
    return st;
  }

 private:
  struct EncoderLayerCache {
    LayerNormCache<S> norm1, norm2;
    AttentionCache<S> attn;
    FeedForwardCache<S> ffn;
    Tensor<S> mask1, mask2;
  };
  struct DecoderLayerCache {
    LayerNormCache<S> norm1, norm2, norm3;
    AttentionCache<S> self_attn, cross_attn;
    FeedForwardCache<S> ffn;
    Tensor<S> mask1, mask2, mask3;
  };
  struct ForwardCache {
    Eigen::Index batch = 0, seq_len = 0;
    Tensor<S> patches;
    std::vector<EncoderLayerCache> enc;
    LayerNormCache<S> enc_norm;
    std::vector<Token> tokens;
    std::vector<DecoderLayerCache> dec;
    LayerNormCache<S> dec_norm;
    Tensor<S> dec_out;  // normalized decoder output fed to the projection
  };

  void check_tokens(std::span<const Token> tokens) const {
    for (Token tok : tokens)
      if (tok < 0 || tok >= config_.vocab_size)
        throw std::invalid_argument("token id " + std::to_string(tok) + " outside vocabulary of size " +
                                    std::to_string(config_.vocab_size));
  }

  static void apply_mask(Tensor<S>& branch, const Tensor<S>& mask) {
    if (mask.size() != 0) branch.array() *= mask.array();
  }

  Tensor<S> encode(const Tensor<S>& patches, Eigen::Index batch, ForwardCache* cache, Rng* rng) const {
    const Eigen::Index np = config_.n_patches();
    Tensor<S> x = embed_patches(patches, batch);
    const AttentionShape sh{batch, np, np, config_.n_heads, false};
    if (cache) {
      cache->batch = batch;
      cache->patches = patches;
      cache->enc.resize(params_.encoder.size());
    }
    for (std::size_t l = 0; l < params_.encoder.size(); ++l) {
      const auto& lp = params_.encoder[l];
      EncoderLayerCache* lc = cache ? &cache->enc[l] : nullptr;
      Tensor<S> h = layer_norm<S>(x, lp.norm1, lc ? &lc->norm1 : nullptr);
      Tensor<S> a = attention<S>(h, h, lp.self_attn, sh, lc ? &lc->attn : nullptr);
      Tensor<S> m1 = make_branch_mask<S>(batch, np, a.cols(), config_.dropout_rate, config_.stochastic_depth_rate, rng);
      apply_mask(a, m1);
      x += a;
      h = layer_norm<S>(x, lp.norm2, lc ? &lc->norm2 : nullptr);
      Tensor<S> f = feed_forward<S>(h, lp.ffn, lc ? &lc->ffn : nullptr);
      Tensor<S> m2 = make_branch_mask<S>(batch, np, f.cols(), config_.dropout_rate, config_.stochastic_depth_rate, rng);
      apply_mask(f, m2);
      x += f;
      if (lc) {
        lc->mask1 = std::move(m1);
        lc->mask2 = std::move(m2);
      }
    }
    return layer_norm<S>(x, params_.encoder_norm, cache ? &cache->enc_norm : nullptr);
  }

  void encode_backward(const Tensor<S>& dfeatures, const ForwardCache& cache, ModelParams<S>& g) const {
    const Eigen::Index np = config_.n_patches();
    const AttentionShape sh{cache.batch, np, np, config_.n_heads, false};
    Tensor<S> dx = layer_norm_backward<S>(dfeatures, params_.encoder_norm, cache.enc_norm, g.encoder_norm);
    for (std::size_t l = params_.encoder.size(); l-- > 0;) {
      const auto& lp = params_.encoder[l];
      auto& lg = g.encoder[l];
      const auto& lc = cache.enc[l];
      Tensor<S> df = dx;
      apply_mask(df, lc.mask2);
      dx += layer_norm_backward<S>(feed_forward_backward<S>(df, lp.ffn, lc.ffn, lg.ffn), lp.norm2, lc.norm2, lg.norm2);
      Tensor<S> da = dx;
      apply_mask(da, lc.mask1);
      auto ga = attention_backward<S>(da, lp.self_attn, sh, lc.attn, lg.self_attn);
      ga.dxq += ga.dxkv;
      dx += layer_norm_backward<S>(ga.dxq, lp.norm1, lc.norm1, lg.norm1);
    }
    for (Eigen::Index b = 0; b < cache.batch; ++b) g.encoder_pos += dx.middleRows(b * np, np);
    g.patch_proj.noalias() += cache.patches.transpose() * dx;
    g.patch_bias.row(0) += dx.colwise().sum();
  }

  Tensor<S> decode(const Tensor<S>& features, const std::vector<Token>& tokens, Eigen::Index batch, Eigen::Index t,
                   ForwardCache* cache, Rng* rng) const {
    if (t > config_.max_target_len) throw std::invalid_argument("decoder input longer than model.max_target_len");
    const Eigen::Index np = config_.n_patches();
    if (features.rows() != batch * np || features.cols() != config_.d_model)
      throw std::invalid_argument("decoder: feature shape does not match the encoder output");
    Tensor<S> x(batch * t, config_.d_model);
    for (Eigen::Index b = 0; b < batch; ++b)
      for (Eigen::Index j = 0; j < t; ++j)
        x.row(b * t + j) = params_.token_embedding.row(tokens[b * t + j]) + params_.decoder_pos.row(j);
    const AttentionShape self_sh{batch, t, t, config_.n_heads, true};
    const AttentionShape cross_sh{batch, t, np, config_.n_heads, false};
    if (cache) {
      cache->seq_len = t;
      cache->tokens = tokens;
      cache->dec.resize(params_.decoder.size());
    }
    const double dr = config_.dropout_rate, sd = config_.stochastic_depth_rate;
    for (std::size_t l = 0; l < params_.decoder.size(); ++l) {
      const auto& lp = params_.decoder[l];
      DecoderLayerCache* lc = cache ? &cache->dec[l] : nullptr;
      Tensor<S> h = layer_norm<S>(x, lp.norm1, lc ? &lc->norm1 : nullptr);
      Tensor<S> a = attention<S>(h, h, lp.self_attn, self_sh, lc ? &lc->self_attn : nullptr);
      Tensor<S> m1 = make_branch_mask<S>(batch, t, a.cols(), dr, sd, rng);
      apply_mask(a, m1);
      x += a;
      h = layer_norm<S>(x, lp.norm2, lc ? &lc->norm2 : nullptr);
      Tensor<S> ca = attention<S>(h, features, lp.cross_attn, cross_sh, lc ? &lc->cross_attn : nullptr);
      Tensor<S> m2 = make_branch_mask<S>(batch, t, ca.cols(), dr, sd, rng);
      apply_mask(ca, m2);
      x += ca;
      h = layer_norm<S>(x, lp.norm3, lc ? &lc->norm3 : nullptr);
      Tensor<S> f = feed_forward<S>(h, lp.ffn, lc ? &lc->ffn : nullptr);
      Tensor<S> m3 = make_branch_mask<S>(batch, t, f.cols(), dr, sd, rng);
      apply_mask(f, m3);
      x += f;
      if (lc) {
        lc->mask1 = std::move(m1);
        lc->mask2 = std::move(m2);
        lc->mask3 = std::move(m3);
      }
    }
    Tensor<S> h = layer_norm<S>(x, params_.decoder_norm, cache ? &cache->dec_norm : nullptr);
    Tensor<S> logits = linear(h, params_.output_proj, params_.output_bias);
    if (cache) cache->dec_out = std::move(h);
    return logits;
  }

  // Returns the gradient with respect to the encoder features.
  Tensor<S> decode_backward(const Tensor<S>& dlogits, const ForwardCache& cache, ModelParams<S>& g) const {
    const Eigen::Index np = config_.n_patches(), t = cache.seq_len;
    const AttentionShape self_sh{cache.batch, t, t, config_.n_heads, true};
    const AttentionShape cross_sh{cache.batch, t, np, config_.n_heads, false};
    Tensor<S> dh = linear_backward(dlogits, cache.dec_out, params_.output_proj, g.output_proj, g.output_bias);
    Tensor<S> dx = layer_norm_backward<S>(dh, params_.decoder_norm, cache.dec_norm, g.decoder_norm);
    Tensor<S> dfeatures = Tensor<S>::Zero(cache.batch * np, config_.d_model);
    for (std::size_t l = params_.decoder.size(); l-- > 0;) {
      const auto& lp = params_.decoder[l];
      auto& lg = g.decoder[l];
      const auto& lc = cache.dec[l];
      Tensor<S> df = dx;
      apply_mask(df, lc.mask3);
      dx += layer_norm_backward<S>(feed_forward_backward<S>(df, lp.ffn, lc.ffn, lg.ffn), lp.norm3, lc.norm3, lg.norm3);
      Tensor<S> dca = dx;
      apply_mask(dca, lc.mask2);
      auto gc = attention_backward<S>(dca, lp.cross_attn, cross_sh, lc.cross_attn, lg.cross_attn);
      dfeatures += gc.dxkv;
      dx += layer_norm_backward<S>(gc.dxq, lp.norm2, lc.norm2, lg.norm2);
      Tensor<S> da = dx;
      apply_mask(da, lc.mask1);
      auto ga = attention_backward<S>(da, lp.self_attn, self_sh, lc.self_attn, lg.self_attn);
      ga.dxq += ga.dxkv;
      dx += layer_norm_backward<S>(ga.dxq, lp.norm1, lc.norm1, lg.norm1);
    }
    for (Eigen::Index b = 0; b < cache.batch; ++b)
      for (Eigen::Index j = 0; j < t; ++j) {
        g.token_embedding.row(cache.tokens[b * t + j]) += dx.row(b * t + j);
        g.decoder_pos.row(j) += dx.row(b * t + j);
      }
    return dfeatures;
  }

  ModelConfig config_;
  ModelParams<S> params_;
};

}  // namespace pix2seq
