#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "joformer/ops.hpp"
#include "joformer/rotations.hpp"
#include "joformer/tensor.hpp"

namespace joformer {

enum class Variant { roformer, joformer_fixed, joformer_per_token };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::roformer: return "roformer";
    case Variant::joformer_fixed: return "joformer-fixed";
    case Variant::joformer_per_token: return "joformer-per-token";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& name) {
  if (name == "roformer") return Variant::roformer;
  if (name == "joformer-fixed") return Variant::joformer_fixed;
  if (name == "joformer-per-token") return Variant::joformer_per_token;
  throw ConfigError("unknown variant '" + name +
                    "' (valid: roformer, joformer-fixed, joformer-per-token)");
}

struct ModelConfig {
  Variant variant{Variant::roformer};
  int64_t n_layers{1};
  int64_t d_model{90};
  int64_t ffn_mult{4};
  int64_t context_len{20};
  int64_t vocab_size{65};
  double rope_base{10000.0};
  double layer_norm_eps{1e-5};
  bool angle_init_rope{false};  // start the angle table at the fixed schedule

  void validate() const {
    if (n_layers < 1) throw ConfigError("n_layers must be >= 1, got " + std::to_string(n_layers));
    if (d_model < 2 || d_model % 2 != 0) {
      throw ConfigError("d_model must be even and positive, got " + std::to_string(d_model));
    }
    if (ffn_mult < 1) throw ConfigError("ffn_mult must be >= 1");
    if (context_len < 1) throw ConfigError("context_len must be >= 1");
    if (vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
    if (rope_base <= 1.0) throw ConfigError("rope_base must be > 1");
    if (layer_norm_eps <= 0.0) throw ConfigError("layer_norm_eps must be positive");
  }
};

template <typename S>
struct LayerParams {
  Tensor<S> w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  Tensor<S> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  Tensor<S> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

/// All learnable weights of the model. Parameter enumeration order is fixed:
/// token_embedding; for each layer in order: w_q, b_q, w_k, b_k, w_v, b_v,
/// w_o, b_o, ln1_gain, ln1_bias, ln2_gain, ln2_bias, ffn_w1, ffn_b1, ffn_w2,
/// ffn_b2; final_ln_gain, final_ln_bias; out_w, out_b; angle_table (per-token
/// variant only). This order drives initialization draws, optimizer state,
/// checkpoints, and finite-difference sweeps. The angle table comes last so
/// the shared backbone receives identical draws across variants for a fixed
/// seed.
template <typename S>
struct Parameters {
  Tensor<S> token_embedding;
  std::vector<LayerParams<S>> layers;
  Tensor<S> final_ln_gain, final_ln_bias;
  Tensor<S> out_w, out_b;
  Tensor<S> angle_table;  // defined only for the per-token variant

  Parameters() = default;

  explicit Parameters(const ModelConfig& cfg) {
    cfg.validate();
    const int64_t d = cfg.d_model, v = cfg.vocab_size, f = cfg.ffn_mult * d;
    token_embedding = Tensor<S>({v, d}, true);
    layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& lp : layers) {
      lp.w_q = Tensor<S>({d, d}, true);
      lp.b_q = Tensor<S>({d}, true);
      lp.w_k = Tensor<S>({d, d}, true);
      lp.b_k = Tensor<S>({d}, true);
      lp.w_v = Tensor<S>({d, d}, true);
      lp.b_v = Tensor<S>({d}, true);
      lp.w_o = Tensor<S>({d, d}, true);
      lp.b_o = Tensor<S>({d}, true);
      lp.ln1_gain = Tensor<S>({d}, true);
      lp.ln1_bias = Tensor<S>({d}, true);
      lp.ln2_gain = Tensor<S>({d}, true);
      lp.ln2_bias = Tensor<S>({d}, true);
      lp.ffn_w1 = Tensor<S>({d, f}, true);
      lp.ffn_b1 = Tensor<S>({f}, true);
      lp.ffn_w2 = Tensor<S>({f, d}, true);
      lp.ffn_b2 = Tensor<S>({d}, true);
    }
    final_ln_gain = Tensor<S>({d}, true);
    final_ln_bias = Tensor<S>({d}, true);
    out_w = Tensor<S>({d, v}, true);
    out_b = Tensor<S>({v}, true);
    if (cfg.variant == Variant::joformer_per_token) {
      angle_table = Tensor<S>({v, d / 2}, true);
    }
  }

  /// Gaussian(0, 0.02) weights and embedding, zero biases, unit layer-norm
  /// gains; the angle table draws Uniform(-0.02, 0.02) unless the config
  /// requests the fixed rotary schedule per row.
  static Parameters init(const ModelConfig& cfg, uint64_t seed) {
    Parameters p(cfg);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 0.02);
    auto fill_gauss = [&](Tensor<S>& t) {
      for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<S>(gauss(rng));
    };
    auto fill_const = [](Tensor<S>& t, double v) {
      for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<S>(v);
    };
    fill_gauss(p.token_embedding);
    for (auto& lp : p.layers) {
      fill_gauss(lp.w_q);
      fill_const(lp.b_q, 0.0);
      fill_gauss(lp.w_k);
      fill_const(lp.b_k, 0.0);
      fill_gauss(lp.w_v);
      fill_const(lp.b_v, 0.0);
      fill_gauss(lp.w_o);
      fill_const(lp.b_o, 0.0);
      fill_const(lp.ln1_gain, 1.0);
      fill_const(lp.ln1_bias, 0.0);
      fill_const(lp.ln2_gain, 1.0);
      fill_const(lp.ln2_bias, 0.0);
      fill_gauss(lp.ffn_w1);
      fill_const(lp.ffn_b1, 0.0);
      fill_gauss(lp.ffn_w2);
      fill_const(lp.ffn_b2, 0.0);
    }
    fill_const(p.final_ln_gain, 1.0);
    fill_const(p.final_ln_bias, 0.0);
    fill_gauss(p.out_w);
    fill_const(p.out_b, 0.0);
    if (cfg.variant == Variant::joformer_per_token) {
      if (cfg.angle_init_rope) {
        const AngleVector<S> omega = rope_frequencies<S>(cfg.d_model, cfg.rope_base);
        for (int64_t r = 0; r < cfg.vocab_size; ++r) {
          for (int64_t j = 0; j < cfg.d_model / 2; ++j) {
            p.angle_table.at({r, j}) = omega[static_cast<size_t>(j)];
          }
        }
      } else {
        std::uniform_real_distribution<double> uni(-0.02, 0.02);
        for (int64_t i = 0; i < p.angle_table.numel(); ++i) {
          p.angle_table.data()[i] = static_cast<S>(uni(rng));
        }
      }
    }
    return p;
  }

  template <typename Fn>
  void for_each(Fn&& fn) {
    fn("token_embedding", token_embedding);
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string prefix = "layer" + std::to_string(l) + ".";
      auto& lp = layers[l];
      fn(prefix + "w_q", lp.w_q);
      fn(prefix + "b_q", lp.b_q);
      fn(prefix + "w_k", lp.w_k);
      fn(prefix + "b_k", lp.b_k);
      fn(prefix + "w_v", lp.w_v);
      fn(prefix + "b_v", lp.b_v);
      fn(prefix + "w_o", lp.w_o);
      fn(prefix + "b_o", lp.b_o);
      fn(prefix + "ln1_gain", lp.ln1_gain);
      fn(prefix + "ln1_bias", lp.ln1_bias);
      fn(prefix + "ln2_gain", lp.ln2_gain);
      fn(prefix + "ln2_bias", lp.ln2_bias);
      fn(prefix + "ffn_w1", lp.ffn_w1);
      fn(prefix + "ffn_b1", lp.ffn_b1);
      fn(prefix + "ffn_w2", lp.ffn_w2);
      fn(prefix + "ffn_b2", lp.ffn_b2);
    }
    fn("final_ln_gain", final_ln_gain);
    fn("final_ln_bias", final_ln_bias);
    fn("out_w", out_w);
    fn("out_b", out_b);
    if (angle_table.defined()) fn("angle_table", angle_table);
  }

  std::vector<std::pair<std::string, Tensor<S>*>> named_tensors() {
    std::vector<std::pair<std::string, Tensor<S>*>> out;
    for_each([&](const std::string& name, Tensor<S>& t) { out.emplace_back(name, &t); });
    return out;
  }

  std::vector<Tensor<S>*> tensors() {
    std::vector<Tensor<S>*> out;
    for_each([&](const std::string&, Tensor<S>& t) { out.push_back(&t); });
    return out;
  }

  int64_t total_params() {
    int64_t n = 0;
    for_each([&](const std::string&, Tensor<S>& t) { n += t.numel(); });
    return n;
  }

  void zero_grads() {
    for_each([](const std::string&, Tensor<S>& t) { t.zero_grad(); });
  }
};

template <typename S>
struct AttentionTrace {
  Tensor<S> scores;   // masked pre-softmax scores [B,T,T]
  Tensor<S> weights;  // softmax weights [B,T,T]
};

/// Causal single-head attention with journey rotations. Queries and keys are
/// pre-rotated by -phi so the score at (p, q) equals Q_p dotted with the key
/// carried from q to p; with rotate_values the values take the same journey:
/// out_p = Rot(+phi_p) sum_q alpha_{p,q} Rot(-phi_q) V_q.
template <typename S>
Tensor<S> journey_attention(Tape<S>* tape, const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                            const Tensor<S>& phi, bool rotate_values, AttentionTrace<S>* trace = nullptr) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("journey_attention expects equal [B,T,d] q/k/v, got " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  const int64_t d = q.dim(2);
  if (d % 2 != 0) throw ConfigError("journey_attention requires even d, got " + std::to_string(d));

  Tensor<S> qr = apply_rotation(tape, q, phi, -1);
  Tensor<S> kr = apply_rotation(tape, k, phi, -1);
  Tensor<S> scores = scale(tape, matmul(tape, qr, transpose_last2(tape, kr)),
                           1.0 / std::sqrt(static_cast<double>(d)));
  Tensor<S> masked = causal_mask(tape, scores);
  Tensor<S> alpha = softmax_lastdim(tape, masked);
  if (trace != nullptr) {
    trace->scores = masked;
    trace->weights = alpha;
  }
  if (rotate_values) {
    Tensor<S> vr = apply_rotation(tape, v, phi, -1);
    Tensor<S> ctx = matmul(tape, alpha, vr);
    return apply_rotation(tape, ctx, phi, +1);
  }
  return matmul(tape, alpha, v);
}

/// One pre-norm transformer block: x += Attn(LN(x)); x += FFN(LN(x)).
template <typename S>
Tensor<S> block_forward(Tape<S>* tape, const Tensor<S>& x, LayerParams<S>& lp, const Tensor<S>& phi,
                        bool rotate_values, double ln_eps) {
  Tensor<S> xn = layer_norm(tape, x, lp.ln1_gain, lp.ln1_bias, ln_eps);
  Tensor<S> q = add(tape, matmul(tape, xn, lp.w_q), lp.b_q);
  Tensor<S> k = add(tape, matmul(tape, xn, lp.w_k), lp.b_k);
  Tensor<S> v = add(tape, matmul(tape, xn, lp.w_v), lp.b_v);
  Tensor<S> att = journey_attention(tape, q, k, v, phi, rotate_values);
  Tensor<S> att_out = add(tape, matmul(tape, att, lp.w_o), lp.b_o);
  Tensor<S> x1 = add(tape, x, att_out);

  Tensor<S> xn2 = layer_norm(tape, x1, lp.ln2_gain, lp.ln2_bias, ln_eps);
  Tensor<S> h = gelu(tape, add(tape, matmul(tape, xn2, lp.ffn_w1), lp.ffn_b1));
  Tensor<S> ffn_out = add(tape, matmul(tape, h, lp.ffn_w2), lp.ffn_b2);
  return add(tape, x1, ffn_out);
}

/// Cumulative rotation angles for a batch, per the configured variant.
template <typename S>
Tensor<S> cumulative_angles_for(Tape<S>* tape, Parameters<S>& params, const ModelConfig& cfg,
                                const IdTensor& token_ids) {
  const int64_t b = token_ids.dim(0), t = token_ids.dim(1);
  if (cfg.variant == Variant::joformer_per_token) {
    return cumulative_angles_per_token(tape, token_ids, params.angle_table);
  }
  return cumulative_angles_fixed<S>(b, t, rope_frequencies<S>(cfg.d_model, cfg.rope_base));
}

/// Full forward pass: embedding, shared cumulative angles, N blocks, final
/// layer norm, output projection. Returns [B,T,V] logits.
template <typename S>
Tensor<S> model_forward(Tape<S>* tape, Parameters<S>& params, const ModelConfig& cfg,
                        const IdTensor& token_ids) {
  if (token_ids.shape.size() != 2) {
    throw ShapeError("model_forward expects [B,T] token ids, got " + shape_str(token_ids.shape));
  }
  const int64_t t = token_ids.dim(1);
  if (t > cfg.context_len) {
    throw ContractError("sequence length " + std::to_string(t) + " exceeds context_len " +
                        std::to_string(cfg.context_len));
  }
  Tensor<S> x = gather_rows(tape, params.token_embedding, token_ids);
  Tensor<S> phi = cumulative_angles_for(tape, params, cfg, token_ids);
  const bool rotate_values = cfg.variant != Variant::roformer;
  for (auto& lp : params.layers) {
    x = block_forward(tape, x, lp, phi, rotate_values, cfg.layer_norm_eps);
  }
  x = layer_norm(tape, x, params.final_ln_gain, params.final_ln_bias, cfg.layer_norm_eps);
  return add(tape, matmul(tape, x, params.out_w), params.out_b);
}

template <typename S>
Tensor<S> loss_fn(Tape<S>* tape, const Tensor<S>& logits, const IdTensor& targets) {
  return cross_entropy_logits(tape, logits, targets);
}

}  // namespace joformer
