#pragma once

// Network building blocks assembled from the differentiable primitives. Each
// layer registers its tensors in a ParameterStore under `<name>.<part>` and
// holds shared handles, so updates through the store are visible here.
//
// Padding discipline for batched [B, L, H] inputs: padded rows must arrive as
// exact zeros, and every block multiplies by the mask again after any op that
// could make padded rows nonzero (bias terms, normalization). Zero-padded
// convolution then behaves identically to the unbatched forward, so batched
// and unbatched results agree at real positions to rounding error.

#include <cmath>
#include <string>
#include <vector>

#include "resvox/config.hpp"
#include "resvox/ops.hpp"
#include "resvox/params.hpp"

namespace resvox {

struct RunMode {
  bool training = false;
  Rng* rng = nullptr;
};

namespace detail {
inline Rng& unused_rng() {
  static Rng rng(0);
  return rng;
}
}  // namespace detail

inline Tensor apply_dropout(const Tensor& x, double rate, const RunMode& mode) {
  if (!mode.training || rate == 0.0) return x;
  return dropout(x, rate, mode.rng ? *mode.rng : detail::unused_rng());
}

// mask is [B, L] of 0/1; zeroes the padded rows of x [B, L, C].
inline Tensor apply_mask(const Tensor& x, const Tensor& mask) {
  if (!mask.defined()) return x;
  Shape ms = mask.shape();
  ms.push_back(1);
  return mul(x, reshape(mask, ms));
}

inline Tensor lengths_to_mask(const std::vector<long>& lengths, long padded) {
  long B = long(lengths.size());
  Tensor mask({B, padded});
  for (long b = 0; b < B; ++b) {
    require(lengths[size_t(b)] >= 1 && lengths[size_t(b)] <= padded,
            "mask: length ", lengths[size_t(b)], " outside [1, ", padded, "]");
    for (long l = 0; l < lengths[size_t(b)]; ++l) mask.at({b, l}) = 1.0;
  }
  return mask;
}

// Interleaved sinusoidal position table [length, dim]: even columns sine,
// odd columns cosine, so position 0 reads [0, 1, 0, 1, ...].
inline Tensor positional_encoding(long length, long dim) {
  require(length >= 1 && dim >= 1, "positional_encoding: bad extents");
  Tensor pe({length, dim});
  for (long pos = 0; pos < length; ++pos)
    for (long j = 0; j < dim; ++j) {
      double freq = std::pow(10000.0, -double(2 * (j / 2)) / double(dim));
      double angle = double(pos) * freq;
      pe.at({pos, j}) = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return pe;
}

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out], undefined when constructed without one

  Linear(ParameterStore& store, const std::string& name, long in, long out,
         const std::string& group, bool with_bias = true)
      : weight(store.add(name + ".weight", {in, out}, group,
                         Init::fan_in_uniform, in)) {
    if (with_bias) bias = store.add(name + ".bias", {out}, group, Init::zeros);
  }

  Tensor forward(const Tensor& x) const {
    Tensor y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
  }
};

struct LayerNormLayer {
  Tensor gain;
  Tensor bias;

  LayerNormLayer(ParameterStore& store, const std::string& name, long dim,
                 const std::string& group)
      : gain(store.add(name + ".gain", {dim}, group, Init::ones)),
        bias(store.add(name + ".bias", {dim}, group, Init::zeros)) {}

  Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

struct Conv1dLayer {
  Tensor weight;  // [out_channels, in_channels, kernel]
  Tensor bias;    // [out_channels]

  Conv1dLayer(ParameterStore& store, const std::string& name, long in,
              long out, long kernel, const std::string& group)
      : weight(store.add(name + ".weight", {out, in, kernel}, group,
                         Init::fan_in_uniform, in * kernel)),
        bias(store.add(name + ".bias", {out}, group, Init::zeros)) {}

  Tensor forward(const Tensor& x) const {
    return conv1d_same(x, weight, bias);
  }
};

struct Conv2dLayer {
  Tensor weight;  // [out_channels, in_channels, kh, kw]
  Tensor bias;    // [out_channels]
  long stride_h = 1;
  long stride_w = 1;

  Conv2dLayer(ParameterStore& store, const std::string& name, long in,
              long out, long kernel, long stride, const std::string& group)
      : weight(store.add(name + ".weight", {out, in, kernel, kernel}, group,
                         Init::fan_in_uniform, in * kernel * kernel)),
        bias(store.add(name + ".bias", {out}, group, Init::zeros)),
        stride_h(stride),
        stride_w(stride) {}

  Tensor forward(const Tensor& x) const {
    return conv2d_same(x, weight, bias, stride_h, stride_w);
  }
};

struct BatchNorm2dLayer {
  Tensor gain;
  Tensor bias;
  Tensor running_mean;  // buffer, checkpointed but not trained
  Tensor running_var;

  BatchNorm2dLayer(ParameterStore& store, const std::string& name,
                   long channels, const std::string& group)
      : gain(store.add(name + ".gain", {channels}, group, Init::ones)),
        bias(store.add(name + ".bias", {channels}, group, Init::zeros)),
        running_mean(store.buffer(name + ".running_mean", {channels}, 0.0)),
        running_var(store.buffer(name + ".running_var", {channels}, 1.0)) {}

  Tensor forward(const Tensor& x, bool training) const {
    return batch_norm2d(x, gain, bias, running_mean, running_var, training);
  }
};

// Single-sequence gated recurrent unit; returns the final hidden state.
struct GruLayer {
  Tensor w_z, w_r, w_h;  // [in, hidden]
  Tensor u_z, u_r, u_h;  // [hidden, hidden]
  Tensor b_z, b_r, b_h;  // [hidden]
  long hidden = 0;

  GruLayer(ParameterStore& store, const std::string& name, long in, long out,
           const std::string& group)
      : w_z(store.add(name + ".w_z", {in, out}, group, Init::fan_in_uniform,
                      in)),
        w_r(store.add(name + ".w_r", {in, out}, group, Init::fan_in_uniform,
                      in)),
        w_h(store.add(name + ".w_h", {in, out}, group, Init::fan_in_uniform,
                      in)),
        u_z(store.add(name + ".u_z", {out, out}, group, Init::fan_in_uniform,
                      out)),
        u_r(store.add(name + ".u_r", {out, out}, group, Init::fan_in_uniform,
                      out)),
        u_h(store.add(name + ".u_h", {out, out}, group, Init::fan_in_uniform,
                      out)),
        b_z(store.add(name + ".b_z", {out}, group, Init::zeros)),
        b_r(store.add(name + ".b_r", {out}, group, Init::zeros)),
        b_h(store.add(name + ".b_h", {out}, group, Init::zeros)),
        hidden(out) {}

  // x is [T, in]; the result is the last hidden state, [1, hidden].
  Tensor final_hidden(const Tensor& x) const {
    require(x.rank() == 2, "gru: input must be [T, in]");
    long T = x.extent(0);
    require(T >= 1, "gru: empty sequence");
    Tensor h({1, hidden});
    for (long t = 0; t < T; ++t) {
      Tensor xt = slice(x, 0, t, 1);
      Tensor z = sigmoid(add(add(matmul(xt, w_z), matmul(h, u_z)), b_z));
      Tensor r = sigmoid(add(add(matmul(xt, w_r), matmul(h, u_r)), b_r));
      Tensor cand =
          tanh_act(add(add(matmul(xt, w_h), matmul(mul(r, h), u_h)), b_h));
      Tensor keep = add_const(scale(z, -1.0), 1.0);
      h = add(mul(keep, h), mul(z, cand));
    }
    return h;
  }
};

struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  long heads = 1;
  long att_hidden = 0;

  MultiHeadAttention(ParameterStore& store, const std::string& name,
                     long query_dim, long key_dim, long hidden, long n_heads,
                     long out_dim, const std::string& group)
      : wq(store, name + ".q", query_dim, hidden, group),
        wk(store, name + ".k", key_dim, hidden, group),
        wv(store, name + ".v", key_dim, hidden, group),
        wo(store, name + ".o", hidden, out_dim, group),
        heads(n_heads),
        att_hidden(hidden) {
    require(hidden % n_heads == 0, "attention: hidden ", hidden,
            " not divisible by ", n_heads, " heads");
  }

  // query [B, Lq, Dq], keys [B, Lk, Dk]; key_mask [B, Lk] (0 = padding).
  // When attn_out is given it receives the softmax weights [B,heads,Lq,Lk].
  Tensor forward(const Tensor& query, const Tensor& keys,
                 const Tensor& key_mask = Tensor(),
                 Tensor* attn_out = nullptr) const {
    long B = query.extent(0), Lq = query.extent(1), Lk = keys.extent(1);
    long dh = att_hidden / heads;
    Tensor q = split_heads(wq.forward(query), B, Lq, dh);
    Tensor k = split_heads(wk.forward(keys), B, Lk, dh);
    Tensor v = split_heads(wv.forward(keys), B, Lk, dh);
    Tensor scores =
        scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(double(dh)));
    Tensor mask4;
    if (key_mask.defined()) mask4 = reshape(key_mask, {B, 1, 1, Lk});
    Tensor attn = softmax_lastdim(scores, mask4);
    if (attn_out) *attn_out = attn;
    Tensor ctx = matmul(attn, v);  // [B, heads, Lq, dh]
    ctx = reshape(permute(ctx, {0, 2, 1, 3}), {B, Lq, att_hidden});
    return wo.forward(ctx);
  }

 private:
  Tensor split_heads(const Tensor& x, long B, long L, long dh) const {
    return permute(reshape(x, {B, L, heads, dh}), {0, 2, 1, 3});
  }
};

// Transformer block: self-attention sublayer, then a two-layer convolution
// sublayer, each with residual connection and layer normalization.
struct FftBlock {
  MultiHeadAttention attn;
  LayerNormLayer ln_attn;
  Conv1dLayer conv_a;  // hidden -> filters
  Conv1dLayer conv_b;  // filters -> hidden
  LayerNormLayer ln_conv;
  double dropout_rate = 0.0;

  FftBlock(ParameterStore& store, const std::string& name, long hidden,
           long filters, long kernel, long heads, double drop,
           const std::string& group)
      : attn(store, name + ".attn", hidden, hidden, hidden, heads, hidden,
             group),
        ln_attn(store, name + ".ln_attn", hidden, group),
        conv_a(store, name + ".conv_a", hidden, filters, kernel, group),
        conv_b(store, name + ".conv_b", filters, hidden, kernel, group),
        ln_conv(store, name + ".ln_conv", hidden, group),
        dropout_rate(drop) {}

  Tensor forward(const Tensor& x, const Tensor& mask,
                 const RunMode& mode) const {
    Tensor a = attn.forward(x, x, mask);
    a = apply_dropout(a, dropout_rate, mode);
    Tensor y = apply_mask(ln_attn.forward(add(x, a)), mask);
    Tensor c = apply_mask(relu(conv_a.forward(y)), mask);
    c = conv_b.forward(c);
    c = apply_dropout(c, dropout_rate, mode);
    return apply_mask(ln_conv.forward(add(y, c)), mask);
  }
};

// Two convolution blocks with ReLU, layer norm, and dropout, then a linear
// head to one value per position: predicts duration, pitch, or energy.
struct VariancePredictor {
  Conv1dLayer conv_a;
  LayerNormLayer ln_a;
  Conv1dLayer conv_b;
  LayerNormLayer ln_b;
  Linear head;
  double dropout_rate = 0.0;

  VariancePredictor(ParameterStore& store, const std::string& name,
                    long hidden, long filters, long kernel, double drop,
                    const std::string& group)
      : conv_a(store, name + ".conv_a", hidden, filters, kernel, group),
        ln_a(store, name + ".ln_a", filters, group),
        conv_b(store, name + ".conv_b", filters, filters, kernel, group),
        ln_b(store, name + ".ln_b", filters, group),
        head(store, name + ".head", filters, 1, group),
        dropout_rate(drop) {}

  // x [B, L, hidden] -> predictions [B, L]
  Tensor forward(const Tensor& x, const Tensor& mask,
                 const RunMode& mode) const {
    Tensor y = apply_mask(ln_a.forward(relu(conv_a.forward(x))), mask);
    y = apply_dropout(y, dropout_rate, mode);
    Tensor z = apply_mask(ln_b.forward(relu(conv_b.forward(y))), mask);
    z = apply_dropout(z, dropout_rate, mode);
    Tensor p = head.forward(z);  // [B, L, 1]
    Shape flat = {p.extent(0), p.extent(1)};
    Tensor out = reshape(p, flat);
    return mask.defined() ? mul(out, mask) : out;
  }
};

// Two convolution blocks and a linear head to a vector per position; same
// body as VariancePredictor but with a configurable output width. Predicts
// the prosody residual from the running embedding alone.
struct SequenceRegressor {
  Conv1dLayer conv_a;
  LayerNormLayer ln_a;
  Conv1dLayer conv_b;
  LayerNormLayer ln_b;
  Linear head;
  double dropout_rate = 0.0;

  SequenceRegressor(ParameterStore& store, const std::string& name,
                    long hidden, long filters, long kernel, long out_dim,
                    double drop, const std::string& group)
      : conv_a(store, name + ".conv_a", hidden, filters, kernel, group),
        ln_a(store, name + ".ln_a", filters, group),
        conv_b(store, name + ".conv_b", filters, filters, kernel, group),
        ln_b(store, name + ".ln_b", filters, group),
        head(store, name + ".head", filters, out_dim, group),
        dropout_rate(drop) {}

  // x [B, L, hidden] -> [B, L, out_dim]
  Tensor forward(const Tensor& x, const Tensor& mask,
                 const RunMode& mode) const {
    Tensor y = apply_mask(ln_a.forward(relu(conv_a.forward(x))), mask);
    y = apply_dropout(y, dropout_rate, mode);
    Tensor z = apply_mask(ln_b.forward(relu(conv_b.forward(y))), mask);
    z = apply_dropout(z, dropout_rate, mode);
    return apply_mask(head.forward(z), mask);
  }
};

// Conditioning-to-residual network: lifts the conditioning signal to the
// embedding width, concatenates it with the running embedding channel-wise,
// and maps through two convolution blocks to a residual vector per position.
// No activation on the output so residuals can take either sign.
struct ResidualNet {
  Linear lift;
  Conv1dLayer conv_a;
  LayerNormLayer ln_a;
  Conv1dLayer conv_b;
  LayerNormLayer ln_b;
  Linear head;
  double dropout_rate = 0.0;

  ResidualNet(ParameterStore& store, const std::string& name, long cond_dim,
              long hidden, long filters, long kernel, double drop,
              const std::string& group)
      : lift(store, name + ".lift", cond_dim, hidden, group),
        conv_a(store, name + ".conv_a", 2 * hidden, filters, kernel, group),
        ln_a(store, name + ".ln_a", filters, group),
        conv_b(store, name + ".conv_b", filters, filters, kernel, group),
        ln_b(store, name + ".ln_b", filters, group),
        head(store, name + ".head", filters, hidden, group),
        dropout_rate(drop) {}

  // cond [B, L, cond_dim], emb [B, L, hidden] -> residual [B, L, hidden]
  Tensor forward(const Tensor& cond, const Tensor& emb, const Tensor& mask,
                 const RunMode& mode) const {
    // the lift bias would make padded rows nonzero, so mask right after it
    Tensor lifted = apply_mask(lift.forward(cond), mask);
    Tensor x = concat({lifted, emb}, 2);
    Tensor y = apply_mask(ln_a.forward(relu(conv_a.forward(x))), mask);
    y = apply_dropout(y, dropout_rate, mode);
    Tensor z = apply_mask(ln_b.forward(relu(conv_b.forward(y))), mask);
    z = apply_dropout(z, dropout_rate, mode);
    return apply_mask(head.forward(z), mask);
  }
};

struct EmbeddingLayer {
  Tensor table;  // [rows, dim]

  EmbeddingLayer(ParameterStore& store, const std::string& name, long rows,
                 long dim, const std::string& group, Init init)
      : table(store.add(name + ".table", {rows, dim}, group, init, dim)) {}

  Tensor forward(const std::vector<long>& ids, Shape lead_shape) const {
    return embedding_lookup(table, ids, lead_shape);
  }
};

}  // namespace resvox
