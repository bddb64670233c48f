#pragma once

// The sequence backbone: phoneme encoder, mel decoder, and the style encoder
// (reference encoder plus style token layer). The encoder and decoder work on
// padded batches with masks; the style encoder processes one utterance at a
// time because its batch normalization statistics must come from a single
// spectrogram.

#include <string>
#include <vector>

#include "resvox/config.hpp"
#include "resvox/layers.hpp"

namespace resvox {

struct EncodedPhonemes {
  Tensor embedding;  // [B, Lmax, H], padded rows exactly zero
  Tensor mask;       // [B, Lmax] of 0/1
  std::vector<long> lengths;
};

class PhonemeEncoder {
 public:
  PhonemeEncoder(ParameterStore& store, const ModelConfig& cfg)
      : table_(store, "phoneme_encoder.embedding", cfg.phoneme_inventory,
               cfg.embedding_dim, "backbone", Init::fan_in_uniform),
        hidden_(cfg.hidden) {
    blocks_.reserve(size_t(cfg.encoder_layers));
    for (long i = 0; i < cfg.encoder_layers; ++i)
      blocks_.emplace_back(store,
                           "phoneme_encoder.block" + std::to_string(i),
                           cfg.hidden, cfg.conv_filters, cfg.conv_kernel,
                           cfg.attention_heads, cfg.dropout, "backbone");
  }

  EncodedPhonemes forward(const std::vector<std::vector<long>>& sequences,
                          const RunMode& mode) const {
    require(!sequences.empty(), "phoneme encoder: empty batch");
    long B = long(sequences.size());
    long Lmax = 0;
    std::vector<long> lengths;
    for (const auto& seq : sequences) {
      require(!seq.empty(), "phoneme encoder: empty phoneme sequence");
      lengths.push_back(long(seq.size()));
      Lmax = std::max(Lmax, long(seq.size()));
    }
    std::vector<long> flat(size_t(B * Lmax), 0);
    for (long b = 0; b < B; ++b)
      for (size_t l = 0; l < sequences[size_t(b)].size(); ++l)
        flat[size_t(b * Lmax) + l] = sequences[size_t(b)][l];

    EncodedPhonemes out;
    out.lengths = lengths;
    out.mask = lengths_to_mask(lengths, Lmax);
    Tensor x = table_.forward(flat, {B, Lmax});
    x = add(x, positional_encoding(Lmax, hidden_));
    x = apply_mask(x, out.mask);
    for (const FftBlock& block : blocks_)
      x = block.forward(x, out.mask, mode);
    out.embedding = x;
    return out;
  }

 private:
  EmbeddingLayer table_;
  std::vector<FftBlock> blocks_;
  long hidden_;
};

class MelDecoder {
 public:
  MelDecoder(ParameterStore& store, const ModelConfig& cfg)
      : head_(store, "decoder.head", cfg.hidden, cfg.mel_dim, "backbone"),
        hidden_(cfg.hidden) {
    blocks_.reserve(size_t(cfg.decoder_layers));
    for (long i = 0; i < cfg.decoder_layers; ++i)
      blocks_.emplace_back(store, "decoder.block" + std::to_string(i),
                           cfg.hidden, cfg.conv_filters, cfg.conv_kernel,
                           cfg.attention_heads, cfg.dropout, "backbone");
  }

  // expanded [B, T, H] with padded frames zero, frame_mask [B, T].
  Tensor forward(const Tensor& expanded, const Tensor& frame_mask,
                 const RunMode& mode) const {
    require(expanded.rank() == 3, "decoder: input must be [B, T, H]");
    long T = expanded.extent(1);
    Tensor x = add(expanded, positional_encoding(T, hidden_));
    x = apply_mask(x, frame_mask);
    for (const FftBlock& block : blocks_)
      x = block.forward(x, frame_mask, mode);
    return apply_mask(head_.forward(x), frame_mask);
  }

 private:
  std::vector<FftBlock> blocks_;
  Linear head_;
  long hidden_;
};

// Stack of strided Conv2D-BatchNorm-ReLU blocks over the spectrogram viewed
// as a one-channel image, then a GRU over what remains of the time axis. The
// final hidden state is the reference embedding.
class ReferenceEncoder {
 public:
  ReferenceEncoder(ParameterStore& store, const ModelConfig& cfg)
      : gru_(store, "reference_encoder.gru",
             cfg.ref_conv_filters.back() *
                 reduced_extent(cfg.mel_dim, long(cfg.ref_conv_filters.size()),
                                cfg.ref_conv_stride),
             cfg.gru_hidden, "style_encoder"),
        stride_(cfg.ref_conv_stride),
        mel_dim_(cfg.mel_dim) {
    long in = 1;
    for (size_t i = 0; i < cfg.ref_conv_filters.size(); ++i) {
      long out = cfg.ref_conv_filters[i];
      std::string name = "reference_encoder.conv" + std::to_string(i);
      convs_.emplace_back(store, name, in, out, cfg.ref_conv_kernel,
                          cfg.ref_conv_stride, "style_encoder");
      bns_.emplace_back(store, name + ".bn", out, "style_encoder");
      in = out;
    }
  }

  // mel [T, M] for a single utterance; result [1, gru_hidden].
  Tensor forward(const Tensor& mel, bool training) const {
    require(mel.rank() == 2, "reference encoder: mel must be [T, M]");
    require(mel.extent(1) == mel_dim_, "reference encoder: expected ",
            mel_dim_, " mel channels, got ", mel.extent(1));
    long T = mel.extent(0);
    Tensor x = reshape(mel, {1, 1, T, mel_dim_});
    for (size_t i = 0; i < convs_.size(); ++i) {
      x = convs_[i].forward(x);
      x = bns_[i].forward(x, training);
      x = relu(x);
    }
    // [1, C, T', M'] -> GRU over T' rows of C*M' features
    long C = x.extent(1), Tr = x.extent(2), Mr = x.extent(3);
    Tensor seq = reshape(permute(x, {0, 2, 1, 3}), {Tr, C * Mr});
    return gru_.final_hidden(seq);
  }

  // Time extent after each strided stage, by ceiling division.
  std::vector<long> time_extents(long T) const {
    std::vector<long> out;
    for (size_t i = 0; i < convs_.size(); ++i) {
      T = (T + stride_ - 1) / stride_;
      out.push_back(T);
    }
    return out;
  }

  static long reduced_extent(long extent, long stages, long stride) {
    for (long i = 0; i < stages; ++i) extent = (extent + stride - 1) / stride;
    return extent;
  }

 private:
  std::vector<Conv2dLayer> convs_;
  std::vector<BatchNorm2dLayer> bns_;
  GruLayer gru_;
  long stride_;
  long mel_dim_;
};

// Multi-head attention with the reference embedding as the query and a
// learned token bank as keys and values, projected to the embedding width.
class StyleTokenLayer {
 public:
  StyleTokenLayer(ParameterStore& store, const ModelConfig& cfg)
      : tokens_(store.add("style_tokens.bank",
                          {cfg.style_tokens, cfg.style_token_dim},
                          "style_encoder", Init::fan_in_uniform,
                          cfg.style_token_dim)),
        attn_(store, "style_tokens.attn", cfg.gru_hidden, cfg.style_token_dim,
              cfg.style_attention_hidden, cfg.style_heads, cfg.hidden,
              "style_encoder"),
        n_tokens_(cfg.style_tokens),
        token_dim_(cfg.style_token_dim) {}

  // ref [1, gru_hidden] -> style embedding [1, H]
  Tensor forward(const Tensor& ref, Tensor* attn_out = nullptr) const {
    Tensor query = reshape(ref, {1, 1, ref.extent(1)});
    Tensor keys = reshape(tokens_, {1, n_tokens_, token_dim_});
    Tensor attn4;
    Tensor s = attn_.forward(query, keys, Tensor(), &attn4);
    if (attn_out) *attn_out = attn4;  // [1, heads, 1, tokens]
    return reshape(s, {1, s.extent(2)});
  }

 private:
  Tensor tokens_;
  MultiHeadAttention attn_;
  long n_tokens_;
  long token_dim_;
};

// Full style path: mel spectrogram in, style embedding S(x) out.
class StyleEncoder {
 public:
  StyleEncoder(ParameterStore& store, const ModelConfig& cfg)
      : reference_(store, cfg), tokens_(store, cfg) {}

  Tensor forward(const Tensor& mel, bool training,
                 Tensor* attn_out = nullptr) const {
    return tokens_.forward(reference_.forward(mel, training), attn_out);
  }

  const ReferenceEncoder& reference() const { return reference_; }
  const StyleTokenLayer& token_layer() const { return tokens_; }

 private:
  ReferenceEncoder reference_;
  StyleTokenLayer tokens_;
};

}  // namespace resvox
