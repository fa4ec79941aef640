#pragma once

#include <random>
#include <string>
#include <vector>

#include "codac/params.hpp"
#include "codac/tensor.hpp"

namespace codac {

struct ConvLayerSpec {
  int kernel = 3;
  int dilation = 1;
  int channels = 32;
};

struct EncoderConfig {
  int d_in = 2;
  int d_hidden = 32;
  std::vector<ConvLayerSpec> conv_layers;  // defaults to K=3, dilations 1,2,4
  int n_attn_blocks = 2;
  int n_heads = 4;
  int d_ff = 64;
  double dropout_rate = 0.1;

  static EncoderConfig defaults(int d_in_);
  // Throws std::invalid_argument on any violated structural constraint
  // (head divisibility, odd kernels, strictly increasing dilations, ...).
  void validate() const;

  // 1 + (K-1) * sum of dilations: support of an impulse response through
  // the whole conv stack.
  int receptive_field() const;
};

// Sinusoidal table: PE[t, 2i] = sin(t / 10000^(2i/d)), PE[t, 2i+1] = cos(...).
// d must be even.
Tensor positional_encoding(int t_len, int d);

// Registers all encoder parameters under `prefix` (e.g. "enc.") with
// Xavier-uniform weights and zero biases.
void init_encoder_params(ParamStore& store, const EncoderConfig& cfg,
                         const std::string& prefix, std::mt19937_64& rng);

// Dilated conv stack only (relu after each layer), before positional
// encoding and attention. Exposed so the receptive field is testable.
Tensor conv_stack(const ParamStore& store, const EncoderConfig& cfg,
                  const std::string& prefix, const Tensor& x);

// One pre-layer-norm Transformer block: LN -> multi-head attention ->
// residual, LN -> relu feed-forward -> residual. Shared by the encoder
// and the autoencoder-based scorer. When attn_maps is non-null the
// per-head attention weight matrices [T x T] are appended to it.
Tensor attention_block(const ParamStore& store, const std::string& block_prefix,
                       const Tensor& h, int n_heads, int d_ff, double dropout_rate,
                       bool train, std::mt19937_64& rng,
                       std::vector<Tensor>* attn_maps = nullptr);

// Registers one attention block's parameters under `block_prefix`.
void init_attention_block(ParamStore& store, const std::string& block_prefix,
                          int d_model, int d_ff, std::mt19937_64& rng);

// Full encoder: conv stack -> +positional encoding -> attention blocks.
// x is [T x d_in]; result is [T x d_hidden]. Deterministic when train is
// false (dropout off; rng untouched).
Tensor encode(const ParamStore& store, const EncoderConfig& cfg, const std::string& prefix,
              const Tensor& x, bool train, std::mt19937_64& rng,
              std::vector<Tensor>* attn_maps = nullptr);

}  // namespace codac
