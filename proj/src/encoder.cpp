#include "codac/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace codac {

EncoderConfig EncoderConfig::defaults(int d_in_) {
  EncoderConfig cfg;
  cfg.d_in = d_in_;
  cfg.conv_layers = {{3, 1, cfg.d_hidden}, {3, 2, cfg.d_hidden}, {3, 4, cfg.d_hidden}};
  return cfg;
}

void EncoderConfig::validate() const {
  if (d_in < 1) throw std::invalid_argument("encoder config: d_in must be >= 1");
  if (d_hidden < 1) throw std::invalid_argument("encoder config: d_hidden must be >= 1");
  if (n_heads < 1 || d_hidden % n_heads != 0) {
    throw std::invalid_argument("encoder config: d_hidden must be divisible by n_heads");
  }
  if (n_attn_blocks < 0) throw std::invalid_argument("encoder config: negative block count");
  if (d_ff < 1) throw std::invalid_argument("encoder config: d_ff must be >= 1");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw std::invalid_argument("encoder config: dropout_rate must be in [0, 1)");
  }
  if (conv_layers.empty()) throw std::invalid_argument("encoder config: empty conv stack");
  int prev_dil = 0;
  for (const auto& layer : conv_layers) {
    if (layer.kernel < 1 || layer.kernel % 2 == 0) {
      throw std::invalid_argument("encoder config: kernels must be odd");
    }
    if (layer.dilation <= prev_dil) {
      throw std::invalid_argument("encoder config: dilations must be strictly increasing");
    }
    prev_dil = layer.dilation;
    if (layer.channels < 1) throw std::invalid_argument("encoder config: channels must be >= 1");
  }
  if (conv_layers.back().channels != d_hidden) {
    throw std::invalid_argument("encoder config: last conv layer must emit d_hidden channels");
  }
}

int EncoderConfig::receptive_field() const {
  int field = 1;
  for (const auto& layer : conv_layers) field += (layer.kernel - 1) * layer.dilation;
  return field;
}

Tensor positional_encoding(int t_len, int d) {
  if (d < 2 || d % 2 != 0) throw std::invalid_argument("positional encoding needs even width");
  Tensor pe = Tensor::zeros({t_len, d});
  auto v = pe.values_mut();
  for (int t = 0; t < t_len; ++t) {
    for (int i = 0; i < d / 2; ++i) {
      const double rate = std::pow(10000.0, 2.0 * i / d);
      v[static_cast<std::size_t>(t) * d + 2 * i] = std::sin(t / rate);
      v[static_cast<std::size_t>(t) * d + 2 * i + 1] = std::cos(t / rate);
    }
  }
  quantize_span(pe.values_mut());
  return pe;
}

void init_attention_block(ParamStore& store, const std::string& block_prefix, int d_model,
                          int d_ff, std::mt19937_64& rng) {
  auto linear = [&](const std::string& name, int d_in, int d_out) {
    xavier_init(store.create(block_prefix + name + ".w", {d_in, d_out}), d_in, d_out, rng);
    store.create(block_prefix + name + ".b", {d_out});
  };
  store.put(block_prefix + "ln1.gain", Tensor::full({d_model}, 1.0, true));
  store.create(block_prefix + "ln1.bias", {d_model});
  linear("wq", d_model, d_model);
  linear("wk", d_model, d_model);
  linear("wv", d_model, d_model);
  linear("wo", d_model, d_model);
  store.put(block_prefix + "ln2.gain", Tensor::full({d_model}, 1.0, true));
  store.create(block_prefix + "ln2.bias", {d_model});
  linear("ff1", d_model, d_ff);
  linear("ff2", d_ff, d_model);
}

void init_encoder_params(ParamStore& store, const EncoderConfig& cfg, const std::string& prefix,
                         std::mt19937_64& rng) {
  cfg.validate();
  int c_in = cfg.d_in;
  for (std::size_t i = 0; i < cfg.conv_layers.size(); ++i) {
    const auto& layer = cfg.conv_layers[i];
    const std::string name = prefix + "conv" + std::to_string(i);
    Tensor& w = store.create(name + ".w", {layer.channels, c_in, layer.kernel});
    xavier_init(w, c_in * layer.kernel, layer.channels * layer.kernel, rng);
    store.create(name + ".b", {layer.channels});
    c_in = layer.channels;
  }
  for (int j = 0; j < cfg.n_attn_blocks; ++j) {
    init_attention_block(store, prefix + "blk" + std::to_string(j) + ".", cfg.d_hidden,
                         cfg.d_ff, rng);
  }
}

Tensor conv_stack(const ParamStore& store, const EncoderConfig& cfg, const std::string& prefix,
                  const Tensor& x) {
  if (x.rank() != 2 || x.dim(1) != cfg.d_in) {
    throw std::invalid_argument("encode: input has " + std::to_string(x.dim(x.rank() - 1)) +
                                " channels, config expects " + std::to_string(cfg.d_in));
  }
  Tensor h = x;
  for (std::size_t i = 0; i < cfg.conv_layers.size(); ++i) {
    const std::string name = prefix + "conv" + std::to_string(i);
    h = conv1d_dilated(h, store.get(name + ".w"), cfg.conv_layers[i].dilation);
    h = relu(add_rowvec(h, store.get(name + ".b")));
  }
  return h;
}

Tensor attention_block(const ParamStore& store, const std::string& block_prefix, const Tensor& h,
                       int n_heads, int d_ff, double dropout_rate, bool train,
                       std::mt19937_64& rng, std::vector<Tensor>* attn_maps) {
  (void)d_ff;
  const int d_model = h.dim(1);
  const int d_head = d_model / n_heads;
  auto linear = [&](const std::string& name, const Tensor& in) {
    return add_rowvec(matmul(in, store.get(block_prefix + name + ".w")),
                      store.get(block_prefix + name + ".b"));
  };

  Tensor u = layer_norm(h, store.get(block_prefix + "ln1.gain"), store.get(block_prefix + "ln1.bias"));
  const Tensor q = linear("wq", u), k = linear("wk", u), v = linear("wv", u);
  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(n_heads));
  for (int i = 0; i < n_heads; ++i) {
    AttentionResult r = scaled_dot_attention(slice_cols(q, i * d_head, d_head),
                                             slice_cols(k, i * d_head, d_head),
                                             slice_cols(v, i * d_head, d_head));
    if (attn_maps) attn_maps->push_back(r.weights);
    heads.push_back(r.output);
  }
  Tensor attn = linear("wo", concat_cols(heads));
  if (train && dropout_rate > 0.0) attn = dropout(attn, dropout_rate, rng);
  Tensor mid = add(h, attn);

  Tensor u2 = layer_norm(mid, store.get(block_prefix + "ln2.gain"),
                         store.get(block_prefix + "ln2.bias"));
  Tensor ff = linear("ff2", relu(linear("ff1", u2)));
  if (train && dropout_rate > 0.0) ff = dropout(ff, dropout_rate, rng);
  return add(mid, ff);
}

Tensor encode(const ParamStore& store, const EncoderConfig& cfg, const std::string& prefix,
              const Tensor& x, bool train, std::mt19937_64& rng,
              std::vector<Tensor>* attn_maps) {
  Tensor h = conv_stack(store, cfg, prefix, x);
  h = add(h, positional_encoding(h.dim(0), cfg.d_hidden));
  for (int j = 0; j < cfg.n_attn_blocks; ++j) {
    h = attention_block(store, prefix + "blk" + std::to_string(j) + ".", h, cfg.n_heads,
                        cfg.d_ff, cfg.dropout_rate, train, rng, attn_maps);
  }
  return h;
}

}  // namespace codac
