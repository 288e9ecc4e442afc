#include "nearquery/model.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "nearquery/kernels.hpp"
#include "nearquery/ops.hpp"

namespace nq {

std::string to_string(FusionPosition p) {
  switch (p) {
    case FusionPosition::none: return "none";
    case FusionPosition::early: return "early";
    case FusionPosition::inside: return "inside";
    case FusionPosition::late: return "late";
  }
  return "?";
}

std::string to_string(FusionSource s) { return s == FusionSource::stride4 ? "stride4" : "stride32"; }

std::string to_string(BlsMode m) {
  switch (m) {
    case BlsMode::off: return "off";
    case BlsMode::one: return "one";
    case BlsMode::two: return "two";
  }
  return "?";
}

FusionPosition parse_fusion_position(const std::string& s) {
  if (s == "none") return FusionPosition::none;
  if (s == "early") return FusionPosition::early;
  if (s == "inside") return FusionPosition::inside;
  if (s == "late") return FusionPosition::late;
  throw std::invalid_argument("unknown fusion position '" + s + "'");
}

FusionSource parse_fusion_source(const std::string& s) {
  if (s == "stride4") return FusionSource::stride4;
  if (s == "stride32") return FusionSource::stride32;
  throw std::invalid_argument("unknown fusion source '" + s + "'");
}

BlsMode parse_bls_mode(const std::string& s) {
  if (s == "off") return BlsMode::off;
  if (s == "one") return BlsMode::one;
  if (s == "two") return BlsMode::two;
  throw std::invalid_argument("unknown bls mode '" + s + "'");
}

void ModelConfig::validate() const {
  if (in_channels < 1) throw std::invalid_argument("model.in_channels must be >= 1");
  for (Index c : backbone_channels) {
    if (c < 1) throw std::invalid_argument("model.backbone_channels must be >= 1");
  }
  if (d_model < 4 || d_model % 4 != 0) {
    throw std::invalid_argument("model.d_model must be a positive multiple of 4");
  }
  if (n_heads < 1 || d_model % n_heads != 0) {
    throw std::invalid_argument("model.d_model must be divisible by model.n_heads");
  }
  if (n_points < 1) throw std::invalid_argument("model.n_points must be >= 1");
  if (enc_layers < 1) throw std::invalid_argument("model.enc_layers must be >= 1");
  if (dec_rounds < 1) throw std::invalid_argument("model.dec_rounds must be >= 1");
  if (n_queries < 1) throw std::invalid_argument("model.n_queries must be >= 1");
  if (n_classes < 1 || n_classes > 254) {
    throw std::invalid_argument("model.n_classes must be in [1, 254]");
  }
  offset.validate();
}

template <class T>
Tensor<T> sine_position_code(Index h, Index w, Index d) {
  if (d % 4 != 0) throw std::invalid_argument("sine_position_code: d must be a multiple of 4");
  const Index quarter = d / 4;
  std::vector<T> v(static_cast<std::size_t>(h * w * d));
  for (Index i = 0; i < h; ++i) {
    for (Index j = 0; j < w; ++j) {
      const double ys = (static_cast<double>(i) + 0.5) / static_cast<double>(h) * 2.0 * std::numbers::pi;
      const double xs = (static_cast<double>(j) + 0.5) / static_cast<double>(w) * 2.0 * std::numbers::pi;
      T* row = v.data() + (i * w + j) * d;
      for (Index f = 0; f < quarter; ++f) {
        const double freq = std::pow(10000.0, -static_cast<double>(f) / static_cast<double>(quarter));
        row[2 * f] = static_cast<T>(std::sin(ys * freq));
        row[2 * f + 1] = static_cast<T>(std::cos(ys * freq));
        row[2 * quarter + 2 * f] = static_cast<T>(std::sin(xs * freq));
        row[2 * quarter + 2 * f + 1] = static_cast<T>(std::cos(xs * freq));
      }
    }
  }
  return Tensor<T>::from({h * w, d}, std::move(v));
}

template <class T>
Tensor<T> fuse_features(const Tensor<T>& tokens, const std::vector<LevelShape>& levels,
                        const Tensor<T>& extra, const FusionParams<T>& fusion) {
  if (extra.rank() != 3) throw ShapeError("fuse_features: extra map must be C x H x W, got " + shape_str(extra.shape()));
  std::vector<Tensor<T>> parts;
  Index total = 0;
  for (const auto& lv : levels) {
    parts.push_back(fusion.proj(map_to_tokens(resize_bilinear(extra, lv.height, lv.width))));
    total += lv.height * lv.width;
  }
  Tensor<T> add_on = concat_rows(parts);
  if (add_on.shape() != tokens.shape()) {
    throw ShapeError("fuse_features: tokens " + shape_str(tokens.shape()) + " vs fused " +
                     shape_str(add_on.shape()) + " (" + std::to_string(total) + " level cells)");
  }
  return add(tokens, add_on);
}

template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q_in, const Tensor<T>& k_in, const Tensor<T>& v_in,
                               const MhaParams<T>& p, Index n_heads,
                               const std::vector<std::uint8_t>* admissible, Tensor<T>* attn_out) {
  const Tensor<T> q = p.q(q_in), k = p.k(k_in), v = p.v(v_in);
  const Index Q = q.dim(0), S = k.dim(0), d = q.dim(1), dh = d / n_heads;
  Tensor<T> bias;
  if (admissible != nullptr && !admissible->empty()) {
    if (static_cast<Index>(admissible->size()) != Q * S) {
      throw ShapeError("multi_head_attention: mask has " + std::to_string(admissible->size()) +
                       " entries for " + std::to_string(Q) + " x " + std::to_string(S) + " logits");
    }
    std::vector<T> b(static_cast<std::size_t>(Q * S), T(0));
    for (Index r = 0; r < Q; ++r) {
      const std::uint8_t* row = admissible->data() + r * S;
      bool any = false;
      for (Index s = 0; s < S && !any; ++s) any = row[s] != 0;
      if (!any) continue;  // empty admissible set: attend everywhere
      for (Index s = 0; s < S; ++s) {
        if (row[s] == 0) b[static_cast<std::size_t>(r * S + s)] = -std::numeric_limits<T>::infinity();
      }
    }
    bias = Tensor<T>::from({Q, S}, std::move(b));
  }
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<Tensor<T>> heads, weights;
  for (Index h = 0; h < n_heads; ++h) {
    Tensor<T> logits = scale(matmul_nt(slice_cols(q, h * dh, dh), slice_cols(k, h * dh, dh)), inv_sqrt);
    if (bias.defined()) logits = add(logits, bias);
    Tensor<T> a = softmax(logits, 1);
    heads.push_back(matmul(a, slice_cols(v, h * dh, dh)));
    if (attn_out != nullptr) weights.push_back(a);
  }
  if (attn_out != nullptr) *attn_out = concat_rows(weights).detach();
  return p.out(n_heads == 1 ? heads[0] : concat_cols(heads));
}

namespace {

template <class T>
MhaParams<T> make_mha(ParamStore<T>& ps, const std::string& name, Index d) {
  return {Linear<T>::create(ps, name + ".q", d, d), Linear<T>::create(ps, name + ".k", d, d),
          Linear<T>::create(ps, name + ".v", d, d), Linear<T>::create(ps, name + ".out", d, d)};
}

template <class T>
Tensor<T> row_as_vector(const Tensor<T>& m, Index r) {
  return reshape(slice_rows(m, r, 1), {m.dim(1)});
}

// Admissible positions for masked attention: mask probability >= 0.5 after
// resizing the previous mask logits to the level grid.
template <class T>
std::vector<std::uint8_t> admissible_from_masks(const Tensor<T>& mask_logits, const LevelShape& lv) {
  const Index Q = mask_logits.dim(0), h = mask_logits.dim(1), w = mask_logits.dim(2);
  std::vector<T> r(static_cast<std::size_t>(Q * lv.height * lv.width));
  kernels::resize_fwd(kernels::current_exec(), Q, h, w, lv.height, lv.width,
                      mask_logits.data().data(), r.data());
  std::vector<std::uint8_t> out(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) out[i] = r[i] >= T(0) ? 1 : 0;
  return out;
}

}  // namespace

template <class T>
SegModel<T>::SegModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), ps_(seed) {
  cfg_.validate();
  const auto& ch = cfg_.backbone_channels;
  const Index d = cfg_.d_model;

  backbone_.push_back(Conv2d<T>::create(ps_, "backbone.stem", cfg_.in_channels, ch[0], 3, 2, 1));
  for (int s = 0; s < 4; ++s) {
    const Index in = s == 0 ? ch[0] : ch[static_cast<std::size_t>(s - 1)];
    const Index out = ch[static_cast<std::size_t>(s)];
    const std::string n = "backbone.stage" + std::to_string(s + 1);
    backbone_.push_back(Conv2d<T>::create(ps_, n + ".down", in, out, 3, 2, 1));
    backbone_.push_back(Conv2d<T>::create(ps_, n + ".conv", out, out, 3, 1, 1));
  }

  // Encoder levels are strides 32, 16, 8 in that order.
  for (Index l = 0; l < ModelConfig::kLevels; ++l) {
    input_proj_.push_back(Linear<T>::create(ps_, "encoder.input_proj" + std::to_string(l),
                                            ch[static_cast<std::size_t>(3 - l)], d));
  }
  level_embed_ = ps_.add("encoder.level_embed", {ModelConfig::kLevels, d}, Init::normal_unit);
  for (Index i = 0; i < cfg_.enc_layers; ++i) {
    const std::string n = "encoder.layer" + std::to_string(i);
    EncoderLayerParams<T> e;
    e.attn = DeformAttnParams<T>::create(ps_, n + ".attn", d, cfg_.n_heads, ModelConfig::kLevels,
                                         cfg_.n_points, cfg_.deep_offsets);
    e.norm1 = LayerNorm<T>::create(ps_, n + ".norm1", d);
    e.ffn1 = Linear<T>::create(ps_, n + ".ffn1", d, 2 * d);
    e.ffn2 = Linear<T>::create(ps_, n + ".ffn2", 2 * d, d);
    e.norm2 = LayerNorm<T>::create(ps_, n + ".norm2", d);
    enc_.push_back(std::move(e));
  }
  if (cfg_.fusion.position != FusionPosition::none) {
    const Index src = cfg_.fusion.source == FusionSource::stride4 ? ch[0] : ch[3];
    fusion_.proj = Linear<T>::create(ps_, "fusion.proj", src, d);
  }
  pix_proj4_ = Linear<T>::create(ps_, "pixel.proj4", ch[0], d);
  pix_proj8_ = Linear<T>::create(ps_, "pixel.proj8", d, d);

  query_feat_ = ps_.add("decoder.query_feat", {cfg_.n_queries, d}, Init::normal_unit);
  query_pos_ = ps_.add("decoder.query_pos", {cfg_.n_queries, d}, Init::normal_unit);
  for (Index i = 0; i < cfg_.dec_layers(); ++i) {
    const std::string n = "decoder.layer" + std::to_string(i);
    DecoderLayerParams<T> l;
    l.cross = make_mha(ps_, n + ".cross", d);
    l.norm_cross = LayerNorm<T>::create(ps_, n + ".norm_cross", d);
    l.self = make_mha(ps_, n + ".self", d);
    l.norm_self = LayerNorm<T>::create(ps_, n + ".norm_self", d);
    l.ffn1 = Linear<T>::create(ps_, n + ".ffn1", d, 2 * d);
    l.ffn2 = Linear<T>::create(ps_, n + ".ffn2", 2 * d, d);
    l.norm_ffn = LayerNorm<T>::create(ps_, n + ".norm_ffn", d);
    dec_.push_back(std::move(l));
  }
  dec_norm_ = LayerNorm<T>::create(ps_, "decoder.norm", d);
  class_head_ = Linear<T>::create(ps_, "head.class", d, cfg_.n_classes + 1);
  mask_mlp1_ = Linear<T>::create(ps_, "head.mask1", d, d);
  mask_mlp2_ = Linear<T>::create(ps_, "head.mask2", d, d);
  mask_mlp3_ = Linear<T>::create(ps_, "head.mask3", d, d);

  if (cfg_.bls == BlsMode::two) {
    bls_a_.push_back(Conv2d<T>::create(ps_, "bls_a.conv1", ch[1], ch[1], 3, 1, 1));
    bls_a_.push_back(Conv2d<T>::create(ps_, "bls_a.conv2", ch[1], ch[1], 3, 1, 1));
    bls_a_.push_back(Conv2d<T>::create(ps_, "bls_a.cls", ch[1], cfg_.n_classes + 1, 1, 1, 0));
  }
  if (cfg_.bls != BlsMode::off) bls_b_ = Linear<T>::create(ps_, "bls_b.proj", d, 1);
}

template <class T>
FeaturePyramid<T> SegModel<T>::backbone_forward(const Tensor<T>& image) const {
  if (image.rank() != 3 || image.dim(0) != cfg_.in_channels) {
    throw ShapeError("backbone: expected " + std::to_string(cfg_.in_channels) +
                     " x H x W image, got " + shape_str(image.shape()));
  }
  const Index H = image.dim(1), W = image.dim(2);
  if (H % 32 != 0 || W % 32 != 0 || H == 0 || W == 0) {
    throw ShapeError("backbone: image extents " + std::to_string(H) + "x" + std::to_string(W) +
                     " must be positive multiples of 32 (pad bottom/right by " +
                     std::to_string((32 - H % 32) % 32) + "/" + std::to_string((32 - W % 32) % 32) + ")");
  }
  FeaturePyramid<T> pyr;
  Tensor<T> x = relu(backbone_[0](image));
  for (std::size_t s = 0; s < 4; ++s) {
    x = relu(backbone_[1 + 2 * s](x));
    x = relu(backbone_[2 + 2 * s](x));
    pyr.maps[s] = x;
  }
  return pyr;
}

template <class T>
PixelDecoderOutput<T> SegModel<T>::pixel_decoder_forward(const FeaturePyramid<T>& pyr,
                                                         ModelProbe<T>* probe) const {
  const Index d = cfg_.d_model;
  PixelDecoderOutput<T> out;
  std::vector<Tensor<T>> toks, pos;
  for (Index l = 0; l < ModelConfig::kLevels; ++l) {
    const Tensor<T>& m = pyr.maps[static_cast<std::size_t>(3 - l)];
    out.levels.push_back({m.dim(1), m.dim(2)});
    toks.push_back(input_proj_[static_cast<std::size_t>(l)](map_to_tokens(m)));
    pos.push_back(add_bias(sine_position_code<T>(m.dim(1), m.dim(2), d), row_as_vector(level_embed_, l)));
  }
  Tensor<T> x = concat_rows(toks);
  const Tensor<T> pos_all = concat_rows(pos);
  const ReferencePoints refs = make_reference_points(out.levels);

  const FusionPosition fp = cfg_.fusion.position;
  const Tensor<T>& extra = pyr.maps[cfg_.fusion.source == FusionSource::stride4 ? 0 : 3];
  if (fp == FusionPosition::early) x = fuse_features(x, out.levels, extra, fusion_);
  for (const auto& layer : enc_) {
    DeformAttnProbe<T> dp;
    Tensor<T> a = deform_attn_forward(add(x, pos_all), x, refs, cfg_.offset, layer.attn,
                                      probe != nullptr ? &dp : nullptr);
    if (probe != nullptr) probe->encoder_attn.push_back(dp);
    x = layer.norm1(add(x, a));
    if (fp == FusionPosition::inside) x = fuse_features(x, out.levels, extra, fusion_);
    x = layer.norm2(add(x, layer.ffn2(relu(layer.ffn1(x)))));
  }
  if (fp == FusionPosition::late) x = fuse_features(x, out.levels, extra, fusion_);

  for (Index l = 0; l < ModelConfig::kLevels; ++l) {
    const auto& lv = out.levels[static_cast<std::size_t>(l)];
    out.memories.push_back(slice_rows(x, refs.level_starts[static_cast<std::size_t>(l)], lv.height * lv.width));
    out.positions.push_back(pos[static_cast<std::size_t>(l)]);
  }
  const Tensor<T>& m4 = pyr.maps[0];
  const auto& lv8 = out.levels[2];
  Tensor<T> fine = tokens_to_map(pix_proj4_(map_to_tokens(m4)), m4.dim(1), m4.dim(2));
  Tensor<T> coarse = tokens_to_map(pix_proj8_(out.memories[2]), lv8.height, lv8.width);
  out.pixel_embed = add(fine, resize_bilinear(coarse, m4.dim(1), m4.dim(2)));
  return out;
}

template <class T>
PredictionSet<T> SegModel<T>::predict(const Tensor<T>& queries, const Tensor<T>& pixel_embed) const {
  const Tensor<T> h = dec_norm_(queries);
  PredictionSet<T> p;
  p.class_logits = class_head_(h);
  const Tensor<T> emb = mask_mlp3_(relu(mask_mlp2_(relu(mask_mlp1_(h)))));
  const Index d = pixel_embed.dim(0), ph = pixel_embed.dim(1), pw = pixel_embed.dim(2);
  p.mask_logits = reshape(matmul(emb, reshape(pixel_embed, {d, ph * pw})), {queries.dim(0), ph, pw});
  return p;
}

template <class T>
DecoderOutputs<T> SegModel<T>::decoder_forward(const PixelDecoderOutput<T>& pix, Index height,
                                               Index width, DiscreteTrace* trace,
                                               ModelProbe<T>* probe) const {
  DecoderOutputs<T> out;
  out.height = height;
  out.width = width;
  Tensor<T> x = query_feat_;
  out.sets.push_back(predict(x, pix.pixel_embed));
  for (Index i = 0; i < cfg_.dec_layers(); ++i) {
    const auto& layer = dec_[static_cast<std::size_t>(i)];
    const std::size_t l = static_cast<std::size_t>(i % ModelConfig::kLevels);
    std::vector<std::uint8_t> adm;
    if (trace != nullptr && trace->mode == DiscreteTrace::Mode::replay) {
      if (trace->mask_cursor >= trace->attn_masks.size()) {
        throw std::logic_error("discrete trace: ran out of recorded attention masks");
      }
      adm = trace->attn_masks[trace->mask_cursor++];
    } else {
      adm = admissible_from_masks(out.sets.back().mask_logits, pix.levels[l]);
      if (trace != nullptr) trace->attn_masks.push_back(adm);
    }
    const Tensor<T> qp = add(x, query_pos_);
    Tensor<T> attn;
    Tensor<T> c = multi_head_attention(qp, add(pix.memories[l], pix.positions[l]), pix.memories[l],
                                       layer.cross, cfg_.n_heads, &adm,
                                       probe != nullptr ? &attn : nullptr);
    if (probe != nullptr) probe->cross_attn.push_back(attn);
    x = layer.norm_cross(add(x, c));
    const Tensor<T> qs = add(x, query_pos_);
    x = layer.norm_self(add(x, multi_head_attention(qs, qs, x, layer.self, cfg_.n_heads)));
    x = layer.norm_ffn(add(x, layer.ffn2(relu(layer.ffn1(x)))));
    out.sets.push_back(predict(x, pix.pixel_embed));
  }
  return out;
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> SegModel<T>::bls_forward(const FeaturePyramid<T>& pyr,
                                                         const Tensor<T>& pixel_embed,
                                                         Index height, Index width) const {
  if (cfg_.bls == BlsMode::off) throw std::logic_error("bls_forward called with bls mode off");
  Tensor<T> a;
  if (cfg_.bls == BlsMode::two) {
    Tensor<T> h = relu(bls_a_[0](pyr.maps[1]));
    h = relu(bls_a_[1](h));
    a = resize_bilinear(bls_a_[2](h), height, width);
  }
  const Index ph = pixel_embed.dim(1), pw = pixel_embed.dim(2);
  Tensor<T> b = tokens_to_map(bls_b_(map_to_tokens(pixel_embed)), ph, pw);
  return {a, resize_bilinear(b, height, width)};
}

template <class T>
DecoderOutputs<T> SegModel<T>::forward(const Tensor<T>& image, DiscreteTrace* trace,
                                       ModelProbe<T>* probe) const {
  const FeaturePyramid<T> pyr = backbone_forward(image);
  const PixelDecoderOutput<T> pix = pixel_decoder_forward(pyr, probe);
  DecoderOutputs<T> out = decoder_forward(pix, image.dim(1), image.dim(2), trace, probe);
  if (cfg_.bls != BlsMode::off) {
    auto [a, b] = bls_forward(pyr, pix.pixel_embed, image.dim(1), image.dim(2));
    out.bls_a = a;
    out.bls_b = b;
  }
  return out;
}

template class SegModel<float>;
template class SegModel<double>;

#define NQ_INSTANTIATE_MODEL(T)                                                                     \
  template Tensor<T> sine_position_code<T>(Index, Index, Index);                                    \
  template Tensor<T> fuse_features(const Tensor<T>&, const std::vector<LevelShape>&,                \
                                   const Tensor<T>&, const FusionParams<T>&);                       \
  template Tensor<T> multi_head_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                          const MhaParams<T>&, Index,                               \
                                          const std::vector<std::uint8_t>*, Tensor<T>*);

NQ_INSTANTIATE_MODEL(float)
NQ_INSTANTIATE_MODEL(double)

}  // namespace nq
