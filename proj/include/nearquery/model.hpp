#pragma once

// Segmentation network: small CNN backbone, deformable-attention pixel
// decoder over strides 32/16/8, optional fusion of one otherwise unused
// backbone map, masked-attention query decoder and the auxiliary BLS heads.

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nearquery/deform_attn.hpp"
#include "nearquery/nn.hpp"
#include "nearquery/tensor.hpp"

namespace nq {

enum class FusionPosition { none, early, inside, late };
enum class FusionSource { stride4, stride32 };
enum class BlsMode { off, one, two };

std::string to_string(FusionPosition p);
std::string to_string(FusionSource s);
std::string to_string(BlsMode m);
FusionPosition parse_fusion_position(const std::string& s);
FusionSource parse_fusion_source(const std::string& s);
BlsMode parse_bls_mode(const std::string& s);

struct FusionConfig {
  FusionPosition position = FusionPosition::late;
  FusionSource source = FusionSource::stride4;
};

struct ModelConfig {
  Index in_channels = 3;
  std::array<Index, 4> backbone_channels{16, 32, 64, 96};  // strides 4, 8, 16, 32
  Index d_model = 64;
  Index n_heads = 4;
  Index n_points = 4;
  Index enc_layers = 3;
  Index dec_rounds = 3;  // each round visits the three encoder levels
  Index n_queries = 20;
  Index n_classes = 6;   // foreground classes
  bool deep_offsets = true;
  OffsetAdjustConfig offset{OffsetStrategy::squash_scaled, SquashKind::sigmoid_symmetric, 4.0, 2.0, 2.0};
  FusionConfig fusion;
  BlsMode bls = BlsMode::two;

  static constexpr Index kLevels = 3;
  Index dec_layers() const { return dec_rounds * kLevels; }
  void validate() const;
};

template <class T>
struct FeaturePyramid {
  std::array<Tensor<T>, 4> maps;  // strides 4, 8, 16, 32; each C x H x W
};

template <class T>
struct PredictionSet {
  Tensor<T> class_logits;  // Q x (C+1), last column is "no object"
  Tensor<T> mask_logits;   // Q x H/4 x W/4
};

template <class T>
struct DecoderOutputs {
  std::vector<PredictionSet<T>> sets;  // dec_layers + 1, initial state first
  Tensor<T> bls_a;                     // (C+1) x H x W, or undefined
  Tensor<T> bls_b;                     // 1 x H x W, or undefined
  Index height = 0, width = 0;
};

template <class T>
struct PixelDecoderOutput {
  std::vector<Tensor<T>> memories;  // per level (coarse first), HW_l x d
  std::vector<Tensor<T>> positions; // matching constant position codes
  std::vector<LevelShape> levels;
  Tensor<T> pixel_embed;            // d x H/4 x W/4
};

// Discrete choices made during a forward pass (decoder attention masks and
// loss matchings). A recorded trace can be replayed so finite differences
// see the same branches as the analytic pass.
struct DiscreteTrace {
  enum class Mode { record, replay };
  Mode mode = Mode::record;
  std::vector<std::vector<std::uint8_t>> attn_masks;  // Q x HW_l, 1 = admissible
  std::vector<std::vector<std::pair<Index, Index>>> matchings;
  std::size_t mask_cursor = 0, match_cursor = 0;

  void start_replay() {
    mode = Mode::replay;
    mask_cursor = match_cursor = 0;
  }
};

// Optional per-layer captures for inspection.
template <class T>
struct ModelProbe {
  std::vector<DeformAttnProbe<T>> encoder_attn;
  std::vector<Tensor<T>> cross_attn;  // per decoder layer, per head stacked: heads*Q x HW_l
};

template <class T>
struct FusionParams {
  Linear<T> proj;  // source channels -> d_model
};

template <class T>
struct MhaParams {
  Linear<T> q, k, v, out;
};

template <class T>
struct EncoderLayerParams {
  DeformAttnParams<T> attn;
  LayerNorm<T> norm1, norm2;
  Linear<T> ffn1, ffn2;
};

template <class T>
struct DecoderLayerParams {
  MhaParams<T> cross, self;
  LayerNorm<T> norm_cross, norm_self, norm_ffn;
  Linear<T> ffn1, ffn2;
};

// Sine position code of a level grid plus nothing learned: HW x d.
template <class T>
Tensor<T> sine_position_code(Index h, Index w, Index d);

// tokens + concat_l tokens(proj(resize(extra, H_l, W_l))). extra is C x h x w.
template <class T>
Tensor<T> fuse_features(const Tensor<T>& tokens, const std::vector<LevelShape>& levels,
                        const Tensor<T>& extra, const FusionParams<T>& fusion);

// Multi-head attention of q_in [Q x d] over k_in/v_in [S x d]. admissible
// (Q x S, may be empty) masks logits to -inf; a row with no admissible entry
// attends everywhere. attn_out, if given, receives the weights (heads*Q x S).
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q_in, const Tensor<T>& k_in, const Tensor<T>& v_in,
                               const MhaParams<T>& p, Index n_heads,
                               const std::vector<std::uint8_t>* admissible = nullptr,
                               Tensor<T>* attn_out = nullptr);

template <class T>
class SegModel {
 public:
  SegModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }
  const ParamStore<T>& params() const { return ps_; }

  FeaturePyramid<T> backbone_forward(const Tensor<T>& image) const;
  PixelDecoderOutput<T> pixel_decoder_forward(const FeaturePyramid<T>& pyr,
                                              ModelProbe<T>* probe = nullptr) const;
  DecoderOutputs<T> decoder_forward(const PixelDecoderOutput<T>& pix, Index height, Index width,
                                    DiscreteTrace* trace = nullptr,
                                    ModelProbe<T>* probe = nullptr) const;
  std::pair<Tensor<T>, Tensor<T>> bls_forward(const FeaturePyramid<T>& pyr,
                                              const Tensor<T>& pixel_embed, Index height,
                                              Index width) const;
  DecoderOutputs<T> forward(const Tensor<T>& image, DiscreteTrace* trace = nullptr,
                            ModelProbe<T>* probe = nullptr) const;

  // Per-query class and mask logits from a query state.
  PredictionSet<T> predict(const Tensor<T>& queries, const Tensor<T>& pixel_embed) const;

 private:
  ModelConfig cfg_;
  ParamStore<T> ps_;
  std::vector<Conv2d<T>> backbone_;  // stem, then two convs per stage
  std::vector<Linear<T>> input_proj_;
  Tensor<T> level_embed_;            // levels x d
  std::vector<EncoderLayerParams<T>> enc_;
  FusionParams<T> fusion_;
  Linear<T> pix_proj4_, pix_proj8_;
  Tensor<T> query_feat_, query_pos_;  // Q x d
  std::vector<DecoderLayerParams<T>> dec_;
  LayerNorm<T> dec_norm_;
  Linear<T> class_head_, mask_mlp1_, mask_mlp2_, mask_mlp3_;
  std::vector<Conv2d<T>> bls_a_;
  Linear<T> bls_b_;
};

extern template class SegModel<float>;
extern template class SegModel<double>;

}  // namespace nq
