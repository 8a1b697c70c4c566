// Encoder-decoder network over flattened layouts.
//
//   boundary raster --conv stack--> 1 row ┐
//   condition C --embed_encoder--> rows  ─┴─> bidirectional encoder -> memory
//   sequence prefix --embed_decoder--> causal decoder (cross-attends memory)
//     -> per-position hidden state -> class head or logistic-mixture head
//
// The encoder has no absolute positions, so permuting whole objects of the
// condition (with their object indices) permutes its output rows. Decoder row
// i predicts token i + 1 of the sequence.
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cofs/layout.hpp"
#include "cofs/tensor.hpp"

namespace cofs {

struct ModelConfig {
  std::size_t encoder_layers = 4;
  std::size_t decoder_layers = 4;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t ffn_hidden = 256;
  std::size_t mixture_components = 10;
  std::size_t num_classes = 6;
  std::size_t max_objects = 12;
  std::size_t raster_side = 64;
  std::size_t boundary_channels = 8;  // first conv width; doubles per layer
  std::size_t head_hidden1 = 128;
  std::size_t head_hidden2 = 64;

  // Sinusoid levels of the scalar embedding; always d_model / 2.
  std::size_t sinusoid_levels() const { return d_model / 2; }
  std::size_t capacity() const { return sequence_length(max_objects); }
  // Class-head width: one logit per class plus the end symbol.
  std::size_t class_outputs() const { return num_classes + 1; }
  std::size_t end_symbol() const { return num_classes; }

  // 4+4 layers, d=256, 4 heads, heads MLP (512, 256), T=10.
  static ModelConfig full_scale(std::size_t num_classes);
  // 4+4 layers, d=64, heads MLP scaled to (128, 64).
  static ModelConfig desk(std::size_t num_classes);

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LinearLayer {
  Tensor w, b;
  Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
};

struct NormLayer {
  Tensor gain, bias;
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

struct AttentionLayer {
  LinearLayer q, k, v, o;
};

struct EncoderBlock {
  NormLayer norm1, norm2;
  AttentionLayer self_attn;
  LinearLayer ff1, ff2;
};

struct DecoderBlock {
  NormLayer norm1, norm2, norm3;
  AttentionLayer self_attn, cross_attn;
  LinearLayer ff1, ff2;
};

// One element of a packed forward pass: encoder sees [boundary; condition],
// decoder sees the first `prefix_len` tokens of `sequence`.
struct ForwardItem {
  const BoundaryRaster* boundary = nullptr;
  const TokenSequence* condition = nullptr;
  const TokenSequence* sequence = nullptr;
  std::size_t prefix_len = 0;
};

struct EncodedBatch {
  Tensor memory;                         // packed encoder outputs
  std::vector<std::size_t> row_offset;   // first memory row of each item
  std::vector<std::size_t> row_count;    // 1 + |condition|
};

struct DecodedBatch {
  Tensor hidden;                         // packed decoder outputs
  std::vector<std::size_t> row_offset;   // first hidden row of each item
};

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  // Deep copy with fresh parameter storage.
  Model clone() const;

  const ModelConfig& config() const { return config_; }

  // Every parameter in checkpoint order with its stable name.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();

  // Value embedding of one token as a [1 x d] row.
  Tensor gamma(const TokenValue& token) const;
  Tensor embed_encoder(const TokenSequence& condition) const;
  Tensor embed_decoder(const TokenSequence& sequence, std::size_t prefix_len) const;
  Tensor boundary_encode(const BoundaryRaster& boundary) const;

  // Single-item conveniences over the packed paths below.
  Tensor encode(const BoundaryRaster& boundary, const TokenSequence& condition) const;
  Tensor decode(const TokenSequence& sequence, std::size_t prefix_len, const Tensor& memory) const;

  EncodedBatch encode_batch(std::span<const ForwardItem> items) const;
  DecodedBatch decode_batch(std::span<const ForwardItem> items, const EncodedBatch& encoded) const;
  DecodedBatch forward(std::span<const ForwardItem> items) const;

  // Heads on a set of hidden rows: [m x (classes + 1)] and [m x 3T].
  Tensor class_head(const Tensor& hidden_rows) const;
  Tensor mixture_head(const Tensor& hidden_rows) const;

  // Binary checkpoint of config + parameters (see README for the layout).
  void save_weights(std::ostream& out) const;
  void save_weights(const std::string& path) const;
  // Throws std::runtime_error on bad magic/version or a config mismatch.
  void load_weights(std::istream& in);
  void load_weights(const std::string& path);

 private:
  Model() = default;
  void init(std::uint64_t seed);
  void visit_params(const std::function<void(const std::string&, Tensor&)>& fn);
  Tensor vocab_table() const;
  Tensor encoder_stack(Tensor x, const std::vector<AttentionSegment>& segs) const;
  Tensor decoder_stack(Tensor x, const Tensor& memory, const std::vector<AttentionSegment>& self_segs,
                       const std::vector<AttentionSegment>& cross_segs) const;
  Tensor attend(const AttentionLayer& layer, const Tensor& xq, const Tensor& xkv,
                std::vector<AttentionSegment> segs, bool causal) const;

  ModelConfig config_;

  // Value embeddings: classes followed by the class MASK row.
  Tensor class_embedding_;
  Tensor scalar_mask_;        // [1 x d], MASK in a scalar slot
  Tensor special_embedding_;  // [2 x d], SOS and EOS
  Tensor attr_embedding_;     // [8 x d]
  Tensor object_embedding_;   // [max_objects x d]
  Tensor position_embedding_; // [capacity x d]

  std::vector<Tensor> conv_w_, conv_b_;
  LinearLayer boundary_proj_;

  std::vector<EncoderBlock> encoder_;
  NormLayer encoder_norm_;
  std::vector<DecoderBlock> decoder_;
  NormLayer decoder_norm_;

  LinearLayer class_out_;
  LinearLayer mix1_, mix2_, mix3_;
};

// A trained model plus what it needs to read and write layouts.
struct ModelBundle {
  Model model;
  ClassSchema schema;
  AttributeNormalizer normalizer;
};

// Checkpoint file = weights followed by the schema and normalizer block.
void save_bundle(const std::string& path, const ModelBundle& bundle);
ModelBundle load_bundle(const std::string& path);
// Config stored at the head of a checkpoint stream; restores the position.
ModelConfig peek_config(std::istream& in);

}  // namespace cofs
