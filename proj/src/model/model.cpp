#include "cofs/model.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "cofs/io.hpp"
#include "cofs/rng.hpp"

namespace cofs {

namespace {

constexpr std::size_t kConvLayers = 4;
constexpr double kEmbeddingStd = 0.3;

Tensor param(Shape shape) { return Tensor::zeros(std::move(shape), true); }

void fill_normal(Tensor& t, Rng& rng, double stddev) {
  for (double& v : t.mutable_values()) v = rng.normal(0.0, stddev);
}

LinearLayer make_linear(std::size_t in, std::size_t out) { return {param({in, out}), param({out})}; }

NormLayer make_norm(std::size_t d) { return {Tensor::full({d}, 1.0, true), param({d})}; }

AttentionLayer make_attention(std::size_t d) {
  return {make_linear(d, d), make_linear(d, d), make_linear(d, d), make_linear(d, d)};
}

void init_linear(LinearLayer& l, Rng& rng, double gain = 1.0) {
  fill_normal(l.w, rng, gain / std::sqrt(static_cast<double>(l.w.dim(0))));
}

void init_attention(AttentionLayer& a, Rng& rng, double out_gain) {
  init_linear(a.q, rng);
  init_linear(a.k, rng);
  init_linear(a.v, rng);
  init_linear(a.o, rng, out_gain);
}

std::vector<AttentionSegment> self_segments(const std::vector<std::size_t>& offset,
                                            const std::vector<std::size_t>& count) {
  std::vector<AttentionSegment> segs(offset.size());
  for (std::size_t i = 0; i < offset.size(); ++i) segs[i] = {offset[i], count[i], offset[i], count[i]};
  return segs;
}

// Little-endian primitive I/O for checkpoints.
void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  put_u64(out, bits);
}

void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void read_exact(std::istream& in, char* dst, std::size_t n) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw std::runtime_error("checkpoint: unexpected end of file");
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  read_exact(in, reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  read_exact(in, reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& in) {
  const std::uint64_t bits = get_u64(in);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

std::string get_string(std::istream& in, std::size_t limit = 1 << 16) {
  const std::uint32_t n = get_u32(in);
  if (n > limit) throw std::runtime_error("checkpoint: string length out of range");
  std::string s(n, '\0');
  read_exact(in, s.data(), n);
  return s;
}

constexpr char kWeightsMagic[8] = {'C', 'O', 'F', 'S', 'W', 'G', 'T', '\0'};
constexpr char kMetaMagic[8] = {'C', 'O', 'F', 'S', 'M', 'E', 'T', 'A'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::size_t ModelConfig::*> config_fields() {
  return {&ModelConfig::encoder_layers,     &ModelConfig::decoder_layers, &ModelConfig::d_model,
          &ModelConfig::heads,              &ModelConfig::ffn_hidden,     &ModelConfig::mixture_components,
          &ModelConfig::num_classes,        &ModelConfig::max_objects,    &ModelConfig::raster_side,
          &ModelConfig::boundary_channels,  &ModelConfig::head_hidden1,   &ModelConfig::head_hidden2};
}

ModelConfig read_config(std::istream& in) {
  char magic[8];
  read_exact(in, magic, 8);
  if (std::memcmp(magic, kWeightsMagic, 8) != 0) throw std::runtime_error("checkpoint: bad magic");
  const std::uint32_t version = get_u32(in);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  ModelConfig cfg;
  for (auto f : config_fields()) cfg.*f = static_cast<std::size_t>(get_u64(in));
  return cfg;
}

}  // namespace

ModelConfig ModelConfig::full_scale(std::size_t num_classes) {
  ModelConfig c;
  c.d_model = 256;
  c.ffn_hidden = 1024;
  c.head_hidden1 = 512;
  c.head_hidden2 = 256;
  c.boundary_channels = 32;
  c.num_classes = num_classes;
  return c;
}

ModelConfig ModelConfig::desk(std::size_t num_classes) {
  ModelConfig c;
  c.num_classes = num_classes;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (d_model == 0 || d_model % 2 != 0) fail("d_model must be even and positive");
  if (heads == 0 || d_model % heads != 0) fail("d_model must be divisible by heads");
  if (num_classes == 0) fail("need at least one class");
  if (max_objects == 0) fail("max_objects must be positive");
  if (mixture_components == 0) fail("mixture_components must be positive");
  if (raster_side < 16 || raster_side % 16 != 0) fail("raster_side must be a positive multiple of 16");
  if (boundary_channels == 0 || ffn_hidden == 0 || head_hidden1 == 0 || head_hidden2 == 0) fail("zero-width layer");
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model;
  class_embedding_ = param({config_.num_classes + 1, d});
  scalar_mask_ = param({1, d});
  special_embedding_ = param({2, d});
  attr_embedding_ = param({kAttrCount, d});
  object_embedding_ = param({config_.max_objects, d});
  position_embedding_ = param({config_.capacity(), d});

  std::size_t in_ch = 1, out_ch = config_.boundary_channels;
  for (std::size_t i = 0; i < kConvLayers; ++i) {
    conv_w_.push_back(param({out_ch, in_ch, 3, 3}));
    conv_b_.push_back(param({out_ch}));
    in_ch = out_ch;
    out_ch *= 2;
  }
  boundary_proj_ = make_linear(in_ch, d);

  for (std::size_t l = 0; l < config_.encoder_layers; ++l) {
    encoder_.push_back({make_norm(d), make_norm(d), make_attention(d), make_linear(d, config_.ffn_hidden),
                        make_linear(config_.ffn_hidden, d)});
  }
  encoder_norm_ = make_norm(d);
  for (std::size_t l = 0; l < config_.decoder_layers; ++l) {
    decoder_.push_back({make_norm(d), make_norm(d), make_norm(d), make_attention(d), make_attention(d),
                        make_linear(d, config_.ffn_hidden), make_linear(config_.ffn_hidden, d)});
  }
  decoder_norm_ = make_norm(d);

  class_out_ = make_linear(d, config_.class_outputs());
  mix1_ = make_linear(d, config_.head_hidden1);
  mix2_ = make_linear(config_.head_hidden1, config_.head_hidden2);
  mix3_ = make_linear(config_.head_hidden2, 3 * config_.mixture_components);
  init(seed);
}

void Model::init(std::uint64_t seed) {
  Rng rng(seed);
  for (Tensor* t : {&class_embedding_, &scalar_mask_, &special_embedding_, &attr_embedding_, &object_embedding_,
                    &position_embedding_}) {
    fill_normal(*t, rng, kEmbeddingStd);
  }
  for (auto& w : conv_w_) {
    const double fan_in = static_cast<double>(w.dim(1) * w.dim(2) * w.dim(3));
    fill_normal(w, rng, std::sqrt(2.0 / fan_in));
  }
  init_linear(boundary_proj_, rng);

  const double enc_out = 1.0 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(1, encoder_.size())));
  for (auto& b : encoder_) {
    init_attention(b.self_attn, rng, enc_out);
    init_linear(b.ff1, rng);
    init_linear(b.ff2, rng, enc_out);
  }
  const double dec_out = 1.0 / std::sqrt(3.0 * static_cast<double>(std::max<std::size_t>(1, decoder_.size())));
  for (auto& b : decoder_) {
    init_attention(b.self_attn, rng, dec_out);
    init_attention(b.cross_attn, rng, dec_out);
    init_linear(b.ff1, rng);
    init_linear(b.ff2, rng, dec_out);
  }

  init_linear(class_out_, rng, 0.1);
  init_linear(mix1_, rng, std::numbers::sqrt2);
  init_linear(mix2_, rng, std::numbers::sqrt2);
  init_linear(mix3_, rng, 0.1);
  // Start the mixture with components spread over [-1, 1] and moderate width.
  const std::size_t t = config_.mixture_components;
  auto bias = mix3_.b.mutable_values();
  for (std::size_t i = 0; i < t; ++i) {
    bias[t + i] = t == 1 ? 0.0 : -0.9 + 1.8 * static_cast<double>(i) / static_cast<double>(t - 1);
    bias[2 * t + i] = std::log(0.3);
  }
}

void Model::visit_params(const std::function<void(const std::string&, Tensor&)>& fn) {
  auto lin = [&](const std::string& name, LinearLayer& l) {
    fn(name + ".w", l.w);
    fn(name + ".b", l.b);
  };
  auto norm = [&](const std::string& name, NormLayer& n) {
    fn(name + ".gain", n.gain);
    fn(name + ".bias", n.bias);
  };
  auto attn = [&](const std::string& name, AttentionLayer& a) {
    lin(name + ".q", a.q);
    lin(name + ".k", a.k);
    lin(name + ".v", a.v);
    lin(name + ".o", a.o);
  };
  fn("embed.class", class_embedding_);
  fn("embed.scalar_mask", scalar_mask_);
  fn("embed.special", special_embedding_);
  fn("embed.attr", attr_embedding_);
  fn("embed.object", object_embedding_);
  fn("embed.position", position_embedding_);
  for (std::size_t i = 0; i < conv_w_.size(); ++i) {
    fn("boundary.conv" + std::to_string(i) + ".w", conv_w_[i]);
    fn("boundary.conv" + std::to_string(i) + ".b", conv_b_[i]);
  }
  lin("boundary.proj", boundary_proj_);
  for (std::size_t l = 0; l < encoder_.size(); ++l) {
    const std::string p = "encoder." + std::to_string(l);
    norm(p + ".norm1", encoder_[l].norm1);
    attn(p + ".self", encoder_[l].self_attn);
    norm(p + ".norm2", encoder_[l].norm2);
    lin(p + ".ff1", encoder_[l].ff1);
    lin(p + ".ff2", encoder_[l].ff2);
  }
  norm("encoder.norm", encoder_norm_);
  for (std::size_t l = 0; l < decoder_.size(); ++l) {
    const std::string p = "decoder." + std::to_string(l);
    norm(p + ".norm1", decoder_[l].norm1);
    attn(p + ".self", decoder_[l].self_attn);
    norm(p + ".norm2", decoder_[l].norm2);
    attn(p + ".cross", decoder_[l].cross_attn);
    norm(p + ".norm3", decoder_[l].norm3);
    lin(p + ".ff1", decoder_[l].ff1);
    lin(p + ".ff2", decoder_[l].ff2);
  }
  norm("decoder.norm", decoder_norm_);
  lin("head.class", class_out_);
  lin("head.mix1", mix1_);
  lin("head.mix2", mix2_);
  lin("head.mix3", mix3_);
}

std::vector<std::pair<std::string, Tensor>> Model::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  const_cast<Model*>(this)->visit_params([&](const std::string& n, Tensor& t) { out.emplace_back(n, t); });
  return out;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (auto& [n, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

void Model::zero_grad() {
  for (auto t : parameters()) t.zero_grad();
}

Model Model::clone() const {
  Model m(config_, 0);
  auto src = named_parameters();
  std::size_t i = 0;
  m.visit_params([&](const std::string&, Tensor& t) {
    auto v = src[i++].second.values();
    std::copy(v.begin(), v.end(), t.mutable_values().begin());
  });
  return m;
}

Tensor Model::gamma(const TokenValue& token) const {
  const std::size_t d = config_.d_model, n = config_.num_classes;
  switch (token.kind) {
    case TokenKind::Scalar: {
      std::vector<double> row(d);
      for (std::size_t l = 0; l < config_.sinusoid_levels(); ++l) {
        const double arg = std::ldexp(std::numbers::pi * token.scalar, static_cast<int>(l));
        row[2 * l] = std::sin(arg);
        row[2 * l + 1] = std::cos(arg);
      }
      return Tensor::from({1, d}, std::move(row));
    }
    case TokenKind::Class: {
      if (token.cls >= n) throw std::invalid_argument("gamma: class id out of range");
      const std::size_t idx[] = {token.cls};
      return gather_rows(class_embedding_, idx);
    }
    case TokenKind::Mask: {
      // Outside a sequence the slot kind is unknown; this is the class MASK row.
      const std::size_t idx[] = {n};
      return gather_rows(class_embedding_, idx);
    }
    case TokenKind::Sos:
    case TokenKind::Eos: {
      const std::size_t idx[] = {token.kind == TokenKind::Sos ? std::size_t{0} : std::size_t{1}};
      return gather_rows(special_embedding_, idx);
    }
  }
  throw std::logic_error("gamma: unknown token kind");
}

Tensor Model::vocab_table() const {
  Tensor zero = Tensor::zeros({1, config_.d_model});
  return concat_rows({class_embedding_, scalar_mask_, special_embedding_, zero});
}

namespace {

// Row indices into vocab_table() and the constant sinusoid part for a token run.
struct ValueRows {
  std::vector<std::size_t> vocab;
  std::vector<double> sinusoid;
};

void append_values(ValueRows& out, const TokenSequence& seq, std::size_t count, const ModelConfig& cfg) {
  const std::size_t n = cfg.num_classes, d = cfg.d_model;
  const std::size_t zero_row = n + 4;
  for (std::size_t i = 0; i < count; ++i) {
    const TokenValue& tok = seq.tokens[i];
    std::size_t row = zero_row;
    const std::size_t base = out.sinusoid.size();
    out.sinusoid.resize(base + d, 0.0);
    switch (tok.kind) {
      case TokenKind::Class:
        if (tok.cls >= n) throw std::invalid_argument("embedding: class id " + std::to_string(tok.cls) + " out of range");
        row = tok.cls;
        break;
      case TokenKind::Mask: row = seq.attr[i] == kClass ? n : n + 1; break;
      case TokenKind::Sos: row = n + 2; break;
      case TokenKind::Eos: row = n + 3; break;
      case TokenKind::Scalar:
        for (std::size_t l = 0; l < cfg.sinusoid_levels(); ++l) {
          const double arg = std::ldexp(std::numbers::pi * tok.scalar, static_cast<int>(l));
          out.sinusoid[base + 2 * l] = std::sin(arg);
          out.sinusoid[base + 2 * l + 1] = std::cos(arg);
        }
        break;
    }
    out.vocab.push_back(row);
  }
}

void check_streams(const TokenSequence& seq) {
  const std::size_t n = seq.tokens.size();
  if (seq.obj.size() != n || seq.attr.size() != n || seq.pos.size() != n) {
    throw std::invalid_argument("embedding: token streams have different lengths");
  }
}

}  // namespace

Tensor Model::embed_encoder(const TokenSequence& condition) const {
  check_streams(condition);
  if (condition.size() > config_.capacity()) throw std::invalid_argument("encoder: condition exceeds capacity");
  ValueRows vals;
  append_values(vals, condition, condition.size(), config_);
  std::vector<std::size_t> attr_idx, obj_idx;
  for (std::size_t i = 0; i < condition.size(); ++i) {
    const bool special = condition.tokens[i].kind == TokenKind::Sos || condition.tokens[i].kind == TokenKind::Eos;
    if (!special && condition.obj[i] >= config_.max_objects) throw std::invalid_argument("encoder: object index out of range");
    if (!special && condition.attr[i] >= kAttrCount) throw std::invalid_argument("encoder: attribute index out of range");
    attr_idx.push_back(special ? kAttrCount : condition.attr[i]);
    obj_idx.push_back(special ? config_.max_objects : condition.obj[i]);
  }
  const std::size_t d = config_.d_model, len = condition.size();
  Tensor zero = Tensor::zeros({1, d});
  Tensor x = gather_rows(vocab_table(), vals.vocab);
  x = add(x, Tensor::from({len, d}, std::move(vals.sinusoid)));
  x = add(x, gather_rows(concat_rows({attr_embedding_, zero}), attr_idx));
  x = add(x, gather_rows(concat_rows({object_embedding_, zero}), obj_idx));
  return x;
}

Tensor Model::embed_decoder(const TokenSequence& sequence, std::size_t prefix_len) const {
  check_streams(sequence);
  if (prefix_len == 0 || prefix_len > sequence.size()) throw std::invalid_argument("decoder: bad prefix length");
  if (prefix_len > config_.capacity()) throw std::invalid_argument("decoder: prefix exceeds capacity");
  ValueRows vals;
  append_values(vals, sequence, prefix_len, config_);
  std::vector<std::size_t> pos_idx(sequence.pos.begin(), sequence.pos.begin() + static_cast<std::ptrdiff_t>(prefix_len));
  for (std::size_t p : pos_idx)
    if (p >= config_.capacity()) throw std::invalid_argument("decoder: absolute position out of range");
  const std::size_t d = config_.d_model;
  Tensor x = gather_rows(vocab_table(), vals.vocab);
  x = add(x, Tensor::from({prefix_len, d}, std::move(vals.sinusoid)));
  return add(x, gather_rows(position_embedding_, pos_idx));
}

Tensor Model::boundary_encode(const BoundaryRaster& boundary) const {
  const std::size_t side = config_.raster_side;
  if (boundary.width != side || boundary.height != side || boundary.bits.size() != side * side) {
    throw std::invalid_argument("boundary encoder: raster must be " + std::to_string(side) + "x" + std::to_string(side));
  }
  std::vector<double> px(boundary.bits.begin(), boundary.bits.end());
  Tensor x = Tensor::from({1, side, side}, std::move(px));
  for (std::size_t i = 0; i < conv_w_.size(); ++i) x = relu(conv2d(x, conv_w_[i], conv_b_[i], 2, 1));
  return boundary_proj_(global_avg_pool(x));
}

Tensor Model::attend(const AttentionLayer& layer, const Tensor& xq, const Tensor& xkv,
                     std::vector<AttentionSegment> segs, bool causal) const {
  AttentionSpec spec;
  spec.heads = config_.heads;
  spec.segments = std::move(segs);
  spec.causal = causal;
  Tensor q = layer.q(xq);
  Tensor k = layer.k(xkv);
  Tensor v = layer.v(xkv);
  return layer.o(attention(q, k, v, spec));
}

Tensor Model::encoder_stack(Tensor x, const std::vector<AttentionSegment>& segs) const {
  for (const auto& b : encoder_) {
    Tensor h = b.norm1(x);
    x = add(x, attend(b.self_attn, h, h, segs, false));
    x = add(x, b.ff2(gelu(b.ff1(b.norm2(x)))));
  }
  return encoder_norm_(x);
}

Tensor Model::decoder_stack(Tensor x, const Tensor& memory, const std::vector<AttentionSegment>& self_segs,
                            const std::vector<AttentionSegment>& cross_segs) const {
  for (const auto& b : decoder_) {
    Tensor h = b.norm1(x);
    x = add(x, attend(b.self_attn, h, h, self_segs, true));
    x = add(x, attend(b.cross_attn, b.norm2(x), memory, cross_segs, false));
    x = add(x, b.ff2(gelu(b.ff1(b.norm3(x)))));
  }
  return decoder_norm_(x);
}

EncodedBatch Model::encode_batch(std::span<const ForwardItem> items) const {
  if (items.empty()) throw std::invalid_argument("encode: empty batch");
  EncodedBatch out;
  std::vector<Tensor> parts;
  parts.reserve(2 * items.size());
  std::size_t offset = 0;
  for (const auto& it : items) {
    if (!it.boundary || !it.condition) throw std::invalid_argument("encode: item lacks boundary or condition");
    parts.push_back(boundary_encode(*it.boundary));
    parts.push_back(embed_encoder(*it.condition));
    out.row_offset.push_back(offset);
    out.row_count.push_back(1 + it.condition->size());
    offset += 1 + it.condition->size();
  }
  Tensor x = concat_rows(parts);
  out.memory = encoder_stack(std::move(x), self_segments(out.row_offset, out.row_count));
  return out;
}

DecodedBatch Model::decode_batch(std::span<const ForwardItem> items, const EncodedBatch& encoded) const {
  if (items.size() != encoded.row_offset.size()) throw std::invalid_argument("decode: batch size mismatch");
  DecodedBatch out;
  std::vector<Tensor> parts;
  std::vector<std::size_t> counts;
  std::vector<AttentionSegment> cross;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    if (!it.sequence) throw std::invalid_argument("decode: item lacks a sequence");
    parts.push_back(embed_decoder(*it.sequence, it.prefix_len));
    out.row_offset.push_back(offset);
    counts.push_back(it.prefix_len);
    cross.push_back({offset, it.prefix_len, encoded.row_offset[i], encoded.row_count[i]});
    offset += it.prefix_len;
  }
  Tensor x = concat_rows(parts);
  out.hidden = decoder_stack(std::move(x), encoded.memory, self_segments(out.row_offset, counts), cross);
  return out;
}

DecodedBatch Model::forward(std::span<const ForwardItem> items) const {
  return decode_batch(items, encode_batch(items));
}

Tensor Model::encode(const BoundaryRaster& boundary, const TokenSequence& condition) const {
  const ForwardItem item{&boundary, &condition, nullptr, 0};
  return encode_batch(std::span<const ForwardItem>(&item, 1)).memory;
}

Tensor Model::decode(const TokenSequence& sequence, std::size_t prefix_len, const Tensor& memory) const {
  const ForwardItem item{nullptr, nullptr, &sequence, prefix_len};
  EncodedBatch enc{memory, {0}, {memory.rows()}};
  return decode_batch(std::span<const ForwardItem>(&item, 1), enc).hidden;
}

Tensor Model::class_head(const Tensor& hidden_rows) const { return class_out_(hidden_rows); }

Tensor Model::mixture_head(const Tensor& hidden_rows) const {
  return mix3_(relu(mix2_(relu(mix1_(hidden_rows)))));
}

void Model::save_weights(std::ostream& out) const {
  out.write(kWeightsMagic, 8);
  put_u32(out, kCheckpointVersion);
  for (auto f : config_fields()) put_u64(out, config_.*f);
  const auto params = named_parameters();
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    put_string(out, name);
    put_u32(out, static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t dim : t.shape()) put_u64(out, dim);
    for (double v : t.values()) put_f64(out, v);
  }
  if (!out) throw std::runtime_error("checkpoint: write failed");
}

void Model::save_weights(const std::string& path) const {
  std::ostringstream os;
  save_weights(os);
  write_file_atomic(path, os.str());
}

void Model::load_weights(std::istream& in) {
  const ModelConfig cfg = read_config(in);
  if (!(cfg == config_)) throw std::runtime_error("checkpoint: config does not match the model");
  const std::uint32_t count = get_u32(in);
  auto params = named_parameters();
  if (count != params.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
  // Stage everything first so a corrupt file leaves the model untouched.
  std::vector<std::vector<double>> staged(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = get_string(in);
    if (name != params[i].first) throw std::runtime_error("checkpoint: expected parameter " + params[i].first + ", found " + name);
    const std::uint32_t ndim = get_u32(in);
    if (ndim != params[i].second.ndim()) throw std::runtime_error("checkpoint: rank mismatch for " + name);
    for (std::size_t k = 0; k < ndim; ++k) {
      if (get_u64(in) != params[i].second.dim(k)) throw std::runtime_error("checkpoint: shape mismatch for " + name);
    }
    staged[i].resize(params[i].second.numel());
    for (double& v : staged[i]) v = get_f64(in);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::copy(staged[i].begin(), staged[i].end(), params[i].second.mutable_values().begin());
  }
}

void Model::load_weights(const std::string& path) {
  std::istringstream in(read_text_file(path));
  load_weights(in);
}

ModelConfig peek_config(std::istream& in) {
  const auto start = in.tellg();
  ModelConfig cfg = read_config(in);
  in.seekg(start);
  return cfg;
}

void save_bundle(const std::string& path, const ModelBundle& bundle) {
  if (bundle.schema.size() != bundle.model.config().num_classes) {
    throw std::invalid_argument("save_bundle: class schema size differs from model config");
  }
  std::ostringstream os;
  bundle.model.save_weights(os);
  os.write(kMetaMagic, 8);
  put_u32(os, static_cast<std::uint32_t>(bundle.schema.size()));
  for (const auto& label : bundle.schema.labels) put_string(os, label);
  for (double v : bundle.normalizer.lo()) put_f64(os, v);
  for (double v : bundle.normalizer.hi()) put_f64(os, v);
  write_file_atomic(path, os.str());
}

ModelBundle load_bundle(const std::string& path) {
  std::istringstream in(read_text_file(path));
  const ModelConfig cfg = peek_config(in);
  cfg.validate();
  Model model(cfg, 0);
  model.load_weights(in);
  char magic[8];
  read_exact(in, magic, 8);
  if (std::memcmp(magic, kMetaMagic, 8) != 0) throw std::runtime_error("checkpoint: missing schema block");
  ClassSchema schema;
  const std::uint32_t n = get_u32(in);
  if (n != cfg.num_classes) throw std::runtime_error("checkpoint: schema size differs from config");
  for (std::uint32_t i = 0; i < n; ++i) schema.labels.push_back(get_string(in));
  std::array<double, kScalarChannels> lo, hi;
  for (double& v : lo) v = get_f64(in);
  for (double& v : hi) v = get_f64(in);
  return ModelBundle{std::move(model), std::move(schema), AttributeNormalizer(lo, hi)};
}

}  // namespace cofs
