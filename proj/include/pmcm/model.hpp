#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmcm/autodiff.hpp"
#include "pmcm/rng.hpp"
#include "pmcm/serialize.hpp"
#include "pmcm/tensor.hpp"

namespace pmcm {

// Sizes of the multiway encoder, fusion layer and task head. Token counts
// include the CLS position.
struct MultiwayConfig {
  std::size_t dim = 16;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t image_tokens = 5;
  std::size_t text_tokens = 5;
  std::size_t num_classes = 10;
  std::size_t raw_dim = 8;
  std::size_t ffn_hidden = 64;

  void validate() const {
    if (dim == 0 || heads == 0 || dim % heads != 0) throw std::invalid_argument("model: dim must be divisible by heads");
    if (layers < 1) throw std::invalid_argument("model: layers must be >= 1");
    if (image_tokens < 2 || text_tokens < 2) throw std::invalid_argument("model: token counts must be >= 2 (CLS + content)");
    if (num_classes < 2) throw std::invalid_argument("model: need at least two classes");
    if (raw_dim == 0 || ffn_hidden == 0) throw std::invalid_argument("model: raw_dim and ffn_hidden must be positive");
  }

  friend bool operator==(const MultiwayConfig&, const MultiwayConfig&) = default;
};

inline void to_json(nlohmann::json& j, const MultiwayConfig& c) {
  j = {{"dim", c.dim},         {"layers", c.layers},         {"heads", c.heads},
       {"image_tokens", c.image_tokens}, {"text_tokens", c.text_tokens}, {"num_classes", c.num_classes},
       {"raw_dim", c.raw_dim}, {"ffn_hidden", c.ffn_hidden}};
}

inline void from_json(const nlohmann::json& j, MultiwayConfig& c) {
  static const char* known[] = {"dim", "layers", "heads", "image_tokens", "text_tokens", "num_classes", "raw_dim", "ffn_hidden"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw std::invalid_argument("model config: unknown key '" + key + "'");
    }
  }
  c.dim = j.value("dim", c.dim);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.image_tokens = j.value("image_tokens", c.image_tokens);
  c.text_tokens = j.value("text_tokens", c.text_tokens);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.raw_dim = j.value("raw_dim", c.raw_dim);
  c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
}

template <class T>
struct LinearT {
  T weight;  // in x out
  T bias;    // out
};

template <class T>
struct NormT {
  T gain;
  T bias;
};

template <class T>
struct ExpertT {
  NormT<T> norm;
  LinearT<T> up;
  LinearT<T> down;
};

template <class T>
struct BlockT {
  NormT<T> attn_norm;
  LinearT<T> query;
  LinearT<T> key;
  LinearT<T> value;
  LinearT<T> proj;
  ExpertT<T> image_ffn;
  ExpertT<T> text_ffn;
};

// Encoder E (embeddings + multiway blocks), fusion F and head G. Instantiated
// with Tensor for storage and with Var for a forward pass on a Graph.
template <class T>
struct ParamsT {
  LinearT<T> image_embed;
  LinearT<T> text_embed;
  T image_cls;  // 1 x d
  T text_cls;   // 1 x d
  T image_pos;  // N_i x d
  T text_pos;   // N_t x d
  std::vector<BlockT<T>> blocks;
  NormT<T> fuse_image_norm;
  NormT<T> fuse_text_norm;
  LinearT<T> fuse;
  LinearT<T> head_up;
  NormT<T> head_norm;
  LinearT<T> head_out;
};

using ModelParams = ParamsT<Tensor>;
using ModelVars = ParamsT<Var>;

namespace detail {

template <class L, class F>
void visit_linear(const std::string& prefix, L& l, F& f) {
  f(prefix + ".weight", l.weight);
  f(prefix + ".bias", l.bias);
}
template <class N, class F>
void visit_norm(const std::string& prefix, N& n, F& f) {
  f(prefix + ".gain", n.gain);
  f(prefix + ".bias", n.bias);
}
template <class E, class F>
void visit_expert(const std::string& prefix, E& e, F& f) {
  visit_norm(prefix + ".norm", e.norm, f);
  visit_linear(prefix + ".up", e.up, f);
  visit_linear(prefix + ".down", e.down, f);
}

}  // namespace detail

// Calls f(name, leaf) for every parameter in a fixed order. P may be const.
template <class P, class F>
void visit_params(P& p, F&& f) {
  detail::visit_linear("image_embed", p.image_embed, f);
  detail::visit_linear("text_embed", p.text_embed, f);
  f(std::string("image_cls"), p.image_cls);
  f(std::string("text_cls"), p.text_cls);
  f(std::string("image_pos"), p.image_pos);
  f(std::string("text_pos"), p.text_pos);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    auto& b = p.blocks[l];
    const std::string pre = "blocks." + std::to_string(l);
    detail::visit_norm(pre + ".attn_norm", b.attn_norm, f);
    detail::visit_linear(pre + ".query", b.query, f);
    detail::visit_linear(pre + ".key", b.key, f);
    detail::visit_linear(pre + ".value", b.value, f);
    detail::visit_linear(pre + ".proj", b.proj, f);
    detail::visit_expert(pre + ".image_ffn", b.image_ffn, f);
    detail::visit_expert(pre + ".text_ffn", b.text_ffn, f);
  }
  detail::visit_norm("fuse_image_norm", p.fuse_image_norm, f);
  detail::visit_norm("fuse_text_norm", p.fuse_text_norm, f);
  detail::visit_linear("fuse", p.fuse, f);
  detail::visit_linear("head_up", p.head_up, f);
  detail::visit_norm("head_norm", p.head_norm, f);
  detail::visit_linear("head_out", p.head_out, f);
}

template <class T>
std::vector<T*> param_leaves(ParamsT<T>& p) {
  std::vector<T*> out;
  visit_params(p, [&](const std::string&, T& leaf) { out.push_back(&leaf); });
  return out;
}
template <class T>
std::vector<const T*> param_leaves(const ParamsT<T>& p) {
  std::vector<const T*> out;
  visit_params(p, [&](const std::string&, const T& leaf) { out.push_back(&leaf); });
  return out;
}

inline std::size_t param_count(const ModelParams& p) {
  std::size_t n = 0;
  visit_params(p, [&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

// Closed-form parameter count for a config.
inline std::size_t expected_param_count(const MultiwayConfig& c) {
  const std::size_t d = c.dim, f = c.ffn_hidden;
  const std::size_t embed = 2 * (c.raw_dim * d + d) + 2 * d + (c.image_tokens + c.text_tokens) * d;
  const std::size_t expert = 2 * d + (d * f + f) + (f * d + d);
  const std::size_t block = 2 * d + 4 * (d * d + d) + 2 * expert;
  const std::size_t fusion = 2 * (2 * d) + (2 * d * d + d);
  const std::size_t head = (d * 2 * d + 2 * d) + 2 * (2 * d) + (2 * d * c.num_classes + c.num_classes);
  return embed + c.layers * block + fusion + head;
}

inline std::vector<TensorEntry> param_entries(const ModelParams& p) {
  std::vector<TensorEntry> out;
  visit_params(p, [&](const std::string& name, const Tensor& t) { out.push_back({name, t.shape()}); });
  return out;
}

inline std::vector<double> flatten(const ModelParams& p) {
  std::vector<double> flat;
  flat.reserve(param_count(p));
  visit_params(p, [&](const std::string&, const Tensor& t) { flat.insert(flat.end(), t.values().begin(), t.values().end()); });
  return flat;
}

// Writes `flat` back into the leaves of `p` (shapes are taken from p).
inline void unflatten_into(ModelParams& p, std::span<const double> flat) {
  if (flat.size() != param_count(p)) throw ShapeError("unflatten: length does not match model");
  std::size_t at = 0;
  visit_params(p, [&](const std::string&, Tensor& t) {
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(at), flat.begin() + static_cast<std::ptrdiff_t>(at + t.size()),
              t.values().begin());
    at += t.size();
  });
}

namespace detail {

inline LinearT<Tensor> init_linear(std::size_t in, std::size_t out, Rng& rng) {
  return {Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in))), Tensor({out})};
}
inline NormT<Tensor> init_norm(std::size_t n) { return {Tensor({n}, 1.0), Tensor({n})}; }

}  // namespace detail

inline ModelParams init_params(const MultiwayConfig& c, Rng& rng) {
  c.validate();
  const std::size_t d = c.dim;
  ModelParams p;
  p.image_embed = detail::init_linear(c.raw_dim, d, rng);
  p.text_embed = detail::init_linear(c.raw_dim, d, rng);
  p.image_cls = Tensor::randn({1, d}, rng, 0.02);
  p.text_cls = Tensor::randn({1, d}, rng, 0.02);
  p.image_pos = Tensor::randn({c.image_tokens, d}, rng, 0.02);
  p.text_pos = Tensor::randn({c.text_tokens, d}, rng, 0.02);
  for (std::size_t l = 0; l < c.layers; ++l) {
    BlockT<Tensor> b;
    b.attn_norm = detail::init_norm(d);
    b.query = detail::init_linear(d, d, rng);
    b.key = detail::init_linear(d, d, rng);
    b.value = detail::init_linear(d, d, rng);
    b.proj = detail::init_linear(d, d, rng);
    b.image_ffn = {detail::init_norm(d), detail::init_linear(d, c.ffn_hidden, rng), detail::init_linear(c.ffn_hidden, d, rng)};
    b.text_ffn = {detail::init_norm(d), detail::init_linear(d, c.ffn_hidden, rng), detail::init_linear(c.ffn_hidden, d, rng)};
    p.blocks.push_back(std::move(b));
  }
  p.fuse_image_norm = detail::init_norm(d);
  p.fuse_text_norm = detail::init_norm(d);
  p.fuse = detail::init_linear(2 * d, d, rng);
  p.head_up = detail::init_linear(d, 2 * d, rng);
  p.head_norm = detail::init_norm(2 * d);
  p.head_out = detail::init_linear(2 * d, c.num_classes, rng);
  return p;
}

// Registers every parameter of `p` as a leaf of `g`.
inline ModelVars bind_params(Graph& g, const ModelParams& p) {
  ModelVars v;
  v.blocks.resize(p.blocks.size());
  auto src = param_leaves(p);
  auto dst = param_leaves(v);
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = g.parameter(*src[i]);
  return v;
}

// Gradients collected after g.backward(), in the same tree layout as the model.
inline ModelParams collect_grads(const Graph& g, const ModelVars& v, const ModelParams& like) {
  ModelParams out = like;
  auto src = param_leaves(v);
  auto dst = param_leaves(out);
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = g.grad(*src[i]);
  return out;
}

inline Var linear(Var x, const LinearT<Var>& l) { return add_row(matmul(x, l.weight), l.bias); }
inline Var norm(Var x, const NormT<Var>& n) { return layer_norm(x, n.gain, n.bias); }

inline Var expert_ffn(Var x, const ExpertT<Var>& e) { return linear(gelu(linear(norm(x, e.norm), e.up)), e.down); }

struct EncodeOptions {
  // Test hook: paired mode with attention restricted to each modality's own
  // tokens. Routing is otherwise unchanged.
  bool block_cross_modal = false;
};

// Output of one encoder pass over a batch of `batch` samples in one mode.
struct EncodedBatch {
  Var tokens;     // (batch * seq_len) x d
  Var image_cls;  // batch x d; unset when no image was encoded
  Var text_cls;   // batch x d; unset when no text was encoded
  std::size_t batch = 0;
  std::size_t seq_len = 0;
};

// Encodes a batch. `image` is (batch*(N_i-1)) x raw_dim (content tokens,
// sample-major), `text` likewise. Passing both selects the paired mode,
// passing one selects that modality's unimodal mode.
inline EncodedBatch encode_batch(Graph& g, const ModelVars& p, const MultiwayConfig& c, const Tensor* image,
                                 const Tensor* text, std::size_t batch, EncodeOptions opts = {}) {
  if (!image && !text) throw std::invalid_argument("encode: at least one modality must be present");
  if (batch == 0) throw std::invalid_argument("encode: empty batch");
  const std::size_t ni = c.image_tokens, nt = c.text_tokens;
  auto check = [&](const Tensor* t, std::size_t n, const char* what) {
    if (t && (t->rank() != 2 || t->rows() != batch * (n - 1) || t->cols() != c.raw_dim)) {
      throw ShapeError(std::string("encode: ") + what + " tokens have shape " + shape_str(t->shape()) + ", expected [" +
                       std::to_string(batch * (n - 1)) + "x" + std::to_string(c.raw_dim) + "]");
    }
  };
  check(image, ni, "image");
  check(text, nt, "text");

  const bool paired = image && text;
  const std::size_t seq = (image ? ni : 0) + (text ? nt : 0);

  // Source rows: [image_cls, image content..., text_cls, text content...]
  std::vector<Var> parts;
  std::vector<Var> pos_parts;
  std::size_t img_cls_row = 0, img_content_row = 0, txt_cls_row = 0, txt_content_row = 0, cursor = 0;
  if (image) {
    img_cls_row = cursor;
    parts.push_back(p.image_cls);
    img_content_row = cursor + 1;
    parts.push_back(linear(g.constant(*image), p.image_embed));
    cursor += 1 + batch * (ni - 1);
    pos_parts.push_back(p.image_pos);
  }
  if (text) {
    txt_cls_row = cursor;
    parts.push_back(p.text_cls);
    txt_content_row = cursor + 1;
    parts.push_back(linear(g.constant(*text), p.text_embed));
    cursor += 1 + batch * (nt - 1);
    pos_parts.push_back(p.text_pos);
  }

  std::vector<std::size_t> token_index(batch * seq);
  std::vector<std::size_t> pos_index(batch * seq);
  std::vector<std::size_t> image_rows, text_rows;
  std::vector<int> segments(seq);
  for (std::size_t s = 0; s < batch; ++s) {
    std::size_t at = 0;
    if (image) {
      for (std::size_t t = 0; t < ni; ++t, ++at) {
        const std::size_t row = s * seq + at;
        token_index[row] = t == 0 ? img_cls_row : img_content_row + s * (ni - 1) + (t - 1);
        pos_index[row] = t;
        image_rows.push_back(row);
        segments[at] = 0;
      }
    }
    if (text) {
      const std::size_t pos_base = image ? ni : 0;
      for (std::size_t t = 0; t < nt; ++t, ++at) {
        const std::size_t row = s * seq + at;
        token_index[row] = t == 0 ? txt_cls_row : txt_content_row + s * (nt - 1) + (t - 1);
        pos_index[row] = pos_base + t;
        text_rows.push_back(row);
        segments[at] = 1;
      }
    }
  }

  Var x = gather_rows(concat_rows(parts), token_index);
  Var pos = pos_parts.size() == 1 ? pos_parts.front() : concat_rows(pos_parts);
  x = add(x, gather_rows(pos, pos_index));

  std::vector<std::size_t> inverse;
  if (paired) {
    // Rows of concat(image_rows, text_rows) back to sequence order.
    inverse.resize(batch * seq);
    for (std::size_t i = 0; i < image_rows.size(); ++i) inverse[image_rows[i]] = i;
    for (std::size_t i = 0; i < text_rows.size(); ++i) inverse[text_rows[i]] = image_rows.size() + i;
  }

  std::vector<int> attn_segments;
  if (paired && opts.block_cross_modal) attn_segments = segments;

  for (const auto& b : p.blocks) {
    Var h = norm(x, b.attn_norm);
    Var a = multihead_attention(linear(h, b.query), linear(h, b.key), linear(h, b.value), batch, seq, c.heads, attn_segments);
    x = add(x, linear(a, b.proj));
    if (paired) {
      Var xi = gather_rows(x, image_rows);
      Var xt = gather_rows(x, text_rows);
      Var zi = add(xi, expert_ffn(xi, b.image_ffn));
      Var zt = add(xt, expert_ffn(xt, b.text_ffn));
      x = gather_rows(concat_rows({zi, zt}), inverse);
    } else {
      x = add(x, expert_ffn(x, image ? b.image_ffn : b.text_ffn));
    }
  }

  EncodedBatch out;
  out.tokens = x;
  out.batch = batch;
  out.seq_len = seq;
  if (image) {
    std::vector<std::size_t> rows(batch);
    for (std::size_t s = 0; s < batch; ++s) rows[s] = s * seq;
    out.image_cls = gather_rows(x, rows);
  }
  if (text) {
    std::vector<std::size_t> rows(batch);
    for (std::size_t s = 0; s < batch; ++s) rows[s] = s * seq + (image ? ni : 0);
    out.text_cls = gather_rows(x, rows);
  }
  return out;
}

// F: LN(h_i) || LN(h_t) -> linear(2d -> d) -> GELU.
inline Var fuse(const ModelVars& p, Var image_cls, Var text_cls) {
  return gelu(linear(concat_cols(norm(image_cls, p.fuse_image_norm), norm(text_cls, p.fuse_text_norm)), p.fuse));
}

// G: linear(d -> 2d) -> LN -> GELU -> linear(2d -> C).
inline Var head(const ModelVars& p, Var fused) {
  return linear(gelu(norm(linear(fused, p.head_up), p.head_norm)), p.head_out);
}

// Eval-mode encoder output for a single sample.
struct EncoderOutput {
  Tensor tokens;                    // m x d
  std::optional<Tensor> image_cls;  // d
  std::optional<Tensor> text_cls;   // d
};

inline Tensor row_vector(const Tensor& m, std::size_t r) {
  return Tensor::vector(std::vector<double>(m.row(r).begin(), m.row(r).end()));
}

inline Tensor as_row(const Tensor& v) { return Tensor({1, v.size()}, v.values()); }

inline EncoderOutput encode(const ModelParams& params, const MultiwayConfig& c, const Tensor* image, const Tensor* text,
                            EncodeOptions opts = {}) {
  Graph g(false);
  ModelVars v = bind_params(g, params);
  EncodedBatch eb = encode_batch(g, v, c, image, text, 1, opts);
  EncoderOutput out;
  out.tokens = g.value(eb.tokens);
  if (eb.image_cls) out.image_cls = row_vector(g.value(eb.image_cls), 0);
  if (eb.text_cls) out.text_cls = row_vector(g.value(eb.text_cls), 0);
  return out;
}

inline Tensor fuse(const ModelParams& params, const Tensor& image_cls, const Tensor& text_cls) {
  if (image_cls.size() != params.fuse_image_norm.gain.size() || text_cls.size() != params.fuse_text_norm.gain.size()) {
    throw ShapeError("fuse: representation length does not match model dim");
  }
  Graph g(false);
  ModelVars v = bind_params(g, params);
  return row_vector(g.value(fuse(v, g.constant(as_row(image_cls)), g.constant(as_row(text_cls)))), 0);
}

inline Tensor head(const ModelParams& params, const Tensor& fused) {
  if (fused.size() != params.head_up.weight.rows()) throw ShapeError("head: representation length does not match model dim");
  Graph g(false);
  ModelVars v = bind_params(g, params);
  return row_vector(g.value(head(v, g.constant(as_row(fused)))), 0);
}

// --- checkpoints: <stem>.json manifest + <stem>.bin little-endian f64 blob ---

inline void save_checkpoint(const std::filesystem::path& stem, const ModelParams& p, const MultiwayConfig& c) {
  nlohmann::json manifest = manifest_json(param_entries(p));
  manifest["model"] = c;
  auto blob = encode_blob(flatten(p));
  bytes::write_text(std::filesystem::path(stem.string() + ".json"), manifest.dump(2) + "\n");
  bytes::write_file(std::filesystem::path(stem.string() + ".bin"), blob);
}

struct Checkpoint {
  MultiwayConfig config;
  ModelParams params;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& stem) {
  std::filesystem::path json_path = stem, bin_path = stem;
  if (stem.extension() == ".json" || stem.extension() == ".bin") {
    json_path.replace_extension(".json");
    bin_path.replace_extension(".bin");
  } else {
    json_path = stem.string() + ".json";
    bin_path = stem.string() + ".bin";
  }
  const auto manifest = nlohmann::json::parse(bytes::read_text(json_path));
  Checkpoint ck;
  ck.config = manifest.at("model").get<MultiwayConfig>();
  ck.config.validate();
  Rng rng(0);
  ck.params = init_params(ck.config, rng);
  const auto entries = parse_manifest(manifest);
  const auto expected = param_entries(ck.params);
  if (entries.size() != expected.size()) throw FormatError("checkpoint: tensor count does not match model config");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].name != expected[i].name || entries[i].shape != expected[i].shape) {
      throw FormatError("checkpoint: tensor '" + entries[i].name + "' does not match model layout");
    }
  }
  const auto flat = decode_blob(bytes::read_file(bin_path));
  if (flat.size() != param_count(ck.params)) throw FormatError("checkpoint: blob length does not match manifest");
  unflatten_into(ck.params, flat);
  return ck;
}

}  // namespace pmcm
