#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pmcm/autodiff.hpp"
#include "pmcm/data.hpp"
#include "pmcm/model.hpp"
#include "pmcm/serialize.hpp"

namespace pmcm {

enum class Family : std::size_t { Image = 0, Text = 1, Fused = 2 };

inline constexpr std::array<Family, 3> kFamilies = {Family::Image, Family::Text, Family::Fused};

inline const char* family_name(Family f) {
  switch (f) {
    case Family::Image: return "image";
    case Family::Text: return "text";
    case Family::Fused: return "fused";
  }
  return "?";
}

inline Family opposite(Family f) {
  if (f == Family::Fused) throw std::invalid_argument("fused family has no opposite");
  return f == Family::Image ? Family::Text : Family::Image;
}

// --- batched eval-mode representations ---

struct SampleRepresentation {
  std::optional<Tensor> image;  // h_i
  std::optional<Tensor> text;   // h_t
  std::optional<Tensor> fused;  // h_f, only when both CLS tokens came from one paired pass
};

enum class EncodeMode {
  Natural,    // pairs in paired mode, single-modality samples in their own mode
  ImageOnly,  // only the image of each image-bearing sample, unimodal mode
  TextOnly,
};

inline Tensor stack_tokens(const std::vector<MultimodalSample>& samples, std::span<const std::size_t> idx, bool image) {
  const Tensor& first = image ? samples[idx.front()].image : samples[idx.front()].text;
  const std::size_t per = first.rows(), w = first.cols();
  Tensor out = Tensor::matrix(idx.size() * per, w);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const Tensor& t = image ? samples[idx[k]].image : samples[idx[k]].text;
    if (t.rows() != per || t.cols() != w) throw ShapeError("stack_tokens: inconsistent token shapes");
    std::copy(t.values().begin(), t.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(k * per * w));
  }
  return out;
}

// Runs the encoder (and fusion for pairs) on `samples` in chunks of `chunk`.
inline std::vector<SampleRepresentation> encode_samples(const ModelParams& params, const MultiwayConfig& cfg,
                                                        const std::vector<MultimodalSample>& samples,
                                                        EncodeMode mode = EncodeMode::Natural, std::size_t chunk = 128) {
  std::vector<SampleRepresentation> out(samples.size());
  std::vector<std::size_t> pairs, image_only, text_only;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    switch (mode) {
      case EncodeMode::Natural:
        if (s.complete()) pairs.push_back(i);
        else if (s.has_image) image_only.push_back(i);
        else if (s.has_text) text_only.push_back(i);
        break;
      case EncodeMode::ImageOnly:
        if (s.has_image) image_only.push_back(i);
        break;
      case EncodeMode::TextOnly:
        if (s.has_text) text_only.push_back(i);
        break;
    }
  }
  auto run = [&](const std::vector<std::size_t>& group, bool use_image, bool use_text) {
    for (std::size_t start = 0; start < group.size(); start += chunk) {
      const std::size_t n = std::min(chunk, group.size() - start);
      std::span<const std::size_t> idx(group.data() + start, n);
      Graph g(false);
      ModelVars v = bind_params(g, params);
      Tensor img, txt;
      if (use_image) img = stack_tokens(samples, idx, true);
      if (use_text) txt = stack_tokens(samples, idx, false);
      EncodedBatch eb = encode_batch(g, v, cfg, use_image ? &img : nullptr, use_text ? &txt : nullptr, n);
      Var fused;
      if (use_image && use_text) fused = fuse(v, eb.image_cls, eb.text_cls);
      for (std::size_t k = 0; k < n; ++k) {
        auto& r = out[idx[k]];
        if (use_image) r.image = row_vector(g.value(eb.image_cls), k);
        if (use_text) r.text = row_vector(g.value(eb.text_cls), k);
        if (fused) r.fused = row_vector(g.value(fused), k);
      }
    }
  };
  run(pairs, true, true);
  run(image_only, true, false);
  run(text_only, false, true);
  return out;
}

// --- local prototypes ---

// Class centroids of one family. A class with count 0 is absent; its row in
// `centroids` is unused and centroid() reports nullopt for it.
struct PrototypeFamily {
  Tensor centroids;  // C x d
  std::vector<std::size_t> counts;

  bool present(std::size_t j) const { return counts.at(j) > 0; }
  std::optional<std::span<const double>> centroid(std::size_t j) const {
    if (!present(j)) return std::nullopt;
    return centroids.row(j);
  }
};

struct LocalPrototypes {
  std::size_t client = 0;
  std::size_t classes = 0;
  std::size_t dim = 0;
  std::array<PrototypeFamily, 3> families;
  std::size_t image_total = 0;  // |I_n|
  std::size_t text_total = 0;   // |T_n|
  std::size_t pair_total = 0;   // |M_n|
  std::size_t sample_total = 0;  // |D_n|

  const PrototypeFamily& family(Family f) const { return families[static_cast<std::size_t>(f)]; }
  PrototypeFamily& family(Family f) { return families[static_cast<std::size_t>(f)]; }

  std::size_t modality_total(Family f) const {
    switch (f) {
      case Family::Image: return image_total;
      case Family::Text: return text_total;
      case Family::Fused: return pair_total;
    }
    return 0;
  }
};

// Centroids from already-computed representations (shared by compute_local
// and the offline tools).
inline LocalPrototypes centroids_from_representations(const std::vector<MultimodalSample>& samples,
                                                      const std::vector<SampleRepresentation>& reps, std::size_t classes,
                                                      std::size_t dim, std::size_t client = 0) {
  LocalPrototypes lp;
  lp.client = client;
  lp.classes = classes;
  lp.dim = dim;
  for (auto& f : lp.families) {
    f.centroids = Tensor::matrix(classes, dim);
    f.counts.assign(classes, 0);
  }
  auto accumulate = [&](Family fam, std::size_t label, const Tensor& h) {
    if (h.size() != dim) throw ShapeError("prototypes: representation dim mismatch");
    auto& f = lp.family(fam);
    auto row = f.centroids.row(label);
    for (std::size_t c = 0; c < dim; ++c) row[c] += h[c];
    ++f.counts[label];
  };
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.label >= classes) throw std::out_of_range("prototypes: label outside class space");
    lp.sample_total += 1;
    lp.image_total += s.has_image;
    lp.text_total += s.has_text;
    lp.pair_total += s.complete();
    if (reps[i].image) accumulate(Family::Image, s.label, *reps[i].image);
    if (reps[i].text) accumulate(Family::Text, s.label, *reps[i].text);
    if (reps[i].fused) accumulate(Family::Fused, s.label, *reps[i].fused);
  }
  for (auto& f : lp.families) {
    for (std::size_t j = 0; j < classes; ++j) {
      if (f.counts[j] == 0) continue;
      const double inv = 1.0 / static_cast<double>(f.counts[j]);
      for (double& v : f.centroids.row(j)) v *= inv;
    }
  }
  return lp;
}

// Image/text centroids over image-/text-bearing samples, fused centroids
// over complete pairs only. Eval mode.
inline LocalPrototypes compute_local(const ModelParams& params, const MultiwayConfig& cfg, const ClientDataset& data) {
  auto reps = encode_samples(params, cfg, data.samples, EncodeMode::Natural);
  return centroids_from_representations(data.samples, reps, cfg.num_classes, cfg.dim, data.client);
}

// --- global library ---

// Global prototypes P_I, P_T, P_F. A class is present in a family once some
// round aggregated a contribution for it; before that its vector is the zero
// initialization.
struct PrototypeLibrary {
  std::size_t classes = 0;
  std::size_t dim = 0;
  std::uint64_t version = 0;
  std::array<Tensor, 3> vectors;  // C x d each
  std::array<std::vector<bool>, 3> present;

  const Tensor& family(Family f) const { return vectors[static_cast<std::size_t>(f)]; }
  Tensor& family(Family f) { return vectors[static_cast<std::size_t>(f)]; }
  std::span<const double> get(Family f, std::size_t j) const { return family(f).row(j); }
  bool is_present(Family f, std::size_t j) const { return present[static_cast<std::size_t>(f)].at(j); }

  friend bool operator==(const PrototypeLibrary&, const PrototypeLibrary&) = default;
};

inline PrototypeLibrary initialize_library(std::size_t classes, std::size_t dim) {
  if (classes < 1 || dim < 1) throw std::invalid_argument("library: classes and dim must be >= 1");
  PrototypeLibrary lib;
  lib.classes = classes;
  lib.dim = dim;
  for (auto& v : lib.vectors) v = Tensor::matrix(classes, dim);
  for (auto& p : lib.present) p.assign(classes, false);
  return lib;
}

enum class PrototypeWeighting {
  Normalized,  // weights renormalized over clients holding the class
  Literal,     // |X_n| / |D| with |D| the participants' total sample count
};

// Weighted average of the present local prototypes per class and family.
// Classes nobody holds keep `previous`'s vector. Version = previous + 1.
inline PrototypeLibrary aggregate_prototypes(std::span<const LocalPrototypes> locals, const PrototypeLibrary& previous,
                                             PrototypeWeighting weighting = PrototypeWeighting::Normalized) {
  PrototypeLibrary lib = previous;
  lib.version = previous.version + 1;
  std::size_t total_samples = 0;
  for (const auto& lp : locals) {
    if (lp.dim != previous.dim || lp.classes != previous.classes) {
      throw ShapeError("aggregate: local prototypes dimension/class space differs from library");
    }
    total_samples += lp.sample_total;
  }
  for (Family fam : kFamilies) {
    const std::size_t fi = static_cast<std::size_t>(fam);
    for (std::size_t j = 0; j < lib.classes; ++j) {
      double weight_sum = 0.0;
      for (const auto& lp : locals)
        if (lp.family(fam).present(j)) weight_sum += static_cast<double>(lp.modality_total(fam));
      if (weight_sum <= 0.0) continue;
      const double denom = weighting == PrototypeWeighting::Normalized ? weight_sum : static_cast<double>(total_samples);
      auto dst = lib.vectors[fi].row(j);
      std::fill(dst.begin(), dst.end(), 0.0);
      for (const auto& lp : locals) {
        const auto c = lp.family(fam).centroid(j);
        if (!c) continue;
        const double w = static_cast<double>(lp.modality_total(fam)) / denom;
        for (std::size_t k = 0; k < lib.dim; ++k) dst[k] += w * (*c)[k];
      }
      lib.present[fi][j] = true;
    }
  }
  return lib;
}

// --- wire format ---
// header: "PMCMPLB1" | u32 classes | u32 dim | u64 version | u64 fnv1a(body)
// body:   3*C*d f64 (image, text, fused; class-major) | C presence bytes
inline constexpr std::size_t kLibraryHeaderBytes = 32;
inline constexpr char kLibraryMagic[8] = {'P', 'M', 'C', 'M', 'P', 'L', 'B', '1'};

inline std::size_t library_byte_size(std::size_t classes, std::size_t dim) {
  return kLibraryHeaderBytes + 3 * classes * dim * 8 + classes;
}

inline std::vector<std::uint8_t> serialize_library(const PrototypeLibrary& lib) {
  std::vector<std::uint8_t> body;
  body.reserve(3 * lib.classes * lib.dim * 8 + lib.classes);
  for (const auto& v : lib.vectors)
    for (double x : v.data()) bytes::put_f64(body, x);
  for (std::size_t j = 0; j < lib.classes; ++j) {
    std::uint8_t flags = 0;
    for (std::size_t f = 0; f < 3; ++f)
      if (lib.present[f][j]) flags |= static_cast<std::uint8_t>(1u << f);
    body.push_back(flags);
  }
  std::vector<std::uint8_t> out(kLibraryMagic, kLibraryMagic + 8);
  bytes::put_u32(out, static_cast<std::uint32_t>(lib.classes));
  bytes::put_u32(out, static_cast<std::uint32_t>(lib.dim));
  bytes::put_u64(out, lib.version);
  bytes::put_u64(out, bytes::fnv1a(body));
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

inline PrototypeLibrary deserialize_library(std::span<const std::uint8_t> raw) {
  if (raw.size() < kLibraryHeaderBytes || !std::equal(kLibraryMagic, kLibraryMagic + 8, raw.begin())) {
    throw FormatError("prototype library: bad magic or truncated header");
  }
  const std::size_t classes = bytes::get_u32(raw, 8);
  const std::size_t dim = bytes::get_u32(raw, 12);
  const std::uint64_t version = bytes::get_u64(raw, 16);
  const std::uint64_t checksum = bytes::get_u64(raw, 24);
  if (classes == 0 || dim == 0 || raw.size() != library_byte_size(classes, dim)) {
    throw FormatError("prototype library: header sizes do not match payload length");
  }
  auto body = raw.subspan(kLibraryHeaderBytes);
  if (bytes::fnv1a(body) != checksum) throw FormatError("prototype library: checksum mismatch");
  PrototypeLibrary lib = initialize_library(classes, dim);
  lib.version = version;
  std::size_t at = 0;
  for (auto& v : lib.vectors) {
    for (double& x : v.values()) {
      x = bytes::get_f64(body, at);
      at += 8;
    }
  }
  for (std::size_t j = 0; j < classes; ++j) {
    const std::uint8_t flags = body[at++];
    for (std::size_t f = 0; f < 3; ++f) lib.present[f][j] = (flags >> f) & 1u;
  }
  return lib;
}

inline void save_library(const std::filesystem::path& path, const PrototypeLibrary& lib) {
  bytes::write_file(path, serialize_library(lib));
}

inline PrototypeLibrary load_library(const std::filesystem::path& path) {
  return deserialize_library(bytes::read_file(path));
}

}  // namespace pmcm
