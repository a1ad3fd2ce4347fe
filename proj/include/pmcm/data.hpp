#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmcm/rng.hpp"
#include "pmcm/tensor.hpp"

namespace pmcm {

// One record: content tokens for each modality ((N-1) x raw_dim, empty when
// the modality is absent), the class label and presence flags.
struct MultimodalSample {
  std::size_t id = 0;
  std::size_t label = 0;
  Tensor image;
  Tensor text;
  bool has_image = true;
  bool has_text = true;

  bool complete() const noexcept { return has_image && has_text; }
};

// Synthetic two-modality corpus. Each class owns a latent vector whose first
// half is only visible to the image map and second half only to the text map.
// With `shared_codes`, class j's image half is code (j mod g) and its text
// half is code (j / 2), g = max(2, ceil(C/2)), so every single-modality view
// is shared by two classes while each (image, text) pair stays unique.
struct CorpusSpec {
  std::size_t classes = 10;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  std::size_t raw_dim = 8;
  std::size_t latent_dim = 8;
  std::size_t image_content_tokens = 4;
  std::size_t text_content_tokens = 4;
  double noise = 1.0;
  bool shared_codes = true;
  std::uint64_t seed = 1;

  void validate() const {
    if (classes < 2) throw std::invalid_argument("corpus: need at least two classes");
    if (train_per_class < 1) throw std::invalid_argument("corpus: train_per_class must be >= 1");
    if (latent_dim < 2 || latent_dim % 2 != 0) throw std::invalid_argument("corpus: latent_dim must be even and >= 2");
    if (raw_dim == 0 || image_content_tokens == 0 || text_content_tokens == 0) {
      throw std::invalid_argument("corpus: token sizes must be positive");
    }
    if (!(noise >= 0.0)) throw std::invalid_argument("corpus: noise must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const CorpusSpec& s) {
  j = {{"classes", s.classes},
       {"train_per_class", s.train_per_class},
       {"test_per_class", s.test_per_class},
       {"raw_dim", s.raw_dim},
       {"latent_dim", s.latent_dim},
       {"image_content_tokens", s.image_content_tokens},
       {"text_content_tokens", s.text_content_tokens},
       {"noise", s.noise},
       {"shared_codes", s.shared_codes},
       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, CorpusSpec& s) {
  static const char* known[] = {"classes", "train_per_class", "test_per_class", "raw_dim", "latent_dim",
                                "image_content_tokens", "text_content_tokens", "noise", "shared_codes", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw std::invalid_argument("data config: unknown key '" + key + "'");
    }
  }
  s.classes = j.value("classes", s.classes);
  s.train_per_class = j.value("train_per_class", s.train_per_class);
  s.test_per_class = j.value("test_per_class", s.test_per_class);
  s.raw_dim = j.value("raw_dim", s.raw_dim);
  s.latent_dim = j.value("latent_dim", s.latent_dim);
  s.image_content_tokens = j.value("image_content_tokens", s.image_content_tokens);
  s.text_content_tokens = j.value("text_content_tokens", s.text_content_tokens);
  s.noise = j.value("noise", s.noise);
  s.shared_codes = j.value("shared_codes", s.shared_codes);
  s.seed = j.value("seed", s.seed);
}

struct Corpus {
  CorpusSpec spec;
  std::vector<MultimodalSample> train;
  std::vector<MultimodalSample> test;
};

namespace detail {

struct CorpusGenerator {
  const CorpusSpec& spec;
  std::vector<std::vector<double>> latents;  // per class
  std::vector<Tensor> image_maps;            // per token: raw_dim x latent_dim
  std::vector<Tensor> text_maps;

  explicit CorpusGenerator(const CorpusSpec& s) : spec(s) {
    Rng rng(derive_seed(s.seed, "corpus-structure"));
    const std::size_t half = s.latent_dim / 2;
    latents.assign(s.classes, std::vector<double>(s.latent_dim));
    if (s.shared_codes) {
      const std::size_t groups = std::max<std::size_t>(2, (s.classes + 1) / 2);
      const std::size_t text_groups = (s.classes + 1) / 2;
      std::vector<std::vector<double>> image_codes(groups, std::vector<double>(half));
      std::vector<std::vector<double>> text_codes(text_groups, std::vector<double>(half));
      for (auto& c : image_codes)
        for (auto& v : c) v = rng.normal();
      for (auto& c : text_codes)
        for (auto& v : c) v = rng.normal();
      for (std::size_t j = 0; j < s.classes; ++j) {
        std::copy(image_codes[j % groups].begin(), image_codes[j % groups].end(), latents[j].begin());
        std::copy(text_codes[j / 2].begin(), text_codes[j / 2].end(), latents[j].begin() + static_cast<std::ptrdiff_t>(half));
      }
    } else {
      for (auto& l : latents)
        for (auto& v : l) v = rng.normal();
    }
    const double sd = 1.0 / std::sqrt(static_cast<double>(half));
    auto make_map = [&](bool image_side) {
      Tensor a = Tensor::randn({s.raw_dim, s.latent_dim}, rng, sd);
      for (std::size_t r = 0; r < s.raw_dim; ++r) {
        for (std::size_t c = 0; c < s.latent_dim; ++c) {
          const bool first_half = c < half;
          if (image_side != first_half) a.at(r, c) = 0.0;
        }
      }
      return a;
    };
    for (std::size_t k = 0; k < s.image_content_tokens; ++k) image_maps.push_back(make_map(true));
    for (std::size_t k = 0; k < s.text_content_tokens; ++k) text_maps.push_back(make_map(false));
  }

  Tensor tokens(const std::vector<Tensor>& maps, const std::vector<double>& latent, Rng& rng) const {
    Tensor out = Tensor::matrix(maps.size(), spec.raw_dim);
    for (std::size_t k = 0; k < maps.size(); ++k) {
      for (std::size_t r = 0; r < spec.raw_dim; ++r) {
        double v = 0.0;
        for (std::size_t c = 0; c < spec.latent_dim; ++c) v += maps[k].at(r, c) * latent[c];
        out.at(k, r) = v + spec.noise * rng.normal();
      }
    }
    return out;
  }

  std::vector<MultimodalSample> draw(std::size_t per_class, std::string_view stream, std::size_t first_id) const {
    Rng rng(derive_seed(spec.seed, stream));
    std::vector<MultimodalSample> out;
    out.reserve(per_class * spec.classes);
    for (std::size_t j = 0; j < spec.classes; ++j) {
      for (std::size_t i = 0; i < per_class; ++i) {
        MultimodalSample s;
        s.id = first_id + out.size();
        s.label = j;
        s.image = tokens(image_maps, latents[j], rng);
        s.text = tokens(text_maps, latents[j], rng);
        out.push_back(std::move(s));
      }
    }
    return out;
  }
};

}  // namespace detail

inline Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  detail::CorpusGenerator gen(spec);
  Corpus c;
  c.spec = spec;
  c.train = gen.draw(spec.train_per_class, "corpus-train", 0);
  c.test = gen.draw(spec.test_per_class, "corpus-test", c.train.size());
  return c;
}

// Partitioning and missingness knobs.
struct PartitionSpec {
  std::size_t num_clients = 8;
  double alpha = 0.1;
  double rho_train = 0.5;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_clients < 1) throw std::invalid_argument("partition: num_clients must be >= 1");
    if (!(alpha > 0.0)) throw std::invalid_argument("partition: alpha must be > 0");
    if (!(rho_train >= 0.0 && rho_train < 1.0)) throw std::invalid_argument("partition: rho must be in [0, 1)");
  }
};

// Samples held by one client with the derived modality index sets.
struct ClientDataset {
  std::size_t client = 0;
  std::vector<MultimodalSample> samples;

  std::vector<std::size_t> pairs() const { return indices([](const MultimodalSample& s) { return s.complete(); }); }
  std::vector<std::size_t> image_bearing() const { return indices([](const MultimodalSample& s) { return s.has_image; }); }
  std::vector<std::size_t> text_bearing() const { return indices([](const MultimodalSample& s) { return s.has_text; }); }

  std::size_t pair_count() const { return pairs().size(); }
  std::size_t image_count() const { return image_bearing().size(); }
  std::size_t text_count() const { return text_bearing().size(); }
  std::size_t size() const noexcept { return samples.size(); }

  std::vector<std::size_t> class_histogram(std::size_t classes) const {
    std::vector<std::size_t> h(classes, 0);
    for (const auto& s : samples) ++h.at(s.label);
    return h;
  }

 private:
  template <class P>
  std::vector<std::size_t> indices(P pred) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (pred(samples[i])) out.push_back(i);
    return out;
  }
};

// Largest-remainder rounding of `total * p` to integers summing to total.
// Ties on the remainder go to the lower index.
inline std::vector<std::size_t> largest_remainder(std::size_t total, const std::vector<double>& p) {
  std::vector<std::size_t> counts(p.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double exact = static_cast<double>(total) * p[i];
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[i];
    rem.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++counts[rem[k % rem.size()].second];
  return counts;
}

// Each class is split over clients by its own Dirichlet(alpha) draw.
inline std::vector<ClientDataset> partition_dirichlet(const std::vector<MultimodalSample>& pool, const PartitionSpec& spec) {
  spec.validate();
  if (pool.empty()) throw std::invalid_argument("partition: empty pool");
  std::size_t classes = 0;
  for (const auto& s : pool) classes = std::max(classes, s.label + 1);
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < pool.size(); ++i) by_class[pool[i].label].push_back(i);

  Rng rng(derive_seed(spec.seed, "partition"));
  std::vector<ClientDataset> clients(spec.num_clients);
  for (std::size_t n = 0; n < spec.num_clients; ++n) clients[n].client = n;
  for (std::size_t j = 0; j < classes; ++j) {
    auto& members = by_class[j];
    if (members.empty()) continue;
    rng.shuffle(members);
    const auto props = rng.dirichlet(spec.num_clients, spec.alpha);
    const auto counts = largest_remainder(members.size(), props);
    std::size_t at = 0;
    for (std::size_t n = 0; n < spec.num_clients; ++n) {
      for (std::size_t k = 0; k < counts[n]; ++k) clients[n].samples.push_back(pool[members[at++]]);
    }
  }
  for (auto& c : clients) {
    std::sort(c.samples.begin(), c.samples.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  }
  return clients;
}

struct MissingnessStats {
  std::size_t samples = 0;
  std::size_t image_drop_draws = 0;  // Bernoulli(rho) successes before reassignment
  std::size_t text_drop_draws = 0;
  std::size_t both_drawn = 0;        // collisions resolved by the fair coin
  std::size_t complete = 0;
  std::size_t image_only = 0;
  std::size_t text_only = 0;

  MissingnessStats& operator+=(const MissingnessStats& o) {
    samples += o.samples;
    image_drop_draws += o.image_drop_draws;
    text_drop_draws += o.text_drop_draws;
    both_drawn += o.both_drawn;
    complete += o.complete;
    image_only += o.image_only;
    text_only += o.text_only;
    return *this;
  }
};

// Drops each modality independently with probability rho. When both coins
// drop, a fair coin decides which single modality survives.
inline MissingnessStats inject_missingness(std::vector<MultimodalSample>& samples, double rho, std::uint64_t seed) {
  if (!(rho >= 0.0 && rho < 1.0)) throw std::invalid_argument("missingness: rho must be in [0, 1)");
  Rng rng(derive_seed(seed, "missingness"));
  MissingnessStats st;
  for (auto& s : samples) {
    ++st.samples;
    bool drop_image = rng.bernoulli(rho);
    bool drop_text = rng.bernoulli(rho);
    const bool keep_image_on_collision = rng.bernoulli(0.5);
    st.image_drop_draws += drop_image;
    st.text_drop_draws += drop_text;
    if (drop_image && drop_text) {
      ++st.both_drawn;
      if (keep_image_on_collision) {
        drop_image = false;
      } else {
        drop_text = false;
      }
    }
    if (drop_image && s.has_image) {
      s.has_image = false;
      s.image = Tensor();
    }
    if (drop_text && s.has_text) {
      s.has_text = false;
      s.text = Tensor();
    }
    if (s.complete()) {
      ++st.complete;
    } else if (s.has_image) {
      ++st.image_only;
    } else {
      ++st.text_only;
    }
  }
  return st;
}

// Partition, then per-client missingness from independent seeded streams.
inline std::vector<ClientDataset> make_federated_data(const std::vector<MultimodalSample>& pool, const PartitionSpec& spec,
                                                      MissingnessStats* stats = nullptr) {
  auto clients = partition_dirichlet(pool, spec);
  for (auto& c : clients) {
    auto st = inject_missingness(c.samples, spec.rho_train, derive_seed(spec.seed, "train-missing", {c.client}));
    if (stats) *stats += st;
  }
  return clients;
}

// --- line-delimited JSON corpus files ---

inline nlohmann::json tensor_rows_json(const Tensor& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t r = 0; r < t.rows() && !t.empty(); ++r) rows.push_back(std::vector<double>(t.row(r).begin(), t.row(r).end()));
  return rows;
}

inline Tensor tensor_from_rows_json(const nlohmann::json& j) {
  if (j.empty()) return Tensor();
  return Tensor::from_rows(j.get<std::vector<std::vector<double>>>());
}

struct CorpusRecord {
  MultimodalSample sample;
  std::string split;            // "train" or "test"
  std::optional<std::size_t> client;
};

inline nlohmann::json sample_json(const MultimodalSample& s, const std::string& split, std::optional<std::size_t> client) {
  nlohmann::json j = {{"id", s.id},
                      {"label", s.label},
                      {"split", split},
                      {"has_image", s.has_image},
                      {"has_text", s.has_text},
                      {"image", tensor_rows_json(s.image)},
                      {"text", tensor_rows_json(s.text)}};
  if (client) j["client"] = *client;
  return j;
}

inline CorpusRecord sample_from_json(const nlohmann::json& j) {
  CorpusRecord r;
  r.sample.id = j.at("id").get<std::size_t>();
  r.sample.label = j.at("label").get<std::size_t>();
  r.sample.has_image = j.at("has_image").get<bool>();
  r.sample.has_text = j.at("has_text").get<bool>();
  r.sample.image = tensor_from_rows_json(j.at("image"));
  r.sample.text = tensor_from_rows_json(j.at("text"));
  r.split = j.value("split", "train");
  if (j.contains("client")) r.client = j.at("client").get<std::size_t>();
  if (!r.sample.has_image && !r.sample.has_text) throw std::invalid_argument("corpus: sample with no modality");
  if (r.sample.has_image == r.sample.image.empty() || r.sample.has_text == r.sample.text.empty()) {
    throw std::invalid_argument("corpus: presence flag disagrees with token field for sample " + std::to_string(r.sample.id));
  }
  return r;
}

inline void write_corpus_jsonl(const std::filesystem::path& path, const std::vector<CorpusRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : records) out << sample_json(r.sample, r.split, r.client).dump() << '\n';
}

inline std::vector<CorpusRecord> read_corpus_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<CorpusRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(sample_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace pmcm
