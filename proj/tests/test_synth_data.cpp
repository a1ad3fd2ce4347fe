#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>

#include "test_util.hpp"

using namespace pmcm;

namespace {

CorpusSpec small_spec(std::uint64_t seed = 1) {
  CorpusSpec s;
  s.classes = 10;
  s.train_per_class = 100;
  s.test_per_class = 50;
  s.seed = seed;
  return s;
}

// Flattened token features of the chosen modalities, one row per sample.
Tensor features(const std::vector<MultimodalSample>& samples, bool image, bool text) {
  const std::size_t wi = image ? samples[0].image.size() : 0, wt = text ? samples[0].text.size() : 0;
  Tensor x = Tensor::matrix(samples.size(), wi + wt);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto row = x.row(i);
    if (image) std::copy(samples[i].image.values().begin(), samples[i].image.values().end(), row.begin());
    if (text) std::copy(samples[i].text.values().begin(), samples[i].text.values().end(), row.begin() + static_cast<std::ptrdiff_t>(wi));
  }
  return x;
}

// Multinomial logistic regression probe trained full-batch; returns test accuracy.
double probe_accuracy(const Corpus& c, bool image, bool text) {
  const Tensor xtr = features(c.train, image, text), xte = features(c.test, image, text);
  std::vector<std::size_t> ytr;
  for (const auto& s : c.train) ytr.push_back(s.label);
  Rng rng(0);
  Tensor w = Tensor::randn({xtr.cols(), c.spec.classes}, rng, 0.01), b({c.spec.classes});
  AdamWState st;
  AdamWConfig oc;
  oc.lr = 0.05;
  oc.weight_decay = 0.0;
  for (int step = 0; step < 300; ++step) {
    Graph g;
    Var wv = g.parameter(w), bv = g.parameter(b);
    g.backward(cross_entropy(add_row(matmul(g.constant(xtr), wv), bv), ytr));
    std::vector<Tensor*> ps = {&w, &b};
    std::vector<Tensor> gs = {g.grad(wv), g.grad(bv)};
    adamw_step(ps, gs, st, oc);
  }
  Graph g(false);
  const Tensor logits = g.value(add_row(matmul(g.constant(xte), g.constant(w)), g.constant(b)));
  std::size_t hit = 0;
  for (std::size_t i = 0; i < c.test.size(); ++i) {
    const auto r = logits.row(i);
    hit += static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin()) == c.test[i].label;
  }
  return static_cast<double>(hit) / static_cast<double>(c.test.size());
}

std::vector<MultimodalSample> pool_of(std::size_t classes, std::size_t per_class) {
  std::vector<MultimodalSample> pool;
  for (std::size_t j = 0; j < classes; ++j)
    for (std::size_t i = 0; i < per_class; ++i) {
      MultimodalSample s;
      s.id = pool.size();
      s.label = j;
      s.image = Tensor::matrix(1, 1, static_cast<double>(s.id));
      s.text = Tensor::matrix(1, 1, -static_cast<double>(s.id));
      pool.push_back(std::move(s));
    }
  return pool;
}

}  // namespace

TEST(Corpus, NoiselessSamplesOfDifferentClassesAreDistinct) {
  CorpusSpec s = small_spec();
  s.noise = 0.0;
  s.train_per_class = 1;
  s.test_per_class = 0;
  const auto c = generate_corpus(s);
  ASSERT_EQ(c.train.size(), s.classes);
  for (std::size_t a = 0; a < c.train.size(); ++a)
    for (std::size_t b = a + 1; b < c.train.size(); ++b) {
      EXPECT_FALSE(c.train[a].image == c.train[b].image && c.train[a].text == c.train[b].text) << a << " vs " << b;
    }
}

TEST(Corpus, EachModalityAloneIsAmbiguousButThePairIsNot) {
  CorpusSpec s = small_spec();
  s.noise = 0.0;
  s.train_per_class = 1;
  s.test_per_class = 0;
  const auto c = generate_corpus(s).train;
  std::size_t shared_image = 0, shared_text = 0;
  for (std::size_t a = 0; a < c.size(); ++a)
    for (std::size_t b = a + 1; b < c.size(); ++b) {
      shared_image += c[a].image == c[b].image;
      shared_text += c[a].text == c[b].text;
    }
  EXPECT_EQ(shared_image, s.classes / 2);
  EXPECT_EQ(shared_text, s.classes / 2);
}

TEST(Corpus, SameSeedIsBitIdentical) {
  const auto a = generate_corpus(small_spec(3)), b = generate_corpus(small_spec(3)), d = generate_corpus(small_spec(4));
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].image, b.train[i].image);
    EXPECT_EQ(a.train[i].text, b.train[i].text);
    EXPECT_EQ(a.train[i].label, b.train[i].label);
  }
  EXPECT_FALSE(a.train[0].image == d.train[0].image);
}

TEST(Corpus, InvalidSpecsAreRejected) {
  CorpusSpec s = small_spec();
  s.classes = 1;
  EXPECT_THROW(generate_corpus(s), std::invalid_argument);
  s = small_spec();
  s.train_per_class = 0;
  EXPECT_THROW(generate_corpus(s), std::invalid_argument);
  EXPECT_THROW((nlohmann::json{{"clases", 3}}.get<CorpusSpec>()), std::invalid_argument);
}

TEST(Corpus, SingleModalityProbePlateausBelowPairedProbe) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto c = generate_corpus(small_spec(seed));
    const double paired = probe_accuracy(c, true, true);
    const double image = probe_accuracy(c, true, false);
    const double text = probe_accuracy(c, false, true);
    EXPECT_LT(image, paired) << "seed " << seed;
    EXPECT_LT(text, paired) << "seed " << seed;
  }
}

TEST(Partition, ConservesEverySample) {
  const auto pool = generate_corpus(small_spec()).train;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto clients = partition_dirichlet(pool, {.num_clients = 8, .alpha = 0.1, .rho_train = 0.0, .seed = seed});
    std::vector<std::size_t> total(10, 0), seen;
    for (const auto& c : clients) {
      const auto h = c.class_histogram(10);
      for (std::size_t j = 0; j < 10; ++j) total[j] += h[j];
      for (const auto& s : c.samples) seen.push_back(s.id);
    }
    for (std::size_t j = 0; j < 10; ++j) EXPECT_EQ(total[j], 100u);
    std::sort(seen.begin(), seen.end());
    ASSERT_EQ(seen.size(), pool.size());
    for (std::size_t i = 0; i < seen.size(); ++i) EXPECT_EQ(seen[i], pool[i].id);
  }
}

TEST(Partition, HugeAlphaIsNearlyUniform) {
  const auto pool = pool_of(10, 80);
  const auto clients = partition_dirichlet(pool, {.num_clients = 8, .alpha = 1e6, .rho_train = 0.0, .seed = 2});
  for (const auto& c : clients)
    for (std::size_t n : c.class_histogram(10)) EXPECT_NEAR(static_cast<double>(n), 10.0, 2.0);
}

TEST(Partition, SmallAlphaIsSkewed) {
  const auto pool = pool_of(10, 300);
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto clients = partition_dirichlet(pool, {.num_clients = 30, .alpha = 0.1, .rho_train = 0.0, .seed = seed});
    std::size_t skewed = 0;
    for (const auto& c : clients) {
      if (c.size() == 0) {
        ++skewed;  // an empty client is as skewed as it gets
        continue;
      }
      const auto h = c.class_histogram(10);
      const double top = static_cast<double>(*std::max_element(h.begin(), h.end())) / static_cast<double>(c.size());
      skewed += top > 3.0 * 0.1;
    }
    EXPECT_GE(static_cast<double>(skewed), 0.8 * 30) << "seed " << seed;
  }
}

TEST(Partition, DeterministicAndValidated) {
  const auto pool = pool_of(4, 20);
  const PartitionSpec spec{.num_clients = 5, .alpha = 0.5, .rho_train = 0.3, .seed = 9};
  const auto a = make_federated_data(pool, spec), b = make_federated_data(pool, spec);
  for (std::size_t n = 0; n < 5; ++n) {
    ASSERT_EQ(a[n].size(), b[n].size());
    for (std::size_t i = 0; i < a[n].size(); ++i) {
      EXPECT_EQ(a[n].samples[i].id, b[n].samples[i].id);
      EXPECT_EQ(a[n].samples[i].has_image, b[n].samples[i].has_image);
      EXPECT_EQ(a[n].samples[i].has_text, b[n].samples[i].has_text);
    }
  }
  EXPECT_THROW(partition_dirichlet({}, spec), std::invalid_argument);
  EXPECT_THROW(partition_dirichlet(pool, {.num_clients = 0}), std::invalid_argument);
  EXPECT_THROW(partition_dirichlet(pool, {.alpha = 0.0}), std::invalid_argument);
}

TEST(Partition, LargestRemainderSumsToTotal) {
  EXPECT_EQ(largest_remainder(10, {0.25, 0.25, 0.5}), (std::vector<std::size_t>{3, 2, 5}));
  Rng rng(1);
  for (int k = 0; k < 200; ++k) {
    const auto p = rng.dirichlet(7, 0.3);
    const std::size_t total = rng.below(500);
    const auto c = largest_remainder(total, p);
    std::size_t s = 0;
    for (std::size_t i = 0; i < 7; ++i) {
      s += c[i];
      EXPECT_LE(std::abs(static_cast<double>(c[i]) - static_cast<double>(total) * p[i]), 1.0);
    }
    EXPECT_EQ(s, total);
  }
}

TEST(Missingness, ZeroRateIsIdentity) {
  auto samples = generate_corpus(small_spec()).train;
  const auto before = samples;
  const auto st = inject_missingness(samples, 0.0, 3);
  EXPECT_EQ(st.complete, samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_TRUE(samples[i].complete());
    EXPECT_EQ(samples[i].image, before[i].image);
  }
}

TEST(Missingness, HalfRateMatchesBernoulliExpectation) {
  auto samples = pool_of(10, 1000);
  const auto st = inject_missingness(samples, 0.5, 4);
  const double n = static_cast<double>(samples.size());
  // Complete pairs need both keep-coins: (1 - rho)^2. Collisions never
  // produce a pair, they only reassign to a single modality.
  EXPECT_NEAR(static_cast<double>(st.complete) / n, 0.25, 0.02);
  EXPECT_NEAR(static_cast<double>(st.both_drawn) / n, 0.25, 0.02);
  EXPECT_NEAR(static_cast<double>(st.image_drop_draws) / n, 0.5, 0.02);
  EXPECT_NEAR(static_cast<double>(st.text_drop_draws) / n, 0.5, 0.02);
  // Each single-modality outcome gets rho(1 - rho) plus half the collisions.
  EXPECT_NEAR(static_cast<double>(st.image_only) / n, 0.375, 0.02);
  EXPECT_NEAR(static_cast<double>(st.text_only) / n, 0.375, 0.02);
  EXPECT_EQ(st.complete + st.image_only + st.text_only, samples.size());
}

TEST(Missingness, NoSampleIsEverEmptyAndAbsentFieldsAreCleared) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto samples = generate_corpus(small_spec()).train;
    inject_missingness(samples, 0.9, seed);
    for (const auto& s : samples) {
      EXPECT_TRUE(s.has_image || s.has_text);
      EXPECT_EQ(s.has_image, !s.image.empty());
      EXPECT_EQ(s.has_text, !s.text.empty());
    }
  }
  std::vector<MultimodalSample> none;
  EXPECT_THROW(inject_missingness(none, 1.0, 1), std::invalid_argument);
  EXPECT_THROW(inject_missingness(none, -0.1, 1), std::invalid_argument);
}

TEST(ClientDataset, IndexSetsAgreeWithFlags) {
  const auto clients = make_federated_data(generate_corpus(small_spec()).train,
                                           {.num_clients = 6, .alpha = 0.3, .rho_train = 0.4, .seed = 5});
  for (const auto& c : clients) {
    std::size_t image_only = 0, text_only = 0;
    for (const auto& s : c.samples) {
      image_only += s.has_image && !s.has_text;
      text_only += s.has_text && !s.has_image;
    }
    EXPECT_EQ(c.image_count(), c.pair_count() + image_only);
    EXPECT_EQ(c.text_count(), c.pair_count() + text_only);
    for (std::size_t i : c.pairs()) EXPECT_TRUE(c.samples[i].complete());
    for (std::size_t i : c.image_bearing()) EXPECT_TRUE(c.samples[i].has_image);
    for (std::size_t i : c.text_bearing()) EXPECT_TRUE(c.samples[i].has_text);
  }
}

TEST(CorpusFile, JsonLinesRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "pmcm_test_corpus.jsonl";
  auto samples = generate_corpus(small_spec()).test;
  inject_missingness(samples, 0.4, 2);
  std::vector<CorpusRecord> records;
  for (std::size_t i = 0; i < samples.size(); ++i)
    records.push_back({samples[i], "test", i % 3 == 0 ? std::optional<std::size_t>(i % 5) : std::nullopt});
  write_corpus_jsonl(path, records);
  const auto back = read_corpus_jsonl(path);
  ASSERT_EQ(back.size(), records.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].sample.id, samples[i].id);
    EXPECT_EQ(back[i].sample.label, samples[i].label);
    EXPECT_EQ(back[i].sample.has_image, samples[i].has_image);
    EXPECT_EQ(back[i].sample.has_text, samples[i].has_text);
    EXPECT_EQ(back[i].sample.image, samples[i].image);  // %.17g-exact through JSON
    EXPECT_EQ(back[i].sample.text, samples[i].text);
    EXPECT_EQ(back[i].split, "test");
    EXPECT_EQ(back[i].client, records[i].client);
  }
  std::filesystem::remove(path);
}

TEST(CorpusFile, InconsistentRecordsAreRejected) {
  EXPECT_THROW(sample_from_json(nlohmann::json::parse(
                   R"({"id":0,"label":1,"has_image":false,"has_text":false,"image":[],"text":[]})")),
               std::invalid_argument);
  EXPECT_THROW(sample_from_json(nlohmann::json::parse(
                   R"({"id":0,"label":1,"has_image":true,"has_text":true,"image":[],"text":[[1.0]]})")),
               std::invalid_argument);
  const auto path = std::filesystem::temp_directory_path() / "pmcm_test_bad.jsonl";
  bytes::write_text(path, "{\"id\": 0\n");
  EXPECT_THROW(read_corpus_jsonl(path), std::runtime_error);
  std::filesystem::remove(path);
}
