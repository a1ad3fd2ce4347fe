#include <gtest/gtest.h>

#include <filesystem>

#include "test_util.hpp"

using namespace pmcm;
using pmcm::testing::random_library;
using pmcm::testing::random_sample;
using pmcm::testing::tiny_model;

namespace {

// A local prototype set with every family present for every class except
// those listed in `absent`.
LocalPrototypes make_local(std::size_t client, std::size_t classes, std::size_t dim, std::size_t image_total,
                           std::size_t text_total, std::size_t pair_total, Rng& rng,
                           std::vector<std::size_t> absent = {}) {
  LocalPrototypes lp;
  lp.client = client;
  lp.classes = classes;
  lp.dim = dim;
  lp.image_total = image_total;
  lp.text_total = text_total;
  lp.pair_total = pair_total;
  lp.sample_total = image_total + text_total - pair_total;
  for (auto& f : lp.families) {
    f.centroids = Tensor::randn({classes, dim}, rng);
    f.counts.assign(classes, 1);
    for (std::size_t j : absent) f.counts[j] = 0;
  }
  return lp;
}

ClientDataset random_client(const MultiwayConfig& c, std::size_t n, Rng& rng, double rho = 0.3) {
  ClientDataset d;
  for (std::size_t i = 0; i < n; ++i) {
    const bool drop = rng.bernoulli(rho);
    const bool keep_image = rng.bernoulli(0.5);
    d.samples.push_back(random_sample(c, i, rng.below(c.num_classes), rng, !drop || keep_image, !drop || !keep_image));
  }
  return d;
}

}  // namespace

TEST(LocalPrototypes, SingletonCentroidIsTheRepresentation) {
  const MultiwayConfig c = tiny_model(1);
  Rng rng(1);
  const ModelParams p = init_params(c, rng);
  ClientDataset d;
  for (std::size_t j = 0; j < c.num_classes; ++j) d.samples.push_back(random_sample(c, j, j, rng));
  const auto lp = compute_local(p, c, d);
  for (std::size_t j = 0; j < c.num_classes; ++j) {
    const auto& s = d.samples[j];
    const auto e = encode(p, c, &s.image, &s.text);
    const Tensor hf = fuse(p, *e.image_cls, *e.text_cls);
    for (std::size_t k = 0; k < c.dim; ++k) {
      EXPECT_EQ(lp.family(Family::Image).centroids.at(j, k), e.image_cls->values()[k]);
      EXPECT_EQ(lp.family(Family::Text).centroids.at(j, k), e.text_cls->values()[k]);
      EXPECT_EQ(lp.family(Family::Fused).centroids.at(j, k), hf[k]);
    }
  }
}

TEST(LocalPrototypes, TwoIdenticalSamplesGiveThatRepresentation) {
  const MultiwayConfig c = tiny_model(1);
  Rng rng(2);
  const ModelParams p = init_params(c, rng);
  ClientDataset d;
  d.samples.push_back(random_sample(c, 0, 2, rng));
  d.samples.push_back(d.samples[0]);
  const auto lp = compute_local(p, c, d);
  const auto e = encode(p, c, &d.samples[0].image, &d.samples[0].text);
  EXPECT_EQ(lp.family(Family::Image).counts[2], 2u);
  for (std::size_t k = 0; k < c.dim; ++k) EXPECT_NEAR(lp.family(Family::Image).centroids.at(2, k), e.image_cls->values()[k], 1e-15);
}

TEST(LocalPrototypes, MatchesBruteForcePerClassMean) {
  const MultiwayConfig c = tiny_model(2);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const ModelParams p = init_params(c, rng);
    const ClientDataset d = random_client(c, 30, rng);
    const auto lp = compute_local(p, c, d);
    std::array<Tensor, 3> sums;
    std::array<std::vector<std::size_t>, 3> counts;
    for (std::size_t f = 0; f < 3; ++f) {
      sums[f] = Tensor::matrix(c.num_classes, c.dim);
      counts[f].assign(c.num_classes, 0);
    }
    auto add = [&](std::size_t f, std::size_t j, const Tensor& h) {
      for (std::size_t k = 0; k < c.dim; ++k) sums[f].at(j, k) += h[k];
      ++counts[f][j];
    };
    for (const auto& s : d.samples) {
      const auto e = encode(p, c, s.has_image ? &s.image : nullptr, s.has_text ? &s.text : nullptr);
      if (s.has_image) add(0, s.label, *e.image_cls);
      if (s.has_text) add(1, s.label, *e.text_cls);
      if (s.complete()) add(2, s.label, fuse(p, *e.image_cls, *e.text_cls));
    }
    for (Family fam : kFamilies) {
      const std::size_t f = static_cast<std::size_t>(fam);
      EXPECT_EQ(lp.family(fam).counts, counts[f]);
      for (std::size_t j = 0; j < c.num_classes; ++j) {
        EXPECT_EQ(lp.family(fam).present(j), counts[f][j] > 0);
        if (!counts[f][j]) {
          EXPECT_FALSE(lp.family(fam).centroid(j).has_value());
          continue;
        }
        for (std::size_t k = 0; k < c.dim; ++k)
          EXPECT_NEAR(lp.family(fam).centroids.at(j, k), sums[f].at(j, k) / static_cast<double>(counts[f][j]), 1e-12);
      }
    }
    EXPECT_EQ(lp.image_total, d.image_count());
    EXPECT_EQ(lp.text_total, d.text_count());
    EXPECT_EQ(lp.pair_total, d.pair_count());
  }
}

TEST(Library, InitializeIsZeroAtVersionZero) {
  const auto lib = initialize_library(7, 5);
  EXPECT_EQ(lib.version, 0u);
  for (Family f : kFamilies) {
    for (double v : lib.family(f).values()) EXPECT_EQ(v, 0.0);
    for (std::size_t j = 0; j < 7; ++j) EXPECT_FALSE(lib.is_present(f, j));
  }
  EXPECT_THROW(initialize_library(0, 4), std::invalid_argument);
  EXPECT_THROW(initialize_library(3, 0), std::invalid_argument);
}

TEST(Aggregate, SingleClientEqualsLocal) {
  Rng rng(1);
  const auto lp = make_local(0, 4, 3, 10, 8, 5, rng);
  const auto lib = aggregate_prototypes(std::span(&lp, 1), initialize_library(4, 3));
  for (Family f : kFamilies) EXPECT_EQ(lib.family(f), lp.family(f).centroids);
  EXPECT_EQ(lib.version, 1u);
}

TEST(Aggregate, EqualTotalsGiveUnweightedMean) {
  Rng rng(2);
  const std::vector<LocalPrototypes> locals = {make_local(0, 3, 4, 6, 6, 6, rng), make_local(1, 3, 4, 6, 6, 6, rng)};
  const auto lib = aggregate_prototypes(locals, initialize_library(3, 4));
  for (Family f : kFamilies)
    for (std::size_t i = 0; i < lib.family(f).size(); ++i)
      EXPECT_NEAR(lib.family(f)[i], 0.5 * (locals[0].family(f).centroids[i] + locals[1].family(f).centroids[i]), 1e-15);
}

TEST(Aggregate, MatchesExplicitWeightedMean) {
  Rng rng(3);
  const std::vector<LocalPrototypes> locals = {make_local(0, 3, 4, 10, 5, 2, rng), make_local(1, 3, 4, 20, 7, 3, rng),
                                               make_local(2, 3, 4, 30, 9, 4, rng)};
  const auto lib = aggregate_prototypes(locals, initialize_library(3, 4));
  const std::array<std::array<double, 3>, 3> totals = {{{10, 20, 30}, {5, 7, 9}, {2, 3, 4}}};
  for (Family f : kFamilies) {
    const auto& t = totals[static_cast<std::size_t>(f)];
    const double s = t[0] + t[1] + t[2];
    for (std::size_t i = 0; i < lib.family(f).size(); ++i) {
      double want = 0.0;
      for (std::size_t n = 0; n < 3; ++n) want += t[n] / s * locals[n].family(f).centroids[i];
      EXPECT_NEAR(lib.family(f)[i], want, 1e-12);
    }
  }
}

TEST(Aggregate, RenormalizesOverClientsHoldingTheClass) {
  Rng rng(4);
  const std::vector<LocalPrototypes> locals = {make_local(0, 3, 2, 10, 10, 10, rng, {1}), make_local(1, 3, 2, 30, 30, 30, rng)};
  const auto lib = aggregate_prototypes(locals, initialize_library(3, 2));
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(lib.family(Family::Image).at(1, k), locals[1].family(Family::Image).centroids.at(1, k));
    EXPECT_NEAR(lib.family(Family::Image).at(0, k),
                0.25 * locals[0].family(Family::Image).centroids.at(0, k) + 0.75 * locals[1].family(Family::Image).centroids.at(0, k), 1e-15);
  }
  // The literal weighting divides by the participants' total sample count
  // even when only one of them holds the class.
  const auto lit = aggregate_prototypes(locals, initialize_library(3, 2), PrototypeWeighting::Literal);
  for (std::size_t k = 0; k < 2; ++k)
    EXPECT_NEAR(lit.family(Family::Image).at(1, k), 30.0 / 40.0 * locals[1].family(Family::Image).centroids.at(1, k), 1e-15);
}

TEST(Aggregate, AbsentEverywhereCarriesForward) {
  Rng rng(5);
  PrototypeLibrary prev = random_library(3, 2, rng);
  prev.version = 6;
  const std::vector<LocalPrototypes> locals = {make_local(0, 3, 2, 4, 4, 4, rng, {2}), make_local(1, 3, 2, 4, 4, 4, rng, {2})};
  const auto lib = aggregate_prototypes(locals, prev);
  EXPECT_EQ(lib.version, 7u);
  for (Family f : kFamilies)
    for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(lib.family(f).at(2, k), prev.family(f).at(2, k));
  // A fresh library keeps zeros and stays absent.
  const auto fresh = aggregate_prototypes(locals, initialize_library(3, 2));
  EXPECT_FALSE(fresh.is_present(Family::Fused, 2));
  EXPECT_TRUE(fresh.is_present(Family::Fused, 0));
  for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(fresh.family(Family::Fused).at(2, k), 0.0);
}

TEST(Aggregate, IsAConvexCombination) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    std::vector<LocalPrototypes> locals;
    for (std::size_t n = 0; n < 5; ++n)
      locals.push_back(make_local(n, 4, 3, 1 + rng.below(40), 1 + rng.below(40), 1 + rng.below(40), rng, {rng.below(4)}));
    const auto lib = aggregate_prototypes(locals, initialize_library(4, 3));
    for (Family f : kFamilies)
      for (std::size_t j = 0; j < 4; ++j)
        for (std::size_t k = 0; k < 3; ++k) {
          double lo = 1e300, hi = -1e300;
          for (const auto& lp : locals)
            if (lp.family(f).present(j)) {
              lo = std::min(lo, lp.family(f).centroids.at(j, k));
              hi = std::max(hi, lp.family(f).centroids.at(j, k));
            }
          if (lo > hi) continue;
          EXPECT_GE(lib.family(f).at(j, k), lo - 1e-12);
          EXPECT_LE(lib.family(f).at(j, k), hi + 1e-12);
        }
  }
}

TEST(Aggregate, CommonScalingOfTotalsIsBitIdentical) {
  Rng rng(6);
  std::vector<LocalPrototypes> locals = {make_local(0, 3, 4, 7, 3, 2, rng), make_local(1, 3, 4, 11, 13, 5, rng),
                                         make_local(2, 3, 4, 1, 9, 1, rng, {0})};
  const auto a = aggregate_prototypes(locals, initialize_library(3, 4));
  for (auto& lp : locals) {
    lp.image_total *= 3;
    lp.text_total *= 3;
    lp.pair_total *= 3;
    lp.sample_total *= 3;
  }
  const auto b = aggregate_prototypes(locals, initialize_library(3, 4));
  EXPECT_EQ(a, b);
}

TEST(Aggregate, DimensionMismatchThrows) {
  Rng rng(7);
  const auto lp = make_local(0, 3, 4, 1, 1, 1, rng);
  EXPECT_THROW(aggregate_prototypes(std::span(&lp, 1), initialize_library(3, 5)), ShapeError);
  EXPECT_THROW(aggregate_prototypes(std::span(&lp, 1), initialize_library(2, 4)), ShapeError);
}

TEST(Aggregate, OneClientFederationEqualsPooledCentroids) {
  const MultiwayConfig c = tiny_model(1);
  Rng rng(8);
  const ModelParams p = init_params(c, rng);
  const ClientDataset d = random_client(c, 40, rng);
  const auto lp = compute_local(p, c, d);
  const auto lib = aggregate_prototypes(std::span(&lp, 1), initialize_library(c.num_classes, c.dim));
  const auto reps = encode_samples(p, c, d.samples);
  for (std::size_t j = 0; j < c.num_classes; ++j) {
    std::vector<double> pooled(c.dim, 0.0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < d.size(); ++i)
      if (d.samples[i].label == j && reps[i].fused) {
        for (std::size_t k = 0; k < c.dim; ++k) pooled[k] += (*reps[i].fused)[k];
        ++n;
      }
    EXPECT_EQ(lib.is_present(Family::Fused, j), n > 0);
    for (std::size_t k = 0; n && k < c.dim; ++k) EXPECT_NEAR(lib.family(Family::Fused).at(j, k), pooled[k] / static_cast<double>(n), 1e-12);
  }
}

TEST(LibraryFormat, RoundTripIsBitExact) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    PrototypeLibrary lib = random_library(5, 3, rng);
    lib.present[1][2] = false;
    lib.version = seed * 1000 + 1;
    EXPECT_EQ(deserialize_library(serialize_library(lib)), lib);
  }
}

TEST(LibraryFormat, ByteSizeIsPayloadPlusFixedOverhead) {
  Rng rng(1);
  const auto raw = serialize_library(random_library(10, 16, rng));
  EXPECT_EQ(3u * 10 * 16 * 8, 3840u);
  EXPECT_EQ(raw.size(), 3840u + kLibraryHeaderBytes + 10);
  EXPECT_EQ(raw.size(), library_byte_size(10, 16));
}

TEST(LibraryFormat, CorruptionIsDetected) {
  Rng rng(2);
  const auto good = serialize_library(random_library(4, 3, rng));
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_library(bad_magic), FormatError);
  auto truncated = good;
  truncated.pop_back();
  EXPECT_THROW(deserialize_library(truncated), FormatError);
  EXPECT_THROW(deserialize_library(std::span(good).first(10)), FormatError);
  auto wrong_dim = good;
  wrong_dim[12] = 9;
  EXPECT_THROW(deserialize_library(wrong_dim), FormatError);
  auto flipped = good;
  flipped[kLibraryHeaderBytes + 5] ^= 0x10;
  EXPECT_THROW(deserialize_library(flipped), FormatError);
}

TEST(LibraryFormat, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "pmcm_test_lib" / "library.bin";
  Rng rng(3);
  const auto lib = random_library(3, 2, rng);
  save_library(path, lib);
  EXPECT_EQ(load_library(path), lib);
  std::filesystem::remove_all(path.parent_path());
}
