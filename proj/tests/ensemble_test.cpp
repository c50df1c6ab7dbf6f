#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

#include "encvit/bytes.hpp"
#include "encvit/ensemble.hpp"
#include "encvit/error.hpp"
#include "stats.hpp"

namespace encvit {
namespace {

VitConfig tiny() {
  VitConfig c;
  c.image = {3, 8, 8};
  c.patch = 4;
  c.embed_dim = 8;
  c.depth = 1;
  c.heads = 2;
  c.num_classes = 4;
  return c;
}

EnsembleModel make_ensemble(std::size_t n, SelectionPolicy policy, std::uint64_t seed = 1,
                            bool zero = false) {
  const VitConfig c = tiny();
  KeySet keys = generate_keyset(n, 4, c.image, 3);
  std::vector<SubModel> subs;
  for (std::size_t i = 0; i < n; ++i) {
    auto p = init_params<float>(c, 100 + i);
    if (zero) std::fill(p.values().begin(), p.values().end(), 0.0f);
    // Scale up so sub-models disagree noticeably.
    for (float& v : p.values()) v *= 20.0f;
    subs.push_back({std::make_shared<const VitParams<float>>(std::move(p)), keys.keys[i].id(), 0.5});
  }
  return EnsembleModel(std::move(keys), std::move(subs), policy, seed);
}

Tensor<float> image(std::uint64_t seed) {
  Tensor<float> x({3, 8, 8});
  Rng rng(seed);
  for (float& v : x.data()) v = static_cast<float>(rng.uniform());
  return x;
}

void expect_simplex(const Tensor<float>& p) {
  for (std::size_t i = 0; i < p.extent(0); ++i) {
    double s = 0;
    for (float v : p.row(i)) {
      EXPECT_GE(v, 0.0f);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Policy, Bounds) {
  EXPECT_EQ(SelectionPolicy::simple().resolve(2).lo, 2u);
  EXPECT_EQ(SelectionPolicy::random().resolve(5).lo, 3u);
  EXPECT_EQ(SelectionPolicy::random().resolve(5).hi, 5u);
  EXPECT_THROW(SelectionPolicy::random(2).resolve(5), InvalidInput);
  EXPECT_THROW(SelectionPolicy::random(4, 3).resolve(5), InvalidInput);
  EXPECT_THROW(SelectionPolicy::random(3, 6).resolve(5), InvalidInput);
  EXPECT_THROW(SelectionPolicy::random().resolve(2), InvalidInput);
  EXPECT_EQ(parse_policy_mode("random"), PolicyMode::random);
  EXPECT_THROW(parse_policy_mode("vote"), InvalidInput);
}

TEST(Classify, ArgmaxWithLowestIndexTies) {
  EXPECT_EQ(classify(std::vector<float>{0.1f, 0.7f, 0.2f}), 1);
  EXPECT_EQ(classify(std::vector<float>{0.25f, 0.25f, 0.25f, 0.25f}), 0);
  EXPECT_EQ(classify(std::vector<float>{0.2f, 0.4f, 0.4f}), 1);
  EXPECT_EQ(classify(std::vector<float>{3.0f, 21.0f, 6.0f}), 1);
}

TEST(Submodel, MatchesManualPipeline) {
  EnsembleModel ens = make_ensemble(3, SelectionPolicy::simple());
  const Tensor<float> x = image(1);
  for (std::size_t i = 0; i < 3; ++i) {
    const Tensor<float> manual = softmax(forward(
        *ens.submodel(i).params, encrypt_image(x, ens.keyset().keys[i], 4)));
    EXPECT_EQ(ens.predict_submodel(i, x), manual);
    EXPECT_EQ(ens.predict_submodel(i, x), ens.predict_submodel(i, x));
    expect_simplex(manual);
  }
  EXPECT_THROW(ens.predict_submodel(3, x), InvalidInput);
}

TEST(Submodel, ZeroWeightsGiveUniform) {
  EnsembleModel ens = make_ensemble(1, SelectionPolicy::simple(), 1, true);
  const Tensor<float> p = ens.predict_submodel(0, image(2));
  for (float v : p.data()) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(Simple, IsMeanOfAllAndDeterministic) {
  EnsembleModel ens = make_ensemble(3, SelectionPolicy::simple());
  const Tensor<float> x = image(3);
  const Tensor<float> p = ens.predict_simple(x);
  expect_simplex(p);
  for (std::size_t c = 0; c < 4; ++c) {
    double m = 0;
    for (std::size_t i = 0; i < 3; ++i) m += ens.predict_submodel(i, x)[c];
    EXPECT_NEAR(p[c], m / 3, 1e-7);
  }
  EXPECT_EQ(ens.predict_simple(x), p);
  EXPECT_EQ(ens.predict(x), p);
}

TEST(Simple, SingleModelEqualsSubmodel) {
  EnsembleModel ens = make_ensemble(1, SelectionPolicy::simple());
  const Tensor<float> x = image(4);
  EXPECT_EQ(ens.predict_simple(x), ens.predict_submodel(0, x));
}

TEST(Random, DegeneratePolicyEqualsSimple) {
  EnsembleModel simple = make_ensemble(4, SelectionPolicy::simple());
  EnsembleModel full = simple.with_policy(SelectionPolicy::random(4, 4), 9);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Tensor<float> x = image(10 + s);
    EXPECT_EQ(full.predict_random(x), simple.predict_simple(x));
  }
}

TEST(Random, AveragesTheRecordedSubset) {
  EnsembleModel ens = make_ensemble(5, SelectionPolicy::random());
  const Tensor<float> x = image(5);
  for (int q = 0; q < 20; ++q) {
    std::vector<PredictionRecord> rec;
    const Tensor<float> p = ens.predict_random(x, &rec);
    ASSERT_EQ(rec.size(), 1u);
    const auto& s = rec[0].subset;
    EXPECT_GE(s.size(), 3u);
    EXPECT_LE(s.size(), 5u);
    EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
    EXPECT_EQ(std::set<std::size_t>(s.begin(), s.end()).size(), s.size());
    expect_simplex(p);
    for (std::size_t c = 0; c < 4; ++c) {
      double m = 0;
      for (std::size_t i : s) m += ens.predict_submodel(i, x)[c];
      EXPECT_NEAR(p[c], m / static_cast<double>(s.size()), 1e-7);
    }
  }
}

TEST(Random, BatchMatchesPerImageQueries) {
  EnsembleModel a = make_ensemble(5, SelectionPolicy::random(), 42);
  EnsembleModel b = make_ensemble(5, SelectionPolicy::random(), 42);
  const Tensor<float> batch = stack<float>(std::vector<Tensor<float>>{image(1), image(2), image(3)});
  const Tensor<float> p = a.predict_random(batch);
  for (std::size_t i = 0; i < 3; ++i) {
    const Tensor<float> q = b.predict_random(batch.slice(i));
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(p.row(i)[c], q[c]);
  }
}

TEST(Random, OutputsVaryAcrossQueries) {
  EnsembleModel ens = make_ensemble(4, SelectionPolicy::random());
  const Tensor<float> x = image(6);
  std::set<std::vector<float>> seen;
  for (int q = 0; q < 1000; ++q) {
    const Tensor<float> p = ens.predict_random(x);
    seen.insert(std::vector<float>(p.data().begin(), p.data().end()));
  }
  EXPECT_GE(seen.size(), 2u);
}

TEST(Random, IdenticalSubmodelsGiveSameOutput) {
  const VitConfig c = tiny();
  KeySet keys = generate_keyset(4, 4, c.image, 3);
  for (auto& k : keys.keys) k = compose(identity_key(48), keys.keys[0], k.id());
  auto p = std::make_shared<const VitParams<float>>(init_params<float>(c, 1));
  std::vector<SubModel> subs;
  for (const auto& k : keys.keys) subs.push_back({p, k.id(), 0});
  EnsembleModel ens(keys, subs, SelectionPolicy::random(), 5);
  const Tensor<float> x = image(7);
  const Tensor<float> first = ens.predict_submodel(0, x);
  for (int q = 0; q < 50; ++q) {
    const Tensor<float> r = ens.predict_random(x);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(r[i], first[i], 1e-7);
  }
}

TEST(Random, SeedDeterminism) {
  EnsembleModel a = make_ensemble(5, SelectionPolicy::random(), 77);
  EnsembleModel b = make_ensemble(5, SelectionPolicy::random(), 77);
  for (int q = 0; q < 100; ++q) ASSERT_EQ(a.select_subset(), b.select_subset());
  EnsembleModel c = a.split(3), d = b.split(3);
  for (int q = 0; q < 20; ++q) ASSERT_EQ(c.predict(image(q)), d.predict(image(q)));
}

TEST(Random, SplitStreamsDiffer) {
  EnsembleModel a = make_ensemble(5, SelectionPolicy::random(), 77);
  EnsembleModel s1 = a.split(1), s2 = a.split(2);
  int same = 0;
  for (int q = 0; q < 50; ++q) same += s1.select_subset() == s2.select_subset();
  EXPECT_LT(same, 50);
}

TEST(Random, SubsetSizeIsUniform) {
  for (std::size_t n : {4u, 5u}) {
    EnsembleModel ens = make_ensemble(n, SelectionPolicy::random(), 123);
    std::vector<std::size_t> sizes(n - 2, 0);
    std::map<std::vector<std::size_t>, std::size_t> by_subset;
    for (int q = 0; q < 10000; ++q) {
      const auto s = ens.select_subset();
      ++sizes.at(s.size() - 3);
      if (s.size() == 3) ++by_subset[s];
    }
    EXPECT_GT(testing::chi_square_uniform_p(sizes), 0.01) << "N=" << n;
    // Within a size, each subset is equally likely.
    std::vector<std::size_t> counts;
    for (const auto& [_, c] : by_subset) counts.push_back(c);
    EXPECT_EQ(counts.size(), n == 4 ? 4u : 10u);
    EXPECT_GT(testing::chi_square_uniform_p(counts), 0.01) << "N=" << n;
  }
}

TEST(Random, SelectSubsetNeedsRandomMode) {
  EnsembleModel ens = make_ensemble(3, SelectionPolicy::simple());
  EXPECT_THROW(ens.select_subset(), InvalidInput);
}

TEST(Construction, RejectsMismatches) {
  const VitConfig c = tiny();
  KeySet keys = generate_keyset(3, 4, c.image, 3);
  auto p = std::make_shared<const VitParams<float>>(init_params<float>(c, 1));
  std::vector<SubModel> two{{p, "k0", 0}, {p, "k1", 0}};
  EXPECT_THROW(EnsembleModel(keys, two, SelectionPolicy::simple(), 1), InvalidInput);
  std::vector<SubModel> swapped{{p, "k1", 0}, {p, "k0", 0}, {p, "k2", 0}};
  EXPECT_THROW(EnsembleModel(keys, swapped, SelectionPolicy::simple(), 1), InvalidInput);
  KeySet wide = generate_keyset(3, 4, {3, 16, 16}, 3);
  std::vector<SubModel> ok{{p, "k0", 0}, {p, "k1", 0}, {p, "k2", 0}};
  EXPECT_THROW(EnsembleModel(wide, ok, SelectionPolicy::simple(), 1), InvalidInput);
}

TEST(Manifest, RoundTripAndHashCheck) {
  const auto dir = std::filesystem::temp_directory_path() / "encvit_manifest_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  EnsembleModel ens = make_ensemble(3, SelectionPolicy::random(), 5);
  write_file_atomic(dir / "keys.json", serialize_keyset(ens.keyset()));
  EnsembleManifest m;
  m.keyset = "keys.json";
  m.policy = SelectionPolicy::random();
  m.seed = 5;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto bytes = encode_weights(*ens.submodel(i).params);
    const std::string name = "m" + std::to_string(i) + ".tvit";
    write_file_atomic(dir / name, bytes);
    m.entries.push_back({ens.keyset().keys[i].id(), name, sha256_hex(bytes), 0.5});
  }
  const std::string text = serialize_manifest(m);
  EXPECT_EQ(serialize_manifest(parse_manifest(text)), text);
  write_file_atomic(dir / "manifest.json", text);

  EnsembleModel loaded = load_ensemble(dir / "manifest.json");
  const Tensor<float> x = image(8);
  EXPECT_EQ(loaded.predict_random(x), ens.predict_random(x));

  auto bytes = read_file(dir / "m1.tvit");
  bytes.back() ^= 1;
  write_file_atomic(dir / "m1.tvit", bytes);
  EXPECT_THROW(load_ensemble(dir / "manifest.json"), InvalidInput);
  std::filesystem::remove_all(dir);
}

TEST(Manifest, ParseErrors) {
  EXPECT_THROW(parse_manifest("{"), ParseError);
  EXPECT_THROW(parse_manifest(R"({"version":2})"), ParseError);
  EXPECT_THROW(parse_manifest(
                   R"({"version":1,"N":2,"policy":"simple","s_min":0,"s_max":0,"seed":"1","keyset":"k","submodels":[]})"),
               ParseError);
}

}  // namespace
}  // namespace encvit
