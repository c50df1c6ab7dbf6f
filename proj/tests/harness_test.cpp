#include <gtest/gtest.h>

#include <filesystem>

#include "encvit/bytes.hpp"
#include "encvit/dataset.hpp"
#include "encvit/error.hpp"
#include "encvit/harness.hpp"

namespace encvit {
namespace {

TEST(Dataset, ShapeBalanceAndRange) {
  const DatasetSplits s = gen_synthetic_dataset(3, 200, 50);
  EXPECT_EQ(s.train.images.shape(), (Shape{200, 3, 32, 32}));
  EXPECT_EQ(s.test.images.shape(), (Shape{50, 3, 32, 32}));
  EXPECT_EQ(s.train.split, "train");
  EXPECT_EQ(s.test.split, "test");
  for (std::size_t c : s.train.class_histogram()) EXPECT_EQ(c, 20u);
  for (std::size_t c : s.test.class_histogram()) EXPECT_EQ(c, 5u);
  EXPECT_NO_THROW(s.train.validate());
  for (float v : s.train.images.data()) {
    const float q = v * 255.0f;
    ASSERT_EQ(q, std::round(q));
  }
}

TEST(Dataset, SeedDeterminism) {
  const auto a = gen_synthetic_dataset(5, 40, 10);
  const auto b = gen_synthetic_dataset(5, 40, 10);
  const auto c = gen_synthetic_dataset(6, 40, 10);
  EXPECT_EQ(encode_dataset(a.train), encode_dataset(b.train));
  EXPECT_EQ(encode_dataset(a.test), encode_dataset(b.test));
  EXPECT_NE(encode_dataset(a.train), encode_dataset(c.train));
}

TEST(Dataset, TrainAndTestDiffer) {
  const auto s = gen_synthetic_dataset(5, 10, 10);
  EXPECT_NE(s.train.images, s.test.images);
}

TEST(Dataset, HueAloneIsNotEnough) {
  // Hue separates the two families but not the five shapes within one.
  const auto s = gen_synthetic_dataset(11, 2000, 1000);
  const double acc = hue_centroid_baseline(s.train, s.test);
  EXPECT_GT(acc, 0.15);
  EXPECT_LT(acc, 0.80);
}

TEST(Dataset, RoundTripIsBitExact) {
  const auto s = gen_synthetic_dataset(9, 30, 10);
  const Dataset back = decode_dataset(encode_dataset(s.train));
  EXPECT_EQ(back.images, s.train.images);
  EXPECT_EQ(back.labels, s.train.labels);
  EXPECT_EQ(back.num_classes, 10u);
  EXPECT_EQ(back.split, "train");
  EXPECT_EQ(back.provenance, s.train.provenance);
}

TEST(Dataset, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "encvit_ds_test.dset";
  const auto s = gen_synthetic_dataset(9, 20, 10);
  save_dataset(s.test, path);
  EXPECT_EQ(load_dataset(path).images, s.test.images);
  std::filesystem::remove(path);
}

TEST(Dataset, DecodeRejectsCorruption) {
  const auto bytes = encode_dataset(gen_synthetic_dataset(9, 10, 10).train);
  std::vector<std::uint8_t> truncated(bytes.begin(), bytes.end() - 1);
  EXPECT_THROW(decode_dataset(truncated), ParseError);
  std::vector<std::uint8_t> magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_dataset(magic), ParseError);
  std::vector<std::uint8_t> label = bytes;
  label[label.size() - 2] = 10;  // first byte of the last u16 label
  label[label.size() - 1] = 0;
  EXPECT_THROW(decode_dataset(label), InvalidInput);
  EXPECT_THROW(decode_dataset(std::vector<std::uint8_t>{}), ParseError);
}

TEST(Dataset, ValidateRejectsBadContent) {
  Dataset d = gen_synthetic_dataset(1, 10, 10).train;
  d.labels[0] = 12;
  EXPECT_THROW(d.validate(), InvalidInput);
  d = gen_synthetic_dataset(1, 10, 10).train;
  d.images[3] = 1.5f;
  EXPECT_THROW(d.validate(), InvalidInput);
  EXPECT_THROW(gen_synthetic_dataset(1, 0, 10), InvalidInput);
}

TEST(Dataset, Subset) {
  const Dataset d = gen_synthetic_dataset(1, 20, 10).train;
  const Dataset s = d.subset(5, 3);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s.images.slice(0), d.images.slice(5));
  EXPECT_EQ(s.labels[2], d.labels[7]);
  EXPECT_THROW(d.subset(19, 2), InvalidInput);
}

VitConfig small_model() {
  VitConfig c;
  c.embed_dim = 16;
  c.depth = 1;
  c.heads = 2;
  return c;
}

TEST(TrainSubmodels, SeedsKeysAndDeterminism) {
  const auto s = gen_synthetic_dataset(2, 100, 30);
  const KeySet keys = generate_keyset(2, 4, {3, 32, 32}, 8);
  TrainConfig tc;
  tc.epochs = 1;
  tc.rng_seed = 12;
  const auto a = train_submodels(s.train, s.test, keys, small_model(), tc);
  const auto b = train_submodels(s.train, s.test, keys, small_model(), tc, 2);
  ASSERT_EQ(a.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a[i].key_id, keys.keys[i].id());
    EXPECT_EQ(encode_weights(*a[i].params), encode_weights(*b[i].params));
    const Tensor<float> enc = encrypt_image(s.test.images, keys.keys[i], 4);
    EXPECT_DOUBLE_EQ(a[i].clean_val_accuracy, accuracy(*a[i].params, {enc, s.test.labels}));
  }
  EXPECT_NE(encode_weights(*a[0].params), encode_weights(*a[1].params));

  // Sub-model i equals a direct training run with its derived seed.
  TrainConfig direct = tc;
  direct.rng_seed = derive_seed(tc.rng_seed, kSubmodelStream, 1);
  const Tensor<float> tr = encrypt_image(s.train.images, keys.keys[1], 4);
  const Tensor<float> va = encrypt_image(s.test.images, keys.keys[1], 4);
  const auto r = train(small_model(), {tr, s.train.labels}, direct, LabeledImages{va, s.test.labels});
  EXPECT_EQ(encode_weights(r.params), encode_weights(*a[1].params));
}

TEST(TrainSubmodels, SingleKeyPipeline) {
  const auto s = gen_synthetic_dataset(2, 50, 20);
  const KeySet keys = generate_keyset(1, 4, {3, 32, 32}, 8);
  TrainConfig tc;
  tc.epochs = 1;
  const auto subs = train_submodels(s.train, s.test, keys, small_model(), tc);
  ASSERT_EQ(subs.size(), 1u);
  EXPECT_NO_THROW(EnsembleModel(keys, subs, SelectionPolicy::simple(), 1));
}

TEST(TrainSubmodels, GeometryMismatchRejected) {
  const auto s = gen_synthetic_dataset(2, 20, 10);
  const KeySet keys = generate_keyset(1, 8, {3, 32, 32}, 8);
  EXPECT_THROW(train_submodels(s.train, s.test, keys, small_model(), TrainConfig{}), InvalidInput);
}

EvalReport sample_report() {
  EvalReport r;
  r.experiment = "x";
  r.rows = {{"baseline", 1, "plain", 0, 99.5, 0.0, 1.25, std::nullopt, 0.0},
            {"random ensemble", 4, "random(S=3..4)", 2, 98.0, 50.0, std::nullopt, 40.0, 30.0}};
  r.metadata = {{"epsilon", "8/255"}};
  r.deviations = standard_deviations();
  return r;
}

TEST(Report, CsvIsStableAndReparses) {
  const EvalReport r = sample_report();
  const std::string csv = emit_report(r, ReportFormat::csv);
  EXPECT_EQ(csv,
            "model,N,policy,leaked_keys,clean,pgd_ce,pgd_t,square,aa\n"
            "baseline,1,plain,0,99.50,0.00,1.25,,0.00\n"
            "random ensemble,4,random(S=3..4),2,98.00,50.00,,40.00,30.00\n");
  EXPECT_EQ(parse_report_csv(csv), r.rows);
  EXPECT_EQ(emit_report(r, ReportFormat::csv), csv);
  EXPECT_EQ(sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size())),
            sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size())));
}

TEST(Report, JsonCarriesMetadata) {
  const std::string j = emit_report(sample_report(), ReportFormat::json);
  EXPECT_NE(j.find("\"aa_label\": \"AA (FAB-t omitted)\""), std::string::npos);
  EXPECT_NE(j.find("\"epsilon\": \"8/255\""), std::string::npos);
  EXPECT_NE(j.find("FAB-t omitted"), std::string::npos);
  EXPECT_EQ(j, emit_report(sample_report(), ReportFormat::json));
}

TEST(Report, RejectsEmptyAndInconsistentRows) {
  EvalReport r;
  EXPECT_THROW(emit_report(r, ReportFormat::csv), InvalidInput);
  r = sample_report();
  r.rows[1].aa = 45.0;
  EXPECT_THROW(emit_report(r, ReportFormat::csv), InvalidInput);
  r = sample_report();
  r.rows[0].clean = 101;
  EXPECT_THROW(emit_report(r, ReportFormat::json), InvalidInput);
  EXPECT_THROW(parse_report_csv("a,b\n"), ParseError);
}

}  // namespace
}  // namespace encvit
