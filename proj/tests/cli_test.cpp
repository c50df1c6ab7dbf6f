#include <sys/stat.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "encvit/bytes.hpp"
#include "encvit/dataset.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;  // stdout and stderr interleaved
};

Outcome sh(const std::string& args, const std::string& env = {}) {
  const std::string cmd = env + " " + ENCVIT_CLI + " " + args + " 2>&1";
  Outcome r;
  FILE* p = ::popen(cmd.c_str(), "r");
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p)) r.out += buf.data();
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / ("encvit_cli_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
    const Outcome gen = sh("gen-data --seed 4 --n-train 120 --n-test 12 --train-out " + p("train.dset") +
                       " --test-out " + p("test.dset"));
    ASSERT_EQ(gen.code, 0) << gen.out;
    const Outcome keys = sh("gen-keys --n 3 --seed 2 --out " + p("keys.json"));
    ASSERT_EQ(keys.code, 0) << keys.out;
    const std::string tiny = " --epochs 1 --dim 8 --heads 2 --depth 1 --data " + p("train.dset") +
                             " --val " + p("test.dset");
    ASSERT_EQ(sh("train" + tiny + " --out-dir " + p("base")).code, 0);
    const Outcome ens = sh("train" + tiny + " --keys " + p("keys.json") + " --out-dir " + p("ens") + " --jobs 2");
    ASSERT_EQ(ens.code, 0) << ens.out;
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static std::string p(const std::string& name) { return (dir_ / name).string(); }
  static inline fs::path dir_;
};

TEST_F(Cli, PrintsResolvedConfigWithSeed) {
  const Outcome r = sh("gen-data --seed 11 --n-train 10 --n-test 10 --train-out " + p("a.dset") +
                   " --test-out " + p("b.dset"));
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("config {\"verb\":\"gen-data\",\"seed\":11"), std::string::npos) << r.out;
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(sh("").code, 2);
  EXPECT_EQ(sh("frobnicate").code, 2);
  EXPECT_EQ(sh("gen-keys --out x.json").code, 2);  // missing --n
  EXPECT_EQ(sh("predict --in " + p("nope.dset") + " --weights x").code, 2);
  EXPECT_EQ(sh("report --ensemble a --baseline b --data c --ns 1,x").code, 2);
}

TEST_F(Cli, ModuleErrorsExitOneWithOneLine) {
  const Outcome r = sh("attack --ensemble " + p("ens/manifest.json") + " --in " + p("test.dset") + " --out " +
                   p("x.dset") + " --budget eps=3");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("error[invalid-input]"), std::string::npos) << r.out;
  const Outcome bad = sh("attack --ensemble " + p("ens/manifest.json") + " --in " + p("test.dset") + " --out " +
                     p("x.dset") + " --budget warp=1");
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.out.find("error[parse]"), std::string::npos) << bad.out;
}

TEST_F(Cli, KeysetsAreOwnerOnlyAndNotOverwritten) {
  struct stat st {};
  ASSERT_EQ(::stat(p("keys.json").c_str(), &st), 0);
  EXPECT_EQ(st.st_mode & 0777, 0600);
  const auto before = encvit::read_file(p("keys.json"));
  const Outcome again = sh("gen-keys --n 3 --seed 99 --out " + p("keys.json"));
  EXPECT_EQ(again.code, 2);
  EXPECT_EQ(encvit::read_file(p("keys.json")), before);
  EXPECT_EQ(sh("gen-keys --n 3 --seed 99 --force --out " + p("keys.json")).code, 0);
  EXPECT_NE(encvit::read_file(p("keys.json")), before);
  EXPECT_EQ(sh("gen-keys --n 3 --seed 2 --force --out " + p("keys.json")).code, 0);
  EXPECT_EQ(encvit::read_file(p("keys.json")), before);
}

TEST_F(Cli, WarnsOnWorldReadableKeyset) {
  fs::copy_file(p("keys.json"), p("open.json"), fs::copy_options::overwrite_existing);
  fs::permissions(p("open.json"), fs::perms::others_read, fs::perm_options::add);
  const Outcome r = sh("encrypt --keys " + p("open.json") + " --key-id k0 --in " + p("test.dset") + " --out " +
                   p("e.dset"));
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("warning: keyset"), std::string::npos) << r.out;
}

TEST_F(Cli, EncryptDecryptRoundTrip) {
  ASSERT_EQ(sh("encrypt --keys " + p("keys.json") + " --key-id k1 --in " + p("test.dset") + " --out " +
               p("enc.dset")).code, 0);
  ASSERT_EQ(sh("decrypt --keys " + p("keys.json") + " --key-id k1 --in " + p("enc.dset") + " --out " +
               p("dec.dset")).code, 0);
  EXPECT_NE(encvit::read_file(p("enc.dset")), encvit::read_file(p("test.dset")));
  EXPECT_EQ(encvit::load_dataset(p("dec.dset")).images, encvit::load_dataset(p("test.dset")).images);
}

TEST_F(Cli, OutDirEnvironmentVariable) {
  fs::create_directories(p("outenv"));
  const Outcome r = sh("gen-data --n-train 10 --n-test 10 --train-out tr.dset --test-out te.dset",
                   "ENCVIT_OUT_DIR=" + p("outenv"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(p("outenv/tr.dset")));
  EXPECT_TRUE(fs::exists(p("outenv/te.dset")));
}

TEST_F(Cli, TrainWritesVerifiedManifest) {
  EXPECT_TRUE(fs::exists(p("ens/manifest.json")));
  for (const char* k : {"k0", "k1", "k2"}) EXPECT_TRUE(fs::exists(p(std::string("ens/sub_") + k + ".tvit")));
  EXPECT_TRUE(fs::exists(p("base/baseline.tvit")));
  EXPECT_EQ(sh("predict --ensemble " + p("ens/manifest.json") + " --in " + p("test.dset")).code, 0);

  fs::copy(p("ens"), p("tampered"), fs::copy_options::recursive | fs::copy_options::overwrite_existing);
  {
    std::ofstream f(p("tampered/sub_k1.tvit"), std::ios::binary | std::ios::app);
    f << 'x';
  }
  const Outcome r = sh("predict --ensemble " + p("tampered/manifest.json") + " --in " + p("test.dset"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("sha256"), std::string::npos) << r.out;
}

TEST_F(Cli, AttackRespectsEpsilon) {
  const Outcome r = sh("attack --attack pgd-ce --ensemble " + p("ens/manifest.json") + " --baseline " +
                   p("base/baseline.tvit") + " --in " + p("test.dset") + " --out " + p("adv.dset") +
                   " --limit 4 --budget eps=8/255,steps=3");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto clean = encvit::load_dataset(p("test.dset"));
  const auto adv = encvit::load_dataset(p("adv.dset"));
  ASSERT_EQ(adv.size(), 4u);
  // Stored as u8, so the bound is 8 quantization levels.
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < adv.images.row(i).size(); ++j)
      EXPECT_LE(std::abs(adv.images.row(i)[j] - clean.images.row(i)[j]), 8.0f / 255.0f + 1e-6f);

  EXPECT_EQ(sh("attack --attack pgd-ce --ensemble " + p("ens/manifest.json") + " --in " + p("test.dset") +
               " --out " + p("adv.dset")).code, 2);  // no surrogate
}

TEST_F(Cli, EvaluateIsReproducible) {
  const std::string args = "evaluate --ensemble " + p("ens/manifest.json") + " --baseline " +
                           p("base/baseline.tvit") + " --data " + p("test.dset") +
                           " --limit 3 --budget steps=2,queries=20 --seed 5 --out ";
  ASSERT_EQ(sh(args + p("r1.csv")).code, 0);
  ASSERT_EQ(sh(args + p("r2.csv") + " --jobs 2").code, 0);
  EXPECT_EQ(encvit::read_file(p("r1.csv")), encvit::read_file(p("r2.csv")));
  EXPECT_TRUE(fs::exists(p("r1.json")));
}

TEST_F(Cli, ReportWritesAllTables) {
  const Outcome r = sh("report --ensemble " + p("ens/manifest.json") + " --baseline " + p("base/baseline.tvit") +
                   " --data " + p("test.dset") + " --limit 2 --budget steps=1,queries=10 --n 3 --ns 3 " +
                   "--leaks 0,3 --out-dir " + p("rep"));
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* t : {"model_comparison", "submodel_count", "key_leak"}) {
    EXPECT_TRUE(fs::exists(p(std::string("rep/") + t + ".csv")));
    EXPECT_TRUE(fs::exists(p(std::string("rep/") + t + ".json")));
  }
}

TEST_F(Cli, ReadsOptionsFromConfigFile) {
  {
    std::ofstream f(p("exp.toml"));
    f << "[gen-data]\nseed = 21\nn-train = 10\nn-test = 10\ntrain-out = \"" << p("c1.dset")
      << "\"\ntest-out = \"" << p("c2.dset") << "\"\n";
  }
  const Outcome r = sh("--config " + p("exp.toml") + " gen-data");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("\"seed\":21"), std::string::npos) << r.out;
  EXPECT_EQ(encvit::load_dataset(p("c2.dset")).images,
            encvit::gen_synthetic_dataset(21, 10, 10).test.images);
}

}  // namespace
