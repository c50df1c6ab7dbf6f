#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "encvit/perm.hpp"
#include "encvit/rng.hpp"
#include "encvit/vit.hpp"

namespace encvit {

struct SubModel {
  std::shared_ptr<const VitParams<float>> params;
  std::string key_id;
  double clean_val_accuracy = 0;
};

enum class PolicyMode { simple, random };

std::string to_string(PolicyMode mode);
PolicyMode parse_policy_mode(const std::string& text);

struct SelectionPolicy {
  PolicyMode mode = PolicyMode::random;
  std::size_t s_min = 3;
  /// 0 means N.
  std::size_t s_max = 0;

  static SelectionPolicy simple() { return {PolicyMode::simple, 0, 0}; }
  static SelectionPolicy random(std::size_t s_min = 3, std::size_t s_max = 0) {
    return {PolicyMode::random, s_min, s_max};
  }

  struct Bounds {
    std::size_t lo, hi;
  };
  /// Subset-size range for an ensemble of n. Simple mode is {n, n}; random
  /// mode requires 3 <= s_min <= s_max <= n.
  Bounds resolve(std::size_t n) const;
  std::string describe(std::size_t n) const;
};

struct PredictionRecord {
  std::vector<std::size_t> subset;  // ascending
};

/// Label with the largest probability; ties go to the lowest index.
Label classify(std::span<const float> probs);
std::vector<Label> classify(const Tensor<float>& probs);

/// N encrypted sub-models, sub-model i bound to key i of the keyset.
///
/// Random-mode prediction consumes one subset draw per image from a single
/// seeded stream guarded by a mutex. split() derives an independent stream
/// for per-task use, so results do not depend on scheduling.
class EnsembleModel {
 public:
  EnsembleModel(KeySet keyset, std::vector<SubModel> submodels,
                SelectionPolicy policy, std::uint64_t seed);

  EnsembleModel(EnsembleModel&&) noexcept;
  EnsembleModel& operator=(EnsembleModel&&) noexcept;
  ~EnsembleModel();

  std::size_t size() const { return submodels_->size(); }
  std::size_t num_classes() const;
  ImageGeometry geometry() const { return keyset_->image; }
  const KeySet& keyset() const { return *keyset_; }
  const SubModel& submodel(std::size_t i) const;
  const SelectionPolicy& policy() const { return policy_; }
  std::uint64_t seed() const { return seed_; }

  /// softmax(forward(params_i, encrypt(x, K_i))) for a {C,H,W} image or an
  /// {N,C,H,W} batch; returns {N,K}.
  Tensor<float> predict_submodel(std::size_t i, const Tensor<float>& x) const;

  /// Draw a subset from the policy. Requires random mode.
  std::vector<std::size_t> select_subset();

  /// Mean over all sub-models. Deterministic.
  Tensor<float> predict_simple(const Tensor<float>& x) const;

  /// Mean over a fresh subset per image. Records, if requested, receive the
  /// subset used for each image.
  Tensor<float> predict_random(const Tensor<float>& x,
                               std::vector<PredictionRecord>* records = nullptr);

  /// Dispatch on the policy mode.
  Tensor<float> predict(const Tensor<float>& x,
                        std::vector<PredictionRecord>* records = nullptr);

  /// Same sub-models and keys with a stream seeded from derive_seed(seed, stream).
  EnsembleModel split(std::uint64_t stream) const;
  /// Same sub-models and keys under another policy and seed.
  EnsembleModel with_policy(SelectionPolicy policy, std::uint64_t seed) const;
  /// The first n sub-models and keys.
  EnsembleModel prefix(std::size_t n, SelectionPolicy policy, std::uint64_t seed) const;

 private:
  EnsembleModel(std::shared_ptr<const KeySet> keys,
                std::shared_ptr<const std::vector<SubModel>> subs,
                SelectionPolicy policy, std::uint64_t seed);
  std::vector<std::size_t> draw_locked();
  Tensor<float> average(const Tensor<float>& x,
                        const std::vector<std::vector<std::size_t>>& subsets) const;

  std::shared_ptr<const KeySet> keyset_;
  std::shared_ptr<const std::vector<SubModel>> submodels_;
  SelectionPolicy policy_;
  std::uint64_t seed_;
  std::unique_ptr<std::mutex> mutex_;
  Rng rng_;
};

/// Ensemble manifest (JSON): policy, seed, keyset path and one entry per
/// sub-model with its weight file and that file's sha256.
struct ManifestEntry {
  std::string key_id;
  std::string weights;  // relative to the manifest's directory
  std::string sha256;
  double clean_val_accuracy = 0;
};

struct EnsembleManifest {
  static constexpr int kVersion = 1;
  std::string keyset;  // relative to the manifest's directory
  SelectionPolicy policy;
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> entries;
};

std::string serialize_manifest(const EnsembleManifest& manifest);
EnsembleManifest parse_manifest(const std::string& text);

/// Read the manifest, verify every weight hash, load keys and weights.
EnsembleModel load_ensemble(const std::filesystem::path& manifest_path);

}  // namespace encvit
