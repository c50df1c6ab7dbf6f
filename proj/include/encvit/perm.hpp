#pragma once

// Block-wise pixel shuffling keyed by a secret permutation.
//
// An image is split into M x M blocks, each block is flattened to a vector b
// of p_b = C*M*M pixels (BlockGrid ordering) and every block is permuted with
// the same key v:  b'(k) = b(v[k]).  Indices are 0-based.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "encvit/tensor.hpp"

namespace encvit {

/// A secret bijection on block-pixel indices. The permutation itself is not
/// exposed; only the functions in this header consume it.
class PermutationKey {
 public:
  const std::string& id() const { return id_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t block_pixels() const { return v_.size(); }

  /// SHA-256 over the permutation, for binding models to keys without
  /// disclosing them.
  std::string fingerprint() const;

  friend bool operator==(const PermutationKey&, const PermutationKey&) = default;

 private:
  friend struct KeyAccess;
  PermutationKey(std::string id, std::uint64_t seed, std::vector<std::uint32_t> v)
      : id_(std::move(id)), seed_(seed), v_(std::move(v)) {}

  std::string id_;
  std::uint64_t seed_ = 0;
  std::vector<std::uint32_t> v_;
};

/// Uniform random permutation of {0..p_b-1}: Fisher-Yates driven by
/// Rng(seed). The default id is "k<seed>".
PermutationKey generate_key(std::uint64_t seed, std::size_t block_pixels,
                            std::string key_id = {});

/// The key that leaves every block unchanged.
PermutationKey identity_key(std::size_t block_pixels, std::string key_id = "identity");

/// Key equivalent to encrypting with `first` and then with `second`.
PermutationKey compose(const PermutationKey& second, const PermutationKey& first,
                       std::string key_id = {});

/// Encrypt a {C,H,W} image or an {N,C,H,W} batch.
Tensor<float> encrypt_image(const Tensor<float>& x, const PermutationKey& key,
                            std::uint32_t block);
Tensor<double> encrypt_image(const Tensor<double>& x, const PermutationKey& key,
                             std::uint32_t block);

/// Inverse of encrypt_image. Since the map is a permutation, this is also
/// its transpose: it carries gradients w.r.t. encrypted pixels back to
/// gradients w.r.t. plain pixels.
Tensor<float> decrypt_image(const Tensor<float>& x, const PermutationKey& key,
                            std::uint32_t block);
Tensor<double> decrypt_image(const Tensor<double>& x, const PermutationKey& key,
                             std::uint32_t block);

/// N keys sharing one block geometry.
struct KeySet {
  static constexpr int kVersion = 1;

  std::uint32_t block = 4;
  ImageGeometry image;
  std::vector<PermutationKey> keys;

  std::size_t size() const { return keys.size(); }
  std::size_t block_pixels() const {
    return std::size_t{image.channels} * block * block;
  }
  /// Index of the key with this id; throws InvalidInput if absent.
  std::size_t index_of(const std::string& key_id) const;
  const PermutationKey& at(const std::string& key_id) const {
    return keys[index_of(key_id)];
  }
  /// Throws InvalidInput on an empty set, duplicate ids or size mismatch.
  void validate() const;

  friend bool operator==(const KeySet&, const KeySet&) = default;
};

/// N keys with ids k0..k{N-1}, key i seeded by derive_seed(seed, i).
KeySet generate_keyset(std::size_t n, std::uint32_t block, ImageGeometry image,
                       std::uint64_t seed);

/// JSON document {version, M, C, H, W, N, keys: [{key_id, seed, v}]}.
std::string serialize_keyset(const KeySet& keys);

/// Throws ParseError ("invalid permutation", "N >= 1 required", ...).
KeySet parse_keyset(std::string_view text);

}  // namespace encvit
