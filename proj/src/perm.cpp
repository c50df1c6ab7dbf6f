#include "encvit/perm.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "encvit/bytes.hpp"
#include "encvit/rng.hpp"

namespace encvit {

struct KeyAccess {
  static const std::vector<std::uint32_t>& v(const PermutationKey& k) { return k.v_; }
  static PermutationKey make(std::string id, std::uint64_t seed,
                             std::vector<std::uint32_t> v) {
    return PermutationKey(std::move(id), seed, std::move(v));
  }
};

namespace {

constexpr const char* kModule = "perm";

bool is_bijection(const std::vector<std::uint32_t>& v) {
  std::vector<bool> seen(v.size(), false);
  for (std::uint32_t x : v) {
    if (x >= v.size() || seen[x]) return false;
    seen[x] = true;
  }
  return true;
}

template <class T>
Tensor<T> apply(const Tensor<T>& x, const PermutationKey& key,
                std::uint32_t block, bool inverse) {
  detail::require(x.rank() == 3 || x.rank() == 4, kModule,
                  "expected a {C,H,W} image or {N,C,H,W} batch");
  const std::size_t off = x.rank() - 3;
  const ImageGeometry g{static_cast<std::uint32_t>(x.extent(off)),
                        static_cast<std::uint32_t>(x.extent(off + 1)),
                        static_cast<std::uint32_t>(x.extent(off + 2))};
  const BlockGrid grid(g, block);
  detail::require(grid.block_pixels() == key.block_pixels(), kModule,
                  "key '" + key.id() + "' permutes " +
                      std::to_string(key.block_pixels()) +
                      " pixels but blocks of " + g.to_string() + " with M=" +
                      std::to_string(block) + " hold " +
                      std::to_string(grid.block_pixels()));
  const auto& v = KeyAccess::v(key);
  const std::size_t n = off ? x.extent(0) : 1;
  const std::size_t pixels = g.pixels();
  Tensor<T> out(x.shape());
  for (std::size_t img = 0; img < n; ++img) {
    const T* src = x.data().data() + img * pixels;
    T* dst = out.data().data() + img * pixels;
    for (std::size_t b = 0; b < grid.num_blocks(); ++b) {
      for (std::size_t k = 0; k < v.size(); ++k) {
        // encrypt: b'(k) = b(v[k]);  decrypt: b(v[k]) = b'(k)
        if (inverse)
          dst[grid.offset(b, v[k])] = src[grid.offset(b, k)];
        else
          dst[grid.offset(b, k)] = src[grid.offset(b, v[k])];
      }
    }
  }
  return out;
}

}  // namespace

std::string PermutationKey::fingerprint() const {
  ByteWriter w;
  for (std::uint32_t x : v_) w.u32(x);
  const auto bytes = w.take();
  return sha256_hex(bytes);
}

PermutationKey generate_key(std::uint64_t seed, std::size_t block_pixels,
                            std::string key_id) {
  detail::require(block_pixels >= 1, kModule, "p_b must be at least 1");
  std::vector<std::uint32_t> v(block_pixels);
  std::iota(v.begin(), v.end(), 0u);
  Rng rng(seed);
  rng.shuffle(v.begin(), v.end());
  if (key_id.empty()) key_id = "k" + std::to_string(seed);
  return KeyAccess::make(std::move(key_id), seed, std::move(v));
}

PermutationKey identity_key(std::size_t block_pixels, std::string key_id) {
  detail::require(block_pixels >= 1, kModule, "p_b must be at least 1");
  std::vector<std::uint32_t> v(block_pixels);
  std::iota(v.begin(), v.end(), 0u);
  return KeyAccess::make(std::move(key_id), 0, std::move(v));
}

PermutationKey compose(const PermutationKey& second, const PermutationKey& first,
                       std::string key_id) {
  detail::require(second.block_pixels() == first.block_pixels(), kModule,
                  "cannot compose keys of different sizes");
  const auto& v1 = KeyAccess::v(first);
  const auto& v2 = KeyAccess::v(second);
  std::vector<std::uint32_t> v(v1.size());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = v1[v2[k]];
  if (key_id.empty()) key_id = second.id() + "*" + first.id();
  return KeyAccess::make(std::move(key_id), 0, std::move(v));
}

Tensor<float> encrypt_image(const Tensor<float>& x, const PermutationKey& key,
                            std::uint32_t block) {
  return apply(x, key, block, false);
}
Tensor<double> encrypt_image(const Tensor<double>& x, const PermutationKey& key,
                             std::uint32_t block) {
  return apply(x, key, block, false);
}
Tensor<float> decrypt_image(const Tensor<float>& x, const PermutationKey& key,
                            std::uint32_t block) {
  return apply(x, key, block, true);
}
Tensor<double> decrypt_image(const Tensor<double>& x, const PermutationKey& key,
                             std::uint32_t block) {
  return apply(x, key, block, true);
}

std::size_t KeySet::index_of(const std::string& key_id) const {
  for (std::size_t i = 0; i < keys.size(); ++i)
    if (keys[i].id() == key_id) return i;
  detail::reject(kModule, "no key with id '" + key_id + "'");
}

void KeySet::validate() const {
  detail::require(!keys.empty(), kModule, "N >= 1 required");
  (void)BlockGrid(image, block);
  std::set<std::string> ids;
  for (const auto& k : keys) {
    detail::require(k.block_pixels() == block_pixels(), kModule,
                    "key '" + k.id() + "' has the wrong length");
    detail::require(ids.insert(k.id()).second, kModule,
                    "duplicate key id '" + k.id() + "'");
  }
}

KeySet generate_keyset(std::size_t n, std::uint32_t block, ImageGeometry image,
                       std::uint64_t seed) {
  KeySet ks;
  ks.block = block;
  ks.image = image;
  const BlockGrid grid(image, block);
  for (std::size_t i = 0; i < n; ++i)
    ks.keys.push_back(generate_key(derive_seed(seed, 0x4b455953ULL, i),
                                   grid.block_pixels(), "k" + std::to_string(i)));
  ks.validate();
  return ks;
}

std::string serialize_keyset(const KeySet& ks) {
  ks.validate();
  nlohmann::ordered_json doc;
  doc["version"] = KeySet::kVersion;
  doc["M"] = ks.block;
  doc["C"] = ks.image.channels;
  doc["H"] = ks.image.height;
  doc["W"] = ks.image.width;
  doc["N"] = ks.keys.size();
  auto& arr = doc["keys"] = nlohmann::ordered_json::array();
  for (const auto& k : ks.keys) {
    nlohmann::ordered_json e;
    e["key_id"] = k.id();
    // Seeds are 64-bit; emitted as decimal strings so JSON readers that use
    // doubles do not round them.
    e["seed"] = std::to_string(k.seed());
    e["v"] = KeyAccess::v(k);
    arr.push_back(std::move(e));
  }
  return doc.dump(1) + "\n";
}

KeySet parse_keyset(std::string_view text) {
  auto fail = [](const std::string& what) -> ParseError {
    return ParseError(std::string("perm: keyset: ") + what);
  };
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("malformed JSON: ") + e.what());
  }
  try {
    if (doc.at("version").get<int>() != KeySet::kVersion)
      throw fail("unsupported version");
    KeySet ks;
    ks.block = doc.at("M").get<std::uint32_t>();
    ks.image = {doc.at("C").get<std::uint32_t>(), doc.at("H").get<std::uint32_t>(),
                doc.at("W").get<std::uint32_t>()};
    const auto n = doc.at("N").get<std::size_t>();
    if (n < 1) throw fail("N >= 1 required");
    const auto& arr = doc.at("keys");
    if (!arr.is_array() || arr.empty()) throw fail("N >= 1 required");
    if (arr.size() != n) throw fail("N does not match the number of keys");
    for (const auto& e : arr) {
      auto v = e.at("v").get<std::vector<std::uint32_t>>();
      if (v.empty() || !is_bijection(v)) throw fail("invalid permutation");
      const auto& seed = e.at("seed");
      const std::uint64_t s = seed.is_string() ? std::stoull(seed.get<std::string>())
                                               : seed.get<std::uint64_t>();
      ks.keys.push_back(KeyAccess::make(e.at("key_id").get<std::string>(), s,
                                        std::move(v)));
    }
    try {
      ks.validate();
    } catch (const InvalidInput& e) {
      throw fail(e.what());
    }
    return ks;
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("bad field: ") + e.what());
  } catch (const std::logic_error& e) {  // stoull
    throw fail(std::string("bad seed: ") + e.what());
  }
}

}  // namespace encvit
