#include "encvit/ensemble.hpp"

#include <algorithm>
#include <numeric>

#include <nlohmann/json.hpp>

#include "encvit/bytes.hpp"

namespace encvit {
namespace {

constexpr const char* kModule = "ensemble";
using json = nlohmann::ordered_json;

Tensor<float> as_batch(const Tensor<float>& x) {
  if (x.rank() == 3) {
    Shape s{1};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    return x.reshaped(s);
  }
  return x;
}

}  // namespace

std::string to_string(PolicyMode mode) {
  return mode == PolicyMode::simple ? "simple" : "random";
}

PolicyMode parse_policy_mode(const std::string& text) {
  if (text == "simple") return PolicyMode::simple;
  if (text == "random") return PolicyMode::random;
  detail::reject(kModule, "unknown policy '" + text + "' (expected simple|random)");
}

SelectionPolicy::Bounds SelectionPolicy::resolve(std::size_t n) const {
  detail::require(n >= 1, kModule, "ensemble needs at least one sub-model");
  if (mode == PolicyMode::simple) return {n, n};
  const std::size_t hi = s_max == 0 ? n : s_max;
  detail::require(s_min >= 3, kModule, "S_min must be >= 3");
  detail::require(s_min <= hi, kModule, "S_min must be <= S_max");
  detail::require(hi <= n, kModule,
                  "S_max " + std::to_string(hi) + " exceeds N " + std::to_string(n));
  return {s_min, hi};
}

std::string SelectionPolicy::describe(std::size_t n) const {
  const Bounds b = resolve(n);
  if (mode == PolicyMode::simple) return "simple(S=" + std::to_string(n) + ")";
  return "random(S=" + std::to_string(b.lo) + ".." + std::to_string(b.hi) + ")";
}

Label classify(std::span<const float> probs) {
  detail::require(!probs.empty(), kModule, "empty probability vector");
  return static_cast<Label>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

std::vector<Label> classify(const Tensor<float>& probs) {
  detail::require(probs.rank() == 2, kModule, "probabilities must be {B,K}");
  std::vector<Label> out(probs.extent(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = classify(probs.row(i));
  return out;
}

EnsembleModel::EnsembleModel(KeySet keyset, std::vector<SubModel> submodels,
                             SelectionPolicy policy, std::uint64_t seed)
    : EnsembleModel(std::make_shared<const KeySet>(std::move(keyset)),
                    std::make_shared<const std::vector<SubModel>>(std::move(submodels)),
                    policy, seed) {}

EnsembleModel::EnsembleModel(std::shared_ptr<const KeySet> keys,
                             std::shared_ptr<const std::vector<SubModel>> subs,
                             SelectionPolicy policy, std::uint64_t seed)
    : keyset_(std::move(keys)),
      submodels_(std::move(subs)),
      policy_(policy),
      seed_(seed),
      mutex_(std::make_unique<std::mutex>()),
      rng_(seed) {
  keyset_->validate();
  const std::size_t n = submodels_->size();
  detail::require(n == keyset_->size(), kModule,
                  "N mismatch: " + std::to_string(n) + " sub-models, " +
                      std::to_string(keyset_->size()) + " keys");
  policy_.resolve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const SubModel& s = (*submodels_)[i];
    detail::require(s.params != nullptr, kModule, "sub-model " + std::to_string(i) + " has no params");
    detail::require(s.key_id == keyset_->keys[i].id(), kModule,
                    "sub-model " + std::to_string(i) + " bound to key '" + s.key_id +
                        "' but key " + std::to_string(i) + " is '" +
                        keyset_->keys[i].id() + "'");
    const VitConfig& cfg = s.params->config();
    detail::require(cfg.image == keyset_->image && cfg.patch == keyset_->block, kModule,
                    "sub-model " + std::to_string(i) + " geometry does not match keyset");
    detail::require(cfg.num_classes == (*submodels_)[0].params->config().num_classes,
                    kModule, "sub-models disagree on num_classes");
  }
}

EnsembleModel::EnsembleModel(EnsembleModel&&) noexcept = default;
EnsembleModel& EnsembleModel::operator=(EnsembleModel&&) noexcept = default;
EnsembleModel::~EnsembleModel() = default;

std::size_t EnsembleModel::num_classes() const {
  return (*submodels_)[0].params->config().num_classes;
}

const SubModel& EnsembleModel::submodel(std::size_t i) const {
  detail::require(i < size(), kModule, "sub-model index " + std::to_string(i) + " out of range");
  return (*submodels_)[i];
}

Tensor<float> EnsembleModel::predict_submodel(std::size_t i, const Tensor<float>& x) const {
  const SubModel& s = submodel(i);
  const Tensor<float> enc = encrypt_image(as_batch(x), keyset_->keys[i], keyset_->block);
  return softmax(forward(*s.params, enc));
}

std::vector<std::size_t> EnsembleModel::draw_locked() {
  const auto [lo, hi] = policy_.resolve(size());
  const std::size_t s = lo + rng_.uniform_index(hi - lo + 1);
  std::vector<std::size_t> pool(size());
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < s; ++i)
    std::swap(pool[i], pool[i + rng_.uniform_index(pool.size() - i)]);
  pool.resize(s);
  std::sort(pool.begin(), pool.end());
  return pool;
}

std::vector<std::size_t> EnsembleModel::select_subset() {
  detail::require(policy_.mode == PolicyMode::random, kModule,
                  "select_subset requires the random policy");
  std::lock_guard lock(*mutex_);
  return draw_locked();
}

Tensor<float> EnsembleModel::average(
    const Tensor<float>& x, const std::vector<std::vector<std::size_t>>& subsets) const {
  const Tensor<float> batch = as_batch(x);
  const std::size_t b = batch.extent(0);
  const std::size_t k = num_classes();
  const std::size_t pixels = batch.size() / b;

  // Forward each sub-model only on the images that selected it. Forward is
  // batch-independent, so this equals evaluating image by image.
  std::vector<Tensor<float>> per_model(size());
  std::vector<std::vector<std::size_t>> row_of(size(), std::vector<std::size_t>(b, 0));
  for (std::size_t m = 0; m < size(); ++m) {
    std::vector<std::size_t> users;
    for (std::size_t i = 0; i < b; ++i)
      if (std::binary_search(subsets[i].begin(), subsets[i].end(), m)) users.push_back(i);
    if (users.empty()) continue;
    Shape shape = batch.shape();
    shape[0] = users.size();
    AlignedVector<float> buf(users.size() * pixels);
    for (std::size_t u = 0; u < users.size(); ++u) {
      std::copy_n(batch.data().data() + users[u] * pixels, pixels, buf.data() + u * pixels);
      row_of[m][users[u]] = u;
    }
    per_model[m] = predict_submodel(m, Tensor<float>(shape, std::move(buf)));
  }

  Tensor<float> out({b, k});
  for (std::size_t i = 0; i < b; ++i) {
    auto dst = out.row(i);
    for (std::size_t m : subsets[i]) {
      const auto src = per_model[m].row(row_of[m][i]);
      for (std::size_t c = 0; c < k; ++c) dst[c] += src[c];
    }
    const auto s = static_cast<float>(subsets[i].size());
    for (float& v : dst) v /= s;
  }
  return out;
}

Tensor<float> EnsembleModel::predict_simple(const Tensor<float>& x) const {
  const Tensor<float> batch = as_batch(x);
  std::vector<std::size_t> all(size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return average(batch, std::vector<std::vector<std::size_t>>(batch.extent(0), all));
}

Tensor<float> EnsembleModel::predict_random(const Tensor<float>& x,
                                            std::vector<PredictionRecord>* records) {
  const Tensor<float> batch = as_batch(x);
  std::vector<std::vector<std::size_t>> subsets(batch.extent(0));
  {
    std::lock_guard lock(*mutex_);
    for (auto& s : subsets) s = draw_locked();
  }
  if (records) {
    records->clear();
    for (const auto& s : subsets) records->push_back({s});
  }
  return average(batch, subsets);
}

Tensor<float> EnsembleModel::predict(const Tensor<float>& x,
                                     std::vector<PredictionRecord>* records) {
  if (policy_.mode == PolicyMode::random) return predict_random(x, records);
  Tensor<float> out = predict_simple(x);
  if (records) {
    std::vector<std::size_t> all(size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    records->assign(out.extent(0), PredictionRecord{all});
  }
  return out;
}

EnsembleModel EnsembleModel::split(std::uint64_t stream) const {
  return EnsembleModel(keyset_, submodels_, policy_, derive_seed(seed_, stream));
}

EnsembleModel EnsembleModel::with_policy(SelectionPolicy policy, std::uint64_t seed) const {
  return EnsembleModel(keyset_, submodels_, policy, seed);
}

EnsembleModel EnsembleModel::prefix(std::size_t n, SelectionPolicy policy,
                                    std::uint64_t seed) const {
  detail::require(n >= 1 && n <= size(), kModule, "prefix size out of range");
  KeySet keys = *keyset_;
  keys.keys.erase(keys.keys.begin() + static_cast<std::ptrdiff_t>(n), keys.keys.end());
  std::vector<SubModel> subs(submodels_->begin(), submodels_->begin() + n);
  return EnsembleModel(std::move(keys), std::move(subs), policy, seed);
}

std::string serialize_manifest(const EnsembleManifest& m) {
  json doc;
  doc["version"] = EnsembleManifest::kVersion;
  doc["N"] = m.entries.size();
  doc["policy"] = to_string(m.policy.mode);
  doc["s_min"] = m.policy.s_min;
  doc["s_max"] = m.policy.s_max;
  doc["seed"] = std::to_string(m.seed);
  doc["keyset"] = m.keyset;
  json subs = json::array();
  for (const ManifestEntry& e : m.entries)
    subs.push_back({{"key_id", e.key_id},
                    {"weights", e.weights},
                    {"sha256", e.sha256},
                    {"clean_val_accuracy", e.clean_val_accuracy}});
  doc["submodels"] = std::move(subs);
  return doc.dump(2) + "\n";
}

EnsembleManifest parse_manifest(const std::string& text) {
  try {
    const json doc = json::parse(text);
    if (doc.at("version").get<int>() != EnsembleManifest::kVersion)
      throw ParseError("ensemble: manifest: unsupported version");
    EnsembleManifest m;
    m.keyset = doc.at("keyset").get<std::string>();
    m.policy.mode = parse_policy_mode(doc.at("policy").get<std::string>());
    m.policy.s_min = doc.at("s_min").get<std::size_t>();
    m.policy.s_max = doc.at("s_max").get<std::size_t>();
    const json& seed = doc.at("seed");
    m.seed = seed.is_string() ? std::stoull(seed.get<std::string>()) : seed.get<std::uint64_t>();
    for (const json& e : doc.at("submodels"))
      m.entries.push_back({e.at("key_id").get<std::string>(), e.at("weights").get<std::string>(),
                           e.at("sha256").get<std::string>(),
                           e.value("clean_val_accuracy", 0.0)});
    if (doc.at("N").get<std::size_t>() != m.entries.size())
      throw ParseError("ensemble: manifest: N does not match the sub-model list");
    if (m.entries.empty()) throw ParseError("ensemble: manifest: N >= 1 required");
    return m;
  } catch (const json::exception& e) {
    throw ParseError(std::string("ensemble: manifest: ") + e.what());
  } catch (const std::logic_error&) {
    throw ParseError("ensemble: manifest: malformed seed");
  }
}

EnsembleModel load_ensemble(const std::filesystem::path& manifest_path) {
  const auto raw = read_file(manifest_path);
  const EnsembleManifest m = parse_manifest(std::string(raw.begin(), raw.end()));
  const auto dir = manifest_path.parent_path();
  const auto key_bytes = read_file(dir / m.keyset);
  KeySet keys = parse_keyset(std::string(key_bytes.begin(), key_bytes.end()));
  std::vector<SubModel> subs;
  for (const ManifestEntry& e : m.entries) {
    const auto bytes = read_file(dir / e.weights);
    if (sha256_hex(bytes) != e.sha256)
      throw InvalidInput("ensemble: weight file '" + e.weights + "' fails its sha256 check");
    subs.push_back({std::make_shared<const VitParams<float>>(decode_weights(bytes)), e.key_id,
                    e.clean_val_accuracy});
  }
  return EnsembleModel(std::move(keys), std::move(subs), m.policy, m.seed);
}

}  // namespace encvit
