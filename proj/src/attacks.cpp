#include "encvit/attacks.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <thread>

#include "encvit/rng.hpp"

namespace encvit {
namespace {

constexpr const char* kModule = "attacks";

Tensor<float> as_batch(const Tensor<float>& x) {
  if (x.rank() != 3) return x;
  Shape s{1};
  s.insert(s.end(), x.shape().begin(), x.shape().end());
  return x.reshaped(s);
}

void check_image(const Tensor<float>& x, ImageGeometry g) {
  detail::require(x.rank() == 3 && x.shape() == g.shape(), kModule,
                  "expected a single " + g.to_string() + " image");
  for (float v : x.data())
    detail::require(v >= 0.0f && v <= 1.0f, kModule, "input pixels must be in [0,1]");
}

void check_label(Label y, std::size_t k, const char* what) {
  detail::require(y >= 0 && static_cast<std::size_t>(y) < k, kModule,
                  std::string(what) + " " + std::to_string(y) + " out of range");
}

float sign(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

double linf(const Tensor<float>& a, const Tensor<float>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, static_cast<double>(std::abs(a[i] - b[i])));
  return m;
}

std::int64_t parse_int(std::string_view s, const std::string& text) {
  std::int64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ParseError("attacks: bad rational '" + text + "'");
  return v;
}

// One PGD ascent on `objective` = +CE(label) (untargeted) or -CE(target).
AttackResult run_pgd(const Surrogate& surrogate, const Tensor<float>& x, Label y,
                     std::optional<Label> target, const AttackBudget& budget,
                     std::uint64_t seed) {
  budget.validate();
  check_image(x, surrogate.geometry());
  check_label(y, surrogate.num_classes(), "label");
  const Label aim = target.value_or(y);
  const float dir = target ? -1.0f : 1.0f;
  const float eps = budget.eps();
  const std::uint32_t window = std::max<std::uint32_t>(1, (budget.steps + 4) / 5);
  const std::array<Label, 1> labels{aim};
  const std::uint64_t calls_before = surrogate.gradient_calls();

  auto success_of = [&](const Tensor<float>& probs) {
    const Label pred = classify(probs.row(0));
    return target ? pred == *target : pred != y;
  };

  AttackResult out;
  out.x_adv = x;
  bool have_best = false;
  bool best_success = false;
  double best_obj = -std::numeric_limits<double>::infinity();

  for (std::uint32_t run = 0; run < budget.restarts; ++run) {
    Tensor<float> cur = x;
    if (budget.random_start || run > 0) {
      Rng rng(derive_seed(seed, 0x50474400ULL, run));
      for (std::size_t i = 0; i < cur.size(); ++i)
        cur[i] = std::clamp(x[i] + static_cast<float>(rng.uniform(-eps, eps)), 0.0f, 1.0f);
    }
    float alpha = budget.step_size();
    auto ev = surrogate.evaluate(cur, labels, true);
    Tensor<float> grad = std::move(ev.gradient);

    Tensor<float> run_x = cur, run_grad = grad;
    double run_obj = -std::numeric_limits<double>::infinity();
    bool run_success = false;
    double checkpoint_ref = run_obj;

    for (std::uint32_t t = 1; t <= budget.steps; ++t) {
      for (std::size_t i = 0; i < cur.size(); ++i) {
        const float v = std::clamp(cur[i] + dir * alpha * sign(grad[i]), x[i] - eps, x[i] + eps);
        cur[i] = std::clamp(v, 0.0f, 1.0f);
      }
      const bool need_grad = t < budget.steps;
      ev = surrogate.evaluate(cur, labels, need_grad);
      const double obj = dir * ev.loss[0];
      const bool ok = success_of(ev.probs);
      if (need_grad) grad = std::move(ev.gradient);
      if (obj > run_obj || t == 1) {
        run_obj = obj;
        run_success = ok;
        run_x = cur;
        if (need_grad) run_grad = grad;
      }
      if (t % window == 0 && t < budget.steps) {
        if (!(run_obj > checkpoint_ref)) {
          alpha *= 0.5f;
          cur = run_x;
          grad = run_grad;
        }
        checkpoint_ref = run_obj;
        out.checkpoint_best_loss.push_back(run_obj);
      }
    }
    out.checkpoint_best_loss.push_back(run_obj);

    const bool better = !have_best || (run_success && !best_success) ||
                        (run_success == best_success && run_obj > best_obj);
    if (better) {
      have_best = true;
      best_success = run_success;
      best_obj = run_obj;
      out.x_adv = run_x;
    }
  }
  out.success = best_success;
  out.gradient_calls = surrogate.gradient_calls() - calls_before;
  out.linf_norm = linf(out.x_adv, x);
  return out;
}

double margin_of(std::span<const float> p, Label y) {
  double other = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < p.size(); ++j)
    if (static_cast<Label>(j) != y) other = std::max(other, static_cast<double>(p[j]));
  return static_cast<double>(p[static_cast<std::size_t>(y)]) - other;
}

}  // namespace

std::string Rational::str() const {
  return std::to_string(num) + "/" + std::to_string(den);
}

Rational Rational::parse(const std::string& text) {
  const auto slash = text.find('/');
  Rational r;
  if (slash != std::string::npos) {
    r.num = parse_int(std::string_view(text).substr(0, slash), text);
    r.den = parse_int(std::string_view(text).substr(slash + 1), text);
  } else if (const auto dot = text.find('.'); dot != std::string::npos) {
    const std::string digits = text.substr(0, dot) + text.substr(dot + 1);
    const std::size_t places = text.size() - dot - 1;
    if (places > 12) throw ParseError("attacks: too many decimals in '" + text + "'");
    r.num = parse_int(digits, text);
    r.den = 1;
    for (std::size_t i = 0; i < places; ++i) r.den *= 10;
  } else {
    r.num = parse_int(text, text);
    r.den = 1;
  }
  if (r.den <= 0) throw ParseError("attacks: denominator must be positive in '" + text + "'");
  const std::int64_t g = std::gcd(r.num, r.den);
  if (g > 1) {
    r.num /= g;
    r.den /= g;
  }
  return r;
}

float AttackBudget::step_size() const {
  return alpha ? static_cast<float>(alpha->value()) : 2.0f * eps();
}

void AttackBudget::validate() const {
  detail::require(epsilon.value() > 0 && epsilon.value() < 1, kModule,
                  "epsilon must be in (0,1)");
  detail::require(!alpha || alpha->value() > 0, kModule, "alpha must be positive");
  detail::require(steps >= 1, kModule, "steps must be >= 1");
  detail::require(restarts >= 1, kModule, "restarts must be >= 1");
  detail::require(p_init > 0 && p_init <= 1, kModule, "p_init must be in (0,1]");
  detail::require(eot_samples >= 1, kModule, "eot_samples must be >= 1");
}

ModelSurrogate::ModelSurrogate(std::vector<Member> members, std::uint32_t block)
    : members_(std::move(members)), block_(block) {
  detail::require(!members_.empty(), kModule, "surrogate needs at least one model");
  const VitConfig& c0 = members_[0].params->config();
  for (const Member& m : members_) {
    detail::require(m.params != nullptr, kModule, "surrogate member without params");
    const VitConfig& c = m.params->config();
    detail::require(c.image == c0.image && c.num_classes == c0.num_classes, kModule,
                    "surrogate members disagree on geometry");
    if (m.key)
      detail::require(m.key->block_pixels() == std::size_t{c.image.channels} * block * block,
                      kModule, "surrogate key does not match block size");
  }
}

std::size_t ModelSurrogate::num_classes() const {
  return members_[0].params->config().num_classes;
}
ImageGeometry ModelSurrogate::geometry() const { return members_[0].params->config().image; }

Tensor<float> Surrogate::probabilities(const Tensor<float>& x) const {
  const std::size_t b = x.rank() == 3 ? 1 : x.extent(0);
  const std::vector<Label> labels(b, 0);
  return evaluate(x, labels, false).probs;
}

AttackBudget parse_budget(const std::string& text) {
  AttackBudget b;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find(',', pos);
    if (end == std::string::npos) end = text.size();
    const std::string item = text.substr(pos, end - pos);
    pos = end + 1;
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ParseError("attacks: budget item '" + item + "' lacks '='");
    const std::string key = item.substr(0, eq), val = item.substr(eq + 1);
    auto count = [&] {
      const std::int64_t v = parse_int(val, item);
      if (v < 0) throw ParseError("attacks: budget '" + key + "' must be non-negative");
      return static_cast<std::uint64_t>(v);
    };
    if (key == "eps" || key == "epsilon") {
      b.epsilon = Rational::parse(val);
    } else if (key == "alpha") {
      b.alpha = Rational::parse(val);
    } else if (key == "steps") {
      b.steps = static_cast<std::uint32_t>(count());
    } else if (key == "restarts") {
      b.restarts = static_cast<std::uint32_t>(count());
    } else if (key == "random_start") {
      b.random_start = count() != 0;
    } else if (key == "queries" || key == "query_budget") {
      b.query_budget = count();
    } else if (key == "p_init") {
      b.p_init = Rational::parse(val).value();
    } else if (key == "eot") {
      b.eot_samples = static_cast<std::uint32_t>(count());
    } else {
      throw ParseError("attacks: unknown budget key '" + key + "'");
    }
  }
  b.validate();
  return b;
}

std::string format_budget(const AttackBudget& b) {
  char p[32];
  std::snprintf(p, sizeof p, "%g", b.p_init);
  return "eps=" + b.epsilon.str() + (b.alpha ? ",alpha=" + b.alpha->str() : "") +
         ",steps=" + std::to_string(b.steps) + ",restarts=" + std::to_string(b.restarts) +
         ",random_start=" + (b.random_start ? "1" : "0") +
         ",queries=" + std::to_string(b.query_budget) + ",p_init=" + p +
         ",eot=" + std::to_string(b.eot_samples);
}

Surrogate::Evaluation ModelSurrogate::do_evaluate(const Tensor<float>& x,
                                                  std::span<const Label> labels,
                                                  bool with_gradient) const {
  const Tensor<float> batch = as_batch(x);
  const std::size_t b = batch.extent(0);
  const std::size_t k = num_classes();
  detail::require(labels.size() == b, kModule, "one label per image required");
  for (Label y : labels) check_label(y, k, "label");

  // Log-softmax per member in double, so the loss of a saturated model
  // stays finite.
  const std::size_t n = members_.size();
  std::vector<Tensor<float>> inputs(n), logits(n);
  std::vector<std::vector<double>> logp(n, std::vector<double>(b * k));
  for (std::size_t m = 0; m < n; ++m) {
    const Member& mem = members_[m];
    inputs[m] = mem.key ? encrypt_image(batch, *mem.key, block_) : batch;
    logits[m] = forward(*mem.params, inputs[m]);
    for (std::size_t i = 0; i < b; ++i) {
      const auto z = logits[m].row(i);
      const double mx = *std::max_element(z.begin(), z.end());
      double s = 0;
      for (float v : z) s += std::exp(static_cast<double>(v) - mx);
      const double lse = mx + std::log(s);
      for (std::size_t c = 0; c < k; ++c) logp[m][i * k + c] = static_cast<double>(z[c]) - lse;
    }
  }

  Evaluation ev;
  ev.probs = Tensor<float>({b, k});
  ev.loss.resize(b);
  std::vector<double> log_py(b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      double p = 0;
      for (std::size_t m = 0; m < n; ++m) p += std::exp(logp[m][i * k + c]);
      ev.probs.row(i)[c] = static_cast<float>(p / static_cast<double>(n));
    }
    const auto y = static_cast<std::size_t>(labels[i]);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < n; ++m) mx = std::max(mx, logp[m][i * k + y]);
    double s = 0;
    for (std::size_t m = 0; m < n; ++m) s += std::exp(logp[m][i * k + y] - mx);
    log_py[i] = mx + std::log(s) - std::log(static_cast<double>(n));
    ev.loss[i] = -log_py[i];
  }
  if (!with_gradient) return ev;

  ev.gradient = Tensor<float>(batch.shape());
  for (std::size_t m = 0; m < n; ++m) {
    // d(-log mean_m s_m[y]) / dz_m = (s_m[y] / (n p_y)) (s_m - e_y)
    Tensor<float> dz({b, k});
    for (std::size_t i = 0; i < b; ++i) {
      const auto y = static_cast<std::size_t>(labels[i]);
      const double w = std::exp(logp[m][i * k + y] - log_py[i]) / static_cast<double>(n);
      for (std::size_t c = 0; c < k; ++c) {
        const double s = std::exp(logp[m][i * k + c]);
        dz.row(i)[c] = static_cast<float>(w * (s - (c == y ? 1.0 : 0.0)));
      }
    }
    Tensor<float> g = input_vjp(*members_[m].params, inputs[m], dz);
    if (members_[m].key) g = decrypt_image(g, *members_[m].key, block_);
    for (std::size_t i = 0; i < g.size(); ++i) ev.gradient[i] += g[i];
  }
  if (x.rank() == 3) ev.gradient = ev.gradient.reshaped(x.shape());
  return ev;
}

std::shared_ptr<const Surrogate> plain_surrogate(std::shared_ptr<const VitParams<float>> params) {
  std::vector<ModelSurrogate::Member> members{{std::move(params), std::nullopt}};
  const std::uint32_t block = members[0].params->config().patch;
  return std::make_shared<const ModelSurrogate>(std::move(members), block);
}

std::shared_ptr<const Surrogate> leaked_key_surrogate(const EnsembleModel& target,
                                                      std::span<const std::string> key_ids) {
  if (key_ids.empty()) return nullptr;
  std::vector<ModelSurrogate::Member> members;
  for (const std::string& id : key_ids) {
    const std::size_t i = target.keyset().index_of(id);
    members.push_back({target.submodel(i).params, target.keyset().keys[i]});
  }
  return std::make_shared<const ModelSurrogate>(std::move(members), target.keyset().block);
}

QueryAccess::QueryAccess(Predictor predictor, OutputMode mode)
    : predictor_(std::move(predictor)), mode_(mode) {
  detail::require(static_cast<bool>(predictor_), kModule, "query access needs a predictor");
}

QueryAccess QueryAccess::of(EnsembleModel& model, OutputMode mode) {
  return QueryAccess([&model](const Tensor<float>& x) { return model.predict(x); }, mode);
}

Tensor<float> QueryAccess::query(const Tensor<float>& x) {
  Tensor<float> p = predictor_(x);
  queries_ += p.extent(0);
  if (mode_ == OutputMode::label) {
    for (std::size_t i = 0; i < p.extent(0); ++i) {
      auto row = p.row(i);
      const auto arg = static_cast<std::size_t>(classify(row));
      std::fill(row.begin(), row.end(), 0.0f);
      row[arg] = 1.0f;
    }
  }
  return p;
}

AttackResult fgsm(const Surrogate& surrogate, const Tensor<float>& x, Label y,
                  const Rational& epsilon) {
  detail::require(epsilon.value() > 0 && epsilon.value() < 1, kModule,
                  "epsilon must be in (0,1)");
  check_image(x, surrogate.geometry());
  const std::array<Label, 1> labels{y};
  const std::uint64_t before = surrogate.gradient_calls();
  const Tensor<float> g = surrogate.evaluate(x, labels, true).gradient;
  const auto eps = static_cast<float>(epsilon.value());
  AttackResult out;
  out.x_adv = x;
  for (std::size_t i = 0; i < x.size(); ++i)
    out.x_adv[i] = std::clamp(x[i] + eps * sign(g[i]), 0.0f, 1.0f);
  out.success = classify(surrogate.probabilities(out.x_adv).row(0)) != y;
  out.gradient_calls = surrogate.gradient_calls() - before;
  out.linf_norm = linf(out.x_adv, x);
  return out;
}

AttackResult pgd_ce(const Surrogate& surrogate, const Tensor<float>& x, Label y,
                    const AttackBudget& budget, std::uint64_t seed) {
  return run_pgd(surrogate, x, y, std::nullopt, budget, seed);
}

AttackResult pgd_targeted(const Surrogate& surrogate, const Tensor<float>& x, Label y,
                          Label target, const AttackBudget& budget, std::uint64_t seed) {
  check_label(target, surrogate.num_classes(), "target");
  detail::require(target != y, kModule, "target class equals the true label");
  return run_pgd(surrogate, x, y, target, budget, seed);
}

double square_p_selection(double p_init, std::uint64_t it, std::uint64_t n_iters) {
  const std::uint64_t s = n_iters == 0 ? 0 : it * 10000 / n_iters;
  if (s <= 10) return p_init;
  if (s <= 50) return p_init / 2;
  if (s <= 200) return p_init / 4;
  if (s <= 500) return p_init / 8;
  if (s <= 1000) return p_init / 16;
  if (s <= 2000) return p_init / 32;
  if (s <= 4000) return p_init / 64;
  if (s <= 6000) return p_init / 128;
  if (s <= 8000) return p_init / 256;
  return p_init / 512;
}

AttackResult square_attack(QueryAccess& access, const Tensor<float>& x, Label y,
                           const AttackBudget& budget, std::uint64_t seed) {
  budget.validate();
  detail::require(x.rank() == 3, kModule, "square_attack expects a single {C,H,W} image");
  for (float v : x.data())
    detail::require(v >= 0.0f && v <= 1.0f, kModule, "input pixels must be in [0,1]");
  const std::size_t C = x.extent(0), H = x.extent(1), W = x.extent(2);
  const float eps = budget.eps();
  const std::uint32_t k = budget.eot_samples;
  const std::uint64_t start = access.queries();

  AttackResult out;
  out.x_adv = x;
  if (budget.query_budget < k) return out;

  Rng rng(derive_seed(seed, 0x53515200ULL));
  auto pm = [&](void) { return rng.bernoulli(0.5) ? eps : -eps; };

  // Mean margin over k queries, and whether the mean prediction is wrong.
  auto loss = [&](const Tensor<float>& img) {
    Tensor<float> batch = as_batch(img);
    std::vector<double> mean;
    for (std::uint32_t q = 0; q < k; ++q) {
      const Tensor<float> p = access.query(batch);
      check_label(y, p.extent(1), "label");
      if (mean.empty()) mean.assign(p.extent(1), 0.0);
      for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += p.row(0)[c];
    }
    std::vector<float> avg(mean.size());
    for (std::size_t c = 0; c < avg.size(); ++c) avg[c] = static_cast<float>(mean[c] / k);
    return std::pair{margin_of(avg, y), classify(avg) != y};
  };

  // Vertical stripes: one random sign per (channel, column).
  Tensor<float> delta(x.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t w = 0; w < W; ++w) {
      const float s = pm();
      for (std::size_t h = 0; h < H; ++h) delta[(c * H + h) * W + w] = s;
    }
  Tensor<float> best = x;
  for (std::size_t i = 0; i < x.size(); ++i) best[i] = std::clamp(x[i] + delta[i], 0.0f, 1.0f);
  auto [best_margin, done] = loss(best);

  const std::uint64_t n_iters = budget.query_budget / k;
  Tensor<float> cand = best;
  for (std::uint64_t it = 0; !done && access.queries() - start + k <= budget.query_budget; ++it) {
    for (std::size_t i = 0; i < x.size(); ++i) delta[i] = best[i] - x[i];
    const double p = square_p_selection(budget.p_init, it, n_iters);
    auto side = static_cast<std::size_t>(std::lround(std::sqrt(p * static_cast<double>(H * W))));
    side = std::clamp<std::size_t>(side, 1, std::min(H, W) - 1);
    const auto top = static_cast<std::size_t>(rng.uniform_index(H - side + 1));
    const auto left = static_cast<std::size_t>(rng.uniform_index(W - side + 1));

    // Resample the window's per-channel signs until it changes something.
    for (int tries = 0; tries < 100; ++tries) {
      bool same = true;
      for (std::size_t c = 0; c < C && same; ++c)
        for (std::size_t h = top; h < top + side && same; ++h)
          for (std::size_t w = left; w < left + side && same; ++w) {
            const std::size_t i = (c * H + h) * W + w;
            same = std::abs(std::clamp(x[i] + delta[i], 0.0f, 1.0f) - best[i]) < 1e-7f;
          }
      if (!same) break;
      for (std::size_t c = 0; c < C; ++c) {
        const float s = pm();
        for (std::size_t h = top; h < top + side; ++h)
          for (std::size_t w = left; w < left + side; ++w) delta[(c * H + h) * W + w] = s;
      }
    }
    for (std::size_t i = 0; i < x.size(); ++i) cand[i] = std::clamp(x[i] + delta[i], 0.0f, 1.0f);
    const auto [m, wrong] = loss(cand);
    if (m < best_margin) {
      best_margin = m;
      best = cand;
      done = wrong;
    }
  }
  out.x_adv = std::move(best);
  out.success = done;
  out.queries_used = access.queries() - start;
  out.linf_norm = linf(out.x_adv, x);
  return out;
}

SuiteResult run_suite(const EnsembleModel& target, const AttackerKnowledge& knowledge,
                      LabeledImages testset, const SuiteConfig& config) {
  config.budget.validate();
  const std::size_t n = testset.labels.size();
  detail::require(n > 0, kModule, "empty test set");
  detail::require(testset.images.rank() == 4 && testset.images.extent(0) == n, kModule,
                  "test images must be {N,C,H,W} with one label each");
  const bool gradient_attacks = config.pgd_ce || config.pgd_targeted;
  detail::require(!gradient_attacks || knowledge.surrogate != nullptr, kModule,
                  "gradient attacks need a surrogate");
  const std::size_t k = target.num_classes();
  detail::require(!config.pgd_targeted || (config.targets_per_image >= 1 &&
                                           config.targets_per_image < k),
                  kModule, "targets_per_image must be in [1, K-1]");

  SuiteResult result;
  result.images.resize(n);

  auto run_one = [&](std::size_t i) {
    const Tensor<float> x = testset.images.slice(i);
    const Label y = testset.labels[i];
    EnsembleModel ens = target.split(derive_seed(config.seed, 0x5355495445ULL, i));
    auto correct = [&](const Tensor<float>& img) { return classify(ens.predict(img).row(0)) == y; };
    const std::uint64_t seed = derive_seed(config.seed, 0x41545441ULL, i);

    ImageOutcome o;
    o.clean = correct(x);
    o.aa = o.clean;
    if (config.pgd_ce) {
      o.pgd_ce = correct(pgd_ce(*knowledge.surrogate, x, y, config.budget, seed).x_adv);
      o.aa = o.aa && *o.pgd_ce;
    }
    if (config.pgd_targeted) {
      bool ok = true;
      for (std::uint32_t j = 0; j < config.targets_per_image; ++j) {
        const auto offset = 1 + (i + j) % (k - 1);
        const auto t = static_cast<Label>((static_cast<std::size_t>(y) + offset) % k);
        ok = correct(pgd_targeted(*knowledge.surrogate, x, y, t, config.budget,
                                  derive_seed(seed, j + 1)).x_adv) && ok;
      }
      o.pgd_targeted = ok;
      o.aa = o.aa && ok;
    }
    if (config.square) {
      QueryAccess access = QueryAccess::of(ens, config.output);
      const AttackResult r = square_attack(access, x, y, config.budget, seed);
      o.square_queries = r.queries_used;
      o.square = correct(r.x_adv);
      o.aa = o.aa && *o.square;
    }
    result.images[i] = o;
  };

  const unsigned jobs = std::max(1u, std::min<unsigned>(config.jobs, static_cast<unsigned>(n)));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(jobs);
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < jobs; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i; (i = next.fetch_add(1)) < n;) run_one(i);
        } catch (...) {
          errors[w] = std::current_exception();
          next.store(n);
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  auto pct = [n](std::size_t c) { return 100.0 * static_cast<double>(c) / static_cast<double>(n); };
  std::size_t clean = 0, ce = 0, tg = 0, sq = 0, aa = 0;
  for (const ImageOutcome& o : result.images) {
    clean += o.clean;
    ce += o.pgd_ce.value_or(false);
    tg += o.pgd_targeted.value_or(false);
    sq += o.square.value_or(false);
    aa += o.aa;
  }
  result.clean = pct(clean);
  if (config.pgd_ce) result.pgd_ce = pct(ce);
  if (config.pgd_targeted) result.pgd_targeted = pct(tg);
  if (config.square) result.square = pct(sq);
  result.aa = pct(aa);
  return result;
}

}  // namespace encvit
