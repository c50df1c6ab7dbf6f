#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "encvit/ensemble.hpp"
#include "encvit/perm.hpp"
#include "encvit/vit.hpp"

namespace encvit {

/// Exact p/q, so "8/255" prints back unchanged in reports.
struct Rational {
  std::int64_t num = 8;
  std::int64_t den = 255;

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  std::string str() const;
  /// Accepts "p/q", an integer or a plain decimal ("0.03" -> 3/100).
  static Rational parse(const std::string& text);
  friend bool operator==(const Rational&, const Rational&) = default;
};

struct AttackBudget {
  Rational epsilon{8, 255};
  /// Initial PGD step; unset means 2 * epsilon.
  std::optional<Rational> alpha;
  std::uint32_t steps = 20;
  /// Total number of PGD runs; runs after the first use a random start.
  std::uint32_t restarts = 1;
  bool random_start = false;
  std::uint64_t query_budget = 1000;
  double p_init = 0.8;
  /// Square Attack: queries averaged per loss evaluation (1 = off).
  std::uint32_t eot_samples = 1;

  float eps() const { return static_cast<float>(epsilon.value()); }
  float step_size() const;
  void validate() const;
};

/// "eps=8/255,steps=20,restarts=1,queries=1000,p_init=0.8,alpha=2/255,
/// random_start=1,eot=1"; omitted keys keep their defaults.
AttackBudget parse_budget(const std::string& text);
std::string format_budget(const AttackBudget& budget);

struct AttackResult {
  Tensor<float> x_adv;
  /// Judged by the model the attack could see: the surrogate for gradient
  /// attacks, the last query for Square.
  bool success = false;
  std::uint64_t queries_used = 0;
  std::uint64_t gradient_calls = 0;
  double linf_norm = 0;
  /// PGD: best objective at each checkpoint and at the end (per run).
  std::vector<double> checkpoint_best_loss;
};

/// Differentiable stand-in the attacker builds from their knowledge.
class Surrogate {
 public:
  struct Evaluation {
    Tensor<float> probs;      // {B,K}
    std::vector<double> loss; // -log p[label], per image
    Tensor<float> gradient;   // d(sum loss)/dx, empty unless requested
  };

  virtual ~Surrogate() = default;
  virtual std::size_t num_classes() const = 0;
  virtual ImageGeometry geometry() const = 0;

  Evaluation evaluate(const Tensor<float>& x, std::span<const Label> labels,
                      bool with_gradient) const {
    if (with_gradient) gradient_calls_.fetch_add(1);
    return do_evaluate(x, labels, with_gradient);
  }
  Tensor<float> probabilities(const Tensor<float>& x) const;

  std::uint64_t gradient_calls() const { return gradient_calls_.load(); }

 protected:
  virtual Evaluation do_evaluate(const Tensor<float>& x, std::span<const Label> labels,
                                 bool with_gradient) const = 0;

 private:
  mutable std::atomic<std::uint64_t> gradient_calls_{0};
};

/// Average of softmax outputs of its members, member i seeing the input
/// encrypted with its key (or the plain input when it has none).
class ModelSurrogate : public Surrogate {
 public:
  struct Member {
    std::shared_ptr<const VitParams<float>> params;
    std::optional<PermutationKey> key;
  };

  ModelSurrogate(std::vector<Member> members, std::uint32_t block);

  std::size_t size() const { return members_.size(); }
  std::size_t num_classes() const override;
  ImageGeometry geometry() const override;

 protected:
  Evaluation do_evaluate(const Tensor<float>& x, std::span<const Label> labels,
                         bool with_gradient) const override;

 private:
  std::vector<Member> members_;
  std::uint32_t block_;
};

/// Plain-trained model, no keys: the 0-key attacker.
std::shared_ptr<const Surrogate> plain_surrogate(std::shared_ptr<const VitParams<float>> params);

/// Leaked sub-models of `target` with their true keys. Empty ids give null.
std::shared_ptr<const Surrogate> leaked_key_surrogate(const EnsembleModel& target,
                                                      std::span<const std::string> key_ids);

enum class OutputMode { probabilities, label };

/// Prediction handle for black-box attacks. Counts one query per image.
/// Label mode answers with one-hot vectors.
class QueryAccess {
 public:
  using Predictor = std::function<Tensor<float>(const Tensor<float>&)>;

  explicit QueryAccess(Predictor predictor, OutputMode mode = OutputMode::probabilities);
  static QueryAccess of(EnsembleModel& model, OutputMode mode = OutputMode::probabilities);

  Tensor<float> query(const Tensor<float>& x);
  std::uint64_t queries() const { return queries_; }
  OutputMode mode() const { return mode_; }

 private:
  Predictor predictor_;
  OutputMode mode_;
  std::uint64_t queries_ = 0;
};

struct AttackerKnowledge {
  std::vector<std::string> leaked_key_ids;
  std::shared_ptr<const Surrogate> surrogate;
  std::string description;
};

/// x + eps * sign(grad CE), clipped to [0,1]; sign(0) = 0.
AttackResult fgsm(const Surrogate& surrogate, const Tensor<float>& x, Label y,
                  const Rational& epsilon);

/// Untargeted PGD on the cross-entropy with stagnation-triggered step
/// halving; returns the best of iterates 1..steps over all runs.
AttackResult pgd_ce(const Surrogate& surrogate, const Tensor<float>& x, Label y,
                    const AttackBudget& budget, std::uint64_t seed = 0);

/// Targeted PGD (descends the cross-entropy of `target`). Rejects target == y.
AttackResult pgd_targeted(const Surrogate& surrogate, const Tensor<float>& x, Label y,
                          Label target, const AttackBudget& budget, std::uint64_t seed = 0);

/// Linf Square Attack with margin loss p_y - max_{j!=y} p_j. Never calls
/// anything but query().
AttackResult square_attack(QueryAccess& access, const Tensor<float>& x, Label y,
                           const AttackBudget& budget, std::uint64_t seed = 0);

/// Side-length fraction schedule of the Square Attack at iteration `it`
/// of `n_iters`.
double square_p_selection(double p_init, std::uint64_t it, std::uint64_t n_iters);

struct SuiteConfig {
  AttackBudget budget;
  bool pgd_ce = true;
  bool pgd_targeted = true;
  bool square = true;
  /// Targets tried per image, cycling over the non-true classes by index.
  std::uint32_t targets_per_image = 1;
  OutputMode output = OutputMode::probabilities;
  std::uint64_t seed = 0;
  unsigned jobs = 1;
};

struct ImageOutcome {
  bool clean = false;
  std::optional<bool> pgd_ce, pgd_targeted, square;
  bool aa = false;
  std::uint64_t square_queries = 0;
};

struct SuiteResult {
  std::vector<ImageOutcome> images;
  /// Percent of images classified correctly on the clean input / after each
  /// attack, each judged by one fresh target query. AA requires all.
  double clean = 0;
  std::optional<double> pgd_ce, pgd_targeted, square;
  double aa = 0;
};

/// Gradient attacks run on knowledge.surrogate and transfer; Square queries
/// the target. Image i uses the target stream split(derive_seed(seed, i)).
SuiteResult run_suite(const EnsembleModel& target, const AttackerKnowledge& knowledge,
                      LabeledImages testset, const SuiteConfig& config);

}  // namespace encvit
