#pragma once

// Tiny patch-embedding transformer classifier with hand-written backward
// passes. Everything here is templated on the scalar type: float is used for
// training and attacks, double exists for finite-difference checking.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "encvit/tensor.hpp"

namespace encvit {

using Label = std::int32_t;

struct VitConfig {
  ImageGeometry image{3, 32, 32};
  std::uint32_t patch = 4;
  std::uint32_t embed_dim = 64;
  std::uint32_t depth = 2;
  std::uint32_t heads = 4;
  std::uint32_t num_classes = 10;

  /// Hidden width of each MLP is kMlpRatio * embed_dim.
  static constexpr std::uint32_t kMlpRatio = 2;
  /// Fixed pixel normalization (x - kInputMean) * kInputScale ahead of the
  /// patch embedding. Elementwise, so it commutes with block shuffling; it
  /// only conditions SGD, the bias could absorb the shift.
  static constexpr double kInputMean = 0.5;
  static constexpr double kInputScale = 4.0;

  /// Throws InvalidInput unless every extent is positive, the image divides
  /// into patches and embed_dim divides into heads.
  void validate() const;

  BlockGrid grid() const { return BlockGrid(image, patch); }
  std::size_t num_patches() const { return grid().num_blocks(); }
  std::size_t tokens() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return grid().block_pixels(); }
  std::size_t mlp_hidden() const { return std::size_t{kMlpRatio} * embed_dim; }

  friend bool operator==(const VitConfig&, const VitConfig&) = default;
};

struct ParamEntry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t size() const { return shape_size(shape); }
};

/// Named parameter tensors in their fixed storage order.
std::vector<ParamEntry> param_layout(const VitConfig& config);

/// All trainable parameters of the classifier in one flat buffer. Gradients
/// use the same type so optimizers and checkers can treat both as vectors.
template <class T>
class VitParams {
 public:
  explicit VitParams(const VitConfig& config);

  const VitConfig& config() const { return config_; }
  const std::vector<ParamEntry>& layout() const { return layout_; }

  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  std::size_t size() const { return values_.size(); }

  std::span<T> tensor(std::string_view name);
  std::span<const T> tensor(std::string_view name) const;
  const ParamEntry& entry(std::string_view name) const;

  template <class U>
  VitParams<U> cast() const {
    VitParams<U> out(config_);
    for (std::size_t i = 0; i < values_.size(); ++i)
      out.values()[i] = static_cast<U>(values_[i]);
    return out;
  }

  friend bool operator==(const VitParams& a, const VitParams& b) {
    return a.config_ == b.config_ && a.values_ == b.values_;
  }

 private:
  VitConfig config_;
  std::vector<ParamEntry> layout_;
  AlignedVector<T> values_;
};

/// Truncated-normal (sigma 0.02) weights, zero biases, unit layer-norm gains.
template <class T>
VitParams<T> init_params(const VitConfig& config, std::uint64_t seed);

/// Split a {C,H,W} image into {num_patches, C*M*M} using the shared block
/// ordering of BlockGrid.
template <class T>
Tensor<T> patchify(const Tensor<T>& image, std::uint32_t patch);

/// Logits {B, num_classes} for a batch {B,C,H,W} or a single image {C,H,W}.
template <class T>
Tensor<T> forward(const VitParams<T>& params, const Tensor<T>& images);

/// Row-wise softmax of {B, K} scores.
template <class T>
Tensor<T> softmax(const Tensor<T>& logits);

/// Mean over the batch of -log softmax(logits)[label].
template <class T>
T cross_entropy(const Tensor<T>& logits, std::span<const Label> labels);

/// Vector-Jacobian product: d(sum_b <dlogits_b, logits_b>)/d(images).
/// Result has the shape of `images`.
template <class T>
Tensor<T> input_vjp(const VitParams<T>& params, const Tensor<T>& images,
                    const Tensor<T>& dlogits);

/// Gradient w.r.t. the pixels of the cross-entropy summed over the batch,
/// so the gradient of a batch is the per-image gradients stacked.
template <class T>
Tensor<T> input_gradient(const VitParams<T>& params, const Tensor<T>& images,
                         std::span<const Label> labels);

template <class T>
struct LossAndGradients {
  T loss;
  VitParams<T> gradients;
};

/// Mean cross-entropy and its gradient w.r.t. every parameter.
template <class T>
LossAndGradients<T> loss_and_gradients(const VitParams<T>& params,
                                       const Tensor<T>& images,
                                       std::span<const Label> labels);

template <class T>
VitParams<T> param_gradients(const VitParams<T>& params,
                             const Tensor<T>& images,
                             std::span<const Label> labels) {
  return loss_and_gradients(params, images, labels).gradients;
}

/// Relative error between two gradients: max_i |a_i - b_i| divided by the
/// larger of the two max-norms. Both zero gives 0.
double gradient_error(std::span<const double> analytic,
                      std::span<const double> numeric);

/// Compare input_gradient against central differences with the given step.
double grad_check(const VitParams<double>& params, const Tensor<double>& x,
                  std::span<const Label> labels, double step);

/// Same, on a random subsample of pixel coordinates (each kept with
/// probability `fraction`).
double grad_check(const VitParams<double>& params, const Tensor<double>& x,
                  std::span<const Label> labels, double step, double fraction,
                  std::uint64_t seed);

/// Same for parameter gradients on a random subsample of coordinates.
double grad_check_params(const VitParams<double>& params,
                         const Tensor<double>& x,
                         std::span<const Label> labels, double step,
                         double fraction, std::uint64_t seed);

/// Process-wide count of backward passes (training steps, input gradients
/// and VJPs). Lets tests prove a code path never touched gradients.
std::uint64_t backward_pass_count();

struct TrainConfig {
  double learning_rate = 0.03;
  double momentum = 0.9;
  std::uint32_t epochs = 20;
  std::uint32_t batch_size = 64;
  std::uint64_t rng_seed = 0;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 1.0;
  /// Stop after this many epochs without validation improvement; 0 disables.
  std::uint32_t patience = 0;
  /// Linear warmup length in epochs, then cosine decay to zero when
  /// `cosine` is set; otherwise the rate stays constant after warmup.
  std::uint32_t warmup_epochs = 0;
  bool cosine = false;

  void validate() const;
};

struct EpochStats {
  std::uint32_t epoch = 0;
  double loss = 0;
  double train_accuracy = 0;
  std::optional<double> val_accuracy;
};

struct TrainResult {
  VitParams<float> params;
  std::vector<EpochStats> trace;
};

struct LabeledImages {
  const Tensor<float>& images;  // {N,C,H,W}
  std::span<const Label> labels;
};

/// Minibatch SGD with momentum (v = mu*v + g; w -= lr*v) starting from
/// `params`. Shuffling is driven by config.rng_seed. With a validation set
/// the parameters of the best validation epoch are returned.
TrainResult train(VitParams<float> params, LabeledImages data,
                  const TrainConfig& config,
                  std::optional<LabeledImages> validation = std::nullopt);

/// Initialize from config.rng_seed and train.
TrainResult train(const VitConfig& model, LabeledImages data,
                  const TrainConfig& config,
                  std::optional<LabeledImages> validation = std::nullopt);

/// Arg-max labels, evaluated in chunks of `batch`.
std::vector<Label> predict_labels(const VitParams<float>& params,
                                  const Tensor<float>& images,
                                  std::size_t batch = 128);

double accuracy(const VitParams<float>& params, LabeledImages data);

/// TVIT weight container (little-endian).
std::vector<std::uint8_t> encode_weights(const VitParams<float>& params);
VitParams<float> decode_weights(std::span<const std::uint8_t> bytes);

}  // namespace encvit
