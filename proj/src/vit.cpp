#include "encvit/vit.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <numbers>

#include "encvit/bytes.hpp"
#include "encvit/rng.hpp"

namespace encvit {
namespace {

std::atomic<std::uint64_t> g_backward_calls{0};

using Eigen::Dynamic;
using Eigen::Index;

template <class T>
using Mat = Eigen::Matrix<T, Dynamic, Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<Mat<T>>;
template <class T>
using CMatMap = Eigen::Map<const Mat<T>>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Dynamic>;
template <class T>
using ColVec = Eigen::Matrix<T, Dynamic, 1>;
template <class T>
using VecMap = Eigen::Map<RowVec<T>>;
template <class T>
using CVecMap = Eigen::Map<const RowVec<T>>;

constexpr double kLayerNormEps = 1e-6;
constexpr const char* kModule = "vit";

// Storage order of the layout; the per-block entries repeat `depth` times.
enum TopEntry : std::size_t { kPatchW, kPatchB, kCls, kPos, kTopCount };
enum BlockEntry : std::size_t {
  kN1W, kN1B, kQkvW, kQkvB, kProjW, kProjB,
  kN2W, kN2B, kFc1W, kFc1B, kFc2W, kFc2B, kBlockCount
};
enum TailEntry : std::size_t { kNormW, kNormB, kHeadW, kHeadB };

std::size_t block_index(std::size_t layer, BlockEntry e) {
  return kTopCount + layer * kBlockCount + e;
}
std::size_t tail_index(const VitConfig& c, TailEntry e) {
  return kTopCount + c.depth * kBlockCount + e;
}

template <class T>
CMatMap<T> cmat(const VitParams<T>& p, std::size_t idx) {
  const auto& e = p.layout()[idx];
  return CMatMap<T>(p.values().data() + e.offset, static_cast<Index>(e.shape[0]),
                    static_cast<Index>(e.shape[1]));
}
template <class T>
CVecMap<T> cvec(const VitParams<T>& p, std::size_t idx) {
  const auto& e = p.layout()[idx];
  return CVecMap<T>(p.values().data() + e.offset, static_cast<Index>(e.size()));
}
template <class T>
MatMap<T> mat(VitParams<T>& p, std::size_t idx) {
  const auto& e = p.layout()[idx];
  return MatMap<T>(p.values().data() + e.offset, static_cast<Index>(e.shape[0]),
                   static_cast<Index>(e.shape[1]));
}
template <class T>
VecMap<T> vec(VitParams<T>& p, std::size_t idx) {
  const auto& e = p.layout()[idx];
  return VecMap<T>(p.values().data() + e.offset, static_cast<Index>(e.size()));
}

template <class T>
void layer_norm(const Mat<T>& x, const CVecMap<T>& gamma,
                const CVecMap<T>& beta, Mat<T>& xhat, ColVec<T>& rstd,
                Mat<T>& y) {
  const Index n = x.rows();
  xhat.resize(n, x.cols());
  rstd.resize(n);
  for (Index r = 0; r < n; ++r) {
    const T mu = x.row(r).mean();
    xhat.row(r) = x.row(r).array() - mu;
    const T var = xhat.row(r).squaredNorm() / static_cast<T>(x.cols());
    rstd(r) = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    xhat.row(r) *= rstd(r);
  }
  y = (xhat.array().rowwise() * gamma.array()).rowwise() + beta.array();
}

// Accumulates into dx; parameter gradients are skipped when dgamma is null.
template <class T>
void layer_norm_backward(const Mat<T>& dy, const Mat<T>& xhat,
                         const ColVec<T>& rstd, const CVecMap<T>& gamma,
                         Mat<T>& dx, VecMap<T>* dgamma, VecMap<T>* dbeta) {
  const T inv_d = T(1) / static_cast<T>(dy.cols());
  const Mat<T> dxhat = dy.array().rowwise() * gamma.array();
  for (Index r = 0; r < dy.rows(); ++r) {
    const T m1 = dxhat.row(r).sum() * inv_d;
    const T m2 = dxhat.row(r).dot(xhat.row(r)) * inv_d;
    dx.row(r).array() +=
        rstd(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
  }
  if (dgamma) *dgamma += dy.cwiseProduct(xhat).colwise().sum();
  if (dbeta) *dbeta += dy.colwise().sum();
}

template <class T>
constexpr T kGeluC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <class T>
constexpr T kGeluA = static_cast<T>(0.044715);

// Tanh approximation of GELU.
template <class T>
void gelu(const Mat<T>& x, Mat<T>& y) {
  const auto a = x.array();
  y = (T(0.5) * a * (T(1) + (kGeluC<T> * (a + kGeluA<T> * a.cube())).tanh()))
          .matrix();
}

template <class T>
void gelu_backward_inplace(const Mat<T>& x, Mat<T>& dy) {
  const auto a = x.array();
  const auto t = (kGeluC<T> * (a + kGeluA<T> * a.cube())).tanh().eval();
  const auto d = T(0.5) * (T(1) + t) +
                 T(0.5) * a * (T(1) - t.square()) * kGeluC<T> *
                     (T(1) + T(3) * kGeluA<T> * a.square());
  dy.array() *= d;
}

// out = a * b evaluated one chunk of rows at a time. Every image occupies
// its own chunk, so an image's result does not depend on the batch it is in
// (the GEMM kernel's blocking, and with it the rounding, varies with the row
// count).
template <class T, class A, class B>
void rowwise_product(const A& a, const B& b, Mat<T>& out, Index chunk) {
  out.resize(a.rows(), b.cols());
  if (chunk == 1) {
    for (Index r = 0; r < a.rows(); ++r)
      for (Index j = 0; j < b.cols(); ++j) {
        T acc = 0;
        for (Index k = 0; k < a.cols(); ++k) acc += a(r, k) * b(k, j);
        out(r, j) = acc;
      }
    return;
  }
  for (Index r = 0; r < a.rows(); r += chunk)
    out.middleRows(r, chunk).noalias() = a.middleRows(r, chunk) * b;
}

// Stride between attention maps, padded so every map starts 64-byte aligned.
Index prob_stride(Index tokens) { return (tokens * tokens + 15) / 16 * 16; }

template <class T>
struct BlockCache {
  Mat<T> x_in, xhat1, ln1, qkv, attn, x_mid, xhat2, ln2, h_pre, h_act;
  ColVec<T> rstd1, rstd2;
  AlignedVector<T> probs;  // {B, heads, T, T}, each T x T map 64-byte aligned
};

template <class T>
struct ForwardCache {
  std::size_t batch = 0;
  Mat<T> patches;  // {B*P, patch_dim}
  std::vector<BlockCache<T>> blocks;
  Mat<T> cls_hat, cls_ln;
  ColVec<T> cls_rstd;
  Mat<T> logits;
};

std::vector<std::size_t> block_offsets(const BlockGrid& grid) {
  std::vector<std::size_t> off(grid.num_blocks() * grid.block_pixels());
  std::size_t n = 0;
  for (std::size_t b = 0; b < grid.num_blocks(); ++b)
    for (std::size_t k = 0; k < grid.block_pixels(); ++k)
      off[n++] = grid.offset(b, k);
  return off;
}

// Returns the batch size after checking images against the configuration.
template <class T>
std::size_t check_images(const VitConfig& cfg, const Tensor<T>& images) {
  const Shape img = cfg.image.shape();
  if (images.rank() == 3) {
    detail::require(images.shape() == img, kModule,
                    "image shape " + shape_string(images.shape()) +
                        " does not match model geometry " + shape_string(img));
    return 1;
  }
  detail::require(images.rank() == 4 &&
                      Shape(images.shape().begin() + 1, images.shape().end()) ==
                          img,
                  kModule,
                  "batch shape " + shape_string(images.shape()) +
                      " does not match model geometry " + shape_string(img));
  return images.extent(0);
}

template <class T>
void check_labels(const VitConfig& cfg, std::size_t batch,
                  std::span<const Label> labels) {
  detail::require(labels.size() == batch, kModule,
                  "label count does not match batch size");
  for (Label y : labels)
    detail::require(y >= 0 && static_cast<std::uint32_t>(y) < cfg.num_classes,
                    kModule, "label " + std::to_string(y) + " out of range");
}

template <class T>
ForwardCache<T> run_forward(const VitParams<T>& p,
                            std::span<const T* const> images) {
  const VitConfig& cfg = p.config();
  const BlockGrid grid = cfg.grid();
  const Index B = static_cast<Index>(images.size());
  const Index P = static_cast<Index>(grid.num_blocks());
  const Index pd = static_cast<Index>(grid.block_pixels());
  const Index Tk = P + 1;
  const Index d = cfg.embed_dim;
  const Index H = cfg.heads;
  const Index dh = d / H;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  ForwardCache<T> c;
  c.batch = static_cast<std::size_t>(B);
  c.patches.resize(B * P, pd);
  const auto offsets = block_offsets(grid);
  for (Index b = 0; b < B; ++b) {
    T* row = c.patches.data() + b * P * pd;
    const T* img = images[static_cast<std::size_t>(b)];
    for (std::size_t i = 0; i < offsets.size(); ++i)
      row[i] = (img[offsets[i]] - T(VitConfig::kInputMean)) * T(VitConfig::kInputScale);
  }

  Mat<T> emb;
  rowwise_product(c.patches, cmat(p, kPatchW), emb, P);
  emb.rowwise() += cvec(p, kPatchB);
  const CMatMap<T> pos = cmat(p, kPos);
  const CVecMap<T> cls = cvec(p, kCls);

  Mat<T> x(B * Tk, d);
  for (Index b = 0; b < B; ++b) {
    x.row(b * Tk) = cls + pos.row(0);
    x.block(b * Tk + 1, 0, P, d) = emb.block(b * P, 0, P, d) + pos.bottomRows(P);
  }

  c.blocks.resize(cfg.depth);
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    BlockCache<T>& bc = c.blocks[l];
    bc.x_in = std::move(x);
    layer_norm(bc.x_in, cvec(p, block_index(l, kN1W)),
               cvec(p, block_index(l, kN1B)), bc.xhat1, bc.rstd1, bc.ln1);
    rowwise_product(bc.ln1, cmat(p, block_index(l, kQkvW)), bc.qkv, Tk);
    bc.qkv.rowwise() += cvec(p, block_index(l, kQkvB));

    bc.attn.resize(B * Tk, d);
    bc.probs.resize(static_cast<std::size_t>(B * H * prob_stride(Tk)));
    for (Index b = 0; b < B; ++b) {
      for (Index h = 0; h < H; ++h) {
        const auto q = bc.qkv.block(b * Tk, h * dh, Tk, dh);
        const auto k = bc.qkv.block(b * Tk, d + h * dh, Tk, dh);
        const auto v = bc.qkv.block(b * Tk, 2 * d + h * dh, Tk, dh);
        MatMap<T> s(bc.probs.data() + (b * H + h) * prob_stride(Tk), Tk, Tk);
        s.noalias() = q * k.transpose();
        s *= scale;
        const ColVec<T> m = s.rowwise().maxCoeff();
        s = (s.colwise() - m).array().exp().matrix();
        const ColVec<T> z = s.rowwise().sum();
        s.array().colwise() /= z.array();
        bc.attn.block(b * Tk, h * dh, Tk, dh).noalias() = s * v;
      }
    }
    rowwise_product(bc.attn, cmat(p, block_index(l, kProjW)), bc.x_mid, Tk);
    bc.x_mid += bc.x_in;
    bc.x_mid.rowwise() += cvec(p, block_index(l, kProjB));

    layer_norm(bc.x_mid, cvec(p, block_index(l, kN2W)),
               cvec(p, block_index(l, kN2B)), bc.xhat2, bc.rstd2, bc.ln2);
    rowwise_product(bc.ln2, cmat(p, block_index(l, kFc1W)), bc.h_pre, Tk);
    bc.h_pre.rowwise() += cvec(p, block_index(l, kFc1B));
    gelu(bc.h_pre, bc.h_act);
    rowwise_product(bc.h_act, cmat(p, block_index(l, kFc2W)), x, Tk);
    x += bc.x_mid;
    x.rowwise() += cvec(p, block_index(l, kFc2B));
  }

  Mat<T> cls_out(B, d);
  for (Index b = 0; b < B; ++b) cls_out.row(b) = x.row(b * Tk);
  layer_norm(cls_out, cvec(p, tail_index(cfg, kNormW)),
             cvec(p, tail_index(cfg, kNormB)), c.cls_hat, c.cls_rstd, c.cls_ln);
  rowwise_product(c.cls_ln, cmat(p, tail_index(cfg, kHeadW)), c.logits, 1);
  c.logits.rowwise() += cvec(p, tail_index(cfg, kHeadB));
  return c;
}

// Backpropagates dlogits through a cached forward pass. Parameter gradients
// are accumulated into `grads` when non-null; input gradients are written
// into `dimages` (one pointer per batch entry) when non-empty.
template <class T>
void run_backward(const VitParams<T>& p, const ForwardCache<T>& c,
                  const Mat<T>& dlogits, VitParams<T>* grads,
                  std::span<T* const> dimages) {
  g_backward_calls.fetch_add(1, std::memory_order_relaxed);
  const VitConfig& cfg = p.config();
  const BlockGrid grid = cfg.grid();
  const Index B = static_cast<Index>(c.batch);
  const Index P = static_cast<Index>(grid.num_blocks());
  const Index Tk = P + 1;
  const Index d = cfg.embed_dim;
  const Index H = cfg.heads;
  const Index dh = d / H;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const bool pg = grads != nullptr;

  if (pg) {
    mat(*grads, tail_index(cfg, kHeadW)).noalias() += c.cls_ln.transpose() * dlogits;
    vec(*grads, tail_index(cfg, kHeadB)) += dlogits.colwise().sum();
  }
  Mat<T> dcls_ln;
  rowwise_product(dlogits, cmat(p, tail_index(cfg, kHeadW)).transpose(), dcls_ln, 1);
  Mat<T> dcls = Mat<T>::Zero(B, d);
  {
    std::optional<VecMap<T>> gw, gb;
    if (pg) {
      gw.emplace(vec(*grads, tail_index(cfg, kNormW)));
      gb.emplace(vec(*grads, tail_index(cfg, kNormB)));
    }
    layer_norm_backward(dcls_ln, c.cls_hat, c.cls_rstd,
                        cvec(p, tail_index(cfg, kNormW)), dcls,
                        gw ? &*gw : nullptr, gb ? &*gb : nullptr);
  }
  Mat<T> dx = Mat<T>::Zero(B * Tk, d);
  for (Index b = 0; b < B; ++b) dx.row(b * Tk) = dcls.row(b);

  for (std::size_t li = cfg.depth; li-- > 0;) {
    const BlockCache<T>& bc = c.blocks[li];
    auto bi = [&](BlockEntry e) { return block_index(li, e); };

    // MLP branch.
    if (pg) {
      mat(*grads, bi(kFc2W)).noalias() += bc.h_act.transpose() * dx;
      vec(*grads, bi(kFc2B)) += dx.colwise().sum();
    }
    Mat<T> dh_act;
    rowwise_product(dx, cmat(p, bi(kFc2W)).transpose(), dh_act, Tk);
    gelu_backward_inplace(bc.h_pre, dh_act);
    if (pg) {
      mat(*grads, bi(kFc1W)).noalias() += bc.ln2.transpose() * dh_act;
      vec(*grads, bi(kFc1B)) += dh_act.colwise().sum();
    }
    Mat<T> dln2;
    rowwise_product(dh_act, cmat(p, bi(kFc1W)).transpose(), dln2, Tk);
    Mat<T> dmid = dx;
    {
      std::optional<VecMap<T>> gw, gb;
      if (pg) {
        gw.emplace(vec(*grads, bi(kN2W)));
        gb.emplace(vec(*grads, bi(kN2B)));
      }
      layer_norm_backward(dln2, bc.xhat2, bc.rstd2, cvec(p, bi(kN2W)), dmid,
                          gw ? &*gw : nullptr, gb ? &*gb : nullptr);
    }

    // Attention branch.
    if (pg) {
      mat(*grads, bi(kProjW)).noalias() += bc.attn.transpose() * dmid;
      vec(*grads, bi(kProjB)) += dmid.colwise().sum();
    }
    Mat<T> dattn;
    rowwise_product(dmid, cmat(p, bi(kProjW)).transpose(), dattn, Tk);
    Mat<T> dqkv(B * Tk, 3 * d);
    Mat<T> dp(Tk, Tk);
    for (Index b = 0; b < B; ++b) {
      for (Index h = 0; h < H; ++h) {
        const auto q = bc.qkv.block(b * Tk, h * dh, Tk, dh);
        const auto k = bc.qkv.block(b * Tk, d + h * dh, Tk, dh);
        const auto v = bc.qkv.block(b * Tk, 2 * d + h * dh, Tk, dh);
        const CMatMap<T> prob(bc.probs.data() + (b * H + h) * prob_stride(Tk), Tk, Tk);
        const auto dout = dattn.block(b * Tk, h * dh, Tk, dh);
        dqkv.block(b * Tk, 2 * d + h * dh, Tk, dh).noalias() =
            prob.transpose() * dout;
        dp.noalias() = dout * v.transpose();
        const ColVec<T> rs = dp.cwiseProduct(prob).rowwise().sum();
        dp = prob.cwiseProduct(dp.colwise() - rs) * scale;
        dqkv.block(b * Tk, h * dh, Tk, dh).noalias() = dp * k;
        dqkv.block(b * Tk, d + h * dh, Tk, dh).noalias() = dp.transpose() * q;
      }
    }
    if (pg) {
      mat(*grads, bi(kQkvW)).noalias() += bc.ln1.transpose() * dqkv;
      vec(*grads, bi(kQkvB)) += dqkv.colwise().sum();
    }
    Mat<T> dln1;
    rowwise_product(dqkv, cmat(p, bi(kQkvW)).transpose(), dln1, Tk);
    dx = std::move(dmid);
    {
      std::optional<VecMap<T>> gw, gb;
      if (pg) {
        gw.emplace(vec(*grads, bi(kN1W)));
        gb.emplace(vec(*grads, bi(kN1B)));
      }
      layer_norm_backward(dln1, bc.xhat1, bc.rstd1, cvec(p, bi(kN1W)), dx,
                          gw ? &*gw : nullptr, gb ? &*gb : nullptr);
    }
  }

  Mat<T> demb(B * P, d);
  for (Index b = 0; b < B; ++b) demb.block(b * P, 0, P, d) = dx.block(b * Tk + 1, 0, P, d);
  if (pg) {
    auto gpos = mat(*grads, kPos);
    auto gcls = vec(*grads, kCls);
    for (Index b = 0; b < B; ++b) {
      gpos += dx.block(b * Tk, 0, Tk, d);
      gcls += dx.row(b * Tk);
    }
    mat(*grads, kPatchW).noalias() += c.patches.transpose() * demb;
    vec(*grads, kPatchB) += demb.colwise().sum();
  }
  if (!dimages.empty()) {
    Mat<T> dpatch;
    rowwise_product(demb, cmat(p, kPatchW).transpose(), dpatch, P);
    const auto offsets = block_offsets(grid);
    for (Index b = 0; b < B; ++b) {
      const T* row = dpatch.data() + b * P * static_cast<Index>(grid.block_pixels());
      T* out = dimages[static_cast<std::size_t>(b)];
      for (std::size_t i = 0; i < offsets.size(); ++i)
        out[offsets[i]] = row[i] * T(VitConfig::kInputScale);
    }
  }
}

template <class T>
std::vector<const T*> image_pointers(const Tensor<T>& images, std::size_t batch) {
  std::vector<const T*> ptrs(batch);
  const std::size_t n = images.size() / batch;
  for (std::size_t b = 0; b < batch; ++b) ptrs[b] = images.data().data() + b * n;
  return ptrs;
}

template <class T>
std::vector<T*> image_pointers(Tensor<T>& images, std::size_t batch) {
  std::vector<T*> ptrs(batch);
  const std::size_t n = images.size() / batch;
  for (std::size_t b = 0; b < batch; ++b) ptrs[b] = images.data().data() + b * n;
  return ptrs;
}

template <class T>
Tensor<T> to_tensor(const Mat<T>& m) {
  return Tensor<T>({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                   AlignedVector<T>(m.data(), m.data() + m.size()));
}

// Gradient of the summed cross-entropy w.r.t. the logits: softmax - onehot.
template <class T>
Mat<T> cross_entropy_dlogits(const Mat<T>& logits, std::span<const Label> labels) {
  Mat<T> g = logits;
  for (Index r = 0; r < g.rows(); ++r) {
    const T m = g.row(r).maxCoeff();
    g.row(r) = (g.row(r).array() - m).exp();
    g.row(r) /= g.row(r).sum();
    g(r, labels[static_cast<std::size_t>(r)]) -= T(1);
  }
  return g;
}

template <class T>
T mean_cross_entropy(const Mat<T>& logits, std::span<const Label> labels) {
  T total = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    const T m = logits.row(r).maxCoeff();
    const T lse = m + std::log((logits.row(r).array() - m).exp().sum());
    total += lse - logits(r, labels[static_cast<std::size_t>(r)]);
  }
  return total / static_cast<T>(logits.rows());
}

}  // namespace

// ---------------------------------------------------------------------------

void VitConfig::validate() const {
  detail::require(patch > 0 && embed_dim > 0 && depth > 0 && heads > 0 &&
                      num_classes > 0,
                  kModule, "model extents must be positive");
  detail::require(embed_dim % heads == 0, kModule,
                  "embed_dim must be divisible by heads");
  (void)grid();  // checks divisibility of the image into patches
}

std::vector<ParamEntry> param_layout(const VitConfig& c) {
  c.validate();
  const std::size_t d = c.embed_dim;
  std::vector<ParamEntry> out;
  std::size_t offset = 0;
  auto add = [&](std::string name, Shape shape) {
    ParamEntry e{std::move(name), std::move(shape), offset};
    offset += e.size();
    out.push_back(std::move(e));
  };
  add("patch_embed.weight", {c.patch_dim(), d});
  add("patch_embed.bias", {d});
  add("cls_token", {d});
  add("pos_embed", {c.tokens(), d});
  for (std::size_t l = 0; l < c.depth; ++l) {
    const std::string pre = "blocks." + std::to_string(l) + ".";
    add(pre + "norm1.weight", {d});
    add(pre + "norm1.bias", {d});
    add(pre + "attn.qkv.weight", {d, 3 * d});
    add(pre + "attn.qkv.bias", {3 * d});
    add(pre + "attn.proj.weight", {d, d});
    add(pre + "attn.proj.bias", {d});
    add(pre + "norm2.weight", {d});
    add(pre + "norm2.bias", {d});
    add(pre + "mlp.fc1.weight", {d, c.mlp_hidden()});
    add(pre + "mlp.fc1.bias", {c.mlp_hidden()});
    add(pre + "mlp.fc2.weight", {c.mlp_hidden(), d});
    add(pre + "mlp.fc2.bias", {d});
  }
  add("norm.weight", {d});
  add("norm.bias", {d});
  add("head.weight", {d, c.num_classes});
  add("head.bias", {c.num_classes});
  return out;
}

template <class T>
VitParams<T>::VitParams(const VitConfig& config)
    : config_(config), layout_(param_layout(config)) {
  const auto& last = layout_.back();
  values_.assign(last.offset + last.size(), T{0});
}

template <class T>
const ParamEntry& VitParams<T>::entry(std::string_view name) const {
  for (const auto& e : layout_)
    if (e.name == name) return e;
  detail::reject(kModule, "no parameter named '" + std::string(name) + "'");
}

template <class T>
std::span<T> VitParams<T>::tensor(std::string_view name) {
  const auto& e = entry(name);
  return std::span<T>(values_).subspan(e.offset, e.size());
}

template <class T>
std::span<const T> VitParams<T>::tensor(std::string_view name) const {
  const auto& e = entry(name);
  return std::span<const T>(values_).subspan(e.offset, e.size());
}

template <class T>
VitParams<T> init_params(const VitConfig& config, std::uint64_t seed) {
  VitParams<T> p(config);
  Rng rng(seed);
  for (const auto& e : p.layout()) {
    auto v = p.values().subspan(e.offset, e.size());
    const bool is_norm_gain =
        e.name.ends_with("norm1.weight") || e.name.ends_with("norm2.weight") ||
        e.name == "norm.weight";
    if (is_norm_gain) {
      std::fill(v.begin(), v.end(), T(1));
    } else if (e.name.ends_with(".weight") || e.name == "cls_token" ||
               e.name == "pos_embed") {
      for (T& x : v) x = static_cast<T>(rng.truncated_normal(0.02));
    }
  }
  return p;
}

template <class T>
Tensor<T> patchify(const Tensor<T>& image, std::uint32_t patch) {
  detail::require(image.rank() == 3, kModule, "patchify expects a {C,H,W} image");
  const ImageGeometry g{static_cast<std::uint32_t>(image.extent(0)),
                        static_cast<std::uint32_t>(image.extent(1)),
                        static_cast<std::uint32_t>(image.extent(2))};
  const BlockGrid grid(g, patch);
  Tensor<T> out({grid.num_blocks(), grid.block_pixels()});
  std::size_t n = 0;
  for (std::size_t b = 0; b < grid.num_blocks(); ++b)
    for (std::size_t k = 0; k < grid.block_pixels(); ++k)
      out[n++] = image[grid.offset(b, k)];
  return out;
}

template <class T>
Tensor<T> forward(const VitParams<T>& params, const Tensor<T>& images) {
  const std::size_t batch = check_images(params.config(), images);
  const auto ptrs = image_pointers(images, batch);
  return to_tensor(run_forward<T>(params, ptrs).logits);
}

template <class T>
Tensor<T> softmax(const Tensor<T>& logits) {
  detail::require(logits.rank() == 2, kModule, "softmax expects {B, K} scores");
  Tensor<T> out = logits;
  const std::size_t k = logits.extent(1);
  for (std::size_t r = 0; r < logits.extent(0); ++r) {
    auto row = out.data().subspan(r * k, k);
    const T m = *std::max_element(row.begin(), row.end());
    T z = 0;
    for (T& v : row) z += (v = std::exp(v - m));
    for (T& v : row) v /= z;
  }
  return out;
}

template <class T>
T cross_entropy(const Tensor<T>& logits, std::span<const Label> labels) {
  detail::require(logits.rank() == 2, kModule, "cross_entropy expects {B, K}");
  const std::size_t k = logits.extent(1);
  detail::require(labels.size() == logits.extent(0), kModule,
                  "label count does not match batch size");
  for (Label y : labels)
    detail::require(y >= 0 && static_cast<std::size_t>(y) < k, kModule,
                    "label " + std::to_string(y) + " out of range");
  const CMatMap<T> m(logits.data().data(), static_cast<Index>(logits.extent(0)),
                     static_cast<Index>(k));
  return mean_cross_entropy<T>(m, labels);
}

template <class T>
Tensor<T> input_vjp(const VitParams<T>& params, const Tensor<T>& images,
                    const Tensor<T>& dlogits) {
  const std::size_t batch = check_images(params.config(), images);
  detail::require(dlogits.shape() == Shape{batch, params.config().num_classes},
                  kModule, "dlogits shape does not match batch");
  const auto ptrs = image_pointers(images, batch);
  const auto cache = run_forward<T>(params, ptrs);
  const Mat<T> g = CMatMap<T>(dlogits.data().data(), static_cast<Index>(batch),
                              static_cast<Index>(params.config().num_classes));
  Tensor<T> out(images.shape());
  const auto outs = image_pointers(out, batch);
  run_backward<T>(params, cache, g, nullptr, outs);
  return out;
}

template <class T>
Tensor<T> input_gradient(const VitParams<T>& params, const Tensor<T>& images,
                         std::span<const Label> labels) {
  const std::size_t batch = check_images(params.config(), images);
  check_labels<T>(params.config(), batch, labels);
  const auto ptrs = image_pointers(images, batch);
  const auto cache = run_forward<T>(params, ptrs);
  const Mat<T> g = cross_entropy_dlogits<T>(cache.logits, labels);
  Tensor<T> out(images.shape());
  const auto outs = image_pointers(out, batch);
  run_backward<T>(params, cache, g, nullptr, outs);
  return out;
}

template <class T>
LossAndGradients<T> loss_and_gradients(const VitParams<T>& params,
                                       const Tensor<T>& images,
                                       std::span<const Label> labels) {
  const std::size_t batch = check_images(params.config(), images);
  check_labels<T>(params.config(), batch, labels);
  const auto ptrs = image_pointers(images, batch);
  const auto cache = run_forward<T>(params, ptrs);
  Mat<T> g = cross_entropy_dlogits<T>(cache.logits, labels);
  g /= static_cast<T>(batch);
  LossAndGradients<T> out{mean_cross_entropy<T>(cache.logits, labels),
                          VitParams<T>(params.config())};
  run_backward<T>(params, cache, g, &out.gradients, {});
  return out;
}

double gradient_error(std::span<const double> a, std::span<const double> b) {
  detail::require(a.size() == b.size(), kModule, "gradient sizes differ");
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return scale == 0 ? 0.0 : diff / scale;
}

double grad_check(const VitParams<double>& params, const Tensor<double>& x,
                  std::span<const Label> labels, double step) {
  const Tensor<double> analytic = input_gradient(params, x, labels);
  const std::size_t batch = check_images(params.config(), x);
  const auto n = static_cast<double>(batch);
  std::vector<double> numeric(x.size());
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = cross_entropy(forward(params, probe), labels);
    probe[i] = orig - step;
    const double down = cross_entropy(forward(params, probe), labels);
    probe[i] = orig;
    // cross_entropy is a batch mean; input_gradient is of the sum.
    numeric[i] = n * (up - down) / (2 * step);
  }
  return gradient_error(analytic.data(), numeric);
}

double grad_check(const VitParams<double>& params, const Tensor<double>& x,
                  std::span<const Label> labels, double step, double fraction,
                  std::uint64_t seed) {
  const Tensor<double> analytic = input_gradient(params, x, labels);
  const auto n = static_cast<double>(check_images(params.config(), x));
  Rng rng(seed);
  std::vector<double> a, numeric;
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!rng.bernoulli(fraction)) continue;
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = cross_entropy(forward(params, probe), labels);
    probe[i] = orig - step;
    const double down = cross_entropy(forward(params, probe), labels);
    probe[i] = orig;
    a.push_back(analytic[i]);
    numeric.push_back(n * (up - down) / (2 * step));
  }
  return gradient_error(a, numeric);
}

double grad_check_params(const VitParams<double>& params,
                         const Tensor<double>& x, std::span<const Label> labels,
                         double step, double fraction, std::uint64_t seed) {
  const auto analytic = param_gradients(params, x, labels);
  Rng rng(seed);
  std::vector<double> a, numeric;
  VitParams<double> probe = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!rng.bernoulli(fraction)) continue;
    const double orig = probe.values()[i];
    probe.values()[i] = orig + step;
    const double up = cross_entropy(forward(probe, x), labels);
    probe.values()[i] = orig - step;
    const double down = cross_entropy(forward(probe, x), labels);
    probe.values()[i] = orig;
    a.push_back(analytic.values()[i]);
    numeric.push_back((up - down) / (2 * step));
  }
  return gradient_error(a, numeric);
}

// ---------------------------------------------------------------------------

std::uint64_t backward_pass_count() {
  return g_backward_calls.load(std::memory_order_relaxed);
}

void TrainConfig::validate() const {
  detail::require(learning_rate >= 0 && std::isfinite(learning_rate), kModule,
                  "learning_rate must be non-negative");
  detail::require(momentum >= 0 && momentum < 1, kModule,
                  "momentum must be in [0, 1)");
  detail::require(epochs >= 1, kModule, "epochs must be positive");
  detail::require(batch_size >= 1, kModule, "batch_size must be positive");
  detail::require(grad_clip >= 0, kModule, "grad_clip must be non-negative");
}

namespace {

void check_dataset(const VitConfig& cfg, const LabeledImages& data) {
  detail::require(!data.images.empty() && data.images.rank() == 4, kModule,
                  "dataset must be a non-empty {N,C,H,W} tensor");
  const std::size_t n = check_images(cfg, data.images);
  check_labels<float>(cfg, n, data.labels);
}

}  // namespace

TrainResult train(VitParams<float> params, LabeledImages data,
                  const TrainConfig& config,
                  std::optional<LabeledImages> validation) {
  config.validate();
  detail::require(!data.labels.empty(), kModule, "dataset is empty");
  const VitConfig& cfg = params.config();
  check_dataset(cfg, data);
  if (validation) check_dataset(cfg, *validation);

  const std::size_t n = data.images.extent(0);
  const std::size_t bs = std::min<std::size_t>(config.batch_size, n);
  const auto mu = static_cast<float>(config.momentum);
  const auto all = image_pointers(data.images, n);

  Rng rng(derive_seed(config.rng_seed, 0x5348'5546ULL));  // "SHUF"
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<float> velocity(params.size(), 0.0f);
  VitParams<float> grads(cfg);

  TrainResult result{params, {}};
  double best_val = -1;
  std::uint32_t since_best = 0;

  const std::size_t steps_per_epoch = (n + bs - 1) / bs;
  const std::size_t total_steps = steps_per_epoch * config.epochs;
  const std::size_t warmup_steps = steps_per_epoch * config.warmup_epochs;
  std::size_t step = 0;
  auto rate = [&](std::size_t s) {
    double r = config.learning_rate;
    if (s < warmup_steps) return static_cast<float>(r * (s + 1) / warmup_steps);
    if (config.cosine && total_steps > warmup_steps) {
      const double t = static_cast<double>(s - warmup_steps) /
                       static_cast<double>(total_steps - warmup_steps);
      r *= 0.5 * (1.0 + std::cos(std::numbers::pi * t));
    }
    return static_cast<float>(r);
  };

  for (std::uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t count = std::min(bs, n - start);
      std::vector<const float*> ptrs(count);
      std::vector<Label> labels(count);
      for (std::size_t i = 0; i < count; ++i) {
        ptrs[i] = all[order[start + i]];
        labels[i] = data.labels[order[start + i]];
      }
      const auto cache = run_forward<float>(params, ptrs);
      loss_sum += mean_cross_entropy<float>(cache.logits, labels) *
                  static_cast<double>(count);
      for (std::size_t i = 0; i < count; ++i) {
        Index arg = 0;
        cache.logits.row(static_cast<Index>(i)).maxCoeff(&arg);
        correct += (arg == labels[i]);
      }
      Mat<float> g = cross_entropy_dlogits<float>(cache.logits, labels);
      g /= static_cast<float>(count);
      std::fill(grads.values().begin(), grads.values().end(), 0.0f);
      run_backward<float>(params, cache, g, &grads, {});

      float clip = 1.0f;
      if (config.grad_clip > 0) {
        double sq = 0;
        for (float v : grads.values()) sq += double{v} * v;
        const double norm = std::sqrt(sq);
        if (norm > config.grad_clip)
          clip = static_cast<float>(config.grad_clip / norm);
      }
      const float lr = rate(step++);
      auto w = params.values();
      auto gv = grads.values();
      for (std::size_t i = 0; i < w.size(); ++i) {
        velocity[i] = mu * velocity[i] + clip * gv[i];
        w[i] -= lr * velocity[i];
      }
    }
    EpochStats stats{epoch, loss_sum / static_cast<double>(n),
                     static_cast<double>(correct) / static_cast<double>(n),
                     std::nullopt};
    if (validation) {
      stats.val_accuracy = accuracy(params, *validation);
      if (*stats.val_accuracy > best_val) {
        best_val = *stats.val_accuracy;
        result.params = params;
        since_best = 0;
      } else {
        ++since_best;
      }
    } else {
      result.params = params;
    }
    result.trace.push_back(stats);
    if (validation && config.patience > 0 && since_best >= config.patience) break;
  }
  return result;
}

TrainResult train(const VitConfig& model, LabeledImages data,
                  const TrainConfig& config,
                  std::optional<LabeledImages> validation) {
  auto init = init_params<float>(model, derive_seed(config.rng_seed, 0x494e4954ULL));
  return train(std::move(init), data, config, validation);
}

std::vector<Label> predict_labels(const VitParams<float>& params,
                                  const Tensor<float>& images,
                                  std::size_t batch) {
  const std::size_t n = check_images(params.config(), images);
  const auto all = image_pointers(images, n);
  std::vector<Label> out(n);
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t count = std::min(batch, n - start);
    const auto cache = run_forward<float>(
        params, std::span<const float* const>(all).subspan(start, count));
    for (std::size_t i = 0; i < count; ++i) {
      Index arg = 0;
      cache.logits.row(static_cast<Index>(i)).maxCoeff(&arg);
      out[start + i] = static_cast<Label>(arg);
    }
  }
  return out;
}

double accuracy(const VitParams<float>& params, LabeledImages data) {
  const auto pred = predict_labels(params, data.images);
  detail::require(pred.size() == data.labels.size(), kModule,
                  "label count does not match image count");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// TVIT container: "TVIT", u16 version, 8 x u32 header, then one section per
// parameter tensor: u16 name length, name, u8 rank, u32 extents, f32 data.

namespace {
constexpr std::uint16_t kWeightVersion = 1;
}

std::vector<std::uint8_t> encode_weights(const VitParams<float>& params) {
  const VitConfig& c = params.config();
  ByteWriter w;
  w.raw("TVIT");
  w.u16(kWeightVersion);
  for (std::uint32_t v : {c.patch, c.embed_dim, c.depth, c.heads, c.num_classes,
                          c.image.channels, c.image.height, c.image.width})
    w.u32(v);
  for (const auto& e : params.layout()) {
    w.u16(static_cast<std::uint16_t>(e.name.size()));
    w.raw(e.name);
    w.u8(static_cast<std::uint8_t>(e.shape.size()));
    for (std::size_t x : e.shape) w.u32(static_cast<std::uint32_t>(x));
    for (float v : params.values().subspan(e.offset, e.size())) w.f32(v);
  }
  return w.take();
}

VitParams<float> decode_weights(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "vit weights");
  if (r.str(4) != "TVIT") throw ParseError("vit weights: bad magic");
  const std::uint16_t version = r.u16();
  if (version != kWeightVersion)
    throw ParseError("vit weights: unsupported version " + std::to_string(version));
  VitConfig c;
  c.patch = r.u32();
  c.embed_dim = r.u32();
  c.depth = r.u32();
  c.heads = r.u32();
  c.num_classes = r.u32();
  c.image.channels = r.u32();
  c.image.height = r.u32();
  c.image.width = r.u32();
  try {
    c.validate();
  } catch (const InvalidInput& e) {
    throw ParseError(std::string("vit weights: invalid header: ") + e.what());
  }
  if (c.depth > 1024 || c.embed_dim > 65536)
    throw ParseError("vit weights: implausible header");
  VitParams<float> p(c);
  std::vector<bool> seen(p.layout().size(), false);
  while (!r.done()) {
    const std::string name = r.str(r.u16());
    const std::uint8_t rank = r.u8();
    Shape shape(rank);
    for (auto& x : shape) x = r.u32();
    std::size_t idx = p.layout().size();
    for (std::size_t i = 0; i < p.layout().size(); ++i)
      if (p.layout()[i].name == name) idx = i;
    if (idx == p.layout().size())
      throw ParseError("vit weights: unknown section '" + name + "'");
    const auto& e = p.layout()[idx];
    if (shape != e.shape)
      throw ParseError("vit weights: section '" + name + "' has shape " +
                       shape_string(shape) + ", expected " + shape_string(e.shape));
    if (seen[idx]) throw ParseError("vit weights: duplicate section '" + name + "'");
    seen[idx] = true;
    for (float& v : p.values().subspan(e.offset, e.size())) v = r.f32();
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (!seen[i])
      throw ParseError("vit weights: missing section '" + p.layout()[i].name + "'");
  return p;
}

#define ENCVIT_INSTANTIATE(T)                                                   \
  template class VitParams<T>;                                                  \
  template VitParams<T> init_params<T>(const VitConfig&, std::uint64_t);        \
  template Tensor<T> patchify<T>(const Tensor<T>&, std::uint32_t);              \
  template Tensor<T> forward<T>(const VitParams<T>&, const Tensor<T>&);         \
  template Tensor<T> softmax<T>(const Tensor<T>&);                              \
  template T cross_entropy<T>(const Tensor<T>&, std::span<const Label>);        \
  template Tensor<T> input_vjp<T>(const VitParams<T>&, const Tensor<T>&,        \
                                  const Tensor<T>&);                            \
  template Tensor<T> input_gradient<T>(const VitParams<T>&, const Tensor<T>&,   \
                                       std::span<const Label>);                 \
  template LossAndGradients<T> loss_and_gradients<T>(                           \
      const VitParams<T>&, const Tensor<T>&, std::span<const Label>);

ENCVIT_INSTANTIATE(float)
ENCVIT_INSTANTIATE(double)

#undef ENCVIT_INSTANTIATE

}  // namespace encvit
