#ifndef SUBMTL_MODEL_HPP
#define SUBMTL_MODEL_HPP

#include <array>
#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "submtl/common.hpp"
#include "submtl/kernels.hpp"
#include "submtl/parallel.hpp"
#include "submtl/volume.hpp"

namespace submtl {

/// Architecture of the shared 3D ViT trunk and the 13 regression heads.
struct ModelConfig {
  std::uint32_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t n_heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t head_hidden = 0;  ///< 0 = single affine head
  std::size_t n_tasks = kNumTasks;
  Dims input_dims{32, 32, 32};

  /// CPU-friendly default: 32^3 input, 8^3 patches, width 64, 4 blocks.
  static ModelConfig desk_default() { return {}; }

  /// Small enough for finite-difference checking (~5.6k parameters).
  static ModelConfig tiny() {
    ModelConfig c;
    c.embed_dim = 8;
    c.depth = 1;
    c.n_heads = 2;
    return c;
  }

  std::size_t grid_d() const { return input_dims.d / patch_size; }
  std::size_t grid_h() const { return input_dims.h / patch_size; }
  std::size_t grid_w() const { return input_dims.w / patch_size; }
  std::size_t n_patches() const { return grid_d() * grid_h() * grid_w(); }
  std::size_t n_tokens() const { return n_patches() + 1; }
  std::size_t patch_volume() const {
    return static_cast<std::size_t>(patch_size) * patch_size * patch_size;
  }
  std::size_t mlp_dim() const { return embed_dim * mlp_ratio; }
  std::size_t head_dim() const { return embed_dim / n_heads; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate(const ModelConfig& c) {
  require(c.n_tasks == kNumTasks, ErrorKind::usage, "n_tasks must be 13");
  require(c.patch_size >= 1, ErrorKind::usage, "patch_size must be >= 1");
  require(c.input_dims.d >= 1 && c.input_dims.h >= 1 && c.input_dims.w >= 1,
          ErrorKind::usage, "input dims must be >= 1");
  require(c.input_dims.divisible_by(c.patch_size), ErrorKind::usage,
          "input dims " + to_string(c.input_dims) + " not divisible by patch size " +
              std::to_string(c.patch_size));
  require(c.embed_dim >= 1, ErrorKind::usage, "embed_dim must be >= 1");
  require(c.n_heads >= 1, ErrorKind::usage, "n_heads must be >= 1");
  require(c.embed_dim % c.n_heads == 0, ErrorKind::usage,
          "embed_dim " + std::to_string(c.embed_dim) + " not divisible by n_heads " +
              std::to_string(c.n_heads));
  require(c.mlp_ratio >= 1, ErrorKind::usage, "mlp_ratio must be >= 1");
}

// ---------------------------------------------------------------------------
// Parameter layout: every tensor lives at a fixed offset of one flat buffer.
// ---------------------------------------------------------------------------

enum class InitKind { affine_weight, zero, one, embedding };

struct TensorSpec {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  std::size_t fan_in = 0;
  InitKind init = InitKind::zero;
  int head = -1;  ///< owning head index, -1 for shared trunk tensors
};

struct BlockSlots {
  std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct HeadSlots {
  std::size_t w1, b1;  ///< affine head: w1 [E], b1 [1]; hidden head: w1 [E,H], b1 [H]
  std::size_t w2 = 0, b2 = 0;  ///< hidden head only: w2 [H], b2 [1]
};

class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& cfg) {
    validate(cfg);
    const std::size_t e = cfg.embed_dim, f = cfg.mlp_dim(), p = cfg.patch_volume();
    patch_w_ = add("patch_embed.weight", {p, e}, p, InitKind::affine_weight);
    patch_b_ = add("patch_embed.bias", {e}, 0, InitKind::zero);
    cls_ = add("summary_token", {e}, 0, InitKind::embedding);
    pos_ = add("pos_embed", {cfg.n_tokens(), e}, 0, InitKind::embedding);
    for (std::size_t b = 0; b < cfg.depth; ++b) {
      const std::string pre = "blocks." + std::to_string(b) + ".";
      BlockSlots s{};
      s.ln1_g = add(pre + "norm1.scale", {e}, 0, InitKind::one);
      s.ln1_b = add(pre + "norm1.offset", {e}, 0, InitKind::zero);
      s.wq = add(pre + "attn.query.weight", {e, e}, e, InitKind::affine_weight);
      s.bq = add(pre + "attn.query.bias", {e}, 0, InitKind::zero);
      s.wk = add(pre + "attn.key.weight", {e, e}, e, InitKind::affine_weight);
      s.bk = add(pre + "attn.key.bias", {e}, 0, InitKind::zero);
      s.wv = add(pre + "attn.value.weight", {e, e}, e, InitKind::affine_weight);
      s.bv = add(pre + "attn.value.bias", {e}, 0, InitKind::zero);
      s.wo = add(pre + "attn.output.weight", {e, e}, e, InitKind::affine_weight);
      s.bo = add(pre + "attn.output.bias", {e}, 0, InitKind::zero);
      s.ln2_g = add(pre + "norm2.scale", {e}, 0, InitKind::one);
      s.ln2_b = add(pre + "norm2.offset", {e}, 0, InitKind::zero);
      s.w1 = add(pre + "mlp.fc1.weight", {e, f}, e, InitKind::affine_weight);
      s.b1 = add(pre + "mlp.fc1.bias", {f}, 0, InitKind::zero);
      s.w2 = add(pre + "mlp.fc2.weight", {f, e}, f, InitKind::affine_weight);
      s.b2 = add(pre + "mlp.fc2.bias", {e}, 0, InitKind::zero);
      blocks_.push_back(s);
    }
    lnf_g_ = add("norm.scale", {e}, 0, InitKind::one);
    lnf_b_ = add("norm.offset", {e}, 0, InitKind::zero);
    for (std::size_t j = 0; j < kNumTasks; ++j) {
      const std::string pre = "heads." + std::to_string(j + 1) + ".";
      const int owner = static_cast<int>(j);
      HeadSlots h{};
      if (cfg.head_hidden == 0) {
        h.w1 = add(pre + "weight", {e}, e, InitKind::affine_weight, owner);
        h.b1 = add(pre + "bias", {1}, 0, InitKind::zero, owner);
      } else {
        const std::size_t hh = cfg.head_hidden;
        h.w1 = add(pre + "fc1.weight", {e, hh}, e, InitKind::affine_weight, owner);
        h.b1 = add(pre + "fc1.bias", {hh}, 0, InitKind::zero, owner);
        h.w2 = add(pre + "fc2.weight", {hh}, hh, InitKind::affine_weight, owner);
        h.b2 = add(pre + "fc2.bias", {1}, 0, InitKind::zero, owner);
      }
      heads_[j] = h;
    }
  }

  const std::vector<TensorSpec>& tensors() const { return tensors_; }
  std::size_t total() const { return total_; }

  std::size_t patch_w() const { return patch_w_; }
  std::size_t patch_b() const { return patch_b_; }
  std::size_t cls() const { return cls_; }
  std::size_t pos() const { return pos_; }
  const std::vector<BlockSlots>& blocks() const { return blocks_; }
  std::size_t lnf_g() const { return lnf_g_; }
  std::size_t lnf_b() const { return lnf_b_; }
  const HeadSlots& head(std::size_t j) const { return heads_[j]; }

 private:
  std::size_t add(std::string name, std::vector<std::size_t> shape, std::size_t fan_in,
                  InitKind init, int head = -1) {
    std::size_t size = 1;
    for (auto s : shape) size *= s;
    tensors_.push_back({std::move(name), std::move(shape), total_, size, fan_in, init, head});
    const std::size_t off = total_;
    total_ += size;
    return off;
  }

  std::vector<TensorSpec> tensors_;
  std::size_t total_ = 0;
  std::size_t patch_w_ = 0, patch_b_ = 0, cls_ = 0, pos_ = 0, lnf_g_ = 0, lnf_b_ = 0;
  std::vector<BlockSlots> blocks_;
  std::array<HeadSlots, kNumTasks> heads_{};
};

/// All learnable values in one flat buffer described by `layout`.
template <class T>
struct ModelParams {
  ModelConfig cfg;
  std::shared_ptr<const ParamLayout> layout;
  std::vector<T> values;
  std::uint64_t seed = 0;

  std::size_t size() const { return values.size(); }
  std::span<const T> view(std::size_t offset, std::size_t n) const {
    return std::span<const T>(values).subspan(offset, n);
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out{cfg, layout, std::vector<U>(values.size()), seed};
    for (std::size_t i = 0; i < values.size(); ++i) out.values[i] = static_cast<U>(values[i]);
    return out;
  }
};

inline constexpr double kEmbeddingInitSd = 0.02;

/// Affine weights ~ truncated normal with sd 1/sqrt(fan_in); embeddings ~
/// truncated normal with sd 0.02; biases and norm offsets 0; norm scales 1.
/// Each tensor draws from its own (seed, tensor index) stream.
template <class T = float>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  auto layout = std::make_shared<const ParamLayout>(cfg);
  ModelParams<T> p{cfg, layout, std::vector<T>(layout->total(), T(0)), seed};
  const auto& ts = layout->tensors();
  for (std::size_t t = 0; t < ts.size(); ++t) {
    const auto& spec = ts[t];
    auto* dst = p.values.data() + spec.offset;
    switch (spec.init) {
      case InitKind::zero:
        break;
      case InitKind::one:
        std::fill(dst, dst + spec.size, T(1));
        break;
      case InitKind::affine_weight:
      case InitKind::embedding: {
        Rng rng = Rng::stream(seed, t, 0x1a17);
        const double sd = spec.init == InitKind::embedding
                              ? kEmbeddingInitSd
                              : 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
        for (std::size_t i = 0; i < spec.size; ++i)
          dst[i] = static_cast<T>(rng.truncated_normal(sd));
        break;
      }
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Patch tokenisation
// ---------------------------------------------------------------------------

/// Cubic patches in row-major grid order, each flattened row-major.
/// Result is n_tokens x p^3.
template <class T = float>
std::vector<T> patchify(const Volume& v, std::uint32_t p) {
  require(v.voxels.size() == v.dims.voxels(), ErrorKind::data, "patchify: malformed volume");
  require(v.dims.divisible_by(p), ErrorKind::data,
          "patchify: dims " + to_string(v.dims) + " not divisible by " + std::to_string(p));
  const std::size_t gd = v.dims.d / p, gh = v.dims.h / p, gw = v.dims.w / p;
  const std::size_t pv = static_cast<std::size_t>(p) * p * p;
  std::vector<T> out(gd * gh * gw * pv);
  std::size_t o = 0;
  for (std::size_t a = 0; a < gd; ++a)
    for (std::size_t b = 0; b < gh; ++b)
      for (std::size_t c = 0; c < gw; ++c)
        for (std::size_t z = 0; z < p; ++z)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x)
              out[o++] = static_cast<T>(v.at(a * p + z, b * p + y, c * p + x));
  return out;
}

template <class T>
Volume unpatchify(std::span<const T> tokens, Dims dims, std::uint32_t p) {
  require(dims.divisible_by(p), ErrorKind::data, "unpatchify: dims not divisible");
  require(tokens.size() == dims.voxels(), ErrorKind::data, "unpatchify: size mismatch");
  Volume v;
  v.dims = dims;
  v.voxels.resize(dims.voxels());
  const std::size_t gd = dims.d / p, gh = dims.h / p, gw = dims.w / p;
  std::size_t o = 0;
  for (std::size_t a = 0; a < gd; ++a)
    for (std::size_t b = 0; b < gh; ++b)
      for (std::size_t c = 0; c < gw; ++c)
        for (std::size_t z = 0; z < p; ++z)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x)
              v.at(a * p + z, b * p + y, c * p + x) = static_cast<float>(tokens[o++]);
  return v;
}

// ---------------------------------------------------------------------------
// Forward / backward for one sample
// ---------------------------------------------------------------------------

template <class T>
struct BlockCache {
  std::vector<T> x_in, xhat1, rstd1, h1, q, k, v, attn, ctx, x_mid, xhat2, rstd2, h2, u, g;
};

/// Activations of one forward pass, kept for the backward pass.
template <class T>
struct ForwardCache {
  std::vector<T> patches;  ///< n_patches x p^3
  std::vector<BlockCache<T>> blocks;
  std::vector<T> x_out;  ///< trunk output, n_tokens x E
  std::vector<T> xhat_f, rstd_f;
  std::vector<T> z;  ///< shared representation (normalised summary token)
  std::array<std::vector<T>, kNumTasks> head_pre, head_act;  ///< hidden heads only
  std::array<T, kNumTasks> y{};
};

/// Forward pass for one sample given its patch tokens.
template <class T>
std::array<T, kNumTasks> forward_tokens(const ModelParams<T>& p, std::vector<T> patches,
                                        ForwardCache<T>& c) {
  namespace K = kernels;
  const auto& cfg = p.cfg;
  const auto& L = *p.layout;
  const std::size_t n = cfg.n_patches(), tn = cfg.n_tokens(), e = cfg.embed_dim,
                    f = cfg.mlp_dim(), pv = cfg.patch_volume(), nh = cfg.n_heads,
                    dh = cfg.head_dim();
  require(patches.size() == n * pv, ErrorKind::data, "forward: token count mismatch");
  c.patches = std::move(patches);
  const std::span<const T> P(p.values);

  // Embedding: summary token first, then projected patches; positions added.
  std::vector<T> x(tn * e);
  K::affine<T>(c.patches, P.subspan(L.patch_w(), pv * e), P.subspan(L.patch_b(), e),
               std::span<T>(x).subspan(e), n, pv, e);
  for (std::size_t d = 0; d < e; ++d) x[d] = P[L.cls() + d];
  for (std::size_t i = 0; i < tn * e; ++i) x[i] += P[L.pos() + i];

  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  c.blocks.resize(cfg.depth);
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    const auto& s = L.blocks()[b];
    auto& bc = c.blocks[b];
    bc.x_in = x;
    bc.xhat1.resize(tn * e);
    bc.rstd1.resize(tn);
    bc.h1.resize(tn * e);
    K::layer_norm<T>(bc.x_in, P.subspan(s.ln1_g, e), P.subspan(s.ln1_b, e), bc.h1, bc.xhat1,
                     bc.rstd1, tn, e);
    bc.q.resize(tn * e);
    bc.k.resize(tn * e);
    bc.v.resize(tn * e);
    K::affine<T>(bc.h1, P.subspan(s.wq, e * e), P.subspan(s.bq, e), bc.q, tn, e, e);
    K::affine<T>(bc.h1, P.subspan(s.wk, e * e), P.subspan(s.bk, e), bc.k, tn, e, e);
    K::affine<T>(bc.h1, P.subspan(s.wv, e * e), P.subspan(s.bv, e), bc.v, tn, e, e);

    bc.attn.assign(nh * tn * tn, T(0));
    bc.ctx.assign(tn * e, T(0));
    for (std::size_t h = 0; h < nh; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < tn; ++i) {
        T* row = bc.attn.data() + (h * tn + i) * tn;
        const T* qi = bc.q.data() + i * e + off;
        for (std::size_t j = 0; j < tn; ++j) {
          const T* kj = bc.k.data() + j * e + off;
          T acc = T(0);
          for (std::size_t d = 0; d < dh; ++d) acc += qi[d] * kj[d];
          row[j] = acc * scale;
        }
        K::softmax_row<T>(std::span<T>(row, tn));
        T* ci = bc.ctx.data() + i * e + off;
        for (std::size_t j = 0; j < tn; ++j) {
          const T a = row[j];
          const T* vj = bc.v.data() + j * e + off;
          for (std::size_t d = 0; d < dh; ++d) ci[d] += a * vj[d];
        }
      }
    }
    bc.x_mid.resize(tn * e);
    K::affine<T>(bc.ctx, P.subspan(s.wo, e * e), P.subspan(s.bo, e), bc.x_mid, tn, e, e);
    for (std::size_t i = 0; i < tn * e; ++i) bc.x_mid[i] += bc.x_in[i];

    bc.xhat2.resize(tn * e);
    bc.rstd2.resize(tn);
    bc.h2.resize(tn * e);
    K::layer_norm<T>(bc.x_mid, P.subspan(s.ln2_g, e), P.subspan(s.ln2_b, e), bc.h2, bc.xhat2,
                     bc.rstd2, tn, e);
    bc.u.resize(tn * f);
    K::affine<T>(bc.h2, P.subspan(s.w1, e * f), P.subspan(s.b1, f), bc.u, tn, e, f);
    bc.g.resize(tn * f);
    for (std::size_t i = 0; i < tn * f; ++i) bc.g[i] = K::gelu(bc.u[i]);
    K::affine<T>(bc.g, P.subspan(s.w2, f * e), P.subspan(s.b2, e), x, tn, f, e);
    for (std::size_t i = 0; i < tn * e; ++i) x[i] += bc.x_mid[i];
  }
  c.x_out = std::move(x);

  // Final norm on the summary token only; it is the shared representation.
  c.xhat_f.resize(e);
  c.rstd_f.resize(1);
  c.z.resize(e);
  K::layer_norm<T>(std::span<const T>(c.x_out).first(e), P.subspan(L.lnf_g(), e),
                   P.subspan(L.lnf_b(), e), c.z, c.xhat_f, c.rstd_f, 1, e);

  for (std::size_t j = 0; j < kNumTasks; ++j) {
    const auto& hs = L.head(j);
    if (cfg.head_hidden == 0) {
      T acc = P[hs.b1];
      for (std::size_t d = 0; d < e; ++d) acc += c.z[d] * P[hs.w1 + d];
      c.y[j] = acc;
    } else {
      const std::size_t hh = cfg.head_hidden;
      c.head_pre[j].resize(hh);
      c.head_act[j].resize(hh);
      K::affine<T>(c.z, P.subspan(hs.w1, e * hh), P.subspan(hs.b1, hh), c.head_pre[j], 1, e, hh);
      T acc = P[hs.b2];
      for (std::size_t d = 0; d < hh; ++d) {
        c.head_act[j][d] = K::gelu(c.head_pre[j][d]);
        acc += c.head_act[j][d] * P[hs.w2 + d];
      }
      c.y[j] = acc;
    }
  }
  return c.y;
}

inline void check_input(const ModelConfig& cfg, const Volume& v) {
  require(v.dims == cfg.input_dims, ErrorKind::data,
          "volume '" + v.subject_id + "' has dims " + to_string(v.dims) + ", model expects " +
              to_string(cfg.input_dims));
  require(v.voxels.size() == v.dims.voxels(), ErrorKind::data,
          "volume '" + v.subject_id + "' is malformed");
  for (float x : v.voxels)
    require(std::isfinite(x), ErrorKind::data,
            "volume '" + v.subject_id + "' has a non-finite voxel");
}

template <class T>
std::array<T, kNumTasks> forward_sample(const ModelParams<T>& p, const Volume& v,
                                        ForwardCache<T>& c) {
  check_input(p.cfg, v);
  return forward_tokens(p, patchify<T>(v, p.cfg.patch_size), c);
}

/// Accumulates d(objective)/d(params) into `grad` given dy = d(objective)/dy.
template <class T>
void backward_sample(const ModelParams<T>& p, const ForwardCache<T>& c,
                     const std::array<T, kNumTasks>& dy, std::span<T> grad) {
  namespace K = kernels;
  const auto& cfg = p.cfg;
  const auto& L = *p.layout;
  const std::size_t n = cfg.n_patches(), tn = cfg.n_tokens(), e = cfg.embed_dim,
                    f = cfg.mlp_dim(), pv = cfg.patch_volume(), nh = cfg.n_heads,
                    dh = cfg.head_dim();
  const std::span<const T> P(p.values);
  auto G = [&](std::size_t off, std::size_t len) { return grad.subspan(off, len); };

  // Heads.
  std::vector<T> dz(e, T(0));
  for (std::size_t j = 0; j < kNumTasks; ++j) {
    const auto& hs = L.head(j);
    const T g = dy[j];
    if (g == T(0)) continue;
    if (cfg.head_hidden == 0) {
      grad[hs.b1] += g;
      for (std::size_t d = 0; d < e; ++d) {
        grad[hs.w1 + d] += g * c.z[d];
        dz[d] += g * P[hs.w1 + d];
      }
    } else {
      const std::size_t hh = cfg.head_hidden;
      grad[hs.b2] += g;
      std::vector<T> dpre(hh);
      for (std::size_t d = 0; d < hh; ++d) {
        grad[hs.w2 + d] += g * c.head_act[j][d];
        dpre[d] = g * P[hs.w2 + d] * K::gelu_grad(c.head_pre[j][d]);
      }
      K::affine_backward<T>(c.z, P.subspan(hs.w1, e * hh), dpre, dz, G(hs.w1, e * hh),
                            G(hs.b1, hh), 1, e, hh);
    }
  }

  // Final norm (summary token row only).
  std::vector<T> dx(tn * e, T(0));
  K::layer_norm_backward<T>(dz, c.xhat_f, c.rstd_f, P.subspan(L.lnf_g(), e),
                            std::span<T>(dx).first(e), G(L.lnf_g(), e), G(L.lnf_b(), e), 1, e);

  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> dg, du, dh2, dctx, dq, dk, dv, dh1, dattn(tn);
  for (std::size_t bi = cfg.depth; bi-- > 0;) {
    const auto& s = L.blocks()[bi];
    const auto& bc = c.blocks[bi];

    // MLP branch: x_out = x_mid + fc2(gelu(fc1(norm2(x_mid)))).
    dg.assign(tn * f, T(0));
    K::affine_backward<T>(bc.g, P.subspan(s.w2, f * e), dx, dg, G(s.w2, f * e), G(s.b2, e), tn,
                          f, e);
    du.resize(tn * f);
    for (std::size_t i = 0; i < tn * f; ++i) du[i] = dg[i] * K::gelu_grad(bc.u[i]);
    dh2.assign(tn * e, T(0));
    K::affine_backward<T>(bc.h2, P.subspan(s.w1, e * f), du, dh2, G(s.w1, e * f), G(s.b1, f), tn,
                          e, f);
    // dx now holds d x_mid (residual) plus the norm2 path.
    K::layer_norm_backward<T>(dh2, bc.xhat2, bc.rstd2, P.subspan(s.ln2_g, e), dx,
                              G(s.ln2_g, e), G(s.ln2_b, e), tn, e);

    // Attention branch: x_mid = x_in + out(attn(norm1(x_in))).
    dctx.assign(tn * e, T(0));
    K::affine_backward<T>(bc.ctx, P.subspan(s.wo, e * e), dx, dctx, G(s.wo, e * e), G(s.bo, e),
                          tn, e, e);
    dq.assign(tn * e, T(0));
    dk.assign(tn * e, T(0));
    dv.assign(tn * e, T(0));
    for (std::size_t h = 0; h < nh; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < tn; ++i) {
        const T* row = bc.attn.data() + (h * tn + i) * tn;
        const T* dci = dctx.data() + i * e + off;
        T dot = T(0);
        for (std::size_t j = 0; j < tn; ++j) {
          const T* vj = bc.v.data() + j * e + off;
          T* dvj = dv.data() + j * e + off;
          T acc = T(0);
          for (std::size_t d = 0; d < dh; ++d) {
            acc += dci[d] * vj[d];
            dvj[d] += row[j] * dci[d];
          }
          dattn[j] = acc;
          dot += row[j] * acc;
        }
        const T* qi = bc.q.data() + i * e + off;
        T* dqi = dq.data() + i * e + off;
        for (std::size_t j = 0; j < tn; ++j) {
          const T ds = row[j] * (dattn[j] - dot) * scale;
          if (ds == T(0)) continue;
          const T* kj = bc.k.data() + j * e + off;
          T* dkj = dk.data() + j * e + off;
          for (std::size_t d = 0; d < dh; ++d) {
            dqi[d] += ds * kj[d];
            dkj[d] += ds * qi[d];
          }
        }
      }
    }
    dh1.assign(tn * e, T(0));
    K::affine_backward<T>(bc.h1, P.subspan(s.wq, e * e), dq, dh1, G(s.wq, e * e), G(s.bq, e), tn,
                          e, e);
    K::affine_backward<T>(bc.h1, P.subspan(s.wk, e * e), dk, dh1, G(s.wk, e * e), G(s.bk, e), tn,
                          e, e);
    K::affine_backward<T>(bc.h1, P.subspan(s.wv, e * e), dv, dh1, G(s.wv, e * e), G(s.bv, e), tn,
                          e, e);
    K::layer_norm_backward<T>(dh1, bc.xhat1, bc.rstd1, P.subspan(s.ln1_g, e), dx, G(s.ln1_g, e),
                              G(s.ln1_b, e), tn, e);
  }

  // Embedding.
  for (std::size_t d = 0; d < e; ++d) grad[L.cls() + d] += dx[d];
  for (std::size_t i = 0; i < tn * e; ++i) grad[L.pos() + i] += dx[i];
  K::affine_backward<T>(c.patches, P.subspan(L.patch_w(), pv * e),
                        std::span<const T>(dx).subspan(e), std::span<T>{},
                        G(L.patch_w(), pv * e), G(L.patch_b(), e), n, pv, e);
}

// ---------------------------------------------------------------------------
// Batch prediction and global-score composition
// ---------------------------------------------------------------------------

/// Item predictions for one subject.
struct Prediction {
  TaskArray y_hat{};
};

/// Global score as the sum of predicted items. There is no separate head.
inline double compose_global(const Prediction& pred) {
  double s = 0.0;
  for (double v : pred.y_hat) {
    require(std::isfinite(v), ErrorKind::numeric, "compose_global: non-finite prediction");
    s += v;
  }
  return s;
}

template <class T>
std::vector<Prediction> forward(const ModelParams<T>& p, std::span<const Volume> batch,
                                unsigned threads = 1) {
  require(!batch.empty(), ErrorKind::data, "forward: empty batch");
  std::vector<Prediction> out(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t i) {
    ForwardCache<T> cache;
    const auto y = forward_sample(p, batch[i], cache);
    for (std::size_t j = 0; j < kNumTasks; ++j) {
      require(std::isfinite(static_cast<double>(y[j])), ErrorKind::numeric,
              "forward: non-finite output for '" + batch[i].subject_id + "'");
      out[i].y_hat[j] = static_cast<double>(y[j]);
    }
  });
  return out;
}

/// Shared representation (normalised summary token) for one volume.
template <class T>
std::vector<T> shared_representation(const ModelParams<T>& p, const Volume& v) {
  ForwardCache<T> cache;
  forward_sample(p, v, cache);
  return cache.z;
}

}  // namespace submtl

#endif  // SUBMTL_MODEL_HPP
