#pragma once

// Conditional DDPM core: linear-beta noise schedule, forward noising,
// epsilon-prediction MLP conditioned on a prompt embedding and a sinusoidal
// time embedding, the training losses, joint pretraining, and the ancestral
// sampler with classifier-free guidance / negative prompting.

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "coffee/autodiff.hpp"
#include "coffee/datagen.hpp"
#include "coffee/optim.hpp"
#include "coffee/rng.hpp"
#include "coffee/tensor.hpp"
#include "coffee/textenc.hpp"

namespace coffee {

inline constexpr int64_t kLatentDim = kImagePixels;  // pixel-space diffusion
inline constexpr int64_t kTimeEmbedDim = 32;
inline constexpr int64_t kHiddenDim = 256;

struct NoiseSchedule {
  int T = 0;
  std::vector<float> beta, alpha, alpha_bar;
};

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 2) throw Error(Error::Kind::config, "schedule: T must be >= 2, got " + std::to_string(T));
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw Error(Error::Kind::config, "schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(size_t(T));
  s.alpha.resize(size_t(T));
  s.alpha_bar.resize(size_t(T));
  double prod = 1.0;  // running product kept in 64-bit
  for (int t = 0; t < T; ++t) {
    s.beta[size_t(t)] =
        float(beta_start + (beta_end - beta_start) * double(t) / double(T - 1));
    const double a = 1.0 - double(s.beta[size_t(t)]);  // from the stored beta
    s.alpha[size_t(t)] = float(a);
    prod *= a;
    s.alpha_bar[size_t(t)] = float(prod);
  }
  return s;
}

// Default schedule: terminal alpha_bar ~= 3e-3, so z_T is essentially pure
// noise and ancestral sampling starts from the prior it assumes. beta_start
// sits just under the alpha_bar[0] > 0.99 bound: a gentler first step keeps
// the per-timestep noise gain (1/sqrt(1 - alpha_bar_t), see predict_noise)
// at most ~11, which keeps loss terms from low-noise timesteps on the same
// scale as the rest and training stable.
inline NoiseSchedule default_schedule() { return make_schedule(200, 0.008, 0.05); }

// [0,1] pixels <-> [-1,1] diffusion latents.
inline std::vector<float> to_latent(const std::vector<float>& pixels01) {
  std::vector<float> z(pixels01.size());
  for (size_t i = 0; i < z.size(); ++i) z[i] = 2.0f * pixels01[i] - 1.0f;
  return z;
}

inline std::vector<float> to_image(const std::vector<float>& z) {
  std::vector<float> p(z.size());
  for (size_t i = 0; i < z.size(); ++i) {
    float v = z[i];
    if (v < -1.0f) v = -1.0f;
    if (v > 1.0f) v = 1.0f;
    p[i] = (v + 1.0f) * 0.5f;
  }
  return p;
}

// z_t = sqrt(abar_t) z_y + sqrt(1 - abar_t) eps, coefficients in double.
inline std::vector<float> forward_noise(const std::vector<float>& z_y, int t,
                                        const std::vector<float>& eps, const NoiseSchedule& s) {
  if (t < 0 || t >= s.T)
    throw Error(Error::Kind::contract,
                "forward_noise: t=" + std::to_string(t) + " outside [0," + std::to_string(s.T) + ")");
  if (z_y.size() != eps.size())
    throw Error(Error::Kind::shape, "forward_noise: z_y and eps sizes differ");
  const double abar = double(s.alpha_bar[size_t(t)]);
  const double a = std::sqrt(abar), b = std::sqrt(1.0 - abar);
  std::vector<float> z(z_y.size());
  for (size_t i = 0; i < z.size(); ++i) z[i] = float(a * double(z_y[i]) + b * double(eps[i]));
  return z;
}

struct DiffusionBatch {
  std::vector<float> z_y;  // [256] in [-1,1]
  int t = 0;
  std::vector<float> eps;  // [256]
  std::vector<float> z_t;  // [256], always forward_noise(z_y, t, eps)
  std::vector<float> v;    // [32] conditioning embedding (value snapshot)
};

inline DiffusionBatch make_batch(const std::vector<float>& z_y, int t, const std::vector<float>& eps,
                                 const NoiseSchedule& s, std::vector<float> v) {
  DiffusionBatch b;
  b.z_y = z_y;
  b.t = t;
  b.eps = eps;
  b.z_t = forward_noise(z_y, t, eps, s);
  b.v = std::move(v);
  return b;
}

// --- denoiser -----------------------------------------------------------

struct DenoiserNet {
  // concat[z_t 256, time_embed 32, v 32] -> 256 -> 256 -> 256, SiLU between
  Tensor w1, b1, w2, b2, w3, b3;

  // Warm start near an affine identity on the latent block: large positive
  // biases hold every SiLU in its linear region at init (silu(8+u) == 8+u to
  // float precision for |u| <~ 4) and the square weight blocks start at I,
  // so the MLP's raw output begins as ~ z_t. Its implicit target under the
  // external noise gain is z_t - sqrt(abar_t)·x0, which the identity already
  // matches exactly in the high-noise limit; training only has to learn the
  // clean-latent pull on top, not a 256-dim identity map, which gradient
  // descent on a skip-free MLP is far too slow to build.
  static DenoiserNet init(uint64_t seed) {
    DenoiserNet n;
    Rng rng(seed);
    const int64_t in = kLatentDim + kTimeEmbedDim + kEmbedDim;
    auto noisy_eye = [&](int64_t rows, int64_t cols, double off_std, double tail_std) {
      Tensor t = Tensor::zeros({rows, cols});
      for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) {
          double v = rng.normal() * (i < cols ? off_std : tail_std);
          if (i == j) v += 1.0;
          t.data[size_t(i * cols + j)] = float(v);
        }
      return t;
    };
    auto fill = [](Tensor& t, float v) { std::fill(t.data.begin(), t.data.end(), v); };
    n.w1 = noisy_eye(in, kHiddenDim, 0.01, 0.05);  // rows past the latent feed t and v
    n.b1 = Tensor::zeros({kHiddenDim});
    fill(n.b1, 8.0f);
    n.w2 = noisy_eye(kHiddenDim, kHiddenDim, 0.01, 0.05);
    n.b2 = Tensor::zeros({kHiddenDim});
    fill(n.b2, 8.0f);
    n.w3 = noisy_eye(kHiddenDim, kLatentDim, 0.01, 0.05);
    n.b3 = Tensor::zeros({kLatentDim});
    fill(n.b3, -16.0f);
    return n;
  }

  std::vector<Tensor*> params() { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
  std::vector<const Tensor*> params() const { return {&w1, &b1, &w2, &b2, &w3, &b3}; }

  int64_t param_count() const {
    int64_t n = 0;
    for (const Tensor* t : params()) n += t->numel();
    return n;
  }

  void check_finite_params() const {
    for (const Tensor* t : params()) check_finite(*t, "denoiser parameter");
  }
};

struct DenoiserNodes {
  int w1, b1, w2, b2, w3, b3;
};

inline DenoiserNodes register_denoiser(Graph& g, DenoiserNet& net) {
  return {g.param(net.w1), g.param(net.b1), g.param(net.w2),
          g.param(net.b2), g.param(net.w3), g.param(net.b3)};
}

namespace detail {

// Per-timestep gain that turns the MLP's natural-scale output into a noise
// estimate: eps_hat = u / sqrt(1 - abar_t). The MLP's implicit target is
// then u = sqrt(1 - abar_t) * eps = z_t - sqrt(abar_t) * x0 — bounded at
// every timestep.
inline float noise_gain(const NoiseSchedule& s, int t) {
  if (t < 0 || t >= s.T)
    throw Error(Error::Kind::contract,
                "predict_noise: t must be in [0," + std::to_string(s.T) + "), got " + std::to_string(t));
  return float(1.0 / std::sqrt(1.0 - double(s.alpha_bar[size_t(t)])));
}

}  // namespace detail

// Differentiable batched forward: z_node [B,256], one timestep per row,
// v_node [B,32] -> eps_hat [B,256]. Gradients flow into the net parameters
// and into v (and from there into the embedding table).
//
// The MLP's raw output is scaled by a fixed per-timestep gain of
// 1/sqrt(1 - abar_t). A raw noise output would need that gain (two orders
// of magnitude at the low-noise end of the chain) built out of the layers
// themselves, which a fixed-width two-hidden-layer MLP cannot express for
// every t at once; with the gain applied outside, the layers only ever fit
// the bounded quantity z_t - sqrt(abar_t)·x0, so the same capacity covers
// the whole chain. A zero output layer still predicts exactly zero noise.
inline int predict_noise_node(Graph& g, const DenoiserNodes& nn, int z_node,
                              const std::vector<int>& ts, int v_node, const NoiseSchedule& s) {
  if (g.val(v_node).rank() == 1) v_node = g.concat({v_node}, 0);  // [d] -> [1,d]
  const Tensor& z = g.val(z_node);
  const Tensor& v = g.val(v_node);
  if (z.rank() != 2 || z.shape[1] != kLatentDim || v.shape[1] != kEmbedDim ||
      z.shape[0] != v.shape[0] || int64_t(ts.size()) != z.shape[0])
    throw Error(Error::Kind::shape, "predict_noise: z " + shape_str(z.shape) + ", v " +
                                        shape_str(v.shape) + ", " + std::to_string(ts.size()) +
                                        " timesteps");
  const int64_t B = z.shape[0];  // copied out: node pushes below invalidate z
  const int temb = g.sinusoid(ts, kTimeEmbedDim);
  const int x = g.concat({z_node, temb, v_node}, 1);
  const int h1 = g.silu(g.add(g.matmul(x, nn.w1), nn.b1));
  const int h2 = g.silu(g.add(g.matmul(h1, nn.w2), nn.b2));
  const int u = g.add(g.matmul(h2, nn.w3), nn.b3);
  std::vector<float> gain(size_t(B) * size_t(kLatentDim));
  for (int64_t i = 0; i < B; ++i)
    std::fill_n(gain.begin() + i * kLatentDim, kLatentDim, detail::noise_gain(s, ts[size_t(i)]));
  return g.mul(u, g.input({B, kLatentDim}, std::move(gain)));
}

// No-grad forward for one or many rows, bit-identical to the graph path
// (same kernels, same order of float roundings). z and the returned buffer
// are [n * 256] flat; ts is per row; v is per row when it holds n*32 floats
// and a single [32] vector broadcast to every row otherwise.
inline std::vector<float> predict_noise_rows(const DenoiserNet& net, const std::vector<float>& z,
                                             const std::vector<int>& ts, const std::vector<float>& v,
                                             const NoiseSchedule& s) {
  const size_t n = ts.size();
  if (z.size() != n * size_t(kLatentDim))
    throw Error(Error::Kind::shape, "predict_noise: bad z size");
  const bool broadcast_v = v.size() == size_t(kEmbedDim);
  if (!broadcast_v && v.size() != n * size_t(kEmbedDim))
    throw Error(Error::Kind::shape, "predict_noise: bad v size");

  const int64_t in = kLatentDim + kTimeEmbedDim + kEmbedDim;
  std::vector<float> x(n * size_t(in));
  for (size_t i = 0; i < n; ++i) {
    float* row = x.data() + i * size_t(in);
    std::copy(z.begin() + long(i * size_t(kLatentDim)),
              z.begin() + long((i + 1) * size_t(kLatentDim)), row);
    detail::sinusoid(ts[i], kTimeEmbedDim, row + kLatentDim);
    const float* vr = broadcast_v ? v.data() : v.data() + i * size_t(kEmbedDim);
    std::copy(vr, vr + kEmbedDim, row + kLatentDim + kTimeEmbedDim);
  }
  auto layer = [&](std::vector<float>& inp, int64_t rows, const Tensor& w, const Tensor& b,
                   bool act) {
    std::vector<float> out(size_t(rows) * size_t(w.shape[1]));
    detail::matmul(inp.data(), rows, w.shape[0], w.data.data(), w.shape[1], out.data());
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < w.shape[1]; ++j) {
        float& o = out[size_t(i * w.shape[1] + j)];
        o = o + b.data[size_t(j)];
        if (act) o = detail::silu_f(o);
      }
    return out;
  };
  std::vector<float> h = layer(x, int64_t(n), net.w1, net.b1, true);
  h = layer(h, int64_t(n), net.w2, net.b2, true);
  std::vector<float> u = layer(h, int64_t(n), net.w3, net.b3, false);
  // Apply the per-timestep gain with the same single float multiply as the
  // graph path, so the two stay bit-identical.
  for (size_t i = 0; i < n; ++i) {
    const float gain = detail::noise_gain(s, ts[i]);
    for (size_t j = 0; j < size_t(kLatentDim); ++j) u[i * size_t(kLatentDim) + j] *= gain;
  }
  return u;
}

inline std::vector<float> predict_noise(const DenoiserNet& net, const std::vector<float>& z_t, int t,
                                        const std::vector<float>& v, const NoiseSchedule& s) {
  return predict_noise_rows(net, z_t, {t}, v, s);
}

// Eq-style training objective: mean squared error between the drawn noise
// and the prediction, batched over rows.
inline int diffusion_loss_node(Graph& g, const DenoiserNodes& nn, int z_node,
                               const std::vector<int>& ts, int v_node, int eps_node,
                               const NoiseSchedule& s) {
  return g.mse(eps_node, predict_noise_node(g, nn, z_node, ts, v_node, s));
}

inline int diffusion_loss_node(Graph& g, const DenoiserNodes& nn, const DiffusionBatch& b,
                               int v_node, const NoiseSchedule& s) {
  const int z = g.input({1, kLatentDim}, b.z_t);
  const int eps = g.input({1, kLatentDim}, b.eps);
  return diffusion_loss_node(g, nn, z, {b.t}, v_node, eps, s);
}

// Negative prompting at train time: fit the classifier-free-guided
// prediction (1+w) eps(z,t,v) - w eps(z,t,v_neg) to the drawn noise, built
// as eps_v + w (eps_v - eps_neg) so coinciding branches cancel exactly.
// w = 0 short-circuits to the plain diffusion loss, bit-identically.
inline int neg_prompt_train_loss_node(Graph& g, const DenoiserNodes& nn, int z_node,
                                      const std::vector<int>& ts, int v_node, int v_neg_node,
                                      float w, int eps_node, const NoiseSchedule& s) {
  if (w < 0.0f) throw Error(Error::Kind::config, "guidance scale must be >= 0");
  const int eps_v = predict_noise_node(g, nn, z_node, ts, v_node, s);
  if (w == 0.0f) return g.mse(eps_node, eps_v);
  const int eps_neg = predict_noise_node(g, nn, z_node, ts, v_neg_node, s);
  const int guided = g.add(eps_v, g.scale(g.add(eps_v, g.scale(eps_neg, -1.0f)), w));
  return g.mse(eps_node, guided);
}

// --- pretraining ----------------------------------------------------------

struct PretrainConfig {
  int steps = 6000;
  int batch_size = 16;
  double lr = 1e-3;
  double final_lr_frac = 1.0;  // cosine-decay floor as a fraction of lr; 1 = constant lr
  double p_uncond = 0.1;       // conditioning dropout for classifier-free guidance
  uint64_t seed = 1;

  void validate() const {
    if (steps < 1) throw Error(Error::Kind::config, "pretrain: steps must be >= 1");
    if (batch_size < 1) throw Error(Error::Kind::config, "pretrain: batch_size must be >= 1");
    if (!(lr > 0.0)) throw Error(Error::Kind::config, "pretrain: lr must be > 0");
    if (!(final_lr_frac > 0.0) || final_lr_frac > 1.0)
      throw Error(Error::Kind::config, "pretrain: final_lr_frac must be in (0,1]");
    if (p_uncond < 0.0 || p_uncond > 1.0)
      throw Error(Error::Kind::config, "pretrain: p_uncond must be in [0,1]");
  }
};

struct PretrainResult {
  DenoiserNet net;
  EmbeddingTable table;
  std::vector<float> loss_trace;  // one entry per step
  int64_t uncond_uses = 0;        // batch items that trained the null prompt
};

// The corpus must expose every concept both bare and under every attribute,
// otherwise the pre-trained model cannot "know" the attribute-free concepts
// the fine-tuning study relies on.
inline void check_corpus_coverage(const std::vector<LabeledImage>& corpus) {
  std::set<std::string> seen;  // "base" and "base|attr"
  for (const LabeledImage& img : corpus) {
    if (img.attributes.empty()) seen.insert(img.base);
    for (const std::string& a : img.attributes) seen.insert(img.base + "|" + a);
  }
  for (const ConceptSpec& c : concepts()) {
    if (!seen.count(c.name))
      throw Error(Error::Kind::contract,
                  "pretrain corpus has no attribute-free images of '" + c.name + "'");
    for (const AttributeSpec& a : attributes())
      if (!seen.count(c.name + "|" + a.name))
        throw Error(Error::Kind::contract, "pretrain corpus missing combination '" + c.name +
                                               "' x '" + a.name + "'");
  }
}

inline PretrainResult pretrain(const std::vector<LabeledImage>& corpus, const Vocabulary& vocab,
                               const PretrainConfig& cfg, const NoiseSchedule& schedule) {
  cfg.validate();
  check_corpus_coverage(corpus);
  PretrainResult r;
  r.net = DenoiserNet::init(derive_seed(cfg.seed, "denoiser-init"));
  r.table = EmbeddingTable::init(vocab, derive_seed(cfg.seed, "embedding-init"));
  r.table.matrix.requires_grad = true;
  for (Tensor* p : r.net.params()) p->requires_grad = true;

  std::vector<Tensor*> params = r.net.params();
  params.push_back(&r.table.matrix);
  AdamW opt(params, {.lr = cfg.lr});
  Rng rng(derive_seed(cfg.seed, "pretrain-stream"));

  const std::string uncond(kUncondToken);
  const int B = cfg.batch_size;
  for (int step = 0; step < cfg.steps; ++step) {
    if (cfg.final_lr_frac < 1.0) {
      const double progress = cfg.steps > 1 ? double(step) / double(cfg.steps - 1) : 1.0;
      const double scale =
          cfg.final_lr_frac +
          (1.0 - cfg.final_lr_frac) * 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
      opt.set_lr(cfg.lr * scale);
    }
    std::vector<float> zs(size_t(B) * size_t(kLatentDim));
    std::vector<float> epss(size_t(B) * size_t(kLatentDim));
    std::vector<int> ts(size_t(B), 0);
    std::vector<const std::string*> prompts(size_t(B), nullptr);
    for (int i = 0; i < B; ++i) {
      const LabeledImage& img = corpus[size_t(rng.below(int64_t(corpus.size())))];
      ts[size_t(i)] = int(rng.below(schedule.T));
      const bool drop = rng.uniform() < cfg.p_uncond;
      prompts[size_t(i)] = drop ? &uncond : &img.prompt;
      if (drop) ++r.uncond_uses;
      const std::vector<float> z_y = to_latent(img.pixels);
      std::vector<float> eps(size_t(kLatentDim), 0.0f);
      rng.fill_normal(eps.data(), eps.size());
      const std::vector<float> z_t = forward_noise(z_y, ts[size_t(i)], eps, schedule);
      std::copy(z_t.begin(), z_t.end(), zs.begin() + int64_t(i) * kLatentDim);
      std::copy(eps.begin(), eps.end(), epss.begin() + int64_t(i) * kLatentDim);
    }
    Graph g;
    const DenoiserNodes nn = register_denoiser(g, r.net);
    const int tbl = g.param(r.table.matrix);
    std::vector<int> v_rows;
    for (int i = 0; i < B; ++i) v_rows.push_back(encode_node(g, *prompts[size_t(i)], vocab, tbl));
    const int v = g.concat(v_rows, 0);
    const int loss = diffusion_loss_node(g, nn, g.input({B, kLatentDim}, zs), ts, v,
                                         g.input({B, kLatentDim}, epss), schedule);
    zero_grad(params);
    g.backward(loss);
    opt.step();
    r.net.check_finite_params();
    r.loss_trace.push_back(g.val(loss).data[0]);
  }
  return r;
}

// --- sampling ---------------------------------------------------------------

struct SamplerConfig {
  int steps = 0;  // must equal schedule.T (full-length ancestral chain)
  float guidance_scale = 1.0f;
  std::optional<std::string> negative_prompt;
  uint64_t seed = 0;
};

namespace detail {

// One reverse chain per row; every chain owns a random stream, so a batch of
// n chains is bit-identical to n separate single-chain runs.
inline std::vector<std::vector<float>> ddpm_sample_impl(
    const DenoiserNet& net, const std::vector<float>& v_cond, const std::vector<float>& v_ref,
    const NoiseSchedule& s, float w, size_t n, const std::vector<uint64_t>& chain_seeds) {
  std::vector<Rng> rngs;
  rngs.reserve(n);
  for (size_t i = 0; i < n; ++i) rngs.emplace_back(chain_seeds[i]);
  std::vector<float> z(n * size_t(kLatentDim));
  for (size_t i = 0; i < n; ++i)
    rngs[i].fill_normal(z.data() + i * size_t(kLatentDim), size_t(kLatentDim));

  const bool only_ref = w == 0.0f;
  const bool only_cond = w == 1.0f;  // guided == conditional branch exactly
  for (int t = s.T - 1; t >= 0; --t) {
    const std::vector<int> ts(n, t);
    std::vector<float> eps_hat;
    if (only_ref) {
      eps_hat = predict_noise_rows(net, z, ts, v_ref, s);
    } else if (only_cond) {
      eps_hat = predict_noise_rows(net, z, ts, v_cond, s);
    } else {
      const std::vector<float> e_ref = predict_noise_rows(net, z, ts, v_ref, s);
      const std::vector<float> e_cond = predict_noise_rows(net, z, ts, v_cond, s);
      eps_hat.resize(e_ref.size());
      for (size_t i = 0; i < eps_hat.size(); ++i)
        eps_hat[i] = float(double(e_ref[i]) + double(w) * (double(e_cond[i]) - double(e_ref[i])));
    }
    const double beta = double(s.beta[size_t(t)]);
    const double alpha = double(s.alpha[size_t(t)]);
    const double abar = double(s.alpha_bar[size_t(t)]);
    const double mean_scale = 1.0 / std::sqrt(alpha);
    const double eps_coef = beta / std::sqrt(1.0 - abar);
    double sigma = 0.0;
    if (t > 0) {
      const double abar_prev = double(s.alpha_bar[size_t(t - 1)]);
      sigma = std::sqrt((1.0 - abar_prev) / (1.0 - abar) * beta);
    }
    for (size_t i = 0; i < n; ++i) {
      float* zi = z.data() + i * size_t(kLatentDim);
      const float* ei = eps_hat.data() + i * size_t(kLatentDim);
      for (int64_t j = 0; j < kLatentDim; ++j) {
        double mu = mean_scale * (double(zi[j]) - eps_coef * double(ei[j]));
        if (t > 0) mu += sigma * rngs[i].normal();
        zi[j] = float(mu);
      }
    }
  }
  std::vector<std::vector<float>> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i)
    out.push_back(to_image(std::vector<float>(z.begin() + int64_t(i) * kLatentDim,
                                              z.begin() + int64_t(i + 1) * kLatentDim)));
  return out;
}

}  // namespace detail

inline void check_sampler_config(const SamplerConfig& cfg, const NoiseSchedule& s) {
  if (cfg.steps != s.T)
    throw Error(Error::Kind::config, "sampler: steps (" + std::to_string(cfg.steps) +
                                         ") must equal schedule T (" + std::to_string(s.T) + ")");
  if (cfg.guidance_scale < 0.0f)
    throw Error(Error::Kind::config, "sampler: guidance_scale must be >= 0");
}

inline std::vector<float> ddpm_sample(const DenoiserNet& net, const EmbeddingTable& table,
                                      const Vocabulary& vocab, const std::string& prompt,
                                      const NoiseSchedule& s, const SamplerConfig& cfg) {
  check_sampler_config(cfg, s);
  const std::vector<float> v_cond = encode(prompt, vocab, table);
  const std::vector<float> v_ref =
      encode(cfg.negative_prompt ? *cfg.negative_prompt : kUncondToken, vocab, table);
  return detail::ddpm_sample_impl(net, v_cond, v_ref, s, cfg.guidance_scale, 1, {cfg.seed})[0];
}

// n chains with per-chain derived seeds; bit-identical to calling
// ddpm_sample n times with seed = derive_seed(cfg.seed, "sample", i).
inline std::vector<std::vector<float>> ddpm_sample_batch(const DenoiserNet& net,
                                                         const EmbeddingTable& table,
                                                         const Vocabulary& vocab,
                                                         const std::string& prompt,
                                                         const NoiseSchedule& s,
                                                         const SamplerConfig& cfg, int n) {
  check_sampler_config(cfg, s);
  if (n < 1) throw Error(Error::Kind::contract, "ddpm_sample_batch: n must be >= 1");
  const std::vector<float> v_cond = encode(prompt, vocab, table);
  const std::vector<float> v_ref =
      encode(cfg.negative_prompt ? *cfg.negative_prompt : kUncondToken, vocab, table);
  std::vector<uint64_t> seeds;
  for (int i = 0; i < n; ++i) seeds.push_back(derive_seed(cfg.seed, "sample", uint64_t(i)));
  return detail::ddpm_sample_impl(net, v_cond, v_ref, s, cfg.guidance_scale, size_t(n), seeds);
}

}  // namespace coffee
