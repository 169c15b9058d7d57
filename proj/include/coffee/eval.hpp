#pragma once

// Frozen evaluation stack. A small supervised feature extractor is trained
// once on clean renders and then frozen; every metric lives in its feature
// space: contrast-prototype cosine score (mcs_analog), attribute presence
// rate, class-diversity score (is_analog), Frechet feature distance (ffd),
// plus the prompt-embedding drift probe on the text encoder.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "coffee/autodiff.hpp"
#include "coffee/coffee.hpp"
#include "coffee/datagen.hpp"
#include "coffee/optim.hpp"
#include "coffee/rng.hpp"
#include "coffee/tensor.hpp"
#include "coffee/textenc.hpp"

namespace coffee {

// --- feature extractor -------------------------------------------------------

// image [256] -> ReLU hidden [64] -> linear feature [32] -> two linear heads:
// 4-way base-class logits (softmax at use) and 4 attribute logits (sigmoid at
// use). Trained supervised on clean renders, then frozen; raises if the
// held-out gates (class accuracy >= 0.98, attribute AUC >= 0.99) are unmet.
struct FeatureExtractor {
  static constexpr int kHidden = 64;
  static constexpr int kFeatureDim = 32;
  static constexpr int kClassCount = 4;
  static constexpr int kAttrCount = 4;
  static constexpr double kMinClassAcc = 0.98;
  static constexpr double kMinAttrAuc = 0.99;

  Tensor w1, b1;  // [256,64], [64]
  Tensor w2, b2;  // [64,32],  [32]
  Tensor wc, bc;  // [32,4],   [4]   base-class head
  Tensor wa, ba;  // [32,4],   [4]   attribute head
  std::vector<std::string> class_names;  // logit order of the class head
  std::vector<std::string> attr_names;   // logit order of the attribute head
  bool trained = false;

  struct Outputs {
    std::vector<float> feature;           // [32]
    std::array<float, 4> class_logits{};  // pre-softmax
    std::array<float, 4> attr_logits{};   // pre-sigmoid
  };

  static FeatureExtractor init(uint64_t seed) {
    FeatureExtractor fx;
    Rng rng(seed);
    auto dense = [&](int64_t rows, int64_t cols) {
      Tensor t = Tensor::zeros({rows, cols});
      const double std = 1.0 / std::sqrt(double(rows));
      for (float& v : t.data) v = float(rng.normal() * std);
      return t;
    };
    fx.w1 = dense(kImagePixels, kHidden);
    fx.b1 = Tensor::zeros({kHidden});
    fx.w2 = dense(kHidden, kFeatureDim);
    fx.b2 = Tensor::zeros({kFeatureDim});
    fx.wc = dense(kFeatureDim, kClassCount);
    fx.bc = Tensor::zeros({kClassCount});
    fx.wa = dense(kFeatureDim, kAttrCount);
    fx.ba = Tensor::zeros({kAttrCount});
    for (const ConceptSpec& c : concepts()) fx.class_names.push_back(c.name);
    for (const AttributeSpec& a : attributes()) fx.attr_names.push_back(a.name);
    return fx;
  }

  std::vector<Tensor*> params() { return {&w1, &b1, &w2, &b2, &wc, &bc, &wa, &ba}; }

  int class_index(const std::string& name) const {
    for (size_t i = 0; i < class_names.size(); ++i)
      if (class_names[i] == name) return int(i);
    throw Error(Error::Kind::config, "feature extractor: unknown base concept '" + name + "'");
  }

  int attr_index(const std::string& name) const {
    for (size_t i = 0; i < attr_names.size(); ++i)
      if (attr_names[i] == name) return int(i);
    throw Error(Error::Kind::config, "feature extractor: unknown attribute '" + name + "'");
  }

  // Plain value-level forward for one image; all metrics go through this.
  Outputs forward(const float* px) const {
    Outputs o;
    std::array<float, kHidden> h{};
    for (int j = 0; j < kHidden; ++j) {
      float acc = b1.data[size_t(j)];
      for (int i = 0; i < kImagePixels; ++i) acc += px[i] * w1.data[size_t(i * kHidden + j)];
      h[size_t(j)] = acc > 0.0f ? acc : 0.0f;
    }
    o.feature.resize(kFeatureDim);
    for (int j = 0; j < kFeatureDim; ++j) {
      float acc = b2.data[size_t(j)];
      for (int i = 0; i < kHidden; ++i) acc += h[size_t(i)] * w2.data[size_t(i * kFeatureDim + j)];
      o.feature[size_t(j)] = acc;
    }
    for (int j = 0; j < kClassCount; ++j) {
      float acc = bc.data[size_t(j)];
      for (int i = 0; i < kFeatureDim; ++i)
        acc += o.feature[size_t(i)] * wc.data[size_t(i * kClassCount + j)];
      o.class_logits[size_t(j)] = acc;
    }
    for (int j = 0; j < kAttrCount; ++j) {
      float acc = ba.data[size_t(j)];
      for (int i = 0; i < kFeatureDim; ++i)
        acc += o.feature[size_t(i)] * wa.data[size_t(i * kAttrCount + j)];
      o.attr_logits[size_t(j)] = acc;
    }
    return o;
  }

  std::vector<float> feature(const std::vector<float>& image) const {
    require_image(image);
    return forward(image.data()).feature;
  }

  std::array<float, 4> class_probs(const std::vector<float>& image) const {
    require_image(image);
    return softmax4(forward(image.data()).class_logits);
  }

  float attr_prob(const std::vector<float>& image, const std::string& attribute) const {
    require_image(image);
    const float z = forward(image.data()).attr_logits[size_t(attr_index(attribute))];
    return 1.0f / (1.0f + std::exp(-z));
  }

  void require_trained() const {
    if (!trained)
      throw Error(Error::Kind::contract, "feature extractor: not trained; metrics need a trained extractor");
  }

  static void require_image(const std::vector<float>& image) {
    if (image.size() != size_t(kImagePixels))
      throw Error(Error::Kind::shape, "feature extractor: image must have " +
                                          std::to_string(kImagePixels) + " pixels, got " +
                                          std::to_string(image.size()));
  }

  static std::array<float, 4> softmax4(const std::array<float, 4>& z) {
    const float m = std::max(std::max(z[0], z[1]), std::max(z[2], z[3]));
    std::array<float, 4> e{};
    float sum = 0.0f;
    for (int i = 0; i < 4; ++i) {
      e[size_t(i)] = std::exp(z[size_t(i)] - m);
      sum += e[size_t(i)];
    }
    for (int i = 0; i < 4; ++i) e[size_t(i)] /= sum;
    return e;
  }
};

struct FxTrainConfig {
  int steps = 2000;
  int batch_size = 32;
  double lr = 1e-3;
  double heldout_frac = 0.2;

  void validate() const {
    if (steps < 1) throw Error(Error::Kind::config, "fx train: steps must be >= 1");
    if (batch_size < 1) throw Error(Error::Kind::config, "fx train: batch_size must be >= 1");
    if (!(lr > 0.0)) throw Error(Error::Kind::config, "fx train: lr must be > 0");
    if (!(heldout_frac > 0.0 && heldout_frac < 1.0))
      throw Error(Error::Kind::config, "fx train: heldout_frac must be in (0,1)");
  }
};

namespace detail {

// Rank-based AUC (Mann-Whitney) with average ranks over ties.
inline double auc_rank(const std::vector<float>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw Error(Error::Kind::contract, "auc: scores and labels must have equal length");
  const size_t n = scores.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * (double(i) + double(j)) + 1.0;  // ranks are 1-based
    for (size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double rank_pos = 0.0;
  int64_t pos = 0, neg = 0;
  for (size_t k = 0; k < n; ++k) {
    if (labels[k]) {
      rank_pos += rank[k];
      ++pos;
    } else {
      ++neg;
    }
  }
  if (pos == 0 || neg == 0)
    throw Error(Error::Kind::contract, "auc: need both positive and negative labels");
  return (rank_pos - 0.5 * double(pos) * double(pos + 1)) / (double(pos) * double(neg));
}

struct FxEvalStats {
  double class_acc = 0.0;
  double attr_auc = 0.0;  // macro mean over attribute heads
};

inline FxEvalStats evaluate_extractor(const FeatureExtractor& fx,
                                      const std::vector<LabeledImage>& images) {
  if (images.empty())
    throw Error(Error::Kind::contract, "fx eval: empty image set");
  int64_t correct = 0;
  std::vector<std::vector<float>> scores(size_t(FeatureExtractor::kAttrCount));
  std::vector<std::vector<int>> labels(size_t(FeatureExtractor::kAttrCount));
  for (const LabeledImage& im : images) {
    FeatureExtractor::require_image(im.pixels);
    const FeatureExtractor::Outputs o = fx.forward(im.pixels.data());
    int arg = 0;
    for (int c = 1; c < FeatureExtractor::kClassCount; ++c)
      if (o.class_logits[size_t(c)] > o.class_logits[size_t(arg)]) arg = c;
    if (fx.class_names[size_t(arg)] == im.base) ++correct;
    for (int a = 0; a < FeatureExtractor::kAttrCount; ++a) {
      scores[size_t(a)].push_back(o.attr_logits[size_t(a)]);
      labels[size_t(a)].push_back(im.has_attribute(fx.attr_names[size_t(a)]) ? 1 : 0);
    }
  }
  FxEvalStats st;
  st.class_acc = double(correct) / double(images.size());
  double auc_sum = 0.0;
  for (int a = 0; a < FeatureExtractor::kAttrCount; ++a)
    auc_sum += auc_rank(scores[size_t(a)], labels[size_t(a)]);
  st.attr_auc = auc_sum / double(FeatureExtractor::kAttrCount);
  return st;
}

}  // namespace detail

// Supervised training on clean renders: both heads regress +/-4 targets under
// MSE (present -> +4, absent -> -4), which saturates sigmoid/softmax at use
// time while staying inside the graph's op vocabulary. The held-out gates are
// checked after the fixed step budget; missing them raises instead of
// returning a silently weak extractor.
inline FeatureExtractor train_feature_extractor(const std::vector<LabeledImage>& corpus,
                                                uint64_t seed,
                                                const FxTrainConfig& cfg = {}) {
  cfg.validate();
  if (corpus.size() < 10)
    throw Error(Error::Kind::contract, "fx train: corpus too small (need >= 10 images)");

  FeatureExtractor fx = FeatureExtractor::init(derive_seed(seed, "fx_init"));

  // Deterministic shuffled split; the corpus is balanced, so a uniform split
  // keeps both label sides present in the held-out slice.
  std::vector<size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), size_t(0));
  Rng split_rng(derive_seed(seed, "fx_split"));
  for (size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[size_t(split_rng.below(int64_t(i)))]);
  const size_t n_heldout =
      std::max(size_t(1), size_t(double(corpus.size()) * cfg.heldout_frac));
  if (n_heldout >= corpus.size())
    throw Error(Error::Kind::contract, "fx train: held-out split leaves no training data");
  std::vector<LabeledImage> heldout, train;
  for (size_t i = 0; i < order.size(); ++i)
    (i < n_heldout ? heldout : train).push_back(corpus[order[i]]);

  const float kTarget = 4.0f;
  AdamW opt(fx.params(), {.lr = cfg.lr});
  for (Tensor* p : fx.params()) p->requires_grad = true;
  Rng batch_rng(derive_seed(seed, "fx_batch"));

  const int B = cfg.batch_size;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<float> px(size_t(B) * size_t(kImagePixels));
    std::vector<float> cls_tgt(size_t(B) * size_t(FeatureExtractor::kClassCount), -kTarget);
    std::vector<float> attr_tgt(size_t(B) * size_t(FeatureExtractor::kAttrCount), -kTarget);
    for (int b = 0; b < B; ++b) {
      const LabeledImage& im = train[size_t(batch_rng.below(int64_t(train.size())))];
      FeatureExtractor::require_image(im.pixels);
      std::copy(im.pixels.begin(), im.pixels.end(), px.begin() + size_t(b) * size_t(kImagePixels));
      cls_tgt[size_t(b) * 4 + size_t(fx.class_index(im.base))] = kTarget;
      for (const std::string& a : im.attributes)
        attr_tgt[size_t(b) * 4 + size_t(fx.attr_index(a))] = kTarget;
    }
    Graph g;
    const int x = g.input({B, kImagePixels}, std::move(px));
    const int p_w1 = g.param(fx.w1), p_b1 = g.param(fx.b1);
    const int p_w2 = g.param(fx.w2), p_b2 = g.param(fx.b2);
    const int p_wc = g.param(fx.wc), p_bc = g.param(fx.bc);
    const int p_wa = g.param(fx.wa), p_ba = g.param(fx.ba);
    const int h = g.relu(g.add(g.matmul(x, p_w1), p_b1));
    const int f = g.add(g.matmul(h, p_w2), p_b2);
    const int cls = g.add(g.matmul(f, p_wc), p_bc);
    const int att = g.add(g.matmul(f, p_wa), p_ba);
    const int loss = g.add(g.mse(cls, g.input({B, 4}, std::move(cls_tgt))),
                           g.mse(att, g.input({B, 4}, std::move(attr_tgt))));
    for (Tensor* p : fx.params()) p->zero_grad();
    g.backward(loss);
    opt.step();
  }
  for (Tensor* p : fx.params()) p->requires_grad = false;

  const detail::FxEvalStats held = detail::evaluate_extractor(fx, heldout);
  if (held.class_acc < FeatureExtractor::kMinClassAcc ||
      held.attr_auc < FeatureExtractor::kMinAttrAuc)
    throw Error(Error::Kind::contract,
                "fx train: held-out gates unmet after " + std::to_string(cfg.steps) +
                    " steps (class acc " + std::to_string(held.class_acc) + " < " +
                    std::to_string(FeatureExtractor::kMinClassAcc) + " or attr AUC " +
                    std::to_string(held.attr_auc) + " < " +
                    std::to_string(FeatureExtractor::kMinAttrAuc) + ")");
  fx.trained = true;
  return fx;
}

// --- metrics on generated samples --------------------------------------------

namespace detail {

inline std::vector<std::vector<float>> features_of(const std::vector<std::vector<float>>& images,
                                                   const FeatureExtractor& fx) {
  std::vector<std::vector<float>> out;
  out.reserve(images.size());
  for (const std::vector<float>& im : images) {
    FeatureExtractor::require_image(im);
    out.push_back(fx.forward(im.data()).feature);
  }
  return out;
}

inline void l2_normalize(std::vector<float>& v) {
  double n2 = 0.0;
  for (float x : v) n2 += double(x) * double(x);
  const double n = std::max(std::sqrt(n2), 1e-12);
  for (float& x : v) x = float(double(x) / n);
}

inline double cosine_d(const std::vector<float>& a, const std::vector<float>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * double(b[i]);
    na += double(a[i]) * double(a[i]);
    nb += double(b[i]) * double(b[i]);
  }
  return dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-12);
}

// exp(mean KL(p_x || mean-marginal)) over class distributions; the public
// is_analog wraps this, and synthetic-probability oracles hit it directly.
inline double diversity_from_probs(const std::vector<std::array<float, 4>>& probs) {
  if (probs.empty()) throw Error(Error::Kind::contract, "diversity: empty probability list");
  std::array<double, 4> marginal{};
  for (const std::array<float, 4>& p : probs)
    for (int c = 0; c < 4; ++c) marginal[size_t(c)] += double(p[size_t(c)]);
  for (int c = 0; c < 4; ++c) marginal[size_t(c)] /= double(probs.size());
  double mean_kl = 0.0;
  for (const std::array<float, 4>& p : probs) {
    double kl = 0.0;
    for (int c = 0; c < 4; ++c) {
      const double pc = double(p[size_t(c)]);
      if (pc > 0.0) kl += pc * std::log(pc / std::max(marginal[size_t(c)], 1e-300));
    }
    mean_kl += kl;
  }
  return std::exp(mean_kl / double(probs.size()));
}

// Frechet distance between Gaussian fits of two raw feature sets. The matrix
// square root uses tr((S1 S2)^1/2) = tr((A S2 A)^1/2) with A = S1^1/2, so the
// eigendecompositions only ever see symmetric matrices.
inline double ffd_features(const std::vector<std::vector<float>>& fa,
                           const std::vector<std::vector<float>>& fb) {
  const int64_t d = FeatureExtractor::kFeatureDim;
  const int64_t min_n = d + 1;
  if (int64_t(fa.size()) < min_n || int64_t(fb.size()) < min_n)
    throw Error(Error::Kind::contract,
                "ffd: need >= " + std::to_string(min_n) + " samples per side, got " +
                    std::to_string(fa.size()) + " and " + std::to_string(fb.size()));
  auto fit = [&](const std::vector<std::vector<float>>& f, Eigen::VectorXd& mu,
                 Eigen::MatrixXd& sigma) {
    const int64_t n = int64_t(f.size());
    Eigen::MatrixXd X(n, d);
    for (int64_t i = 0; i < n; ++i) {
      if (int64_t(f[size_t(i)].size()) != d)
        throw Error(Error::Kind::shape, "ffd: feature rows must have dim " + std::to_string(d));
      for (int64_t j = 0; j < d; ++j) X(i, j) = double(f[size_t(i)][size_t(j)]);
    }
    mu = X.colwise().mean();
    const Eigen::MatrixXd C = X.rowwise() - mu.transpose();
    sigma = (C.adjoint() * C) / double(n - 1);
    sigma += 1e-6 * Eigen::MatrixXd::Identity(d, d);
  };
  Eigen::VectorXd mu1, mu2;
  Eigen::MatrixXd s1, s2;
  fit(fa, mu1, s1);
  fit(fb, mu2, s2);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es1(s1);
  if (es1.info() != Eigen::Success)
    throw Error(Error::Kind::numeric, "ffd: eigendecomposition failed");
  const Eigen::MatrixXd root1 =
      es1.eigenvectors() *
      es1.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
      es1.eigenvectors().transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es12(root1 * s2 * root1);
  if (es12.info() != Eigen::Success)
    throw Error(Error::Kind::numeric, "ffd: eigendecomposition failed");
  const double tr_sqrt = es12.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  const double dist =
      (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
  return std::max(dist, 0.0);
}

}  // namespace detail

// Mean cosine between sample features and a contrast prototype (mean of
// L2-normalized attribute-positive reference features minus the negative
// mean, renormalized). The contrast direction isolates the attribute; a raw
// positive mean would also carry the base concept.
inline float mcs_analog(const std::vector<std::vector<float>>& samples,
                        const std::string& attribute, const FeatureExtractor& fx,
                        const std::vector<LabeledImage>& refset) {
  fx.require_trained();
  fx.attr_index(attribute);  // validates the name
  if (samples.empty())
    throw Error(Error::Kind::contract, "mcs_analog: empty sample list");
  std::vector<float> pos(size_t(FeatureExtractor::kFeatureDim), 0.0f);
  std::vector<float> neg(size_t(FeatureExtractor::kFeatureDim), 0.0f);
  int64_t n_pos = 0, n_neg = 0;
  for (const LabeledImage& im : refset) {
    FeatureExtractor::require_image(im.pixels);
    std::vector<float> f = fx.forward(im.pixels.data()).feature;
    detail::l2_normalize(f);
    if (im.has_attribute(attribute)) {
      for (size_t i = 0; i < f.size(); ++i) pos[i] += f[i];
      ++n_pos;
    } else {
      for (size_t i = 0; i < f.size(); ++i) neg[i] += f[i];
      ++n_neg;
    }
  }
  if (n_pos < 50 || n_neg < 50)
    throw Error(Error::Kind::contract,
                "mcs_analog: refset needs >= 50 images with and >= 50 without '" + attribute +
                    "', got " + std::to_string(n_pos) + " / " + std::to_string(n_neg));
  std::vector<float> proto(size_t(FeatureExtractor::kFeatureDim));
  for (size_t i = 0; i < proto.size(); ++i)
    proto[i] = pos[i] / float(n_pos) - neg[i] / float(n_neg);
  detail::l2_normalize(proto);

  double acc = 0.0;
  for (const std::vector<float>& im : samples) {
    FeatureExtractor::require_image(im);
    acc += detail::cosine_d(fx.forward(im.data()).feature, proto);
  }
  return float(acc / double(samples.size()));
}

// Fraction of samples whose attribute-head sigmoid exceeds 0.5.
inline float presence_rate(const std::vector<std::vector<float>>& samples,
                           const std::string& attribute, const FeatureExtractor& fx) {
  fx.require_trained();
  const int a = fx.attr_index(attribute);
  if (samples.empty())
    throw Error(Error::Kind::contract, "presence_rate: empty sample list");
  int64_t hits = 0;
  for (const std::vector<float>& im : samples) {
    FeatureExtractor::require_image(im);
    const float z = fx.forward(im.data()).attr_logits[size_t(a)];
    if (1.0f / (1.0f + std::exp(-z)) > 0.5f) ++hits;
  }
  return float(double(hits) / double(samples.size()));
}

inline float presence_rate(const std::vector<LabeledImage>& samples,
                           const std::string& attribute, const FeatureExtractor& fx) {
  std::vector<std::vector<float>> px;
  px.reserve(samples.size());
  for (const LabeledImage& im : samples) px.push_back(im.pixels);
  return presence_rate(px, attribute, fx);
}

// exp(mean KL(p(class|x) || mean marginal)) over the base-class head; lives
// in [1, 4] for the 4-way head.
inline float is_analog(const std::vector<std::vector<float>>& samples,
                       const FeatureExtractor& fx) {
  fx.require_trained();
  if (samples.size() < 16)
    throw Error(Error::Kind::contract, "is_analog: need >= 16 samples, got " +
                                           std::to_string(samples.size()));
  std::vector<std::array<float, 4>> probs;
  probs.reserve(samples.size());
  for (const std::vector<float>& im : samples) {
    FeatureExtractor::require_image(im);
    probs.push_back(FeatureExtractor::softmax4(fx.forward(im.data()).class_logits));
  }
  return float(detail::diversity_from_probs(probs));
}

// Frechet feature distance between generated samples and a reference image
// set. Callers pass attribute-free references of the matching base concept,
// so lower means "kept the style without absorbing the attribute".
inline float ffd(const std::vector<std::vector<float>>& samples,
                 const std::vector<LabeledImage>& refset, const FeatureExtractor& fx) {
  fx.require_trained();
  std::vector<std::vector<float>> ref_px;
  ref_px.reserve(refset.size());
  for (const LabeledImage& im : refset) ref_px.push_back(im.pixels);
  return float(detail::ffd_features(detail::features_of(samples, fx),
                                    detail::features_of(ref_px, fx)));
}

// Per-concept |cos(encode(c_i), v_m_k) - ref_cosines[k]| on the current table,
// no gradients; bit-identical to the per_concept_drift a coffee_step just
// reported because both run the same value-level formula.
inline std::vector<float> drift(const EmbeddingTable& table, const ConceptRefs& refs,
                                const Vocabulary& vocab) {
  refs.check();
  return concept_drifts(encode(refs.user_prompt, vocab, table), refs);
}

}  // namespace coffee
