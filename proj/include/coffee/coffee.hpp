#pragma once

// Fine-tuning with a drift-regularized prompt embedding, plus the baseline
// methods it is compared against. The regularizer pins the cosine between
// the fine-tuned prompt embedding and each undesired concept's embedding at
// its pre-fine-tuning value, so adapting the model to new images cannot pull
// the prompt toward language the user never wrote.

#include <string>
#include <vector>

#include "coffee/diffusion.hpp"
#include "coffee/optim.hpp"
#include "coffee/textenc.hpp"

namespace coffee {

// direct          plain diffusion-loss fine-tuning
// coffee          diffusion loss + lambda * embedding-drift regularizer
// concept_removal trains like direct; inference prompts "c_i without c_m"
// neg_prompt_infer trains like direct; inference passes c_m as the negative prompt
// neg_prompt_train fits the guided prediction steered away from c_m
// neg_prompt_both  neg_prompt_train training + negative prompt at inference
enum class FinetuneMethod {
  direct,
  coffee,
  concept_removal,
  neg_prompt_infer,
  neg_prompt_train,
  neg_prompt_both,
};

inline const std::vector<std::pair<FinetuneMethod, const char*>>& method_names() {
  static const std::vector<std::pair<FinetuneMethod, const char*>> names = {
      {FinetuneMethod::direct, "direct"},
      {FinetuneMethod::coffee, "coffee"},
      {FinetuneMethod::concept_removal, "concept_removal"},
      {FinetuneMethod::neg_prompt_infer, "neg_prompt_infer"},
      {FinetuneMethod::neg_prompt_train, "neg_prompt_train"},
      {FinetuneMethod::neg_prompt_both, "neg_prompt_both"},
  };
  return names;
}

inline const char* method_name(FinetuneMethod m) {
  for (const auto& [method, name] : method_names())
    if (method == m) return name;
  throw Error(Error::Kind::config, "unknown fine-tuning method");
}

inline FinetuneMethod method_from_name(const std::string& name) {
  for (const auto& [method, n] : method_names())
    if (name == n) return method;
  std::string list;
  for (const auto& [method, n] : method_names()) list += (list.empty() ? "" : ", ") + std::string(n);
  throw Error(Error::Kind::config, "unknown fine-tuning method '" + name + "'; one of: " + list);
}

// Which parameter groups the fine-tuning optimizer may touch. The default
// adapts the text encoder only and freezes the denoiser.
struct TrainableGroups {
  bool text_encoder = true;
  bool denoiser = false;

  void validate() const {
    if (!text_encoder && !denoiser)
      throw Error(Error::Kind::config, "trainable_groups must name at least one group");
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    if (text_encoder) out.push_back("text_encoder");
    if (denoiser) out.push_back("denoiser");
    return out;
  }

  static TrainableGroups from_names(const std::vector<std::string>& names) {
    TrainableGroups g{false, false};
    for (const std::string& n : names) {
      if (n == "text_encoder") g.text_encoder = true;
      else if (n == "denoiser") g.denoiser = true;
      else
        throw Error(Error::Kind::config,
                    "unknown trainable group '" + n + "'; one of: text_encoder, denoiser");
    }
    g.validate();
    return g;
  }
};

struct CoffeeConfig {
  double lambda = 1.0;
  TrainableGroups trainable_groups;  // text encoder only by default
  int steps = 500;
  double lr = 1e-3;  // constant for the whole fine-tuning run
  int batch_size = 1;
  float neg_prompt_w = 3.0f;  // guidance scale for the train-time negative-prompting baselines

  void validate() const {
    if (lambda < 0.0) throw Error(Error::Kind::config, "finetune: lambda must be >= 0");
    trainable_groups.validate();
    if (steps < 0) throw Error(Error::Kind::config, "finetune: steps must be >= 0");
    if (!(lr > 0.0)) throw Error(Error::Kind::config, "finetune: lr must be > 0");
    if (batch_size < 1) throw Error(Error::Kind::config, "finetune: batch_size must be >= 1");
    if (neg_prompt_w < 0.0f)
      throw Error(Error::Kind::config, "finetune: neg_prompt_w must be >= 0");
  }
};

// Per-step objective components. l_reg and the per-concept drifts are
// reported for every method (they cost one forward cosine each) but only the
// drift-regularized objective feeds them back into the gradient.
struct LossBreakdown {
  float l_diffusion = 0.0f;
  float l_reg = 0.0f;
  float l_total = 0.0f;
  std::vector<float> per_concept_drift;  // |cos(v, v_m_k) - ref_cosines[k]|
};

namespace detail {

// Mean of per-concept drifts accumulated in the same float order as the
// graph path below, so reported values agree bit-for-bit.
inline float drift_mean(const std::vector<float>& drifts) {
  float acc = 0.0f;
  for (float d : drifts) acc = acc + d;
  return acc * (1.0f / float(drifts.size()));
}

}  // namespace detail

// Value-level drift: |cos(v_i, v_m_k) - cos(v, v_m_k)| per undesired concept,
// with the first term frozen at its snapshot value. Mirrors the graph path's
// float roundings exactly.
inline std::vector<float> concept_drifts(const std::vector<float>& v, const ConceptRefs& refs) {
  refs.check();
  std::vector<float> out;
  out.reserve(refs.v_m_list.size());
  for (size_t k = 0; k < refs.v_m_list.size(); ++k) {
    const std::vector<float>& v_m = refs.v_m_list[k];
    if (v.size() != v_m.size())
      throw Error(Error::Kind::shape, "reg_loss: v has " + std::to_string(v.size()) +
                                          " dims, reference has " + std::to_string(v_m.size()));
    const float c = float(detail::cosine_d(v.data(), v_m.data(), v.size()));
    out.push_back(std::fabs(refs.ref_cosines[k] - c));
  }
  return out;
}

inline float reg_loss(const std::vector<float>& v, const ConceptRefs& refs) {
  return detail::drift_mean(concept_drifts(v, refs));
}

// Differentiable drift regularizer on the active graph: mean over undesired
// concepts of |ref_cosines[k] - cos(v, v_m_k)|. The reference embeddings
// enter as constants; gradients flow only into v.
inline int reg_loss_node(Graph& g, int v_node, const ConceptRefs& refs) {
  refs.check();
  // validate up front: node pushes below invalidate references into the graph
  const Shape v_shape = g.val(v_node).shape;
  for (const std::vector<float>& v_m : refs.v_m_list)
    if (v_shape.size() != 1 || v_shape[0] != int64_t(v_m.size()))
      throw Error(Error::Kind::shape, "reg_loss: v shape " + shape_str(v_shape) +
                                          ", reference has " + std::to_string(v_m.size()) + " dims");
  int acc = -1;
  for (size_t k = 0; k < refs.v_m_list.size(); ++k) {
    const std::vector<float>& v_m = refs.v_m_list[k];
    const int cos_k = g.cosine(v_node, g.input({int64_t(v_m.size())}, v_m));
    const int drift =
        g.abs_val(g.add(g.input(Tensor::scalar(refs.ref_cosines[k])), g.scale(cos_k, -1.0f)));
    acc = k == 0 ? drift : g.add(acc, drift);
  }
  return g.scale(acc, 1.0f / float(refs.v_m_list.size()));
}

// Combined objective. lambda = 0 short-circuits to the diffusion loss node
// itself so the regularizer leaves no trace in the graph, mirroring how a
// plain fine-tuning step builds its loss.
inline int total_loss_node(Graph& g, int l_diff, int l_reg, double lambda) {
  if (lambda < 0.0) throw Error(Error::Kind::config, "total_loss: lambda must be >= 0");
  if (lambda == 0.0) return l_diff;
  return g.add(l_diff, g.scale(l_reg, float(lambda)));
}

inline float total_loss(float l_diff, float l_reg, double lambda) {
  if (lambda < 0.0) throw Error(Error::Kind::config, "total_loss: lambda must be >= 0");
  if (lambda == 0.0) return l_diff;
  return l_diff + float(lambda) * l_reg;
}

namespace detail {

// One optimizer step on one mini-batch, shared by every fine-tuning method.
// The caller owns the optimizer (whose parameter set defines the trainable
// groups) and the random stream; each batch item consumes one timestep draw
// and one noise draw, in that order, so methods that build different loss
// heads still see identical noise sequences under the same seed. loss_head
// receives the assembled graph pieces and returns the node to backpropagate
// plus the filled-in breakdown.
template <typename LossHead>
inline LossBreakdown finetune_step(DenoiserNet& net, EmbeddingTable& table,
                                   const std::vector<const LabeledImage*>& batch,
                                   const std::string& c_i, const Vocabulary& vocab,
                                   const NoiseSchedule& s, AdamW& opt, Rng& rng,
                                   LossHead&& loss_head) {
  const int64_t B = int64_t(batch.size());
  std::vector<float> zs(size_t(B) * size_t(kLatentDim));
  std::vector<float> epss(size_t(B) * size_t(kLatentDim));
  std::vector<int> ts(size_t(B), 0);
  for (int64_t i = 0; i < B; ++i) {
    ts[size_t(i)] = int(rng.below(s.T));
    std::vector<float> eps(size_t(kLatentDim), 0.0f);
    rng.fill_normal(eps.data(), eps.size());
    const std::vector<float> z_y = to_latent(batch[size_t(i)]->pixels);
    const std::vector<float> z_t = forward_noise(z_y, ts[size_t(i)], eps, s);
    std::copy(z_t.begin(), z_t.end(), zs.begin() + i * kLatentDim);
    std::copy(eps.begin(), eps.end(), epss.begin() + i * kLatentDim);
  }

  Graph g;
  const DenoiserNodes nn = register_denoiser(g, net);
  const int tbl = g.param(table.matrix);
  const int v = encode_node(g, c_i, vocab, tbl);  // [d]; shared by every row
  const int v_batch = g.concat(std::vector<int>(size_t(B), v), 0);
  const int z_node = g.input({B, kLatentDim}, zs);
  const int eps_node = g.input({B, kLatentDim}, epss);

  LossBreakdown out;
  const int loss = loss_head(g, nn, z_node, ts, v, v_batch, eps_node, tbl, out);

  std::vector<Tensor*> all = net.params();
  all.push_back(&table.matrix);
  zero_grad(all);
  g.backward(loss);
  opt.step();
  net.check_finite_params();
  check_finite(table.matrix, "embedding table");
  return out;
}

// The fine-tuning optimizer covers exactly the trainable groups; everything
// else never enters an optimizer and so stays bit-identical.
inline AdamW make_finetune_optimizer(DenoiserNet& net, EmbeddingTable& table,
                                     const CoffeeConfig& cfg) {
  std::vector<Tensor*> params;
  if (cfg.trainable_groups.text_encoder) params.push_back(&table.matrix);
  if (cfg.trainable_groups.denoiser)
    for (Tensor* p : net.params()) params.push_back(p);
  for (Tensor* p : params) p->requires_grad = true;
  return AdamW(params, {.lr = cfg.lr});
}

}  // namespace detail

// One drift-regularized fine-tuning step on one image: draws (t, eps), builds
// the diffusion loss on v = encode(c_i) plus lambda times the drift
// regularizer on the same v, backpropagates, and steps the optimizer over the
// trainable groups only. Reports the step's loss components; the drift values
// are exact zeros before the embedding table first moves.
inline LossBreakdown coffee_step(DenoiserNet& net, EmbeddingTable& table, const ConceptRefs& refs,
                                 const std::vector<float>& image01, const std::string& c_i,
                                 const Vocabulary& vocab, const NoiseSchedule& s,
                                 const CoffeeConfig& cfg, AdamW& opt, Rng& rng) {
  cfg.validate();
  refs.check();
  LabeledImage img;
  img.pixels = image01;
  const LabeledImage* item = &img;
  return detail::finetune_step(
      net, table, {item}, c_i, vocab, s, opt, rng,
      [&](Graph& g, const DenoiserNodes& nn, int z_node, const std::vector<int>& ts, int v,
          int v_batch, int eps_node, int, LossBreakdown& out) {
        const int l_diff = diffusion_loss_node(g, nn, z_node, ts, v_batch, eps_node, s);
        out.l_diffusion = g.val(l_diff).data[0];
        if (cfg.lambda == 0.0) {
          // Regularizer kept out of the graph entirely: reported values only.
          out.per_concept_drift = concept_drifts(g.val(v).data, refs);
          out.l_reg = detail::drift_mean(out.per_concept_drift);
          out.l_total = out.l_diffusion;
          return l_diff;
        }
        const int l_reg = reg_loss_node(g, v, refs);
        const int total = total_loss_node(g, l_diff, l_reg, cfg.lambda);
        out.l_reg = g.val(l_reg).data[0];
        out.l_total = g.val(total).data[0];
        out.per_concept_drift = concept_drifts(g.val(v).data, refs);
        return total;
      });
}

struct FinetuneResult {
  DenoiserNet net;
  EmbeddingTable table;
  std::vector<LossBreakdown> trace;  // one entry per step
};

// Runs config.steps optimizer steps cycling over the fine-tuning images.
// All methods share the same draw discipline, so runs differing only in the
// loss head see identical (t, eps) sequences under the same seed; plain
// fine-tuning and the lambda = 0 regularized run are bit-identical.
inline FinetuneResult finetune(FinetuneMethod method, DenoiserNet net, EmbeddingTable table,
                               const std::vector<LabeledImage>& data, const ConceptRefs& refs,
                               const Vocabulary& vocab, const NoiseSchedule& s,
                               const CoffeeConfig& cfg, Rng& rng) {
  cfg.validate();
  refs.check();
  if (data.empty()) throw Error(Error::Kind::contract, "finetune: need at least one image");
  method_name(method);  // rejects out-of-enum values

  FinetuneResult r{std::move(net), std::move(table), {}};
  AdamW opt = detail::make_finetune_optimizer(r.net, r.table, cfg);
  const std::string& c_i = refs.user_prompt;

  // The negative-prompting baselines steer away from every undesired concept
  // at once; mean pooling makes the joined prompt the centroid of the
  // concepts' embeddings.
  std::string c_m_joined;
  for (const std::string& c : refs.undesired_concepts)
    c_m_joined += (c_m_joined.empty() ? "" : " ") + c;
  const bool guided_training =
      method == FinetuneMethod::neg_prompt_train || method == FinetuneMethod::neg_prompt_both;

  size_t cursor = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<const LabeledImage*> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      batch.push_back(&data[cursor]);
      cursor = (cursor + 1) % data.size();
    }
    r.trace.push_back(detail::finetune_step(
        r.net, r.table, batch, c_i, vocab, s, opt, rng,
        [&](Graph& g, const DenoiserNodes& nn, int z_node, const std::vector<int>& ts, int v,
            int v_batch, int eps_node, int tbl, LossBreakdown& out) {
          int loss;
          if (method == FinetuneMethod::coffee) {
            const int l_diff = diffusion_loss_node(g, nn, z_node, ts, v_batch, eps_node, s);
            out.l_diffusion = g.val(l_diff).data[0];
            if (cfg.lambda == 0.0) {
              out.l_total = out.l_diffusion;
              loss = l_diff;
            } else {
              const int l_reg = reg_loss_node(g, v, refs);
              const int total = total_loss_node(g, l_diff, l_reg, cfg.lambda);
              out.l_reg = g.val(l_reg).data[0];
              out.l_total = g.val(total).data[0];
              loss = total;
            }
          } else if (guided_training) {
            const int v_neg = encode_node(g, c_m_joined, vocab, tbl);
            const int v_neg_batch = g.concat(std::vector<int>(size_t(ts.size()), v_neg), 0);
            loss = neg_prompt_train_loss_node(g, nn, z_node, ts, v_batch, v_neg_batch,
                                              cfg.neg_prompt_w, eps_node, s);
            out.l_diffusion = g.val(loss).data[0];
            out.l_total = out.l_diffusion;
          } else {  // direct, concept_removal, neg_prompt_infer: plain fine-tuning
            loss = diffusion_loss_node(g, nn, z_node, ts, v_batch, eps_node, s);
            out.l_diffusion = g.val(loss).data[0];
            out.l_total = out.l_diffusion;
          }
          out.per_concept_drift = concept_drifts(g.val(v).data, refs);
          if (method != FinetuneMethod::coffee || cfg.lambda == 0.0)
            out.l_reg = detail::drift_mean(out.per_concept_drift);
          return loss;
        }));
  }
  return r;
}

}  // namespace coffee

