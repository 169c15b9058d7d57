#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "coffee/coffee.hpp"
#include "oracle.hpp"

using namespace coffee;
using oracle::dvec;

namespace {

// Two-dimensional refs with hand-picked geometry; cosine formulas stay
// closed-form.
ConceptRefs planar_refs(std::vector<float> v_i, std::vector<std::vector<float>> v_m) {
  ConceptRefs refs;
  refs.user_prompt = "circle";
  refs.v_i = std::move(v_i);
  for (auto& m : v_m) {
    refs.undesired_concepts.push_back("frame");
    refs.ref_cosines.push_back(
        float(oracle::cosine(dvec(refs.v_i.begin(), refs.v_i.end()), dvec(m.begin(), m.end()))));
    refs.v_m_list.push_back(std::move(m));
  }
  return refs;
}

dvec to_d(const std::vector<float>& v) { return dvec(v.begin(), v.end()); }

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

bool same_bits(const DenoiserNet& a, const DenoiserNet& b) {
  auto pa = a.params(), pb = b.params();
  for (size_t i = 0; i < pa.size(); ++i)
    if (!same_bits(*pa[i], *pb[i])) return false;
  return true;
}

struct Setup {
  Vocabulary vocab = Vocabulary::standard();
  NoiseSchedule s = make_schedule(40, 0.008, 0.15);  // short chain keeps tests quick
  DenoiserNet net = DenoiserNet::init(7);
  EmbeddingTable table = EmbeddingTable::init(Vocabulary::standard(), 8);
  std::vector<LabeledImage> data = build_finetune_set("circle", "frame", 10, 9);
  ConceptRefs refs;

  Setup() { refs = snapshot_refs("circle", {"frame"}, vocab, table); }
};

}  // namespace

TEST_CASE("drift regularizer matches closed-form cosines") {
  // v_i = [1,0], v_m = [0,1], v = [1,1]/sqrt(2): |cos(v_i,v_m) - cos(v,v_m)| = 0.7071
  ConceptRefs refs = planar_refs({1.0f, 0.0f}, {{0.0f, 1.0f}});
  const float inv_sqrt2 = float(1.0 / std::sqrt(2.0));
  const std::vector<float> v = {inv_sqrt2, inv_sqrt2};
  CHECK(reg_loss(v, refs) == Catch::Approx(inv_sqrt2).margin(1e-4));

  Graph g;
  Tensor vt({2}, v);
  const int l = reg_loss_node(g, g.param(vt), refs);
  CHECK(g.val(l).data[0] == Catch::Approx(inv_sqrt2).margin(1e-4));

  // two concepts aggregate by the mean of the absolute drifts
  ConceptRefs two = planar_refs({1.0f, 0.0f}, {{0.0f, 1.0f}, {1.0f, 0.0f}});
  const float expect = 0.5f * (inv_sqrt2 + (1.0f - inv_sqrt2));
  CHECK(reg_loss(v, two) == Catch::Approx(expect).margin(1e-4));
}

TEST_CASE("drift regularizer is exactly zero without drift") {
  Setup su;
  const std::vector<float> v = encode("circle", su.vocab, su.table);
  CHECK(reg_loss(v, su.refs) == 0.0f);  // bit-exact, not approximate
  for (float d : concept_drifts(v, su.refs)) CHECK(d == 0.0f);

  Graph g;
  Tensor vt({int64_t(v.size())}, v);
  CHECK(g.val(reg_loss_node(g, g.param(vt), su.refs)).data[0] == 0.0f);
}

TEST_CASE("drift regularizer ignores the scale of v") {
  ConceptRefs refs = planar_refs({3.0f, 1.0f}, {{-1.0f, 2.0f}});
  const std::vector<float> v = {0.4f, -1.3f};
  const float base = reg_loss(v, refs);
  for (float a : {0.5f, 3.0f, 17.0f}) {
    std::vector<float> scaled = v;
    for (float& x : scaled) x *= a;
    CHECK(reg_loss(scaled, refs) == Catch::Approx(base).margin(1e-6));
  }
}

TEST_CASE("drift regularizer gradient matches finite differences") {
  Rng rng(11);
  std::vector<float> v(kEmbedDim), m1(kEmbedDim), m2(kEmbedDim);
  for (auto* vec : {&v, &m1, &m2})
    for (float& x : *vec) x = float(rng.uniform(-1.0, 1.0));
  ConceptRefs refs = planar_refs({1.0f, 0.0f}, {{0.0f, 1.0f}});
  refs.v_i.assign(v.begin(), v.end());
  refs.v_i[0] += 0.5f;  // keep ref cosines away from the current ones (abs kink)
  refs.v_m_list = {m1, m2};
  refs.undesired_concepts = {"frame", "stripe"};
  refs.ref_cosines.clear();
  for (const auto& m : refs.v_m_list)
    refs.ref_cosines.push_back(float(oracle::cosine(to_d(refs.v_i), to_d(m))));

  Graph g;
  Tensor vt({kEmbedDim}, v);
  vt.requires_grad = true;
  const int l = reg_loss_node(g, g.param(vt), refs);
  g.backward(l);

  std::vector<oracle::dvec> v_m_d;
  for (const auto& m : refs.v_m_list) v_m_d.push_back(to_d(m));
  const dvec ref_d(refs.ref_cosines.begin(), refs.ref_cosines.end());
  const dvec want = oracle::fd_grad(to_d(v), [&](const dvec& x) {
    double sum = 0.0;
    for (size_t k = 0; k < v_m_d.size(); ++k)
      sum += std::abs(oracle::cosine(x, v_m_d[k]) - ref_d[k]);
    return sum / double(v_m_d.size());
  });
  size_t bad = 0;
  CHECK(oracle::grads_close(vt.grad, want, &bad));
}

TEST_CASE("combined objective follows its formula") {
  Graph g;
  const int d = g.input(Tensor::scalar(0.625f));
  const int r = g.input(Tensor::scalar(0.25f));
  CHECK(g.val(total_loss_node(g, d, r, 0.0)).data[0] == 0.625f);  // exactly l_diff
  CHECK(g.val(total_loss_node(g, d, r, 1.0)).data[0] == Catch::Approx(0.875));
  CHECK(g.val(total_loss_node(g, d, r, 10.0)).data[0] == Catch::Approx(3.125));
  CHECK_THROWS_AS(total_loss_node(g, d, r, -0.5), Error);

  const int zero = g.input(Tensor::scalar(0.0f));
  for (double lambda : {0.5, 1.0, 10.0})
    CHECK(g.val(total_loss_node(g, d, zero, lambda)).data[0] == 0.625f);

  CHECK(total_loss(0.625f, 0.25f, 0.0) == 0.625f);
  CHECK(total_loss(0.625f, 0.25f, 2.0) == Catch::Approx(1.125));
  CHECK_THROWS_AS(total_loss(1.0f, 1.0f, -1.0), Error);
}

TEST_CASE("first fine-tuning step reports zero drift") {
  Setup su;
  CoffeeConfig cfg;
  AdamW opt = [&] {
    su.table.matrix.requires_grad = true;
    return AdamW({&su.table.matrix}, {.lr = cfg.lr});
  }();
  Rng rng(12);
  const LossBreakdown b = coffee_step(su.net, su.table, su.refs, su.data[0].pixels, "circle",
                                      su.vocab, su.s, cfg, opt, rng);
  CHECK(b.l_reg == 0.0f);  // v == v_i before the table first moves
  REQUIRE(b.per_concept_drift.size() == 1);
  CHECK(b.per_concept_drift[0] == 0.0f);
  CHECK(b.l_total == b.l_diffusion);  // lambda * 0 adds nothing
  CHECK(b.l_diffusion >= 0.0f);

  // second step: the table has moved, so drift is live and the invariants
  // tie the breakdown together
  const LossBreakdown b2 = coffee_step(su.net, su.table, su.refs, su.data[1].pixels, "circle",
                                       su.vocab, su.s, cfg, opt, rng);
  CHECK(b2.l_reg >= 0.0f);
  CHECK(b2.l_reg == detail::drift_mean(b2.per_concept_drift));
  CHECK(b2.l_total == b2.l_diffusion + float(cfg.lambda) * b2.l_reg);
}

TEST_CASE("lambda zero is bit-identical to plain fine-tuning") {
  Setup su;
  CoffeeConfig cfg;
  cfg.steps = 25;
  cfg.lambda = 0.0;

  Rng rng_a(13);
  FinetuneResult a = finetune(FinetuneMethod::coffee, su.net, su.table, su.data, su.refs,
                              su.vocab, su.s, cfg, rng_a);
  Rng rng_b(13);
  FinetuneResult b = finetune(FinetuneMethod::direct, su.net, su.table, su.data, su.refs,
                              su.vocab, su.s, cfg, rng_b);

  CHECK(same_bits(a.table.matrix, b.table.matrix));
  CHECK(same_bits(a.net, b.net));
  REQUIRE(a.trace.size() == b.trace.size());
  for (size_t i = 0; i < a.trace.size(); ++i)
    CHECK(a.trace[i].l_diffusion == b.trace[i].l_diffusion);

  // and a nonzero lambda changes the trained table
  cfg.lambda = 1.0;
  Rng rng_c(13);
  FinetuneResult c = finetune(FinetuneMethod::coffee, su.net, su.table, su.data, su.refs,
                              su.vocab, su.s, cfg, rng_c);
  CHECK_FALSE(same_bits(c.table.matrix, b.table.matrix));
}

TEST_CASE("frozen parameter groups never change") {
  Setup su;
  CoffeeConfig cfg;
  cfg.steps = 12;

  SECTION("text encoder only: denoiser frozen") {
    Rng rng(14);
    FinetuneResult r = finetune(FinetuneMethod::direct, su.net, su.table, su.data, su.refs,
                                su.vocab, su.s, cfg, rng);
    CHECK(same_bits(r.net, su.net));
    CHECK_FALSE(same_bits(r.table.matrix, su.table.matrix));
  }

  SECTION("denoiser only: embedding table frozen") {
    cfg.trainable_groups = TrainableGroups::from_names({"denoiser"});
    Rng rng(14);
    FinetuneResult r = finetune(FinetuneMethod::direct, su.net, su.table, su.data, su.refs,
                                su.vocab, su.s, cfg, rng);
    CHECK(same_bits(r.table.matrix, su.table.matrix));
    CHECK_FALSE(same_bits(r.net, su.net));
  }

  SECTION("both groups: both move") {
    cfg.trainable_groups = TrainableGroups::from_names({"denoiser", "text_encoder"});
    Rng rng(14);
    FinetuneResult r = finetune(FinetuneMethod::direct, su.net, su.table, su.data, su.refs,
                                su.vocab, su.s, cfg, rng);
    CHECK_FALSE(same_bits(r.table.matrix, su.table.matrix));
    CHECK_FALSE(same_bits(r.net, su.net));
  }
}

TEST_CASE("zero steps is a no-op") {
  Setup su;
  CoffeeConfig cfg;
  cfg.steps = 0;
  Rng rng(15);
  FinetuneResult r = finetune(FinetuneMethod::coffee, su.net, su.table, su.data, su.refs,
                              su.vocab, su.s, cfg, rng);
  CHECK(same_bits(r.net, su.net));
  CHECK(same_bits(r.table.matrix, su.table.matrix));
  CHECK(r.trace.empty());
  // refs snapshotted and untouched: encoding the prompt reproduces v_i
  CHECK(encode("circle", su.vocab, r.table) == su.refs.v_i);
}

TEST_CASE("plain fine-tuning drifts; the regularizer holds the embedding") {
  Setup su;
  CoffeeConfig cfg;
  cfg.steps = 120;

  Rng rng_d(16);
  FinetuneResult direct = finetune(FinetuneMethod::direct, su.net, su.table, su.data, su.refs,
                                   su.vocab, su.s, cfg, rng_d);
  Rng rng_c(16);
  FinetuneResult held = finetune(FinetuneMethod::coffee, su.net, su.table, su.data, su.refs,
                                 su.vocab, su.s, cfg, rng_c);

  const float drift_direct = reg_loss(encode("circle", su.vocab, direct.table), su.refs);
  const float drift_held = reg_loss(encode("circle", su.vocab, held.table), su.refs);
  CHECK(drift_direct > 0.0f);
  CHECK(drift_held < drift_direct);

  // drift accumulates along the plain run's trace (first step zero, later steps not)
  CHECK(direct.trace.front().l_reg == 0.0f);
  CHECK(direct.trace.back().l_reg > 0.0f);

  // a heavier lambda pins the embedding at least as hard
  cfg.lambda = 10.0;
  Rng rng_h(16);
  FinetuneResult heavy = finetune(FinetuneMethod::coffee, su.net, su.table, su.data, su.refs,
                                  su.vocab, su.s, cfg, rng_h);
  const float drift_heavy = reg_loss(encode("circle", su.vocab, heavy.table), su.refs);
  CHECK(drift_heavy <= drift_held + 1e-6f);
}

TEST_CASE("guided training baseline differs from plain fine-tuning") {
  Setup su;
  CoffeeConfig cfg;
  cfg.steps = 8;

  Rng rng_a(17);
  FinetuneResult guided = finetune(FinetuneMethod::neg_prompt_train, su.net, su.table, su.data,
                                   su.refs, su.vocab, su.s, cfg, rng_a);
  Rng rng_b(17);
  FinetuneResult plain = finetune(FinetuneMethod::direct, su.net, su.table, su.data, su.refs,
                                  su.vocab, su.s, cfg, rng_b);
  CHECK_FALSE(same_bits(guided.table.matrix, plain.table.matrix));
  CHECK(guided.trace.size() == plain.trace.size());

  // w = 0 collapses the guided objective onto the plain one, bit-exactly
  cfg.neg_prompt_w = 0.0f;
  Rng rng_c(17);
  FinetuneResult collapsed = finetune(FinetuneMethod::neg_prompt_train, su.net, su.table, su.data,
                                      su.refs, su.vocab, su.s, cfg, rng_c);
  CHECK(same_bits(collapsed.table.matrix, plain.table.matrix));

  // methods whose intervention happens at inference train exactly like direct
  for (FinetuneMethod m : {FinetuneMethod::concept_removal, FinetuneMethod::neg_prompt_infer}) {
    Rng rng_m(17);
    FinetuneResult r = finetune(m, su.net, su.table, su.data, su.refs, su.vocab, su.s,
                                CoffeeConfig{.steps = 8}, rng_m);
    CHECK(same_bits(r.table.matrix, plain.table.matrix));
  }
}

TEST_CASE("fine-tuning config rejects invalid values") {
  CoffeeConfig cfg;
  cfg.lambda = -0.1;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.steps = -1;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.neg_prompt_w = -1.0f;
  CHECK_THROWS_AS(cfg.validate(), Error);
  CHECK_THROWS_AS(TrainableGroups::from_names({}), Error);
  CHECK_THROWS_AS(TrainableGroups::from_names({"unet"}), Error);
  CHECK_THROWS_AS(method_from_name("dreambooth"), Error);
  CHECK(method_from_name("neg_prompt_both") == FinetuneMethod::neg_prompt_both);

  Setup su;
  ConceptRefs empty;
  Rng rng(18);
  CHECK_THROWS_AS(finetune(FinetuneMethod::direct, su.net, su.table, su.data, empty, su.vocab,
                           su.s, CoffeeConfig{}, rng),
                  Error);
  CHECK_THROWS_AS(finetune(FinetuneMethod::direct, su.net, su.table, {}, su.refs, su.vocab, su.s,
                           CoffeeConfig{}, rng),
                  Error);
}

TEST_CASE("undesired concepts can be re-specified without training") {
  Setup su;
  CoffeeConfig cfg;
  cfg.steps = 30;
  Rng rng(19);
  FinetuneResult r = finetune(FinetuneMethod::coffee, su.net, su.table, su.data, su.refs,
                              su.vocab, su.s, cfg, rng);

  const Tensor before = r.table.matrix;
  const ConceptRefs swapped = respecify_concepts({"dot", "checker"}, su.vocab, r.table, su.refs);
  CHECK(same_bits(r.table.matrix, before));  // pure forward passes
  CHECK(swapped.undesired_concepts == std::vector<std::string>{"dot", "checker"});
  REQUIRE(swapped.ref_cosines.size() == 2);
  // the frozen user-prompt reference carries over unchanged
  CHECK(swapped.v_i == su.refs.v_i);
}
