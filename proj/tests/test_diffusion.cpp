#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "coffee/diffusion.hpp"
#include "oracle.hpp"

using namespace coffee;
using oracle::dvec;

namespace {

dvec to_d(const std::vector<float>& v) { return dvec(v.begin(), v.end()); }

std::vector<float> to_f(const dvec& v) {
  std::vector<float> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = float(v[i]);
  return out;
}

// Flatten the denoiser parameters in the oracle's layout.
dvec flatten(const DenoiserNet& net) {
  dvec theta;
  for (const Tensor* t : net.params()) theta.insert(theta.end(), t->data.begin(), t->data.end());
  return theta;
}

constexpr oracle::MlpDims kFullDims{int(kLatentDim), int(kTimeEmbedDim), int(kEmbedDim),
                                    int(kHiddenDim)};

std::vector<float> random_latent(uint64_t seed) {
  Rng rng(seed);
  std::vector<float> z(size_t(kLatentDim), 0.0f);
  for (float& x : z) x = float(rng.uniform(-1.0, 1.0));
  return z;
}

// Looser per-entry check for float32 forwards differentiated against the
// double-precision reference (noise-prediction contract allows 1e-3).
bool close_1e3(double got, double want) {
  return std::abs(got - want) <= 1e-3 * std::abs(want) + 1e-6;
}

// Minimal coverage corpus: every concept bare plus every concept x attribute.
std::vector<LabeledImage> tiny_corpus() {
  std::vector<LabeledImage> out;
  uint64_t k = 0;
  for (const ConceptSpec& c : concepts()) {
    out.push_back(render(c, {}, derive_seed(99, "tiny", k++)));
    for (const AttributeSpec& a : attributes())
      out.push_back(render(c, {a}, derive_seed(99, "tiny", k++)));
  }
  return out;
}

}  // namespace

TEST_CASE("noise schedule matches a direct product oracle and validates bounds") {
  const NoiseSchedule s = make_schedule(200, 1e-4, 0.02);
  REQUIRE(s.T == 200);
  REQUIRE(s.beta.size() == 200);
  CHECK(s.beta[0] == 1e-4f);
  CHECK(s.beta[199] == 0.02f);
  CHECK(s.alpha_bar[0] == Catch::Approx(0.9999).epsilon(1e-6));

  // brute-force product, recomputed from scratch for every t
  for (int t = 0; t < s.T; ++t) {
    double prod = 1.0;
    for (int u = 0; u <= t; ++u) prod *= 1.0 - double(s.beta[size_t(u)]);
    REQUIRE(s.alpha_bar[size_t(t)] == float(prod));
  }

  for (int t = 0; t < s.T; ++t) {
    CHECK(s.beta[size_t(t)] > 0.0f);
    CHECK(s.beta[size_t(t)] < 1.0f);
    CHECK(s.alpha[size_t(t)] == float(1.0 - double(s.beta[size_t(t)])));
    if (t > 0) {
      CHECK(s.beta[size_t(t)] >= s.beta[size_t(t - 1)]);
      CHECK(s.alpha_bar[size_t(t)] < s.alpha_bar[size_t(t - 1)]);
    }
  }

  SECTION("the default schedule lands in the required corners") {
    const NoiseSchedule d = default_schedule();
    REQUIRE(d.T == 200);
    CHECK(d.alpha_bar[0] > 0.99f);
    CHECK(d.alpha_bar[size_t(d.T - 1)] < 0.05f);
    for (int t = 1; t < d.T; ++t) CHECK(d.alpha_bar[size_t(t)] < d.alpha_bar[size_t(t - 1)]);
  }

  SECTION("bound violations are rejected") {
    CHECK_THROWS_AS(make_schedule(1, 1e-4, 0.02), Error);
    CHECK_THROWS_AS(make_schedule(10, 0.0, 0.02), Error);
    CHECK_THROWS_AS(make_schedule(10, -1e-4, 0.02), Error);
    CHECK_THROWS_AS(make_schedule(10, 0.03, 0.02), Error);  // start > end
    CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0), Error);
  }
}

TEST_CASE("latent mapping is a clipped affine bijection on [0,1]") {
  const std::vector<float> px = {0.0f, 0.25f, 0.5f, 1.0f};
  const std::vector<float> z = to_latent(px);
  CHECK(z == std::vector<float>{-1.0f, -0.5f, 0.0f, 1.0f});
  CHECK(to_image(z) == px);
  CHECK(to_image({-3.0f, 3.0f}) == std::vector<float>{0.0f, 1.0f});

  Rng rng(5);
  std::vector<float> p(size_t(kImagePixels), 0.0f);
  for (float& v : p) v = float(rng.uniform());
  const std::vector<float> round = to_image(to_latent(p));
  for (size_t i = 0; i < p.size(); ++i) CHECK(std::abs(round[i] - p[i]) <= 1e-7f);
}

TEST_CASE("forward noising hits both limits exactly and errors outside the schedule") {
  NoiseSchedule s;  // hand-built: alpha_bar pinned to the two limits
  s.T = 2;
  s.beta = {0.1f, 0.1f};
  s.alpha = {0.9f, 0.9f};
  s.alpha_bar = {1.0f, 0.0f};

  const std::vector<float> z_y = random_latent(1);
  Rng rng(2);
  const std::vector<float> eps = rng.normals(size_t(kLatentDim));

  CHECK(forward_noise(z_y, 0, eps, s) == z_y);   // alpha_bar = 1: no noise
  CHECK(forward_noise(z_y, 1, eps, s) == eps);   // alpha_bar = 0: pure noise

  CHECK_THROWS_AS(forward_noise(z_y, -1, eps, s), Error);
  CHECK_THROWS_AS(forward_noise(z_y, 2, eps, s), Error);
  CHECK_THROWS_AS(forward_noise(z_y, 0, std::vector<float>(8, 0.0f), s), Error);

  SECTION("make_batch records exactly the noised latent it constructed") {
    const NoiseSchedule d = default_schedule();
    const std::vector<float> v(size_t(kEmbedDim), 0.25f);
    const DiffusionBatch b = make_batch(z_y, 37, eps, d, v);
    CHECK(b.z_t == forward_noise(z_y, 37, eps, d));
    CHECK(b.z_y == z_y);
    CHECK(b.eps == eps);
    CHECK(b.t == 37);
    CHECK(b.v == v);
  }
}

TEST_CASE("forward noising matches Monte-Carlo moments at random timesteps") {
  const NoiseSchedule s = default_schedule();
  const LabeledImage img = render(concepts()[0], {attributes()[1]}, 77);
  const std::vector<float> z_y = to_latent(img.pixels);
  Rng trng(123);

  const int n = 2000;
  for (int rep = 0; rep < 10; ++rep) {
    const int t = int(trng.below(s.T));
    const double abar = double(s.alpha_bar[size_t(t)]);
    Rng rng(derive_seed(123, "mc", uint64_t(rep)));

    std::vector<double> sum(size_t(kLatentDim), 0.0), sumsq(size_t(kLatentDim), 0.0);
    std::vector<float> eps(size_t(kLatentDim), 0.0f);
    for (int d = 0; d < n; ++d) {
      rng.fill_normal(eps.data(), eps.size());
      const std::vector<float> z_t = forward_noise(z_y, t, eps, s);
      for (int64_t j = 0; j < kLatentDim; ++j) {
        sum[size_t(j)] += double(z_t[size_t(j)]);
        sumsq[size_t(j)] += double(z_t[size_t(j)]) * double(z_t[size_t(j)]);
      }
    }

    // errors pooled across the 256 independent coordinates
    double mean_err = 0.0, var_err = 0.0;
    for (int64_t j = 0; j < kLatentDim; ++j) {
      const double m = sum[size_t(j)] / n;
      const double s2 = (sumsq[size_t(j)] - n * m * m) / double(n - 1);
      mean_err += m - std::sqrt(abar) * double(z_y[size_t(j)]);
      var_err += s2 - (1.0 - abar);
    }
    mean_err /= double(kLatentDim);
    var_err /= double(kLatentDim);

    const double mcse_mean = std::sqrt((1.0 - abar) / double(n)) / std::sqrt(double(kLatentDim));
    const double mcse_var =
        (1.0 - abar) * std::sqrt(2.0 / double(n - 1)) / std::sqrt(double(kLatentDim));
    INFO("t=" << t << " mean_err=" << mean_err << " var_err=" << var_err);
    CHECK(std::abs(mean_err) <= 3.0 * mcse_mean + 1e-12);
    CHECK(std::abs(var_err) <= 3.0 * mcse_var + 1e-12);
  }
}

TEST_CASE("noise prediction is deterministic and zero under a zero output layer") {
  const NoiseSchedule s = default_schedule();
  DenoiserNet net = DenoiserNet::init(42);
  const std::vector<float> z = random_latent(3);
  Rng rng(4);
  std::vector<float> v(size_t(kEmbedDim), 0.0f);
  for (float& x : v) x = float(rng.uniform(-1.0, 1.0));

  const std::vector<float> a = predict_noise(net, z, 17, v, s);
  const std::vector<float> b = predict_noise(net, z, 17, v, s);
  REQUIRE(a.size() == size_t(kLatentDim));
  CHECK(a == b);
  for (float x : a) CHECK(std::isfinite(x));

  SECTION("zeroed output layer pins the prediction to zero") {
    DenoiserNet zeroed = net;
    std::fill(zeroed.w3.data.begin(), zeroed.w3.data.end(), 0.0f);
    std::fill(zeroed.b3.data.begin(), zeroed.b3.data.end(), 0.0f);
    const std::vector<float> out = predict_noise(zeroed, z, 17, v, s);
    CHECK(out == std::vector<float>(size_t(kLatentDim), 0.0f));
  }

  SECTION("shape violations are rejected") {
    CHECK_THROWS_AS(predict_noise(net, std::vector<float>(8, 0.0f), 17, v, s), Error);
    CHECK_THROWS_AS(predict_noise(net, z, 17, std::vector<float>(7, 0.0f), s), Error);
    CHECK_THROWS_AS(predict_noise(net, z, s.T, v, s), Error);  // timestep out of range
    Graph g;
    const DenoiserNodes nn = register_denoiser(g, net);
    const int z2 = g.input({2, kLatentDim}, std::vector<float>(2 * size_t(kLatentDim), 0.1f));
    const int v1 = g.input({1, kEmbedDim}, std::vector<float>(size_t(kEmbedDim), 0.1f));
    CHECK_THROWS_AS(predict_noise_node(g, nn, z2, {3}, v1, s), Error);  // row mismatch
    const int v_bad = g.input({1, 16}, std::vector<float>(16, 0.1f));
    CHECK_THROWS_AS(predict_noise_node(g, nn, g.input({1, kLatentDim}, z), {3}, v_bad, s), Error);
  }
}

TEST_CASE("noise prediction gradient w.r.t. the conditioning matches finite differences") {
  const NoiseSchedule s = default_schedule();
  DenoiserNet net = DenoiserNet::init(8);
  const std::vector<float> z = random_latent(9);
  const int t = 12;
  Rng rng(10);
  Tensor vt = Tensor::zeros({kEmbedDim});
  for (float& x : vt.data) x = float(rng.uniform(-0.5, 0.5));
  vt.requires_grad = true;

  Graph g;
  const DenoiserNodes nn = register_denoiser(g, net);
  const int v = g.param(vt);
  const int eps_hat = predict_noise_node(g, nn, g.input({1, kLatentDim}, z), {t}, v, s);
  g.backward(g.mean(eps_hat));
  REQUIRE(vt.has_grad());

  const dvec theta = flatten(net);
  const dvec z_d = to_d(z);
  const dvec temb = to_d(sinusoid_embed(t, kTimeEmbedDim));
  const double gain_d = 1.0 / std::sqrt(1.0 - double(s.alpha_bar[size_t(t)]));
  const dvec fd = oracle::fd_grad(to_d(vt.data), [&](const dvec& vv) {
    const dvec out = oracle::mlp_forward(kFullDims, theta, z_d, temb, vv);
    double acc = 0.0;
    for (double o : out) acc += o * gain_d;
    return acc / double(out.size());
  });
  for (size_t i = 0; i < fd.size(); ++i) {
    INFO("entry " << i << ": got " << vt.grad[i] << " want " << fd[i]);
    CHECK(close_1e3(double(vt.grad[i]), fd[i]));
  }
}

TEST_CASE("diffusion loss hits the pinned examples") {
  const NoiseSchedule s = default_schedule();
  DenoiserNet zeroed = DenoiserNet::init(21);
  for (Tensor* p : zeroed.params()) std::fill(p->data.begin(), p->data.end(), 0.0f);
  const std::vector<float> z_y = random_latent(22);
  const std::vector<float> v(size_t(kEmbedDim), 0.1f);

  SECTION("perfect prediction gives exactly zero") {
    // zero net predicts 0; zero noise makes that prediction perfect
    const DiffusionBatch b = make_batch(z_y, 5, std::vector<float>(size_t(kLatentDim), 0.0f), s, v);
    Graph g;
    const DenoiserNodes nn = register_denoiser(g, zeroed);
    const int loss = diffusion_loss_node(g, nn, b, g.input({kEmbedDim}, v), s);
    CHECK(g.val(loss).data[0] == 0.0f);
  }

  SECTION("zero prediction scores the mean square of the drawn noise, ~1") {
    Rng rng(23);
    double acc = 0.0;
    const int draws = 1000;
    for (int i = 0; i < draws; ++i) {
      const std::vector<float> eps = rng.normals(size_t(kLatentDim));
      const DiffusionBatch b = make_batch(z_y, int(rng.below(s.T)), eps, s, v);
      Graph g;
      const DenoiserNodes nn = register_denoiser(g, zeroed);
      const int loss = diffusion_loss_node(g, nn, b, g.input({kEmbedDim}, v), s);
      const float got = g.val(loss).data[0];
      const double want = oracle::mse(to_d(eps), dvec(size_t(kLatentDim), 0.0));
      REQUIRE(std::abs(double(got) - want) <= 1e-6);
      acc += double(got);
    }
    CHECK(std::abs(acc / draws - 1.0) < 0.1);
  }

  SECTION("loss is non-negative for random nets and batches") {
    for (uint64_t i = 0; i < 20; ++i) {
      DenoiserNet net = DenoiserNet::init(100 + i);
      Rng rng(200 + i);
      const std::vector<float> eps = rng.normals(size_t(kLatentDim));
      const DiffusionBatch b =
          make_batch(random_latent(300 + i), int(rng.below(s.T)), eps, s, v);
      Graph g;
      const DenoiserNodes nn = register_denoiser(g, net);
      const int loss = diffusion_loss_node(g, nn, b, g.input({kEmbedDim}, v), s);
      CHECK(g.val(loss).data[0] >= 0.0f);
    }
  }
}

TEST_CASE("diffusion loss backpropagates only into prompt tokens") {
  const Vocabulary vocab = Vocabulary::standard();
  EmbeddingTable table = EmbeddingTable::init(vocab, 31);
  table.matrix.requires_grad = true;
  DenoiserNet net = DenoiserNet::init(32);
  const NoiseSchedule s = default_schedule();

  const std::string prompt = "circle frame";
  Rng rng(33);
  const std::vector<float> eps = rng.normals(size_t(kLatentDim));
  const DiffusionBatch b =
      make_batch(random_latent(34), 50, eps, s, encode(prompt, vocab, table));

  Graph g;
  const DenoiserNodes nn = register_denoiser(g, net);
  const int tbl = g.param(table.matrix);
  const int loss = diffusion_loss_node(g, nn, b, encode_node(g, prompt, vocab, tbl), s);
  g.backward(loss);
  REQUIRE(table.matrix.has_grad());

  const std::vector<int> ids = tokenize(prompt, vocab);
  for (int64_t row = 0; row < vocab.size(); ++row) {
    double norm = 0.0;
    for (int64_t j = 0; j < kEmbedDim; ++j)
      norm += std::abs(double(table.matrix.grad[size_t(row * kEmbedDim + j)]));
    const bool in_prompt = std::find(ids.begin(), ids.end(), int(row)) != ids.end();
    INFO("token row " << row);
    if (in_prompt)
      CHECK(norm > 0.0);
    else
      CHECK(norm == 0.0);
  }
}

TEST_CASE("negative-prompt training loss reduces to the plain loss and feeds both branches") {
  const Vocabulary vocab = Vocabulary::standard();
  EmbeddingTable table = EmbeddingTable::init(vocab, 41);
  DenoiserNet net = DenoiserNet::init(42);
  const NoiseSchedule s = default_schedule();
  Rng rng(43);
  const std::vector<float> eps = rng.normals(size_t(kLatentDim));
  const std::vector<float> z_y = random_latent(44);
  const int t = 80;
  const std::vector<float> z_t = forward_noise(z_y, t, eps, s);

  auto plain_loss = [&]() {
    Graph g;
    const DenoiserNodes nn = register_denoiser(g, net);
    const int tbl = g.param(table.matrix);
    const int loss = diffusion_loss_node(g, nn, g.input({1, kLatentDim}, z_t), {t},
                                         encode_node(g, "circle", vocab, tbl),
                                         g.input({1, kLatentDim}, eps), s);
    return g.val(loss).data[0];
  };
  auto neg_loss = [&](const std::string& neg, float w) {
    Graph g;
    const DenoiserNodes nn = register_denoiser(g, net);
    const int tbl = g.param(table.matrix);
    const int loss = neg_prompt_train_loss_node(
        g, nn, g.input({1, kLatentDim}, z_t), {t}, encode_node(g, "circle", vocab, tbl),
        encode_node(g, neg, vocab, tbl), w, g.input({1, kLatentDim}, eps), s);
    return g.val(loss).data[0];
  };

  CHECK(neg_loss("frame", 0.0f) == plain_loss());   // w = 0: guidance identity
  CHECK(neg_loss("circle", 3.0f) == plain_loss());  // coinciding branches cancel
  CHECK(neg_loss("frame", 3.0f) != plain_loss());

  SECTION("negative guidance weight is rejected") {
    Graph g;
    const DenoiserNodes nn = register_denoiser(g, net);
    const int tbl = g.param(table.matrix);
    CHECK_THROWS_AS(neg_prompt_train_loss_node(g, nn, g.input({1, kLatentDim}, z_t), {t},
                                               encode_node(g, "circle", vocab, tbl),
                                               encode_node(g, "frame", vocab, tbl), -1.0f,
                                               g.input({1, kLatentDim}, eps), s),
                    Error);
  }

  SECTION("table gradient matches finite differences for both prompts' tokens") {
    table.matrix.requires_grad = true;
    Graph g;
    const DenoiserNodes nn = register_denoiser(g, net);
    const int tbl = g.param(table.matrix);
    const float w = 3.0f;
    const int loss = neg_prompt_train_loss_node(
        g, nn, g.input({1, kLatentDim}, z_t), {t}, encode_node(g, "circle", vocab, tbl),
        encode_node(g, "frame", vocab, tbl), w, g.input({1, kLatentDim}, eps), s);
    g.backward(loss);
    REQUIRE(table.matrix.has_grad());

    const std::vector<int> ids_v = tokenize("circle", vocab);
    const std::vector<int> ids_n = tokenize("frame", vocab);
    const dvec theta = flatten(net);
    const dvec z_d = to_d(z_t);
    const dvec temb = to_d(sinusoid_embed(t, kTimeEmbedDim));
    const dvec eps_d = to_d(eps);
    const double gain_d = 1.0 / std::sqrt(1.0 - double(s.alpha_bar[size_t(t)]));
    const dvec fd = oracle::fd_grad(to_d(table.matrix.data), [&](const dvec& tab) {
      const dvec v = oracle::encode(tab, int(kEmbedDim), ids_v);
      const dvec vn = oracle::encode(tab, int(kEmbedDim), ids_n);
      const dvec ev = oracle::mlp_forward(kFullDims, theta, z_d, temb, v);
      const dvec en = oracle::mlp_forward(kFullDims, theta, z_d, temb, vn);
      dvec guided(ev.size());
      for (size_t i = 0; i < ev.size(); ++i) {
        const double e_v = ev[i] * gain_d;
        const double e_n = en[i] * gain_d;
        guided[i] = e_v + double(w) * (e_v - e_n);
      }
      return oracle::mse(eps_d, guided);
    });
    double v_row_norm = 0.0, n_row_norm = 0.0;
    for (size_t i = 0; i < fd.size(); ++i) {
      INFO("table entry " << i << ": got " << table.matrix.grad[i] << " want " << fd[i]);
      CHECK(close_1e3(double(table.matrix.grad[i]), fd[i]));
      const int row = int(i / size_t(kEmbedDim));
      if (row == ids_v[0]) v_row_norm += std::abs(double(table.matrix.grad[i]));
      if (row == ids_n[0]) n_row_norm += std::abs(double(table.matrix.grad[i]));
    }
    CHECK(v_row_norm > 0.0);  // gradient reaches the prompt branch
    CHECK(n_row_norm > 0.0);  // ... and the negative branch
  }
}

TEST_CASE("joint pretraining learns, is reproducible, and respects the coverage contract") {
  const Vocabulary vocab = Vocabulary::standard();
  const NoiseSchedule s = default_schedule();
  const std::vector<LabeledImage> corpus = tiny_corpus();

  SECTION("a dropped combination is a contract violation naming the gap") {
    std::vector<LabeledImage> broken;
    for (const LabeledImage& img : corpus)
      if (!(img.base == "cross" && img.has_attribute("checker"))) broken.push_back(img);
    try {
      check_corpus_coverage(broken);
      FAIL("expected a coverage error");
    } catch (const Error& e) {
      CHECK(e.kind == Error::Kind::contract);
      CHECK(std::string(e.what()).find("cross") != std::string::npos);
      CHECK(std::string(e.what()).find("checker") != std::string::npos);
    }
    PretrainConfig cfg;
    cfg.steps = 1;
    cfg.batch_size = 1;
    CHECK_THROWS_AS(pretrain(broken, vocab, cfg, s), Error);
  }

  SECTION("training loss decreases from the first hundred steps to the last") {
    PretrainConfig cfg;
    cfg.steps = 220;
    cfg.batch_size = 2;
    cfg.seed = 7;
    const PretrainResult r = pretrain(corpus, vocab, cfg, s);
    REQUIRE(r.loss_trace.size() == 220);
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 100; ++i) {
      head += double(r.loss_trace[size_t(i)]);
      tail += double(r.loss_trace[size_t(120 + i)]);
    }
    INFO("head mean " << head / 100 << " tail mean " << tail / 100);
    CHECK(tail < head);
    r.net.check_finite_params();
  }

  SECTION("fixed seed reproduces parameters bit for bit") {
    PretrainConfig cfg;
    cfg.steps = 25;
    cfg.batch_size = 2;
    cfg.p_uncond = 0.5;
    cfg.seed = 11;
    const PretrainResult a = pretrain(corpus, vocab, cfg, s);
    const PretrainResult b = pretrain(corpus, vocab, cfg, s);
    CHECK(a.loss_trace == b.loss_trace);
    CHECK(a.table.matrix.data == b.table.matrix.data);
    const auto pa = a.net.params(), pb = b.net.params();
    for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->data == pb[i]->data);
    CHECK(a.uncond_uses == b.uncond_uses);
    CHECK(a.uncond_uses > 0);  // 50 fair coin flips; pinned by the seed
  }

  SECTION("zero dropout never trains the unconditional token") {
    PretrainConfig cfg;
    cfg.steps = 10;
    cfg.batch_size = 2;
    cfg.p_uncond = 0.0;
    cfg.seed = 13;
    const PretrainResult r = pretrain(corpus, vocab, cfg, s);
    CHECK(r.uncond_uses == 0);
    const EmbeddingTable init =
        EmbeddingTable::init(vocab, derive_seed(cfg.seed, "embedding-init"));
    const int64_t row = int64_t(vocab.id(kUncondToken));
    for (int64_t j = 0; j < kEmbedDim; ++j)
      CHECK(r.table.matrix.data[size_t(row * kEmbedDim + j)] ==
            init.matrix.data[size_t(row * kEmbedDim + j)]);
  }

  SECTION("config bounds are validated") {
    PretrainConfig cfg;
    cfg.steps = 0;
    CHECK_THROWS_AS(pretrain(corpus, vocab, cfg, s), Error);
    cfg = {};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(pretrain(corpus, vocab, cfg, s), Error);
    cfg = {};
    cfg.lr = 0.0;
    CHECK_THROWS_AS(pretrain(corpus, vocab, cfg, s), Error);
    cfg = {};
    cfg.p_uncond = 1.5;
    CHECK_THROWS_AS(pretrain(corpus, vocab, cfg, s), Error);
  }
}

TEST_CASE("ancestral sampling is deterministic, honors guidance identities, and batches losslessly") {
  const Vocabulary vocab = Vocabulary::standard();
  const EmbeddingTable table = EmbeddingTable::init(vocab, 51);
  const DenoiserNet net = DenoiserNet::init(52);
  const NoiseSchedule s = make_schedule(25, 1e-3, 0.1);

  SamplerConfig cfg;
  cfg.steps = 25;
  cfg.guidance_scale = 2.0f;
  cfg.seed = 77;

  const std::vector<float> img = ddpm_sample(net, table, vocab, "circle", s, cfg);
  REQUIRE(img.size() == size_t(kLatentDim));
  CHECK(ddpm_sample(net, table, vocab, "circle", s, cfg) == img);
  for (float p : img) {
    CHECK(p >= 0.0f);
    CHECK(p <= 1.0f);
  }

  SECTION("zero guidance depends only on the reference branch") {
    SamplerConfig zero = cfg;
    zero.guidance_scale = 0.0f;
    const std::vector<float> a = ddpm_sample(net, table, vocab, "circle", s, zero);
    const std::vector<float> b = ddpm_sample(net, table, vocab, "square", s, zero);
    CHECK(a == b);  // prompt is unused at w = 0
    SamplerConfig neg = zero;
    neg.negative_prompt = "frame";
    CHECK(ddpm_sample(net, table, vocab, "circle", s, neg) != a);  // reference changed
  }

  SECTION("positive guidance separates prompts") {
    SamplerConfig one = cfg;
    one.guidance_scale = 1.0f;
    CHECK(ddpm_sample(net, table, vocab, "circle", s, one) !=
          ddpm_sample(net, table, vocab, "square", s, one));
  }

  SECTION("a batch of chains equals the same chains run one by one") {
    const std::vector<std::vector<float>> batch =
        ddpm_sample_batch(net, table, vocab, "circle", s, cfg, 3);
    REQUIRE(batch.size() == 3);
    for (int i = 0; i < 3; ++i) {
      SamplerConfig single = cfg;
      single.seed = derive_seed(cfg.seed, "sample", uint64_t(i));
      CHECK(batch[size_t(i)] == ddpm_sample(net, table, vocab, "circle", s, single));
    }
  }

  SECTION("config and prompt violations are rejected") {
    SamplerConfig bad = cfg;
    bad.steps = 10;  // != schedule T
    CHECK_THROWS_AS(ddpm_sample(net, table, vocab, "circle", s, bad), Error);
    bad = cfg;
    bad.guidance_scale = -1.0f;
    CHECK_THROWS_AS(ddpm_sample(net, table, vocab, "circle", s, bad), Error);
    CHECK_THROWS_AS(ddpm_sample(net, table, vocab, "zebra", s, cfg), Error);
    CHECK_THROWS_AS(ddpm_sample_batch(net, table, vocab, "circle", s, cfg, 0), Error);
  }
}

TEST_CASE("an unconditional toy model concentrates samples on the two modes") {
  const Vocabulary vocab = Vocabulary::standard();
  EmbeddingTable table = EmbeddingTable::init(vocab, 61);
  // beta_start keeps the low-noise loss gain (1/(1 - alpha_bar_t), the square
  // of the prediction head's noise gain) at most ~125, so no timestep's loss
  // term dominates the batch and Adam's second moments stay calm.
  const NoiseSchedule s = make_schedule(50, 0.008, 0.15);
  REQUIRE(s.alpha_bar[size_t(s.T - 1)] < 0.05f);

  // two modes: all-dark and all-bright images
  const std::vector<float> dark(size_t(kLatentDim), 0.1f);
  const std::vector<float> bright(size_t(kLatentDim), 0.9f);
  const std::vector<float> z_dark = to_latent(dark);
  const std::vector<float> z_bright = to_latent(bright);
  const std::vector<float> v_u = encode(kUncondToken, vocab, table);

  DenoiserNet net = DenoiserNet::init(62);
  for (Tensor* p : net.params()) p->requires_grad = true;
  AdamW opt(net.params(), {.lr = 3e-4});
  Rng rng(63);
  const int B = 32;
  std::vector<float> v_rows(size_t(B) * size_t(kEmbedDim));
  for (int i = 0; i < B; ++i)
    std::copy(v_u.begin(), v_u.end(), v_rows.begin() + int64_t(i) * kEmbedDim);

  for (int step = 0; step < 4000; ++step) {
    std::vector<float> zs(size_t(B) * size_t(kLatentDim));
    std::vector<float> epss(size_t(B) * size_t(kLatentDim));
    std::vector<int> ts(size_t(B), 0);
    for (int i = 0; i < B; ++i) {
      const std::vector<float>& z_y = rng.below(2) == 0 ? z_dark : z_bright;
      ts[size_t(i)] = int(rng.below(s.T));
      std::vector<float> eps(size_t(kLatentDim), 0.0f);
      rng.fill_normal(eps.data(), eps.size());
      const std::vector<float> z_t = forward_noise(z_y, ts[size_t(i)], eps, s);
      std::copy(z_t.begin(), z_t.end(), zs.begin() + int64_t(i) * kLatentDim);
      std::copy(eps.begin(), eps.end(), epss.begin() + int64_t(i) * kLatentDim);
    }
    Graph g;
    const DenoiserNodes nn = register_denoiser(g, net);
    const int loss =
        diffusion_loss_node(g, nn, g.input({B, kLatentDim}, zs), ts,
                            g.input({B, kEmbedDim}, v_rows), g.input({B, kLatentDim}, epss), s);
    zero_grad(net.params());
    g.backward(loss);
    opt.step();
  }

  SamplerConfig cfg;
  cfg.steps = s.T;
  cfg.guidance_scale = 0.0f;  // unconditional chain
  cfg.seed = 64;
  const std::vector<std::vector<float>> samples =
      ddpm_sample_batch(net, table, vocab, kUncondToken, s, cfg, 200);

  const double mode_gap = std::sqrt(double(kLatentDim) * 0.8 * 0.8);  // |bright - dark|
  int near = 0, hit_dark = 0, hit_bright = 0;
  for (const std::vector<float>& sample : samples) {
    double dd = 0.0, db = 0.0;
    for (int64_t j = 0; j < kLatentDim; ++j) {
      dd += (double(sample[size_t(j)]) - 0.1) * (double(sample[size_t(j)]) - 0.1);
      db += (double(sample[size_t(j)]) - 0.9) * (double(sample[size_t(j)]) - 0.9);
    }
    dd = std::sqrt(dd);
    db = std::sqrt(db);
    // nearest-mean classification counts only when the sample actually sits
    // inside the nearest mode's half-gap ball
    if (std::min(dd, db) <= 0.5 * mode_gap) {
      ++near;
      (dd < db ? hit_dark : hit_bright) += 1;
    }
  }
  INFO("near-mode " << near << "/200, dark " << hit_dark << ", bright " << hit_bright);
  CHECK(near >= 180);
  CHECK(hit_dark > 0);
  CHECK(hit_bright > 0);
}
