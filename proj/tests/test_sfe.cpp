#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "support/gradcheck.hpp"
#include "thgen/autodiff.hpp"
#include "thgen/rng.hpp"
#include "thgen/sfe.hpp"

using namespace thgen;
using namespace thgen::sfe;
using ad::Tensor;

namespace {

Tensor random_input(std::size_t rows, std::size_t cols, Rng& rng, bool grad = false) {
  std::vector<double> v(rows * cols);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  if (grad) return ad::parameter({rows, cols}, std::move(v));
  return Tensor::from_data({rows, cols}, std::move(v));
}

Mat random_mat(std::size_t rows, std::size_t cols, Rng& rng) {
  Mat m(rows, cols);
  for (double& x : m.v) x = rng.uniform(-1.0, 1.0);
  return m;
}

GruCell zero_cell(std::size_t in, std::size_t hidden) {
  GruCell c;
  c.input_dim = in;
  c.hidden = hidden;
  auto zp = [](ad::Shape s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return ad::parameter(s, std::vector<double>(n, 0.0));
  };
  c.W_z = zp({in, hidden});
  c.W_r = zp({in, hidden});
  c.W_n = zp({in, hidden});
  c.U_z = zp({hidden, hidden});
  c.U_r = zp({hidden, hidden});
  c.U_n = zp({hidden, hidden});
  c.b_z = zp({1, hidden});
  c.b_r = zp({1, hidden});
  c.b_n = zp({1, hidden});
  return c;
}

SimilarityParams fixed_similarity(double w, double b) {
  SimilarityParams sp;
  sp.w_raw = ad::parameter({1}, {std::log(std::expm1(w))});
  sp.b = ad::parameter({1}, {b});
  return sp;
}

std::vector<Tensor> tensors_of(const SfeModel& model) {
  std::vector<Tensor> out;
  for (auto& [name, t] : model.parameters()) out.push_back(t);
  return out;
}

SfeConfig tiny_config(MemoryMode mode) {
  SfeConfig cfg;
  cfg.n_mels = 5;
  cfg.landmark_dim = 6;
  cfg.hidden = 3;
  cfg.feat = 4;
  cfg.slots = 2;
  cfg.addr_hidden = 4;
  cfg.pool = 2;
  cfg.mode = mode;
  return cfg;
}

std::vector<SfeExample> tiny_batch(const SfeConfig& cfg, Rng& rng, std::size_t n = 2,
                                   std::size_t t_f = 6) {
  std::vector<SfeExample> batch(n);
  for (auto& ex : batch) {
    ex.fbank = random_mat(t_f, cfg.n_mels, rng);
    ex.aligned_flat = random_mat(t_f / cfg.pool, cfg.landmark_dim, rng);
    ex.pose_stats = random_mat(1, 6, rng);
  }
  return batch;
}

}  // namespace

TEST_CASE("all-zero weights and input produce an all-zero encoding") {
  const GruCell cell = zero_cell(4, 3);
  Tensor x = Tensor::zeros({5, 4});
  Tensor h = bigru_encode(cell, cell, x);
  REQUIRE(h.shape() == (ad::Shape{5, 6}));
  for (std::size_t i = 0; i < h.size(); ++i) CHECK(h.at(i) == 0.0);
}

TEST_CASE("reversing the input mirrors the two directions of a shared-weight Bi-GRU") {
  Rng rng(11);
  const GruCell cell = GruCell::init(4, 3, rng);
  const std::size_t T = 7;
  Tensor x = random_input(T, 4, rng);
  std::vector<double> rev(x.data());
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < 4; ++c) rev[t * 4 + c] = x.at((T - 1 - t) * 4 + c);
  }
  Tensor xr = Tensor::from_data({T, 4}, std::move(rev));

  Tensor h = bigru_encode(cell, cell, x);
  Tensor hr = bigru_encode(cell, cell, xr);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t j = 0; j < 3; ++j) {
      // forward half of the reversed run == backward half at the mirror.
      CHECK(hr.at2(t, j) == h.at2(T - 1 - t, 3 + j));
      CHECK(hr.at2(t, 3 + j) == h.at2(T - 1 - t, j));
    }
  }
}

TEST_CASE("Bi-GRU gradients match finite differences over 3 timesteps") {
  Rng rng(13);
  GruCell fwd = GruCell::init(3, 2, rng);
  GruCell bwd = GruCell::init(3, 2, rng);
  Tensor x = random_input(3, 3, rng, true);

  std::vector<Tensor> params = {x,
                                fwd.W_z, fwd.W_r, fwd.W_n, fwd.U_z, fwd.U_r, fwd.U_n,
                                fwd.b_z, fwd.b_r, fwd.b_n,
                                bwd.W_z, bwd.W_r, bwd.W_n, bwd.U_z, bwd.U_r, bwd.U_n,
                                bwd.b_z, bwd.b_r, bwd.b_n};
  auto res = gradcheck::check(params, [&] {
    Tensor h = bigru_encode(fwd, bwd, x);
    return ad::sum(ad::mul(h, h));
  });
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("memory read is a convex combination of slots") {
  Rng rng(17);

  // One-hot weights select a slot; uniform weights give the column mean.
  Tensor M = random_input(3, 4, rng);
  Tensor one_hot = Tensor::from_data({1, 3}, {1, 0, 0});
  Tensor y = ad::matmul(one_hot, M);  // the read reduces to p · M
  for (std::size_t j = 0; j < 4; ++j) CHECK(y.at(j) == M.at2(0, j));

  MemoryBank uniform_bank;
  uniform_bank.addr = Addresser::init(4, 3, 3, rng);
  // Zero output layer forces uniform addressing through the softmax.
  for (double& v : uniform_bank.addr.W2.data()) v = 0.0;
  for (double& v : uniform_bank.addr.b2.data()) v = 0.0;
  uniform_bank.M = M;
  auto [p, yh] = memory_read(uniform_bank, random_input(1, 4, rng));
  for (std::size_t i = 0; i < 3; ++i) CHECK(p.at(i) == doctest::Approx(1.0 / 3).epsilon(1e-12));
  for (std::size_t j = 0; j < 4; ++j) {
    const double mean = (M.at2(0, j) + M.at2(1, j) + M.at2(2, j)) / 3.0;
    CHECK(yh.at(j) == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("addressing weights are simplex-valid and reads stay in the slot hull") {
  Rng rng(19);
  for (int round = 0; round < 100; ++round) {
    MemoryBank bank;
    bank.addr = Addresser::init(6, 5, 4, rng);
    bank.M = random_input(4, 3, rng);
    auto [p, y] = memory_read(bank, random_input(1, 6, rng));

    double sum = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(p.at(i) >= 0.0);
      sum += p.at(i);
    }
    CHECK(std::fabs(sum - 1.0) <= 1e-9);

    for (std::size_t j = 0; j < 3; ++j) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t i = 0; i < 4; ++i) {
        lo = std::min(lo, bank.M.at2(i, j));
        hi = std::max(hi, bank.M.at2(i, j));
      }
      CHECK(y.at(j) >= lo - 1e-12);
      CHECK(y.at(j) <= hi + 1e-12);
    }
  }
}

TEST_CASE("similarity matches its closed forms and is monotone in the cosine") {
  Tensor u = Tensor::from_data({1, 2}, {3, 0});
  Tensor v_same = Tensor::from_data({1, 2}, {3, 0});
  Tensor v_orth = Tensor::from_data({1, 2}, {0, 2});
  Tensor v_anti = Tensor::from_data({1, 2}, {-1, 0});

  CHECK(similarity(u, v_same, fixed_similarity(1, 0)).item() ==
        doctest::Approx(2.718281828).epsilon(1e-6));
  CHECK(similarity(u, v_orth, fixed_similarity(5, -2)).item() ==
        doctest::Approx(0.135335).epsilon(1e-5));

  const SimilarityParams sp = SimilarityParams::init();  // w = 10, b = -5
  CHECK(ad::softplus(sp.w_raw).item() == doctest::Approx(10.0).epsilon(1e-12));
  const double s_anti = similarity(u, v_anti, sp).item();
  const double s_orth = similarity(u, v_orth, sp).item();
  const double s_same = similarity(u, v_same, sp).item();
  CHECK(s_anti < s_orth);
  CHECK(s_orth < s_same);
  CHECK(s_anti > 0.0);
}

TEST_CASE("contrastive loss hits log T under constant similarity") {
  Rng rng(23);
  Tensor y_hat = random_input(2, 3, rng);
  Tensor y = Tensor::from_data({2, 3}, {1, 2, 3, 1, 2, 3});  // identical targets
  const double loss = contrastive_loss(y_hat, y, SimilarityParams::init()).item();
  CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(1e-9));

  Tensor y4 = ad::concat({y, y}, 0);
  Tensor yh4 = random_input(4, 3, rng);
  CHECK(contrastive_loss(yh4, y4, SimilarityParams::init()).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-9));
}

TEST_CASE("contrastive loss is non-negative and rejects T < 2") {
  Rng rng(29);
  const SimilarityParams sp = SimilarityParams::init();
  for (int round = 0; round < 50; ++round) {
    Tensor y_hat = random_input(3, 4, rng);
    Tensor y = random_input(3, 4, rng);
    CHECK(contrastive_loss(y_hat, y, sp).item() >= -1e-12);
  }
  CHECK_THROWS_AS(contrastive_loss(random_input(1, 4, rng), random_input(1, 4, rng), sp),
                  std::invalid_argument);
  CHECK_THROWS_AS(contrastive_loss(random_input(3, 4, rng), random_input(2, 4, rng), sp),
                  std::invalid_argument);
}

TEST_CASE("contrastive loss matches a closed-form T=3 oracle") {
  // Rows of both matrices: (1,0), (0,1), (-1,0). The positive row sees
  // cosines {1, 0, -1}; with w=1, b=0 its term is
  // -log(e / (e + 1 + e^-1)) = log(1 + e^-1 + e^-2) ≈ 0.407606.
  Tensor pts = Tensor::from_data({3, 2}, {1, 0, 0, 1, -1, 0});
  const double loss = contrastive_loss(pts, pts, fixed_similarity(1, 0)).item();

  const double t_edge = std::log(1.0 + std::exp(-1.0) + std::exp(-2.0));
  const double t_mid = std::log(1.0 + 2.0 * std::exp(-1.0));
  CHECK(t_edge == doctest::Approx(0.4076060).epsilon(1e-6));
  CHECK(loss == doctest::Approx((2.0 * t_edge + t_mid) / 3.0).epsilon(1e-6));
}

TEST_CASE("pose statistics are the per-component means and standard deviations") {
  std::vector<geom::Pose> poses = {{0.1, 1.0, -1.0}, {0.3, 3.0, -1.0}};
  Mat s = pose_statistics(poses);
  CHECK(s(0, 0) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(s(0, 1) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(s(0, 2) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(s(0, 3) == doctest::Approx(0.1).epsilon(1e-9));
  CHECK(s(0, 4) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(s(0, 5) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK_THROWS_AS(pose_statistics({}), std::invalid_argument);
}

TEST_CASE("feature shapes and parameter sets track the memory mode") {
  Rng rng(31);
  for (MemoryMode mode : {MemoryMode::wo, MemoryMode::w, MemoryMode::cs}) {
    SfeConfig cfg = tiny_config(mode);
    SfeModel model = SfeModel::init(cfg, rng);
    Tensor fb = random_input(6, cfg.n_mels, rng);
    SfeFeatures f = sfe_forward(model, fb);
    CHECK(f.content.shape() == (ad::Shape{3, cfg.feat}));
    CHECK(f.identity.shape() == (ad::Shape{1, cfg.feat}));

    std::size_t banks = 0;
    for (auto& [name, t] : model.parameters()) {
      if (name.rfind("memory", 0) == 0) ++banks;
    }
    CHECK(banks == (mode == MemoryMode::cs ? 2 : mode == MemoryMode::w ? 1 : 0));
  }
  CHECK(memory_mode_from_name("cs") == MemoryMode::cs);
  CHECK(memory_mode_name(MemoryMode::w) == "w");
  CHECK_THROWS_AS(memory_mode_from_name("nope"), std::invalid_argument);
}

TEST_CASE("identity loss of two identical sequences is log 2") {
  Rng rng(37);
  SfeConfig cfg = tiny_config(MemoryMode::cs);
  SfeModel model = SfeModel::init(cfg, rng);
  std::vector<SfeExample> batch = tiny_batch(cfg, rng, 1);
  batch.push_back(batch[0]);  // identical twin

  const double total = [&] { return sfe_loss(model, batch).item(); }();

  // Recompute the content part through the public pieces; the remainder must
  // be exactly the identity loss floor log 2.
  Tensor fb = Tensor::from_data({batch[0].fbank.rows, batch[0].fbank.cols}, batch[0].fbank.v);
  SfeFeatures f = sfe_forward(model, fb);
  Tensor target_in = Tensor::from_data({batch[0].aligned_flat.rows, batch[0].aligned_flat.cols},
                                       batch[0].aligned_flat.v);
  Tensor y_c = addresser_forward(model.target.content, target_in);
  const double l_content = contrastive_loss(f.content, y_c, model.sim_content).item();
  CHECK(total - l_content == doctest::Approx(std::log(2.0)).epsilon(1e-9));

  CHECK_THROWS_AS(sfe_loss(model, {batch[0]}), std::invalid_argument);
}

TEST_CASE("total loss gradients match finite differences in every memory mode") {
  Rng rng(41);
  for (MemoryMode mode : {MemoryMode::wo, MemoryMode::w, MemoryMode::cs}) {
    SfeConfig cfg = tiny_config(mode);
    SfeModel model = SfeModel::init(cfg, rng);
    std::vector<SfeExample> batch = tiny_batch(cfg, rng);
    auto res = gradcheck::check(tensors_of(model), [&] { return sfe_loss(model, batch); });
    CAPTURE(memory_mode_name(mode));
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("plain gradient descent reduces the loss on a 4-sequence batch") {
  Rng rng(43);
  SfeConfig cfg = tiny_config(MemoryMode::cs);
  cfg.hidden = 6;
  cfg.feat = 6;
  cfg.slots = 4;
  SfeModel model = SfeModel::init(cfg, rng);
  std::vector<SfeExample> batch = tiny_batch(cfg, rng, 4, 8);

  std::vector<Tensor> params = tensors_of(model);
  double initial = 0.0, final_loss = 0.0;
  for (int step = 0; step < 200; ++step) {
    ad::Tape tape;
    double value;
    {
      ad::TapeScope scope(tape);
      Tensor loss = sfe_loss(model, batch);
      value = loss.item();
      tape.backward(loss);
    }
    if (step == 0) initial = value;
    final_loss = value;
    for (Tensor& p : params) {
      auto& data = p.data();
      const auto& grad = p.grad();
      for (std::size_t i = 0; i < data.size(); ++i) data[i] -= 0.05 * grad[i];
      p.zero_grad();
    }
  }
  CHECK(std::isfinite(final_loss));
  CHECK(final_loss < initial);
  CHECK(final_loss < 0.9 * initial);
}

TEST_CASE("fixed seed gives a bit-identical loss") {
  auto run = [] {
    Rng rng(47);
    SfeConfig cfg = tiny_config(MemoryMode::cs);
    SfeModel model = SfeModel::init(cfg, rng);
    std::vector<SfeExample> batch = tiny_batch(cfg, rng);
    return sfe_loss(model, batch).item();
  };
  const double a = run();
  const double b = run();
  CHECK(a == b);
}
