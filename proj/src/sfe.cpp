#include "thgen/sfe.hpp"

#include <cmath>
#include <stdexcept>

namespace thgen::sfe {

namespace {

using ad::Tensor;

Tensor uniform_param(const ad::Shape& shape, double scale, Rng& rng) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  std::vector<double> data(n);
  for (double& v : data) v = rng.uniform(-scale, scale);
  return ad::parameter(shape, std::move(data));
}

Tensor zero_param(const ad::Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return ad::parameter(shape, std::vector<double>(n, 0.0));
}

Tensor constant_matrix(const Mat& m) {
  return Tensor::from_data({m.rows, m.cols}, m.v);
}

Tensor one_minus(const Tensor& a) { return ad::add_scalar(ad::mul_scalar(a, -1.0), 1.0); }

}  // namespace

GruCell GruCell::init(std::size_t input_dim, std::size_t hidden, Rng& rng) {
  require(input_dim >= 1 && hidden >= 1, "gru: dimensions must be positive");
  GruCell c;
  c.input_dim = input_dim;
  c.hidden = hidden;
  const double si = 1.0 / std::sqrt(static_cast<double>(input_dim));
  const double sh = 1.0 / std::sqrt(static_cast<double>(hidden));
  c.W_z = uniform_param({input_dim, hidden}, si, rng);
  c.W_r = uniform_param({input_dim, hidden}, si, rng);
  c.W_n = uniform_param({input_dim, hidden}, si, rng);
  c.U_z = uniform_param({hidden, hidden}, sh, rng);
  c.U_r = uniform_param({hidden, hidden}, sh, rng);
  c.U_n = uniform_param({hidden, hidden}, sh, rng);
  c.b_z = zero_param({1, hidden});
  c.b_r = zero_param({1, hidden});
  c.b_n = zero_param({1, hidden});
  return c;
}

ad::Tensor gru_step(const GruCell& cell, const Tensor& xw_z, const Tensor& xw_r,
                    const Tensor& xw_n, const Tensor& h) {
  const Tensor z = ad::sigmoid(ad::add(ad::add(xw_z, ad::matmul(h, cell.U_z)), cell.b_z));
  const Tensor r = ad::sigmoid(ad::add(ad::add(xw_r, ad::matmul(h, cell.U_r)), cell.b_r));
  const Tensor n =
      ad::tanh(ad::add(ad::add(xw_n, cell.b_n), ad::mul(r, ad::matmul(h, cell.U_n))));
  return ad::add(ad::mul(one_minus(z), n), ad::mul(z, h));
}

ad::Tensor gru_run(const GruCell& cell, const Tensor& x, bool reverse) {
  require(x.rank() == 2 && x.cols() == cell.input_dim, "gru_run: input width mismatch");
  const std::size_t T = x.rows();
  require(T >= 1, "gru_run: empty sequence");
  // Project the whole sequence through each input matrix once.
  const Tensor xw_z = ad::matmul(x, cell.W_z);
  const Tensor xw_r = ad::matmul(x, cell.W_r);
  const Tensor xw_n = ad::matmul(x, cell.W_n);

  std::vector<Tensor> states(T);
  Tensor h = Tensor::zeros({1, cell.hidden});
  for (std::size_t i = 0; i < T; ++i) {
    const std::size_t t = reverse ? T - 1 - i : i;
    h = gru_step(cell, ad::row_of(xw_z, t), ad::row_of(xw_r, t), ad::row_of(xw_n, t), h);
    states[t] = h;
  }
  return ad::concat(states, 0);
}

ad::Tensor bigru_encode(const GruCell& fwd, const GruCell& bwd, const Tensor& x) {
  return ad::concat({gru_run(fwd, x, false), gru_run(bwd, x, true)}, 1);
}

Addresser Addresser::init(std::size_t in, std::size_t hidden_a, std::size_t out, Rng& rng) {
  require(in >= 1 && hidden_a >= 1 && out >= 1, "addresser: dimensions must be positive");
  Addresser a;
  a.W1 = uniform_param({in, hidden_a}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  a.b1 = zero_param({1, hidden_a});
  a.W2 = uniform_param({hidden_a, out}, 1.0 / std::sqrt(static_cast<double>(hidden_a)), rng);
  a.b2 = zero_param({1, out});
  return a;
}

ad::Tensor addresser_forward(const Addresser& a, const Tensor& h_t) {
  const Tensor hidden = ad::tanh(ad::add_rows(ad::matmul(h_t, a.W1), a.b1));
  return ad::add_rows(ad::matmul(hidden, a.W2), a.b2);
}

std::pair<ad::Tensor, ad::Tensor> memory_read(const MemoryBank& bank, const Tensor& h_t) {
  const Tensor p = ad::softmax(addresser_forward(bank.addr, h_t), 1);
  return {p, ad::matmul(p, bank.M)};
}

SimilarityParams SimilarityParams::init() {
  SimilarityParams sp;
  // softplus(w_raw) = 10  ⇔  w_raw = log(e^10 − 1)
  sp.w_raw = ad::parameter({1}, {std::log(std::expm1(10.0))});
  sp.b = ad::parameter({1}, {-5.0});
  return sp;
}

ad::Tensor SimilarityParams::w() const { return ad::softplus(w_raw); }

ad::Tensor similarity(const Tensor& u, const Tensor& v, const SimilarityParams& sp) {
  return ad::exp(ad::add(ad::mul(sp.w(), ad::cosine_similarity(u, v)), sp.b));
}

ad::Tensor contrastive_loss(const Tensor& y_hat, const Tensor& y, const SimilarityParams& sp) {
  require(y_hat.rank() == 2 && y.rank() == 2, "contrastive_loss: expected T × C inputs");
  require(y_hat.rows() == y.rows() && y_hat.cols() == y.cols(),
          "contrastive_loss: shape mismatch");
  const std::size_t T = y_hat.rows();
  require(T >= 2, "contrastive_loss: need T >= 2 for at least one negative");

  const Tensor w = sp.w();
  std::vector<Tensor> pred_rows(T), target_rows(T);
  for (std::size_t t = 0; t < T; ++t) {
    pred_rows[t] = ad::row_of(y_hat, t);
    target_rows[t] = ad::row_of(y, t);
  }

  std::vector<Tensor> row_terms(T);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<Tensor> scores(T);
    for (std::size_t k = 0; k < T; ++k) {
      const Tensor c = ad::cosine_similarity(pred_rows[t], target_rows[k]);
      scores[k] = ad::add(ad::mul(w, c), sp.b);
    }
    row_terms[t] = ad::sub(scores[t], ad::logsumexp(ad::concat(scores, 0)));
  }
  return ad::mul_scalar(ad::sum(ad::concat(row_terms, 0)), -1.0 / static_cast<double>(T));
}

std::string memory_mode_name(MemoryMode mode) {
  switch (mode) {
    case MemoryMode::wo: return "wo";
    case MemoryMode::w: return "w";
    case MemoryMode::cs: return "cs";
  }
  throw std::logic_error("unreachable memory mode");
}

MemoryMode memory_mode_from_name(const std::string& name) {
  if (name == "wo") return MemoryMode::wo;
  if (name == "w") return MemoryMode::w;
  if (name == "cs") return MemoryMode::cs;
  throw std::invalid_argument("unknown memory mode '" + name + "' (expected wo, w, or cs)");
}

SfeModel SfeModel::init(const SfeConfig& cfg, Rng& rng) {
  require(cfg.pool >= 1, "sfe: pool must be >= 1");
  SfeModel m;
  m.cfg = cfg;
  m.fwd = GruCell::init(cfg.n_mels, cfg.hidden, rng);
  m.bwd = GruCell::init(cfg.n_mels, cfg.hidden, rng);

  const std::size_t head_out = cfg.mode == MemoryMode::wo ? cfg.feat : cfg.slots;
  m.addr_content = Addresser::init(2 * cfg.hidden, cfg.addr_hidden, head_out, rng);
  m.addr_identity = Addresser::init(2 * cfg.hidden, cfg.addr_hidden, head_out, rng);
  if (cfg.mode == MemoryMode::cs) {
    m.M_content = uniform_param({cfg.slots, cfg.feat}, 0.5, rng);
    m.M_identity = uniform_param({cfg.slots, cfg.feat}, 0.5, rng);
  } else if (cfg.mode == MemoryMode::w) {
    m.M_shared = uniform_param({cfg.slots, cfg.feat}, 0.5, rng);
  }

  m.target.content = Addresser::init(cfg.landmark_dim, cfg.addr_hidden, cfg.feat, rng);
  m.target.identity = Addresser::init(6, cfg.addr_hidden, cfg.feat, rng);
  m.sim_content = SimilarityParams::init();
  m.sim_identity = SimilarityParams::init();
  return m;
}

std::vector<std::pair<std::string, ad::Tensor>> SfeModel::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto add_cell = [&](const std::string& prefix, const GruCell& c) {
    out.emplace_back(prefix + ".W_z", c.W_z);
    out.emplace_back(prefix + ".W_r", c.W_r);
    out.emplace_back(prefix + ".W_n", c.W_n);
    out.emplace_back(prefix + ".U_z", c.U_z);
    out.emplace_back(prefix + ".U_r", c.U_r);
    out.emplace_back(prefix + ".U_n", c.U_n);
    out.emplace_back(prefix + ".b_z", c.b_z);
    out.emplace_back(prefix + ".b_r", c.b_r);
    out.emplace_back(prefix + ".b_n", c.b_n);
  };
  auto add_addr = [&](const std::string& prefix, const Addresser& a) {
    out.emplace_back(prefix + ".W1", a.W1);
    out.emplace_back(prefix + ".b1", a.b1);
    out.emplace_back(prefix + ".W2", a.W2);
    out.emplace_back(prefix + ".b2", a.b2);
  };
  add_cell("gru_fwd", fwd);
  add_cell("gru_bwd", bwd);
  add_addr("addr_content", addr_content);
  add_addr("addr_identity", addr_identity);
  if (M_content.defined()) out.emplace_back("memory_content", M_content);
  if (M_identity.defined()) out.emplace_back("memory_identity", M_identity);
  if (M_shared.defined()) out.emplace_back("memory_shared", M_shared);
  add_addr("target_content", target.content);
  add_addr("target_identity", target.identity);
  out.emplace_back("sim_content.w_raw", sim_content.w_raw);
  out.emplace_back("sim_content.b", sim_content.b);
  out.emplace_back("sim_identity.w_raw", sim_identity.w_raw);
  out.emplace_back("sim_identity.b", sim_identity.b);
  return out;
}

SfeFeatures sfe_forward(const SfeModel& model, const Tensor& fbank) {
  require(fbank.rank() == 2 && fbank.cols() == model.cfg.n_mels,
          "sfe_forward: fbank width mismatch");
  const Tensor h = bigru_encode(model.fwd, model.bwd, fbank);
  require(h.rows() >= model.cfg.pool, "sfe_forward: sequence shorter than one pooling window");
  const Tensor pooled = ad::avg_pool_rows(h, model.cfg.pool);
  const std::size_t T = pooled.rows();

  SfeFeatures feats;
  const Tensor h_seq = ad::mean_rows(pooled);
  if (model.cfg.mode == MemoryMode::wo) {
    std::vector<Tensor> rows(T);
    for (std::size_t t = 0; t < T; ++t) {
      rows[t] = addresser_forward(model.addr_content, ad::row_of(pooled, t));
    }
    feats.content = ad::concat(rows, 0);
    feats.identity = addresser_forward(model.addr_identity, h_seq);
    return feats;
  }

  const Tensor& content_slots =
      model.cfg.mode == MemoryMode::cs ? model.M_content : model.M_shared;
  const Tensor& identity_slots =
      model.cfg.mode == MemoryMode::cs ? model.M_identity : model.M_shared;
  const MemoryBank content_bank{model.addr_content, content_slots};
  const MemoryBank identity_bank{model.addr_identity, identity_slots};

  std::vector<Tensor> rows(T);
  for (std::size_t t = 0; t < T; ++t) {
    rows[t] = memory_read(content_bank, ad::row_of(pooled, t)).second;
  }
  feats.content = ad::concat(rows, 0);
  feats.identity = memory_read(identity_bank, h_seq).second;
  return feats;
}

Mat pose_statistics(const std::vector<geom::Pose>& poses) {
  require(!poses.empty(), "pose_statistics: empty track");
  const double n = static_cast<double>(poses.size());
  double m[3] = {0, 0, 0};
  for (const auto& p : poses) {
    m[0] += p.theta / n;
    m[1] += p.tx / n;
    m[2] += p.ty / n;
  }
  double var[3] = {0, 0, 0};
  for (const auto& p : poses) {
    var[0] += (p.theta - m[0]) * (p.theta - m[0]) / n;
    var[1] += (p.tx - m[1]) * (p.tx - m[1]) / n;
    var[2] += (p.ty - m[2]) * (p.ty - m[2]) / n;
  }
  Mat out(1, 6);
  for (int i = 0; i < 3; ++i) {
    out(0, i) = m[i];
    out(0, 3 + i) = std::sqrt(var[i]);
  }
  return out;
}

ad::Tensor sfe_loss(const SfeModel& model, const std::vector<SfeExample>& batch) {
  require(batch.size() >= 2, "sfe_loss: identity loss needs a batch of >= 2 sequences");

  std::vector<Tensor> content_losses;
  std::vector<Tensor> pred_identity, target_identity;
  content_losses.reserve(batch.size());
  for (const SfeExample& ex : batch) {
    require(ex.aligned_flat.cols == model.cfg.landmark_dim,
            "sfe_loss: landmark feature width mismatch");
    require(ex.pose_stats.rows == 1 && ex.pose_stats.cols == 6,
            "sfe_loss: pose stats must be 1 × 6");
    const SfeFeatures feats = sfe_forward(model, constant_matrix(ex.fbank));

    // Feature frames (pooled to 25 fps) and landmark frames can differ by
    // one frame at the tail; pair up to the shorter length.
    const std::size_t T = std::min<std::size_t>(feats.content.rows(), ex.aligned_flat.rows);
    require(T >= 2, "sfe_loss: need at least two paired frames per sequence");
    const Tensor pred_c = ad::slice(feats.content, 0, 0, T);
    const Tensor target_c = addresser_forward(
        model.target.content, ad::slice(constant_matrix(ex.aligned_flat), 0, 0, T));
    content_losses.push_back(contrastive_loss(pred_c, target_c, model.sim_content));

    pred_identity.push_back(feats.identity);
    target_identity.push_back(
        addresser_forward(model.target.identity, constant_matrix(ex.pose_stats)));
  }

  const Tensor l_content = ad::mean(ad::concat(content_losses, 0));
  const Tensor l_identity = contrastive_loss(ad::concat(pred_identity, 0),
                                             ad::concat(target_identity, 0), model.sim_identity);
  return ad::add(l_content, l_identity);
}

}  // namespace thgen::sfe
