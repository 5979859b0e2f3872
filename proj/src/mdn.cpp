#include "thgen/mdn.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace thgen::mdn {

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

// Per-component slice bookkeeping shared by both infer flavours.
std::vector<double> mean_row(const MixtureParams& p, std::size_t m) {
  std::vector<double> row(p.out_dim());
  for (std::size_t d = 0; d < row.size(); ++d) row[d] = p.mu.at2(m, d);
  return row;
}

InferResult split_mean(const std::vector<double>& mean, RegressionMode mode) {
  InferResult r;
  if (mode == RegressionMode::affine) {
    require(mean.size() >= 5 && mean.size() % 2 == 1,
            "mdn: affine mean must have 2L+3 entries");
    const std::size_t two_l = mean.size() - 3;
    const std::vector<double> coords(mean.begin(), mean.begin() + two_l);
    r.p_align = unflatten_frame(coords);
    r.pose.theta = geom::wrap_angle(mean[two_l]);
    r.pose.tx = mean[two_l + 1];
    r.pose.ty = mean[two_l + 2];
  } else {
    require(mean.size() >= 2 && mean.size() % 2 == 0,
            "mdn: direct mean must have 2L entries");
    r.p_align = unflatten_frame(mean);
  }
  return r;
}

}  // namespace

std::string regression_mode_name(RegressionMode mode) {
  return mode == RegressionMode::affine ? "f_tt" : "f_a";
}

RegressionMode regression_mode_from_name(const std::string& name) {
  if (name == "f_tt") return RegressionMode::affine;
  if (name == "f_a") return RegressionMode::direct;
  throw std::invalid_argument("mdn: unknown regression mode '" + name + "'");
}

void MdnConfig::validate() const {
  require(speech_dim >= 1, "mdn: speech_dim must be positive");
  require(hidden >= 1, "mdn: hidden must be positive");
  require(mixtures >= 1 && mixtures <= 8, "mdn: mixtures must be in 1..8");
  require(out_dim >= 1, "mdn: out_dim must be positive");
  if (mode == RegressionMode::affine)
    require(out_dim >= 5 && out_dim % 2 == 1, "mdn: affine out_dim must be 2L+3");
}

MdnConfig make_landmark_config(std::size_t n_points, std::size_t content_dim,
                               std::size_t identity_dim, std::size_t context_frames,
                               std::size_t hidden, std::size_t mixtures, RegressionMode mode) {
  MdnConfig cfg;
  cfg.speech_dim = content_dim * (2 * context_frames + 1) + identity_dim;
  cfg.ref_dim = 2 * n_points;
  cfg.hidden = hidden;
  cfg.mixtures = mixtures;
  cfg.out_dim = mode == RegressionMode::affine ? 2 * n_points + 3 : 2 * n_points;
  cfg.context_frames = context_frames;
  cfg.mode = mode;
  cfg.validate();
  return cfg;
}

MdnModel MdnModel::init(const MdnConfig& cfg, Rng& rng) {
  cfg.validate();
  MdnModel m;
  m.cfg = cfg;
  const std::size_t in = cfg.in_dim(), h = cfg.hidden, d = cfg.out_dim;
  const std::size_t head = cfg.mixtures * d;
  const double si = 1.0 / std::sqrt(static_cast<double>(in));
  const double sh = 1.0 / std::sqrt(static_cast<double>(h));
  m.W1 = uniform_param({in, h}, si, rng);
  m.b1 = zero_param({1, h});
  m.W2 = uniform_param({h, h}, sh, rng);
  m.b2 = zero_param({1, h});
  // The mixture heads start tied: all components share one weight block and
  // differ only by a small bias offset, and the mixing head starts uniform.
  // If the components instead start as independent random heads, their
  // initial log densities differ by several nats once summed over the output
  // dimensions, the responsibilities are one-hot on that noise from step
  // one, and the mixture degenerates into arbitrary hard experts.
  //
  // The offsets have the same magnitude on every output dimension and differ
  // only in sign. Equal magnitudes make the quadratic self-term of each
  // component's log density identical, so it cancels in the responsibility
  // softmax no matter how the per-dimension variances evolve; without this,
  // dimensions whose variance shrinks fast amplify any magnitude imbalance
  // into a row-independent bonus for one component, and that component
  // swallows the mixture before any real structure is seen. What remains is
  // the cross-term between offset and residual, so responsibilities can only
  // differentiate along genuine residual structure. The leading dimensions
  // encode the component index in binary so the sign patterns are guaranteed
  // distinct; the rest draw random signs.
  m.Wa = zero_param({h, cfg.mixtures});
  m.ba = zero_param({1, cfg.mixtures});
  const Tensor mu_block = uniform_param({h, d}, sh, rng);
  std::vector<double> wm(h * head), bm(head), ws(h * head);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < head; ++c) wm[r * head + c] = mu_block.at2(r, c % d);
  std::size_t code_bits = 0;
  while ((std::size_t{1} << code_bits) < cfg.mixtures) ++code_bits;
  for (std::size_t k = 0; k < d; ++k) {
    std::vector<bool> random_sign(cfg.mixtures);
    for (std::size_t j = 0; j < cfg.mixtures; ++j) random_sign[j] = rng.uniform() < 0.5;
    for (std::size_t j = 0; j < cfg.mixtures; ++j) {
      const bool neg = k < code_bits ? ((j >> k) & 1) != 0 : random_sign[j];
      bm[j * d + k] = neg ? -kMuJitter : kMuJitter;
    }
  }
  const Tensor sigma_block = uniform_param({h, d}, sh, rng);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < head; ++c) ws[r * head + c] = sigma_block.at2(r, c % d);
  m.Wm = ad::parameter({h, head}, std::move(wm));
  m.bm = ad::parameter({1, head}, std::move(bm));
  m.Ws = ad::parameter({h, head}, std::move(ws));
  // softplus(bs) + floor == kSigmaInit at zero hidden activation.
  m.bs = ad::parameter(
      {1, head},
      std::vector<double>(head, std::log(std::expm1(kSigmaInit - kSigmaFloor))));
  return m;
}

std::vector<std::pair<std::string, ad::Tensor>> MdnModel::parameters() {
  return {{"trunk.W1", W1}, {"trunk.b1", b1}, {"trunk.W2", W2}, {"trunk.b2", b2},
          {"head_alpha.W", Wa}, {"head_alpha.b", ba}, {"head_mu.W", Wm},
          {"head_mu.b", bm}, {"head_sigma.W", Ws}, {"head_sigma.b", bs}};
}

ad::Tensor mdn_input_rows(const Tensor& content, const Tensor& identity,
                          const Tensor& reference, std::size_t frames,
                          std::size_t context_frames) {
  require(content.rank() == 2 && identity.rank() == 2 && reference.rank() == 2,
          "mdn_input_rows: expected rank-2 inputs");
  require(frames >= 1 && content.rows() >= 1, "mdn_input_rows: need at least one frame");
  const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(content.rows()) - 1;
  std::vector<Tensor> rows;
  rows.reserve(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    std::vector<Tensor> parts;
    parts.reserve(2 * context_frames + 3);
    for (std::ptrdiff_t k = -static_cast<std::ptrdiff_t>(context_frames);
         k <= static_cast<std::ptrdiff_t>(context_frames); ++k) {
      const std::ptrdiff_t src = std::clamp<std::ptrdiff_t>(
          static_cast<std::ptrdiff_t>(t) + k, 0, last);
      parts.push_back(ad::row_of(content, static_cast<std::size_t>(src)));
    }
    parts.push_back(identity);
    parts.push_back(reference);
    rows.push_back(ad::concat(parts, 1));
  }
  return ad::concat(rows, 0);
}

MixtureBatch mdn_forward_batch(const MdnModel& model, const Tensor& inputs) {
  require(inputs.rank() == 2 && inputs.cols() == model.cfg.in_dim(),
          "mdn_forward: input width does not match speech_dim + ref_dim");
  const Tensor h1 = ad::tanh(ad::add_rows(ad::matmul(inputs, model.W1), model.b1));
  const Tensor h2 = ad::tanh(ad::add_rows(ad::matmul(h1, model.W2), model.b2));
  MixtureBatch out;
  out.alpha = ad::softmax(ad::add_rows(ad::matmul(h2, model.Wa), model.ba), 1);
  out.mu = ad::add_rows(ad::matmul(h2, model.Wm), model.bm);
  out.sigma = ad::add_scalar(
      ad::softplus(ad::add_rows(ad::matmul(h2, model.Ws), model.bs)), kSigmaFloor);
  return out;
}

MixtureParams mdn_forward(const MdnModel& model, const std::vector<double>& speech_feat,
                          const std::vector<double>& ref_feat) {
  require(speech_feat.size() == model.cfg.speech_dim,
          "mdn_forward: speech feature width mismatch");
  require(ref_feat.size() == model.cfg.ref_dim,
          "mdn_forward: reference feature width mismatch");
  std::vector<double> row = speech_feat;
  row.insert(row.end(), ref_feat.begin(), ref_feat.end());
  const MixtureBatch b = mdn_forward_batch(model, Tensor::from_data({1, row.size()}, row));
  MixtureParams p;
  p.alpha = b.alpha;
  p.mu = ad::reshape(b.mu, {model.cfg.mixtures, model.cfg.out_dim});
  p.sigma = ad::reshape(b.sigma, {model.cfg.mixtures, model.cfg.out_dim});
  return p;
}

ad::Tensor mdn_nll(const MixtureParams& params, const std::vector<double>& target) {
  const std::size_t m_count = params.mu.rows(), d = params.mu.cols();
  require(params.alpha.size() == m_count && params.sigma.rows() == m_count &&
              params.sigma.cols() == d,
          "mdn_nll: inconsistent mixture shapes");
  require(target.size() == d, "mdn_nll: target width mismatch");
  const Tensor t_row = Tensor::from_data({1, d}, target);
  const Tensor ones = Tensor::full({d, 1}, 1.0);
  const double norm = -0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi);

  // Per-component log density: norm - sum(log sigma) - 0.5 * sum(z^2).
  const Tensor z = ad::div(ad::add_rows(ad::mul_scalar(params.mu, -1.0), t_row), params.sigma);
  const Tensor quad = ad::matmul(ad::mul(z, z), ones);          // {M, 1}
  const Tensor log_det = ad::matmul(ad::log(params.sigma), ones);  // {M, 1}
  const Tensor log_dens = ad::add_scalar(
      ad::mul_scalar(ad::add(log_det, ad::mul_scalar(quad, 0.5)), -1.0), norm);
  const Tensor scored =
      ad::add(log_dens, ad::reshape(ad::log(params.alpha), {m_count, 1}));
  return ad::mul_scalar(ad::logsumexp(scored), -1.0);
}

ad::Tensor mdn_nll_batch(const MixtureBatch& batch, const Mat& targets) {
  const std::size_t n = batch.alpha.rows(), m_count = batch.alpha.cols();
  require(m_count >= 1 && batch.mu.cols() % m_count == 0,
          "mdn_nll_batch: head width must be M * out_dim");
  const std::size_t d = batch.mu.cols() / m_count;
  require(targets.rows == n && targets.cols == d, "mdn_nll_batch: target shape mismatch");

  const Tensor t = Tensor::from_data({n, d}, targets.v);
  const Tensor ones = Tensor::full({d, 1}, 1.0);
  const double norm = -0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi);
  const Tensor log_alpha = ad::log(batch.alpha);

  std::vector<Tensor> scored;  // M tensors of shape {N, 1}
  scored.reserve(m_count);
  for (std::size_t m = 0; m < m_count; ++m) {
    const Tensor mu_m = ad::slice(batch.mu, 1, m * d, d);
    const Tensor sg_m = ad::slice(batch.sigma, 1, m * d, d);
    const Tensor z = ad::div(ad::sub(t, mu_m), sg_m);
    const Tensor quad = ad::matmul(ad::mul(z, z), ones);
    const Tensor log_det = ad::matmul(ad::log(sg_m), ones);
    const Tensor log_dens = ad::add_scalar(
        ad::mul_scalar(ad::add(log_det, ad::mul_scalar(quad, 0.5)), -1.0), norm);
    scored.push_back(ad::add(log_dens, ad::slice(log_alpha, 1, m, 1)));
  }
  const Tensor table = ad::concat(scored, 1);  // {N, M}
  std::vector<Tensor> row_lse;
  row_lse.reserve(n);
  for (std::size_t r = 0; r < n; ++r) row_lse.push_back(ad::logsumexp(ad::row_of(table, r)));
  return ad::mul_scalar(ad::mean(ad::concat(row_lse, 0)), -1.0);
}

std::vector<double> flatten_frame(const Mat& frame) {
  require(frame.cols == 2, "flatten_frame: expected L x 2 landmarks");
  return frame.v;
}

Mat unflatten_frame(const std::vector<double>& flat) {
  require(!flat.empty() && flat.size() % 2 == 0, "unflatten_frame: need 2L values");
  Mat m(flat.size() / 2, 2);
  m.v = flat;
  return m;
}

InferResult mdn_infer_max(const MixtureParams& params, RegressionMode mode) {
  std::size_t best = 0;
  for (std::size_t m = 1; m < params.mixtures(); ++m)
    if (params.alpha.at(m) > params.alpha.at(best)) best = m;
  return split_mean(mean_row(params, best), mode);
}

InferResult mdn_infer_mixture(const MixtureParams& params, RegressionMode mode) {
  std::vector<double> mean(params.out_dim(), 0.0);
  for (std::size_t m = 0; m < params.mixtures(); ++m)
    for (std::size_t d = 0; d < mean.size(); ++d)
      mean[d] += params.alpha.at(m) * params.mu.at2(m, d);
  return split_mean(mean, mode);
}

Mat assemble_frame(const InferResult& result, RegressionMode mode) {
  if (mode == RegressionMode::direct) return result.p_align;
  return geom::reconstruct(result.p_align, result.pose);
}

Mat predict_frame(const MdnModel& model, const std::vector<double>& speech_feat,
                  const Mat& ref_landmarks) {
  const MixtureParams params = mdn_forward(model, speech_feat, flatten_frame(ref_landmarks));
  return assemble_frame(mdn_infer_max(params, model.cfg.mode), model.cfg.mode);
}

}  // namespace thgen::mdn
