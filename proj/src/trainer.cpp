#include "thgen/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "thgen/geometry.hpp"
#include "thgen/metrics.hpp"

namespace thgen::train {

namespace {

using ad::Tensor;

Tensor constant(const Mat& m) { return Tensor::from_data({m.rows, m.cols}, m.v); }

Tensor constant_row(const std::vector<double>& v) {
  return Tensor::from_data({1, v.size()}, v);
}

Mat to_mat(const Tensor& t) {
  Mat m(t.rows(), t.cols());
  m.v = t.data();
  return m;
}

Tensor clone(const Tensor& t) { return Tensor::from_data(t.shape(), t.data()); }

Tensor scalar_tensor(double v) { return Tensor::from_data({1}, {v}); }

NamedTensors prefixed(const std::string& prefix, const NamedTensors& params) {
  NamedTensors out;
  out.reserve(params.size());
  for (const auto& [name, t] : params) out.emplace_back(prefix + name, t);
  return out;
}

// ------------------------------------------------------------- checkpoint IO

constexpr char kMagic[8] = {'T', 'H', 'G', 'N', 'C', 'K', 'P', 'T'};

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

void put_string(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void need(std::istream& in, bool ok) {
  if (!ok || !in) throw std::runtime_error("checkpoint: truncated or corrupt file");
}

std::uint32_t take_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  need(in, in.gcount() == 4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

std::uint64_t take_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  need(in, in.gcount() == 8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

double take_f64(std::istream& in) { return std::bit_cast<double>(take_u64(in)); }

std::string take_string(std::istream& in) {
  const std::uint64_t n = take_u64(in);
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  need(in, static_cast<std::uint64_t>(in.gcount()) == n);
  return s;
}

// --------------------------------------------------------------- mode names

const char* kKnownKeys[] = {
    "stage",      "epochs",       "batch",           "seed",
    "lr",         "sfe.hidden",   "sfe.feat",        "sfe.slots",
    "sfe.addr_hidden", "sfe.pool", "sfe.memory",     "mdn.mixtures",
    "mdn.context", "mdn.hidden",  "mdn.regression",  "mdn.warmup",
    "mdn.finetune", "mdn.bypass"};

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ----------------------------------------------------------- training utils

// Consecutive chunks of `batch`; a trailing singleton is merged into the
// previous chunk when the loss needs at least two items.
std::vector<std::vector<std::size_t>> make_chunks(const std::vector<std::size_t>& order,
                                                  std::size_t batch, bool min_two) {
  std::vector<std::vector<std::size_t>> chunks;
  for (std::size_t i = 0; i < order.size(); i += batch) {
    const std::size_t end = std::min(order.size(), i + batch);
    chunks.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                        order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (min_two && chunks.size() >= 2 && chunks.back().size() == 1) {
    chunks[chunks.size() - 2].push_back(chunks.back().front());
    chunks.pop_back();
  }
  return chunks;
}

Checkpoint snapshot_params(const std::string& config_text, const Rng& rng,
                           const NamedTensors& params) {
  Checkpoint c;
  c.config_text = config_text;
  c.rng_state = rng.save_state();
  c.tensors.reserve(params.size());
  for (const auto& [name, t] : params) c.tensors.emplace_back(name, clone(t));
  return c;
}

Checkpoint snapshot_full(const std::string& config_text, const Rng& rng,
                         const NamedTensors& params, const AdamState& adam, std::size_t epoch,
                         double best_val, double best_rd, std::size_t best_epoch) {
  Checkpoint c = snapshot_params(config_text, rng, params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = params[i];
    c.tensors.emplace_back("adam.m." + name, Tensor::from_data(t.shape(), adam.m[i]));
    c.tensors.emplace_back("adam.v." + name, Tensor::from_data(t.shape(), adam.v[i]));
  }
  c.tensors.emplace_back("adam.step", scalar_tensor(static_cast<double>(adam.step)));
  c.tensors.emplace_back("trainer.epoch", scalar_tensor(static_cast<double>(epoch)));
  c.tensors.emplace_back("trainer.best_val", scalar_tensor(best_val));
  c.tensors.emplace_back("trainer.best_rd", scalar_tensor(best_rd));
  c.tensors.emplace_back("trainer.best_epoch", scalar_tensor(static_cast<double>(best_epoch)));
  return c;
}

const ad::Tensor& require_tensor(const Checkpoint& c, const std::string& name) {
  const Tensor* t = c.find(name);
  if (!t) throw std::runtime_error("checkpoint: missing tensor " + name);
  return *t;
}

void copy_params_from(const Checkpoint& c, NamedTensors& params) {
  for (auto& [name, t] : params) {
    const Tensor& src = require_tensor(c, name);
    if (src.size() != t.size())
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    t.data() = src.data();
  }
}

void load_adam(const Checkpoint& c, const NamedTensors& params, AdamState& adam) {
  adam.m.clear();
  adam.v.clear();
  for (const auto& [name, t] : params) {
    const Tensor& m = require_tensor(c, "adam.m." + name);
    const Tensor& v = require_tensor(c, "adam.v." + name);
    if (m.size() != t.size() || v.size() != t.size())
      throw std::runtime_error("checkpoint: optimizer shape mismatch for " + name);
    adam.m.push_back(m.data());
    adam.v.push_back(v.data());
  }
  adam.step = static_cast<std::uint64_t>(require_tensor(c, "adam.step").at(0));
}

}  // namespace

// ------------------------------------------------------------------- Adam

void adam_step(NamedTensors& params, AdamState& state) {
  if (state.m.empty()) {
    state.m.reserve(params.size());
    state.v.reserve(params.size());
    for (const auto& [name, t] : params) {
      state.m.emplace_back(t.size(), 0.0);
      state.v.emplace_back(t.size(), 0.0);
    }
  }
  if (state.m.size() != params.size())
    throw std::invalid_argument("adam: parameter list changed size");
  ++state.step;
  const double c1 = 1.0 - std::pow(state.cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, p] = params[i];
    auto& data = p.data();
    const auto& grad = p.grad();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad[j];
      if (!std::isfinite(g))
        throw std::runtime_error("adam: non-finite gradient in " + name);
      state.m[i][j] = state.cfg.beta1 * state.m[i][j] + (1.0 - state.cfg.beta1) * g;
      state.v[i][j] = state.cfg.beta2 * state.v[i][j] + (1.0 - state.cfg.beta2) * g * g;
      data[j] -= state.cfg.lr * (state.m[i][j] / c1) / (std::sqrt(state.v[i][j] / c2) + state.cfg.eps);
      if (!std::isfinite(data[j]))
        throw std::runtime_error("adam: non-finite value in " + name);
    }
    p.zero_grad();
  }
}

// ------------------------------------------------------------------ config

config::KeyValues TrainConfig::to_keyvalues() const {
  config::KeyValues kv;
  kv["stage"] = stage;
  kv["epochs"] = std::to_string(epochs);
  kv["batch"] = std::to_string(batch);
  kv["seed"] = std::to_string(seed);
  kv["lr"] = format_double(lr);
  kv["sfe.hidden"] = std::to_string(sfe_hidden);
  kv["sfe.feat"] = std::to_string(sfe_feat);
  kv["sfe.slots"] = std::to_string(sfe_slots);
  kv["sfe.addr_hidden"] = std::to_string(sfe_addr_hidden);
  kv["sfe.pool"] = std::to_string(sfe_pool);
  kv["sfe.memory"] = sfe::memory_mode_name(memory);
  kv["mdn.mixtures"] = std::to_string(mixtures);
  kv["mdn.context"] = std::to_string(context_frames);
  kv["mdn.hidden"] = std::to_string(mdn_hidden);
  kv["mdn.regression"] = mdn::regression_mode_name(regression);
  kv["mdn.warmup"] = std::to_string(warmup);
  kv["mdn.finetune"] = finetune ? "true" : "false";
  kv["mdn.bypass"] = bypass ? "true" : "false";
  return kv;
}

TrainConfig TrainConfig::from_keyvalues(const config::KeyValues& kv) {
  for (const auto& [key, value] : kv) {
    if (key.rfind("data.", 0) == 0) continue;
    bool known = false;
    for (const char* k : kKnownKeys) known = known || key == k;
    if (!known) throw std::invalid_argument("config: unknown key " + key);
  }
  TrainConfig c;
  c.stage = config::get(kv, "stage", c.stage);
  c.epochs = config::get_size(kv, "epochs", c.epochs);
  c.batch = config::get_size(kv, "batch", c.batch);
  c.seed = config::get_u64(kv, "seed", c.seed);
  c.lr = config::get_double(kv, "lr", c.lr);
  c.sfe_hidden = config::get_size(kv, "sfe.hidden", c.sfe_hidden);
  c.sfe_feat = config::get_size(kv, "sfe.feat", c.sfe_feat);
  c.sfe_slots = config::get_size(kv, "sfe.slots", c.sfe_slots);
  c.sfe_addr_hidden = config::get_size(kv, "sfe.addr_hidden", c.sfe_addr_hidden);
  c.sfe_pool = config::get_size(kv, "sfe.pool", c.sfe_pool);
  c.memory = sfe::memory_mode_from_name(
      config::get(kv, "sfe.memory", sfe::memory_mode_name(c.memory)));
  c.mixtures = config::get_size(kv, "mdn.mixtures", c.mixtures);
  c.context_frames = config::get_size(kv, "mdn.context", c.context_frames);
  c.mdn_hidden = config::get_size(kv, "mdn.hidden", c.mdn_hidden);
  c.regression = mdn::regression_mode_from_name(
      config::get(kv, "mdn.regression", mdn::regression_mode_name(c.regression)));
  c.warmup = config::get_size(kv, "mdn.warmup", c.warmup);
  c.finetune = config::get_bool(kv, "mdn.finetune", c.finetune);
  c.bypass = config::get_bool(kv, "mdn.bypass", c.bypass);
  return c;
}

void TrainConfig::validate() const {
  require(stage == "sfe" || stage == "mdn", "config: stage must be sfe or mdn");
  require(epochs >= 1, "config: epochs must be positive");
  require(batch >= 1, "config: batch must be positive");
  require(stage != "sfe" || batch >= 2, "config: sfe stage needs batch >= 2");
  require(lr > 0.0, "config: lr must be positive");
  require(sfe_hidden >= 1 && sfe_feat >= 1 && sfe_slots >= 1 && sfe_addr_hidden >= 1,
          "config: extractor dims must be positive");
  require(sfe_pool >= 1, "config: sfe.pool must be positive");
  require(mixtures >= 1 && mixtures <= 8, "config: mdn.mixtures must be in 1..8");
  require(mdn_hidden >= 1, "config: mdn.hidden must be positive");
  require(!(bypass && finetune), "config: mdn.bypass and mdn.finetune are exclusive");
}

// ------------------------------------------------------------- checkpoints

const ad::Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

config::KeyValues Checkpoint::config() const { return config::parse(config_text); }

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out.write(kMagic, sizeof kMagic);
  put_u32(out, ckpt.version);
  put_string(out, ckpt.config_text);
  put_string(out, ckpt.rng_state);
  put_u64(out, ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) {
    put_string(out, name);
    const ad::Shape& shape = t.shape();
    put_u64(out, shape.size());
    for (std::size_t e : shape) put_u64(out, e);
    for (double v : t.data()) put_f64(out, v);
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof magic);
  need(in, in.gcount() == 8);
  for (int i = 0; i < 8; ++i)
    if (magic[i] != kMagic[i]) throw std::runtime_error("checkpoint: bad magic in " + path);
  Checkpoint c;
  c.version = take_u32(in);
  if (c.version != 1)
    throw std::runtime_error("checkpoint: unsupported format version " +
                             std::to_string(c.version));
  c.config_text = take_string(in);
  c.rng_state = take_string(in);
  const std::uint64_t count = take_u64(in);
  c.tensors.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = take_string(in);
    const std::uint64_t rank = take_u64(in);
    need(in, rank <= 4);
    ad::Shape shape(rank);
    std::size_t total = 1;
    for (std::uint64_t r = 0; r < rank; ++r) {
      shape[r] = take_u64(in);
      total *= shape[r];
    }
    std::vector<double> data(total);
    for (double& v : data) v = take_f64(in);
    c.tensors.emplace_back(std::move(name), Tensor::from_data(shape, std::move(data)));
  }
  return c;
}

// --------------------------------------------------------- pipeline pieces

std::pair<Mat, Mat> FeatureFrontEnd::features(const Mat& fbank) const {
  if (bypass) {
    const Tensor pooled = ad::avg_pool_rows(constant(fbank), pool);
    return {to_mat(pooled), to_mat(ad::mean_rows(pooled))};
  }
  const sfe::SfeFeatures f = sfe::sfe_forward(model, constant(fbank));
  return {to_mat(f.content), to_mat(f.identity)};
}

sfe::SfeModel sfe_from_checkpoint(const Checkpoint& ckpt) {
  const config::KeyValues kv = ckpt.config();
  const TrainConfig tc = TrainConfig::from_keyvalues(kv);
  sfe::SfeConfig scfg;
  scfg.n_mels = config::get_size(kv, "data.n_mels", scfg.n_mels);
  scfg.landmark_dim = 2 * config::get_size(kv, "data.n_points", 68);
  scfg.hidden = tc.sfe_hidden;
  scfg.feat = tc.sfe_feat;
  scfg.slots = tc.sfe_slots;
  scfg.addr_hidden = tc.sfe_addr_hidden;
  scfg.pool = tc.sfe_pool;
  scfg.mode = tc.memory;
  Rng throwaway(0);
  sfe::SfeModel model = sfe::SfeModel::init(scfg, throwaway);
  NamedTensors params = prefixed("sfe.", model.parameters());
  copy_params_from(ckpt, params);
  return model;
}

mdn::MdnModel mdn_from_checkpoint(const Checkpoint& ckpt) {
  const config::KeyValues kv = ckpt.config();
  const TrainConfig tc = TrainConfig::from_keyvalues(kv);
  const std::size_t n_points = config::get_size(kv, "data.n_points", 68);
  const std::size_t n_mels = config::get_size(kv, "data.n_mels", 80);
  const std::size_t feat_dim = tc.bypass ? n_mels : tc.sfe_feat;
  const mdn::MdnConfig mcfg =
      mdn::make_landmark_config(n_points, feat_dim, feat_dim, tc.context_frames,
                                tc.mdn_hidden, tc.mixtures, tc.regression);
  Rng throwaway(0);
  mdn::MdnModel model = mdn::MdnModel::init(mcfg, throwaway);
  NamedTensors params = prefixed("mdn.", model.parameters());
  copy_params_from(ckpt, params);
  return model;
}

FeatureFrontEnd frontend_from_checkpoint(const Checkpoint& sfe_ckpt) {
  FeatureFrontEnd fe;
  fe.bypass = false;
  fe.model = sfe_from_checkpoint(sfe_ckpt);
  fe.pool = fe.model.cfg.pool;
  fe.n_mels = fe.model.cfg.n_mels;
  return fe;
}

FeatureFrontEnd bypass_frontend(std::size_t n_mels, std::size_t pool) {
  FeatureFrontEnd fe;
  fe.bypass = true;
  fe.n_mels = n_mels;
  fe.pool = pool;
  return fe;
}

namespace {

// An mdn-stage run driven by an extractor checkpoint inherits the extractor's
// architecture fields. The regressor is sized from the features it actually
// consumes, so the config embedded in its checkpoint must describe that
// extractor, not whatever sfe.* values the mdn run happened to carry;
// otherwise the checkpoint cannot be rebuilt for inference.
TrainConfig merge_extractor_config(TrainConfig cfg, const Checkpoint* sfe_ckpt) {
  if (cfg.stage != "mdn" || cfg.bypass || sfe_ckpt == nullptr) return cfg;
  const TrainConfig sc = TrainConfig::from_keyvalues(sfe_ckpt->config());
  cfg.sfe_hidden = sc.sfe_hidden;
  cfg.sfe_feat = sc.sfe_feat;
  cfg.sfe_slots = sc.sfe_slots;
  cfg.sfe_addr_hidden = sc.sfe_addr_hidden;
  cfg.sfe_pool = sc.sfe_pool;
  cfg.memory = sc.memory;
  return cfg;
}

}  // namespace

Split split_by_speaker(const data::Dataset& ds) {
  std::vector<std::string> speakers;
  for (const auto& u : ds.utterances)
    if (std::find(speakers.begin(), speakers.end(), u.speaker_id) == speakers.end())
      speakers.push_back(u.speaker_id);
  Split split;
  for (const std::string& spk : speakers) {
    std::vector<std::size_t> mine;
    for (std::size_t i = 0; i < ds.utterances.size(); ++i)
      if (ds.utterances[i].speaker_id == spk) mine.push_back(i);
    const std::size_t n_val = std::max<std::size_t>(1, (mine.size() + 2) / 5);
    for (std::size_t i = 0; i < mine.size(); ++i)
      (i + n_val < mine.size() ? split.train : split.val).push_back(mine[i]);
  }
  return split;
}

std::string format_metric(const MetricRecord& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu %s %s %.17g", r.epoch, r.split.c_str(),
                r.metric.c_str(), r.value);
  return buf;
}

std::vector<Mat> predict_track(const FeatureFrontEnd& fe, const mdn::MdnModel& model,
                               const Mat& fbank, const Mat& reference_frame) {
  const auto [content, identity] = fe.features(fbank);
  const mdn::MdnConfig& cfg = model.cfg;
  require(content.cols * (2 * cfg.context_frames + 1) + identity.cols == cfg.speech_dim,
          "predict: front-end width does not match the regressor");
  require(reference_frame.cols == 2 && 2 * reference_frame.rows == cfg.ref_dim,
          "predict: reference frame does not match the regressor");
  const std::size_t frames = content.rows;
  const Tensor inputs =
      mdn::mdn_input_rows(constant(content), constant(identity),
                          constant_row(mdn::flatten_frame(reference_frame)), frames,
                          cfg.context_frames);
  const mdn::MixtureBatch out = mdn::mdn_forward_batch(model, inputs);
  const std::size_t m_count = cfg.mixtures, d = cfg.out_dim;
  std::vector<Mat> track;
  track.reserve(frames);
  for (std::size_t r = 0; r < frames; ++r) {
    std::vector<double> alpha(m_count), mu(m_count * d), sigma(m_count * d);
    for (std::size_t m = 0; m < m_count; ++m) alpha[m] = out.alpha.at2(r, m);
    for (std::size_t i = 0; i < m_count * d; ++i) {
      mu[i] = out.mu.at2(r, i);
      sigma[i] = out.sigma.at2(r, i);
    }
    mdn::MixtureParams p;
    p.alpha = Tensor::from_data({1, m_count}, std::move(alpha));
    p.mu = Tensor::from_data({m_count, d}, std::move(mu));
    p.sigma = Tensor::from_data({m_count, d}, std::move(sigma));
    track.push_back(mdn::assemble_frame(mdn::mdn_infer_max(p, cfg.mode), cfg.mode));
  }
  return track;
}

EvalReport evaluate_tracks(const std::vector<Mat>& generated,
                           const std::vector<Mat>& reference) {
  require(!generated.empty() && !reference.empty(), "evaluate: empty track");
  const std::size_t frames = std::min(generated.size(), reference.size());
  const std::vector<Mat> gen(generated.begin(),
                             generated.begin() + static_cast<std::ptrdiff_t>(frames));
  const std::vector<Mat> ref(reference.begin(),
                             reference.begin() + static_cast<std::ptrdiff_t>(frames));
  EvalReport report;
  report.frames = frames;
  report.lmd = metrics::lmd(gen, ref);
  const Mat tpl = geom::mean_template(ref);
  std::vector<geom::Pose> gen_poses, ref_poses;
  gen_poses.reserve(frames);
  ref_poses.reserve(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    gen_poses.push_back(geom::align(gen[t], tpl).pose);
    ref_poses.push_back(geom::align(ref[t], tpl).pose);
  }
  report.rd = metrics::rd(gen_poses, ref_poses);
  return report;
}

double identity_eer(const data::Dataset& ds, const FeatureFrontEnd& fe) {
  require(ds.utterances.size() >= 2, "eer: need at least two utterances");
  std::vector<Mat> ids;
  ids.reserve(ds.utterances.size());
  for (const auto& u : ds.utterances) ids.push_back(fe.features(u.fbank).second);
  std::vector<metrics::ScoredTrial> trials;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t j = i + 1; j < ids.size(); ++j) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t k = 0; k < ids[i].v.size(); ++k) {
        dot += ids[i].v[k] * ids[j].v[k];
        na += ids[i].v[k] * ids[i].v[k];
        nb += ids[j].v[k] * ids[j].v[k];
      }
      const double score = dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-12);
      trials.push_back(
          {score, ds.utterances[i].speaker_id == ds.utterances[j].speaker_id});
    }
  }
  return metrics::eer(trials);
}

// ----------------------------------------------------------------- training

namespace {

struct UttRows {
  Mat inputs;   // frozen-front-end input rows (unused when finetuning)
  Mat targets;  // T_pair x out_dim
};

Mat build_targets(const data::Utterance& utt, std::size_t frames,
                  mdn::RegressionMode mode, std::size_t out_dim) {
  Mat targets(frames, out_dim);
  for (std::size_t t = 0; t < frames; ++t) {
    if (mode == mdn::RegressionMode::affine) {
      const std::vector<double> flat = mdn::flatten_frame(utt.aligned[t]);
      std::copy(flat.begin(), flat.end(), targets.v.begin() + t * out_dim);
      targets(t, out_dim - 3) = utt.poses[t].theta;
      targets(t, out_dim - 2) = utt.poses[t].tx;
      targets(t, out_dim - 1) = utt.poses[t].ty;
    } else {
      const std::vector<double> flat = mdn::flatten_frame(utt.landmarks[t]);
      std::copy(flat.begin(), flat.end(), targets.v.begin() + t * out_dim);
    }
  }
  return targets;
}

Mat stack_rows(const std::vector<const Mat*>& parts) {
  std::size_t rows = 0;
  for (const Mat* p : parts) rows += p->rows;
  Mat out(rows, parts.front()->cols);
  std::size_t at = 0;
  for (const Mat* p : parts) {
    std::copy(p->v.begin(), p->v.end(), out.v.begin() + at);
    at += p->v.size();
  }
  return out;
}

}  // namespace

TrainResult train(const data::Dataset& ds, const TrainConfig& cfg_in, const Checkpoint* sfe_ckpt,
                  const Checkpoint* resume, std::size_t stop_after) {
  const TrainConfig cfg = merge_extractor_config(cfg_in, sfe_ckpt);
  cfg.validate();
  require(!ds.utterances.empty(), "train: dataset is empty");
  const std::size_t n_points = ds.tpl.rows;
  const std::size_t n_mels = ds.utterances.front().fbank.cols;

  config::KeyValues kv = cfg.to_keyvalues();
  kv["data.n_mels"] = std::to_string(n_mels);
  kv["data.n_points"] = std::to_string(n_points);
  const std::string config_text = config::canonical_text(kv);
  if (resume && resume->config_text != config_text)
    throw std::runtime_error("resume: checkpoint config does not match this run");

  const Split split = split_by_speaker(ds);
  require(!split.train.empty() && !split.val.empty(), "train: dataset too small to split");

  const std::size_t end_epoch =
      stop_after > 0 ? std::min(cfg.epochs, stop_after) : cfg.epochs;

  Rng rng(cfg.seed);
  TrainResult result;
  AdamState adam;
  adam.cfg.lr = cfg.lr;
  double best_val = std::numeric_limits<double>::infinity();
  double best_rd = 0.0;
  std::size_t best_epoch = 0, start_epoch = 0;

  auto restore_bookkeeping = [&](const Checkpoint& c) {
    rng.restore_state(c.rng_state);
    start_epoch = static_cast<std::size_t>(require_tensor(c, "trainer.epoch").at(0));
    best_val = require_tensor(c, "trainer.best_val").at(0);
    best_rd = require_tensor(c, "trainer.best_rd").at(0);
    best_epoch = static_cast<std::size_t>(require_tensor(c, "trainer.best_epoch").at(0));
  };

  if (cfg.stage == "sfe") {
    require(split.train.size() >= 2, "train: sfe stage needs at least 2 training utterances");
    require(split.val.size() >= 2, "train: sfe stage needs at least 2 validation utterances");
    sfe::SfeConfig scfg;
    scfg.n_mels = n_mels;
    scfg.landmark_dim = 2 * n_points;
    scfg.hidden = cfg.sfe_hidden;
    scfg.feat = cfg.sfe_feat;
    scfg.slots = cfg.sfe_slots;
    scfg.addr_hidden = cfg.sfe_addr_hidden;
    scfg.pool = cfg.sfe_pool;
    scfg.mode = cfg.memory;
    sfe::SfeModel model = sfe::SfeModel::init(scfg, rng);
    NamedTensors params = prefixed("sfe.", model.parameters());
    if (resume) {
      copy_params_from(*resume, params);
      load_adam(*resume, params, adam);
      restore_bookkeeping(*resume);
    }
    require(start_epoch < end_epoch, "train: no epochs left to run");

    std::vector<sfe::SfeExample> examples;
    examples.reserve(ds.utterances.size());
    for (const auto& utt : ds.utterances) {
      sfe::SfeExample ex;
      ex.fbank = utt.fbank;
      ex.aligned_flat = Mat(utt.aligned.size(), 2 * n_points);
      for (std::size_t t = 0; t < utt.aligned.size(); ++t) {
        const std::vector<double> flat = mdn::flatten_frame(utt.aligned[t]);
        std::copy(flat.begin(), flat.end(),
                  ex.aligned_flat.v.begin() + t * ex.aligned_flat.cols);
      }
      ex.pose_stats = sfe::pose_statistics(utt.poses);
      examples.push_back(std::move(ex));
    }
    std::vector<sfe::SfeExample> val_batch;
    for (std::size_t i : split.val) val_batch.push_back(examples[i]);

    for (std::size_t epoch = start_epoch + 1; epoch <= end_epoch; ++epoch) {
      std::vector<std::size_t> order = split.train;
      rng.shuffle(order);
      double sum = 0.0;
      std::size_t count = 0;
      for (const auto& chunk : make_chunks(order, cfg.batch, true)) {
        std::vector<sfe::SfeExample> batch;
        batch.reserve(chunk.size());
        for (std::size_t idx : chunk) batch.push_back(examples[idx]);
        ad::Tape tape;
        double value = 0.0;
        {
          ad::TapeScope scope(tape);
          Tensor loss = sfe::sfe_loss(model, batch);
          value = loss.item();
          tape.backward(loss);
        }
        adam_step(params, adam);
        sum += value * static_cast<double>(chunk.size());
        count += chunk.size();
      }
      result.log.push_back({epoch, "train", "loss", sum / static_cast<double>(count)});
      const double val = sfe::sfe_loss(model, val_batch).item();
      result.log.push_back({epoch, "val", "loss", val});
      if (val < best_val) {
        best_val = val;
        best_epoch = epoch;
        result.best = snapshot_params(config_text, rng, params);
      }
    }
    result.last = snapshot_full(config_text, rng, params, adam, end_epoch, best_val,
                                best_rd, best_epoch);
  } else {
    FeatureFrontEnd fe;
    if (cfg.bypass) {
      fe = bypass_frontend(n_mels, cfg.sfe_pool);
    } else {
      require(sfe_ckpt != nullptr,
              "train: mdn stage requires an extractor checkpoint (or mdn.bypass)");
      fe = frontend_from_checkpoint(*sfe_ckpt);
    }
    const mdn::MdnConfig mcfg =
        mdn::make_landmark_config(n_points, fe.content_dim(), fe.identity_dim(),
                                  cfg.context_frames, cfg.mdn_hidden, cfg.mixtures,
                                  cfg.regression);
    mdn::MdnModel model = mdn::MdnModel::init(mcfg, rng);
    NamedTensors params = prefixed("mdn.", model.parameters());
    if (cfg.finetune) {
      const NamedTensors sfe_params = prefixed("sfe.", fe.model.parameters());
      params.insert(params.end(), sfe_params.begin(), sfe_params.end());
    }
    if (resume) {
      copy_params_from(*resume, params);
      load_adam(*resume, params, adam);
      restore_bookkeeping(*resume);
    }
    require(start_epoch < end_epoch, "train: no epochs left to run");

    std::vector<UttRows> rows(ds.utterances.size());
    for (std::size_t i = 0; i < ds.utterances.size(); ++i) {
      const auto& utt = ds.utterances[i];
      const std::size_t pooled = utt.fbank.rows / fe.pool;
      const std::size_t frames = std::min(pooled, utt.landmarks.size());
      require(frames >= 1, "train: utterance too short for one pooled frame");
      rows[i].targets = build_targets(utt, frames, cfg.regression, mcfg.out_dim);
      if (!cfg.finetune) {
        const auto [content, identity] = fe.features(utt.fbank);
        const Tensor in = mdn::mdn_input_rows(
            constant(content), constant(identity),
            constant_row(mdn::flatten_frame(utt.landmarks[0])), frames,
            mcfg.context_frames);
        rows[i].inputs = to_mat(in);
      }
    }

    auto chunk_batch = [&](const std::vector<std::size_t>& chunk) -> std::pair<Tensor, Mat> {
      std::vector<const Mat*> target_parts;
      target_parts.reserve(chunk.size());
      for (std::size_t idx : chunk) target_parts.push_back(&rows[idx].targets);
      Mat targets = stack_rows(target_parts);
      Tensor inputs;
      if (cfg.finetune) {
        std::vector<Tensor> parts;
        parts.reserve(chunk.size());
        for (std::size_t idx : chunk) {
          const auto& utt = ds.utterances[idx];
          const sfe::SfeFeatures f = sfe::sfe_forward(fe.model, constant(utt.fbank));
          parts.push_back(mdn::mdn_input_rows(
              f.content, f.identity, constant_row(mdn::flatten_frame(utt.landmarks[0])),
              rows[idx].targets.rows, mcfg.context_frames));
        }
        inputs = ad::concat(parts, 0);
      } else {
        std::vector<const Mat*> input_parts;
        input_parts.reserve(chunk.size());
        for (std::size_t idx : chunk) input_parts.push_back(&rows[idx].inputs);
        inputs = constant(stack_rows(input_parts));
      }
      return {inputs, std::move(targets)};
    };
    auto chunk_nll = [&](const std::vector<std::size_t>& chunk) -> Tensor {
      const auto [inputs, targets] = chunk_batch(chunk);
      return mdn::mdn_nll_batch(mdn::mdn_forward_batch(model, inputs), targets);
    };
    // Warm-up loss: the average of the component means against the target.
    // Averaging first matters: every mean head then receives the same
    // gradient, so the small offsets between components planted at
    // initialization survive the warm-up intact and seed the split once NLL
    // takes over. (Regressing each mean separately would pull all of them
    // onto the conditional mean and leave NLL at an exactly symmetric fixed
    // point.) The alpha and sigma heads are not part of this graph, so their
    // moments stay zero and they hold their initialization.
    auto chunk_warmup = [&](const std::vector<std::size_t>& chunk) -> Tensor {
      const auto [inputs, targets] = chunk_batch(chunk);
      const mdn::MixtureBatch out = mdn::mdn_forward_batch(model, inputs);
      Tensor mu_bar;
      for (std::size_t m = 0; m < cfg.mixtures; ++m) {
        const Tensor part = ad::slice(out.mu, 1, m * mcfg.out_dim, mcfg.out_dim);
        mu_bar = m == 0 ? part : ad::add(mu_bar, part);
      }
      mu_bar = ad::mul_scalar(mu_bar, 1.0 / static_cast<double>(cfg.mixtures));
      const Tensor diff = ad::sub(mu_bar, constant(targets));
      const double denom = static_cast<double>(targets.rows * mcfg.out_dim);
      return ad::mul_scalar(ad::sum(ad::mul(diff, diff)), 1.0 / denom);
    };

    for (std::size_t epoch = start_epoch + 1; epoch <= end_epoch; ++epoch) {
      const bool warm = epoch <= cfg.warmup;
      std::vector<std::size_t> order = split.train;
      rng.shuffle(order);
      double sum = 0.0;
      std::size_t count = 0;
      for (const auto& chunk : make_chunks(order, cfg.batch, false)) {
        std::size_t chunk_rows = 0;
        for (std::size_t idx : chunk) chunk_rows += rows[idx].targets.rows;
        ad::Tape tape;
        double value = 0.0;
        {
          ad::TapeScope scope(tape);
          Tensor loss = warm ? chunk_warmup(chunk) : chunk_nll(chunk);
          value = loss.item();
          tape.backward(loss);
        }
        adam_step(params, adam);
        sum += value * static_cast<double>(chunk_rows);
        count += chunk_rows;
      }
      result.log.push_back({epoch, "train", warm ? "warmup_mse" : "nll",
                            sum / static_cast<double>(count)});

      const double val_nll = chunk_nll(split.val).item();  // no tape
      result.log.push_back({epoch, "val", "nll", val_nll});
      double lmd_sum = 0.0, rd_sum = 0.0;
      for (std::size_t idx : split.val) {
        const auto& utt = ds.utterances[idx];
        const std::vector<Mat> gen =
            predict_track(fe, model, utt.fbank, utt.landmarks[0]);
        const EvalReport er = evaluate_tracks(gen, utt.landmarks);
        lmd_sum += er.lmd;
        rd_sum += er.rd;
      }
      const double val_lmd = lmd_sum / static_cast<double>(split.val.size());
      const double val_rd = rd_sum / static_cast<double>(split.val.size());
      result.log.push_back({epoch, "val", "lmd", val_lmd});
      result.log.push_back({epoch, "val", "rd", val_rd});
      if (val_lmd < best_val) {
        best_val = val_lmd;
        best_rd = val_rd;
        best_epoch = epoch;
        result.best = snapshot_params(config_text, rng, params);
      }
    }
    result.last = snapshot_full(config_text, rng, params, adam, end_epoch, best_val,
                                best_rd, best_epoch);
  }

  result.best_val = best_val;
  result.best_rd = best_rd;
  result.best_epoch = best_epoch;
  return result;
}

// ----------------------------------------------------------------- ablation

std::vector<AblationCell> run_ablation(const data::Dataset& ds, const TrainConfig& sfe_base,
                                       const TrainConfig& mdn_base,
                                       const std::vector<std::size_t>& mixtures,
                                       const std::vector<sfe::MemoryMode>& memories,
                                       const std::vector<mdn::RegressionMode>& regressions) {
  require(!mixtures.empty() && !regressions.empty(), "ablation: empty grid axis");
  require(mdn_base.bypass || !memories.empty(), "ablation: empty grid axis");
  const std::size_t n_mels = ds.utterances.empty() ? 80 : ds.utterances.front().fbank.cols;
  const std::size_t n_points = ds.tpl.rows;

  std::vector<AblationCell> cells;
  const std::vector<sfe::MemoryMode> memory_axis =
      mdn_base.bypass ? std::vector<sfe::MemoryMode>{mdn_base.memory} : memories;

  for (sfe::MemoryMode memory : memory_axis) {
    Checkpoint extractor;
    double eer = 0.0;
    std::string frontend_error;
    if (mdn_base.bypass) {
      eer = identity_eer(ds, bypass_frontend(n_mels, mdn_base.sfe_pool));
    } else {
      TrainConfig sc = sfe_base;
      sc.stage = "sfe";
      sc.memory = memory;
      try {
        TrainResult res = train(ds, sc);
        extractor = res.best.empty() ? res.last : res.best;
        eer = identity_eer(ds, frontend_from_checkpoint(extractor));
      } catch (const std::exception& e) {
        frontend_error = e.what();
      }
    }

    for (std::size_t m : mixtures) {
      for (mdn::RegressionMode regression : regressions) {
        TrainConfig mc = mdn_base;
        mc.stage = "mdn";
        mc.memory = memory;
        mc.mixtures = m;
        mc.regression = regression;
        // Keep the reported config identical to the one train() embeds in the
        // cell's checkpoint.
        if (!mdn_base.bypass && frontend_error.empty())
          mc = merge_extractor_config(mc, &extractor);

        AblationCell cell;
        cell.config = mc.to_keyvalues();
        cell.config["data.n_mels"] = std::to_string(n_mels);
        cell.config["data.n_points"] = std::to_string(n_points);
        cell.hash = config::config_hash(cell.config);
        cell.eer = eer;
        if (!frontend_error.empty()) {
          cell.error = "extractor: " + frontend_error;
        } else {
          try {
            TrainResult res =
                train(ds, mc, mdn_base.bypass ? nullptr : &extractor);
            cell.lmd = res.best_val;
            cell.rd = res.best_rd;
            cell.ok = true;
          } catch (const std::exception& e) {
            cell.error = e.what();
          }
        }
        cells.push_back(std::move(cell));
      }
    }
  }
  return cells;
}

std::string ablation_report(const std::vector<AblationCell>& cells) {
  std::vector<const AblationCell*> order;
  order.reserve(cells.size());
  for (const auto& c : cells) order.push_back(&c);
  std::sort(order.begin(), order.end(),
            [](const AblationCell* a, const AblationCell* b) { return a->hash < b->hash; });

  std::string out = "ablation cells: " + std::to_string(cells.size()) + "\n";
  char line[256];
  for (const AblationCell* c : order) {
    const std::string m = config::get(c->config, "mdn.mixtures", "?");
    const std::string mem = config::get(c->config, "sfe.memory", "?");
    const std::string reg = config::get(c->config, "mdn.regression", "?");
    if (c->ok) {
      std::snprintf(line, sizeof line,
                    "%s M=%s memory=%s regression=%s lmd=%.9g rd=%.9g eer=%.9g status=ok\n",
                    c->hash.c_str(), m.c_str(), mem.c_str(), reg.c_str(), c->lmd, c->rd,
                    c->eer);
      out += line;
    } else {
      std::snprintf(line, sizeof line, "%s M=%s memory=%s regression=%s status=error ",
                    c->hash.c_str(), m.c_str(), mem.c_str(), reg.c_str());
      out += line;
      out += c->error;
      out += '\n';
    }
  }
  for (const AblationCell* c : order) {
    out += "[config " + c->hash + "]\n";
    out += config::canonical_text(c->config);
  }
  return out;
}

}  // namespace thgen::train
