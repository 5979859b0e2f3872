#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "thgen/autodiff.hpp"
#include "thgen/config.hpp"
#include "thgen/data.hpp"
#include "thgen/mdn.hpp"
#include "thgen/rng.hpp"
#include "thgen/sfe.hpp"

namespace thgen::train {

// Parameter lists carry names for checkpoints and optimizer diagnostics.
using NamedTensors = std::vector<std::pair<std::string, ad::Tensor>>;

// ---------------------------------------------------------------- optimizer

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig cfg;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;  // parallel to the parameter list
};

// Standard bias-corrected Adam update, in list order; consumes (zeroes) the
// gradients. A non-finite gradient or updated value aborts with the
// parameter's name.
void adam_step(NamedTensors& params, AdamState& state);

// ------------------------------------------------------------------- config

struct TrainConfig {
  std::string stage = "sfe";  // sfe | mdn
  std::size_t epochs = 200;
  std::size_t batch = 4;  // utterances per step
  std::uint64_t seed = 1;
  double lr = 1e-3;

  // Feature extractor; also the front-end settings of the mdn stage.
  std::size_t sfe_hidden = 64;
  std::size_t sfe_feat = 64;
  std::size_t sfe_slots = 8;
  std::size_t sfe_addr_hidden = 64;
  std::size_t sfe_pool = 4;
  sfe::MemoryMode memory = sfe::MemoryMode::cs;

  // Regressor.
  std::size_t mixtures = 3;
  std::size_t context_frames = 2;
  std::size_t mdn_hidden = 128;
  mdn::RegressionMode regression = mdn::RegressionMode::affine;
  // Epochs trained by plain mean regression (every component's mean against
  // the target) before switching to mixture NLL. Under NLL from scratch the
  // responsibilities harden on initialization noise while the trunk still
  // underfits, and the mixture collapses onto one component; fitting the
  // conditional mean first leaves the genuinely multi-modal residual as the
  // only structure for the components to divide when NLL takes over.
  std::size_t warmup = 0;
  bool finetune = false;  // unfreeze the extractor during the mdn stage
  bool bypass = false;    // pooled raw fbank rows instead of extractor features

  config::KeyValues to_keyvalues() const;
  // Defaults overridden by kv; unknown keys are rejected except the
  // dataset-derived "data." namespace checkpoints carry.
  static TrainConfig from_keyvalues(const config::KeyValues& kv);
  void validate() const;
};

// -------------------------------------------------------------- checkpoints

struct Checkpoint {
  std::uint32_t version = 1;
  std::string config_text;  // canonical resolved config, incl. data.* dims
  std::string rng_state;
  NamedTensors tensors;

  const ad::Tensor* find(const std::string& name) const;
  config::KeyValues config() const;
  bool empty() const { return tensors.empty(); }
};

// Little-endian container: magic, version, config text, RNG state, then
// name/shape/float64-payload per tensor. load(save(x)) == x bit-exactly.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// --------------------------------------------------------- pipeline pieces

// Frozen acoustic front-end for regression and verification: pooled
// extractor features, or pooled raw fbank rows (ablation bypass).
struct FeatureFrontEnd {
  bool bypass = false;
  std::size_t pool = 4;
  std::size_t n_mels = 80;
  sfe::SfeModel model;  // engaged when !bypass

  std::size_t content_dim() const { return bypass ? n_mels : model.cfg.feat; }
  std::size_t identity_dim() const { return content_dim(); }
  // {T_pooled x content_dim} content rows, {1 x identity_dim} identity row.
  std::pair<Mat, Mat> features(const Mat& fbank) const;
};

sfe::SfeModel sfe_from_checkpoint(const Checkpoint& ckpt);
mdn::MdnModel mdn_from_checkpoint(const Checkpoint& ckpt);
FeatureFrontEnd frontend_from_checkpoint(const Checkpoint& sfe_ckpt);
FeatureFrontEnd bypass_frontend(std::size_t n_mels, std::size_t pool);

// Deterministic validation split: the last ~20% of each speaker's
// utterances (at least one per speaker), independent of the seed.
struct Split {
  std::vector<std::size_t> train, val;
};
Split split_by_speaker(const data::Dataset& ds);

struct MetricRecord {
  std::size_t epoch = 0;
  std::string split;   // "train" | "val"
  std::string metric;  // "loss" | "nll" | "lmd" | "rd"
  double value = 0.0;
};
// "<epoch> <split> <metric> <value:%.17g>"
std::string format_metric(const MetricRecord& r);

// One predicted frame per pooled feature row; the reference frame is the
// utterance's first landmark frame at train time and caller-supplied at
// inference.
std::vector<Mat> predict_track(const FeatureFrontEnd& fe, const mdn::MdnModel& model,
                               const Mat& fbank, const Mat& reference_frame);

struct EvalReport {
  double lmd = 0.0;
  double rd = 0.0;
  std::size_t frames = 0;  // frames compared (common prefix of the tracks)
};

// Shared by trainer validation and the eval command. Tracks are truncated to
// the common length; poses for RD are recovered by aligning both tracks onto
// the reference track's Procrustes mean, so direct regression is scored on
// an equal footing.
EvalReport evaluate_tracks(const std::vector<Mat>& generated,
                           const std::vector<Mat>& reference);

// Speaker-verification EER over identity features of every utterance pair.
double identity_eer(const data::Dataset& ds, const FeatureFrontEnd& fe);

// ----------------------------------------------------------------- training

struct TrainResult {
  Checkpoint best;  // model parameters at the best validation epoch; empty
                    // if a resumed run never improved on the restored best
  Checkpoint last;  // model + optimizer + RNG state after the final epoch
  std::vector<MetricRecord> log;
  double best_val = 0.0;  // val loss (sfe) or val LMD (mdn) at the best epoch
  double best_rd = 0.0;   // val RD at the best epoch (mdn stage)
  std::size_t best_epoch = 0;
};

// stage=sfe ignores sfe_ckpt; stage=mdn requires it unless cfg.bypass.
// resume continues bit-exactly from a previous run's `last` checkpoint with
// an identical resolved config. stop_after > 0 interrupts the run after that
// epoch (a transient cap, deliberately not part of the config), so
// interrupted-and-resumed trajectories can be compared to uninterrupted ones.
TrainResult train(const data::Dataset& ds, const TrainConfig& cfg,
                  const Checkpoint* sfe_ckpt = nullptr, const Checkpoint* resume = nullptr,
                  std::size_t stop_after = 0);

// ----------------------------------------------------------------- ablation

struct AblationCell {
  config::KeyValues config;  // fully resolved cell config
  std::string hash;          // config hash tag
  bool ok = false;
  std::string error;
  double lmd = 0.0, rd = 0.0, eer = 0.0;
};

// Grid over mixture count, memory mode, and regression mode. The extractor
// is trained once per memory mode and shared across its cells; a failing
// cell records its error and the grid continues.
std::vector<AblationCell> run_ablation(const data::Dataset& ds, const TrainConfig& sfe_base,
                                       const TrainConfig& mdn_base,
                                       const std::vector<std::size_t>& mixtures,
                                       const std::vector<sfe::MemoryMode>& memories,
                                       const std::vector<mdn::RegressionMode>& regressions);

// One row per cell sorted by hash, followed by each cell's resolved config.
std::string ablation_report(const std::vector<AblationCell>& cells);

}  // namespace thgen::train
