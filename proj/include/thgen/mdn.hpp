#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "thgen/autodiff.hpp"
#include "thgen/geometry.hpp"
#include "thgen/mat.hpp"
#include "thgen/rng.hpp"

namespace thgen::mdn {

// How the regressor parameterizes a landmark frame.
//   affine: mean vectors decompose as [p_align (2L), theta (1), t (2)];
//           the frame is rebuilt with geom::reconstruct. Default mode.
//   direct: mean vectors are the 2L frame coordinates themselves (ablation).
enum class RegressionMode { affine, direct };

std::string regression_mode_name(RegressionMode mode);
RegressionMode regression_mode_from_name(const std::string& name);

// Lower bound added to the softplus-parameterized standard deviations.
inline constexpr double kSigmaFloor = 1e-3;

// Magnitude of the per-component mean-head bias offsets at initialization
// (signs vary per component, magnitude never does). Small on the output
// scale so the components start interchangeable; see MdnModel::init.
inline constexpr double kMuJitter = 0.02;

// Initial per-dimension sigma. Moderate on the output scale: with the wide
// softplus(0) default the responsibilities barely react to residual
// structure and tied components take thousands of steps to separate.
inline constexpr double kSigmaInit = 0.2;

struct MdnConfig {
  std::size_t speech_dim = 0;      // content context window + identity feature
  std::size_t ref_dim = 0;         // flattened reference landmark frame (2L)
  std::size_t hidden = 128;        // width of the two tanh trunk layers
  std::size_t mixtures = 3;        // M, 1..8
  std::size_t out_dim = 0;         // 2L+3 (affine) or free-form (direct)
  std::size_t context_frames = 2;  // +/- content rows per input window
  RegressionMode mode = RegressionMode::affine;

  std::size_t in_dim() const { return speech_dim + ref_dim; }
  void validate() const;
};

// Convenience constructor for the landmark task: the speech feature is the
// content feature over a (2·context_frames + 1)-frame window (edge rows
// replicated at sequence boundaries) concatenated with the identity feature.
MdnConfig make_landmark_config(std::size_t n_points, std::size_t content_dim,
                               std::size_t identity_dim, std::size_t context_frames,
                               std::size_t hidden, std::size_t mixtures, RegressionMode mode);

// Perceptron: input -> two tanh layers -> three linear heads (component
// logits, means, raw sigmas). Heads are randomly initialized so mixture
// components start distinct; identical components receive identical
// gradients and would never separate.
struct MdnModel {
  MdnConfig cfg;
  ad::Tensor W1, b1;  // in × hidden
  ad::Tensor W2, b2;  // hidden × hidden
  ad::Tensor Wa, ba;  // hidden × M
  ad::Tensor Wm, bm;  // hidden × M·out_dim
  ad::Tensor Ws, bs;  // hidden × M·out_dim

  static MdnModel init(const MdnConfig& cfg, Rng& rng);
  std::vector<std::pair<std::string, ad::Tensor>> parameters();
};

// Mixture for a single frame.
struct MixtureParams {
  ad::Tensor alpha;  // {1, M}, simplex
  ad::Tensor mu;     // {M, out_dim}
  ad::Tensor sigma;  // {M, out_dim}, >= kSigmaFloor

  std::size_t mixtures() const { return alpha.cols(); }
  std::size_t out_dim() const { return mu.cols(); }
};

// Mixtures for N frames at once, heads kept flat for batched training.
struct MixtureBatch {
  ad::Tensor alpha;  // {N, M}
  ad::Tensor mu;     // {N, M·out_dim}
  ad::Tensor sigma;  // {N, M·out_dim}
};

// One input row per frame: [content window, identity, reference]. Content
// rows outside [0, T) are clamped to the nearest valid row. Builds on tensor
// ops so gradients can flow back into the feature extractor.
ad::Tensor mdn_input_rows(const ad::Tensor& content, const ad::Tensor& identity,
                          const ad::Tensor& reference, std::size_t frames,
                          std::size_t context_frames);

MixtureBatch mdn_forward_batch(const MdnModel& model, const ad::Tensor& inputs);

// Single-frame forward. Throws std::invalid_argument on dimension mismatch.
MixtureParams mdn_forward(const MdnModel& model, const std::vector<double>& speech_feat,
                          const std::vector<double>& ref_feat);

// Diagonal-Gaussian mixture negative log likelihood, evaluated with
// log-sum-exp over per-component log densities.
ad::Tensor mdn_nll(const MixtureParams& params, const std::vector<double>& target);

// Mean NLL over the rows of `targets` (N × out_dim).
ad::Tensor mdn_nll_batch(const MixtureBatch& batch, const Mat& targets);

// Row-major [x0, y0, x1, y1, ...] flattening shared by targets, reference
// features, and mean-vector splitting.
std::vector<double> flatten_frame(const Mat& frame);
Mat unflatten_frame(const std::vector<double>& flat);

struct InferResult {
  Mat p_align;     // L × 2 aligned points (affine) or the frame itself (direct)
  geom::Pose pose; // identity pose in direct mode
};

// Picks the component with the largest mixing coefficient (ties -> lowest
// index) and splits its mean. theta is wrapped into (-pi, pi].
InferResult mdn_infer_max(const MixtureParams& params, RegressionMode mode);

// Splits the alpha-weighted mean of the component means instead.
InferResult mdn_infer_mixture(const MixtureParams& params, RegressionMode mode);

// reconstruct(p_align, pose) in affine mode, passthrough in direct mode.
Mat assemble_frame(const InferResult& result, RegressionMode mode);

// forward -> infer_max -> assemble, using the flattened reference frame as
// the model's reference feature.
Mat predict_frame(const MdnModel& model, const std::vector<double>& speech_feat,
                  const Mat& ref_landmarks);

}  // namespace thgen::mdn
