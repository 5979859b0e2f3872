#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "thgen/autodiff.hpp"
#include "thgen/geometry.hpp"
#include "thgen/mat.hpp"
#include "thgen/rng.hpp"

namespace thgen::sfe {

// Standard GRU cell (z/r gates sigmoid, candidate tanh with reset-gated
// recurrent term): h' = (1-z) ⊙ n + z ⊙ h.
struct GruCell {
  ad::Tensor W_z, W_r, W_n;  // input_dim × hidden
  ad::Tensor U_z, U_r, U_n;  // hidden × hidden
  ad::Tensor b_z, b_r, b_n;  // 1 × hidden
  std::size_t input_dim = 0;
  std::size_t hidden = 0;

  static GruCell init(std::size_t input_dim, std::size_t hidden, Rng& rng);
};

// One recurrence step from precomputed input projections (rows of X·W_*).
ad::Tensor gru_step(const GruCell& cell, const ad::Tensor& xw_z, const ad::Tensor& xw_r,
                    const ad::Tensor& xw_n, const ad::Tensor& h);

// Runs the cell over all rows of x (T × input_dim). Output row t is the
// state after consuming rows 0..t (forward) or T-1..t (reverse=true).
ad::Tensor gru_run(const GruCell& cell, const ad::Tensor& x, bool reverse);

// T × 2·hidden: per-row concat of forward and backward states.
ad::Tensor bigru_encode(const GruCell& fwd, const GruCell& bwd, const ad::Tensor& x);

// Two-layer perceptron head over h_t (hidden tanh layer, linear output).
struct Addresser {
  ad::Tensor W1, b1;  // in × hidden_a, 1 × hidden_a
  ad::Tensor W2, b2;  // hidden_a × out, 1 × out

  static Addresser init(std::size_t in, std::size_t hidden_a, std::size_t out, Rng& rng);
};

ad::Tensor addresser_forward(const Addresser& a, const ad::Tensor& h_t);

// k × C slot matrix with its addressing perceptron.
struct MemoryBank {
  Addresser addr;  // logits over k slots
  ad::Tensor M;    // k × C
};

// p_t = softmax(φ(h_t)) on the k-simplex; y_hat_t = p_t · M.
std::pair<ad::Tensor, ad::Tensor> memory_read(const MemoryBank& bank, const ad::Tensor& h_t);

// Scaled-cosine similarity S = exp(w·cos + b), w kept positive by softplus.
struct SimilarityParams {
  ad::Tensor w_raw;  // softplus(w_raw) = w, initialized so w = 10
  ad::Tensor b;      // initialized -5

  static SimilarityParams init();
  ad::Tensor w() const;
};

ad::Tensor similarity(const ad::Tensor& u, const ad::Tensor& v, const SimilarityParams& sp);

// L = −(1/T) Σ_t log [ S(ŷ_t, y_t) / Σ_k S(ŷ_t, y_k) ], rows as items;
// computed in log space. Requires T ≥ 2 (at least one negative).
ad::Tensor contrastive_loss(const ad::Tensor& y_hat, const ad::Tensor& y,
                            const SimilarityParams& sp);

enum class MemoryMode { wo, w, cs };

std::string memory_mode_name(MemoryMode mode);
MemoryMode memory_mode_from_name(const std::string& name);

struct SfeConfig {
  std::size_t n_mels = 80;
  std::size_t landmark_dim = 136;  // 2L content-target input width
  std::size_t hidden = 64;         // GRU state size H
  std::size_t feat = 64;           // feature dim C
  std::size_t slots = 8;           // k, per bank
  std::size_t addr_hidden = 64;
  std::size_t pool = 4;  // fbank 100 fps → landmark 25 fps
  MemoryMode mode = MemoryMode::cs;
};

// Landmark-side encoders standing in for the paper's image encoder: the
// content target is a per-frame perceptron over aligned landmarks, the
// identity target a perceptron over sequence-pooled pose statistics.
struct TargetEncoder {
  Addresser content;   // landmark_dim → feat
  Addresser identity;  // 6 pose stats → feat
};

struct SfeModel {
  SfeConfig cfg;
  GruCell fwd, bwd;
  Addresser addr_content, addr_identity;  // → slots (w/cs) or → feat (wo)
  ad::Tensor M_content, M_identity;       // cs only
  ad::Tensor M_shared;                    // w only (read by both addressers)
  TargetEncoder target;
  SimilarityParams sim_content, sim_identity;

  static SfeModel init(const SfeConfig& cfg, Rng& rng);
  std::vector<std::pair<std::string, ad::Tensor>> parameters() const;
};

struct SfeFeatures {
  ad::Tensor content;   // T_pooled × feat
  ad::Tensor identity;  // 1 × feat
};

// Audio path: fbank rows → Bi-GRU → pool ×cfg.pool → per-frame content
// feature and sequence identity feature via the configured memory mode.
SfeFeatures sfe_forward(const SfeModel& model, const ad::Tensor& fbank);

// (mean, std) of (theta, tx, ty) over a pose track, as a 1 × 6 matrix.
Mat pose_statistics(const std::vector<geom::Pose>& poses);

struct SfeExample {
  Mat fbank;          // T_f × n_mels
  Mat aligned_flat;   // T_l × landmark_dim (p_align rows, flattened)
  Mat pose_stats;     // 1 × 6
};

// Total loss: mean per-sequence content contrastive loss (negatives over
// time) + one batch-level identity contrastive loss (negatives across
// sequences). Batch size must be ≥ 2 for the identity term.
ad::Tensor sfe_loss(const SfeModel& model, const std::vector<SfeExample>& batch);

}  // namespace thgen::sfe
