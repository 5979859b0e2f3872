#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "thgen/audio.hpp"
#include "thgen/geometry.hpp"
#include "thgen/mat.hpp"

namespace thgen::data {

struct Utterance {
  std::string id;
  std::string speaker_id;
  std::string wav_path;       // empty until written or loaded from disk
  std::string landmark_path;  // ditto
  audio::Waveform wave;
  Mat fbank;                       // T_f x n_mels
  std::vector<Mat> landmarks;      // T_l frames, 68 x 2, inter-ocular normalized
  std::vector<Mat> aligned;        // p_align per frame (against the dataset template)
  std::vector<geom::Pose> poses;   // per frame
  // Generator ground truth, for dataset diagnostics only. Models must never
  // read these: the one-to-many structure they describe is what the models
  // are being tested on recovering. Empty / zero for datasets loaded from disk.
  std::size_t mode = 0;
  std::vector<std::size_t> phone_per_frame;
};

struct LoadError {
  std::string utterance_id;
  std::string message;
};

struct Dataset {
  std::vector<Utterance> utterances;
  Mat tpl;  // mean aligned face (generalized Procrustes)
  std::vector<LoadError> errors;
};

// Generator for the one-to-many synthetic corpus: each utterance is a phone
// sequence rendered as sinusoid chords plus a per-speaker identity tone; lips
// articulate per phone, a hidden per-utterance mode adds one of
// modes_per_phone mouth-shape offsets (invisible in frame 0), and the head
// nods predictably with the phone envelope.
struct SyntheticSpec {
  std::size_t n_speakers = 4;
  std::size_t n_utterances = 16;
  std::size_t modes_per_phone = 3;
  double noise_sigma = 0.01;  // landmark coordinate noise, inter-ocular units
  std::uint64_t seed = 1;
  double head_motion = 1.0;  // scales every pose term; 0 freezes the head
  double audio_noise = 0.05;
  std::size_t frames_per_utterance = 30;  // at 25 fps
  std::size_t n_phones = 6;
  std::size_t slot_frames = 5;  // landmark frames per phone slot (0.2 s)
  // All utterances of a speaker share one phone sequence. Repeating the same
  // content under independently drawn hidden modes puts the one-to-many
  // ambiguity inside the corpus itself: no amount of memorizing audio detail
  // can resolve which mode a repeat will take.
  bool shared_phones = false;
};

// Canonical 68-point face, inter-ocular distance exactly 1, y growing down.
Mat template_face();

// Distance between the two eye centers (means of points 36-41 and 42-47).
double interocular(const Mat& frame);

// Scales a whole sequence so its mean inter-ocular distance is exactly 1.
// Applying it twice equals applying it once.
void normalize_track(std::vector<Mat>& track);

// Text track format: header line, then one line of 2L floats per frame.
void save_landmark_track(const std::string& path, const std::vector<Mat>& track);
std::vector<Mat> load_landmark_track(const std::string& path);

Dataset generate_synthetic(const SyntheticSpec& spec);

// Computes the GPA template over every frame, then per-frame decompositions.
void derive_alignment(Dataset& ds);

// Manifest: one utterance per line, tab-separated
// (id, speaker id, wav path, landmark path), paths relative to the manifest.
// Per-line failures are collected in Dataset::errors, never thrown.
Dataset load_dataset(const std::string& manifest_path);

// Writes <id>.wav, <id>.lmk and manifest.tsv under dir; updates paths.
void write_dataset(Dataset& ds, const std::string& dir);

}  // namespace thgen::data
