#include "thgen/data.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "thgen/rng.hpp"

namespace thgen::data {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kPoints = 68;
constexpr double kPi = std::numbers::pi;

void set_point(Mat& f, std::size_t i, double x, double y) {
  f(i, 0) = x;
  f(i, 1) = y;
}

}  // namespace

Mat template_face() {
  Mat f(kPoints, 2);

  // Jaw 0-16: half ellipse from right of the right eye around the chin.
  for (std::size_t i = 0; i <= 16; ++i) {
    const double a = kPi * static_cast<double>(i) / 16.0;  // 0..pi
    set_point(f, i, -0.85 * std::cos(a), -0.10 + 1.15 * std::sin(a));
  }
  // Brows 17-21 (right) and 22-26 (left): shallow arcs above the eyes.
  for (std::size_t i = 0; i < 5; ++i) {
    const double u = static_cast<double>(i) / 4.0;  // 0..1
    const double arch = -0.30 - 0.06 * std::sin(kPi * u);
    set_point(f, 17 + i, -0.78 + 0.56 * u, arch);
    set_point(f, 22 + i, 0.22 + 0.56 * u, arch);
  }
  // Nose bridge 27-30 and base 31-35.
  for (std::size_t i = 0; i < 4; ++i) set_point(f, 27 + i, 0.0, -0.05 + 0.15 * i);
  for (std::size_t i = 0; i < 5; ++i) {
    set_point(f, 31 + i, -0.12 + 0.06 * i, 0.45 - 0.02 * std::fabs(2.0 - static_cast<double>(i)));
  }
  // Eyes 36-41 (right, center -0.5,0) and 42-47 (left, center +0.5,0); corners
  // on the x-axis so each eye center is exactly the ring average.
  const double ex[6] = {-0.16, -0.07, 0.07, 0.16, 0.07, -0.07};
  const double ey[6] = {0.0, -0.055, -0.055, 0.0, 0.055, 0.055};
  for (std::size_t i = 0; i < 6; ++i) {
    set_point(f, 36 + i, -0.5 + ex[i], ey[i]);
    set_point(f, 42 + i, 0.5 + ex[i], ey[i]);
  }
  // Outer lip 48-59: ellipse ring, center (0, 0.68).
  for (std::size_t i = 0; i < 12; ++i) {
    const double a = 2.0 * kPi * static_cast<double>(i) / 12.0;
    set_point(f, 48 + i, -0.23 * std::cos(a), 0.68 + 0.10 * std::sin(a));
  }
  // Inner lip 60-67.
  for (std::size_t i = 0; i < 8; ++i) {
    const double a = 2.0 * kPi * static_cast<double>(i) / 8.0;
    set_point(f, 60 + i, -0.15 * std::cos(a), 0.68 + 0.045 * std::sin(a));
  }
  return f;
}

double interocular(const Mat& frame) {
  require(frame.rows == kPoints && frame.cols == 2, "interocular: expected a 68 x 2 frame");
  double rx = 0, ry = 0, lx = 0, ly = 0;
  for (std::size_t i = 36; i < 42; ++i) {
    rx += frame(i, 0) / 6.0;
    ry += frame(i, 1) / 6.0;
  }
  for (std::size_t i = 42; i < 48; ++i) {
    lx += frame(i, 0) / 6.0;
    ly += frame(i, 1) / 6.0;
  }
  return std::hypot(lx - rx, ly - ry);
}

void normalize_track(std::vector<Mat>& track) {
  require(!track.empty(), "normalize_track: empty track");
  double mean = 0.0;
  for (const Mat& f : track) mean += interocular(f);
  mean /= static_cast<double>(track.size());
  require(mean > 0.0, "normalize_track: zero inter-ocular distance");
  if (std::fabs(mean - 1.0) < 1e-12) return;  // already normalized
  const double inv = 1.0 / mean;
  for (Mat& f : track) {
    for (double& v : f.v) v *= inv;
  }
}

// ---- track file IO ----

void save_landmark_track(const std::string& path, const std::vector<Mat>& track) {
  require(!track.empty(), "save_landmark_track: empty track");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write landmark track " + path);
  out << "landmark-track v1 points=" << track[0].rows << " frames=" << track.size() << "\n";
  char buf[32];
  for (const Mat& f : track) {
    require(f.cols == 2 && f.rows == track[0].rows, "save_landmark_track: ragged track");
    for (std::size_t i = 0; i < f.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", f.v[i]);
      out << (i ? " " : "") << buf;
    }
    out << "\n";
  }
  if (!out) throw std::runtime_error("failed writing landmark track " + path);
}

std::vector<Mat> load_landmark_track(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open landmark track " + path);
  std::string header;
  std::getline(in, header);
  std::size_t points = 0, frames = 0;
  {
    std::istringstream hs(header);
    std::string tag, version, kv;
    hs >> tag >> version;
    if (tag != "landmark-track" || version != "v1") {
      throw std::runtime_error("not a landmark track file: " + path);
    }
    while (hs >> kv) {
      if (kv.rfind("points=", 0) == 0) points = std::stoul(kv.substr(7));
      if (kv.rfind("frames=", 0) == 0) frames = std::stoul(kv.substr(7));
    }
    if (points < 2 || frames == 0) {
      throw std::runtime_error("bad landmark track header in " + path);
    }
  }
  std::vector<Mat> track;
  track.reserve(frames);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Mat f(points, 2);
    std::istringstream ls(line);
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (!(ls >> f.v[i])) {
        throw std::runtime_error("short frame row " + std::to_string(track.size()) + " in " + path);
      }
    }
    track.push_back(std::move(f));
  }
  if (track.size() != frames) {
    throw std::runtime_error("frame count mismatch in " + path + ": header says " +
                             std::to_string(frames) + ", found " + std::to_string(track.size()));
  }
  return track;
}

// ---- synthetic generator ----

namespace {

// Open articulation: upper lip arc up, lower arc down; zero-mean in y.
struct OpenBasis {
  std::vector<std::size_t> idx;
  std::vector<double> dy;
};

const OpenBasis& open_basis() {
  static const OpenBasis b = [] {
    OpenBasis ob;
    for (std::size_t i : {49, 50, 51, 52, 53, 61, 62, 63}) {
      ob.idx.push_back(i);
      ob.dy.push_back(-1.0);
    }
    for (std::size_t i : {55, 56, 57, 58, 59, 65, 66, 67}) {
      ob.idx.push_back(i);
      ob.dy.push_back(1.0);
    }
    return ob;
  }();
  return b;
}

// Hidden-mode displacement pattern: unit radial ("pucker") direction per
// mouth point around the template mouth center. Ring symmetry makes the
// pattern sum to zero, so it never moves the mouth centroid; per-point norm
// is exactly 1, so mode offsets translate one-to-one into point distances.
struct PuckerPattern {
  std::vector<std::size_t> idx;
  std::vector<double> ux, uy;
};

const PuckerPattern& pucker_pattern() {
  static const PuckerPattern p = [] {
    PuckerPattern pp;
    const Mat base = template_face();
    const double cx = 0.0, cy = 0.68;
    for (std::size_t i = 48; i < 68; ++i) {
      const double dx = base(i, 0) - cx;
      const double dy = base(i, 1) - cy;
      const double n = std::hypot(dx, dy);
      pp.idx.push_back(i);
      pp.ux.push_back(dx / n);
      pp.uy.push_back(dy / n);
    }
    return pp;
  }();
  return p;
}

struct SpeakerParams {
  double jaw_scale, brow_dy, nose_dy;
  double theta_bias, tx_bias, ty_bias;
};

struct Articulation {
  double open, wide;
};

Articulation phone_mouth(std::size_t phone) {
  // Six phones = 3 openness levels x 2 widths; distinct shapes per phone.
  return {0.05 + 0.07 * static_cast<double>(phone % 3),
          0.02 + 0.05 * static_cast<double>(phone / 3)};
}

double phone_f1(std::size_t phone) { return 350.0 + 130.0 * static_cast<double>(phone); }
double phone_f2(std::size_t phone) { return 1100.0 + 320.0 * static_cast<double>(phone); }
double speaker_tone(std::size_t speaker) { return 3100.0 + 300.0 * static_cast<double>(speaker); }

// Phone-conditioned nod amplitude, symmetric around zero across the inventory.
double phone_nod(std::size_t phone, std::size_t n_phones) {
  const double half = static_cast<double>(n_phones - 1) / 2.0;
  return 0.25 * (static_cast<double>(phone) - half) / (half > 0.0 ? half : 1.0);
}

constexpr double kModeOffset = 0.28;      // hidden-mode pucker amplitude
constexpr double kDominantModeProb = 0.8;  // remaining mass split uniformly
constexpr double kModeNod = 0.05;          // per-mode head-pose offset

// Pucker amplitude of mode j out of m: collinear offsets 0, δ/(m−1), … δ,
// dominant mode at zero.
double mode_lambda(std::size_t mode, std::size_t m) {
  if (mode == 0 || m < 2) return 0.0;
  return kModeOffset * static_cast<double>(mode) / static_cast<double>(m - 1);
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec) {
  require(spec.n_speakers >= 1 && spec.n_speakers <= 12, "synthetic: n_speakers must be 1..12");
  require(spec.n_utterances >= 1, "synthetic: n_utterances must be >= 1");
  require(spec.modes_per_phone >= 1, "synthetic: modes_per_phone must be >= 1");
  require(spec.n_phones >= 1 && spec.n_phones <= 6, "synthetic: n_phones must be 1..6");
  require(spec.slot_frames >= 1 && spec.frames_per_utterance >= spec.slot_frames,
          "synthetic: need at least one full phone slot");
  require(spec.noise_sigma >= 0.0 && spec.audio_noise >= 0.0, "synthetic: negative noise");

  // Single stream; draw order: speaker params, then per utterance its mode,
  // phones, audio noise, landmark noise.
  Rng rng(spec.seed);

  std::vector<SpeakerParams> speakers(spec.n_speakers);
  for (auto& sp : speakers) {
    sp.jaw_scale = rng.uniform(-0.10, 0.10);
    sp.brow_dy = rng.uniform(-0.05, 0.05);
    sp.nose_dy = rng.uniform(-0.04, 0.04);
    sp.theta_bias = rng.uniform(-0.15, 0.15);
    sp.tx_bias = rng.uniform(-0.10, 0.10);
    sp.ty_bias = rng.uniform(-0.10, 0.10);
  }

  const Mat base = template_face();
  const OpenBasis& ob = open_basis();
  const PuckerPattern& pk = pucker_pattern();
  const std::size_t samples_per_frame = 640;  // 16 kHz / 25 fps
  const std::size_t slot_samples = spec.slot_frames * samples_per_frame;

  Dataset ds;
  ds.utterances.reserve(spec.n_utterances);
  // Per-speaker sequences, filled on first use when shared_phones is set.
  std::vector<std::vector<std::size_t>> speaker_phones(spec.n_speakers);

  for (std::size_t u = 0; u < spec.n_utterances; ++u) {
    const std::size_t s = u % spec.n_speakers;
    const SpeakerParams& sp = speakers[s];

    Utterance ut;
    {
      char idbuf[16];
      std::snprintf(idbuf, sizeof(idbuf), "u%04zu", u);
      ut.id = idbuf;
      std::snprintf(idbuf, sizeof(idbuf), "s%02zu", s);
      ut.speaker_id = idbuf;
    }

    // Hidden per-utterance mode: dominant with prob 0.8, the rest uniform.
    std::size_t mode = 0;
    if (spec.modes_per_phone > 1) {
      if (rng.uniform() >= kDominantModeProb) {
        mode = 1 + rng.uniform_int(spec.modes_per_phone - 1);
      }
    }
    const double lambda = mode_lambda(mode, spec.modes_per_phone);

    ut.mode = mode;

    const std::size_t n_slots = (spec.frames_per_utterance + spec.slot_frames - 1) / spec.slot_frames;
    std::vector<std::size_t> phones(n_slots);
    if (spec.shared_phones && !speaker_phones[s].empty()) {
      phones = speaker_phones[s];
    } else {
      for (auto& p : phones) p = rng.uniform_int(spec.n_phones);
      if (spec.shared_phones) speaker_phones[s] = phones;
    }
    ut.phone_per_frame.resize(spec.frames_per_utterance);
    for (std::size_t t = 0; t < spec.frames_per_utterance; ++t) {
      ut.phone_per_frame[t] = phones[std::min(t / spec.slot_frames, n_slots - 1)];
    }

    // Audio: per-slot chord + identity tone, mild slot envelope, white noise.
    const std::size_t n_samples = spec.frames_per_utterance * samples_per_frame;
    ut.wave.samples.resize(n_samples);
    for (std::size_t n = 0; n < n_samples; ++n) {
      const std::size_t slot = std::min(n / slot_samples, n_slots - 1);
      const std::size_t p = phones[slot];
      const double su = static_cast<double>(n - slot * slot_samples) /
                        static_cast<double>(slot_samples);
      const double env = 0.6 + 0.4 * std::pow(std::sin(kPi * su), 2);
      const double ts = static_cast<double>(n) / 16000.0;
      double x = env * (0.22 * std::sin(2.0 * kPi * phone_f1(p) * ts) +
                        0.22 * std::sin(2.0 * kPi * phone_f2(p) * ts)) +
                 0.18 * std::sin(2.0 * kPi * speaker_tone(s) * ts);
      x += spec.audio_noise * rng.normal();
      ut.wave.samples[n] = std::clamp(x, -1.0, 1.0);
    }
    ut.fbank = audio::fbank(ut.wave).frames;

    // Landmarks: speaker-deformed face, phone articulation, hidden-mode
    // offset (ramped in so frame 0 never reveals the mode), rigid head pose.
    Mat face = base;
    for (std::size_t i = 0; i <= 16; ++i) face(i, 0) *= 1.0 + sp.jaw_scale;
    for (std::size_t i = 17; i <= 26; ++i) face(i, 1) += sp.brow_dy;
    for (std::size_t i = 27; i <= 35; ++i) face(i, 1) += sp.nose_dy;

    ut.landmarks.reserve(spec.frames_per_utterance);
    for (std::size_t t = 0; t < spec.frames_per_utterance; ++t) {
      const std::size_t slot = std::min(t / spec.slot_frames, n_slots - 1);
      const std::size_t p = phones[slot];
      const Articulation art = phone_mouth(p);
      // Frame 0 is the reference frame convention-wide, so it stays
      // mode-free; the conditional one-to-many structure lives in t >= 1.
      const double gate = (t == 0) ? 0.0 : 1.0;

      Mat frame = face;
      for (std::size_t k = 0; k < ob.idx.size(); ++k) {
        frame(ob.idx[k], 1) += art.open * ob.dy[k];
      }
      // Width articulation on the lip corners, zero-mean in x.
      frame(48, 0) -= art.wide;
      frame(54, 0) += art.wide;
      frame(60, 0) -= art.wide;
      frame(64, 0) += art.wide;
      for (std::size_t k = 0; k < pk.idx.size(); ++k) {
        frame(pk.idx[k], 0) += lambda * gate * pk.ux[k];
        frame(pk.idx[k], 1) += lambda * gate * pk.uy[k];
      }

      const double su = (static_cast<double>(t - slot * spec.slot_frames) + 0.5) /
                        static_cast<double>(spec.slot_frames);
      const double nod = phone_nod(p, spec.n_phones) * std::pow(std::sin(kPi * su), 2);
      geom::Pose pose;
      pose.theta = spec.head_motion *
                   (sp.theta_bias + nod + kModeNod * static_cast<double>(mode) * gate);
      pose.tx = spec.head_motion * (sp.tx_bias + 0.15 * nod);
      pose.ty = spec.head_motion * sp.ty_bias;

      Mat placed = geom::reconstruct(frame, pose);
      for (double& v : placed.v) v += spec.noise_sigma * rng.normal();
      ut.landmarks.push_back(std::move(placed));
    }
    ds.utterances.push_back(std::move(ut));
  }

  derive_alignment(ds);
  return ds;
}

void derive_alignment(Dataset& ds) {
  require(!ds.utterances.empty(), "derive_alignment: empty dataset");
  std::vector<Mat> all;
  for (const auto& ut : ds.utterances) {
    for (const Mat& f : ut.landmarks) all.push_back(f);
  }
  ds.tpl = geom::mean_template(all);
  for (auto& ut : ds.utterances) {
    ut.aligned.clear();
    ut.poses.clear();
    ut.aligned.reserve(ut.landmarks.size());
    ut.poses.reserve(ut.landmarks.size());
    for (const Mat& f : ut.landmarks) {
      auto d = geom::align(f, ds.tpl);
      ut.aligned.push_back(std::move(d.p_align));
      ut.poses.push_back(d.pose);
    }
  }
}

// ---- manifest IO ----

Dataset load_dataset(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open manifest " + manifest_path);
  const fs::path root = fs::path(manifest_path).parent_path();

  Dataset ds;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string id, speaker, wav_rel, lmk_rel;
    if (!(std::getline(ls, id, '\t') && std::getline(ls, speaker, '\t') &&
          std::getline(ls, wav_rel, '\t') && std::getline(ls, lmk_rel))) {
      ds.errors.push_back({"line " + std::to_string(line_no), "malformed manifest record"});
      continue;
    }
    try {
      Utterance ut;
      ut.id = id;
      ut.speaker_id = speaker;
      ut.wav_path = (root / wav_rel).string();
      ut.landmark_path = (root / lmk_rel).string();
      ut.wave = audio::load_wav(ut.wav_path);
      ut.fbank = audio::fbank(ut.wave).frames;
      ut.landmarks = load_landmark_track(ut.landmark_path);
      for (const Mat& f : ut.landmarks) {
        require(f.rows == kPoints, "utterance " + id + ": expected 68-point frames");
      }
      const long t_l = static_cast<long>(ut.landmarks.size());
      const long t_f = static_cast<long>(ut.fbank.rows);
      if (std::labs(4 * t_l - t_f) > 3) {
        throw std::runtime_error("rate mismatch: " + std::to_string(t_l) + " landmark frames vs " +
                                 std::to_string(t_f) + " fbank frames");
      }
      normalize_track(ut.landmarks);
      ds.utterances.push_back(std::move(ut));
    } catch (const std::exception& e) {
      ds.errors.push_back({id, e.what()});
    }
  }
  if (!ds.utterances.empty()) derive_alignment(ds);
  return ds;
}

void write_dataset(Dataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  const fs::path root(dir);
  std::ofstream manifest(root / "manifest.tsv");
  if (!manifest) throw std::runtime_error("cannot write manifest under " + dir);
  for (auto& ut : ds.utterances) {
    const std::string wav_rel = ut.id + ".wav";
    const std::string lmk_rel = ut.id + ".lmk";
    audio::save_wav((root / wav_rel).string(), ut.wave);
    save_landmark_track((root / lmk_rel).string(), ut.landmarks);
    ut.wav_path = (root / wav_rel).string();
    ut.landmark_path = (root / lmk_rel).string();
    manifest << ut.id << '\t' << ut.speaker_id << '\t' << wav_rel << '\t' << lmk_rel << '\n';
  }
  if (!manifest) throw std::runtime_error("failed writing manifest under " + dir);
}

}  // namespace thgen::data
