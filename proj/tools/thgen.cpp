// thgen: command-line surface for the landmark-generation pipeline.
//
// Subcommands: synth-data, train-sfe, train-mdn, infer, eval, ablate, render.
// Exit codes: 0 success, 2 usage / invalid input, 1 runtime failure.
//
// Config resolution for the training commands: defaults < --config file <
// explicit flags. The fully resolved config is embedded in every checkpoint
// and ablation report by the trainer itself.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "thgen/audio.hpp"
#include "thgen/config.hpp"
#include "thgen/data.hpp"
#include "thgen/mdn.hpp"
#include "thgen/metrics.hpp"
#include "thgen/render.hpp"
#include "thgen/sfe.hpp"
#include "thgen/trainer.hpp"

namespace fs = std::filesystem;
using namespace thgen;

namespace {

bool verbose() {
  const char* v = std::getenv("THGEN_VERBOSE");
  return v != nullptr && *v != '\0' && std::string(v) != "0";
}

void chat(const std::string& line) {
  if (verbose()) std::cerr << "[thgen] " << line << "\n";
}

data::Dataset load_corpus(const std::string& manifest) {
  data::Dataset ds = data::load_dataset(manifest);
  for (const auto& e : ds.errors)
    std::cerr << "warning: skipped " << e.utterance_id << ": " << e.message << "\n";
  if (ds.utterances.empty())
    throw std::runtime_error("no usable utterances in " + manifest);
  return ds;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("short write to " + path);
}

// Emits the metric log to `path`, or stdout when the path is empty.
void emit_log(const std::string& path, const std::vector<train::MetricRecord>& log) {
  std::string text;
  for (const auto& r : log) {
    text += train::format_metric(r);
    text += '\n';
  }
  if (path.empty()) {
    std::cout << text;
  } else {
    write_text(path, text);
  }
}

// Shared state for train-sfe / train-mdn flag handling. Every option is
// registered against this struct; only flags the user actually passed are
// copied into the key-value config, so file values survive unless overridden.
struct TrainArgs {
  std::string data;
  std::string config_file;
  std::string best_path;
  std::string last_path;
  std::string log_path;
  std::string resume_path;
  std::size_t stop_after = 0;

  std::size_t epochs = 200, batch = 4, warmup = 0;
  std::uint64_t seed = 1;
  double lr = 1e-3;
  std::size_t sfe_hidden = 64, sfe_feat = 64, sfe_slots = 8, sfe_addr_hidden = 64,
              sfe_pool = 4;
  std::string memory = "cs";
  std::size_t mixtures = 3, context = 2, mdn_hidden = 128;
  std::string regression = "f_tt";
  bool finetune = false, bypass = false;
  std::string sfe_ckpt_path;
};

void add_common_train_flags(CLI::App* cmd, TrainArgs& a) {
  cmd->add_option("--data", a.data, "dataset manifest (manifest.tsv)")->required();
  cmd->add_option("--config", a.config_file, "key-value config file; flags override it");
  cmd->add_option("--epochs", a.epochs, "training epochs")->capture_default_str();
  cmd->add_option("--batch", a.batch, "utterances per batch")->capture_default_str();
  cmd->add_option("--seed", a.seed, "RNG seed for the run")->capture_default_str();
  cmd->add_option("--lr", a.lr, "Adam learning rate")->capture_default_str();
  cmd->add_option("--best", a.best_path, "path for the best-validation checkpoint")
      ->capture_default_str();
  cmd->add_option("--last", a.last_path, "path for the final-state checkpoint")
      ->capture_default_str();
  cmd->add_option("--log", a.log_path,
                  "metric log path (line-delimited records); empty prints to stdout")
      ->capture_default_str();
  cmd->add_option("--resume", a.resume_path,
                  "resume from a previous run's final-state checkpoint");
  cmd->add_option("--stop-after", a.stop_after,
                  "interrupt after this epoch (0 runs to completion)")
      ->capture_default_str();
}

// Copies only user-passed flags into kv (so the config file keeps authority
// over untouched keys), then builds the validated TrainConfig.
train::TrainConfig resolve_config(CLI::App* cmd, const TrainArgs& a, const std::string& stage) {
  config::KeyValues kv;
  if (!a.config_file.empty()) kv = config::load_file(a.config_file);
  auto passed = [&](const std::string& flag) { return cmd->count(flag) > 0; };
  if (passed("--epochs")) kv["epochs"] = std::to_string(a.epochs);
  if (passed("--batch")) kv["batch"] = std::to_string(a.batch);
  if (passed("--seed")) kv["seed"] = std::to_string(a.seed);
  if (passed("--lr")) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", a.lr);
    kv["lr"] = buf;
  }
  if (stage == "sfe") {
    if (passed("--hidden")) kv["sfe.hidden"] = std::to_string(a.sfe_hidden);
    if (passed("--feat")) kv["sfe.feat"] = std::to_string(a.sfe_feat);
    if (passed("--slots")) kv["sfe.slots"] = std::to_string(a.sfe_slots);
    if (passed("--addr-hidden")) kv["sfe.addr_hidden"] = std::to_string(a.sfe_addr_hidden);
    if (passed("--pool")) kv["sfe.pool"] = std::to_string(a.sfe_pool);
    if (passed("--memory")) kv["sfe.memory"] = a.memory;
  } else {
    if (passed("--pool")) kv["sfe.pool"] = std::to_string(a.sfe_pool);
    if (passed("--mixtures")) kv["mdn.mixtures"] = std::to_string(a.mixtures);
    if (passed("--context")) kv["mdn.context"] = std::to_string(a.context);
    if (passed("--hidden")) kv["mdn.hidden"] = std::to_string(a.mdn_hidden);
    if (passed("--regression")) kv["mdn.regression"] = a.regression;
    if (passed("--warmup")) kv["mdn.warmup"] = std::to_string(a.warmup);
    if (passed("--finetune")) kv["mdn.finetune"] = a.finetune ? "true" : "false";
    if (passed("--bypass")) kv["mdn.bypass"] = a.bypass ? "true" : "false";
  }
  kv["stage"] = stage;
  return train::TrainConfig::from_keyvalues(kv);
}

int run_training(CLI::App* cmd, const TrainArgs& a, const std::string& stage) {
  const train::TrainConfig cfg = resolve_config(cmd, a, stage);
  const data::Dataset ds = load_corpus(a.data);
  chat("resolved config:\n" + config::canonical_text(cfg.to_keyvalues()));

  train::Checkpoint sfe_ckpt, resume;
  const train::Checkpoint* sfe_ptr = nullptr;
  const train::Checkpoint* resume_ptr = nullptr;
  if (stage == "mdn" && !a.sfe_ckpt_path.empty()) {
    sfe_ckpt = train::load_checkpoint(a.sfe_ckpt_path);
    sfe_ptr = &sfe_ckpt;
  }
  if (stage == "mdn" && !cfg.bypass && sfe_ptr == nullptr)
    throw std::invalid_argument("train-mdn: --sfe checkpoint required unless mdn.bypass is set");
  if (!a.resume_path.empty()) {
    resume = train::load_checkpoint(a.resume_path);
    resume_ptr = &resume;
  }

  const train::TrainResult res = train::train(ds, cfg, sfe_ptr, resume_ptr, a.stop_after);
  if (!res.best.empty()) train::save_checkpoint(a.best_path, res.best);
  train::save_checkpoint(a.last_path, res.last);
  emit_log(a.log_path, res.log);
  std::printf("best epoch %zu val %s %.17g\n", res.best_epoch,
              stage == "mdn" ? "lmd" : "loss", res.best_val);
  if (!res.best.empty()) std::printf("best checkpoint: %s\n", a.best_path.c_str());
  std::printf("last checkpoint: %s\n", a.last_path.c_str());
  return 0;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Builds the feature front end an MDN checkpoint was trained against: its own
// embedded extractor when fine-tuned, mean-pooled fbank when bypassed, and the
// supplied extractor checkpoint otherwise.
train::FeatureFrontEnd frontend_for(const train::Checkpoint& mdn_ckpt,
                                    const std::string& sfe_path) {
  const config::KeyValues kv = mdn_ckpt.config();
  if (config::get_bool(kv, "mdn.finetune", false)) return train::frontend_from_checkpoint(mdn_ckpt);
  if (config::get_bool(kv, "mdn.bypass", false)) {
    return train::bypass_frontend(config::get_size(kv, "data.n_mels", 80),
                                  config::get_size(kv, "sfe.pool", 4));
  }
  if (sfe_path.empty())
    throw std::invalid_argument("infer: --sfe checkpoint required by this regressor");
  return train::frontend_from_checkpoint(train::load_checkpoint(sfe_path));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"talking-head landmark generation pipeline"};
  app.require_subcommand(1);

  // ---- synth-data ----
  data::SyntheticSpec spec;
  std::string synth_out;
  CLI::App* synth = app.add_subcommand("synth-data", "generate a synthetic one-to-many corpus");
  synth->add_option("--out", synth_out, "output directory (manifest.tsv, wav, lmk)")->required();
  synth->add_option("--speakers", spec.n_speakers, "number of speakers")->capture_default_str();
  synth->add_option("--utterances", spec.n_utterances, "total utterances")->capture_default_str();
  synth->add_option("--modes", spec.modes_per_phone, "hidden articulation modes per phone")
      ->capture_default_str();
  synth->add_option("--noise", spec.noise_sigma, "landmark noise, inter-ocular units")
      ->capture_default_str();
  synth->add_option("--audio-noise", spec.audio_noise, "white noise mixed into the audio")
      ->capture_default_str();
  synth->add_option("--head-motion", spec.head_motion, "head pose scale; 0 freezes the head")
      ->capture_default_str();
  synth->add_option("--frames", spec.frames_per_utterance, "landmark frames per utterance")
      ->capture_default_str();
  synth->add_option("--phones", spec.n_phones, "phone inventory size (1..6)")
      ->capture_default_str();
  synth->add_option("--slot-frames", spec.slot_frames, "landmark frames per phone slot")
      ->capture_default_str();
  synth->add_flag("--shared-phones", spec.shared_phones,
                  "all utterances of a speaker repeat one phone sequence")
      ->capture_default_str();
  synth->add_option("--seed", spec.seed, "generator seed")->capture_default_str();

  // ---- train-sfe ----
  TrainArgs sfe_args;
  sfe_args.best_path = "sfe_best.ckpt";
  sfe_args.last_path = "sfe_last.ckpt";
  CLI::App* tsfe = app.add_subcommand("train-sfe", "train the speech feature extractor");
  add_common_train_flags(tsfe, sfe_args);
  tsfe->add_option("--hidden", sfe_args.sfe_hidden, "GRU hidden size")->capture_default_str();
  tsfe->add_option("--feat", sfe_args.sfe_feat, "feature width")->capture_default_str();
  tsfe->add_option("--slots", sfe_args.sfe_slots, "memory slots per bank")->capture_default_str();
  tsfe->add_option("--addr-hidden", sfe_args.sfe_addr_hidden, "addresser hidden size")
      ->capture_default_str();
  tsfe->add_option("--pool", sfe_args.sfe_pool, "temporal pooling factor")->capture_default_str();
  tsfe->add_option("--memory", sfe_args.memory, "memory mode")
      ->check(CLI::IsMember({"wo", "w", "cs"}))
      ->capture_default_str();

  // ---- train-mdn ----
  TrainArgs mdn_args;
  mdn_args.best_path = "mdn_best.ckpt";
  mdn_args.last_path = "mdn_last.ckpt";
  CLI::App* tmdn = app.add_subcommand("train-mdn", "train the mixture-density landmark regressor");
  add_common_train_flags(tmdn, mdn_args);
  tmdn->add_option("--sfe", mdn_args.sfe_ckpt_path, "extractor checkpoint supplying features");
  tmdn->add_option("--mixtures", mdn_args.mixtures, "mixture components M")->capture_default_str();
  tmdn->add_option("--context", mdn_args.context, "pooled context frames per side")
      ->capture_default_str();
  tmdn->add_option("--hidden", mdn_args.mdn_hidden, "trunk hidden size")->capture_default_str();
  tmdn->add_option("--pool", mdn_args.sfe_pool, "temporal pooling factor (bypass features)")
      ->capture_default_str();
  tmdn->add_option("--regression", mdn_args.regression, "regression mode")
      ->check(CLI::IsMember({"f_tt", "f_a"}))
      ->capture_default_str();
  tmdn->add_option("--warmup", mdn_args.warmup, "mean-regression warm-up epochs before mixture NLL")
      ->capture_default_str();
  tmdn->add_flag("--finetune", mdn_args.finetune, "fine-tune the extractor during this stage")
      ->capture_default_str();
  tmdn->add_flag("--bypass", mdn_args.bypass, "train on mean-pooled fbank instead of the extractor")
      ->capture_default_str();

  // ---- infer ----
  std::string inf_wav, inf_ref, inf_mdn, inf_sfe, inf_out;
  CLI::App* infer = app.add_subcommand("infer", "generate a landmark track for a wav");
  infer->add_option("--wav", inf_wav, "input 16 kHz wav")->required();
  infer->add_option("--reference", inf_ref, "landmark track whose first frame is the reference")
      ->required();
  infer->add_option("--mdn", inf_mdn, "regressor checkpoint")->required();
  infer->add_option("--sfe", inf_sfe, "extractor checkpoint (when the regressor needs one)");
  infer->add_option("--out", inf_out, "output landmark track path")->required();

  // ---- eval ----
  std::string ev_gen, ev_ref, ev_out;
  std::size_t ev_size = 256;
  CLI::App* eval = app.add_subcommand("eval", "score a generated track against a reference");
  eval->add_option("--generated", ev_gen, "generated landmark track")->required();
  eval->add_option("--reference", ev_ref, "ground-truth landmark track")->required();
  eval->add_option("--out", ev_out, "metric report path; empty prints to stdout")
      ->capture_default_str();
  eval->add_option("--size", ev_size, "canvas size for the wireframe image metrics")
      ->capture_default_str();

  // ---- ablate ----
  TrainArgs ab_args;
  ab_args.best_path = "";
  ab_args.last_path = "";
  std::string ab_mixtures = "1,2,3,5,8", ab_memories = "cs", ab_regressions = "f_tt";
  std::string ab_out;
  std::size_t ab_sfe_epochs = 0, ab_mdn_epochs = 0;
  CLI::App* ablate = app.add_subcommand("ablate", "run the ablation grid and print the report");
  ablate->add_option("--data", ab_args.data, "dataset manifest (manifest.tsv)")->required();
  ablate->add_option("--config", ab_args.config_file, "key-value config file; flags override it");
  ablate->add_option("--epochs", ab_args.epochs, "epochs for both stages")->capture_default_str();
  ablate->add_option("--sfe-epochs", ab_sfe_epochs, "override epochs for the extractor stage (0 keeps --epochs)")
      ->capture_default_str();
  ablate->add_option("--mdn-epochs", ab_mdn_epochs, "override epochs for the regressor stage (0 keeps --epochs)")
      ->capture_default_str();
  ablate->add_option("--batch", ab_args.batch, "utterances per batch")->capture_default_str();
  ablate->add_option("--seed", ab_args.seed, "RNG seed for every cell")->capture_default_str();
  ablate->add_option("--lr", ab_args.lr, "Adam learning rate")->capture_default_str();
  ablate->add_option("--warmup", ab_args.warmup, "mean-regression warm-up epochs before mixture NLL")
      ->capture_default_str();
  ablate->add_option("--mixtures", ab_mixtures, "comma-separated mixture counts")
      ->capture_default_str();
  ablate->add_option("--memory", ab_memories, "comma-separated memory modes (wo,w,cs)")
      ->capture_default_str();
  ablate->add_option("--regression", ab_regressions, "comma-separated regression modes (f_tt,f_a)")
      ->capture_default_str();
  ablate->add_flag("--bypass", ab_args.bypass, "regress on mean-pooled fbank (skips the extractor)")
      ->capture_default_str();
  ablate->add_option("--out", ab_out, "report path; empty prints to stdout")->capture_default_str();

  // ---- render ----
  std::string rd_track, rd_dir, rd_prefix = "frame";
  std::size_t rd_size = 256;
  double rd_stroke = 1.0;
  long long rd_frame = -1;
  CLI::App* render = app.add_subcommand("render", "rasterize a landmark track to PGM images");
  render->add_option("--track", rd_track, "landmark track to draw")->required();
  render->add_option("--out-dir", rd_dir, "directory for numbered PGM files")->required();
  render->add_option("--size", rd_size, "canvas width and height")->capture_default_str();
  render->add_option("--stroke", rd_stroke, "stroke value in [0,1]")->capture_default_str();
  render->add_option("--frame", rd_frame, "render only this frame index (-1 renders all)")
      ->capture_default_str();
  render->add_option("--prefix", rd_prefix, "output filename prefix")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) {
      data::Dataset ds = data::generate_synthetic(spec);
      fs::create_directories(synth_out);
      data::write_dataset(ds, synth_out);
      std::printf("wrote %zu utterances (%zu speakers) to %s\n", ds.utterances.size(),
                  spec.n_speakers, synth_out.c_str());
    } else if (tsfe->parsed()) {
      return run_training(tsfe, sfe_args, "sfe");
    } else if (tmdn->parsed()) {
      return run_training(tmdn, mdn_args, "mdn");
    } else if (infer->parsed()) {
      const audio::Waveform wave = audio::load_wav(inf_wav);
      const Mat fbank = audio::fbank(wave).frames;
      const std::vector<Mat> ref_track = data::load_landmark_track(inf_ref);
      if (ref_track.empty()) throw std::invalid_argument("infer: empty reference track");
      const train::Checkpoint ckpt = train::load_checkpoint(inf_mdn);
      const train::FeatureFrontEnd fe = frontend_for(ckpt, inf_sfe);
      const mdn::MdnModel model = train::mdn_from_checkpoint(ckpt);
      const std::vector<Mat> track = train::predict_track(fe, model, fbank, ref_track[0]);
      data::save_landmark_track(inf_out, track);
      std::printf("wrote %zu frames to %s\n", track.size(), inf_out.c_str());
    } else if (eval->parsed()) {
      const std::vector<Mat> gen = data::load_landmark_track(ev_gen);
      const std::vector<Mat> ref = data::load_landmark_track(ev_ref);
      const train::EvalReport er = train::evaluate_tracks(gen, ref);
      render::RenderSpec rs;
      rs.width = ev_size;
      rs.height = ev_size;
      double ssim_sum = 0.0, psnr_sum = 0.0;
      for (std::size_t t = 0; t < er.frames; ++t) {
        const Mat a = render::rasterize(gen[t], rs);
        const Mat b = render::rasterize(ref[t], rs);
        ssim_sum += metrics::ssim(a, b);
        psnr_sum += metrics::psnr(a, b);
      }
      char buf[256];
      std::string report;
      std::snprintf(buf, sizeof buf, "frames %zu\n", er.frames);
      report += buf;
      std::snprintf(buf, sizeof buf, "lmd %.17g\n", er.lmd);
      report += buf;
      std::snprintf(buf, sizeof buf, "rd %.17g\n", er.rd);
      report += buf;
      std::snprintf(buf, sizeof buf, "wireframe-ssim %.17g\n",
                    ssim_sum / static_cast<double>(er.frames));
      report += buf;
      std::snprintf(buf, sizeof buf, "wireframe-psnr %.17g\n",
                    psnr_sum / static_cast<double>(er.frames));
      report += buf;
      if (ev_out.empty()) {
        std::cout << report;
      } else {
        write_text(ev_out, report);
        std::printf("wrote metric report to %s\n", ev_out.c_str());
      }
    } else if (ablate->parsed()) {
      const data::Dataset ds = load_corpus(ab_args.data);
      config::KeyValues kv;
      if (!ab_args.config_file.empty()) kv = config::load_file(ab_args.config_file);
      auto passed = [&](const std::string& f) { return ablate->count(f) > 0; };
      if (passed("--epochs")) kv["epochs"] = std::to_string(ab_args.epochs);
      if (passed("--batch")) kv["batch"] = std::to_string(ab_args.batch);
      if (passed("--seed")) kv["seed"] = std::to_string(ab_args.seed);
      if (passed("--lr")) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", ab_args.lr);
        kv["lr"] = buf;
      }
      if (passed("--warmup")) kv["mdn.warmup"] = std::to_string(ab_args.warmup);
      if (passed("--bypass")) kv["mdn.bypass"] = ab_args.bypass ? "true" : "false";
      kv["stage"] = "sfe";
      train::TrainConfig sfe_base = train::TrainConfig::from_keyvalues(kv);
      kv["stage"] = "mdn";
      train::TrainConfig mdn_base = train::TrainConfig::from_keyvalues(kv);
      if (ab_sfe_epochs > 0) sfe_base.epochs = ab_sfe_epochs;
      if (ab_mdn_epochs > 0) mdn_base.epochs = ab_mdn_epochs;

      std::vector<std::size_t> mixtures;
      for (const auto& s : split_csv(ab_mixtures)) mixtures.push_back(std::stoul(s));
      std::vector<sfe::MemoryMode> memories;
      for (const auto& s : split_csv(ab_memories)) memories.push_back(sfe::memory_mode_from_name(s));
      std::vector<mdn::RegressionMode> regressions;
      for (const auto& s : split_csv(ab_regressions))
        regressions.push_back(mdn::regression_mode_from_name(s));

      const auto cells = train::run_ablation(ds, sfe_base, mdn_base, mixtures, memories, regressions);
      const std::string report = train::ablation_report(cells);
      if (ab_out.empty()) {
        std::cout << report;
      } else {
        write_text(ab_out, report);
        std::printf("wrote ablation report to %s\n", ab_out.c_str());
      }
    } else if (render->parsed()) {
      const std::vector<Mat> track = data::load_landmark_track(rd_track);
      if (track.empty()) throw std::invalid_argument("render: empty track");
      render::RenderSpec rs;
      rs.width = rd_size;
      rs.height = rd_size;
      rs.stroke = rd_stroke;
      fs::create_directories(rd_dir);
      std::size_t first = 0, last = track.size();
      if (rd_frame >= 0) {
        if (static_cast<std::size_t>(rd_frame) >= track.size())
          throw std::invalid_argument("render: frame index out of range");
        first = static_cast<std::size_t>(rd_frame);
        last = first + 1;
      }
      std::size_t written = 0;
      for (std::size_t t = first; t < last; ++t) {
        char name[64];
        std::snprintf(name, sizeof name, "%s_%05zu.pgm", rd_prefix.c_str(), t);
        render::save_pgm((fs::path(rd_dir) / name).string(), render::rasterize(track[t], rs));
        ++written;
      }
      std::printf("wrote %zu frames to %s\n", written, rd_dir.c_str());
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
