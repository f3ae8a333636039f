// Pipeline orchestration behind the CLI: model profiles, the experiment
// config schema (unknown or inconsistent keys are rejected with file:line
// references), run-directory layout, encoder checkpoints, and the stages
// synth -> tile -> pretrain -> embed -> train-mil -> evaluate / survival /
// ihc-reduce / heatmap, plus run_experiment chaining them end to end.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "bright/checkpoint.hpp"
#include "bright/config.hpp"
#include "bright/csv.hpp"
#include "bright/embed.hpp"
#include "bright/heatmap.hpp"
#include "bright/lora.hpp"
#include "bright/manifest.hpp"
#include "bright/metrics.hpp"
#include "bright/mil.hpp"
#include "bright/splits.hpp"
#include "bright/ssl.hpp"
#include "bright/survival.hpp"
#include "bright/synth.hpp"
#include "bright/tiling.hpp"
#include "bright/vit.hpp"

namespace bright {

using StageLog = std::function<void(const std::string&)>;

inline void stage_note(const StageLog& log, const std::string& msg) {
  if (log) log(msg);
}

// Independent per-stage seed stream derived from the master seed.
inline uint64_t stage_seed(uint64_t master, std::string_view label) {
  return Rng(master).derive(label).seed();
}

// ---------------------------------------------------------------------------
// Profiles
// ---------------------------------------------------------------------------

// desk: runs end to end on a laptop-class CPU. full: the production-scale
// architecture (1280-dim, 32 blocks, 14-px patches on 224-px tiles); used
// for configuration audits, not for training in this repository.
struct Profile {
  std::string name;
  ViTConfig vit;
  int default_slide_px = 0;
  LoraConfig lora;
  SslConfig ssl;
  MilConfig mil;
};

inline Profile desk_profile() {
  Profile p;
  p.name = "desk";
  p.vit = ViTConfig{};  // 64-px tiles, 8-px patches, dim 128, 4 blocks
  p.default_slide_px = 256;
  return p;
}

inline Profile full_profile() {
  Profile p;
  p.name = "full";
  p.vit = ViTConfig{224, 14, 1280, 32, 16, 4};
  p.default_slide_px = 896;
  return p;
}

inline Profile profile_by_name(const std::string& name) {
  if (name == "desk") return desk_profile();
  if (name == "full") return full_profile();
  throw ConfigError("unknown profile '" + name + "' (expected desk or full)");
}

// ---------------------------------------------------------------------------
// Task specification
// ---------------------------------------------------------------------------

enum class TaskKind { binary, multiclass, survival };

inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "binary") return TaskKind::binary;
  if (s == "multiclass") return TaskKind::multiclass;
  if (s == "survival") return TaskKind::survival;
  throw ConfigError("unknown task kind '" + s + "' (expected binary, multiclass or survival)");
}

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::binary: return "binary";
    case TaskKind::multiclass: return "multiclass";
    default: return "survival";
  }
}

struct TaskSpec {
  std::string name = "task";
  TaskKind kind = TaskKind::binary;
  std::string label_column = "label";  // classification
  std::string time_column = "time";    // survival
  std::string event_column = "event";  // survival
  int n_classes = 2;
  std::string metric = "auroc";  // auroc | c_index

  bool classification() const { return kind != TaskKind::survival; }

  void validate() const {
    if (name.empty()) throw std::invalid_argument("task: empty name");
    if (metric != "auroc" && metric != "c_index") {
      throw std::invalid_argument("task: metric must be auroc or c_index");
    }
    if (classification()) {
      if (metric != "auroc") throw std::invalid_argument("task: classification uses metric = auroc");
      if (n_classes < 2) throw std::invalid_argument("task: classification needs >= 2 classes");
      if (kind == TaskKind::binary && n_classes != 2) {
        throw std::invalid_argument("task: binary tasks have exactly 2 classes");
      }
      if (label_column.empty()) throw std::invalid_argument("task: empty label column");
    } else {
      if (metric != "c_index") throw std::invalid_argument("task: survival uses metric = c_index");
      if (time_column.empty() || event_column.empty()) {
        throw std::invalid_argument("task: survival needs time and event columns");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  Profile profile;
  TaskSpec task;
  uint64_t seed = 42;
  int n_threads = 1;
  bool deterministic = true;
  std::string out_dir = "runs/exp";

  // synthetic cohort
  int n_slides = 200;
  int slide_px = 256;
  int slides_per_patient = 1;
  double pretrain_fraction = 0.5;
  double val_fraction = 0.2;
  double external_fraction = 0.0;
  double signal_min = 0.35;
  double signal_max = 0.6;
  std::vector<std::string> class_names;  // texture label per class index
  bool synth_survival = false;           // emit time/event columns regardless of task kind
  double hazard_ratio = 2.0;
  double censor_fraction = 0.2;
  double time_scale = 10.0;  // mean event time of the baseline class
  double mpp = 0.5;

  // tiling
  double tissue_threshold = 0.08;

  // pretraining pool cap (0 = use every pretrain tile)
  int ssl_max_tiles = 0;

  // split mode for metric reporting
  std::string split_mode = "holdout";  // holdout | kfold
  int folds = 10;

  // evaluation
  int n_boot = 1000;
  double alpha = 0.05;
  std::string bootstrap_unit = "slide";  // slide | patient

  // triage sweep
  double ihc_npv = 0.95;
  double ihc_ppv = 0.95;
  double ihc_sweep_from = 1.0;
  double ihc_sweep_to = 0.95;
  double ihc_sweep_step = 0.01;

  // heatmaps
  int heatmap_slides = 2;
  double heatmap_scale = 1.0;
  double heatmap_alpha = 0.55;

  // normalized "key = value" lines of the resolved input config
  std::string effective_text;
  uint64_t config_hash = 0;
};

inline const std::set<std::string>& config_schema_keys() {
  static const std::set<std::string> keys = {
      "pipeline.profile", "pipeline.seed", "pipeline.threads", "pipeline.out_dir",
      "pipeline.deterministic",
      "task.name", "task.kind", "task.label", "task.time", "task.event", "task.classes",
      "task.metric",
      "synth.slides", "synth.slide_px", "synth.slides_per_patient", "synth.pretrain_fraction",
      "synth.val_fraction", "synth.external_fraction", "synth.signal_min", "synth.signal_max",
      "synth.labels", "synth.survival", "synth.hazard_ratio", "synth.censor_fraction",
      "synth.time_scale", "synth.mpp",
      "tile.threshold",
      "lora.rank", "lora.alpha",
      "ssl.epochs", "ssl.batch_size", "ssl.local_crops", "ssl.tau_s", "ssl.tau_t",
      "ssl.center_momentum", "ssl.teacher_momentum", "ssl.lr", "ssl.final_lr",
      "ssl.warmup_steps", "ssl.weight_decay", "ssl.hidden", "ssl.bottleneck", "ssl.prototypes",
      "ssl.max_tiles",
      "mil.hidden", "mil.epochs", "mil.lr", "mil.weight_decay", "mil.instance_weight",
      "mil.instance_topk",
      "split.mode", "split.folds",
      "eval.resamples", "eval.alpha", "eval.unit",
      "ihc.npv", "ihc.ppv", "ihc.sweep_from", "ihc.sweep_to", "ihc.sweep_step",
      "heatmap.slides", "heatmap.scale", "heatmap.alpha",
  };
  return keys;
}

namespace exp_detail {

// Every unknown key is reported, each with its file:line.
inline void reject_unknown_keys(const ConfigFile& cfg) {
  std::vector<std::string> bad;
  for (const auto& [key, entry] : cfg.entries()) {
    if (!config_schema_keys().count(key)) {
      bad.push_back(cfg.location(key) + ": unknown config key '" + key + "'");
    }
  }
  if (!bad.empty()) {
    std::string msg = "config schema violations:";
    for (const auto& b : bad) msg += "\n  " + b;
    throw ConfigError(msg);
  }
}

inline void require_key(const ConfigFile& cfg, const std::string& key, const std::string& because,
                        const std::string& at) {
  if (!cfg.has(key)) {
    throw ConfigError(at + ": missing required key '" + key + "' (" + because + ")");
  }
}

[[noreturn]] inline void fail_at(const ConfigFile& cfg, const std::string& key,
                                 const std::string& msg) {
  throw ConfigError(cfg.location(key) + ": '" + key + "' " + msg);
}

inline std::string default_class_name(int i) {
  if (i < 26) return std::string(1, char('A' + i));
  return "C" + std::to_string(i);
}

}  // namespace exp_detail

inline ExperimentConfig load_experiment_config(const ConfigFile& cfg) {
  using namespace exp_detail;
  reject_unknown_keys(cfg);

  ExperimentConfig e;
  e.profile = [&] {
    const std::string name = cfg.get_str("pipeline.profile", "desk");
    try {
      return profile_by_name(name);
    } catch (const ConfigError& err) {
      throw ConfigError(cfg.location("pipeline.profile") + ": " + err.what());
    }
  }();
  e.seed = uint64_t(cfg.get_int("pipeline.seed", 42));
  e.n_threads = int(cfg.get_int("pipeline.threads", std::max(1u, std::thread::hardware_concurrency())));
  if (e.n_threads < 1) fail_at(cfg, "pipeline.threads", "must be >= 1");
  e.deterministic = cfg.get_bool("pipeline.deterministic", true);
  e.out_dir = cfg.get_str("pipeline.out_dir", "runs/exp");

  // Task. A config that names its task kind must also name the columns it
  // relies on; the bare defaults only apply to fully-default demo runs.
  e.task.name = cfg.get_str("task.name", "task");
  e.task.kind = [&] {
    const std::string s = cfg.get_str("task.kind", "binary");
    try {
      return task_kind_from_string(s);
    } catch (const ConfigError& err) {
      throw ConfigError(cfg.location("task.kind") + ": " + err.what());
    }
  }();
  if (cfg.has("task.kind")) {
    const std::string at = cfg.location("task.kind");
    if (e.task.kind == TaskKind::survival) {
      require_key(cfg, "task.time", "survival tasks name their event-time label column", at);
      require_key(cfg, "task.event", "survival tasks name their event-indicator label column", at);
    } else {
      require_key(cfg, "task.label", "classification tasks name their label column", at);
    }
  }
  e.task.label_column = cfg.get_str("task.label", "label");
  e.task.time_column = cfg.get_str("task.time", "time");
  e.task.event_column = cfg.get_str("task.event", "event");
  e.task.n_classes = int(cfg.get_int("task.classes", 2));
  e.task.metric = cfg.get_str("task.metric",
                              e.task.kind == TaskKind::survival ? "c_index" : "auroc");
  try {
    e.task.validate();
  } catch (const std::invalid_argument& err) {
    const std::string key = cfg.has("task.metric") ? "task.metric"
                            : cfg.has("task.classes") ? "task.classes"
                                                      : "task.kind";
    throw ConfigError(cfg.location(key) + ": " + err.what());
  }

  // Synthetic cohort.
  e.n_slides = int(cfg.get_int("synth.slides", 200));
  if (e.n_slides < 2) fail_at(cfg, "synth.slides", "must be >= 2");
  e.slide_px = int(cfg.get_int("synth.slide_px", e.profile.default_slide_px));
  if (e.slide_px < e.profile.vit.image_size) {
    fail_at(cfg, "synth.slide_px", "must cover at least one " +
                                       std::to_string(e.profile.vit.image_size) + "-px tile");
  }
  e.slides_per_patient = int(cfg.get_int("synth.slides_per_patient", 1));
  if (e.slides_per_patient < 1) fail_at(cfg, "synth.slides_per_patient", "must be >= 1");
  e.pretrain_fraction = cfg.get_double("synth.pretrain_fraction", 0.5);
  if (e.pretrain_fraction < 0 || e.pretrain_fraction >= 1) {
    fail_at(cfg, "synth.pretrain_fraction", "must lie in [0, 1)");
  }
  e.val_fraction = cfg.get_double("synth.val_fraction", 0.2);
  if (e.val_fraction <= 0 || e.val_fraction >= 1) fail_at(cfg, "synth.val_fraction", "must lie in (0, 1)");
  e.external_fraction = cfg.get_double("synth.external_fraction", 0.0);
  if (e.external_fraction < 0 || e.external_fraction >= 1) {
    fail_at(cfg, "synth.external_fraction", "must lie in [0, 1)");
  }
  e.signal_min = cfg.get_double("synth.signal_min", 0.35);
  e.signal_max = cfg.get_double("synth.signal_max", 0.6);
  if (e.signal_min < 0 || e.signal_max > 1 || e.signal_min > e.signal_max) {
    fail_at(cfg, cfg.has("synth.signal_min") ? "synth.signal_min" : "synth.signal_max",
            "needs 0 <= signal_min <= signal_max <= 1");
  }
  const int label_count = e.task.classification() ? e.task.n_classes : 2;
  if (cfg.has("synth.labels")) {
    e.class_names = cfg.get_list("synth.labels");
    if (int(e.class_names.size()) != label_count) {
      fail_at(cfg, "synth.labels", "lists " + std::to_string(e.class_names.size()) +
                                       " classes, task needs " + std::to_string(label_count));
    }
  } else {
    for (int i = 0; i < label_count; ++i) e.class_names.push_back(default_class_name(i));
  }
  e.synth_survival = cfg.get_bool("synth.survival", e.task.kind == TaskKind::survival);
  if (e.task.kind == TaskKind::survival && !e.synth_survival) {
    fail_at(cfg, "synth.survival", "cannot be disabled for a survival task");
  }
  e.hazard_ratio = cfg.get_double("synth.hazard_ratio", 2.0);
  if (e.hazard_ratio <= 0) fail_at(cfg, "synth.hazard_ratio", "must be positive");
  e.censor_fraction = cfg.get_double("synth.censor_fraction", 0.2);
  if (e.censor_fraction < 0 || e.censor_fraction >= 1) {
    fail_at(cfg, "synth.censor_fraction", "must lie in [0, 1)");
  }
  e.time_scale = cfg.get_double("synth.time_scale", 10.0);
  if (e.time_scale <= 0) fail_at(cfg, "synth.time_scale", "must be positive");
  e.mpp = cfg.get_double("synth.mpp", 0.5);
  if (e.mpp <= 0) fail_at(cfg, "synth.mpp", "must be positive");

  e.tissue_threshold = cfg.get_double("tile.threshold", 0.08);
  if (e.tissue_threshold < 0 || e.tissue_threshold > 1) {
    fail_at(cfg, "tile.threshold", "must lie in [0, 1]");
  }

  // Model and training overrides land on profile defaults.
  e.profile.lora.rank = int(cfg.get_int("lora.rank", e.profile.lora.rank));
  e.profile.lora.alpha = cfg.get_double("lora.alpha", e.profile.lora.alpha);
  SslConfig& ssl = e.profile.ssl;
  ssl.epochs = int(cfg.get_int("ssl.epochs", ssl.epochs));
  ssl.batch_size = int(cfg.get_int("ssl.batch_size", ssl.batch_size));
  ssl.n_local = int(cfg.get_int("ssl.local_crops", ssl.n_local));
  ssl.tau_s = cfg.get_double("ssl.tau_s", ssl.tau_s);
  ssl.tau_t = cfg.get_double("ssl.tau_t", ssl.tau_t);
  ssl.center_momentum = cfg.get_double("ssl.center_momentum", ssl.center_momentum);
  ssl.teacher_momentum = cfg.get_double("ssl.teacher_momentum", ssl.teacher_momentum);
  ssl.lr = cfg.get_double("ssl.lr", ssl.lr);
  ssl.final_lr = cfg.get_double("ssl.final_lr", ssl.final_lr);
  ssl.warmup_steps = int(cfg.get_int("ssl.warmup_steps", ssl.warmup_steps));
  ssl.weight_decay = cfg.get_double("ssl.weight_decay", ssl.weight_decay);
  ssl.head.hidden = int(cfg.get_int("ssl.hidden", ssl.head.hidden));
  ssl.head.bottleneck = int(cfg.get_int("ssl.bottleneck", ssl.head.bottleneck));
  ssl.head.prototypes = int(cfg.get_int("ssl.prototypes", ssl.head.prototypes));
  e.ssl_max_tiles = int(cfg.get_int("ssl.max_tiles", 0));
  if (e.ssl_max_tiles < 0) fail_at(cfg, "ssl.max_tiles", "must be >= 0 (0 = no cap)");
  MilConfig& mil = e.profile.mil;
  mil.hidden = int(cfg.get_int("mil.hidden", mil.hidden));
  mil.epochs = int(cfg.get_int("mil.epochs", mil.epochs));
  mil.lr = cfg.get_double("mil.lr", mil.lr);
  mil.weight_decay = cfg.get_double("mil.weight_decay", mil.weight_decay);
  mil.instance_loss_weight = cfg.get_double("mil.instance_weight", mil.instance_loss_weight);
  mil.instance_topk = int(cfg.get_int("mil.instance_topk", mil.instance_topk));
  mil.n_classes = e.task.classification() ? e.task.n_classes : 2;

  e.split_mode = cfg.get_str("split.mode", "holdout");
  if (e.split_mode != "holdout" && e.split_mode != "kfold") {
    fail_at(cfg, "split.mode", "must be holdout or kfold");
  }
  e.folds = int(cfg.get_int("split.folds", 10));
  if (e.folds < 2) fail_at(cfg, "split.folds", "must be >= 2");

  e.n_boot = int(cfg.get_int("eval.resamples", 1000));
  if (e.n_boot < 1) fail_at(cfg, "eval.resamples", "must be >= 1");
  e.alpha = cfg.get_double("eval.alpha", 0.05);
  if (e.alpha <= 0 || e.alpha >= 1) fail_at(cfg, "eval.alpha", "must lie in (0, 1)");
  e.bootstrap_unit = cfg.get_str("eval.unit", "slide");
  if (e.bootstrap_unit != "slide" && e.bootstrap_unit != "patient") {
    fail_at(cfg, "eval.unit", "must be slide or patient");
  }

  e.ihc_npv = cfg.get_double("ihc.npv", 0.95);
  e.ihc_ppv = cfg.get_double("ihc.ppv", 0.95);
  e.ihc_sweep_from = cfg.get_double("ihc.sweep_from", 1.0);
  e.ihc_sweep_to = cfg.get_double("ihc.sweep_to", 0.95);
  e.ihc_sweep_step = cfg.get_double("ihc.sweep_step", 0.01);
  if (e.ihc_sweep_step <= 0 || e.ihc_sweep_from < e.ihc_sweep_to) {
    fail_at(cfg, cfg.has("ihc.sweep_step") ? "ihc.sweep_step" : "ihc.sweep_from",
            "needs sweep_from >= sweep_to and a positive step");
  }

  e.heatmap_slides = int(cfg.get_int("heatmap.slides", 2));
  if (e.heatmap_slides < 0) fail_at(cfg, "heatmap.slides", "must be >= 0");
  e.heatmap_scale = cfg.get_double("heatmap.scale", 1.0);
  if (!(e.heatmap_scale > 0) || e.heatmap_scale > 1) fail_at(cfg, "heatmap.scale", "must lie in (0, 1]");
  e.heatmap_alpha = cfg.get_double("heatmap.alpha", 0.55);
  if (e.heatmap_alpha < 0 || e.heatmap_alpha > 1) fail_at(cfg, "heatmap.alpha", "must lie in [0, 1]");

  std::ostringstream eff;
  for (const auto& [key, entry] : cfg.entries()) eff << key << " = " << entry.value << "\n";
  e.effective_text = eff.str();
  e.config_hash = fnv1a64(e.effective_text);
  return e;
}

// ---------------------------------------------------------------------------
// Run-directory layout
// ---------------------------------------------------------------------------

struct RunLayout {
  std::string root;

  explicit RunLayout(std::string r = "runs/exp") : root(std::move(r)) {}

  std::string join(const std::string& rel) const {
    if (!rel.empty() && rel.front() == '/') return rel;
    return root + "/" + rel;
  }

  std::string data_dir() const { return join("data"); }
  std::string manifest_path() const { return join("data/manifest.csv"); }
  std::string tiles_dir() const { return join("tiles"); }
  std::string tile_index_path() const { return join("tiles/tile_index.csv"); }
  std::string pretrain_dir() const { return join("pretrain"); }
  std::string encoder_init_path() const { return join("pretrain/encoder_init.brck"); }
  std::string encoder_path() const { return join("pretrain/encoder.brck"); }
  std::string loss_path() const { return join("pretrain/loss.csv"); }
  std::string bags_dir() const { return join("bags"); }
  std::string bag_index_path() const { return join("bags/index.csv"); }
  std::string bag_rel(const std::string& slide_id) const { return "bags/" + slide_id + ".brte"; }
  std::string mil_dir() const { return join("mil"); }
  std::string head_path(const std::string& model) const {
    return join("mil/head_" + model + ".brck");
  }
  std::string train_log_path(const std::string& model) const {
    return join("mil/train_log_" + model + ".csv");
  }
  std::string reports_dir() const { return join("reports"); }
  std::string metrics_path() const { return join("reports/metrics.csv"); }
  std::string confusion_path() const { return join("reports/confusion.csv"); }
  std::string ihc_sweep_path() const { return join("reports/ihc_sweep.csv"); }
  std::string ihc_point_path() const { return join("reports/ihc_operating_point.csv"); }
  std::string km_path(const std::string& group) const {
    return join("reports/km_" + group + ".csv");
  }
  std::string forest_path() const { return join("reports/forest.csv"); }
  std::string attention_dir() const { return join("reports/attention"); }
  std::string attention_path(const std::string& slide_id) const {
    return join("reports/attention/" + slide_id + ".csv");
  }
  std::string heatmaps_dir() const { return join("reports/heatmaps"); }
  std::string heatmap_path(const std::string& slide_id) const {
    return join("reports/heatmaps/" + slide_id + ".png");
  }
  std::string config_used_path() const { return join("config_used.cfg"); }
  std::string run_manifest_path() const { return join("run_manifest.txt"); }
};

inline void ensure_dir(const std::string& path) { std::filesystem::create_directories(path); }

// ---------------------------------------------------------------------------
// Encoder checkpoints (backbone + adapter + optional SSL state)
// ---------------------------------------------------------------------------

struct EncoderCheckpoint {
  ViTConfig vit_cfg;
  LoraConfig lora_cfg;
  DinoHeadConfig head_cfg;
  ViTParams backbone;
  LoraParams lora;
  bool has_ssl_state = false;
  DinoHeadParams head;
  LoraParams teacher_lora;
  DinoHeadParams teacher_head;
  Eigen::RowVectorXf center;

  DualEmbedder embedder() const {
    DualEmbedder d;
    d.generalist = backbone;
    d.specialist = merge_lora(backbone, lora);
    return d;
  }
};

inline void write_encoder(const std::string& path, const EncoderCheckpoint& e) {
  NamedArrays a;
  std::ostringstream meta;
  meta << "model.image_size = " << e.vit_cfg.image_size << "\n"
       << "model.patch_size = " << e.vit_cfg.patch_size << "\n"
       << "model.dim = " << e.vit_cfg.dim << "\n"
       << "model.depth = " << e.vit_cfg.depth << "\n"
       << "model.heads = " << e.vit_cfg.heads << "\n"
       << "model.mlp_ratio = " << e.vit_cfg.mlp_ratio << "\n"
       << "lora.rank = " << e.lora_cfg.rank << "\n"
       << "lora.alpha = " << fmt_g(e.lora_cfg.alpha) << "\n"
       << "head.hidden = " << e.head_cfg.hidden << "\n"
       << "head.bottleneck = " << e.head_cfg.bottleneck << "\n"
       << "head.prototypes = " << e.head_cfg.prototypes << "\n"
       << "ssl_state = " << (e.has_ssl_state ? "true" : "false") << "\n";
  a.config_text = meta.str();
  a.add_prefixed("vit", vit_to_arrays(e.backbone));
  a.add_prefixed("lora", lora_to_arrays(e.lora));
  if (e.has_ssl_state) {
    a.add_prefixed("head", dino_head_to_arrays(e.head));
    a.add_prefixed("t_lora", lora_to_arrays(e.teacher_lora));
    a.add_prefixed("t_head", dino_head_to_arrays(e.teacher_head));
    a.add("center", Eigen::MatrixXf(e.center));
  }
  write_checkpoint(path, a);
}

inline EncoderCheckpoint read_encoder(const std::string& path) {
  const NamedArrays a = read_checkpoint(path);
  const ConfigFile meta = ConfigFile::parse_string(a.config_text, path + "#config");
  EncoderCheckpoint e;
  e.vit_cfg = ViTConfig{int(meta.get_int("model.image_size")), int(meta.get_int("model.patch_size")),
                        int(meta.get_int("model.dim")),        int(meta.get_int("model.depth")),
                        int(meta.get_int("model.heads")),      int(meta.get_int("model.mlp_ratio"))};
  e.lora_cfg.rank = int(meta.get_int("lora.rank"));
  e.lora_cfg.alpha = meta.get_double("lora.alpha");
  e.head_cfg.hidden = int(meta.get_int("head.hidden"));
  e.head_cfg.bottleneck = int(meta.get_int("head.bottleneck"));
  e.head_cfg.prototypes = int(meta.get_int("head.prototypes"));
  e.backbone = vit_from_arrays(a.extract_prefixed("vit"), e.vit_cfg);
  e.lora = lora_from_arrays(a.extract_prefixed("lora"), e.vit_cfg, e.lora_cfg);
  e.has_ssl_state = meta.get_bool("ssl_state", false);
  if (e.has_ssl_state) {
    e.head = dino_head_from_arrays(a.extract_prefixed("head"), e.head_cfg);
    e.teacher_lora = lora_from_arrays(a.extract_prefixed("t_lora"), e.vit_cfg, e.lora_cfg);
    e.teacher_head = dino_head_from_arrays(a.extract_prefixed("t_head"), e.head_cfg);
    const Eigen::MatrixXf c = a.get("center");
    if (c.rows() != 1) throw std::runtime_error(path + ": center is not a row vector");
    e.center = c.row(0);
  }
  return e;
}

// The state a pretraining run starts from: seeded backbone, zero-B adapter.
// Backbone and adapter streams match pretrain_stage exactly, so the trained
// checkpoint's backbone must be bit-identical to this one.
inline EncoderCheckpoint make_untrained_encoder(const ViTConfig& vc, const LoraConfig& lc,
                                                const DinoHeadConfig& hc, uint64_t master_seed) {
  EncoderCheckpoint e;
  e.vit_cfg = vc;
  e.lora_cfg = lc;
  e.head_cfg = hc;
  Rng master(master_seed);
  Rng brng = master.derive("backbone");
  e.backbone = init_vit(vc, brng);
  Rng init_rng = Rng(master.derive("ssl").seed()).derive("ssl.init");
  e.lora = init_lora(vc, lc, init_rng);
  return e;
}

// ---------------------------------------------------------------------------
// Synthetic cohort stage
// ---------------------------------------------------------------------------

namespace exp_detail {

inline std::string zero_pad(int v, int width) {
  std::string s = std::to_string(v);
  while (int(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

}  // namespace exp_detail

// Generates the cohort, assigns roles and labels patient-level, writes
// slide/mask PNGs and the manifest. Classes are balanced within each role
// bucket so no role degenerates to a single class.
inline std::vector<SlideRecord> synth_stage(const ExperimentConfig& cfg, const RunLayout& layout,
                                            const StageLog& log = {}) {
  ensure_dir(layout.data_dir());
  const int n_classes = int(cfg.class_names.size());
  const int n_patients = (cfg.n_slides + cfg.slides_per_patient - 1) / cfg.slides_per_patient;
  if (n_patients < 2) throw std::invalid_argument("synth: need at least 2 patients");

  Rng master(cfg.seed);
  Rng role_rng = master.derive("roles");
  std::vector<int> order(static_cast<size_t>(n_patients));
  std::iota(order.begin(), order.end(), 0);
  role_rng.shuffle(order);

  const int n_pre = int(std::lround(cfg.pretrain_fraction * n_patients));
  const int n_rest = n_patients - n_pre;
  if (n_rest < 2) throw std::invalid_argument("synth: pretrain fraction leaves < 2 downstream patients");
  int n_ext = int(std::lround(cfg.external_fraction * n_rest));
  int n_val = std::max(1, int(std::lround(cfg.val_fraction * (n_rest - n_ext))));
  if (n_ext + n_val >= n_rest) n_ext = std::max(0, n_rest - n_val - 1);
  if (n_ext + n_val >= n_rest) n_val = n_rest - n_ext - 1;
  if (n_val < 1 || n_rest - n_ext - n_val < 1) {
    throw std::invalid_argument("synth: role fractions leave an empty downstream split");
  }

  struct PatientPlan {
    std::string role;
    int class_idx = 0;
    double time = 0;
    int event = 1;
  };
  std::vector<PatientPlan> plan(static_cast<size_t>(n_patients));
  // Role buckets in shuffled order; class labels round-robin inside each
  // bucket keep every role near class balance.
  std::vector<std::pair<int, int>> bucket = {{0, n_pre},
                                             {n_pre, n_pre + n_rest - n_ext - n_val},
                                             {n_pre + n_rest - n_ext - n_val, n_pre + n_rest - n_ext},
                                             {n_pre + n_rest - n_ext, n_patients}};
  const std::vector<std::string> bucket_role = {"pretrain", "downstream-train", "internal-val",
                                                "external-val"};
  for (size_t b = 0; b < bucket.size(); ++b) {
    int k = 0;
    for (int i = bucket[b].first; i < bucket[b].second; ++i, ++k) {
      plan[size_t(order[size_t(i)])].role = bucket_role[b];
      plan[size_t(order[size_t(i)])].class_idx = k % n_classes;
    }
  }
  if (cfg.synth_survival) {
    for (int p = 0; p < n_patients; ++p) {
      Rng srng = master.derive("survival", uint64_t(p));
      const double u = std::max(srng.uniform(), 1e-12);
      // Baseline exponential scale, multiplied hazard for non-baseline classes.
      const double rate = (plan[size_t(p)].class_idx > 0 ? cfg.hazard_ratio : 1.0) / cfg.time_scale;
      const double t_event = -std::log(u) / rate;
      if (srng.uniform() < cfg.censor_fraction) {
        plan[size_t(p)].time = t_event * srng.uniform();
        plan[size_t(p)].event = 0;
      } else {
        plan[size_t(p)].time = t_event;
        plan[size_t(p)].event = 1;
      }
    }
  }

  std::vector<SlideRecord> records;
  std::vector<std::string> label_columns;
  if (cfg.task.classification()) label_columns.push_back(cfg.task.label_column);
  if (cfg.synth_survival) {
    label_columns.push_back(cfg.task.time_column);
    label_columns.push_back(cfg.task.event_column);
  }

  int slide_idx = 0;
  for (int p = 0; p < n_patients && slide_idx < cfg.n_slides; ++p) {
    const std::string patient_id = "P" + exp_detail::zero_pad(p + 1, 4);
    for (int s = 0; s < cfg.slides_per_patient && slide_idx < cfg.n_slides; ++s, ++slide_idx) {
      const std::string slide_id = "S" + exp_detail::zero_pad(slide_idx + 1, 4);
      Rng slide_rng = master.derive("slide", uint64_t(slide_idx));
      SlideSpec spec;
      spec.width_px = cfg.slide_px;
      spec.height_px = cfg.slide_px;
      spec.mpp = cfg.mpp;
      spec.class_signal = cfg.class_names[size_t(plan[size_t(p)].class_idx)];
      spec.signal_fraction = slide_rng.uniform(cfg.signal_min, cfg.signal_max);
      spec.seed = slide_rng.derive("pixels").seed();
      const SyntheticSlide slide = generate_synthetic_slide(spec, cfg.profile.vit.image_size);

      SlideRecord rec;
      rec.patient_id = patient_id;
      rec.slide_id = slide_id;
      rec.image_path = layout.join("data/" + slide_id + ".png");
      rec.mask_path = layout.join("data/" + slide_id + "_mask.png");
      rec.mpp = cfg.mpp;
      rec.role = plan[size_t(p)].role;
      if (cfg.task.classification()) {
        rec.labels[cfg.task.label_column] = std::to_string(plan[size_t(p)].class_idx);
      }
      if (cfg.synth_survival) {
        rec.labels[cfg.task.time_column] = fmt_g(plan[size_t(p)].time);
        rec.labels[cfg.task.event_column] = std::to_string(plan[size_t(p)].event);
      }
      write_png_rgb(rec.image_path, slide.image);
      write_png_gray(rec.mask_path, slide.mask);
      records.push_back(std::move(rec));
    }
  }

  write_manifest(layout.manifest_path(), records, label_columns);
  audit_roles(records);
  stage_note(log, "synth: " + std::to_string(records.size()) + " slides / " +
                      std::to_string(n_patients) + " patients -> " + layout.manifest_path());
  return records;
}

// ---------------------------------------------------------------------------
// Tiling stage
// ---------------------------------------------------------------------------

inline void write_tile_index(const std::string& path,
                             const std::vector<std::pair<std::string, std::pair<uint32_t, uint32_t>>>& rows) {
  CsvTable t;
  t.header = {"slide_id", "x", "y"};
  for (const auto& [id, xy] : rows) {
    t.rows.push_back({id, std::to_string(xy.first), std::to_string(xy.second)});
  }
  write_csv(path, t);
}

// slide_id -> tissue-tile coords in grid order.
inline std::map<std::string, std::vector<std::pair<uint32_t, uint32_t>>> read_tile_index(
    const std::string& path) {
  const CsvTable t = read_csv(path);
  if (t.header != std::vector<std::string>{"slide_id", "x", "y"}) {
    throw std::runtime_error(path + ": not a tile index (expected slide_id, x, y)");
  }
  std::map<std::string, std::vector<std::pair<uint32_t, uint32_t>>> out;
  for (const auto& row : t.rows) {
    out[row[0]].emplace_back(uint32_t(std::stoul(row[1])), uint32_t(std::stoul(row[2])));
  }
  return out;
}

// Re-crops a slide's tissue tiles from its image using indexed coords.
inline TileBag load_tile_bag(const SlideRecord& rec, int tile_size,
                             const std::vector<std::pair<uint32_t, uint32_t>>& coords) {
  const ImageRGB image = read_png_rgb(rec.image_path);
  TileBag bag;
  bag.slide_id = rec.slide_id;
  bag.patient_id = rec.patient_id;
  bag.mpp = rec.mpp;
  bag.tile_size = tile_size;
  bag.coords = coords;
  bag.tiles.reserve(coords.size());
  for (const auto& [x, y] : coords) {
    bag.tiles.push_back(crop(image, int(x), int(y), tile_size, tile_size));
  }
  return bag;
}

inline void tile_stage(const std::vector<SlideRecord>& records, const ExperimentConfig& cfg,
                       const RunLayout& layout, const StageLog& log = {}) {
  ensure_dir(layout.tiles_dir());
  TileSpec spec;
  spec.tile_size = cfg.profile.vit.image_size;
  spec.stride = spec.tile_size;
  spec.tissue_threshold = cfg.tissue_threshold;

  std::vector<std::pair<std::string, std::pair<uint32_t, uint32_t>>> rows;
  size_t n_tiles = 0;
  for (const auto& rec : records) {
    const ImageRGB image = read_png_rgb(rec.image_path);
    const TileBag bag = tile_slide(image, spec, rec.slide_id, rec.patient_id, rec.mpp);
    if (bag.empty()) {
      throw std::runtime_error("tile: slide " + rec.slide_id + " has no tissue tiles");
    }
    for (const auto& xy : bag.coords) rows.emplace_back(rec.slide_id, xy);
    n_tiles += bag.size();
  }
  write_tile_index(layout.tile_index_path(), rows);
  stage_note(log, "tile: " + std::to_string(n_tiles) + " tissue tiles across " +
                      std::to_string(records.size()) + " slides -> " + layout.tile_index_path());
}

// ---------------------------------------------------------------------------
// Pretraining stage
// ---------------------------------------------------------------------------

inline void pretrain_stage(const std::vector<SlideRecord>& records, const ExperimentConfig& cfg,
                           const RunLayout& layout, const StageLog& log = {}) {
  ensure_dir(layout.pretrain_dir());
  const auto index = read_tile_index(layout.tile_index_path());
  const int tile_size = cfg.profile.vit.image_size;

  std::vector<ImageRGB> pool;
  for (const auto& rec : records) {
    if (rec.role != "pretrain") continue;
    auto it = index.find(rec.slide_id);
    if (it == index.end()) {
      throw std::runtime_error("pretrain: slide " + rec.slide_id +
                               " missing from tile index; run the tile stage first");
    }
    TileBag bag = load_tile_bag(rec, tile_size, it->second);
    for (auto& t : bag.tiles) pool.push_back(std::move(t));
  }
  if (pool.empty()) throw std::runtime_error("pretrain: no pretrain-role tiles available");
  if (cfg.ssl_max_tiles > 0 && int(pool.size()) > cfg.ssl_max_tiles) {
    Rng prng(stage_seed(cfg.seed, "pool"));
    prng.shuffle(pool);
    pool.resize(size_t(cfg.ssl_max_tiles));
  }

  EncoderCheckpoint init_ck =
      make_untrained_encoder(cfg.profile.vit, cfg.profile.lora, cfg.profile.ssl.head, cfg.seed);
  write_encoder(layout.encoder_init_path(), init_ck);

  CsvTable loss;
  loss.header = {"epoch", "step", "loss"};
  const uint64_t ssl_seed = Rng(cfg.seed).derive("ssl").seed();
  stage_note(log, "pretrain: " + std::to_string(pool.size()) + " tiles, " +
                      std::to_string(cfg.profile.ssl.epochs) + " epochs");
  const SslResult res = train_ssl(init_ck.backbone, cfg.profile.lora, pool, cfg.profile.ssl,
                                  ssl_seed, [&](int epoch, int step, double l) {
                                    loss.rows.push_back({std::to_string(epoch),
                                                         std::to_string(step), fmt_g(l)});
                                  });
  write_csv(layout.loss_path(), loss);

  EncoderCheckpoint trained = init_ck;
  trained.lora = res.lora;
  trained.has_ssl_state = true;
  trained.head = res.head;
  trained.teacher_lora = res.teacher_lora;
  trained.teacher_head = res.teacher_head;
  trained.center = res.center;
  write_encoder(layout.encoder_path(), trained);
  stage_note(log, "pretrain: wrote " + layout.encoder_path());
}

// ---------------------------------------------------------------------------
// Embedding stage
// ---------------------------------------------------------------------------

// Embeds every non-pretrain slide; pretraining tiles are never touched by
// evaluation paths. The encoder argument is the checkpoint to embed with
// (trained or untrained).
inline void embed_stage(const std::vector<SlideRecord>& records, const EncoderCheckpoint& encoder,
                        const ExperimentConfig& cfg, const RunLayout& layout,
                        const StageLog& log = {}) {
  audit_roles(records);
  ensure_dir(layout.bags_dir());
  const auto index = read_tile_index(layout.tile_index_path());
  const DualEmbedder emb = encoder.embedder();
  const int tile_size = encoder.vit_cfg.image_size;

  std::vector<std::pair<std::string, std::string>> entries;
  for (const auto& rec : records) {
    if (rec.role == "pretrain") continue;
    auto it = index.find(rec.slide_id);
    if (it == index.end()) {
      throw std::runtime_error("embed: slide " + rec.slide_id +
                               " missing from tile index; run the tile stage first");
    }
    const TileBag bag = load_tile_bag(rec, tile_size, it->second);
    const EmbeddingBag ebag = embed_bag(emb, bag, cfg.n_threads);
    write_bag(layout.join(layout.bag_rel(rec.slide_id)), ebag);
    entries.emplace_back(rec.slide_id, layout.bag_rel(rec.slide_id));
  }
  if (entries.empty()) throw std::runtime_error("embed: no non-pretrain slides to embed");
  write_bag_index(layout.bag_index_path(), entries);
  stage_note(log, "embed: " + std::to_string(entries.size()) + " bags (fused dim " +
                      std::to_string(emb.fused_dim()) + ") -> " + layout.bags_dir());
}

// ---------------------------------------------------------------------------
// MIL training stage
// ---------------------------------------------------------------------------

namespace exp_detail {

inline std::vector<const SlideRecord*> with_role(const std::vector<SlideRecord>& records,
                                                 const std::string& role) {
  std::vector<const SlideRecord*> out;
  for (const auto& r : records)
    if (r.role == role) out.push_back(&r);
  return out;
}

inline std::vector<EmbeddingBag> load_bags(const RunLayout& layout,
                                           const std::map<std::string, std::string>& bag_index,
                                           const std::vector<const SlideRecord*>& recs) {
  std::vector<EmbeddingBag> out;
  out.reserve(recs.size());
  for (const auto* r : recs) {
    auto it = bag_index.find(r->slide_id);
    if (it == bag_index.end()) {
      throw std::runtime_error("bag index: slide " + r->slide_id +
                               " has no embedding bag; run the embed stage first");
    }
    out.push_back(read_bag(layout.join(it->second)));
  }
  return out;
}

inline std::vector<const EmbeddingBag*> bag_ptrs(const std::vector<EmbeddingBag>& bags) {
  std::vector<const EmbeddingBag*> out;
  out.reserve(bags.size());
  for (const auto& b : bags) out.push_back(&b);
  return out;
}

// The fused layout is specialist then generalist, branches of equal width.
inline int specialist_dim_of(const EmbeddingBag& bag) {
  if (bag.fused_dim() % 2 != 0) {
    throw std::runtime_error("bag " + bag.slide_id + ": odd fused dim, cannot split branches");
  }
  return int(bag.fused_dim() / 2);
}

inline std::vector<EmbeddingBag> generalist_view(const std::vector<EmbeddingBag>& bags) {
  std::vector<EmbeddingBag> out;
  out.reserve(bags.size());
  for (const auto& b : bags) out.push_back(slice_generalist(b, specialist_dim_of(b)));
  return out;
}

inline void write_head(const std::string& path, const MilHeadParams& head,
                       const std::string& model, const TaskSpec& task) {
  NamedArrays a = mil_to_arrays(head);
  a.config_text = "model = " + model + "\ntask = " + task.name + "\nkind = " +
                  to_string(task.kind) + "\n";
  write_checkpoint(path, a);
}

inline MilHeadParams read_head(const std::string& path) {
  return mil_from_arrays(read_checkpoint(path));
}

inline void write_train_log(const std::string& path, const MilTrainLog& log) {
  CsvTable t;
  t.header = {"epoch", "train_loss", "val_score", "selected"};
  for (size_t i = 0; i < log.epoch_losses.size(); ++i) {
    t.rows.push_back({std::to_string(i), fmt_g(log.epoch_losses[i]),
                      i < log.val_scores.size() ? fmt_g(log.val_scores[i]) : "",
                      int(i) == log.best_epoch ? "1" : "0"});
  }
  write_csv(path, t);
}

inline std::vector<int> class_labels(const std::vector<const SlideRecord*>& recs,
                                     const TaskSpec& task) {
  std::vector<int> out;
  out.reserve(recs.size());
  for (const auto* r : recs) {
    const int y = int_label(*r, task.label_column);
    if (y < 0 || y >= task.n_classes) {
      throw std::invalid_argument("manifest: slide " + r->slide_id + " label " +
                                  std::to_string(y) + " outside 0.." +
                                  std::to_string(task.n_classes - 1));
    }
    out.push_back(y);
  }
  return out;
}

inline void survival_labels(const std::vector<const SlideRecord*>& recs, const TaskSpec& task,
                            std::vector<double>& times, std::vector<int>& events) {
  times.clear();
  events.clear();
  for (const auto* r : recs) {
    times.push_back(double_label(*r, task.time_column));
    const int e = int_label(*r, task.event_column);
    if (e != 0 && e != 1) {
      throw std::invalid_argument("manifest: slide " + r->slide_id + " event must be 0 or 1");
    }
    events.push_back(e);
  }
}

}  // namespace exp_detail

// Trains the fused head and the generalist-branch head (the ablation
// comparison reported by evaluate/survival) on downstream-train with model
// selection on internal-val.
inline void train_mil_stage(const std::vector<SlideRecord>& records, const ExperimentConfig& cfg,
                            const RunLayout& layout, const StageLog& log = {}) {
  using namespace exp_detail;
  audit_roles(records);
  ensure_dir(layout.mil_dir());
  const auto bag_index = read_bag_index(layout.bag_index_path());
  const auto train_recs = with_role(records, "downstream-train");
  const auto val_recs = with_role(records, "internal-val");
  if (train_recs.empty() || val_recs.empty()) {
    throw std::runtime_error("train-mil: need non-empty downstream-train and internal-val roles");
  }
  const std::vector<EmbeddingBag> train_fused = load_bags(layout, bag_index, train_recs);
  const std::vector<EmbeddingBag> val_fused = load_bags(layout, bag_index, val_recs);
  const std::vector<EmbeddingBag> train_gen = generalist_view(train_fused);
  const std::vector<EmbeddingBag> val_gen = generalist_view(val_fused);

  const auto train_one = [&](const std::string& model, const std::vector<EmbeddingBag>& tr,
                             const std::vector<EmbeddingBag>& va) {
    MilTrainLog tlog;
    MilHeadParams head;
    const uint64_t seed = stage_seed(cfg.seed, "mil." + model);
    if (cfg.task.classification()) {
      const auto ty = class_labels(train_recs, cfg.task);
      const auto vy = class_labels(val_recs, cfg.task);
      head = train_mil_classifier(bag_ptrs(tr), ty, bag_ptrs(va), vy, cfg.profile.mil, seed, &tlog);
    } else {
      std::vector<double> tt, vt;
      std::vector<int> te, ve;
      survival_labels(train_recs, cfg.task, tt, te);
      survival_labels(val_recs, cfg.task, vt, ve);
      head = train_mil_survival(bag_ptrs(tr), tt, te, bag_ptrs(va), vt, ve, cfg.profile.mil, seed,
                                &tlog);
      if (tlog.no_event_warning) {
        stage_note(log, "train-mil: warning: " + model + " saw a training set with zero events");
      }
    }
    write_head(layout.head_path(model), head, model, cfg.task);
    write_train_log(layout.train_log_path(model), tlog);
    stage_note(log, "train-mil: " + model + " best epoch " + std::to_string(tlog.best_epoch) +
                        ", val " + fmt_g(tlog.best_score));
  };
  train_one("fused", train_fused, val_fused);
  train_one("generalist", train_gen, val_gen);
}

// ---------------------------------------------------------------------------
// Metric reporting
// ---------------------------------------------------------------------------

struct MetricRow {
  std::string split;
  std::string model;
  std::string metric;
  double point = 0.0;
  bool has_ci = false;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int n_boot = 0;
  uint64_t seed = 0;
};

inline void write_metric_rows(const std::string& path, const std::vector<MetricRow>& rows) {
  CsvTable t;
  t.header = {"split", "model", "metric", "point", "ci_low", "ci_high", "n_boot", "seed"};
  for (const auto& r : rows) {
    t.rows.push_back({r.split, r.model, r.metric, fmt_g(r.point), r.has_ci ? fmt_g(r.ci_low) : "",
                      r.has_ci ? fmt_g(r.ci_high) : "", r.has_ci ? std::to_string(r.n_boot) : "",
                      r.has_ci ? std::to_string(r.seed) : ""});
  }
  write_csv(path, t);
}

inline std::vector<MetricRow> read_metric_rows(const std::string& path) {
  const CsvTable t = read_csv(path);
  std::vector<MetricRow> rows;
  const int cs = t.require_column("split"), cm = t.require_column("model");
  const int cme = t.require_column("metric"), cp = t.require_column("point");
  const int cl = t.require_column("ci_low"), ch = t.require_column("ci_high");
  for (const auto& row : t.rows) {
    MetricRow r;
    r.split = row[size_t(cs)];
    r.model = row[size_t(cm)];
    r.metric = row[size_t(cme)];
    r.point = std::stod(row[size_t(cp)]);
    r.has_ci = !row[size_t(cl)].empty();
    if (r.has_ci) {
      r.ci_low = std::stod(row[size_t(cl)]);
      r.ci_high = std::stod(row[size_t(ch)]);
    }
    rows.push_back(r);
  }
  return rows;
}

// Bootstrap that resamples whole units (slides or patients): unit_ids[i]
// names sample i's unit; a resample draws units and concatenates their
// member indices.
inline BootstrapCI grouped_bootstrap(const std::vector<std::string>& unit_ids,
                                     const std::function<double(const std::vector<size_t>&)>& stat,
                                     Rng& rng, int n_boot, double alpha) {
  std::map<std::string, size_t> unit_index;
  std::vector<std::vector<size_t>> members;
  for (size_t i = 0; i < unit_ids.size(); ++i) {
    auto it = unit_index.find(unit_ids[i]);
    if (it == unit_index.end()) {
      it = unit_index.emplace(unit_ids[i], members.size()).first;
      members.emplace_back();
    }
    members[it->second].push_back(i);
  }
  return bootstrap_ci(
      members.size(),
      [&](const std::vector<size_t>& units) {
        std::vector<size_t> idx;
        for (size_t u : units)
          for (size_t i : members[u]) idx.push_back(i);
        return stat(idx);
      },
      rng, n_boot, alpha);
}

namespace exp_detail {

inline std::vector<std::string> bootstrap_units(const std::vector<const SlideRecord*>& recs,
                                                const std::string& unit) {
  std::vector<std::string> out;
  out.reserve(recs.size());
  for (const auto* r : recs) out.push_back(unit == "patient" ? r->patient_id : r->slide_id);
  return out;
}

// AUROC (with CI), accuracy, weighted F1 and confusion rows for one
// split/model pair.
inline void classification_report(const std::string& split, const std::string& model,
                                  const ExperimentConfig& cfg,
                                  const std::vector<std::vector<double>>& probs,
                                  const std::vector<int>& labels,
                                  const std::vector<std::string>& units,
                                  std::vector<MetricRow>& rows, CsvTable& confusion) {
  const TaskSpec& task = cfg.task;
  const bool binary = task.n_classes == 2;
  std::vector<int> preds;
  preds.reserve(probs.size());
  for (const auto& p : probs) preds.push_back(argmax_row(p));

  MetricRow auc;
  auc.split = split;
  auc.model = model;
  auc.metric = binary ? "auroc" : "auroc_macro";
  auc.seed = Rng(cfg.seed).derive("boot").derive(split + ":" + model).seed();
  Rng brng(auc.seed);
  const auto stat = [&](const std::vector<size_t>& idx) {
    if (binary) {
      std::vector<double> s;
      std::vector<int> y;
      for (size_t i : idx) {
        s.push_back(probs[i][1]);
        y.push_back(labels[i]);
      }
      return auroc_or_nan(s, y);
    }
    std::vector<std::vector<double>> s;
    std::vector<int> y;
    for (size_t i : idx) {
      s.push_back(probs[i]);
      y.push_back(labels[i]);
    }
    return macro_ovr_auroc(s, y, task.n_classes);
  };
  const BootstrapCI ci = grouped_bootstrap(units, stat, brng, cfg.n_boot, cfg.alpha);
  auc.point = ci.point;
  auc.has_ci = true;
  auc.ci_low = ci.lo;
  auc.ci_high = ci.hi;
  auc.n_boot = cfg.n_boot;
  rows.push_back(auc);

  rows.push_back({split, model, "accuracy", accuracy(labels, preds), false, 0, 0, 0, 0});
  rows.push_back({split, model, "weighted_f1", weighted_f1(labels, preds, task.n_classes), false, 0,
                  0, 0, 0});
  if (task.n_classes > 2) {
    rows.push_back(
        {split, model, "top_2_accuracy", top_n_accuracy(probs, labels, 2), false, 0, 0, 0, 0});
  }

  const auto cm = confusion_matrix(labels, preds, task.n_classes);
  for (int tr = 0; tr < task.n_classes; ++tr) {
    for (int pr = 0; pr < task.n_classes; ++pr) {
      confusion.rows.push_back({split, model, std::to_string(tr), std::to_string(pr),
                                std::to_string(cm[size_t(tr)][size_t(pr)])});
    }
  }
}

inline void write_attention_and_heatmaps(const std::vector<const SlideRecord*>& recs,
                                         const std::vector<EmbeddingBag>& bags,
                                         const MilHeadParams& head, const ExperimentConfig& cfg,
                                         const RunLayout& layout, const StageLog& log) {
  ensure_dir(layout.attention_dir());
  ensure_dir(layout.heatmaps_dir());
  int rendered = 0;
  for (size_t i = 0; i < recs.size(); ++i) {
    const Eigen::VectorXf a = gated_attention(bags[i].embeddings, head);
    std::vector<AttentionRow> rows;
    rows.reserve(size_t(a.size()));
    for (Eigen::Index t = 0; t < a.size(); ++t) {
      rows.push_back({bags[i].coords[size_t(t)].first, bags[i].coords[size_t(t)].second,
                      double(a(t))});
    }
    write_attention_csv(layout.attention_path(recs[i]->slide_id), recs[i]->slide_id, rows);
    if (rendered < cfg.heatmap_slides) {
      const ImageRGB slide = read_png_rgb(recs[i]->image_path);
      const ImageRGB hm = render_heatmap(rows, slide.width, slide.height,
                                         int(bags[i].tile_size), cfg.heatmap_scale, &slide,
                                         cfg.heatmap_alpha);
      write_png_rgb(layout.heatmap_path(recs[i]->slide_id), hm);
      ++rendered;
    }
  }
  if (rendered > 0) {
    stage_note(log, "reports: " + std::to_string(rendered) + " heatmaps -> " +
                        layout.heatmaps_dir());
  }
}

}  // namespace exp_detail

// ---------------------------------------------------------------------------
// Evaluation stage (classification)
// ---------------------------------------------------------------------------

inline std::vector<MetricRow> evaluate_stage(const std::vector<SlideRecord>& records,
                                             const ExperimentConfig& cfg, const RunLayout& layout,
                                             const StageLog& log = {}) {
  using namespace exp_detail;
  if (!cfg.task.classification()) {
    throw std::runtime_error("evaluate: task kind is survival; use the survival stage");
  }
  audit_roles(records);
  ensure_dir(layout.reports_dir());
  const auto bag_index = read_bag_index(layout.bag_index_path());

  std::vector<MetricRow> rows;
  CsvTable confusion;
  confusion.header = {"split", "model", "truth", "pred", "count"};

  if (cfg.split_mode == "holdout") {
    const MilHeadParams fused_head = read_head(layout.head_path("fused"));
    const MilHeadParams gen_head = read_head(layout.head_path("generalist"));
    const std::vector<std::string> split_names = {"internal-val", "external-val"};
    for (const auto& split : split_names) {
      const auto recs = with_role(records, split);
      if (recs.empty()) continue;
      const std::vector<EmbeddingBag> bags = load_bags(layout, bag_index, recs);
      const std::vector<EmbeddingBag> gen_bags = generalist_view(bags);
      const auto labels = class_labels(recs, cfg.task);
      const auto units = bootstrap_units(recs, cfg.bootstrap_unit);

      const auto probs_of = [](const std::vector<EmbeddingBag>& bs, const MilHeadParams& h) {
        std::vector<std::vector<double>> out;
        out.reserve(bs.size());
        for (const auto& b : bs) out.push_back(mil_classify(b, h).probs);
        return out;
      };
      classification_report(split, "fused", cfg, probs_of(bags, fused_head), labels, units, rows,
                            confusion);
      classification_report(split, "generalist", cfg, probs_of(gen_bags, gen_head), labels, units,
                            rows, confusion);
      if (split == "internal-val") {
        write_attention_and_heatmaps(recs, bags, fused_head, cfg, layout, log);
      }
    }
  } else {
    // k-fold cross-validation over the downstream cohort: per fold, heads are
    // trained from scratch and the held-out fold is scored once; metrics are
    // computed on the pooled out-of-fold scores.
    std::vector<SlideRecord> pool;
    for (const auto& r : records) {
      if (r.role == "downstream-train" || r.role == "internal-val") pool.push_back(r);
    }
    if (pool.empty()) throw std::runtime_error("evaluate: no downstream slides for k-fold");
    const auto folds = kfold_by_patient(pool, cfg.folds, stage_seed(cfg.seed, "kfold"),
                                        cfg.task.label_column);
    std::vector<std::vector<double>> probs_fused, probs_gen;
    std::vector<int> labels;
    std::vector<std::string> units;
    for (size_t f = 0; f < folds.size(); ++f) {
      std::map<std::string, int> slide_group;
      std::vector<const SlideRecord*> tr, va;
      for (const auto& r : pool) {
        const int g = folds[f].group_of(r);
        slide_group[r.slide_id] = g;
        (g == 0 ? tr : va).push_back(&r);
      }
      audit_patient_leakage(pool, slide_group);
      if (tr.empty() || va.empty()) {
        throw std::runtime_error("evaluate: fold " + std::to_string(f) + " is degenerate");
      }
      const std::vector<EmbeddingBag> tr_bags = load_bags(layout, bag_index, tr);
      const std::vector<EmbeddingBag> va_bags = load_bags(layout, bag_index, va);
      const std::vector<EmbeddingBag> tr_gen = generalist_view(tr_bags);
      const std::vector<EmbeddingBag> va_gen = generalist_view(va_bags);
      const auto ty = class_labels(tr, cfg.task);
      const auto vy = class_labels(va, cfg.task);
      const uint64_t fseed = stage_seed(cfg.seed, "mil.fold" + std::to_string(f));
      const MilHeadParams hf =
          train_mil_classifier(bag_ptrs(tr_bags), ty, bag_ptrs(va_bags), vy, cfg.profile.mil, fseed);
      const MilHeadParams hg = train_mil_classifier(bag_ptrs(tr_gen), ty, bag_ptrs(va_gen), vy,
                                                    cfg.profile.mil, fseed);
      for (size_t i = 0; i < va.size(); ++i) {
        probs_fused.push_back(mil_classify(va_bags[i], hf).probs);
        probs_gen.push_back(mil_classify(va_gen[i], hg).probs);
        labels.push_back(vy[i]);
        units.push_back(cfg.bootstrap_unit == "patient" ? va[i]->patient_id : va[i]->slide_id);
      }
      stage_note(log, "evaluate: fold " + std::to_string(f + 1) + "/" +
                          std::to_string(folds.size()) + " scored " + std::to_string(va.size()) +
                          " slides");
    }
    const std::string split = "cv" + std::to_string(cfg.folds);
    classification_report(split, "fused", cfg, probs_fused, labels, units, rows, confusion);
    classification_report(split, "generalist", cfg, probs_gen, labels, units, rows, confusion);
  }

  write_metric_rows(layout.metrics_path(), rows);
  write_csv(layout.confusion_path(), confusion);
  stage_note(log, "evaluate: " + std::to_string(rows.size()) + " metric rows -> " +
                      layout.metrics_path());
  return rows;
}

// ---------------------------------------------------------------------------
// Survival stage
// ---------------------------------------------------------------------------

inline std::vector<MetricRow> survival_stage(const std::vector<SlideRecord>& records,
                                             const ExperimentConfig& cfg, const RunLayout& layout,
                                             const StageLog& log = {}) {
  using namespace exp_detail;
  if (cfg.task.kind != TaskKind::survival) {
    throw std::runtime_error("survival: task kind is " + to_string(cfg.task.kind) +
                             "; use the evaluate stage");
  }
  if (cfg.split_mode != "holdout") {
    throw std::runtime_error("survival: only holdout reporting is supported");
  }
  audit_roles(records);
  ensure_dir(layout.reports_dir());
  const auto bag_index = read_bag_index(layout.bag_index_path());
  const MilHeadParams fused_head = read_head(layout.head_path("fused"));
  const MilHeadParams gen_head = read_head(layout.head_path("generalist"));

  std::vector<MetricRow> rows;
  const std::vector<std::string> split_names = {"internal-val", "external-val"};
  for (const auto& split : split_names) {
    const auto recs = with_role(records, split);
    if (recs.empty()) continue;
    const std::vector<EmbeddingBag> bags = load_bags(layout, bag_index, recs);
    const std::vector<EmbeddingBag> gen_bags = generalist_view(bags);
    std::vector<double> times;
    std::vector<int> events;
    survival_labels(recs, cfg.task, times, events);
    const auto units = bootstrap_units(recs, cfg.bootstrap_unit);

    const auto risks_of = [](const std::vector<EmbeddingBag>& bs, const MilHeadParams& h) {
      std::vector<double> out;
      out.reserve(bs.size());
      for (const auto& b : bs) out.push_back(mil_risk(b, h).risk);
      return out;
    };
    const auto report_c = [&](const std::string& model, const std::vector<double>& risks) {
      MetricRow r;
      r.split = split;
      r.model = model;
      r.metric = "c_index";
      r.seed = Rng(cfg.seed).derive("boot").derive(split + ":" + model).seed();
      Rng brng(r.seed);
      const BootstrapCI ci = grouped_bootstrap(
          units,
          [&](const std::vector<size_t>& idx) {
            std::vector<double> rk, tm;
            std::vector<int> ev;
            for (size_t i : idx) {
              rk.push_back(risks[i]);
              tm.push_back(times[i]);
              ev.push_back(events[i]);
            }
            return concordance_or_nan(tm, ev, rk);
          },
          brng, cfg.n_boot, cfg.alpha);
      r.point = ci.point;
      r.has_ci = true;
      r.ci_low = ci.lo;
      r.ci_high = ci.hi;
      r.n_boot = cfg.n_boot;
      rows.push_back(r);
    };
    const std::vector<double> fused_risks = risks_of(bags, fused_head);
    report_c("fused", fused_risks);
    report_c("generalist", risks_of(gen_bags, gen_head));

    if (split == "internal-val") {
      // Median-risk stratification: KM per group, log-rank separation, and a
      // forest of Cox fits on the fused risk.
      const std::vector<int> groups = risk_groups(fused_risks, median_of(fused_risks));
      std::vector<double> t_low, t_high;
      std::vector<int> e_low, e_high;
      for (size_t i = 0; i < fused_risks.size(); ++i) {
        (groups[i] == 0 ? t_low : t_high).push_back(times[i]);
        (groups[i] == 0 ? e_low : e_high).push_back(events[i]);
      }
      const auto write_km = [&](const std::string& name, const std::vector<double>& t,
                                const std::vector<int>& ev) {
        CsvTable km;
        km.header = {"time", "n_at_risk", "n_events", "n_censored", "survival"};
        if (!t.empty()) {
          for (const auto& p : kaplan_meier(t, ev).points) {
            km.rows.push_back({fmt_g(p.time), std::to_string(p.n_at_risk),
                               std::to_string(p.n_events), std::to_string(p.n_censored),
                               fmt_g(p.survival)});
          }
        }
        write_csv(layout.km_path(name), km);
      };
      write_km("low", t_low, e_low);
      write_km("high", t_high, e_high);
      if (!t_low.empty() && !t_high.empty()) {
        const LogRankResult lr = log_rank_test(times, events, groups);
        rows.push_back({split, "fused", "log_rank_chi2", lr.chi2, false, 0, 0, 0, 0});
        rows.push_back({split, "fused", "log_rank_p", lr.p_value, false, 0, 0, 0, 0});
      }

      CsvTable forest;
      forest.header = {"term", "hazard_ratio", "ci_low", "ci_high", "p_value"};
      Eigen::MatrixXd x(Eigen::Index(fused_risks.size()), 1);
      for (size_t i = 0; i < fused_risks.size(); ++i) x(Eigen::Index(i), 0) = fused_risks[i];
      const CoxFit fit_score = cox_fit(x, times, events, {"fused_risk"});
      Eigen::MatrixXd xg(Eigen::Index(groups.size()), 1);
      for (size_t i = 0; i < groups.size(); ++i) xg(Eigen::Index(i), 0) = groups[i];
      const CoxFit fit_group = cox_fit(xg, times, events, {"high_risk_group"});
      for (const CoxFit* fit : {&fit_score, &fit_group}) {
        forest.rows.push_back({fit->names[0], fmt_g(fit->hazard_ratio(0)), fmt_g(fit->hr_ci_lo(0)),
                               fmt_g(fit->hr_ci_hi(0)), fmt_g(fit->p_values(0))});
      }
      write_csv(layout.forest_path(), forest);
      write_attention_and_heatmaps(recs, bags, fused_head, cfg, layout, log);
    }
  }

  write_metric_rows(layout.metrics_path(), rows);
  stage_note(log, "survival: " + std::to_string(rows.size()) + " metric rows -> " +
                      layout.metrics_path());
  return rows;
}

// ---------------------------------------------------------------------------
// IHC triage stage
// ---------------------------------------------------------------------------

inline TriageResult ihc_stage(const std::vector<SlideRecord>& records, const ExperimentConfig& cfg,
                              const RunLayout& layout, const StageLog& log = {}) {
  using namespace exp_detail;
  if (cfg.task.kind != TaskKind::binary) {
    throw std::runtime_error("ihc-reduce: requires a binary classification task");
  }
  audit_roles(records);
  ensure_dir(layout.reports_dir());
  const auto bag_index = read_bag_index(layout.bag_index_path());
  const MilHeadParams fused_head = read_head(layout.head_path("fused"));
  const auto recs = with_role(records, "internal-val");
  if (recs.empty()) throw std::runtime_error("ihc-reduce: no internal-val slides");
  const std::vector<EmbeddingBag> bags = load_bags(layout, bag_index, recs);
  const auto labels = class_labels(recs, cfg.task);
  std::vector<double> scores;
  scores.reserve(bags.size());
  for (const auto& b : bags) scores.push_back(mil_classify(b, fused_head).probs[1]);

  const auto result_cells = [](const TriageResult& r) {
    return std::vector<std::string>{r.t_low ? fmt_g(*r.t_low) : "", r.t_high ? fmt_g(*r.t_high) : "",
                                    fmt_g(r.npv), fmt_g(r.ppv), fmt_g(r.fraction_avoided),
                                    std::to_string(r.n_avoided)};
  };

  CsvTable sweep;
  sweep.header = {"target", "t_low", "t_high", "npv", "ppv", "fraction_avoided", "n_avoided"};
  for (const auto& row :
       triage_sweep(scores, labels, cfg.ihc_sweep_from, cfg.ihc_sweep_to, cfg.ihc_sweep_step)) {
    std::vector<std::string> cells = {fmt_g(row.target)};
    for (auto& c : result_cells(row.result)) cells.push_back(std::move(c));
    sweep.rows.push_back(std::move(cells));
  }
  write_csv(layout.ihc_sweep_path(), sweep);

  const TriageResult op = triage_thresholds(scores, labels, cfg.ihc_npv, cfg.ihc_ppv);
  CsvTable point;
  point.header = {"npv_target", "ppv_target", "t_low", "t_high", "npv", "ppv", "fraction_avoided",
                  "n_avoided"};
  std::vector<std::string> cells = {fmt_g(cfg.ihc_npv), fmt_g(cfg.ihc_ppv)};
  for (auto& c : result_cells(op)) cells.push_back(std::move(c));
  point.rows.push_back(std::move(cells));
  write_csv(layout.ihc_point_path(), point);
  stage_note(log, "ihc-reduce: " + fmt_g(op.fraction_avoided) + " of confirmatory tests avoidable at NPV " +
                      fmt_g(cfg.ihc_npv) + " / PPV " + fmt_g(cfg.ihc_ppv));
  return op;
}

// ---------------------------------------------------------------------------
// Heatmap stage (standalone re-render)
// ---------------------------------------------------------------------------

inline void heatmap_stage(const std::vector<SlideRecord>& records, const ExperimentConfig& cfg,
                          const RunLayout& layout, const std::string& only_slide = "",
                          const StageLog& log = {}) {
  using namespace exp_detail;
  const auto bag_index = read_bag_index(layout.bag_index_path());
  const MilHeadParams fused_head = read_head(layout.head_path("fused"));
  ensure_dir(layout.attention_dir());
  ensure_dir(layout.heatmaps_dir());
  int rendered = 0;
  for (const auto& rec : records) {
    if (rec.role == "pretrain") continue;
    if (only_slide.empty() ? rec.role != "internal-val" : rec.slide_id != only_slide) continue;
    auto it = bag_index.find(rec.slide_id);
    if (it == bag_index.end()) {
      throw std::runtime_error("heatmap: slide " + rec.slide_id + " has no embedding bag");
    }
    const EmbeddingBag bag = read_bag(layout.join(it->second));
    const Eigen::VectorXf a = gated_attention(bag.embeddings, fused_head);
    std::vector<AttentionRow> rows;
    for (Eigen::Index t = 0; t < a.size(); ++t) {
      rows.push_back({bag.coords[size_t(t)].first, bag.coords[size_t(t)].second, double(a(t))});
    }
    write_attention_csv(layout.attention_path(rec.slide_id), rec.slide_id, rows);
    const ImageRGB slide = read_png_rgb(rec.image_path);
    const ImageRGB hm = render_heatmap(rows, slide.width, slide.height, int(bag.tile_size),
                                       cfg.heatmap_scale, &slide, cfg.heatmap_alpha);
    write_png_rgb(layout.heatmap_path(rec.slide_id), hm);
    ++rendered;
  }
  if (!only_slide.empty() && rendered == 0) {
    throw std::runtime_error("heatmap: slide " + only_slide + " not found outside pretrain roles");
  }
  stage_note(log, "heatmap: rendered " + std::to_string(rendered) + " slides -> " +
                      layout.heatmaps_dir());
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

inline std::string hash_hex(uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline void write_run_manifest(const ExperimentConfig& cfg, const RunLayout& layout) {
  std::ofstream cfg_out(layout.config_used_path());
  if (!cfg_out) throw std::runtime_error("cannot write " + layout.config_used_path());
  cfg_out << cfg.effective_text;
  cfg_out.close();

  std::vector<std::pair<std::string, std::string>> lines;
  lines.emplace_back("config_hash", hash_hex(fnv1a64(cfg.effective_text)));
  lines.emplace_back("deterministic", cfg.deterministic ? "true" : "false");
  lines.emplace_back("profile", cfg.profile.name);
  lines.emplace_back("seed", std::to_string(cfg.seed));
  const std::vector<std::string> ckpts = {"pretrain/encoder_init.brck", "pretrain/encoder.brck",
                                          "mil/head_fused.brck", "mil/head_generalist.brck"};
  for (const auto& rel : ckpts) {
    const std::string path = layout.join(rel);
    if (std::filesystem::exists(path)) {
      lines.emplace_back("checkpoint." + rel, hash_hex(file_hash(path)));
    }
  }
  std::sort(lines.begin(), lines.end());
  std::ofstream out(layout.run_manifest_path());
  if (!out) throw std::runtime_error("cannot write " + layout.run_manifest_path());
  for (const auto& [k, v] : lines) out << k << " = " << v << "\n";
}

// synth -> tile -> pretrain -> embed -> train-mil -> evaluate/survival
// (-> ihc-reduce for binary tasks), then the run manifest. Rerunning with the
// same config and seed reproduces every report byte for byte.
inline std::vector<MetricRow> run_experiment(const ExperimentConfig& cfg, const StageLog& log = {}) {
  const RunLayout layout(cfg.out_dir);
  ensure_dir(layout.root);
  const std::vector<SlideRecord> records = synth_stage(cfg, layout, log);
  tile_stage(records, cfg, layout, log);

  std::vector<MetricRow> rows;
  if (cfg.pretrain_fraction > 0) {
    pretrain_stage(records, cfg, layout, log);
    embed_stage(records, read_encoder(layout.encoder_path()), cfg, layout, log);
  } else {
    // No pretraining requested: embed with the untrained encoder.
    const EncoderCheckpoint enc = make_untrained_encoder(cfg.profile.vit, cfg.profile.lora,
                                                         cfg.profile.ssl.head, cfg.seed);
    write_encoder(layout.encoder_init_path(), enc);
    embed_stage(records, enc, cfg, layout, log);
  }

  if (cfg.split_mode == "holdout") train_mil_stage(records, cfg, layout, log);
  if (cfg.task.classification()) {
    rows = evaluate_stage(records, cfg, layout, log);
    if (cfg.task.kind == TaskKind::binary && cfg.split_mode == "holdout") {
      ihc_stage(records, cfg, layout, log);
    }
  } else {
    rows = survival_stage(records, cfg, layout, log);
  }
  write_run_manifest(cfg, layout);
  stage_note(log, "run: complete -> " + layout.run_manifest_path());
  return rows;
}

}  // namespace bright
