#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semattnet/checkpoint.hpp"
#include "semattnet/config.hpp"
#include "semattnet/dataset.hpp"

namespace semattnet {

namespace fs = std::filesystem;

// Smallest positive depth a 16-bit depth PNG can hold. Predictions are
// clamped to it before scoring so inverse metrics stay defined.
inline constexpr float kMinPredictionDepth = 1.0f / 256.0f;

inline void write_resolved_config(const RunConfig& cfg, const std::string& command) {
  fs::create_directories(cfg.output_dir);
  std::ofstream out(fs::path(cfg.output_dir) / (command + "_config.txt"));
  if (!out) throw DataError("cannot write into output_dir '" + cfg.output_dir + "'");
  out << cfg.to_text();
}

inline Dataset open_dataset(const RunConfig& cfg, const std::string& split, bool training) {
  LoaderOptions opt;
  opt.seed = cfg.seed;
  opt.bottom_crop = cfg.bottom_crop;
  opt.augment = training && cfg.augment;
  opt.augmentation = cfg.augment_options();
  return Dataset(DatasetLayout::open(resolve_data_root(cfg.data_root), split), opt);
}

inline Batch<float> make_batch(const RunConfig& cfg, std::span<const SceneSample> samples) {
  return collate<float>(samples, cfg.uses_semantic() ? BranchLayout::cg_sg_dg : BranchLayout::cg_dg);
}

inline Tensor<float> clamp_prediction(Tensor<float> pred) {
  for (auto& v : pred) v = std::max(v, kMinPredictionDepth);
  return pred;
}

inline nlohmann::json manifest_for(const RunConfig& cfg) {
  return {{"architecture", cfg.architecture()}, {"architecture_hash", cfg.architecture_hash()}};
}

inline void check_compatible(const RunConfig& cfg, const Checkpoint& ck, const std::string& path) {
  const std::string have = ck.manifest.value("architecture", std::string("<none>"));
  if (have != cfg.architecture())
    throw VersionError("checkpoint '" + path + "' was written for [" + have +
                       "] but the configuration describes [" + cfg.architecture() + "]");
}

enum class Stage { backbone, refine_warmup, joint };

inline std::string to_string(Stage s) {
  return s == Stage::backbone ? "backbone" : s == Stage::refine_warmup ? "refine_warmup" : "joint";
}

struct StepStats {
  double loss = 0;
  double rmse_m = 0;  // of the stage's prediction on this batch
};

struct EpochRecord {
  int epoch = 0;
  Stage stage = Stage::backbone;
  double lr = 0;
  double train_loss = 0;
  double train_rmse_mm = 0;
  std::optional<MetricReport> val;

  nlohmann::json to_json() const {
    nlohmann::json j{{"epoch", epoch},
                     {"stage", to_string(stage)},
                     {"lr", lr},
                     {"train_loss", train_loss},
                     {"train_rmse_mm", train_rmse_mm}};
    if (val) j["val"] = val->to_json();
    return j;
  }
};

struct EvalResult {
  std::vector<std::pair<std::string, MetricReport>> samples;
  MetricReport aggregate;  // mean of per-sample metrics

  nlohmann::json to_json() const {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& [id, m] : samples) {
      auto j = m.to_json();
      j["id"] = id;
      per.push_back(j);
    }
    auto agg = aggregate.to_json();
    agg["count"] = samples.size();
    return {{"aggregate", agg}, {"samples", per}};
  }
};

inline MetricReport mean_report(const std::vector<std::pair<std::string, MetricReport>>& samples) {
  MetricReport m;
  if (samples.empty()) return m;
  for (const auto& [id, r] : samples) {
    m.rmse_mm += r.rmse_mm;
    m.mae_mm += r.mae_mm;
    m.irmse_per_km += r.irmse_per_km;
    m.imae_per_km += r.imae_per_km;
    m.valid_pixels += r.valid_pixels;
  }
  const double n = static_cast<double>(samples.size());
  m.rmse_mm /= n;
  m.mae_mm /= n;
  m.irmse_per_km /= n;
  m.imae_per_km /= n;
  return m;
}

// Owns the model and optimizer state for one training run.
class Trainer {
 public:
  explicit Trainer(const RunConfig& cfg)
      : cfg_(cfg),
        model_(cfg.model_config(), cfg.seed),
        opt_(cfg.adam_options()),
        plateau_(cfg.plateau()) {
    cfg_.validate();
  }

  const RunConfig& config() const { return cfg_; }
  Model<float>& model() { return model_; }
  const Model<float>& model() const { return model_; }
  Adam<float>& optimizer() { return opt_; }
  int epoch() const { return epoch_; }
  int total_epochs() const { return cfg_.epochs + (cfg_.refinement ? cfg_.refine_epochs : 0); }

  Stage stage_of(int epoch) const {
    if (!cfg_.refinement || epoch < cfg_.epochs) return Stage::backbone;
    return epoch - cfg_.epochs < cfg_.refine_warmup_epochs ? Stage::refine_warmup : Stage::joint;
  }

  // One optimizer step on a batch. Throws NumericalError on a non-finite loss.
  StepStats step(const Batch<float>& batch, int epoch) {
    const Stage stage = stage_of(epoch);
    auto& store = model_.params();
    store.set_trainable("model.backbone", stage != Stage::refine_warmup);
    store.zero_grad();
    const bool refine = stage != Stage::backbone;
    const auto out = model_.forward(batch.input, true, refine);
    const auto& bo = out.backbone;
    Var<float> loss;
    std::ostringstream parts;
    if (stage == Stage::refine_warmup) {
      loss = masked_l2(out.refined, batch.gt);
      parts << "l_refined=" << loss.value()[0];
    } else {
      const auto l_cg = masked_l2(bo.cg.depth, batch.gt);
      const auto l_sg = bo.sg ? masked_l2(bo.sg->depth, batch.gt) : Var<float>();
      const auto l_dg = masked_l2(bo.dg.depth, batch.gt);
      const auto l_fused = masked_l2(bo.fused, batch.gt);
      parts << "l_cg=" << l_cg.value()[0] << " l_dg=" << l_dg.value()[0]
            << " l_fused=" << l_fused.value()[0];
      if (l_sg.defined()) parts << " l_sg=" << l_sg.value()[0];
      for (const auto& l : {l_cg, l_dg, l_fused})
        if (!std::isfinite(l.value()[0])) non_finite(epoch, parts.str());
      if (l_sg.defined() && !std::isfinite(l_sg.value()[0])) non_finite(epoch, parts.str());
      loss = total_loss(l_cg, l_sg, l_dg, l_fused, cfg_.loss_weights(), epoch);
      if (refine) {
        const auto l_ref = masked_l2(out.refined, batch.gt);
        parts << " l_refined=" << l_ref.value()[0];
        const std::vector<Var<float>> terms{loss, l_ref};
        loss = ops::add_n<float>(terms);
      }
    }
    const double value = loss.value()[0];
    if (!std::isfinite(value)) non_finite(epoch, parts.str());
    backward(loss);
    opt_.step(store);
    ++steps_;
    const auto& pred = refine ? out.refined.value() : bo.fused.value();
    return {value, std::sqrt(masked_l2(pred, batch.gt))};
  }

  // Runs the next epoch over `train`; validates on `val` when given.
  EpochRecord run_epoch(const Dataset& train, const Dataset* val) {
    const int e = epoch_;
    const Stage stage = stage_of(e);
    if (cfg_.refinement && e == cfg_.epochs && e > 0) {
      // The refinement stage starts from the stage-1 weights with a fresh
      // optimizer and learning-rate schedule.
      opt_ = Adam<float>(cfg_.adam_options());
      plateau_ = cfg_.plateau();
    }
    const auto order = train.order(e, true);
    EpochRecord rec{e, stage, opt_.lr(), 0, 0, std::nullopt};
    int batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg_.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg_.batch_size);
      const std::vector<std::size_t> idx(order.begin() + b, order.begin() + end);
      const auto samples = train.get_batch(idx, e, true);
      const auto stats = step(make_batch(cfg_, samples), e);
      rec.train_loss += stats.loss;
      rec.train_rmse_mm += stats.rmse_m * 1000.0;
      ++batches;
    }
    if (batches > 0) {
      rec.train_loss /= batches;
      rec.train_rmse_mm /= batches;
    }
    if (val) {
      rec.val = evaluate(*val, stage != Stage::backbone).aggregate;
      opt_.set_lr(plateau_.observe(rec.val->rmse_mm, opt_.lr()));
    } else {
      opt_.set_lr(plateau_.observe(rec.train_rmse_mm, opt_.lr()));
    }
    ++epoch_;
    return rec;
  }

  Tensor<float> predict(const SceneSample& s, bool refine = true) const {
    NoGradGuard guard;
    const std::vector<SceneSample> one{s};
    const auto out = model_.forward(make_batch(cfg_, one).input, false, refine);
    return clamp_prediction(refine ? out.prediction().value() : out.backbone.fused.value());
  }

  EvalResult evaluate(const Dataset& data, bool refine = true) const {
    EvalResult r;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto s = data.get(i, 0);
      r.samples.emplace_back(s.id, metrics(predict(s, refine), s.gt_depth));
    }
    r.aggregate = mean_report(r.samples);
    return r;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.manifest = manifest_for(cfg_);
    ck.manifest["epoch"] = epoch_;
    ck.manifest["steps"] = steps_;
    ck.manifest["plateau"] = {{"best", plateau_.best}, {"bad_epochs", plateau_.bad_epochs}};
    store_to_checkpoint(model_.params(), ck);
    optimizer_to_checkpoint(opt_, ck);
    return ck;
  }

  void resume(const Checkpoint& ck, const std::string& path) {
    check_compatible(cfg_, ck, path);
    load_store(model_.params(), ck, true);
    load_optimizer(opt_, ck);
    epoch_ = ck.manifest.value("epoch", 0);
    steps_ = ck.manifest.value("steps", 0L);
    if (ck.manifest.contains("plateau")) {
      const auto& p = ck.manifest["plateau"];
      // An unset best (infinity) is stored as null.
      if (p.contains("best") && p["best"].is_number()) plateau_.best = p["best"].get<double>();
      plateau_.bad_epochs = p.value("bad_epochs", 0);
    }
  }

  // Weights only; tensors the checkpoint lacks keep their initial values.
  void init_from(const Checkpoint& ck) { load_store(model_.params(), ck, false); }

 private:
  [[noreturn]] void non_finite(int epoch, const std::string& parts) const {
    throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                         std::to_string(steps_) + " (" + parts + ", lr=" + std::to_string(opt_.lr()) +
                         ")");
  }

  RunConfig cfg_;
  Model<float> model_;
  Adam<float> opt_;
  PlateauScheduler plateau_;
  int epoch_ = 0;
  long steps_ = 0;
};

// ---- commands

struct TrainSummary {
  std::vector<EpochRecord> log;
  std::string last_checkpoint;
};

inline TrainSummary cmd_train(const RunConfig& cfg, std::ostream& log = std::cout) {
  cfg.validate();
  const Dataset train = open_dataset(cfg, cfg.train_split, true);
  std::optional<Dataset> val;
  if (fs::exists(fs::path(resolve_data_root(cfg.data_root)) / (cfg.val_split + ".txt")))
    val.emplace(open_dataset(cfg, cfg.val_split, false));
  else
    log << "no '" << cfg.val_split << "' split; plateau scheduling follows training RMSE\n";
  write_resolved_config(cfg, "train");

  Trainer trainer(cfg);
  if (!cfg.checkpoint.empty()) {
    trainer.resume(read_checkpoint(cfg.checkpoint), cfg.checkpoint);
    log << "resumed from " << cfg.checkpoint << " at epoch " << trainer.epoch() << "\n";
  } else if (!cfg.init_from.empty()) {
    trainer.init_from(read_checkpoint(cfg.init_from));
  }

  const fs::path out(cfg.output_dir);
  fs::create_directories(out / "checkpoints");
  std::ofstream metrics_log(out / "metrics.jsonl", std::ios::app);
  TrainSummary summary;
  while (trainer.epoch() < trainer.total_epochs()) {
    const auto rec = trainer.run_epoch(train, val ? &*val : nullptr);
    auto ck = trainer.to_checkpoint();
    if (rec.val) ck.manifest["metrics"] = rec.val->to_json();
    ck.manifest["stage"] = to_string(rec.stage);
    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%03d.ck", rec.epoch + 1);
    write_checkpoint(out / "checkpoints" / name, ck);
    write_checkpoint(out / "checkpoints" / "last.ck", ck);
    summary.last_checkpoint = (out / "checkpoints" / "last.ck").string();
    metrics_log << rec.to_json().dump() << "\n";
    metrics_log.flush();
    log << "epoch " << rec.epoch + 1 << "/" << trainer.total_epochs() << " [" << to_string(rec.stage)
        << "] loss " << rec.train_loss << " train_rmse_mm " << rec.train_rmse_mm;
    if (rec.val) log << " val_rmse_mm " << rec.val->rmse_mm;
    log << " lr " << rec.lr << "\n";
    summary.log.push_back(rec);
  }
  return summary;
}

namespace cmd_detail {

inline Trainer load_trainer(const RunConfig& cfg) {
  if (cfg.checkpoint.empty()) throw ConfigError("a checkpoint is required (checkpoint = <path>)");
  const auto ck = read_checkpoint(cfg.checkpoint);
  check_compatible(cfg, ck, cfg.checkpoint);
  Trainer t(cfg);
  load_store(t.model().params(), ck, true);
  return t;
}

inline std::string json_text(const nlohmann::json& j) { return j.dump(2); }

}  // namespace cmd_detail

// Scores the model (or saved predictions when pred_dir is set) on a split.
inline EvalResult cmd_eval(const RunConfig& cfg, std::ostream& out = std::cout) {
  cfg.validate();
  const std::string split = cfg.eval_split();
  const Dataset data = open_dataset(cfg, split, false);
  write_resolved_config(cfg, "eval");
  EvalResult r;
  if (!cfg.pred_dir.empty()) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto s = data.get(i, 0);
      const auto pred = load_depth_png((fs::path(cfg.pred_dir) / (s.id + ".png")).string());
      if (pred.shape() != s.gt_depth.shape())
        throw ShapeError("prediction for '" + s.id + "' is " + pred.shape().str() + ", ground truth " +
                         s.gt_depth.shape().str());
      r.samples.emplace_back(s.id, metrics(pred, s.gt_depth));
    }
    r.aggregate = mean_report(r.samples);
  } else {
    r = cmd_detail::load_trainer(cfg).evaluate(data);
  }
  auto report = r.to_json();
  report["split"] = split;
  report["source"] = cfg.pred_dir.empty() ? cfg.checkpoint : cfg.pred_dir;
  std::ofstream file(fs::path(cfg.output_dir) / ("eval_" + split + ".json"));
  file << cmd_detail::json_text(report) << "\n";
  out << cmd_detail::json_text(report) << "\n";
  return r;
}

// Writes 16-bit depth predictions to <output_dir>/pred/<id>.png.
inline std::vector<std::string> cmd_infer(const RunConfig& cfg, std::ostream& log = std::cout) {
  cfg.validate();
  const Dataset data = open_dataset(cfg, cfg.eval_split(), false);
  write_resolved_config(cfg, "infer");
  const Trainer t = cmd_detail::load_trainer(cfg);
  const fs::path dir = fs::path(cfg.output_dir) / "pred";
  fs::create_directories(dir);
  std::vector<std::string> written;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!cfg.sample.empty() && data.ids()[i] != cfg.sample) continue;
    const auto s = data.get(i, 0);
    const auto path = (dir / (s.id + ".png")).string();
    save_depth_png(path, t.predict(s));
    written.push_back(path);
  }
  if (!cfg.sample.empty() && written.empty())
    throw DataError("sample '" + cfg.sample + "' is not in split '" + cfg.eval_split() + "'");
  log << "wrote " << written.size() << " predictions to " << dir.string() << "\n";
  return written;
}

// ---- visualization

struct Rgb {
  std::uint8_t r, g, b;
};

// Blue (0) through cyan, green and yellow to red (1).
inline Rgb colormap(double t) {
  static constexpr std::array<std::array<double, 3>, 5> stops{
      {{0, 0, 0.5}, {0, 0.8, 1}, {0.2, 0.9, 0.2}, {1, 0.85, 0}, {0.8, 0, 0}}};
  t = std::clamp(std::isfinite(t) ? t : 1.0, 0.0, 1.0) * (stops.size() - 1);
  const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(t), stops.size() - 2);
  const double f = t - static_cast<double>(i);
  auto ch = [&](int c) {
    return static_cast<std::uint8_t>(std::lround(255.0 * (stops[i][c] * (1 - f) + stops[i + 1][c] * f)));
  };
  return {ch(0), ch(1), ch(2)};
}

inline Image8 render_colormap(const Tensor<float>& plane, double vmin, double vmax,
                              const Tensor<float>* mask = nullptr) {
  Image8 img{plane.w(), plane.h(), 3, std::vector<std::uint8_t>(plane.shape().plane() * 3)};
  const double span = vmax > vmin ? vmax - vmin : 1.0;
  for (std::size_t i = 0; i < plane.shape().plane(); ++i) {
    if (mask && !((*mask)[i] > 0)) continue;  // black
    const Rgb c = colormap((plane[i] - vmin) / span);
    img.pixels[3 * i] = c.r;
    img.pixels[3 * i + 1] = c.g;
    img.pixels[3 * i + 2] = c.b;
  }
  return img;
}

// Absolute error saturating at this many meters in error maps.
inline constexpr double kErrorMapScale = 2.0;

// |pred - gt| at valid pixels, cool = low and warm = high; invalid pixels black.
inline Image8 render_error_map(const Tensor<float>& pred, const Tensor<float>& gt) {
  Tensor<float>::require_same_shape(pred, gt, "render_error_map");
  Tensor<float> err(gt.shape());
  for (std::size_t i = 0; i < gt.size(); ++i) err[i] = std::abs(pred[i] - gt[i]);
  return render_colormap(err, 0.0, kErrorMapScale, &gt);
}

// Softmax weight in [0, 1] as 16-bit gray (value / 65535).
inline Image16 encode_weight(const Tensor<float>& w) {
  Image16 img{w.w(), w.h(), std::vector<std::uint16_t>(w.shape().plane())};
  for (std::size_t i = 0; i < w.shape().plane(); ++i)
    img.pixels[i] = static_cast<std::uint16_t>(std::lround(std::clamp(w[i], 0.0f, 1.0f) * 65535.0));
  return img;
}

struct VisualizeOutput {
  std::vector<std::string> depth_files;       // per branch, fused, refined, error
  std::vector<std::string> confidence_files;  // per-branch softmax weights
};

inline VisualizeOutput visualize_sample(const Trainer& t, const SceneSample& s, const fs::path& dir) {
  NoGradGuard guard;
  fs::create_directories(dir);
  const std::vector<SceneSample> one{s};
  const auto out = t.model().forward(make_batch(t.config(), one).input, false);
  const auto& bo = out.backbone;
  double vmax = 0;
  for (float v : s.gt_depth) vmax = std::max<double>(vmax, v);
  for (float v : bo.fused.value()) vmax = std::max<double>(vmax, v);

  VisualizeOutput files;
  auto depth = [&](const std::string& name, const Tensor<float>& d) {
    const auto path = (dir / ("depth_" + name + ".png")).string();
    write_png_rgb8(path, render_colormap(d, 0.0, vmax));
    files.depth_files.push_back(path);
  };
  std::vector<std::string> names{"cg"};
  if (bo.sg) names.push_back("sg");
  names.push_back("dg");
  const auto depths = bo.depths();
  for (std::size_t b = 0; b < names.size(); ++b) depth(names[b], depths[b].value());
  depth("fused", bo.fused.value());
  if (out.refined.defined()) depth("refined", out.refined.value());
  const auto error_path = (dir / "error.png").string();
  write_png_rgb8(error_path, render_error_map(clamp_prediction(out.prediction().value()), s.gt_depth));
  files.depth_files.push_back(error_path);

  std::vector<Tensor<float>> logits;
  for (const auto& c : bo.confidences()) logits.push_back(c.value());
  const auto weights = confidence_weights<float>(logits);
  for (std::size_t b = 0; b < names.size(); ++b) {
    const auto path = (dir / ("confidence_" + names[b] + ".png")).string();
    write_png16(path, encode_weight(weights[b]));
    files.confidence_files.push_back(path);
  }
  return files;
}

inline VisualizeOutput cmd_visualize(const RunConfig& cfg, std::ostream& log = std::cout) {
  cfg.validate();
  if (cfg.sample.empty()) throw ConfigError("visualize needs a sample id (sample = <id>)");
  std::optional<SceneSample> found;
  for (const auto& split : {cfg.eval_split(), cfg.train_split}) {
    const fs::path list = fs::path(resolve_data_root(cfg.data_root)) / (split + ".txt");
    if (!fs::exists(list)) continue;
    const Dataset data = open_dataset(cfg, split, false);
    const auto it = std::find(data.ids().begin(), data.ids().end(), cfg.sample);
    if (it != data.ids().end()) {
      found = data.get(static_cast<std::size_t>(it - data.ids().begin()), 0);
      break;
    }
  }
  if (!found) throw DataError("sample '" + cfg.sample + "' not found in the configured splits");
  write_resolved_config(cfg, "visualize");
  const Trainer t = cmd_detail::load_trainer(cfg);
  const auto files = visualize_sample(t, *found, fs::path(cfg.output_dir) / "vis" / cfg.sample);
  for (const auto& f : files.depth_files) log << f << "\n";
  for (const auto& f : files.confidence_files) log << f << "\n";
  return files;
}

// Materializes a synthetic train split and a validation split under data_root.
inline void cmd_synth_data(const RunConfig& cfg, std::ostream& log = std::cout) {
  cfg.validate();
  const fs::path root = resolve_data_root(cfg.data_root);
  auto make = [&](const std::string& split, int count, std::uint64_t salt) {
    std::vector<SceneSample> samples;
    for (int i = 0; i < count; ++i) {
      auto s = synth_scene(mix_seed(mix_seed(cfg.seed, salt), static_cast<std::uint64_t>(i)),
                           cfg.synth_height, cfg.synth_width);
      char id[48];
      std::snprintf(id, sizeof(id), "%s_%06d", split.c_str(), i);
      s.id = id;
      samples.push_back(std::move(s));
    }
    materialize(root, split, samples);
    log << "wrote " << count << " samples to split '" << split << "' under " << root.string() << "\n";
  };
  make(cfg.train_split, cfg.synth_count, 1);
  if (cfg.synth_val_count > 0) make(cfg.val_split, cfg.synth_val_count, 2);
  fs::create_directories(cfg.output_dir);
  write_resolved_config(cfg, "synth-data");
}

}  // namespace semattnet
