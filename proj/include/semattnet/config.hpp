#pragma once

// Run configuration in a flat key = value text format:
//
//   # comment
//   preset = tiny
//   fusion = sammafb
//
// Blank lines and '#' comments are ignored. Keys are the field names listed
// in RunConfig::keys(). Values given on the command line override the file;
// the preset supplies defaults for everything else.

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "semattnet/data.hpp"
#include "semattnet/losses.hpp"
#include "semattnet/model.hpp"
#include "semattnet/optim.hpp"

namespace semattnet {

enum class Preset { tiny, full };
enum class SemanticInput { auto_, on, off };

inline std::string to_string(Preset p) { return p == Preset::tiny ? "tiny" : "full"; }
inline std::string to_string(SemanticInput s) {
  return s == SemanticInput::on ? "on" : s == SemanticInput::off ? "off" : "auto";
}

struct RunConfig {
  // model
  Preset preset = Preset::tiny;
  FusionMode fusion = FusionMode::sammafb;
  BranchLayout branches = BranchLayout::cg_sg_dg;
  SemanticInput semantic_input = SemanticInput::auto_;
  bool refinement = true;
  int cspn_kernel = 3;

  // optimization
  std::string optimizer = "adam";
  double lr = 0.00128;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double weight_decay = 1e-6;
  int batch_size = 8;
  int epochs = 60;              // backbone stage
  int refine_epochs = 95;       // refinement stage, only with refinement = on
  int refine_warmup_epochs = 1; // leading refinement epochs with a frozen backbone
  double lambda_init = 0.2;
  int lambda_decay_end = 10;
  double plateau_factor = 0.5;
  int plateau_patience = 3;
  std::uint64_t seed = 0;

  // data
  std::string data_root = "data";
  std::string train_split = "train";
  std::string val_split = "val";
  bool bottom_crop = true;
  bool augment = true;
  int crop_height = kKittiTrainCrop.height;
  int crop_width = kKittiTrainCrop.width;

  // run artifacts
  std::string output_dir = "runs/default";
  std::string checkpoint;  // eval / infer / visualize input, or train resume point
  std::string init_from;   // train: start from these weights (non-strict)
  std::string split;       // eval / infer split, defaults to val_split
  std::string sample;      // visualize: sample id
  std::string pred_dir;    // eval: score saved predictions instead of running the model

  // synth-data
  int synth_count = 8;
  int synth_val_count = 2;
  int synth_height = 64;
  int synth_width = 96;

  static RunConfig defaults(Preset p) {
    RunConfig c;
    c.preset = p;
    if (p == Preset::tiny) {
      c.batch_size = 1;
      c.epochs = 50;
      c.refine_epochs = 10;
      c.bottom_crop = false;
      c.augment = false;
    }
    return c;
  }

  static const std::vector<std::string>& keys() {
    static const std::vector<std::string> k{
        "preset", "fusion", "branches", "semantic_input", "refinement", "cspn_kernel",
        "optimizer", "lr", "beta1", "beta2", "weight_decay", "batch_size", "epochs",
        "refine_epochs", "refine_warmup_epochs", "lambda_init", "lambda_decay_end",
        "plateau_factor", "plateau_patience", "seed", "data_root", "train_split", "val_split",
        "bottom_crop", "augment", "crop_height", "crop_width", "output_dir", "checkpoint",
        "init_from", "split", "sample", "pred_dir", "synth_count", "synth_val_count",
        "synth_height", "synth_width"};
    return k;
  }

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  bool uses_semantic() const {
    return semantic_input == SemanticInput::auto_ ? branches == BranchLayout::cg_sg_dg
                                                  : semantic_input == SemanticInput::on;
  }
  std::string eval_split() const { return split.empty() ? val_split : split; }

  void validate() const {
    if (branches == BranchLayout::cg_dg && semantic_input == SemanticInput::on)
      throw ConfigError("branches = cg_dg has no semantic branch and does not accept semantic input");
    if (branches == BranchLayout::cg_sg_dg && semantic_input == SemanticInput::off)
      throw ConfigError("branches = cg_sg_dg requires semantic input");
    if (optimizer != "adam") throw ConfigError("optimizer must be 'adam', got '" + optimizer + "'");
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
      throw ConfigError("beta1 and beta2 must lie in [0, 1)");
    if (weight_decay < 0) throw ConfigError("weight_decay must be nonnegative");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (epochs < 0 || refine_epochs < 0 || refine_warmup_epochs < 0)
      throw ConfigError("epoch counts must be nonnegative");
    if (refine_warmup_epochs > refine_epochs)
      throw ConfigError("refine_warmup_epochs exceeds refine_epochs");
    if (lambda_init < 0 || lambda_decay_end < 1)
      throw ConfigError("lambda_init must be >= 0 and lambda_decay_end >= 1");
    if (!(plateau_factor > 0 && plateau_factor < 1) || plateau_patience < 0)
      throw ConfigError("plateau_factor must lie in (0, 1) and plateau_patience >= 0");
    if (cspn_kernel < 3 || cspn_kernel % 2 == 0) throw ConfigError("cspn_kernel must be odd and >= 3");
    if (crop_height < kInputMultiple || crop_width < kInputMultiple || crop_height % kInputMultiple ||
        crop_width % kInputMultiple)
      throw ConfigError("crop size must be a positive multiple of 32");
    if (synth_count < 1 || synth_val_count < 0) throw ConfigError("synth_count must be >= 1");
    if (synth_height % kInputMultiple || synth_width % kInputMultiple || synth_height < 1 ||
        synth_width < 1)
      throw ConfigError("synth_height and synth_width must be positive multiples of 32");
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.backbone = preset == Preset::tiny ? BackboneConfig::tiny() : BackboneConfig::full();
    m.backbone.layout = branches;
    m.backbone.fusion = fusion;
    m.refinement = refinement;
    m.cspn_kernel = cspn_kernel;
    return m;
  }

  AdamOptions adam_options() const { return {lr, beta1, beta2, 1e-8, weight_decay}; }
  LossWeights loss_weights() const { return {lambda_init, lambda_init, lambda_init, lambda_decay_end}; }
  PlateauScheduler plateau() const { return {plateau_factor, plateau_patience}; }

  AugmentOptions augment_options() const {
    AugmentOptions a;
    a.crop = {crop_height, crop_width};
    return a;
  }

  // Fields that fix the parameter set; checkpoints record this.
  std::string architecture() const {
    return "preset=" + to_string(preset) + ";fusion=" + to_string(fusion) +
           ";branches=" + to_string(branches) + ";refinement=" + (refinement ? "on" : "off") +
           ";cspn_kernel=" + std::to_string(cspn_kernel);
  }
  std::string architecture_hash() const {
    std::ostringstream os;
    os << std::hex << hash_id(architecture());
    return os.str();
  }

  std::string to_text() const {
    std::string out = "# resolved run configuration\n";
    for (const auto& k : keys()) out += k + " = " + get(k) + "\n";
    return out;
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

template <class N>
N parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  N out{};
  if (!(is >> out) || !(is >> std::ws).eof())
    throw ConfigError("'" + key + "': cannot parse '" + v + "' as a number");
  return out;
}

inline bool parse_switch(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ConfigError("'" + key + "' must be on or off, got '" + v + "'");
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace config_detail

inline void RunConfig::set(const std::string& key, const std::string& raw) {
  using namespace config_detail;
  const std::string v = trim(raw);
  if (key == "preset") {
    if (v == "tiny") preset = Preset::tiny;
    else if (v == "full") preset = Preset::full;
    else throw ConfigError("preset must be tiny or full, got '" + v + "'");
  } else if (key == "fusion") {
    if (v == "add") fusion = FusionMode::add;
    else if (v == "concat") fusion = FusionMode::concat;
    else if (v == "sammafb") fusion = FusionMode::sammafb;
    else throw ConfigError("fusion must be add, concat or sammafb, got '" + v + "'");
  } else if (key == "branches") {
    if (v == "cg_dg") branches = BranchLayout::cg_dg;
    else if (v == "cg_sg_dg") branches = BranchLayout::cg_sg_dg;
    else throw ConfigError("branches must be cg_dg or cg_sg_dg, got '" + v + "'");
  } else if (key == "semantic_input") {
    if (v == "auto") semantic_input = SemanticInput::auto_;
    else semantic_input = parse_switch(key, v) ? SemanticInput::on : SemanticInput::off;
  } else if (key == "refinement") refinement = parse_switch(key, v);
  else if (key == "cspn_kernel") cspn_kernel = parse_number<int>(key, v);
  else if (key == "optimizer") optimizer = v;
  else if (key == "lr") lr = parse_number<double>(key, v);
  else if (key == "beta1") beta1 = parse_number<double>(key, v);
  else if (key == "beta2") beta2 = parse_number<double>(key, v);
  else if (key == "weight_decay") weight_decay = parse_number<double>(key, v);
  else if (key == "batch_size") batch_size = parse_number<int>(key, v);
  else if (key == "epochs") epochs = parse_number<int>(key, v);
  else if (key == "refine_epochs") refine_epochs = parse_number<int>(key, v);
  else if (key == "refine_warmup_epochs") refine_warmup_epochs = parse_number<int>(key, v);
  else if (key == "lambda_init") lambda_init = parse_number<double>(key, v);
  else if (key == "lambda_decay_end") lambda_decay_end = parse_number<int>(key, v);
  else if (key == "plateau_factor") plateau_factor = parse_number<double>(key, v);
  else if (key == "plateau_patience") plateau_patience = parse_number<int>(key, v);
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, v);
  else if (key == "data_root") data_root = v;
  else if (key == "train_split") train_split = v;
  else if (key == "val_split") val_split = v;
  else if (key == "bottom_crop") bottom_crop = parse_switch(key, v);
  else if (key == "augment") augment = parse_switch(key, v);
  else if (key == "crop_height") crop_height = parse_number<int>(key, v);
  else if (key == "crop_width") crop_width = parse_number<int>(key, v);
  else if (key == "output_dir") output_dir = v;
  else if (key == "checkpoint") checkpoint = v;
  else if (key == "init_from") init_from = v;
  else if (key == "split") split = v;
  else if (key == "sample") sample = v;
  else if (key == "pred_dir") pred_dir = v;
  else if (key == "synth_count") synth_count = parse_number<int>(key, v);
  else if (key == "synth_val_count") synth_val_count = parse_number<int>(key, v);
  else if (key == "synth_height") synth_height = parse_number<int>(key, v);
  else if (key == "synth_width") synth_width = parse_number<int>(key, v);
  else throw ConfigError("unknown configuration key '" + key + "'");
}

inline std::string RunConfig::get(const std::string& key) const {
  using config_detail::fmt;
  auto sw = [](bool b) { return std::string(b ? "on" : "off"); };
  if (key == "preset") return to_string(preset);
  if (key == "fusion") return to_string(fusion);
  if (key == "branches") return to_string(branches);
  if (key == "semantic_input") return to_string(semantic_input);
  if (key == "refinement") return sw(refinement);
  if (key == "cspn_kernel") return std::to_string(cspn_kernel);
  if (key == "optimizer") return optimizer;
  if (key == "lr") return fmt(lr);
  if (key == "beta1") return fmt(beta1);
  if (key == "beta2") return fmt(beta2);
  if (key == "weight_decay") return fmt(weight_decay);
  if (key == "batch_size") return std::to_string(batch_size);
  if (key == "epochs") return std::to_string(epochs);
  if (key == "refine_epochs") return std::to_string(refine_epochs);
  if (key == "refine_warmup_epochs") return std::to_string(refine_warmup_epochs);
  if (key == "lambda_init") return fmt(lambda_init);
  if (key == "lambda_decay_end") return std::to_string(lambda_decay_end);
  if (key == "plateau_factor") return fmt(plateau_factor);
  if (key == "plateau_patience") return std::to_string(plateau_patience);
  if (key == "seed") return std::to_string(seed);
  if (key == "data_root") return data_root;
  if (key == "train_split") return train_split;
  if (key == "val_split") return val_split;
  if (key == "bottom_crop") return sw(bottom_crop);
  if (key == "augment") return sw(augment);
  if (key == "crop_height") return std::to_string(crop_height);
  if (key == "crop_width") return std::to_string(crop_width);
  if (key == "output_dir") return output_dir;
  if (key == "checkpoint") return checkpoint;
  if (key == "init_from") return init_from;
  if (key == "split") return split;
  if (key == "sample") return sample;
  if (key == "pred_dir") return pred_dir;
  if (key == "synth_count") return std::to_string(synth_count);
  if (key == "synth_val_count") return std::to_string(synth_val_count);
  if (key == "synth_height") return std::to_string(synth_height);
  if (key == "synth_width") return std::to_string(synth_width);
  throw ConfigError("unknown configuration key '" + key + "'");
}

using ConfigEntries = std::vector<std::pair<std::string, std::string>>;

inline ConfigEntries parse_config_text(const std::string& text, const std::string& origin = "config") {
  ConfigEntries out;
  std::istringstream in(text);
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    out.emplace_back(config_detail::trim(line.substr(0, eq)), config_detail::trim(line.substr(eq + 1)));
  }
  return out;
}

inline ConfigEntries read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config_text(text.str(), path);
}

// Preset defaults, then file entries, then overrides; the last preset named
// anywhere picks the defaults.
inline RunConfig resolve_config(const ConfigEntries& file, const ConfigEntries& overrides) {
  Preset preset = Preset::tiny;
  for (const auto* list : {&file, &overrides})
    for (const auto& [k, v] : *list)
      if (k == "preset") {
        RunConfig probe;
        probe.set(k, v);
        preset = probe.preset;
      }
  RunConfig c = RunConfig::defaults(preset);
  for (const auto* list : {&file, &overrides})
    for (const auto& [k, v] : *list) c.set(k, v);
  c.validate();
  return c;
}

// The seven ablation configurations, labelled 'a' to 'g'.
struct AblationRow {
  char label;
  BranchLayout branches;
  FusionMode fusion;
  bool refinement;
};

inline constexpr std::array<AblationRow, 7> kAblationRows{{
    {'a', BranchLayout::cg_dg, FusionMode::add, false},
    {'b', BranchLayout::cg_dg, FusionMode::concat, false},
    {'c', BranchLayout::cg_dg, FusionMode::concat, true},
    {'d', BranchLayout::cg_sg_dg, FusionMode::concat, false},
    {'e', BranchLayout::cg_sg_dg, FusionMode::concat, true},
    {'f', BranchLayout::cg_sg_dg, FusionMode::sammafb, false},
    {'g', BranchLayout::cg_sg_dg, FusionMode::sammafb, true},
}};

// Full-scale validation RMSE (mm) reported for each row.
inline constexpr std::array<double, 7> kAblationPublishedRmse{782.89, 781.66, 762.84, 755.16,
                                                              750.06, 753.02, 738.13};

inline RunConfig ablation_config(char label, RunConfig base = RunConfig::defaults(Preset::tiny)) {
  for (const auto& row : kAblationRows)
    if (row.label == label) {
      base.branches = row.branches;
      base.fusion = row.fusion;
      base.refinement = row.refinement;
      base.semantic_input = SemanticInput::auto_;
      base.validate();
      return base;
    }
  throw ConfigError(std::string("no ablation row '") + label + "'");
}

}  // namespace semattnet
