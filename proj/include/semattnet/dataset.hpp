#pragma once

// On-disk dataset layout:
//
//   <root>/<split>.txt        one sample id per line
//   <root>/rgb/<id>.png       8-bit RGB
//   <root>/semantic/<id>.png  8-bit RGB, color-coded classes
//   <root>/sparse/<id>.png    16-bit depth (value / 256 = meters)
//   <root>/gt/<id>.png        16-bit depth

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "semattnet/backbone.hpp"
#include "semattnet/data.hpp"
#include "semattnet/png_io.hpp"

namespace semattnet {

inline constexpr const char* kDataRootEnv = "SEMATTNET_DATA_ROOT";

// Dataset root from the environment override, else `configured`.
inline std::string resolve_data_root(const std::string& configured) {
  if (const char* env = std::getenv(kDataRootEnv); env && *env) return env;
  return configured;
}

struct DatasetLayout {
  std::filesystem::path root;
  std::string split;
  std::vector<std::string> ids;

  static constexpr std::array<const char*, 4> kFolders{"rgb", "semantic", "sparse", "gt"};

  std::filesystem::path path(const char* folder, const std::string& id) const {
    return root / folder / (id + ".png");
  }

  static DatasetLayout open(const std::filesystem::path& root, const std::string& split) {
    const auto list = root / (split + ".txt");
    std::ifstream in(list);
    if (!in) throw DataError("missing split file '" + list.string() + "'");
    DatasetLayout layout{root, split, {}};
    for (std::string line; std::getline(in, line);) {
      line.erase(line.find_last_not_of(" \t\r\n") + 1);
      if (!line.empty()) layout.ids.push_back(line);
    }
    if (layout.ids.empty()) throw DataError("split '" + list.string() + "' lists no samples");
    layout.validate();
    return layout;
  }

  void validate() const {
    for (const auto& id : ids)
      for (const char* folder : kFolders)
        if (!std::filesystem::exists(path(folder, id)))
          throw DataError("sample '" + id + "' is missing " + path(folder, id).string());
  }

  SceneSample load(const std::string& id) const {
    SceneSample s{load_rgb_png(path("rgb", id).string()), load_rgb_png(path("semantic", id).string()),
                  load_depth_png(path("sparse", id).string()), load_depth_png(path("gt", id).string()), id};
    s.validate();
    return s;
  }
};

// Writes samples in the on-disk layout and returns it.
inline DatasetLayout materialize(const std::filesystem::path& root, const std::string& split,
                                 std::span<const SceneSample> samples) {
  for (const char* folder : DatasetLayout::kFolders) std::filesystem::create_directories(root / folder);
  DatasetLayout layout{root, split, {}};
  std::ofstream list(root / (split + ".txt"));
  if (!list) throw DataError("cannot write split file under '" + root.string() + "'");
  for (const auto& s : samples) {
    s.validate();
    save_rgb_png(layout.path("rgb", s.id).string(), s.rgb);
    save_rgb_png(layout.path("semantic", s.id).string(), s.semantic);
    save_depth_png(layout.path("sparse", s.id).string(), s.sparse_depth);
    save_depth_png(layout.path("gt", s.id).string(), s.gt_depth);
    list << s.id << "\n";
    layout.ids.push_back(s.id);
  }
  return layout;
}

struct LoaderOptions {
  std::uint64_t seed = 0;
  bool bottom_crop = false;  // KITTI frames: crop to 352 x 1252 first
  CropSize bottom = kKittiBottomCrop;
  bool augment = false;
  AugmentOptions augmentation{};
};

// Sample source over a list of ids. Each transform draws its randomness from
// (seed, sample id, epoch) alone, so serial and concurrent loading agree.
class Dataset {
 public:
  Dataset(DatasetLayout layout, LoaderOptions options)
      : layout_(std::move(layout)), options_(options) {}

  // In-memory samples (no disk access).
  Dataset(std::vector<SceneSample> samples, LoaderOptions options) : options_(options) {
    for (const auto& s : samples) layout_.ids.push_back(s.id);
    cache_ = std::move(samples);
  }

  std::size_t size() const { return layout_.ids.size(); }
  const std::vector<std::string>& ids() const { return layout_.ids; }
  const LoaderOptions& options() const { return options_; }

  // Permutation of sample indices for an epoch, fixed by (seed, epoch).
  std::vector<std::size_t> order(int epoch, bool shuffle = true) const {
    std::vector<std::size_t> idx(size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (shuffle) {
      std::mt19937_64 rng(mix_seed(options_.seed, 0x5u + static_cast<std::uint64_t>(epoch)));
      std::shuffle(idx.begin(), idx.end(), rng);
    }
    return idx;
  }

  SceneSample get(std::size_t index, int epoch) const {
    SceneSample s = cache_ ? (*cache_)[index] : layout_.load(layout_.ids.at(index));
    if (options_.bottom_crop) s = bottom_crop(s, options_.bottom);
    if (options_.augment) {
      const std::uint64_t seed =
          mix_seed(mix_seed(options_.seed, hash_id(s.id)), static_cast<std::uint64_t>(epoch));
      s = augment(s, seed, options_.augmentation);
    }
    return s;
  }

  std::vector<SceneSample> get_batch(std::span<const std::size_t> indices, int epoch,
                                     bool concurrent = false) const {
    std::vector<SceneSample> out;
    out.reserve(indices.size());
    if (!concurrent) {
      for (std::size_t i : indices) out.push_back(get(i, epoch));
      return out;
    }
    std::vector<std::future<SceneSample>> pending;
    for (std::size_t i : indices)
      pending.push_back(std::async(std::launch::async, [this, i, epoch] { return get(i, epoch); }));
    for (auto& f : pending) out.push_back(f.get());
    return out;
  }

 private:
  DatasetLayout layout_;
  LoaderOptions options_;
  std::optional<std::vector<SceneSample>> cache_;
};

template <class T>
struct Batch {
  BackboneInput<T> input;
  Tensor<T> gt;  // N x 1 x H x W
};

// Stacks samples into network input planes. Semantic planes are included only
// for layouts with a semantic branch.
template <class T>
Batch<T> collate(std::span<const SceneSample> samples, BranchLayout layout) {
  std::vector<Tensor<T>> rgb, sem, sparse, gt;
  for (const auto& s : samples) {
    s.validate();
    rgb.push_back(s.rgb.cast<T>());
    sparse.push_back(s.sparse_depth.cast<T>());
    gt.push_back(s.gt_depth.cast<T>());
    if (layout == BranchLayout::cg_sg_dg) sem.push_back(s.semantic.cast<T>());
  }
  Batch<T> b;
  b.input.rgb = stack_batch<T>(rgb);
  b.input.sparse = stack_batch<T>(sparse);
  if (!sem.empty()) b.input.semantic = stack_batch<T>(sem);
  b.gt = stack_batch<T>(gt);
  return b;
}

}  // namespace semattnet
