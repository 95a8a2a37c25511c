#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "verbose/sample.hpp"

namespace verbose {

inline constexpr std::size_t kShapeWorldImageSize = 32;
inline constexpr std::size_t kDefaultVideoFrames = 8;

const std::vector<std::string>& shape_world_colors();
const std::vector<std::string>& shape_world_shapes();

/// The 64-token word vocabulary used by shape-world captioners. Besides the
/// caption grammar it carries object synonyms, out-of-world object nouns and
/// question words so attacked or prompted decoders have room to wander.
const VocabSpec& shape_world_vocab();

struct ShapeObject {
  int color = 0;  // index into shape_world_colors()
  int shape = 0;  // index into shape_world_shapes()
  bool operator==(const ShapeObject&) const = default;
  auto operator<=>(const ShapeObject&) const = default;
};

struct ShapeWorldItem {
  PixelSample sample;
  std::string caption;
  std::vector<ShapeObject> objects;  // ground truth, caption order
};

struct ShapeWorldOptions {
  std::size_t image_size = kShapeWorldImageSize;
  std::size_t frames = kDefaultVideoFrames;  // videos only
};

/// 1–3 distinct colored shapes on a plain background; videos translate every
/// object by a fixed per-frame velocity. Each object sits in its own quadrant
/// and captions list them in reading order (top-left first): "a red circle and
/// a blue square". Item i depends only on (seed, i).
std::vector<ShapeWorldItem> make_shape_world(std::size_t n_samples, Modality kind, std::uint64_t seed,
                                             const ShapeWorldOptions& options = {});

std::string caption_for(const std::vector<ShapeObject>& objects);

/// Writes `manifest.jsonl` plus one raw little-endian float64 file per sample.
void export_dataset(const std::filesystem::path& dir, const std::vector<ShapeWorldItem>& items);
std::vector<ShapeWorldItem> load_dataset(const std::filesystem::path& dir);

/// Raw pixel file I/O shared by dataset and attack outputs.
void write_pixels(const std::filesystem::path& file, const PixelSample& sample);
std::vector<double> read_pixels(const std::filesystem::path& file, std::size_t count);

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

}  // namespace verbose
