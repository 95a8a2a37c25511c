#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace verbose {

enum class Modality { image, video };

std::string_view to_string(Modality m);
Modality parse_modality(std::string_view s);

/// M frames of H×W×3 channel-last pixels, stored contiguously frame by frame.
struct FrameShape {
  std::size_t frames = 1;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t frame_size() const { return height * width * 3; }
  std::size_t total() const { return frames * frame_size(); }
  bool operator==(const FrameShape&) const = default;
};

/// An image (M = 1) or a video; every pixel lies in [0,1].
class PixelSample {
 public:
  PixelSample() = default;
  PixelSample(Modality kind, FrameShape shape, std::vector<double> pixels);
  static PixelSample filled(Modality kind, FrameShape shape, double value);

  Modality kind() const { return kind_; }
  const FrameShape& shape() const { return shape_; }
  std::size_t frame_count() const { return shape_.frames; }

  std::span<const double> pixels() const { return pixels_; }
  std::span<const double> frame(std::size_t j) const;

  /// Replaces all pixels; the range invariant is re-checked.
  void assign(std::vector<double> pixels);

  bool operator==(const PixelSample&) const = default;

 private:
  Modality kind_ = Modality::image;
  FrameShape shape_;
  std::vector<double> pixels_;
};

/// Per-pixel gradient laid out like a PixelSample (no range invariant).
struct PixelGradient {
  FrameShape shape;
  std::vector<double> values;

  std::span<const double> frame(std::size_t j) const {
    return std::span<const double>(values).subspan(j * shape.frame_size(), shape.frame_size());
  }
};

/// Word-level vocabulary with three distinct special tokens.
class VocabSpec {
 public:
  VocabSpec() = default;
  VocabSpec(std::vector<std::string> tokens, int pad_id, int bos_id, int eos_id);
  /// "<pad>", "<bos>", "<eos>", then "w3", "w4", ... up to `size`.
  static VocabSpec generic(std::size_t size);

  std::size_t size() const { return tokens_.size(); }
  int pad_id() const { return pad_id_; }
  int bos_id() const { return bos_id_; }
  int eos_id() const { return eos_id_; }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  std::optional<int> find(std::string_view word) const;
  /// Space-separated words to ids; unknown words throw.
  std::vector<int> encode(std::string_view text) const;
  /// Joins words, dropping special tokens.
  std::string render(std::span<const int> ids) const;

  bool operator==(const VocabSpec&) const = default;

 private:
  std::vector<std::string> tokens_;
  int pad_id_ = 0;
  int bos_id_ = 1;
  int eos_id_ = 2;
};

}  // namespace verbose
