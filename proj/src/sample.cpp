#include "verbose/sample.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace verbose {

std::string_view to_string(Modality m) { return m == Modality::image ? "image" : "video"; }

Modality parse_modality(std::string_view s) {
  if (s == "image") return Modality::image;
  if (s == "video") return Modality::video;
  throw std::invalid_argument("unknown modality: " + std::string(s));
}

PixelSample::PixelSample(Modality kind, FrameShape shape, std::vector<double> pixels) : kind_(kind), shape_(shape) {
  if (shape.frames == 0) throw std::invalid_argument("PixelSample: at least one frame required");
  if (kind == Modality::image && shape.frames != 1) throw std::invalid_argument("PixelSample: image must have one frame");
  if (pixels.size() != shape.total()) throw std::invalid_argument("PixelSample: pixel count does not match shape");
  assign(std::move(pixels));
}

PixelSample PixelSample::filled(Modality kind, FrameShape shape, double value) {
  return PixelSample(kind, shape, std::vector<double>(shape.total(), value));
}

std::span<const double> PixelSample::frame(std::size_t j) const {
  if (j >= shape_.frames) throw std::out_of_range("PixelSample::frame: index out of range");
  return std::span<const double>(pixels_).subspan(j * shape_.frame_size(), shape_.frame_size());
}

void PixelSample::assign(std::vector<double> pixels) {
  if (pixels.size() != shape_.total()) throw std::invalid_argument("PixelSample: pixel count does not match shape");
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (!(pixels[i] >= 0.0 && pixels[i] <= 1.0)) {
      std::ostringstream msg;
      msg << "PixelSample: pixel " << i << " = " << pixels[i] << " outside [0,1]";
      throw std::invalid_argument(msg.str());
    }
  }
  pixels_ = std::move(pixels);
}

VocabSpec::VocabSpec(std::vector<std::string> tokens, int pad_id, int bos_id, int eos_id)
    : tokens_(std::move(tokens)), pad_id_(pad_id), bos_id_(bos_id), eos_id_(eos_id) {
  const int v = static_cast<int>(tokens_.size());
  for (int id : {pad_id, bos_id, eos_id})
    if (id < 0 || id >= v) throw std::invalid_argument("VocabSpec: special id out of range");
  if (pad_id == bos_id || pad_id == eos_id || bos_id == eos_id)
    throw std::invalid_argument("VocabSpec: special ids must be distinct");
}

VocabSpec VocabSpec::generic(std::size_t size) {
  if (size < 4) throw std::invalid_argument("VocabSpec::generic: size must be at least 4");
  std::vector<std::string> tokens{"<pad>", "<bos>", "<eos>"};
  for (std::size_t i = 3; i < size; ++i) tokens.push_back("w" + std::to_string(i));
  return VocabSpec(std::move(tokens), 0, 1, 2);
}

std::optional<int> VocabSpec::find(std::string_view word) const {
  const auto it = std::find(tokens_.begin(), tokens_.end(), word);
  if (it == tokens_.end()) return std::nullopt;
  return static_cast<int>(it - tokens_.begin());
}

std::vector<int> VocabSpec::encode(std::string_view text) const {
  std::vector<int> ids;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) {
    const auto id = find(word);
    if (!id) throw std::invalid_argument("VocabSpec::encode: unknown word '" + word + "'");
    ids.push_back(*id);
  }
  return ids;
}

std::string VocabSpec::render(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id == pad_id_ || id == bos_id_ || id == eos_id_) continue;
    if (!out.empty()) out += ' ';
    out += token(id);
  }
  return out;
}

}  // namespace verbose
