#include "verbose/shape_world.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include "json.hpp"

namespace verbose {

namespace {

struct Rgb {
  int r, g, b;
};

constexpr std::array<Rgb, 6> kPalette{{
    {230, 40, 40},   // red
    {40, 200, 60},   // green
    {50, 80, 240},   // blue
    {240, 220, 40},  // yellow
    {160, 60, 200},  // purple
    {250, 140, 20},  // orange
}};

struct Placed {
  ShapeObject object;
  int half = 0;
  int cx = 0, cy = 0;  // frame-0 center
  int vx = 0, vy = 0;  // per-frame velocity
};

bool inside_shape(int shape, double dx, double dy, double r) {
  switch (shape) {
    case 0:
      return dx * dx + dy * dy <= r * r;
    case 1:
      return std::abs(dx) <= r && std::abs(dy) <= r;
    case 2:
      return dy >= -r && dy <= r && std::abs(dx) <= 0.5 * (dy + r);
    default:
      return std::abs(dx) + std::abs(dy) <= r;
  }
}

bool boxes_clear(const Placed& a, const Placed& b, int frames) {
  for (int f = 0; f < frames; ++f) {
    const int ax = a.cx + a.vx * f, ay = a.cy + a.vy * f;
    const int bx = b.cx + b.vx * f, by = b.cy + b.vy * f;
    const int gap = a.half + b.half + 2;
    if (std::abs(ax - bx) < gap && std::abs(ay - by) < gap) return false;
  }
  return true;
}

ShapeWorldItem make_item(std::uint64_t seed, Modality kind, const ShapeWorldOptions& opt) {
  std::mt19937_64 rng(seed);
  auto uniform_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  const int size = static_cast<int>(opt.image_size);
  const int frames = kind == Modality::video ? static_cast<int>(opt.frames) : 1;
  const int travel = frames - 1;

  const int count = uniform_int(1, 3);
  std::vector<ShapeObject> objects;
  while (static_cast<int>(objects.size()) < count) {
    ShapeObject o{uniform_int(0, 5), uniform_int(0, 3)};
    if (std::find(objects.begin(), objects.end(), o) == objects.end()) objects.push_back(o);
  }

  const int background = uniform_int(10, 60);
  // Each object gets its own quadrant, centered near the quadrant middle so
  // that its footprint on the patch grid is stable. Objects are listed in
  // reading order of their quadrants.
  const int q = size / 4;
  std::vector<Placed> placed;
  for (int attempt = 0;; ++attempt) {
    if (attempt > 10000) throw std::logic_error("make_shape_world: could not place objects");
    placed.clear();
    std::array<int, 4> quadrants{0, 1, 2, 3};
    std::shuffle(quadrants.begin(), quadrants.end(), rng);
    std::sort(quadrants.begin(), quadrants.begin() + count);
    bool ok = true;
    for (std::size_t k = 0; k < objects.size() && ok; ++k) {
      Placed p{objects[k], frames > 1 ? uniform_int(size / 8, size * 3 / 16) : uniform_int(size * 5 / 32, size * 7 / 32)};
      const int lo = p.half + 1, hi = size - p.half - 2;
      const bool can_move = hi - lo >= travel;
      p.vx = frames > 1 && can_move ? uniform_int(-1, 1) : 0;
      p.vy = frames > 1 && can_move ? uniform_int(-1, 1) : 0;
      const int qx = quadrants[k] % 2 == 0 ? q : 3 * q;
      const int qy = quadrants[k] / 2 == 0 ? q : 3 * q;
      const int x_lo = p.vx < 0 ? lo + travel : lo, x_hi = p.vx > 0 ? hi - travel : hi;
      const int y_lo = p.vy < 0 ? lo + travel : lo, y_hi = p.vy > 0 ? hi - travel : hi;
      p.cx = std::clamp(qx - p.vx * travel / 2 + uniform_int(-2, 2), x_lo, x_hi);
      p.cy = std::clamp(qy - p.vy * travel / 2 + uniform_int(-2, 2), y_lo, y_hi);
      for (const Placed& other : placed) ok = ok && boxes_clear(p, other, frames);
      if (ok) placed.push_back(p);
    }
    if (ok) break;
  }

  const FrameShape shape{static_cast<std::size_t>(frames), opt.image_size, opt.image_size};
  std::vector<double> pixels(shape.total(), background / 255.0);
  for (int f = 0; f < frames; ++f) {
    double* frame = pixels.data() + static_cast<std::size_t>(f) * shape.frame_size();
    for (const Placed& p : placed) {
      const double cx = p.cx + p.vx * f, cy = p.cy + p.vy * f;
      const Rgb c = kPalette[static_cast<std::size_t>(p.object.color)];
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          if (!inside_shape(p.object.shape, x + 0.5 - cx, y + 0.5 - cy, p.half)) continue;
          double* px = frame + (static_cast<std::size_t>(y) * opt.image_size + static_cast<std::size_t>(x)) * 3;
          px[0] = c.r / 255.0;
          px[1] = c.g / 255.0;
          px[2] = c.b / 255.0;
        }
    }
  }
  ShapeWorldItem item{PixelSample(kind, shape, std::move(pixels)), caption_for(objects), objects};
  return item;
}

}  // namespace

const std::vector<std::string>& shape_world_colors() {
  static const std::vector<std::string> colors{"red", "green", "blue", "yellow", "purple", "orange"};
  return colors;
}

const std::vector<std::string>& shape_world_shapes() {
  static const std::vector<std::string> shapes{"circle", "square", "triangle", "diamond"};
  return shapes;
}

const VocabSpec& shape_world_vocab() {
  static const VocabSpec vocab = [] {
    std::vector<std::string> t{"<pad>", "<bos>", "<eos>"};
    for (const auto& c : shape_world_colors()) t.push_back(c);
    for (const auto& s : shape_world_shapes()) t.push_back(s);
    for (const char* w : {"a", "and", "ball", "ring", "box", "block", "star", "heart", "cross", "arrow", "moon",
                          "white", "black", "gray", "pink", "brown", "cyan", "the", "an", "with", "of", "on", "in",
                          "is", "are", "there", "one", "two", "three", "moving", "left", "right", "up", "down",
                          "big", "small", "next", "to", "above", "below", "near", "background", "image", "video",
                          "picture", "what", "describe", "this", "shows", "?", "."})
      t.emplace_back(w);
    return VocabSpec(std::move(t), 0, 1, 2);
  }();
  return vocab;
}

std::string caption_for(const std::vector<ShapeObject>& objects) {
  std::string out;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    if (i > 0) out += " and ";
    out += "a " + shape_world_colors().at(static_cast<std::size_t>(objects[i].color)) + " " +
           shape_world_shapes().at(static_cast<std::size_t>(objects[i].shape));
  }
  return out;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  // splitmix64 over a mixed (base, index) pair
  std::uint64_t z = base * 0x9E3779B97F4A7C15ULL + index + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::vector<ShapeWorldItem> make_shape_world(std::size_t n_samples, Modality kind, std::uint64_t seed,
                                             const ShapeWorldOptions& options) {
  if (options.image_size < 16) throw std::invalid_argument("make_shape_world: image_size must be >= 16");
  if (kind == Modality::video && options.frames < 1) throw std::invalid_argument("make_shape_world: frames must be >= 1");
  std::vector<ShapeWorldItem> items;
  items.reserve(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) items.push_back(make_item(derive_seed(seed, i), kind, options));
  return items;
}

void write_pixels(const std::filesystem::path& file, const PixelSample& sample) {
  static_assert(std::endian::native == std::endian::little, "raw pixel files are little-endian");
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  const auto px = sample.pixels();
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size() * sizeof(double)));
  if (!out) throw std::runtime_error("short write to " + file.string());
}

std::vector<double> read_pixels(const std::filesystem::path& file, std::size_t count) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  std::vector<double> px(count);
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(count * sizeof(double)))
    throw std::runtime_error("truncated pixel file " + file.string());
  return px;
}

void export_dataset(const std::filesystem::path& dir, const std::vector<ShapeWorldItem>& items) {
  std::filesystem::create_directories(dir / "pixels");
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::trunc);
  if (!manifest) throw std::runtime_error("cannot write manifest in " + dir.string());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& item = items[i];
    char name[32];
    std::snprintf(name, sizeof(name), "pixels/%06zu.f64", i);
    write_pixels(dir / name, item.sample);
    nlohmann::json objects = nlohmann::json::array();
    for (const auto& o : item.objects)
      objects.push_back({shape_world_colors().at(static_cast<std::size_t>(o.color)),
                         shape_world_shapes().at(static_cast<std::size_t>(o.shape))});
    const auto& s = item.sample.shape();
    nlohmann::json row{{"id", i},
                       {"file", name},
                       {"kind", to_string(item.sample.kind())},
                       {"frames", s.frames},
                       {"height", s.height},
                       {"width", s.width},
                       {"caption", item.caption},
                       {"objects", objects}};
    manifest << row.dump() << '\n';
  }
}

std::vector<ShapeWorldItem> load_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw std::runtime_error("no manifest.jsonl in " + dir.string());
  std::vector<ShapeWorldItem> items;
  std::string line;
  auto index_of = [](const std::vector<std::string>& names, const std::string& n) {
    const auto it = std::find(names.begin(), names.end(), n);
    if (it == names.end()) throw std::runtime_error("manifest: unknown name " + n);
    return static_cast<int>(it - names.begin());
  };
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const auto row = nlohmann::json::parse(line);
    const FrameShape shape{row.at("frames").get<std::size_t>(), row.at("height").get<std::size_t>(),
                           row.at("width").get<std::size_t>()};
    ShapeWorldItem item;
    item.sample = PixelSample(parse_modality(row.at("kind").get<std::string>()), shape,
                              read_pixels(dir / row.at("file").get<std::string>(), shape.total()));
    item.caption = row.at("caption").get<std::string>();
    for (const auto& o : row.at("objects"))
      item.objects.push_back({index_of(shape_world_colors(), o.at(0).get<std::string>()),
                              index_of(shape_world_shapes(), o.at(1).get<std::string>())});
    items.push_back(std::move(item));
  }
  return items;
}

}  // namespace verbose
