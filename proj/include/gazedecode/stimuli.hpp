#pragma once

// Synthetic garment glyphs and search collages.
//
// Each category is a fixed silhouette (a union of polygons minus a set of
// cut-outs) on a 32x32 frame. Exemplars jitter the silhouette by a random
// similarity transform, fill it at a random intensity and add pixel noise.
// Collages place 16 exemplars on a 4x4 grid of 64x64 cells.

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "gazedecode/categories.hpp"
#include "gazedecode/errors.hpp"
#include "gazedecode/rng.hpp"
#include "gazedecode/tensor.hpp"
#include "gazedecode/tnsr_io.hpp"

namespace gazedecode {

inline constexpr std::size_t kExemplarSize = 32;
inline constexpr std::size_t kCellSize = 64;
inline constexpr std::size_t kGridCells = 4;
inline constexpr std::size_t kCanvasSize = kCellSize * kGridCells;  // 256
inline constexpr std::size_t kItemsPerCollage = kGridCells * kGridCells;
// Exemplar offset inside its cell before jitter (centers 32 px in 64 px).
inline constexpr int kCellMargin = static_cast<int>((kCellSize - kExemplarSize) / 2);

// ---------------------------------------------------------------------------
// Silhouettes

struct Point {
  double x = 0.0;
  double y = 0.0;
};

using Polygon = std::vector<Point>;

struct Silhouette {
  std::vector<Polygon> fill;
  std::vector<Polygon> cut;
};

// Even-odd ray casting.
inline bool point_in_polygon(const Polygon& poly, Point p) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point& a = poly[i];
    const Point& b = poly[j];
    if ((a.y > p.y) != (b.y > p.y)) {
      const double x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
      if (p.x < x_cross) inside = !inside;
    }
  }
  return inside;
}

inline bool silhouette_contains(const Silhouette& s, Point p) {
  bool in = false;
  for (const auto& poly : s.fill) {
    if (point_in_polygon(poly, p)) {
      in = true;
      break;
    }
  }
  if (!in) return false;
  for (const auto& poly : s.cut)
    if (point_in_polygon(poly, p)) return false;
  return true;
}

namespace detail {

inline Polygon rect(double x0, double y0, double x1, double y1) {
  return {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}};
}

inline Polygon mirror(const Polygon& poly) {
  Polygon out;
  out.reserve(poly.size());
  for (auto it = poly.rbegin(); it != poly.rend(); ++it)
    out.push_back({static_cast<double>(kExemplarSize) - it->x, it->y});
  return out;
}

inline std::array<Silhouette, kNumCategories> make_silhouettes() {
  std::array<Silhouette, kNumCategories> s;
  // Blouse: flared torso, angled short sleeves, V-neck.
  {
    const Polygon sleeve = {{11, 8}, {5, 13}, {8, 16}, {11, 13}};
    s[0].fill = {{{11, 8}, {21, 8}, {23, 26}, {9, 26}}, sleeve, mirror(sleeve)};
    s[0].cut = {{{13, 7}, {19, 7}, {16, 14}}};
  }
  // T-Shirt: straight torso with horizontal short sleeves, round neck.
  s[1].fill = {rect(10, 9, 22, 26), rect(4, 9, 28, 14)};
  s[1].cut = {rect(14, 8, 18, 11)};
  // Jean: waistband and two long legs.
  s[2].fill = {rect(9, 4, 23, 8), rect(9, 8, 15, 29), rect(17, 8, 23, 29)};
  // Shorts: waistband and two short legs.
  s[3].fill = {rect(8, 9, 24, 13), rect(8, 13, 15, 22), rect(17, 13, 24, 22)};
  // Skirt: trapezoid.
  s[4].fill = {{{12, 9}, {20, 9}, {25, 24}, {7, 24}}};
  // Cardigan: long open-front body with long sleeves.
  s[5].fill = {rect(10, 5, 22, 29), rect(5, 5, 10, 27), rect(22, 5, 27, 27)};
  s[5].cut = {rect(15, 5, 17, 29)};
  // Dress: bodice over a flared skirt.
  s[6].fill = {rect(12, 4, 20, 13), {{12, 13}, {20, 13}, {25, 29}, {7, 29}}};
  // Jacket: wide, short, open front with lapels.
  s[7].fill = {rect(6, 9, 26, 23)};
  s[7].cut = {rect(15, 9, 17, 23), {{12, 8}, {20, 8}, {16, 15}}};
  // Sweater: torso with long sleeves splayed outwards.
  {
    const Polygon sleeve = {{10, 8}, {7, 8}, {3, 24}, {7, 25}, {10, 14}};
    s[8].fill = {rect(10, 8, 22, 25), sleeve, mirror(sleeve)};
  }
  // Tank: narrow straps over a torso with a scoop neck.
  s[9].fill = {rect(11, 4, 13, 10), rect(19, 4, 21, 10), rect(10, 10, 22, 26)};
  s[9].cut = {{{13, 9}, {19, 9}, {18, 13}, {14, 13}}};
  return s;
}

}  // namespace detail

inline const Silhouette& silhouette(CategoryId category) {
  static const auto table = detail::make_silhouettes();
  return table[category.index()];
}

// ---------------------------------------------------------------------------
// Exemplars

struct RenderParams {
  double scale_jitter = 0.10;     // relative, uniform in [-j, j]
  double shift_jitter = 2.0;      // px, uniform in [-j, j] per axis
  double rotation_jitter = 5.0;   // degrees, uniform in [-j, j]
  double intensity_lo = 0.6;
  double intensity_hi = 1.0;
  double noise_sigma = 0.03;

  // No jitter, full intensity, no noise: renders the base silhouette.
  static RenderParams exact() { return {0.0, 0.0, 0.0, 1.0, 1.0, 0.0}; }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RenderParams, scale_jitter, shift_jitter,
                                                rotation_jitter, intensity_lo, intensity_hi,
                                                noise_sigma)

struct ExemplarImage {
  Tensor pixels;  // [32, 32], values in [0, 1]
  CategoryId category;
  std::uint64_t seed = 0;
};

inline ExemplarImage render_exemplar(CategoryId category, std::uint64_t seed,
                                     const RenderParams& params = {}) {
  Rng rng(seed, static_cast<std::uint64_t>(category.value()));
  const double scale = 1.0 + rng.uniform(-params.scale_jitter, params.scale_jitter);
  const double tx = rng.uniform(-params.shift_jitter, params.shift_jitter);
  const double ty = rng.uniform(-params.shift_jitter, params.shift_jitter);
  const double angle =
      rng.uniform(-params.rotation_jitter, params.rotation_jitter) * std::numbers::pi / 180.0;
  const double intensity = rng.uniform(params.intensity_lo, params.intensity_hi);
  const double cos_a = std::cos(angle), sin_a = std::sin(angle);
  const double c = static_cast<double>(kExemplarSize) / 2.0;

  const Silhouette& shape = silhouette(category);
  ExemplarImage img{Tensor({kExemplarSize, kExemplarSize}), category, seed};
  for (std::size_t py = 0; py < kExemplarSize; ++py) {
    for (std::size_t px = 0; px < kExemplarSize; ++px) {
      // Map the pixel center back into the base frame.
      const double dx = static_cast<double>(px) + 0.5 - c - tx;
      const double dy = static_cast<double>(py) + 0.5 - c - ty;
      const Point base{c + (cos_a * dx + sin_a * dy) / scale,
                       c + (-sin_a * dx + cos_a * dy) / scale};
      double v = silhouette_contains(shape, base) ? intensity : 0.0;
      if (params.noise_sigma > 0.0) v += params.noise_sigma * rng.normal();
      img.pixels(py, px) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return img;
}

// Base silhouette as a binary mask.
inline Tensor silhouette_mask(CategoryId category) {
  return render_exemplar(category, 0, RenderParams::exact()).pixels;
}

// Places a 32x32 exemplar on a zero canvas of side `canvas` with its top-left
// corner at (x0, y0).
inline Tensor paste(const Tensor& exemplar, std::size_t canvas, int x0, int y0) {
  Tensor out({canvas, canvas});
  for (std::size_t y = 0; y < exemplar.dim(0); ++y)
    for (std::size_t x = 0; x < exemplar.dim(1); ++x)
      out(static_cast<std::size_t>(y0) + y, static_cast<std::size_t>(x0) + x) = exemplar(y, x);
  return out;
}

// Exemplar on a single 64x64 cell canvas, offset by (dx, dy) from center.
inline Tensor cell_canvas(const Tensor& exemplar, int dx = 0, int dy = 0) {
  return paste(exemplar, kCellSize, kCellMargin + dx, kCellMargin + dy);
}

// ---------------------------------------------------------------------------
// Collages

struct BoundingBox {
  int x0 = 0;
  int y0 = 0;
  int width = 0;
  int height = 0;

  double center_x() const { return x0 + width / 2.0; }
  double center_y() const { return y0 + height / 2.0; }
  bool contains(double x, double y) const {
    return x >= x0 && x < x0 + width && y >= y0 && y < y0 + height;
  }
};

struct CollageItem {
  int row = 0;
  int col = 0;
  BoundingBox box;
  CategoryId category;
  std::uint64_t exemplar_seed = 0;
};

struct Collage {
  Tensor canvas;  // [256, 256]
  std::vector<CollageItem> items;
  CategoryId target;
  int n_target = 0;
  std::uint64_t seed = 0;
};

inline constexpr int kItemJitter = 4;

inline Collage build_collage(CategoryId target, int n_target, std::uint64_t seed,
                             const RenderParams& params = {}) {
  if (n_target < 1 || n_target > static_cast<int>(kItemsPerCollage))
    throw ParameterError("n_target must be in [1,16], got " + std::to_string(n_target));
  Rng rng(seed);
  std::array<int, kItemsPerCollage> cells{};
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);
  for (std::size_t i = cells.size() - 1; i > 0; --i)
    std::swap(cells[i], cells[rng.index(i + 1)]);

  Collage collage{Tensor({kCanvasSize, kCanvasSize}), {}, target, n_target, seed};
  for (std::size_t i = 0; i < kItemsPerCollage; ++i) {
    CollageItem item;
    item.row = cells[i] / static_cast<int>(kGridCells);
    item.col = cells[i] % static_cast<int>(kGridCells);
    if (static_cast<int>(i) < n_target) {
      item.category = target;
    } else {
      int c = static_cast<int>(rng.index(kNumCategories - 1));
      if (c >= target.value()) ++c;
      item.category = CategoryId(c);
    }
    item.exemplar_seed = rng.next();
    const int dx = static_cast<int>(rng.integer(-kItemJitter, kItemJitter));
    const int dy = static_cast<int>(rng.integer(-kItemJitter, kItemJitter));
    item.box = {item.col * static_cast<int>(kCellSize) + kCellMargin + dx,
                item.row * static_cast<int>(kCellSize) + kCellMargin + dy,
                static_cast<int>(kExemplarSize), static_cast<int>(kExemplarSize)};
    const Tensor ex = render_exemplar(item.category, item.exemplar_seed, params).pixels;
    for (std::size_t y = 0; y < kExemplarSize; ++y)
      for (std::size_t x = 0; x < kExemplarSize; ++x)
        collage.canvas(static_cast<std::size_t>(item.box.y0) + y,
                       static_cast<std::size_t>(item.box.x0) + x) = ex(y, x);
    collage.items.push_back(item);
  }
  return collage;
}

inline nlohmann::json collage_to_json(const Collage& c) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& it : c.items) {
    items.push_back({{"row", it.row},
                     {"col", it.col},
                     {"box", {it.box.x0, it.box.y0, it.box.width, it.box.height}},
                     {"category", it.category.name()},
                     {"exemplar_seed", it.exemplar_seed}});
  }
  return {{"target", c.target.name()}, {"n_target", c.n_target}, {"seed", c.seed},
          {"items", items}};
}

// Restores item metadata; the canvas is loaded separately.
inline Collage collage_from_json(const nlohmann::json& j, Tensor canvas) {
  Collage c;
  c.canvas = std::move(canvas);
  c.target = CategoryId::from_name(j.at("target").get<std::string>());
  c.n_target = j.at("n_target").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& it : j.at("items")) {
    CollageItem item;
    item.row = it.at("row").get<int>();
    item.col = it.at("col").get<int>();
    const auto& b = it.at("box");
    item.box = {b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()};
    item.category = CategoryId::from_name(it.at("category").get<std::string>());
    item.exemplar_seed = it.at("exemplar_seed").get<std::uint64_t>();
    c.items.push_back(item);
  }
  return c;
}

// ---------------------------------------------------------------------------
// PGM (binary "P5", maxval 255)

inline Bytes export_pgm(const Tensor& image) {
  require_rank(image.shape(), 2, "export_pgm image");
  const std::string header = "P5\n" + std::to_string(image.dim(1)) + " " +
                             std::to_string(image.dim(0)) + "\n255\n";
  Bytes out(header.begin(), header.end());
  out.reserve(out.size() + image.size());
  for (float v : image.data()) out.push_back(detail::quantize_u8(v));
  return out;
}

inline Tensor import_pgm(const Bytes& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> long {
    skip_space();
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) ++pos;
    if (start == pos) throw FormatError("PGM header: expected integer");
    long v = 0;
    const auto* first = reinterpret_cast<const char*>(bytes.data() + start);
    std::from_chars(first, first + (pos - start), v);
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5')
    throw FormatError("PGM: missing P5 magic");
  pos = 2;
  const long width = read_int();
  const long height = read_int();
  const long maxval = read_int();
  if (width <= 0 || height <= 0) throw FormatError("PGM: non-positive dimensions");
  if (maxval <= 0 || maxval > 255) throw FormatError("PGM: unsupported maxval");
  if (pos >= bytes.size() || !std::isspace(bytes[pos]))
    throw FormatError("PGM: missing whitespace after header");
  ++pos;
  const std::size_t count = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (bytes.size() - pos != count) throw FormatError("PGM: payload size mismatch");
  Tensor out({static_cast<std::size_t>(height), static_cast<std::size_t>(width)});
  for (std::size_t i = 0; i < count; ++i)
    out[i] = static_cast<float>(bytes[pos + i]) / static_cast<float>(maxval);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset generation

struct DatasetSpec {
  int train_per_category = 500;
  int val_per_category = 100;
  int test_per_category = 100;
  std::uint64_t seed = 0;
  RenderParams render;
};

inline constexpr std::array<std::string_view, 3> kSplitNames = {"train", "val", "test"};

struct ManifestEntry {
  std::string path;  // relative to the dataset directory
  CategoryId category;
  std::uint64_t seed = 0;
};

struct DatasetManifest {
  std::string split;
  std::uint64_t seed = 0;
  std::array<int, kNumCategories> counts{};
  std::vector<ManifestEntry> files;
  RenderParams params;
  std::uint64_t unit_begin = 0;  // unit indices [begin, end) owned by this split
  std::uint64_t unit_end = 0;
};

// Unit indices of different splits never overlap: split s owns [s<<32, (s+1)<<32).
inline std::uint64_t dataset_unit(std::size_t split, int category, int count, int index) {
  return (static_cast<std::uint64_t>(split) << 32) +
         static_cast<std::uint64_t>(category) * static_cast<std::uint64_t>(count) +
         static_cast<std::uint64_t>(index);
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json counts = nlohmann::json::object();
  for (std::size_t c = 0; c < kNumCategories; ++c) counts[std::string(kCategoryNames[c])] = m.counts[c];
  nlohmann::json files = nlohmann::json::array();
  for (const auto& f : m.files)
    files.push_back({{"path", f.path}, {"category", f.category.name()}, {"seed", f.seed}});
  nlohmann::json params = m.params;
  params["image_size"] = kExemplarSize;
  params["unit_range"] = {m.unit_begin, m.unit_end};
  return {{"split", m.split}, {"seed", m.seed}, {"counts", counts}, {"files", files},
          {"params", params}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.split = j.at("split").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  for (std::size_t c = 0; c < kNumCategories; ++c)
    m.counts[c] = j.at("counts").at(std::string(kCategoryNames[c])).get<int>();
  for (const auto& f : j.at("files"))
    m.files.push_back({f.at("path").get<std::string>(),
                       CategoryId::from_name(f.at("category").get<std::string>()),
                       f.at("seed").get<std::uint64_t>()});
  m.params = j.at("params").get<RenderParams>();
  m.unit_begin = j.at("params").at("unit_range").at(0).get<std::uint64_t>();
  m.unit_end = j.at("params").at("unit_range").at(1).get<std::uint64_t>();
  return m;
}

inline std::string dump_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

// Writes <dir>/<split>/<Category>_<index>.tnsr and <dir>/<split>.json for the
// three splits.
inline std::vector<DatasetManifest> gen_dataset(const DatasetSpec& spec,
                                                const std::filesystem::path& dir) {
  const std::array<int, 3> per_category = {spec.train_per_category, spec.val_per_category,
                                           spec.test_per_category};
  for (int n : per_category)
    if (n < 1) throw ParameterError("per-category counts must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  std::vector<DatasetManifest> manifests;
  for (std::size_t s = 0; s < kSplitNames.size(); ++s) {
    const int count = per_category[s];
    DatasetManifest m;
    m.split = std::string(kSplitNames[s]);
    m.seed = spec.seed;
    m.params = spec.render;
    m.unit_begin = dataset_unit(s, 0, count, 0);
    m.unit_end = dataset_unit(s, static_cast<int>(kNumCategories), count, 0);
    for (int c = 0; c < static_cast<int>(kNumCategories); ++c) {
      m.counts[static_cast<std::size_t>(c)] = count;
      for (int i = 0; i < count; ++i) {
        const std::uint64_t seed = derive_seed(spec.seed, dataset_unit(s, c, count, i));
        const ExemplarImage ex = render_exemplar(CategoryId(c), seed, spec.render);
        char name[64];
        std::snprintf(name, sizeof(name), "%s_%05d.tnsr", kCategoryNames[c].data(), i);
        const std::string rel = m.split + "/" + name;
        save_tnsr(dir / rel, ex.pixels);
        m.files.push_back({rel, CategoryId(c), seed});
      }
    }
    write_file(dir / (m.split + ".json"), dump_json(manifest_to_json(m)));
    manifests.push_back(std::move(m));
  }
  return manifests;
}

// A loaded split: images [N, 32, 32] and their labels.
struct LabeledImages {
  Tensor images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  Tensor image(std::size_t i) const {
    const std::size_t plane = kExemplarSize * kExemplarSize;
    return Tensor({kExemplarSize, kExemplarSize},
                  std::vector<float>(images.ptr() + i * plane, images.ptr() + (i + 1) * plane));
  }
};

inline LabeledImages load_split(const std::filesystem::path& dir, std::string_view split) {
  const auto manifest_path = dir / (std::string(split) + ".json");
  if (!std::filesystem::exists(manifest_path))
    throw IoError("missing dataset manifest " + manifest_path.string());
  const DatasetManifest m =
      manifest_from_json(nlohmann::json::parse(read_file(manifest_path)));
  const std::size_t plane = kExemplarSize * kExemplarSize;
  LabeledImages out{Tensor({m.files.size(), kExemplarSize, kExemplarSize}), {}};
  for (std::size_t i = 0; i < m.files.size(); ++i) {
    const Tensor t = load_tnsr(dir / m.files[i].path);
    require_shape(t.shape(), {kExemplarSize, kExemplarSize}, m.files[i].path);
    std::copy(t.data().begin(), t.data().end(), out.images.ptr() + i * plane);
    out.labels.push_back(m.files[i].category.value());
  }
  return out;
}

}  // namespace gazedecode
