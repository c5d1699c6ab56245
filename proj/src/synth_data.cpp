#include "knet/synth_data.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "knet/image_io.hpp"
#include "knet/serialize.hpp"

namespace knet::data {

namespace fs = std::filesystem;
using nlohmann::json;

int category_of(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kCircle: return 1;
    case ShapeKind::kRectangle: return 2;
    case ShapeKind::kTriangle: return 3;
  }
  return 0;
}

std::vector<std::uint8_t> rasterize_shape(ShapeKind kind, const ShapeParams& p, std::size_t height,
                                          std::size_t width) {
  if (height == 0 || width == 0) throw ParameterError("raster extents must be positive");
  std::vector<std::uint8_t> m(height * width, 0);
  if (kind == ShapeKind::kCircle) {
    if (!(p.radius >= 0.5)) throw ParameterError("circle radius below 0.5 px: " + std::to_string(p.radius));
    const double r2 = p.radius * p.radius;
    for (std::size_t u = 0; u < height; ++u)
      for (std::size_t v = 0; v < width; ++v) {
        const double du = u - p.cy, dv = v - p.cx;
        m[u * width + v] = du * du + dv * dv <= r2;
      }
    return m;
  }
  if (!(p.height >= 1.0) || !(p.width >= 1.0))
    throw ParameterError("shape extents below 1 px: " + std::to_string(p.height) + " x " +
                         std::to_string(p.width));
  const double hh = p.height / 2, hw = p.width / 2;
  if (kind == ShapeKind::kRectangle) {
    for (std::size_t u = 0; u < height; ++u)
      for (std::size_t v = 0; v < width; ++v)
        m[u * width + v] = std::abs(u - p.cy) <= hh && std::abs(v - p.cx) <= hw;
    return m;
  }
  // Triangle: inside when below the apex row, above the base, and within the
  // two slanted edges, which widen linearly from 0 at the apex to w at the base.
  const double top = p.cy - hh, bottom = p.cy + hh;
  for (std::size_t u = 0; u < height; ++u) {
    if (u < top || u > bottom) continue;
    const double half = hw * (u - top) / p.height;
    for (std::size_t v = 0; v < width; ++v) m[u * width + v] = std::abs(v - p.cx) <= half;
  }
  return m;
}

json to_json(const SceneSpec& s) {
  return json{{"seed", s.seed},
              {"height", s.height},
              {"width", s.width},
              {"n_min", s.n_min},
              {"n_max", s.n_max},
              {"size_min", s.size_min},
              {"size_max", s.size_max},
              {"allow_overlap", s.allow_overlap},
              {"min_visible_pixels", s.min_visible_pixels},
              {"min_visible_fraction", s.min_visible_fraction},
              {"color_jitter", s.color_jitter},
              {"noise", s.noise},
              {"horizon_min", s.horizon_min},
              {"horizon_max", s.horizon_max}};
}

SceneSpec spec_from_json(const json& j) {
  SceneSpec s;
  auto get = [&](const char* key, auto& slot) {
    if (j.contains(key)) j.at(key).get_to(slot);
  };
  get("seed", s.seed);
  get("height", s.height);
  get("width", s.width);
  get("n_min", s.n_min);
  get("n_max", s.n_max);
  get("size_min", s.size_min);
  get("size_max", s.size_max);
  get("allow_overlap", s.allow_overlap);
  get("min_visible_pixels", s.min_visible_pixels);
  get("min_visible_fraction", s.min_visible_fraction);
  get("color_jitter", s.color_jitter);
  get("noise", s.noise);
  get("horizon_min", s.horizon_min);
  get("horizon_max", s.horizon_max);
  return s;
}

namespace {

using Color = std::array<double, 3>;

constexpr Color kSkyColor{0.55, 0.75, 0.95};
constexpr Color kGroundColor{0.50, 0.40, 0.25};
constexpr std::array<Color, 3> kThingColors{{{0.90, 0.20, 0.15}, {0.15, 0.75, 0.20}, {0.95, 0.85, 0.10}}};

void validate(const SceneSpec& s) {
  if (s.height < 4 || s.width < 4) throw ConfigError("scene must be at least 4x4");
  if (s.n_min < 1 || s.n_max < s.n_min) throw ConfigError("instance count range must satisfy 1 <= n_min <= n_max");
  if (s.n_max > 65000) throw ConfigError("too many instances per image");
  if (!(s.size_min >= 1.0) || s.size_max < s.size_min) throw ConfigError("bad shape size range");
  if (s.horizon_min < 0 || s.horizon_max > 1 || s.horizon_max < s.horizon_min)
    throw ConfigError("horizon range must lie in [0, 1]");
}

std::size_t count(const std::vector<std::uint8_t>& m) {
  return static_cast<std::size_t>(std::count(m.begin(), m.end(), 1));
}

}  // namespace

GroundTruthSample generate_sample(const SceneSpec& spec, std::size_t index) {
  validate(spec);
  const std::size_t h = spec.height, w = spec.width, px = h * w;
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(seq);
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

  const auto horizon = static_cast<std::size_t>(std::floor(h * uniform(spec.horizon_min, spec.horizon_max)));
  const std::size_t k = spec.n_min + rng() % (spec.n_max - spec.n_min + 1);

  struct Placed {
    ShapeKind kind;
    std::vector<std::uint8_t> full, visible;
  };
  std::vector<Placed> placed;
  std::size_t attempts = 0;
  while (placed.size() < k) {
    if (++attempts > 100)
      throw GenerationError("could not place " + std::to_string(k) + " instances in 100 attempts (sample " +
                            std::to_string(index) + ")");
    const auto kind = static_cast<ShapeKind>(rng() % 3);
    const double s = uniform(spec.size_min, spec.size_max);
    ShapeParams p;
    p.cy = uniform(s / 2, std::max(s / 2, h - 1 - s / 2));
    p.cx = uniform(s / 2, std::max(s / 2, w - 1 - s / 2));
    p.radius = s / 2;
    p.height = kind == ShapeKind::kRectangle ? s * uniform(0.6, 1.0) : s;
    p.width = s * uniform(0.6, 1.0);
    auto mask = rasterize_shape(kind, p, h, w);
    const std::size_t area = count(mask);
    if (area < spec.min_visible_pixels) continue;
    bool ok = true;
    std::vector<std::vector<std::uint8_t>> shrunk;
    for (const auto& prev : placed) {
      auto vis = prev.visible;
      bool touched = false;
      for (std::size_t i = 0; i < px; ++i)
        if (mask[i] && vis[i]) vis[i] = 0, touched = true;
      const std::size_t left = count(vis);
      if ((touched && !spec.allow_overlap) || left < spec.min_visible_pixels ||
          left < spec.min_visible_fraction * count(prev.full)) {
        ok = false;
        break;
      }
      shrunk.push_back(std::move(vis));
    }
    if (!ok) continue;
    for (std::size_t i = 0; i < placed.size(); ++i) placed[i].visible = std::move(shrunk[i]);
    placed.push_back({kind, mask, mask});
  }

  GroundTruthSample g;
  g.height = h;
  g.width = w;
  g.semantic.resize(px);
  g.panoptic.height = h;
  g.panoptic.width = w;
  g.panoptic.ids.resize(px);
  for (std::size_t i = 0; i < px; ++i) {
    const bool sky = i / w < horizon;
    g.semantic[i] = sky ? kSky : kGround;
    g.panoptic.ids[i] = sky ? kSky : kGround;
  }

  std::vector<Color> color(px);
  Color sky_c = kSkyColor, ground_c = kGroundColor;
  for (int c = 0; c < 3; ++c) {
    sky_c[c] += uniform(-spec.color_jitter, spec.color_jitter);
    ground_c[c] += uniform(-spec.color_jitter, spec.color_jitter);
  }
  for (std::size_t i = 0; i < px; ++i) color[i] = g.semantic[i] == kSky ? sky_c : ground_c;

  for (std::size_t n = 0; n < placed.size(); ++n) {
    const auto& pl = placed[n];
    const int cat = category_of(pl.kind);
    Color c = kThingColors[cat - 1];
    for (auto& ch : c) ch += uniform(-spec.color_jitter, spec.color_jitter);
    for (std::size_t i = 0; i < px; ++i)
      if (pl.full[i]) color[i] = c;
    const auto id = static_cast<std::uint32_t>(n + 1);
    for (std::size_t i = 0; i < px; ++i)
      if (pl.visible[i]) {
        g.semantic[i] = cat;
        g.panoptic.ids[i] = id;
      }
    g.instances.push_back({cat, pl.visible});
    g.panoptic.segments.push_back({id, cat, true, 1.0, 0});
  }
  for (int cat : {kSky, kGround}) {
    if (std::find(g.panoptic.ids.begin(), g.panoptic.ids.end(), static_cast<std::uint32_t>(cat)) !=
        g.panoptic.ids.end())
      g.panoptic.segments.push_back({static_cast<std::uint32_t>(cat), cat, false, 1.0, 0});
  }
  g.panoptic.recount_areas();

  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> img(3 * px);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < px; ++i) {
      const double v = std::clamp(color[i][c] + spec.noise * noise(rng), 0.0, 1.0);
      img[c * px + i] = static_cast<double>(static_cast<float>(v));
    }
  g.image = Tensor({3, h, w}, std::move(img));
  return g;
}

std::uint32_t crc32_of_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size()));
  return static_cast<std::uint32_t>(crc);
}

namespace {

std::string stem(std::size_t i) {
  char b[32];
  std::snprintf(b, sizeof b, "%05zu", i);
  return b;
}

io::GrayImage gray16(std::size_t h, std::size_t w) {
  io::GrayImage g;
  g.height = h;
  g.width = w;
  g.maxval = 65535;
  g.pixels.resize(h * w);
  return g;
}

}  // namespace

void write_dataset(const SceneSpec& spec, std::size_t count, const fs::path& dir) {
  fs::create_directories(dir);
  json samples = json::array();
  for (std::size_t i = 0; i < count; ++i) {
    const auto g = generate_sample(spec, i);
    const std::string base = stem(i);
    json files{{"image", base + ".image.bin"},
               {"semantic", base + ".semantic.pgm"},
               {"panoptic", base + ".panoptic.pgm"},
               {"masks", base + ".instances.bin"},
               {"index", base + ".instances.json"}};
    {
      std::ofstream os(dir / files["image"].get<std::string>(), std::ios::binary);
      io::write_tensor(os, g.image, io::Dtype::kF32, json{{"sample", i}});
      if (!os) throw FormatError("failed writing " + (dir / files["image"].get<std::string>()).string());
    }
    auto sem = gray16(g.height, g.width), pan = gray16(g.height, g.width);
    for (std::size_t p = 0; p < g.semantic.size(); ++p) {
      sem.pixels[p] = static_cast<std::uint16_t>(g.semantic[p]);
      pan.pixels[p] = static_cast<std::uint16_t>(g.panoptic.ids[p]);
    }
    io::write_pgm(dir / files["semantic"].get<std::string>(), sem);
    io::write_pgm(dir / files["panoptic"].get<std::string>(), pan);

    json index{{"height", g.height}, {"width", g.width}, {"instances", json::array()}, {"segments", json::array()}};
    std::vector<char> bits;
    const std::size_t bytes = (g.height * g.width + 7) / 8;
    for (const auto& inst : g.instances) {
      index["instances"].push_back({{"category", inst.category}, {"offset", bits.size()}, {"bytes", bytes}});
      std::vector<char> packed(bytes, 0);
      for (std::size_t p = 0; p < inst.mask.size(); ++p)
        if (inst.mask[p]) packed[p / 8] = static_cast<char>(packed[p / 8] | (1 << (p % 8)));
      bits.insert(bits.end(), packed.begin(), packed.end());
    }
    for (const auto& s : g.panoptic.segments)
      index["segments"].push_back({{"id", s.id}, {"category", s.category}, {"is_thing", s.is_thing}, {"area", s.area}});
    {
      std::ofstream os(dir / files["masks"].get<std::string>(), std::ios::binary);
      os.write(bits.data(), static_cast<std::streamsize>(bits.size()));
    }
    {
      std::ofstream os(dir / files["index"].get<std::string>());
      os << index.dump() << '\n';
    }
    json crc;
    for (auto& [key, name] : files.items()) crc[key] = crc32_of_file(dir / name.get<std::string>());
    samples.push_back({{"sample", i}, {"files", files}, {"crc32", crc}});
  }
  json manifest{{"format", "knet-synth"}, {"version", 1}, {"spec", to_json(spec)}, {"count", count}, {"samples", samples}};
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << '\n';
  if (!os) throw FormatError("failed writing manifest in " + dir.string());
}

Dataset read_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw FormatError("missing manifest: " + mpath.string());
  json manifest;
  try {
    std::ifstream is(mpath);
    manifest = json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest " + mpath.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "knet-synth") throw FormatError(mpath.string() + " is not a knet dataset");

  Dataset ds;
  try {
    ds.spec = spec_from_json(manifest.at("spec"));
    const auto& samples = manifest.at("samples");
    if (samples.size() != manifest.at("count").get<std::size_t>())
      throw FormatError("manifest count disagrees with its sample list");
    for (const auto& entry : samples) {
      const auto& files = entry.at("files");
      for (auto& [key, name] : files.items()) {
        const fs::path p = dir / name.get<std::string>();
        if (!fs::exists(p)) throw FormatError("missing dataset file " + p.string());
        if (crc32_of_file(p) != entry.at("crc32").at(key).get<std::uint32_t>())
          throw CorruptDataError("checksum mismatch in " + p.string());
      }
      GroundTruthSample g;
      {
        std::ifstream is(dir / files.at("image").get<std::string>(), std::ios::binary);
        g.image = io::read_tensor(is).tensor;
      }
      const auto sem = io::read_pgm(dir / files.at("semantic").get<std::string>());
      const auto pan = io::read_pgm(dir / files.at("panoptic").get<std::string>());
      json index;
      {
        std::ifstream is(dir / files.at("index").get<std::string>());
        index = json::parse(is);
      }
      g.height = index.at("height");
      g.width = index.at("width");
      const std::size_t px = g.height * g.width;
      if (sem.pixels.size() != px || pan.pixels.size() != px || g.image.numel() != 3 * px)
        throw FormatError("sample " + entry.at("files").at("image").get<std::string>() + " has inconsistent sizes");
      g.semantic.assign(sem.pixels.begin(), sem.pixels.end());
      g.panoptic.height = g.height;
      g.panoptic.width = g.width;
      g.panoptic.ids.assign(pan.pixels.begin(), pan.pixels.end());
      std::ifstream bits_in(dir / files.at("masks").get<std::string>(), std::ios::binary);
      std::vector<char> bits((std::istreambuf_iterator<char>(bits_in)), std::istreambuf_iterator<char>());
      for (const auto& inst : index.at("instances")) {
        const std::size_t off = inst.at("offset"), n = inst.at("bytes");
        if (off + n > bits.size() || n * 8 < px) throw FormatError("instance mask out of range");
        InstanceMask m;
        m.category = inst.at("category");
        m.mask.resize(px);
        for (std::size_t p = 0; p < px; ++p) m.mask[p] = (bits[off + p / 8] >> (p % 8)) & 1;
        g.instances.push_back(std::move(m));
      }
      for (const auto& s : index.at("segments"))
        g.panoptic.segments.push_back(
            {s.at("id").get<std::uint32_t>(), s.at("category").get<int>(), s.at("is_thing").get<bool>(), 1.0,
             s.at("area").get<std::size_t>()});
      ds.samples.push_back(std::move(g));
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed dataset entry in " + dir.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace knet::data
