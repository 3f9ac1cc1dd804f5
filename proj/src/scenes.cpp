#include "headlab/scenes.hpp"

#include "headlab/io_util.hpp"
#include "headlab/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace headlab {

using nlohmann::json;

namespace {

constexpr std::uint32_t kDatasetVersion = 1;
// "HLDS" little-endian
constexpr std::uint32_t kDatasetMagic = 'H' | 'L' << 8 | 'D' << 16 | 'S' << 24;

int feature_extent(const SynthConfig& c) {
  return static_cast<int>(std::llround(c.image_size / c.stride));
}

json synth_to_json(const SynthConfig& c) {
  return json{{"num_classes", c.num_classes},
              {"min_objects", c.min_objects},
              {"max_objects", c.max_objects},
              {"min_size", c.min_size},
              {"max_size", c.max_size},
              {"aspect_low", c.aspect_low},
              {"aspect_high", c.aspect_high},
              {"boundary_softness", c.boundary_softness},
              {"noise_sigma", c.noise_sigma},
              {"channels", c.channels},
              {"stride", c.stride},
              {"image_size", c.image_size},
              {"scenes", c.scenes},
              {"index_offset", c.index_offset},
              {"seed", c.seed}};
}

SynthConfig synth_from_json(const json& j) {
  SynthConfig c;
  c.num_classes = j.at("num_classes").get<int>();
  c.min_objects = j.at("min_objects").get<int>();
  c.max_objects = j.at("max_objects").get<int>();
  c.min_size = j.at("min_size").get<double>();
  c.max_size = j.at("max_size").get<double>();
  c.aspect_low = j.at("aspect_low").get<double>();
  c.aspect_high = j.at("aspect_high").get<double>();
  c.boundary_softness = j.at("boundary_softness").get<double>();
  c.noise_sigma = j.at("noise_sigma").get<double>();
  c.channels = j.at("channels").get<int>();
  c.stride = j.at("stride").get<double>();
  c.image_size = j.at("image_size").get<double>();
  c.scenes = j.at("scenes").get<int>();
  c.index_offset = j.at("index_offset").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

// 1 inside the interval, Gaussian falloff of width sigma outside
double edge_profile(double p, double center, double half, double sigma) {
  const double d = std::abs(p - center) - half;
  if (d <= 0.0) return 1.0;
  if (sigma <= 0.0) return 0.0;
  return std::exp(-d * d / (2.0 * sigma * sigma));
}

}  // namespace

void validate(const SynthConfig& c) {
  if (c.num_classes < 1) throw std::invalid_argument("synth: K must be >= 1");
  if (c.channels < c.num_classes)
    throw std::invalid_argument(
        "synth: class signatures need channels >= num_classes");
  if (c.min_objects < 0 || c.max_objects < c.min_objects)
    throw std::invalid_argument("synth: bad object count range");
  if (!(c.min_size > 0 && c.max_size >= c.min_size))
    throw std::invalid_argument("synth: bad size range");
  if (!(c.aspect_low > 0 && c.aspect_high >= c.aspect_low))
    throw std::invalid_argument("synth: bad aspect range");
  if (c.boundary_softness < 0 || c.noise_sigma < 0)
    throw std::invalid_argument("synth: noise must be nonnegative");
  if (!(c.stride > 0) || c.image_size <= 0 || c.scenes < 0)
    throw std::invalid_argument("synth: bad geometry");
  const int fe = feature_extent(c);
  if (fe < 1 || std::abs(fe * c.stride - c.image_size) > 1e-9)
    throw std::invalid_argument(
        "synth: image_size must be an integer multiple of stride");
}

Eigen::MatrixXd class_signatures(const SynthConfig& config) {
  validate(config);
  const int k = config.num_classes;
  const int c = config.channels;
  Rng rng(derive_seed(config.seed, "signatures"));
  Eigen::MatrixXd sig(k, c);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < c; ++j) sig(i, j) = rng.normal();
  // Gram-Schmidt; Gaussian rows are independent with probability one, the
  // check guards degenerate hand-written configs
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < i; ++j)
      sig.row(i) -= sig.row(i).dot(sig.row(j)) * sig.row(j);
    const double norm = sig.row(i).norm();
    if (norm < 1e-8)
      throw std::runtime_error("class signatures are linearly dependent");
    sig.row(i) /= norm;
  }
  return sig;
}

Scene generate_scene(const SynthConfig& config, int index) {
  validate(config);
  const Eigen::MatrixXd sig = class_signatures(config);
  Rng rng(derive_seed(config.seed, "scene", static_cast<std::uint64_t>(index)));

  const int fe = feature_extent(config);
  Scene scene;
  scene.id = "s" + std::to_string(config.seed) + "-" + std::to_string(index);
  scene.image_w = config.image_size;
  scene.image_h = config.image_size;
  scene.features =
      FeatureMap::zeros(fe, fe, config.channels, config.stride);

  const auto n_objects =
      static_cast<int>(rng.uniform_int(config.min_objects, config.max_objects));
  for (int obj = 0; obj < n_objects; ++obj) {
    GroundTruth gt;
    gt.category = static_cast<int>(rng.uniform_int(1, config.num_classes));
    const double s = rng.log_uniform(config.min_size, config.max_size);
    const double r = rng.log_uniform(config.aspect_low, config.aspect_high);
    gt.box.w = std::min(s * std::sqrt(r), config.image_size);
    gt.box.h = std::min(s / std::sqrt(r), config.image_size);
    gt.box.x = rng.uniform(gt.box.w / 2, config.image_size - gt.box.w / 2);
    gt.box.y = rng.uniform(gt.box.h / 2, config.image_size - gt.box.h / 2);
    const double amplitude = rng.uniform(0.8, 1.2);

    const double sx = config.boundary_softness * gt.box.w;
    const double sy = config.boundary_softness * gt.box.h;
    const double reach_x = gt.box.w / 2 + 3.5 * sx;
    const double reach_y = gt.box.h / 2 + 3.5 * sy;
    const auto& m = scene.features;
    const int r0 = std::max(
        0, static_cast<int>(std::floor(m.image_to_feature_y(gt.box.y - reach_y))));
    const int r1 = std::min(
        fe - 1,
        static_cast<int>(std::ceil(m.image_to_feature_y(gt.box.y + reach_y))));
    const int c0 = std::max(
        0, static_cast<int>(std::floor(m.image_to_feature_x(gt.box.x - reach_x))));
    const int c1 = std::min(
        fe - 1,
        static_cast<int>(std::ceil(m.image_to_feature_x(gt.box.x + reach_x))));
    for (int row = r0; row <= r1; ++row) {
      const double py = scene.features.feature_to_image_y(row);
      const double fy = edge_profile(py, gt.box.y, gt.box.h / 2, sy);
      if (fy == 0.0) continue;
      for (int col = c0; col <= c1; ++col) {
        const double px = scene.features.feature_to_image_x(col);
        const double f =
            fy * edge_profile(px, gt.box.x, gt.box.w / 2, sx) * amplitude;
        if (f == 0.0) continue;
        for (int ch = 0; ch < config.channels; ++ch)
          scene.features.at(row, col, ch) += f * sig(gt.category - 1, ch);
      }
    }
    scene.ground_truths.push_back(gt);
  }

  if (config.noise_sigma > 0) {
    for (Eigen::Index i = 0; i < scene.features.values.size(); ++i)
      scene.features.values[i] += rng.normal() * config.noise_sigma;
  }
  return scene;
}

Scene horizontal_flip(const Scene& scene) {
  Scene out;
  out.id = scene.id;
  out.image_w = scene.image_w;
  out.image_h = scene.image_h;
  const FeatureMap& m = scene.features;
  out.features = FeatureMap::zeros(m.height, m.width, m.channels, m.stride);
  for (int row = 0; row < m.height; ++row)
    for (int col = 0; col < m.width; ++col)
      for (int ch = 0; ch < m.channels; ++ch)
        out.features.at(row, col, ch) = m.at(row, m.width - 1 - col, ch);
  out.ground_truths = scene.ground_truths;
  for (GroundTruth& gt : out.ground_truths) gt.box.x = scene.image_w - gt.box.x;
  return out;
}

int classify_at_center(const Scene& scene, const Eigen::MatrixXd& signatures,
                       const Box& box) {
  const FeatureMap& m = scene.features;
  const int col = std::clamp(
      static_cast<int>(std::llround(m.image_to_feature_x(box.x))), 0,
      m.width - 1);
  const int row = std::clamp(
      static_cast<int>(std::llround(m.image_to_feature_y(box.y))), 0,
      m.height - 1);
  Eigen::VectorXd v(m.channels);
  for (int ch = 0; ch < m.channels; ++ch) v[ch] = m.at(row, col, ch);
  Eigen::Index best = 0;
  (signatures * v).maxCoeff(&best);
  return static_cast<int>(best) + 1;
}

Dataset generate_dataset(const SynthConfig& config) {
  validate(config);
  Dataset ds;
  ds.config = config;
  ds.scenes.reserve(static_cast<size_t>(config.scenes));
  for (int i = 0; i < config.scenes; ++i)
    ds.scenes.push_back(generate_scene(config, config.index_offset + i));
  return ds;
}

void write_dataset(std::span<const Scene> scenes, const SynthConfig& config,
                   const std::string& path) {
  ByteWriter w;
  w.str(synth_to_json(config).dump());
  w.u64(scenes.size());
  for (const Scene& s : scenes) {
    w.str(s.id);
    w.f64(s.image_w);
    w.f64(s.image_h);
    w.u32(static_cast<std::uint32_t>(s.features.height));
    w.u32(static_cast<std::uint32_t>(s.features.width));
    w.u32(static_cast<std::uint32_t>(s.features.channels));
    w.f64(s.features.stride);
    w.f64_array(s.features.values.data(),
                static_cast<size_t>(s.features.values.size()));
    w.u32(static_cast<std::uint32_t>(s.ground_truths.size()));
    for (const GroundTruth& gt : s.ground_truths) {
      w.f64(gt.box.x);
      w.f64(gt.box.y);
      w.f64(gt.box.w);
      w.f64(gt.box.h);
      w.u32(static_cast<std::uint32_t>(gt.category));
    }
  }

  ByteWriter file;
  file.u32(kDatasetMagic);
  file.u32(kDatasetVersion);
  const auto& payload = w.bytes();
  file.u64(payload.size());
  std::vector<std::byte> all = file.bytes();
  all.insert(all.end(), payload.begin(), payload.end());
  const std::uint64_t sum = fnv1a64(payload);
  ByteWriter tail;
  tail.u64(sum);
  all.insert(all.end(), tail.bytes().begin(), tail.bytes().end());
  write_file_bytes(path, all);
}

Dataset read_dataset(const std::string& path) {
  const std::vector<std::byte> all = read_file_bytes(path);
  ByteReader head(all);
  if (all.size() < 24) throw std::runtime_error("dataset container truncated");
  if (head.u32() != kDatasetMagic)
    throw std::runtime_error("not a dataset container: " + path);
  const std::uint32_t version = head.u32();
  if (version != kDatasetVersion)
    throw std::runtime_error("unsupported dataset container version " +
                             std::to_string(version));
  const std::uint64_t payload_len = head.u64();
  if (all.size() != 16 + payload_len + 8)
    throw std::runtime_error("dataset container truncated");
  const std::span<const std::byte> payload(all.data() + 16, payload_len);
  ByteReader tail(std::span(all.data() + 16 + payload_len, 8));
  if (fnv1a64(payload) != tail.u64())
    throw std::runtime_error("dataset container checksum mismatch");

  ByteReader r(payload);
  Dataset ds;
  ds.config = synth_from_json(json::parse(r.str()));
  const std::uint64_t count = r.u64();
  ds.scenes.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Scene& s = ds.scenes[i];
    s.id = r.str();
    s.image_w = r.f64();
    s.image_h = r.f64();
    const int h = static_cast<int>(r.u32());
    const int wdt = static_cast<int>(r.u32());
    const int c = static_cast<int>(r.u32());
    const double stride = r.f64();
    s.features = FeatureMap::zeros(h, wdt, c, stride);
    r.f64_array(s.features.values.data(),
                static_cast<size_t>(s.features.values.size()));
    const std::uint32_t gts = r.u32();
    s.ground_truths.resize(gts);
    for (std::uint32_t k = 0; k < gts; ++k) {
      GroundTruth& gt = s.ground_truths[k];
      gt.box.x = r.f64();
      gt.box.y = r.f64();
      gt.box.w = r.f64();
      gt.box.h = r.f64();
      gt.category = static_cast<int>(r.u32());
    }
  }
  if (!r.exhausted())
    throw std::runtime_error("dataset container has trailing bytes");
  return ds;
}

IngestResult ingest_annotations(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file_text(path));
  } catch (const json::parse_error& e) {
    throw std::runtime_error("annotation file is not valid JSON: " +
                             std::string(e.what()));
  }
  if (!j.contains("images") || !j.contains("annotations") ||
      !j.contains("categories"))
    throw std::runtime_error(
        "annotation file needs images, categories and annotations");

  IngestResult out;
  std::map<long long, int> category_remap;  // file id -> 1..K
  for (const auto& cat : j.at("categories")) {
    const auto id = cat.at("id").get<long long>();
    category_remap[id] = static_cast<int>(out.categories.size()) + 1;
    out.categories.push_back(cat.value("name", std::to_string(id)));
  }

  std::map<std::string, size_t> image_index;
  for (const auto& im : j.at("images")) {
    AnnotatedImage a;
    a.id = im.at("id").is_string() ? im.at("id").get<std::string>()
                                   : im.at("id").dump();
    a.width = im.at("width").get<double>();
    a.height = im.at("height").get<double>();
    image_index[a.id] = out.images.size();
    out.images.push_back(std::move(a));
  }

  size_t record = 0;
  for (const auto& ann : j.at("annotations")) {
    ++record;
    const std::string where = "annotation #" + std::to_string(record);
    try {
      const std::string image_id = ann.at("image_id").is_string()
                                       ? ann.at("image_id").get<std::string>()
                                       : ann.at("image_id").dump();
      const auto it = image_index.find(image_id);
      if (it == image_index.end()) {
        out.diagnostics.push_back(where + ": unknown image id " + image_id);
        continue;
      }
      const auto cat = ann.at("category_id").get<long long>();
      const auto cit = category_remap.find(cat);
      if (cit == category_remap.end()) {
        out.diagnostics.push_back(where + ": unknown category id " +
                                  std::to_string(cat));
        continue;
      }
      const auto& bbox = ann.at("bbox");
      if (!bbox.is_array() || bbox.size() != 4)
        throw std::runtime_error("bbox must be [x, y, w, h]");
      const double bw = bbox[2].get<double>();
      const double bh = bbox[3].get<double>();
      if (!(bw > 0 && bh > 0)) throw std::runtime_error("bbox needs positive size");
      GroundTruth gt;
      gt.box.x = bbox[0].get<double>() + bw / 2;  // top-left to center
      gt.box.y = bbox[1].get<double>() + bh / 2;
      gt.box.w = bw;
      gt.box.h = bh;
      gt.category = cit->second;
      out.images[it->second].ground_truths.push_back(gt);
    } catch (const std::exception& e) {
      out.diagnostics.push_back(where + ": " + e.what());
    }
  }
  return out;
}

void write_annotations(std::span<const Scene> scenes, int num_classes,
                       const std::string& path) {
  json j;
  j["images"] = json::array();
  j["annotations"] = json::array();
  j["categories"] = json::array();
  for (int k = 1; k <= num_classes; ++k)
    j["categories"].push_back(
        {{"id", k}, {"name", "class_" + std::to_string(k)}});
  for (const Scene& s : scenes) {
    j["images"].push_back(
        {{"id", s.id}, {"width", s.image_w}, {"height", s.image_h}});
    for (const GroundTruth& gt : s.ground_truths) {
      j["annotations"].push_back({{"image_id", s.id},
                                  {"category_id", gt.category},
                                  {"bbox",
                                   {gt.box.x1(), gt.box.y1(), gt.box.w,
                                    gt.box.h}}});
    }
  }
  write_file_text(path, j.dump(2));
}

}  // namespace headlab
