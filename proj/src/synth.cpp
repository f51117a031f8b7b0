#include "pct/synth.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>

#include "pct/parallel.hpp"

namespace pct::synth {

namespace fs = std::filesystem;
using geometry::Coordinate3D;

void SceneSpec::validate() const {
  if (min_boxes < 0 || max_boxes < min_boxes) throw UsageError("scene spec: bad box count range");
  if (!(min_depth > 0) || max_depth < min_depth) throw UsageError("scene spec: bad depth range");
  if (yaw_max < yaw_min) throw UsageError("scene spec: bad yaw range");
  if (depth_noise < 0 || depth_bias < 0 || roi_jitter < 0 || ground_sd < 0) {
    throw UsageError("scene spec: noise levels must be non-negative");
  }
  if (invalid_fraction < 0 || invalid_fraction >= 1) throw UsageError("scene spec: invalid fraction must be in [0, 1)");
  if (!(background_depth > max_depth)) throw UsageError("scene spec: background plane must lie beyond the boxes");
  if (!camera.valid()) throw UsageError("scene spec: camera focal lengths must be positive");
  if (image_width <= 0 || image_height <= 0 || feature_stride < 1) throw UsageError("scene spec: bad image size");
  if (feature_channels < 9) throw UsageError("scene spec: feature grid needs at least 9 channels");
  double total = 0;
  for (double w : class_weights) {
    if (w < 0) throw UsageError("scene spec: class weights must be non-negative");
    total += w;
  }
  if (!(total > 0)) throw UsageError("scene spec: class weights sum to zero");
}

namespace {

nlohmann::json vec_json(const Eigen::Vector3d& v) { return nlohmann::json::array({v(0), v(1), v(2)}); }

Eigen::Vector3d json_vec(const nlohmann::json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

}  // namespace

void to_json(nlohmann::json& j, const SceneSpec& s) {
  nlohmann::json dims = nlohmann::json::array();
  for (const DimensionPrior& d : s.dims) dims.push_back({{"mean", vec_json(d.mean)}, {"sd", vec_json(d.sd)}});
  j = nlohmann::json{{"seed", s.seed},
                     {"min_boxes", s.min_boxes},
                     {"max_boxes", s.max_boxes},
                     {"min_depth", s.min_depth},
                     {"max_depth", s.max_depth},
                     {"yaw_min", s.yaw_min},
                     {"yaw_max", s.yaw_max},
                     {"ground_y", s.ground_y},
                     {"ground_sd", s.ground_sd},
                     {"dims", dims},
                     {"class_weights", s.class_weights},
                     {"depth_noise", s.depth_noise},
                     {"depth_bias", s.depth_bias},
                     {"invalid_fraction", s.invalid_fraction},
                     {"roi_jitter", s.roi_jitter},
                     {"background_depth", s.background_depth},
                     {"max_bev_iou", s.max_bev_iou},
                     {"min_visible_pixels", s.min_visible_pixels},
                     {"camera", {s.camera.f_u, s.camera.f_v, s.camera.u_p, s.camera.v_p}},
                     {"image_width", s.image_width},
                     {"image_height", s.image_height},
                     {"feature_stride", s.feature_stride},
                     {"feature_channels", s.feature_channels}};
}

void from_json(const nlohmann::json& j, SceneSpec& s) {
  s = SceneSpec{};
  j.at("seed").get_to(s.seed);
  j.at("min_boxes").get_to(s.min_boxes);
  j.at("max_boxes").get_to(s.max_boxes);
  j.at("min_depth").get_to(s.min_depth);
  j.at("max_depth").get_to(s.max_depth);
  j.at("yaw_min").get_to(s.yaw_min);
  j.at("yaw_max").get_to(s.yaw_max);
  j.at("ground_y").get_to(s.ground_y);
  j.at("ground_sd").get_to(s.ground_sd);
  const auto& dims = j.at("dims");
  for (std::size_t i = 0; i < s.dims.size() && i < dims.size(); ++i) {
    s.dims[i].mean = json_vec(dims[i].at("mean"));
    s.dims[i].sd = json_vec(dims[i].at("sd"));
  }
  j.at("class_weights").get_to(s.class_weights);
  j.at("depth_noise").get_to(s.depth_noise);
  j.at("depth_bias").get_to(s.depth_bias);
  j.at("invalid_fraction").get_to(s.invalid_fraction);
  j.at("roi_jitter").get_to(s.roi_jitter);
  j.at("background_depth").get_to(s.background_depth);
  j.at("max_bev_iou").get_to(s.max_bev_iou);
  j.at("min_visible_pixels").get_to(s.min_visible_pixels);
  const auto& cam = j.at("camera");
  s.camera = CameraIntrinsics{cam.at(0).get<double>(), cam.at(1).get<double>(), cam.at(2).get<double>(),
                              cam.at(3).get<double>()};
  j.at("image_width").get_to(s.image_width);
  j.at("image_height").get_to(s.image_height);
  j.at("feature_stride").get_to(s.feature_stride);
  j.at("feature_channels").get_to(s.feature_channels);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t scene_seed(std::uint64_t seed, int index) {
  return splitmix64(splitmix64(seed) ^ static_cast<std::uint64_t>(index));
}

bool is_validation(int index) { return index % 5 == 4; }

std::string scene_stem(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", index);
  return buf;
}

double ray_box_entry(const Box3D& b, const Eigen::Vector3d& dir, int* face) {
  const Eigen::Matrix3d r = geometry::yaw_rotation(b.theta);
  const Eigen::Vector3d center(b.x, b.y - 0.5 * b.h, b.z);
  const Eigen::Vector3d o = r.transpose() * (-center);
  const Eigen::Vector3d d = r.transpose() * dir;
  const Eigen::Vector3d half(0.5 * b.l, 0.5 * b.h, 0.5 * b.w);
  // Face ids for entering through the negative / positive side of each local axis.
  static constexpr int kNegFace[3] = {1, 4, 3};
  static constexpr int kPosFace[3] = {0, 5, 2};
  double t_min = -std::numeric_limits<double>::infinity();
  double t_max = std::numeric_limits<double>::infinity();
  int hit = -1;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d(a)) < 1e-15) {
      if (std::abs(o(a)) > half(a)) return -1.0;
      continue;
    }
    double t1 = (-half(a) - o(a)) / d(a);
    double t2 = (half(a) - o(a)) / d(a);
    int f = kNegFace[a];
    if (t1 > t2) {
      std::swap(t1, t2);
      f = kPosFace[a];
    }
    if (t1 > t_min) {
      t_min = t1;
      hit = f;
    }
    t_max = std::min(t_max, t2);
  }
  if (t_min > t_max || t_min <= 0) return -1.0;
  if (face) *face = hit;
  return t_min;
}

namespace {

struct Extent {
  double left, top, right, bottom;
  double area() const { return std::max(0.0, right - left) * std::max(0.0, bottom - top); }
};

Extent projected_extent(const Box3D& b, const CameraIntrinsics& cam) {
  Extent e{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
           -std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const Coordinate3D& c : geometry::box_corners(b)) {
    const geometry::Pixel p = geometry::camera_to_pixel(c, cam);
    e.left = std::min(e.left, p.u);
    e.right = std::max(e.right, p.u);
    e.top = std::min(e.top, p.v);
    e.bottom = std::max(e.bottom, p.v);
  }
  return e;
}

Extent clip_extent(const Extent& e, int w, int h) {
  return {std::clamp(e.left, 0.0, double(w)), std::clamp(e.top, 0.0, double(h)), std::clamp(e.right, 0.0, double(w)),
          std::clamp(e.bottom, 0.0, double(h))};
}

bool in_front(const Box3D& b) {
  for (const Coordinate3D& c : geometry::box_corners(b)) {
    if (c.z() < 0.5) return false;
  }
  return true;
}

int occlusion_level(int visible, int alone, int min_visible) {
  if (visible < min_visible || alone == 0) return 3;
  const double occluded = 1.0 - static_cast<double>(visible) / alone;
  if (occluded < 0.05) return 0;
  if (occluded < 0.4) return 1;
  return 2;
}

void build_features(const SceneSpec& spec, Scene& scene) {
  const int s = spec.feature_stride;
  const int gw = (spec.image_width + s - 1) / s;
  const int gh = (spec.image_height + s - 1) / s;
  const int c = spec.feature_channels;
  const int id_channels = c - 8;
  FeatureGrid raw(c, gh, gw, s);
  std::vector<int> id_channel(scene.labels.size());
  for (std::size_t i = 0; i < scene.labels.size(); ++i) {
    id_channel[i] = 8 + static_cast<int>(splitmix64(spec.seed ^ (i + 1)) % static_cast<std::uint64_t>(id_channels));
  }
  std::vector<int> faces(static_cast<std::size_t>(spec.image_width) * spec.image_height, -1);
  for (int row = 0; row < spec.image_height; ++row) {
    for (int col = 0; col < spec.image_width; ++col) {
      const int id = scene.box_ids(row, col);
      if (id < 0) continue;
      const Eigen::Vector3d dir((col + 0.5 - spec.camera.u_p) / spec.camera.f_u,
                                (row + 0.5 - spec.camera.v_p) / spec.camera.f_v, 1.0);
      int face = 0;
      geometry::Box3D b = scene.labels[id].box();
      ray_box_entry(b, dir, &face);
      faces[static_cast<std::size_t>(row) * spec.image_width + col] = face;
    }
  }
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      const int r0 = gy * s, r1 = std::min(spec.image_height, r0 + s);
      const int c0 = gx * s, c1 = std::min(spec.image_width, c0 + s);
      const double inv = 1.0 / ((r1 - r0) * (c1 - c0));
      for (int row = r0; row < r1; ++row) {
        for (int col = c0; col < c1; ++col) {
          raw.at(0, gy, gx) += inv * scene.clean_depth.at(col, row) / spec.background_depth;
          const int id = scene.box_ids(row, col);
          if (id < 0) continue;
          raw.at(1, gy, gx) += inv;
          raw.at(2 + faces[static_cast<std::size_t>(row) * spec.image_width + col], gy, gx) += inv;
          raw.at(id_channel[id], gy, gx) += inv;
        }
      }
    }
  }
  // 3 x 3 box blur, averaging over the in-grid neighbours.
  scene.features = FeatureGrid(c, gh, gw, s);
  for (int ch = 0; ch < c; ++ch) {
    for (int gy = 0; gy < gh; ++gy) {
      for (int gx = 0; gx < gw; ++gx) {
        double acc = 0;
        int n = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int y = gy + dy, x = gx + dx;
            if (y < 0 || x < 0 || y >= gh || x >= gw) continue;
            acc += raw.at(ch, y, x);
            ++n;
          }
        }
        scene.features.at(ch, gy, gx) = acc / n;
      }
    }
  }
}

}  // namespace

Scene sample_scene(const SceneSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::discrete_distribution<int> class_dist(spec.class_weights.begin(), spec.class_weights.end());
  const CameraIntrinsics& cam = spec.camera;
  const int n_boxes = std::uniform_int_distribution<int>(spec.min_boxes, spec.max_boxes)(rng);

  std::vector<Box3D> boxes;
  for (int i = 0; i < n_boxes; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      Box3D b;
      b.class_id = class_dist(rng);
      const DimensionPrior& prior = spec.dims[b.class_id];
      b.z = spec.min_depth + (spec.max_depth - spec.min_depth) * unit(rng);
      const double u = spec.image_width * unit(rng);
      b.x = (u - cam.u_p) * b.z / cam.f_u;
      b.y = spec.ground_y + spec.ground_sd * normal(rng);
      b.theta = geometry::normalize_angle(spec.yaw_min + (spec.yaw_max - spec.yaw_min) * unit(rng));
      b.h = std::max(0.3 * prior.mean(0), prior.mean(0) + prior.sd(0) * normal(rng));
      b.w = std::max(0.3 * prior.mean(1), prior.mean(1) + prior.sd(1) * normal(rng));
      b.l = std::max(0.3 * prior.mean(2), prior.mean(2) + prior.sd(2) * normal(rng));
      if (!in_front(b)) continue;
      if (clip_extent(projected_extent(b, cam), spec.image_width, spec.image_height).area() <= 0) continue;
      bool overlaps = false;
      for (const Box3D& other : boxes) {
        if (geometry::bev_iou(b, other) > spec.max_bev_iou) {
          overlaps = true;
          break;
        }
      }
      if (overlaps) continue;
      boxes.push_back(b);
      placed = true;
    }
    if (!placed) throw SceneGenerationError("sample_scene: could not place box " + std::to_string(i) + " in 1000 tries");
  }

  Scene scene;
  scene.calib.intrinsics = cam;
  const int w = spec.image_width, h = spec.image_height;
  scene.clean_depth = DepthMap(w, h, spec.background_depth);
  scene.box_ids.setConstant(h, w, -1);
  std::vector<int> alone(boxes.size(), 0), visible(boxes.size(), 0);
  std::vector<Extent> full(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    full[i] = projected_extent(boxes[i], cam);
    const Extent e = clip_extent(full[i], w, h);
    const int r0 = static_cast<int>(std::floor(e.top)), r1 = static_cast<int>(std::ceil(e.bottom));
    const int c0 = static_cast<int>(std::floor(e.left)), c1 = static_cast<int>(std::ceil(e.right));
    for (int row = std::max(r0, 0); row < std::min(r1, h); ++row) {
      for (int col = std::max(c0, 0); col < std::min(c1, w); ++col) {
        const Eigen::Vector3d dir((col + 0.5 - cam.u_p) / cam.f_u, (row + 0.5 - cam.v_p) / cam.f_v, 1.0);
        const double t = ray_box_entry(boxes[i], dir);
        if (t <= 0) continue;
        ++alone[i];
        if (t < scene.clean_depth.at(col, row)) {
          scene.clean_depth.at(col, row) = t;
          scene.box_ids(row, col) = static_cast<int>(i);
        }
      }
    }
  }
  for (int row = 0; row < h; ++row) {
    for (int col = 0; col < w; ++col) {
      if (scene.box_ids(row, col) >= 0) ++visible[scene.box_ids(row, col)];
    }
  }

  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Box3D& b = boxes[i];
    const Extent e = clip_extent(full[i], w, h);
    LabelRecord r;
    r.type = dataio::class_name_of(b.class_id);
    r.truncation = std::clamp(1.0 - e.area() / full[i].area(), 0.0, 1.0);
    r.occlusion = occlusion_level(visible[i], alone[i], spec.min_visible_pixels);
    r.alpha = geometry::normalize_angle(b.theta - std::atan2(b.x, b.z));
    r.left = e.left;
    r.top = e.top;
    r.right = e.right;
    r.bottom = e.bottom;
    r.h = b.h;
    r.w = b.w;
    r.l = b.l;
    r.x = b.x;
    r.y = b.y;
    r.z = b.z;
    r.rotation_y = b.theta;
    scene.labels.push_back(r);
  }

  std::vector<double> bias(boxes.size(), 0.0);
  for (double& v : bias) v = spec.depth_bias * normal(rng);
  scene.depth = scene.clean_depth;
  for (int row = 0; row < h; ++row) {
    for (int col = 0; col < w; ++col) {
      double& z = scene.depth.at(col, row);
      const int id = scene.box_ids(row, col);
      if (id >= 0) z *= 1.0 + bias[id];
      if (spec.depth_noise > 0) z += spec.depth_noise * normal(rng);
      z = std::max(z, 0.1);
      if (spec.invalid_fraction > 0 && unit(rng) < spec.invalid_fraction) z = std::numeric_limits<double>::quiet_NaN();
    }
  }

  for (std::size_t i = 0; i < scene.labels.size(); ++i) {
    const LabelRecord& r = scene.labels[i];
    if (r.occlusion >= 3) continue;
    RoIRecord roi;
    roi.gt_index = static_cast<int>(i);
    roi.roi.class_id = boxes[i].class_id;
    double left = r.left + spec.roi_jitter * normal(rng);
    double top = r.top + spec.roi_jitter * normal(rng);
    double right = r.right + spec.roi_jitter * normal(rng);
    double bottom = r.bottom + spec.roi_jitter * normal(rng);
    roi.roi.score = 0.5 + 0.5 * unit(rng);
    left = std::clamp(left, 0.0, double(w));
    right = std::clamp(right, 0.0, double(w));
    top = std::clamp(top, 0.0, double(h));
    bottom = std::clamp(bottom, 0.0, double(h));
    if (right - left < 2.0 || bottom - top < 2.0) {
      left = r.left;
      top = r.top;
      right = r.right;
      bottom = r.bottom;
    }
    roi.roi.left = left;
    roi.roi.top = top;
    roi.roi.right = right;
    roi.roi.bottom = bottom;
    scene.rois.push_back(roi);
  }

  build_features(spec, scene);
  return scene;
}

Scene scene_at(const SceneSpec& spec, int index) {
  std::mt19937_64 rng(scene_seed(spec.seed, index));
  return sample_scene(spec, rng);
}

SceneFiles as_files(const Scene& scene) {
  SceneFiles f;
  f.calib = scene.calib;
  f.labels.objects = scene.labels;
  f.depth = scene.depth;
  f.rois = scene.rois;
  f.features = scene.features;
  return f;
}

void write_dataset(const SceneSpec& spec, int n_scenes, const std::string& out_dir) {
  spec.validate();
  if (n_scenes < 0) throw UsageError("write_dataset: scene count must be non-negative");
  const fs::path root(out_dir);
  fs::create_directories(root);
  if (n_scenes > 0) {
    for (const char* sub : {"calib", "label", "depth", "roi", "feat"}) fs::create_directories(root / sub);
  }
  parallel_for(n_scenes, [&](int i) {
    const Scene s = scene_at(spec, i);
    const std::string stem = scene_stem(i);
    dataio::write_file((root / "calib" / (stem + ".txt")).string(), dataio::write_calib(s.calib));
    dataio::write_file((root / "label" / (stem + ".txt")).string(), dataio::write_labels(s.labels));
    dataio::write_file((root / "depth" / (stem + ".dmap")).string(), dataio::write_depth_map(s.depth));
    dataio::write_file((root / "roi" / (stem + ".txt")).string(), dataio::write_rois(s.rois));
    dataio::write_file((root / "feat" / (stem + ".fgrd")).string(), dataio::write_feature_grid(s.features));
  });
  const nlohmann::json manifest{{"format", "pct-synth-1"}, {"n_scenes", n_scenes}, {"spec", spec}};
  dataio::write_file((root / "manifest.json").string(), manifest.dump(2) + "\n");
}

Dataset open_dataset(const std::string& dir) {
  const fs::path root(dir);
  const fs::path manifest_path = root / "manifest.json";
  if (!fs::exists(manifest_path)) throw UsageError("dataset: no manifest.json in " + dir);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(dataio::read_file(manifest_path.string()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset manifest: ") + e.what());
  }
  Dataset ds;
  ds.root = dir;
  ds.n_scenes = manifest.at("n_scenes").get<int>();
  ds.spec = manifest.at("spec").get<SceneSpec>();
  return ds;
}

SceneFiles load_scene(const Dataset& ds, int index) {
  const fs::path root(ds.root);
  const std::string stem = scene_stem(index);
  SceneFiles f;
  f.calib = dataio::parse_calib(dataio::read_file((root / "calib" / (stem + ".txt")).string()));
  f.labels = dataio::parse_labels(dataio::read_file((root / "label" / (stem + ".txt")).string()));
  f.depth = dataio::read_depth_map(dataio::read_file((root / "depth" / (stem + ".dmap")).string()));
  f.rois = dataio::parse_rois(dataio::read_file((root / "roi" / (stem + ".txt")).string()));
  f.features = dataio::read_feature_grid(dataio::read_file((root / "feat" / (stem + ".fgrd")).string()));
  return f;
}

}  // namespace pct::synth
