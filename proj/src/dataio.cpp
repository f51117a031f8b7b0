#include "pct/dataio.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace pct::dataio {

namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i >= line.size()) break;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    fn(line_no, line);
    if (end == text.size()) break;
    start = end + 1;
  }
}

double to_double(std::string_view tok, std::size_t line) {
  double v = 0;
  const char* first = tok.data();
  const char* last = tok.data() + tok.size();
  if (!tok.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) {
    throw ParseError(line, "cannot parse number '" + std::string(tok) + "'");
  }
  return v;
}

int to_int(std::string_view tok, std::size_t line) {
  const double v = to_double(tok, line);
  if (v != std::floor(v)) throw ParseError(line, "expected an integer, got '" + std::string(tok) + "'");
  return static_cast<int>(v);
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(std::string_view bytes, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off + i])) << (8 * i);
  return v;
}

void put_f32(std::string& out, double v) {
  put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

double get_f32(std::string_view bytes, std::size_t off) {
  return static_cast<double>(std::bit_cast<float>(get_u32(bytes, off)));
}

LabelRecord parse_label_fields(const std::vector<std::string_view>& f, std::size_t line) {
  LabelRecord r;
  r.type = std::string(f[0]);
  r.truncation = to_double(f[1], line);
  r.occlusion = to_int(f[2], line);
  r.alpha = to_double(f[3], line);
  r.left = to_double(f[4], line);
  r.top = to_double(f[5], line);
  r.right = to_double(f[6], line);
  r.bottom = to_double(f[7], line);
  r.h = to_double(f[8], line);
  r.w = to_double(f[9], line);
  r.l = to_double(f[10], line);
  r.x = to_double(f[11], line);
  r.y = to_double(f[12], line);
  r.z = to_double(f[13], line);
  r.rotation_y = to_double(f[14], line);
  if (f.size() == 16) r.score = to_double(f[15], line);
  return r;
}

}  // namespace

const char* difficulty_name(Difficulty d) {
  switch (d) {
    case Difficulty::Easy: return "easy";
    case Difficulty::Moderate: return "moderate";
    case Difficulty::Hard: return "hard";
    case Difficulty::Ignored: return "ignored";
  }
  return "ignored";
}

Difficulty parse_difficulty(std::string_view name) {
  if (name == "easy") return Difficulty::Easy;
  if (name == "moderate" || name == "mod") return Difficulty::Moderate;
  if (name == "hard") return Difficulty::Hard;
  throw UsageError("unknown difficulty '" + std::string(name) + "'");
}

int class_id_of(std::string_view name) {
  for (std::size_t i = 0; i < kClassNames.size(); ++i) {
    if (kClassNames[i] == name) return static_cast<int>(i);
  }
  return -1;
}

std::string class_name_of(int class_id) {
  if (class_id < 0 || class_id >= static_cast<int>(kClassNames.size())) return "DontCare";
  return std::string(kClassNames[class_id]);
}

Box3D LabelRecord::box() const {
  Box3D b;
  b.x = x;
  b.y = y;
  b.z = z;
  b.h = h;
  b.w = w;
  b.l = l;
  b.theta = rotation_y;
  b.class_id = class_id_of(type);
  b.score = score.value_or(1.0);
  return b;
}

RoI2D LabelRecord::roi() const {
  return RoI2D{left, top, right, bottom, class_id_of(type), score.value_or(1.0)};
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

LabelFile parse_labels(std::string_view text) {
  LabelFile out;
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    const auto fields = split_ws(line);
    if (fields.empty()) return;
    if (fields.size() != 15 && fields.size() != 16) {
      throw ParseError(line_no, "expected 15 or 16 fields, got " + std::to_string(fields.size()));
    }
    LabelRecord r = parse_label_fields(fields, line_no);
    if (r.type == "DontCare") {
      out.dont_care.push_back(std::move(r));
      return;
    }
    if (!(r.right > r.left) || !(r.bottom > r.top)) throw ParseError(line_no, "2D box has no area");
    if (!(r.h > 0) || !(r.w > 0) || !(r.l > 0)) throw ParseError(line_no, "dimensions must be positive");
    out.objects.push_back(std::move(r));
  });
  return out;
}

std::string write_labels(const std::vector<LabelRecord>& records, bool require_score) {
  std::string out;
  for (const LabelRecord& r : records) {
    if (require_score && !r.score) throw UsageError("detection record without a score");
    const double vals[] = {r.alpha, r.left, r.top, r.right, r.bottom, r.h, r.w, r.l, r.x, r.y, r.z, r.rotation_y};
    out += r.type;
    out += ' ';
    out += format_double(r.truncation);
    out += ' ';
    out += std::to_string(r.occlusion);
    for (double v : vals) {
      out += ' ';
      out += format_double(v);
    }
    if (r.score) {
      out += ' ';
      out += format_double(*r.score);
    }
    out += '\n';
  }
  return out;
}

std::vector<LabelRecord> parse_detections(std::string_view text) {
  std::vector<LabelRecord> out;
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    const auto fields = split_ws(line);
    if (fields.empty()) return;
    if (fields.size() != 16) {
      throw ParseError(line_no, "detections need 16 fields, got " + std::to_string(fields.size()));
    }
    out.push_back(parse_label_fields(fields, line_no));
  });
  return out;
}

std::string write_detections(const std::vector<LabelRecord>& records) { return write_labels(records, true); }

CalibRecord parse_calib(std::string_view text) {
  std::optional<CalibRecord> calib;
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    const auto colon = line.find(':');
    if (colon == std::string_view::npos) return;
    const auto key = split_ws(line.substr(0, colon));
    if (key.size() != 1 || key[0] != "P2") return;
    const auto vals = split_ws(line.substr(colon + 1));
    if (vals.size() != 12) throw ParseError(line_no, "P2 needs 12 values, got " + std::to_string(vals.size()));
    double m[12];
    for (int i = 0; i < 12; ++i) m[i] = to_double(vals[i], line_no);
    CalibRecord c;
    c.intrinsics = CameraIntrinsics{m[0], m[5], m[2], m[6]};
    c.offsets = Eigen::Vector3d(m[3], m[7], m[11]);
    if (!c.intrinsics.valid()) throw ParseError(line_no, "focal lengths must be positive");
    calib = c;
  });
  if (!calib) throw ParseError(0, "calibration lacks the P2 projection line");
  return *calib;
}

std::string write_calib(const CalibRecord& calib) {
  const CameraIntrinsics& k = calib.intrinsics;
  const double p[12] = {k.f_u, 0, k.u_p, calib.offsets.x(), 0, k.f_v, k.v_p, calib.offsets.y(), 0, 0, 1,
                        calib.offsets.z()};
  auto row = [](std::string_view key, const double* v, int n) {
    std::string s(key);
    s += ':';
    for (int i = 0; i < n; ++i) {
      s += ' ';
      s += format_double(v[i]);
    }
    s += '\n';
    return s;
  };
  const double eye3[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  const double eye34[12] = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};
  std::string out;
  for (const char* key : {"P0", "P1", "P2", "P3"}) out += row(key, p, 12);
  out += row("R0_rect", eye3, 9);
  out += row("Tr_velo_to_cam", eye34, 12);
  out += row("Tr_imu_to_velo", eye34, 12);
  return out;
}

std::vector<RoIRecord> parse_rois(std::string_view text) {
  std::vector<RoIRecord> out;
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    const auto f = split_ws(line);
    if (f.empty()) return;
    if (f.size() != 7) throw ParseError(line_no, "RoI lines need 7 fields, got " + std::to_string(f.size()));
    RoIRecord r;
    r.roi.class_id = class_id_of(f[0]);
    r.roi.left = to_double(f[1], line_no);
    r.roi.top = to_double(f[2], line_no);
    r.roi.right = to_double(f[3], line_no);
    r.roi.bottom = to_double(f[4], line_no);
    r.roi.score = to_double(f[5], line_no);
    r.gt_index = to_int(f[6], line_no);
    if (!r.roi.valid()) throw ParseError(line_no, "RoI has no area");
    out.push_back(r);
  });
  return out;
}

std::string write_rois(const std::vector<RoIRecord>& rois) {
  std::string out;
  for (const RoIRecord& r : rois) {
    out += class_name_of(r.roi.class_id);
    for (double v : {r.roi.left, r.roi.top, r.roi.right, r.roi.bottom, r.roi.score}) {
      out += ' ';
      out += format_double(v);
    }
    out += ' ';
    out += std::to_string(r.gt_index);
    out += '\n';
  }
  return out;
}

std::string write_depth_map(const DepthMap& map) {
  std::string out = "DMAP";
  put_u32(out, static_cast<std::uint32_t>(map.width));
  put_u32(out, static_cast<std::uint32_t>(map.height));
  out.reserve(out.size() + 4 * static_cast<std::size_t>(map.width) * map.height);
  for (int row = 0; row < map.height; ++row) {
    for (int col = 0; col < map.width; ++col) {
      const double v = map.at(col, row);
      put_f32(out, DepthMap::is_valid(v) ? v : std::numeric_limits<double>::quiet_NaN());
    }
  }
  return out;
}

DepthMap read_depth_map(std::string_view bytes) {
  if (bytes.size() < 12 || bytes.substr(0, 4) != "DMAP") throw FormatError("depth map: bad magic");
  const std::uint32_t w = get_u32(bytes, 4);
  const std::uint32_t h = get_u32(bytes, 8);
  const std::uint64_t need = 12 + 4ull * w * h;
  if (bytes.size() != need) throw FormatError("depth map: payload size does not match header");
  DepthMap map(static_cast<int>(w), static_cast<int>(h));
  std::size_t off = 12;
  for (std::uint32_t row = 0; row < h; ++row) {
    for (std::uint32_t col = 0; col < w; ++col, off += 4) map.at(col, row) = get_f32(bytes, off);
  }
  return map;
}

std::string write_feature_grid(const FeatureGrid& grid) {
  std::string out = "FGRD";
  put_u32(out, static_cast<std::uint32_t>(grid.channels));
  put_u32(out, static_cast<std::uint32_t>(grid.height));
  put_u32(out, static_cast<std::uint32_t>(grid.width));
  put_u32(out, static_cast<std::uint32_t>(grid.stride));
  out.reserve(out.size() + 4 * static_cast<std::size_t>(grid.values.size()));
  for (Eigen::Index i = 0; i < grid.values.size(); ++i) put_f32(out, grid.values(i));
  return out;
}

FeatureGrid read_feature_grid(std::string_view bytes) {
  if (bytes.size() < 20 || bytes.substr(0, 4) != "FGRD") throw FormatError("feature grid: bad magic");
  const std::uint32_t c = get_u32(bytes, 4);
  const std::uint32_t h = get_u32(bytes, 8);
  const std::uint32_t w = get_u32(bytes, 12);
  const std::uint32_t s = get_u32(bytes, 16);
  if (s == 0) throw FormatError("feature grid: stride must be positive");
  const std::uint64_t need = 20 + 4ull * c * h * w;
  if (bytes.size() != need) throw FormatError("feature grid: payload size does not match header");
  FeatureGrid grid(static_cast<int>(c), static_cast<int>(h), static_cast<int>(w), static_cast<int>(s));
  for (Eigen::Index i = 0; i < grid.values.size(); ++i) grid.values(i) = get_f32(bytes, 20 + 4 * i);
  return grid;
}

Difficulty difficulty_of(const LabelRecord& r) {
  static constexpr double kMinHeight[3] = {40, 25, 25};
  static constexpr int kMaxOcclusion[3] = {0, 1, 2};
  static constexpr double kMaxTruncation[3] = {0.15, 0.30, 0.50};
  const double height = r.bbox_height();
  for (int d = 0; d < 3; ++d) {
    if (height >= kMinHeight[d] && r.occlusion <= kMaxOcclusion[d] && r.truncation <= kMaxTruncation[d]) {
      return static_cast<Difficulty>(d);
    }
  }
  return Difficulty::Ignored;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw Error("failed writing '" + path + "'");
}

}  // namespace pct::dataio
