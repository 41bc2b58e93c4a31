#include "gaitstr/synthetic.hpp"

#include "gaitstr/archive.hpp"
#include "gaitstr/errors.hpp"
#include "gaitstr/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>

namespace gaitstr {

namespace fs = std::filesystem;

// --- silhouettes -------------------------------------------------------------------

SilhouetteSequence::SilhouetteSequence(int frames)
    : frames_(frames), pixels_(static_cast<std::size_t>(frames) * kSilhouettePixels, 0) {
  if (frames < 0) throw InvalidInput("negative silhouette frame count");
}

SilhouetteSequence::SilhouetteSequence(int frames, std::vector<std::uint8_t> pixels) : SilhouetteSequence(frames) {
  if (pixels.size() != pixels_.size()) throw InvalidInput("silhouette pixel count does not match 64x44 frames");
  for (auto p : pixels)
    if (p > 1) throw InvalidInput("silhouette values must be 0 or 1");
  pixels_ = std::move(pixels);
}

std::size_t SilhouetteSequence::foreground(int f) const {
  const std::uint8_t* p = frame_data(f);
  return static_cast<std::size_t>(std::count(p, p + kSilhouettePixels, std::uint8_t{1}));
}

SilhouetteSequence SilhouetteSequence::take_frames(const std::vector<int>& indices) const {
  SilhouetteSequence out(static_cast<int>(indices.size()));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int f = indices[i];
    if (f < 0 || f >= frames_) throw InvalidInput("silhouette frame index out of range");
    std::copy(frame_data(f), frame_data(f) + kSilhouettePixels, out.frame_data(static_cast<int>(i)));
  }
  return out;
}

Tensor SilhouetteSequence::to_tensor() const {
  return Tensor({frames_, kSilhouetteHeight, kSilhouetteWidth, 1}, std::vector<double>(pixels_.begin(), pixels_.end()));
}

std::string_view condition_name(Condition c) {
  switch (c) {
    case Condition::clean: return "clean";
    case Condition::carried_blob: return "carried-blob";
    case Condition::widened_contour: return "widened-contour";
  }
  return "clean";
}

Condition parse_condition(std::string_view s) {
  if (s == "clean" || s == "nm") return Condition::clean;
  if (s == "carried-blob" || s == "bg") return Condition::carried_blob;
  if (s == "widened-contour" || s == "cl") return Condition::widened_contour;
  throw InvalidInput("unknown condition tag '" + std::string(s) + "'");
}

double parse_view_degrees(std::string_view view) {
  double deg = 0.0;
  const auto* end = view.data() + view.size();
  const auto res = std::from_chars(view.data(), end, deg);
  if (view.empty() || res.ec != std::errc() || res.ptr != end || deg < 0.0 || deg > 360.0)
    throw InvalidInput("unknown view tag '" + std::string(view) + "' (expected yaw degrees such as 090)");
  return deg;
}

// --- identities --------------------------------------------------------------------

namespace {

// synth13 edge order: torso, head, r-shoulder, r-upper-arm, r-forearm,
// l-shoulder, l-upper-arm, l-forearm, r-thigh, r-shin, l-thigh, l-shin.
constexpr std::array<int, 12> kLimbType{0, 1, 2, 3, 4, 2, 3, 4, 5, 6, 5, 6};
constexpr std::array<double, 7> kBaseLength{0.30, 0.12, 0.09, 0.16, 0.15, 0.24, 0.24};
constexpr std::array<double, 7> kBaseWidth{4.0, 3.5, 2.5, 1.6, 1.3, 2.2, 1.6};

constexpr double kMarginPx = 2.0;
constexpr double kPixelsPerUnit = (kSilhouetteHeight - 2.0 * kMarginPx) / 2.0;

struct Vec3 {
  double x, y, z;
  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
};

Vec3 unit(Vec3 v) {
  const double n = std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z);
  return v * (1.0 / n);
}

Vec3 swing(double angle) { return {std::sin(angle), -std::cos(angle), 0.0}; }

}  // namespace

void IdentityParams::validate() const {
  if (limb_lengths.size() != 12 || body_widths.size() != 12)
    throw InvalidInput("identity parameters need 12 limb lengths and 12 body widths (synth13 edges)");
  for (double l : limb_lengths)
    if (!(l > 0.0)) throw InvalidInput("limb lengths must be positive");
  for (double w : body_widths)
    if (!(w >= 0.0)) throw InvalidInput("body widths must be non-negative");
  if (!(frequency > 0.0 && frequency < 0.5)) throw InvalidInput("gait frequency must lie in (0, 0.5)");
  const double half_pi = std::numbers::pi / 2;
  for (double a : {stride_amplitude, arm_swing, std::abs(lean)})
    if (!(a >= 0.0 && a < half_pi)) throw InvalidInput("gait amplitudes must lie in [0, pi/2)");
}

IdentityParams default_identity() {
  IdentityParams p;
  for (int e = 0; e < 12; ++e) {
    p.limb_lengths.push_back(kBaseLength[static_cast<std::size_t>(kLimbType[static_cast<std::size_t>(e)])]);
    p.body_widths.push_back(kBaseWidth[static_cast<std::size_t>(kLimbType[static_cast<std::size_t>(e)])]);
  }
  return p;
}

IdentityParams sample_identity(std::uint64_t seed) {
  Rng rng(seed);
  IdentityParams p;
  std::array<double, 7> length_scale{}, width_scale{};
  for (auto& s : length_scale) s = 1.0 + rng.uniform(-0.08, 0.08);
  for (auto& s : width_scale) s = rng.uniform(0.9, 1.12);
  for (int e = 0; e < 12; ++e) {
    const auto type = static_cast<std::size_t>(kLimbType[static_cast<std::size_t>(e)]);
    p.limb_lengths.push_back(kBaseLength[type] * length_scale[type] * (1.0 + rng.uniform(-0.02, 0.02)));
    p.body_widths.push_back(kBaseWidth[type] * width_scale[type]);
  }
  p.frequency = rng.uniform(0.035, 0.065);
  p.stride_amplitude = rng.uniform(0.35, 0.55);
  p.arm_swing = rng.uniform(0.2, 0.5);
  p.lean = rng.uniform(0.0, 0.1);
  p.phase_offset = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return p;
}

// --- kinematics --------------------------------------------------------------------

JointSequence walk_joints(const IdentityParams& params, int frames, double view_degrees, double phase,
                          double amplitude_scale) {
  params.validate();
  const auto& L = params.limb_lengths;
  const double stride = params.stride_amplitude * amplitude_scale;
  const double arm = params.arm_swing * amplitude_scale;
  const double yaw = view_degrees * std::numbers::pi / 180.0;
  const double su = std::sin(yaw), cu = std::cos(yaw);

  JointSequence raw(synth13(), frames);
  for (int f = 0; f < frames; ++f) {
    const double phi = 2.0 * std::numbers::pi * params.frequency * f + params.phase_offset + phase;
    std::array<Vec3, 13> j{};
    const Vec3 torso{std::sin(params.lean), std::cos(params.lean), 0.0};
    j[8] = {0.0, 0.0, 0.0};
    j[1] = j[8] + torso * L[0];
    j[0] = j[1] + torso * L[1];
    j[2] = j[1] + unit({0.0, -0.3, -1.0}) * L[2];
    j[5] = j[1] + unit({0.0, -0.3, 1.0}) * L[5];

    // Arms swing in antiphase with the legs on the same side.
    const double arm_phase[2] = {phi + std::numbers::pi, phi};
    const int sh[2] = {2, 5}, el[2] = {3, 6}, wr[2] = {4, 7}, ua[2] = {3, 6}, fa[2] = {4, 7};
    for (int s = 0; s < 2; ++s) {
      const double g = arm * std::sin(arm_phase[s]);
      const double flex = 0.2 + 0.3 * arm * (1.0 + std::sin(arm_phase[s]));
      j[static_cast<std::size_t>(el[s])] = j[static_cast<std::size_t>(sh[s])] + swing(g) * L[static_cast<std::size_t>(ua[s])];
      j[static_cast<std::size_t>(wr[s])] = j[static_cast<std::size_t>(el[s])] + swing(g + flex) * L[static_cast<std::size_t>(fa[s])];
    }

    const double leg_phase[2] = {phi, phi + std::numbers::pi};
    const int kn[2] = {9, 11}, an[2] = {10, 12}, th[2] = {8, 10}, sn[2] = {9, 11};
    const double side[2] = {-0.15, 0.15};
    for (int s = 0; s < 2; ++s) {
      const double a = stride * std::sin(leg_phase[s]);
      const double knee_flex = 0.05 + 0.4 * stride * (1.0 + std::cos(leg_phase[s]));
      const Vec3 thigh = unit({std::sin(a), -std::cos(a), side[s]});
      j[static_cast<std::size_t>(kn[s])] = j[8] + thigh * L[static_cast<std::size_t>(th[s])];
      j[static_cast<std::size_t>(an[s])] = j[static_cast<std::size_t>(kn[s])] + swing(a - knee_flex) * L[static_cast<std::size_t>(sn[s])];
    }

    for (int k = 0; k < 13; ++k) {
      const Vec3& p = j[static_cast<std::size_t>(k)];
      raw.set_point(f, k, {p.x * su + p.z * cu, p.y});
    }
  }
  return normalize_skeleton(raw);
}

// --- rendering ---------------------------------------------------------------------

std::pair<double, double> canvas_position(Point2 p) {
  return {0.5 * kSilhouetteWidth + p.x * kPixelsPerUnit, 0.5 * kSilhouetteHeight - p.y * kPixelsPerUnit};
}

namespace {

struct PixelPoint {
  double col, row;
};

PixelPoint to_canvas(Point2 p) {
  const auto [col, row] = canvas_position(p);
  return {col, row};
}

double segment_distance(double px, double py, PixelPoint a, PixelPoint b) {
  const double dx = b.col - a.col, dy = b.row - a.row;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - a.col) * dx + (py - a.row) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = px - (a.col + t * dx), ey = py - (a.row + t * dy);
  return std::sqrt(ex * ex + ey * ey);
}

void set_pixel(std::vector<std::uint8_t>& mask, int row, int col) {
  if (row >= 0 && row < kSilhouetteHeight && col >= 0 && col < kSilhouetteWidth)
    mask[static_cast<std::size_t>(row) * kSilhouetteWidth + col] = 1;
}

void draw_capsule(std::vector<std::uint8_t>& mask, PixelPoint a, PixelPoint b, double half_width) {
  // Center line, so zero-width limbs still leave a connected 1-pixel trace.
  const int steps = std::max(1, static_cast<int>(std::ceil(std::max(std::abs(b.col - a.col), std::abs(b.row - a.row)))));
  // Divide last so the sample lands exactly on integer coordinates whether or
  // not the compiler contracts into FMA.
  const double dr = b.row - a.row, dc = b.col - a.col;
  for (int i = 0; i <= steps; ++i) {
    const double r = dr * i / steps, c = dc * i / steps;
    set_pixel(mask, static_cast<int>(std::floor(a.row + r + 1e-9)), static_cast<int>(std::floor(a.col + c + 1e-9)));
  }
  if (half_width <= 0.0) return;
  const int r0 = static_cast<int>(std::floor(std::min(a.row, b.row) - half_width - 1));
  const int r1 = static_cast<int>(std::ceil(std::max(a.row, b.row) + half_width + 1));
  const int c0 = static_cast<int>(std::floor(std::min(a.col, b.col) - half_width - 1));
  const int c1 = static_cast<int>(std::ceil(std::max(a.col, b.col) + half_width + 1));
  for (int r = std::max(0, r0); r <= std::min(kSilhouetteHeight - 1, r1); ++r)
    for (int c = std::max(0, c0); c <= std::min(kSilhouetteWidth - 1, c1); ++c)
      if (segment_distance(c + 0.5, r + 0.5, a, b) <= half_width) set_pixel(mask, r, c);
}

void draw_ellipse(std::vector<std::uint8_t>& mask, PixelPoint center, double rx, double ry) {
  for (int r = 0; r < kSilhouetteHeight; ++r)
    for (int c = 0; c < kSilhouetteWidth; ++c) {
      const double u = (c + 0.5 - center.col) / rx, v = (r + 0.5 - center.row) / ry;
      if (u * u + v * v <= 1.0) set_pixel(mask, r, c);
    }
}

}  // namespace

std::vector<std::uint8_t> render_silhouette(const JointSequence& joints, int frame, const std::vector<double>& widths) {
  const SkeletonTopology& topo = *joints.topology();
  if (static_cast<int>(widths.size()) != topo.num_edges())
    throw InvalidInput("render_silhouette: need one width per edge");
  std::vector<std::uint8_t> mask(kSilhouettePixels, 0);
  for (int e = 0; e < topo.num_edges(); ++e) {
    const auto [p, c] = topo.edges()[static_cast<std::size_t>(e)];
    draw_capsule(mask, to_canvas(joints.point(frame, p)), to_canvas(joints.point(frame, c)),
                 widths[static_cast<std::size_t>(e)]);
  }
  return mask;
}

GaitSample generate_walk(const IdentityParams& params, int frames, std::string_view view, Condition condition,
                         std::uint64_t seed) {
  if (frames < 8) throw InvalidInput("generate_walk needs at least 8 frames");
  const double yaw = parse_view_degrees(view);
  Rng rng(seed);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double amplitude_scale = 1.0 + rng.uniform(-0.05, 0.05);
  // Carried-object geometry is always drawn so the stream does not depend on
  // the condition.
  const double bag_side = rng.uniform() < 0.5 ? -1.0 : 1.0;
  const double bag_dx = bag_side * rng.uniform(4.0, 7.0), bag_dy = rng.uniform(-2.0, 4.0);
  const double bag_rx = rng.uniform(5.0, 8.0), bag_ry = rng.uniform(7.0, 11.0);

  GaitSample s;
  s.view = std::string(view);
  s.condition = condition;
  s.joints = walk_joints(params, frames, yaw, phase, amplitude_scale);

  std::vector<double> widths = params.body_widths;
  if (condition == Condition::widened_contour)
    for (double& w : widths) w = 1.8 * w + 1.5;

  s.silhouettes = SilhouetteSequence(frames);
  for (int f = 0; f < frames; ++f) {
    auto mask = render_silhouette(s.joints, f, widths);
    if (condition == Condition::carried_blob) {
      const PixelPoint pelvis = to_canvas(s.joints.point(f, 8));
      draw_ellipse(mask, {pelvis.col + bag_dx, pelvis.row + bag_dy}, bag_rx, bag_ry);
    }
    std::copy(mask.begin(), mask.end(), s.silhouettes.frame_data(f));
  }
  return s;
}

// --- datasets ----------------------------------------------------------------------

void DatasetSpec::validate() const {
  if (identities < 1 || sequences_per_identity < 1 || frames < 1)
    throw InvalidInput("dataset counts must all be >= 1");
  if (frames < 8) throw InvalidInput("dataset sequences need at least 8 frames");
  if (views.empty() || conditions.empty()) throw InvalidInput("dataset needs at least one view and one condition");
  for (const auto& v : views) parse_view_degrees(v);
}

std::vector<const GaitSample*> Dataset::train_samples() const {
  std::vector<const GaitSample*> out;
  for (const auto& s : samples)
    if (is_train_identity(s.identity)) out.push_back(&s);
  return out;
}

std::vector<const GaitSample*> Dataset::test_samples() const {
  std::vector<const GaitSample*> out;
  for (const auto& s : samples)
    if (!is_train_identity(s.identity)) out.push_back(&s);
  return out;
}

IdentityParams identity_params_for(const DatasetSpec& spec, int identity) {
  return sample_identity(derive_seed(spec.seed, {1, static_cast<std::uint64_t>(identity)}));
}

void assign_sequence(const DatasetSpec& spec, int sequence, std::string& view, Condition& condition, bool& gallery) {
  const int nv = static_cast<int>(spec.views.size());
  const int rounds = (spec.sequences_per_identity + nv - 1) / nv;
  const int gallery_rounds = (rounds + 1) / 2;
  const int round = sequence / nv;
  view = spec.views[static_cast<std::size_t>(sequence % nv)];
  gallery = round < gallery_rounds;
  const int nc = static_cast<int>(spec.conditions.size());
  if (gallery || nc == 1)
    condition = spec.conditions[0];
  else
    condition = spec.conditions[static_cast<std::size_t>(1 + (round - gallery_rounds) % (nc - 1))];
}

Dataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  for (int i = 0; i < spec.identities; ++i) {
    const IdentityParams params = identity_params_for(spec, i);
    for (int j = 0; j < spec.sequences_per_identity; ++j) {
      std::string view;
      Condition cond;
      bool gallery;
      assign_sequence(spec, j, view, cond, gallery);
      GaitSample s = generate_walk(params, spec.frames, view, cond,
                                   derive_seed(spec.seed, {2, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j)}));
      s.identity = i;
      s.sequence = j;
      s.gallery = gallery;
      s.joints = quantize_to_float(s.joints);
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

namespace {

std::string sample_stem(const GaitSample& s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "id%03d_seq%02d", s.identity, s.sequence);
  return buf;
}

nlohmann::json spec_to_json(const DatasetSpec& spec) { return spec.to_json(); }
DatasetSpec spec_from_json(const nlohmann::json& j) { return DatasetSpec::from_json(j); }

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const std::size_t comma = std::min(v.find(',', start), v.size());
    std::string item = v.substr(start, comma - start);
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(item);
    start = comma + 1;
  }
  return out;
}

long long parse_count(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError("invalid value '" + v + "' for key '" + key + "' (expected an integer)");
  return out;
}

}  // namespace

nlohmann::json DatasetSpec::to_json() const {
  nlohmann::json conds = nlohmann::json::array();
  for (auto c : conditions) conds.push_back(std::string(condition_name(c)));
  return {{"identities", identities},
          {"sequences_per_identity", sequences_per_identity},
          {"frames", frames},
          {"views", views},
          {"conditions", conds},
          {"seed", seed},
          {"topology", "synth13"}};
}

DatasetSpec DatasetSpec::from_json(const nlohmann::json& j) {
  DatasetSpec spec;
  spec.identities = j.at("identities").get<int>();
  spec.sequences_per_identity = j.at("sequences_per_identity").get<int>();
  spec.frames = j.at("frames").get<int>();
  spec.views = j.at("views").get<std::vector<std::string>>();
  spec.conditions.clear();
  for (const auto& c : j.at("conditions")) spec.conditions.push_back(parse_condition(c.get<std::string>()));
  spec.seed = j.at("seed").get<std::uint64_t>();
  return spec;
}

void DatasetSpec::set(const std::string& key, const std::string& value) {
  auto count = [&] {
    const long long v = parse_count(key, value);
    if (v < 1 || v > 100000) throw ConfigError("value '" + value + "' for key '" + key + "' is out of range");
    return static_cast<int>(v);
  };
  if (key == "identities") identities = count();
  else if (key == "sequences_per_identity") sequences_per_identity = count();
  else if (key == "frames") frames = count();
  else if (key == "seed") {
    const long long v = parse_count(key, value);
    if (v < 0) throw ConfigError("value '" + value + "' for key 'seed' must be >= 0");
    seed = static_cast<std::uint64_t>(v);
  } else if (key == "views") {
    auto list = split_list(value);
    try {
      for (const auto& v : list) parse_view_degrees(v);
    } catch (const Error& e) {
      throw ConfigError("key 'views': " + std::string(e.what()));
    }
    views = std::move(list);
  } else if (key == "conditions") {
    std::vector<Condition> list;
    try {
      for (const auto& c : split_list(value)) list.push_back(parse_condition(c));
    } catch (const Error& e) {
      throw ConfigError("key 'conditions': " + std::string(e.what()));
    }
    conditions = std::move(list);
  } else {
    throw ConfigError("unknown dataset key '" + key + "'");
  }
}

fs::path write_dataset(const Dataset& dataset, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "skeletons", ec);
  fs::create_directories(dir / "silhouettes", ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create dataset directory '" + dir.string() + "'");

  {
    std::ofstream out(dir / "dataset.json", std::ios::trunc);
    if (!out) throw IoError("cannot write '" + (dir / "dataset.json").string() + "'");
    out << spec_to_json(dataset.spec).dump(2) << '\n';
  }
  const fs::path manifest = dir / "manifest.jsonl";
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + manifest.string() + "'");
  int index = 0;
  for (const auto& s : dataset.samples) {
    const std::string stem = sample_stem(s);
    const std::string skel = "skeletons/" + stem + ".gska";
    const std::string sil = "silhouettes/" + stem + ".gsia";
    write_skeleton_archive(dir / skel, s.joints);
    write_silhouette_archive(dir / sil, s.silhouettes);
    nlohmann::json rec{{"index", index++},
                       {"identity", s.identity},
                       {"sequence", s.sequence},
                       {"split", Dataset::is_train_identity(s.identity) ? "train" : "test"},
                       {"role", s.gallery ? "gallery" : "probe"},
                       {"view", s.view},
                       {"condition", std::string(condition_name(s.condition))},
                       {"frames", s.joints.frames()},
                       {"skeleton", skel},
                       {"silhouette", sil}};
    out << rec.dump() << '\n';
  }
  if (!out) throw IoError("write to '" + manifest.string() + "' failed");
  return manifest;
}

fs::path build_dataset(const DatasetSpec& spec, const fs::path& dir) { return write_dataset(generate_dataset(spec), dir); }

Dataset load_dataset(const fs::path& dir) {
  Dataset ds;
  try {
    std::ifstream spec_in(dir / "dataset.json");
    if (!spec_in) throw IoError("cannot open '" + (dir / "dataset.json").string() + "'");
    ds.spec = spec_from_json(nlohmann::json::parse(spec_in));
    std::ifstream in(dir / "manifest.jsonl");
    if (!in) throw IoError("cannot open '" + (dir / "manifest.jsonl").string() + "'");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto rec = nlohmann::json::parse(line);
      GaitSample s;
      s.identity = rec.at("identity").get<int>();
      s.sequence = rec.at("sequence").get<int>();
      s.gallery = rec.at("role") == "gallery";
      s.view = rec.at("view").get<std::string>();
      s.condition = parse_condition(rec.at("condition").get<std::string>());
      s.joints = read_skeleton_archive(dir / rec.at("skeleton").get<std::string>()).joints();
      s.silhouettes = read_silhouette_archive(dir / rec.at("silhouette").get<std::string>());
      if (s.joints.frames() != s.silhouettes.frames())
        throw IoError("sample " + sample_stem(s) + " has mismatched silhouette and skeleton frame counts");
      ds.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed dataset in '" + dir.string() + "': " + e.what());
  }
  return ds;
}

}  // namespace gaitstr
