#include "gaitstr/skeleton.hpp"

#include "gaitstr/errors.hpp"
#include "gaitstr/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>

namespace gaitstr {

SkeletonTopology::SkeletonTopology(std::string name, int num_joints, std::vector<Edge> edges, int root,
                                   std::vector<std::string> joint_names)
    : name_(std::move(name)),
      num_joints_(num_joints),
      edges_(std::move(edges)),
      root_(root),
      joint_names_(std::move(joint_names)) {
  if (num_joints_ < 1) throw InvalidInput("topology '" + name_ + "' needs at least one joint");
  if (static_cast<int>(edges_.size()) != num_joints_ - 1)
    throw InvalidInput("topology '" + name_ + "' is not a spanning tree: " + std::to_string(edges_.size()) +
                       " edges for " + std::to_string(num_joints_) + " joints");
  if (root_ < 0 || root_ >= num_joints_) throw InvalidInput("topology '" + name_ + "' root out of range");
  if (!joint_names_.empty() && static_cast<int>(joint_names_.size()) != num_joints_)
    throw InvalidInput("topology '" + name_ + "' joint name count mismatch");

  incoming_edge_.assign(static_cast<std::size_t>(num_joints_), -1);
  std::vector<std::vector<int>> children(static_cast<std::size_t>(num_joints_));
  for (int e = 0; e < num_edges(); ++e) {
    const auto [p, c] = edges_[static_cast<std::size_t>(e)];
    if (p < 0 || p >= num_joints_ || c < 0 || c >= num_joints_ || p == c)
      throw InvalidInput("topology '" + name_ + "' edge " + std::to_string(e) + " has invalid endpoints");
    if (c == root_) throw InvalidInput("topology '" + name_ + "' has an edge into the root");
    if (incoming_edge_[static_cast<std::size_t>(c)] != -1)
      throw InvalidInput("topology '" + name_ + "' joint " + std::to_string(c) + " has two parents");
    incoming_edge_[static_cast<std::size_t>(c)] = e;
    children[static_cast<std::size_t>(p)].push_back(c);
  }
  std::queue<int> frontier;
  frontier.push(root_);
  while (!frontier.empty()) {
    const int j = frontier.front();
    frontier.pop();
    order_.push_back(j);
    for (int c : children[static_cast<std::size_t>(j)]) frontier.push(c);
  }
  if (static_cast<int>(order_.size()) != num_joints_)
    throw InvalidInput("topology '" + name_ + "' is not connected from its root");
}

TopologyPtr coco17() {
  static const auto t = std::make_shared<const SkeletonTopology>(
      "coco17", 17,
      std::vector<Edge>{{0, 1}, {0, 2}, {1, 3}, {2, 4}, {3, 5}, {4, 6}, {5, 7}, {7, 9},
                        {6, 8}, {8, 10}, {5, 11}, {6, 12}, {11, 13}, {13, 15}, {12, 14}, {14, 16}},
      0,
      std::vector<std::string>{"nose", "left_eye", "right_eye", "left_ear", "right_ear", "left_shoulder",
                               "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
                               "left_hip", "right_hip", "left_knee", "right_knee", "left_ankle", "right_ankle"});
  return t;
}

TopologyPtr openpose18() {
  static const auto t = std::make_shared<const SkeletonTopology>(
      "openpose18", 18,
      std::vector<Edge>{{1, 2}, {1, 5}, {2, 3}, {3, 4}, {5, 6}, {6, 7}, {1, 8}, {8, 9}, {9, 10},
                        {1, 11}, {11, 12}, {12, 13}, {1, 0}, {0, 14}, {14, 16}, {0, 15}, {15, 17}},
      1,
      std::vector<std::string>{"nose", "neck", "right_shoulder", "right_elbow", "right_wrist", "left_shoulder",
                               "left_elbow", "left_wrist", "right_hip", "right_knee", "right_ankle", "left_hip",
                               "left_knee", "left_ankle", "right_eye", "left_eye", "right_ear", "left_ear"});
  return t;
}

TopologyPtr synth13() {
  static const auto t = std::make_shared<const SkeletonTopology>(
      "synth13", 13,
      std::vector<Edge>{{8, 1}, {1, 0}, {1, 2}, {2, 3}, {3, 4}, {1, 5}, {5, 6}, {6, 7}, {8, 9}, {9, 10}, {8, 11},
                        {11, 12}},
      8,
      std::vector<std::string>{"head", "neck", "right_shoulder", "right_elbow", "right_wrist", "left_shoulder",
                               "left_elbow", "left_wrist", "pelvis", "right_knee", "right_ankle", "left_knee",
                               "left_ankle"});
  return t;
}

TopologyPtr topology_by_name(std::string_view name) {
  if (name == "coco17") return coco17();
  if (name == "openpose18") return openpose18();
  if (name == "synth13") return synth13();
  throw InvalidInput("unknown topology '" + std::string(name) + "'");
}

// --- sequences ---------------------------------------------------------------

PointSequence::PointSequence(TopologyPtr topology, int frames, int points)
    : topology_(std::move(topology)),
      frames_(frames),
      points_(points),
      data_(static_cast<std::size_t>(frames) * points * 2, 0.0) {
  if (!topology_) throw InvalidInput("point sequence without topology");
  if (frames < 0) throw InvalidInput("negative frame count");
}

PointSequence::PointSequence(TopologyPtr topology, int frames, int points, std::vector<double> data)
    : PointSequence(std::move(topology), frames, points) {
  if (data.size() != data_.size())
    throw InvalidInput("point sequence expects " + std::to_string(data_.size()) + " values, got " +
                       std::to_string(data.size()));
  data_ = std::move(data);
}

Tensor PointSequence::to_tensor() const { return Tensor({frames_, points_, 2}, data_); }

bool PointSequence::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

JointSequence::JointSequence(TopologyPtr topology, int frames)
    : PointSequence(topology, frames, topology ? topology->num_joints() : 0) {}

JointSequence::JointSequence(TopologyPtr topology, int frames, std::vector<double> data)
    : PointSequence(topology, frames, topology ? topology->num_joints() : 0, std::move(data)) {}

JointSequence JointSequence::from_tensor(TopologyPtr topology, const Tensor& t) {
  if (t.rank() != 3 || t.dim(2) != 2 || t.dim(1) != topology->num_joints())
    throw InvalidInput("joint tensor " + shape_string(t.shape()) + " does not match topology " + topology->name());
  return JointSequence(topology, t.dim(0), t.to_vector());
}

BoneSequence::BoneSequence(TopologyPtr topology, int frames)
    : PointSequence(topology, frames, topology ? topology->num_edges() : 0) {}

BoneSequence::BoneSequence(TopologyPtr topology, int frames, std::vector<double> data)
    : PointSequence(topology, frames, topology ? topology->num_edges() : 0, std::move(data)) {}

BoneSequence BoneSequence::from_tensor(TopologyPtr topology, const Tensor& t) {
  if (t.rank() != 3 || t.dim(2) != 2 || t.dim(1) != topology->num_edges())
    throw InvalidInput("bone tensor " + shape_string(t.shape()) + " does not match topology " + topology->name());
  return BoneSequence(topology, t.dim(0), t.to_vector());
}

// --- joints <-> bones ----------------------------------------------------------

BoneSequence joints_to_bones(const SkeletonTopology& topology, const JointSequence& joints) {
  if (joints.points() != topology.num_joints())
    throw InvalidInput("joints_to_bones: sequence has " + std::to_string(joints.points()) + " joints, topology '" +
                       topology.name() + "' has " + std::to_string(topology.num_joints()));
  BoneSequence bones(joints.topology(), joints.frames());
  for (int f = 0; f < joints.frames(); ++f)
    for (int e = 0; e < topology.num_edges(); ++e) {
      const auto [p, c] = topology.edges()[static_cast<std::size_t>(e)];
      bones.set_point(f, e, {joints.x(f, c) - joints.x(f, p), joints.y(f, c) - joints.y(f, p)});
    }
  return bones;
}

BoneSequence joints_to_bones(const JointSequence& joints) { return joints_to_bones(*joints.topology(), joints); }

std::vector<Point2> root_positions(const JointSequence& joints) {
  std::vector<Point2> roots;
  roots.reserve(static_cast<std::size_t>(joints.frames()));
  const int r = joints.topology()->root();
  for (int f = 0; f < joints.frames(); ++f) roots.push_back(joints.point(f, r));
  return roots;
}

JointSequence bones_to_joints(const BoneSequence& bones, const std::vector<Point2>& roots) {
  const SkeletonTopology& topo = *bones.topology();
  if (static_cast<int>(roots.size()) != bones.frames())
    throw InvalidInput("bones_to_joints: " + std::to_string(roots.size()) + " root positions for " +
                       std::to_string(bones.frames()) + " frames");
  JointSequence joints(bones.topology(), bones.frames());
  for (int f = 0; f < bones.frames(); ++f) {
    for (int j : topo.root_first_order()) {
      const int e = topo.incoming_edge(j);
      if (e < 0) {
        joints.set_point(f, j, roots[static_cast<std::size_t>(f)]);
        continue;
      }
      const int p = topo.edges()[static_cast<std::size_t>(e)].first;
      joints.set_point(f, j, {joints.x(f, p) + bones.x(f, e), joints.y(f, p) + bones.y(f, e)});
    }
  }
  return joints;
}

// --- normalization ---------------------------------------------------------------

JointSequence normalize_skeleton(const JointSequence& joints) {
  JointSequence out = joints;
  for (int f = 0; f < joints.frames(); ++f) {
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
    for (int k = 0; k < joints.points(); ++k) {
      xmin = std::min(xmin, joints.x(f, k));
      xmax = std::max(xmax, joints.x(f, k));
      ymin = std::min(ymin, joints.y(f, k));
      ymax = std::max(ymax, joints.y(f, k));
    }
    const double height = ymax - ymin;
    if (!(height > 0.0) || !std::isfinite(height))
      throw DegeneratePose("normalize_skeleton: frame " + std::to_string(f) + " has zero vertical extent");
    const double cx = 0.5 * (xmin + xmax), cy = 0.5 * (ymin + ymax), s = 2.0 / height;
    for (int k = 0; k < joints.points(); ++k)
      out.set_point(f, k, {(joints.x(f, k) - cx) * s, (joints.y(f, k) - cy) * s});
  }
  return out;
}

// --- frame selection -------------------------------------------------------------

FrameSelection parse_frame_selection(std::string_view s) {
  if (s == "center") return FrameSelection::center;
  if (s == "repeat") return FrameSelection::repeat;
  throw InvalidInput("unknown frame selection mode '" + std::string(s) + "'");
}

std::vector<int> select_frame_indices(int frames, int n, FrameSelection mode) {
  if (frames < 1) throw InsufficientFrames("select_frames: empty sequence");
  if (n < 1) throw InvalidInput("select_frames: requested frame count must be positive");
  std::vector<int> idx(static_cast<std::size_t>(n));
  if (mode == FrameSelection::center) {
    if (frames < n)
      throw InsufficientFrames("select_frames: center crop of " + std::to_string(n) + " frames from a " +
                               std::to_string(frames) + "-frame sequence");
    const int start = (frames - n) / 2;  // floor: left-biased on odd slack
    std::iota(idx.begin(), idx.end(), start);
  } else {
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i % frames;
  }
  return idx;
}

JointSequence take_frames(const JointSequence& joints, const std::vector<int>& indices) {
  JointSequence out(joints.topology(), static_cast<int>(indices.size()));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int f = indices[i];
    if (f < 0 || f >= joints.frames()) throw InvalidInput("take_frames: frame index out of range");
    for (int k = 0; k < joints.points(); ++k) out.set_point(static_cast<int>(i), k, joints.point(f, k));
  }
  return out;
}

JointSequence select_frames(const JointSequence& joints, int n, FrameSelection mode) {
  return take_frames(joints, select_frame_indices(joints.frames(), n, mode));
}

// --- jitter ------------------------------------------------------------------------

JitterResult inject_jitter(const JointSequence& joints, double frame_rate, double magnitude, std::uint64_t seed) {
  if (!(frame_rate >= 0.0 && frame_rate <= 1.0)) throw InvalidInput("inject_jitter: frame_rate must lie in [0, 1]");
  if (!(magnitude >= 0.0)) throw InvalidInput("inject_jitter: magnitude must be non-negative");
  JitterResult result{joints, {}};
  const int t = joints.frames(), k = joints.points();
  const int count = static_cast<int>(std::lround(frame_rate * t));
  if (count == 0 || k == 0) return result;

  Rng rng(seed);
  std::vector<int> frames(static_cast<std::size_t>(t));
  std::iota(frames.begin(), frames.end(), 0);
  rng.shuffle(frames.begin(), frames.end());
  frames.resize(static_cast<std::size_t>(count));
  std::sort(frames.begin(), frames.end());

  for (int f : frames) {
    std::vector<int> hit;
    for (int j = 0; j < k; ++j)
      if (rng.uniform() < 0.5) hit.push_back(j);
    if (hit.empty()) hit.push_back(static_cast<int>(rng.index(static_cast<std::uint64_t>(k))));
    for (int j : hit) {
      const double dx = rng.uniform(-magnitude, magnitude);
      const double dy = rng.uniform(-magnitude, magnitude);
      result.joints.x(f, j) += dx;
      result.joints.y(f, j) += dy;
      result.corrupted.emplace_back(f, j);
    }
  }
  return result;
}

// --- smoothing ---------------------------------------------------------------------

namespace {

void check_window(int window) {
  if (window < 1 || window % 2 == 0)
    throw InvalidInput("smoothing window must be odd and >= 1, got " + std::to_string(window));
}

JointSequence convolve_frames(const JointSequence& joints, const std::vector<double>& kernel) {
  JointSequence out(joints.topology(), joints.frames());
  const int half = static_cast<int>(kernel.size()) / 2, t = joints.frames();
  for (int f = 0; f < t; ++f)
    for (int k = 0; k < joints.points(); ++k) {
      // Weights sum to one, so smoothing deviations from the center frame is
      // equivalent and leaves constant tracks bit-exact.
      const Point2 c = joints.point(f, k);
      double sx = 0.0, sy = 0.0;
      for (int d = -half; d <= half; ++d) {
        const int src = std::clamp(f + d, 0, t - 1);  // edge replication
        const double w = kernel[static_cast<std::size_t>(d + half)];
        sx += w * (joints.x(src, k) - c.x);
        sy += w * (joints.y(src, k) - c.y);
      }
      out.set_point(f, k, {c.x + sx, c.y + sy});
    }
  return out;
}

}  // namespace

std::vector<double> box_kernel(int window) {
  check_window(window);
  return std::vector<double>(static_cast<std::size_t>(window), 1.0 / window);
}

std::vector<double> gaussian_kernel(int window, double sigma) {
  check_window(window);
  if (!(sigma > 0.0)) throw InvalidInput("gaussian smoothing needs sigma > 0");
  std::vector<double> k(static_cast<std::size_t>(window));
  const int half = window / 2;
  double sum = 0.0;
  for (int d = -half; d <= half; ++d) sum += k[static_cast<std::size_t>(d + half)] = std::exp(-0.5 * d * d / (sigma * sigma));
  for (double& v : k) v /= sum;
  return k;
}

JointSequence smooth_average(const JointSequence& joints, int window) {
  if (window == 1) return joints;
  return convolve_frames(joints, box_kernel(window));
}

JointSequence smooth_gaussian(const JointSequence& joints, int window, double sigma) {
  const auto kernel = gaussian_kernel(window, sigma);
  if (window == 1) return joints;
  return convolve_frames(joints, kernel);
}

}  // namespace gaitstr
