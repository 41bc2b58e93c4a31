#pragma once

#include "gaitstr/tensor.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace gaitstr {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point2&) const = default;
};

using Edge = std::pair<int, int>;  // (parent joint, child joint)

// A skeleton whose links form a spanning tree rooted at `root`. Built-in
// topologies prune cyclic links (face, shoulder and hip bars) so that bones
// and joints convert losslessly.
class SkeletonTopology {
 public:
  SkeletonTopology(std::string name, int num_joints, std::vector<Edge> edges, int root,
                   std::vector<std::string> joint_names = {});

  const std::string& name() const { return name_; }
  int num_joints() const { return num_joints_; }
  int num_edges() const { return static_cast<int>(edges_.size()); }
  const std::vector<Edge>& edges() const { return edges_; }
  int root() const { return root_; }
  const std::vector<std::string>& joint_names() const { return joint_names_; }

  // Index of the edge whose child is `joint`; -1 for the root.
  int incoming_edge(int joint) const { return incoming_edge_[static_cast<std::size_t>(joint)]; }
  // Joints ordered so that every parent precedes its children.
  const std::vector<int>& root_first_order() const { return order_; }

 private:
  std::string name_;
  int num_joints_;
  std::vector<Edge> edges_;
  int root_;
  std::vector<std::string> joint_names_;
  std::vector<int> incoming_edge_;
  std::vector<int> order_;
};

using TopologyPtr = std::shared_ptr<const SkeletonTopology>;

TopologyPtr coco17();
TopologyPtr openpose18();
// head, neck, shoulders, elbows, wrists, pelvis, knees, ankles; rooted at the pelvis.
TopologyPtr synth13();
// Throws InvalidInput for unknown names.
TopologyPtr topology_by_name(std::string_view name);

// Per-frame 2-D points stored row-major as [frames][points][2].
class PointSequence {
 public:
  int frames() const { return frames_; }
  int points() const { return points_; }
  const TopologyPtr& topology() const { return topology_; }

  double& x(int f, int k) { return data_[index(f, k)]; }
  double& y(int f, int k) { return data_[index(f, k) + 1]; }
  double x(int f, int k) const { return data_[index(f, k)]; }
  double y(int f, int k) const { return data_[index(f, k) + 1]; }
  Point2 point(int f, int k) const { return {x(f, k), y(f, k)}; }
  void set_point(int f, int k, Point2 p) {
    x(f, k) = p.x;
    y(f, k) = p.y;
  }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }
  // [frames, points, 2]
  Tensor to_tensor() const;
  bool all_finite() const;

 protected:
  PointSequence(TopologyPtr topology, int frames, int points);
  PointSequence(TopologyPtr topology, int frames, int points, std::vector<double> data);

 private:
  std::size_t index(int f, int k) const { return (static_cast<std::size_t>(f) * points_ + k) * 2; }

  TopologyPtr topology_;
  int frames_ = 0;
  int points_ = 0;
  std::vector<double> data_;
};

class JointSequence : public PointSequence {
 public:
  JointSequence(TopologyPtr topology, int frames);
  JointSequence(TopologyPtr topology, int frames, std::vector<double> data);
  static JointSequence from_tensor(TopologyPtr topology, const Tensor& t);
  bool operator==(const JointSequence& o) const { return frames() == o.frames() && data() == o.data(); }
};

class BoneSequence : public PointSequence {
 public:
  BoneSequence(TopologyPtr topology, int frames);
  BoneSequence(TopologyPtr topology, int frames, std::vector<double> data);
  static BoneSequence from_tensor(TopologyPtr topology, const Tensor& t);
  bool operator==(const BoneSequence& o) const { return frames() == o.frames() && data() == o.data(); }
};

BoneSequence joints_to_bones(const JointSequence& joints);
BoneSequence joints_to_bones(const SkeletonTopology& topology, const JointSequence& joints);
JointSequence bones_to_joints(const BoneSequence& bones, const std::vector<Point2>& root_positions);
std::vector<Point2> root_positions(const JointSequence& joints);

// Per frame: bounding-box center to the origin, vertical extent scaled to 2.
JointSequence normalize_skeleton(const JointSequence& joints);

enum class FrameSelection { center, repeat };
FrameSelection parse_frame_selection(std::string_view s);
// Source frame index for each of the `n` output frames.
std::vector<int> select_frame_indices(int frames, int n, FrameSelection mode);
JointSequence select_frames(const JointSequence& joints, int n, FrameSelection mode);
JointSequence take_frames(const JointSequence& joints, const std::vector<int>& indices);

struct JitterResult {
  JointSequence joints;
  std::vector<std::pair<int, int>> corrupted;  // (frame, joint), sorted
};
JitterResult inject_jitter(const JointSequence& joints, double frame_rate, double magnitude, std::uint64_t seed);

JointSequence smooth_average(const JointSequence& joints, int window = 3);
JointSequence smooth_gaussian(const JointSequence& joints, int window = 3, double sigma = 1.0);
// Normalized kernel taps used by the two smoothers.
std::vector<double> box_kernel(int window);
std::vector<double> gaussian_kernel(int window, double sigma);

}  // namespace gaitstr
