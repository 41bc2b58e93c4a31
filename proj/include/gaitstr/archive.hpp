#pragma once

#include "gaitstr/skeleton.hpp"
#include "gaitstr/synthetic.hpp"

#include <filesystem>

// On-disk formats (all integers little-endian):
//
// Skeleton archive (.gska)
//   0   char[4]  "GSKA"
//   4   u32      version (1)
//   8   u32      kind (0 = joints, 1 = bones)
//   12  u32      L, length of the topology name
//   16  char[L]  topology name (ASCII, no terminator)
//   ..  u32      t, frame count
//   ..  u32      K, points per frame (K_J for joints, K_J - 1 for bones)
//   ..  f32[t*K*2] coordinates, row-major (frame, point, x|y)
//
// Silhouette archive (.gsia)
//   0   char[4]  "GSIA"
//   4   u32      version (1)
//   8   u32      t
//   12  u32      height (64)
//   16  u32      width (44)
//   20  u8[t*352] frames, row-major bits, most significant bit first
//
// Skeleton JSON lines (.jsonl): a header object
//   {"format":"gaitstr-skeleton","version":1,"kind":"joints","topology":..,"frames":t,"points":K}
// followed by one {"frame":f,"points":[[x,y],...]} object per frame.
namespace gaitstr {

enum class PointKind { joints = 0, bones = 1 };

struct SkeletonArchive {
  PointKind kind = PointKind::joints;
  TopologyPtr topology;
  Tensor points;  // [t, K, 2]

  JointSequence joints() const;
  BoneSequence bones() const;
};

void write_skeleton_archive(const std::filesystem::path& path, const JointSequence& joints);
void write_skeleton_archive(const std::filesystem::path& path, const BoneSequence& bones);
SkeletonArchive read_skeleton_archive(const std::filesystem::path& path);

void write_skeleton_jsonl(const std::filesystem::path& path, const JointSequence& joints);
void write_skeleton_jsonl(const std::filesystem::path& path, const BoneSequence& bones);
SkeletonArchive read_skeleton_jsonl(const std::filesystem::path& path);

void write_silhouette_archive(const std::filesystem::path& path, const SilhouetteSequence& silhouettes);
SilhouetteSequence read_silhouette_archive(const std::filesystem::path& path);

// Float32 round trip applied to generated joints so that in-memory and
// on-disk datasets are identical.
JointSequence quantize_to_float(const JointSequence& joints);

}  // namespace gaitstr
