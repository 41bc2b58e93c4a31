#include "gaitstr/archive.hpp"

#include "gaitstr/errors.hpp"

#include <json.hpp>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace gaitstr {

namespace {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kPackedFrameBytes = (kSilhouettePixels + 7) / 8;

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("cannot open '" + path.string() + "' for writing");
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void finish() {
    out_.flush();
    if (!out_) throw IoError("write to '" + path_.string() + "' failed");
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open '" + path.string() + "'");
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw IoError("'" + path_.string() + "' is truncated");
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  void magic(const char* expected) {
    char m[4];
    bytes(m, 4);
    if (std::memcmp(m, expected, 4) != 0)
      throw IoError("'" + path_.string() + "' is not a " + std::string(expected, 4) + " archive");
    if (u32() != kVersion) throw IoError("'" + path_.string() + "' has an unsupported version");
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
};

void write_points(const std::filesystem::path& path, const PointSequence& seq, PointKind kind) {
  Writer w(path);
  w.bytes("GSKA", 4);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(kind));
  const std::string& name = seq.topology()->name();
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.u32(static_cast<std::uint32_t>(seq.frames()));
  w.u32(static_cast<std::uint32_t>(seq.points()));
  std::vector<float> buf(seq.data().begin(), seq.data().end());
  w.bytes(buf.data(), buf.size() * sizeof(float));
  w.finish();
}

int expected_points(const SkeletonTopology& topo, PointKind kind) {
  return kind == PointKind::joints ? topo.num_joints() : topo.num_edges();
}

void write_points_jsonl(const std::filesystem::path& path, const PointSequence& seq, PointKind kind) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  nlohmann::json header{{"format", "gaitstr-skeleton"},
                        {"version", kVersion},
                        {"kind", kind == PointKind::joints ? "joints" : "bones"},
                        {"topology", seq.topology()->name()},
                        {"frames", seq.frames()},
                        {"points", seq.points()}};
  out << header.dump() << '\n';
  for (int f = 0; f < seq.frames(); ++f) {
    nlohmann::json pts = nlohmann::json::array();
    for (int k = 0; k < seq.points(); ++k) pts.push_back({seq.x(f, k), seq.y(f, k)});
    out << nlohmann::json{{"frame", f}, {"points", pts}}.dump() << '\n';
  }
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

}  // namespace

JointSequence SkeletonArchive::joints() const {
  if (kind != PointKind::joints) throw InvalidInput("archive holds bones, not joints");
  return JointSequence::from_tensor(topology, points);
}

BoneSequence SkeletonArchive::bones() const {
  if (kind != PointKind::bones) throw InvalidInput("archive holds joints, not bones");
  return BoneSequence::from_tensor(topology, points);
}

void write_skeleton_archive(const std::filesystem::path& path, const JointSequence& joints) {
  write_points(path, joints, PointKind::joints);
}

void write_skeleton_archive(const std::filesystem::path& path, const BoneSequence& bones) {
  write_points(path, bones, PointKind::bones);
}

SkeletonArchive read_skeleton_archive(const std::filesystem::path& path) {
  Reader r(path);
  r.magic("GSKA");
  SkeletonArchive a;
  const std::uint32_t kind = r.u32();
  if (kind > 1) throw IoError("'" + path.string() + "' has an unknown point kind");
  a.kind = static_cast<PointKind>(kind);
  const std::uint32_t len = r.u32();
  if (len > 256) throw IoError("'" + path.string() + "' has a corrupt topology name");
  std::string name(len, '\0');
  r.bytes(name.data(), len);
  a.topology = topology_by_name(name);
  const int t = static_cast<int>(r.u32());
  const int k = static_cast<int>(r.u32());
  if (k != expected_points(*a.topology, a.kind))
    throw IoError("'" + path.string() + "' point count " + std::to_string(k) + " does not match topology " + name);
  std::vector<float> buf(static_cast<std::size_t>(t) * k * 2);
  r.bytes(buf.data(), buf.size() * sizeof(float));
  a.points = Tensor({t, k, 2}, std::vector<double>(buf.begin(), buf.end()));
  return a;
}

void write_skeleton_jsonl(const std::filesystem::path& path, const JointSequence& joints) {
  write_points_jsonl(path, joints, PointKind::joints);
}

void write_skeleton_jsonl(const std::filesystem::path& path, const BoneSequence& bones) {
  write_points_jsonl(path, bones, PointKind::bones);
}

SkeletonArchive read_skeleton_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw IoError("'" + path.string() + "' is empty");
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.at("format") != "gaitstr-skeleton") throw IoError("'" + path.string() + "' has the wrong format tag");
    SkeletonArchive a;
    a.kind = header.at("kind") == "bones" ? PointKind::bones : PointKind::joints;
    a.topology = topology_by_name(header.at("topology").get<std::string>());
    const int t = header.at("frames").get<int>();
    const int k = header.at("points").get<int>();
    if (k != expected_points(*a.topology, a.kind)) throw IoError("'" + path.string() + "' point count mismatch");
    a.points = Tensor({t, k, 2});
    for (int f = 0; f < t; ++f) {
      if (!std::getline(in, line)) throw IoError("'" + path.string() + "' is truncated");
      const auto rec = nlohmann::json::parse(line);
      const auto& pts = rec.at("points");
      if (rec.at("frame").get<int>() != f || static_cast<int>(pts.size()) != k)
        throw IoError("'" + path.string() + "' frame " + std::to_string(f) + " is malformed");
      for (int j = 0; j < k; ++j) {
        a.points[(static_cast<std::size_t>(f) * k + j) * 2] = pts[static_cast<std::size_t>(j)].at(0).get<double>();
        a.points[(static_cast<std::size_t>(f) * k + j) * 2 + 1] = pts[static_cast<std::size_t>(j)].at(1).get<double>();
      }
    }
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("'" + path.string() + "': " + e.what());
  }
}

void write_silhouette_archive(const std::filesystem::path& path, const SilhouetteSequence& sil) {
  Writer w(path);
  w.bytes("GSIA", 4);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(sil.frames()));
  w.u32(kSilhouetteHeight);
  w.u32(kSilhouetteWidth);
  std::vector<std::uint8_t> packed(kPackedFrameBytes);
  for (int f = 0; f < sil.frames(); ++f) {
    std::fill(packed.begin(), packed.end(), 0);
    const std::uint8_t* px = sil.frame_data(f);
    for (int i = 0; i < kSilhouettePixels; ++i)
      if (px[i]) packed[static_cast<std::size_t>(i) / 8] |= static_cast<std::uint8_t>(0x80u >> (i % 8));
    w.bytes(packed.data(), packed.size());
  }
  w.finish();
}

SilhouetteSequence read_silhouette_archive(const std::filesystem::path& path) {
  Reader r(path);
  r.magic("GSIA");
  const int t = static_cast<int>(r.u32());
  const std::uint32_t h = r.u32(), w = r.u32();
  if (h != kSilhouetteHeight || w != kSilhouetteWidth)
    throw IoError("'" + path.string() + "' has frame size " + std::to_string(h) + "x" + std::to_string(w) +
                  ", expected 64x44");
  SilhouetteSequence sil(t);
  std::vector<std::uint8_t> packed(kPackedFrameBytes);
  for (int f = 0; f < t; ++f) {
    r.bytes(packed.data(), packed.size());
    std::uint8_t* px = sil.frame_data(f);
    for (int i = 0; i < kSilhouettePixels; ++i)
      px[i] = (packed[static_cast<std::size_t>(i) / 8] >> (7 - i % 8)) & 1u;
  }
  return sil;
}

JointSequence quantize_to_float(const JointSequence& joints) {
  JointSequence out = joints;
  for (double& v : out.data()) v = static_cast<double>(static_cast<float>(v));
  return out;
}

}  // namespace gaitstr
