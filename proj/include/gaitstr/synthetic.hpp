#pragma once

#include "gaitstr/skeleton.hpp"
#include "gaitstr/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace gaitstr {

inline constexpr int kSilhouetteHeight = 64;
inline constexpr int kSilhouetteWidth = 44;
inline constexpr int kSilhouettePixels = kSilhouetteHeight * kSilhouetteWidth;

// Binary masks, frames x 64 x 44, values in {0, 1}.
class SilhouetteSequence {
 public:
  SilhouetteSequence() = default;
  explicit SilhouetteSequence(int frames);
  SilhouetteSequence(int frames, std::vector<std::uint8_t> pixels);

  int frames() const { return frames_; }
  std::uint8_t at(int f, int row, int col) const { return pixels_[offset(f, row, col)]; }
  std::uint8_t& at(int f, int row, int col) { return pixels_[offset(f, row, col)]; }
  const std::vector<std::uint8_t>& pixels() const { return pixels_; }
  std::uint8_t* frame_data(int f) { return pixels_.data() + static_cast<std::size_t>(f) * kSilhouettePixels; }
  const std::uint8_t* frame_data(int f) const { return pixels_.data() + static_cast<std::size_t>(f) * kSilhouettePixels; }

  std::size_t foreground(int f) const;
  SilhouetteSequence take_frames(const std::vector<int>& indices) const;
  // [frames, 64, 44, 1]
  Tensor to_tensor() const;
  bool operator==(const SilhouetteSequence&) const = default;

 private:
  static std::size_t offset(int f, int row, int col) {
    return (static_cast<std::size_t>(f) * kSilhouetteHeight + row) * kSilhouetteWidth + col;
  }
  int frames_ = 0;
  std::vector<std::uint8_t> pixels_;
};

enum class Condition { clean, carried_blob, widened_contour };
std::string_view condition_name(Condition c);
// Accepts clean|carried-blob|widened-contour and the nm|bg|cl aliases.
Condition parse_condition(std::string_view s);

// Identity-specific walking pattern on the synth13 skeleton.
struct IdentityParams {
  std::vector<double> limb_lengths;  // per synth13 edge, units of body height
  double frequency = 0.05;           // gait cycles per frame
  double stride_amplitude = 0.45;    // thigh swing, radians
  double arm_swing = 0.35;           // upper-arm swing, radians
  double lean = 0.05;                // torso lean, radians
  double phase_offset = 0.0;         // radians
  std::vector<double> body_widths;   // per-edge rendering half-width, pixels

  void validate() const;
};

IdentityParams default_identity();
IdentityParams sample_identity(std::uint64_t seed);

// View tags are yaw angles in degrees ("090" is a side view, "000" frontal).
double parse_view_degrees(std::string_view view);

struct GaitSample {
  int identity = -1;
  int sequence = 0;
  bool gallery = true;  // role under the simple protocol
  std::string view = "090";
  Condition condition = Condition::clean;
  SilhouetteSequence silhouettes;
  JointSequence joints{synth13(), 0};
};

// Normalized synth13 joints for one frame of the walk.
JointSequence walk_joints(const IdentityParams& params, int frames, double view_degrees, double phase,
                          double amplitude_scale);

GaitSample generate_walk(const IdentityParams& params, int frames, std::string_view view, Condition condition,
                         std::uint64_t seed);

// Rasterizes one frame of normalized joints as the union of per-edge capsules
// on a 64x44 canvas (2 px margin, y up). `widths` are half-widths in pixels.
// Canvas (column, row) of a normalized skeleton point, in pixels.
std::pair<double, double> canvas_position(Point2 p);

std::vector<std::uint8_t> render_silhouette(const JointSequence& joints, int frame, const std::vector<double>& widths);

struct DatasetSpec {
  int identities = 16;
  int sequences_per_identity = 4;
  int frames = 40;
  std::vector<std::string> views{"090"};
  std::vector<Condition> conditions{Condition::clean, Condition::carried_blob, Condition::widened_contour};
  std::uint64_t seed = 0;

  void validate() const;
  // Applies one `key = value` setting (keys as in to_json(); lists are
  // comma-separated). Unknown keys and bad values raise ConfigError.
  void set(const std::string& key, const std::string& value);
  nlohmann::json to_json() const;
  static DatasetSpec from_json(const nlohmann::json& j);
};

struct Dataset {
  DatasetSpec spec;
  std::vector<GaitSample> samples;

  // Identities with odd 1-based index (even 0-based) train; the rest test.
  static bool is_train_identity(int identity) { return identity % 2 == 0; }
  std::vector<const GaitSample*> train_samples() const;
  std::vector<const GaitSample*> test_samples() const;
};

IdentityParams identity_params_for(const DatasetSpec& spec, int identity);
// Sequence j of an identity: view cycles fastest; the first half of the
// rounds uses conditions[0] (gallery), later rounds cycle the other conditions.
void assign_sequence(const DatasetSpec& spec, int sequence, std::string& view, Condition& condition, bool& gallery);

Dataset generate_dataset(const DatasetSpec& spec);

// Writes manifest.jsonl, dataset.json and per-sequence skeleton/silhouette
// archives under `dir` (created if missing). Returns the manifest path.
std::filesystem::path build_dataset(const DatasetSpec& spec, const std::filesystem::path& dir);
std::filesystem::path write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace gaitstr
