#pragma once

#include "gaitstr/skeleton.hpp"
#include "gaitstr/synthetic.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

namespace gaitstr::plot {

using Rgb = std::array<std::uint8_t, 3>;

class Image {
 public:
  Image(int width, int height, Rgb fill = {0, 0, 0});
  int width() const { return width_; }
  int height() const { return height_; }
  void set(int x, int y, Rgb c);
  Rgb get(int x, int y) const;
  void line(double x0, double y0, double x1, double y1, Rgb c);
  void disc(double x, double y, double r, Rgb c);
  // Binary PPM (P6).
  void write_ppm(const std::filesystem::path& path) const;

 private:
  int width_, height_;
  std::vector<std::uint8_t> rgb_;
};

struct OverlayInputs {
  const JointSequence* original = nullptr;
  const JointSequence* refined = nullptr;     // optional
  const SilhouetteSequence* silhouettes = nullptr;  // optional
};

// One strip of panels for frames [frame - neighbors, frame + neighbors]
// (clipped to the sequence): silhouette in grey, original skeleton in red,
// refined skeleton in green. Throws InvalidInput for an out-of-range frame.
Image render_overlay(const OverlayInputs& in, int frame, int neighbors, int scale);

}  // namespace gaitstr::plot
