#include "plot.hpp"

#include "gaitstr/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

namespace gaitstr::plot {

Image::Image(int width, int height, Rgb fill)
    : width_(width), height_(height), rgb_(static_cast<std::size_t>(width) * height * 3) {
  if (width < 1 || height < 1) throw InvalidInput("image dimensions must be positive");
  for (std::size_t i = 0; i < rgb_.size(); i += 3) std::copy(fill.begin(), fill.end(), rgb_.begin() + static_cast<long>(i));
}

void Image::set(int x, int y, Rgb c) {
  if (x < 0 || y < 0 || x >= width_ || y >= height_) return;
  std::copy(c.begin(), c.end(), rgb_.begin() + (static_cast<long>(y) * width_ + x) * 3);
}

Rgb Image::get(int x, int y) const {
  const auto* p = rgb_.data() + (static_cast<std::size_t>(y) * width_ + x) * 3;
  return {p[0], p[1], p[2]};
}

void Image::line(double x0, double y0, double x1, double y1, Rgb c) {
  const int steps = std::max(1, static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))));
  for (int i = 0; i <= steps; ++i) {
    const double u = static_cast<double>(i) / steps;
    set(static_cast<int>(std::floor(x0 + (x1 - x0) * u)), static_cast<int>(std::floor(y0 + (y1 - y0) * u)), c);
  }
}

void Image::disc(double x, double y, double r, Rgb c) {
  for (int yy = static_cast<int>(std::floor(y - r)); yy <= static_cast<int>(std::ceil(y + r)); ++yy)
    for (int xx = static_cast<int>(std::floor(x - r)); xx <= static_cast<int>(std::ceil(x + r)); ++xx)
      if ((xx + 0.5 - x) * (xx + 0.5 - x) + (yy + 0.5 - y) * (yy + 0.5 - y) <= r * r) set(xx, yy, c);
}

void Image::write_ppm(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "P6\n" << width_ << ' ' << height_ << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb_.data()), static_cast<std::streamsize>(rgb_.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

namespace {

constexpr Rgb kBackground{16, 16, 16};
constexpr Rgb kSilhouette{96, 96, 96};
constexpr Rgb kOriginal{230, 60, 50};
constexpr Rgb kRefined{60, 210, 90};
constexpr int kGap = 2;

void draw_skeleton(Image& img, const JointSequence& j, int frame, int x0, int scale, Rgb color) {
  auto at = [&](int k) {
    const auto [col, row] = canvas_position(j.point(frame, k));
    return std::pair{x0 + col * scale, row * scale};
  };
  for (const auto& [a, b] : j.topology()->edges()) {
    const auto pa = at(a), pb = at(b);
    img.line(pa.first, pa.second, pb.first, pb.second, color);
  }
  for (int k = 0; k < j.points(); ++k) {
    const auto p = at(k);
    img.disc(p.first, p.second, 0.35 * scale, color);
  }
}

}  // namespace

Image render_overlay(const OverlayInputs& in, int frame, int neighbors, int scale) {
  if (!in.original) throw InvalidInput("plot needs an original skeleton sequence");
  const int n = in.original->frames();
  if (frame < 0 || frame >= n)
    throw InvalidInput("frame " + std::to_string(frame) + " is out of range [0, " + std::to_string(n) + ")");
  if (in.refined && in.refined->frames() != n) throw InvalidInput("refined sequence length differs from original");
  if (in.silhouettes && in.silhouettes->frames() != n)
    throw InvalidInput("silhouette sequence length differs from skeletons");
  if (scale < 1 || neighbors < 0) throw InvalidInput("scale must be >= 1 and neighbors >= 0");

  const int first = std::max(0, frame - neighbors), last = std::min(n - 1, frame + neighbors);
  const int panel_w = kSilhouetteWidth * scale, panel_h = kSilhouetteHeight * scale;
  const int panels = last - first + 1;
  Image img(panels * panel_w + (panels - 1) * kGap, panel_h, {255, 255, 255});
  for (int f = first; f <= last; ++f) {
    const int x0 = (f - first) * (panel_w + kGap);
    for (int y = 0; y < panel_h; ++y)
      for (int x = 0; x < panel_w; ++x) {
        const bool fg = in.silhouettes && in.silhouettes->at(f, y / scale, x / scale);
        img.set(x0 + x, y, fg ? kSilhouette : kBackground);
      }
    draw_skeleton(img, *in.original, f, x0, scale, kOriginal);
    if (in.refined) draw_skeleton(img, *in.refined, f, x0, scale, kRefined);
    if (f == frame)  // underline the requested frame
      for (int x = 0; x < panel_w; ++x)
        for (int y = panel_h - scale; y < panel_h; ++y) img.set(x0 + x, y, {240, 200, 40});
  }
  return img;
}

}  // namespace gaitstr::plot
