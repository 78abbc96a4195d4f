#include "cassensing/plotting.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include "cassensing/error.hpp"

namespace cas {

namespace {

using Rgb = std::array<unsigned char, 3>;

struct Image {
  int w;
  int h;
  std::vector<unsigned char> px;

  Image(int width, int height, Rgb fill) : w(width), h(height), px(static_cast<std::size_t>(width) * height * 3) {
    for (std::size_t i = 0; i < px.size(); i += 3) {
      px[i] = fill[0];
      px[i + 1] = fill[1];
      px[i + 2] = fill[2];
    }
  }

  void set(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= w || y >= h) {
      return;
    }
    const std::size_t i = (static_cast<std::size_t>(y) * w + x) * 3;
    px[i] = c[0];
    px[i + 1] = c[1];
    px[i + 2] = c[2];
  }

  void line(int x0, int y0, int x1, int y1, Rgb c) {
    const int dx = std::abs(x1 - x0);
    const int dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1;
    const int sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) {
        break;
      }
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) {
      std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw FormatError("cannot write " + path.string());
    }
    out << "P6\n" << w << " " << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  }
};

Rgb diverging(double v) {
  v = std::clamp(v, -1.0, 1.0);
  auto mix = [](double a, double b, double t) { return static_cast<unsigned char>(std::lround(a + (b - a) * t)); };
  if (v < 0) {
    const double t = -v;
    return {mix(255, 33, t), mix(255, 102, t), mix(255, 172, t)};
  }
  return {mix(255, 178, v), mix(255, 24, v), mix(255, 43, v)};
}

}  // namespace

void write_field_ppm(const std::filesystem::path& path, const FieldSnapshot& field, int channel, int cell,
                     double limit) {
  if (channel < 0 || channel >= field.channels || cell < 1) {
    throw ParameterError("invalid channel or cell size for a field image");
  }
  const int gh = field.grid.height();
  const int gw = field.grid.width();
  const auto m = static_cast<std::size_t>(field.channels);
  if (!(limit > 0.0)) {
    for (std::size_t i = 0; i < field.grid.size(); ++i) {
      if (field.valid[i]) {
        limit = std::max(limit, std::abs(static_cast<double>(field.values[i * m + static_cast<std::size_t>(channel)])));
      }
    }
    if (!(limit > 0.0)) {
      limit = 1.0;
    }
  }
  Image img(gw * cell, gh * cell, {255, 255, 255});
  for (int r = 0; r < gh; ++r) {
    for (int c = 0; c < gw; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * gw + c;
      const Rgb col = field.valid[i] ? diverging(field.values[i * m + static_cast<std::size_t>(channel)] / limit)
                                     : Rgb{128, 128, 128};
      for (int y = 0; y < cell; ++y) {
        for (int x = 0; x < cell; ++x) {
          img.set(c * cell + x, (gh - 1 - r) * cell + y, col);
        }
      }
    }
  }
  img.save(path);
}

void write_line_plot_ppm(const std::filesystem::path& path, const std::vector<PlotSeries>& series, int width,
                         int height) {
  static const std::array<Rgb, 8> palette{{{31, 119, 180},
                                           {255, 127, 14},
                                           {44, 160, 44},
                                           {214, 39, 40},
                                           {148, 103, 189},
                                           {140, 86, 75},
                                           {227, 119, 194},
                                           {127, 127, 127}}};
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) {
      throw ShapeError("plot series has mismatched x and y lengths");
    }
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) {
        x0 = std::min(x0, s.x[i]);
        x1 = std::max(x1, s.x[i]);
        y0 = std::min(y0, s.y[i]);
        y1 = std::max(y1, s.y[i]);
      }
    }
  }
  if (!(x1 > x0)) {
    x0 -= 0.5;
    x1 += 0.5;
  }
  if (!(y1 > y0)) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  const int margin = 30;
  Image img(width, height, {255, 255, 255});
  const Rgb axis{0, 0, 0};
  img.line(margin, height - margin, width - margin, height - margin, axis);
  img.line(margin, margin, margin, height - margin, axis);
  auto px = [&](double x) { return margin + static_cast<int>(std::lround((x - x0) / (x1 - x0) * (width - 2 * margin))); };
  auto py = [&](double y) {
    return height - margin - static_cast<int>(std::lround((y - y0) / (y1 - y0) * (height - 2 * margin)));
  };
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const Rgb c = palette[k % palette.size()];
    for (std::size_t i = 1; i < s.x.size(); ++i) {
      if (std::isfinite(s.y[i - 1]) && std::isfinite(s.y[i])) {
        img.line(px(s.x[i - 1]), py(s.y[i - 1]), px(s.x[i]), py(s.y[i]), c);
      }
    }
    if (s.x.size() == 1) {
      img.set(px(s.x[0]), py(s.y[0]), c);
    }
  }
  img.save(path);
}

}  // namespace cas
