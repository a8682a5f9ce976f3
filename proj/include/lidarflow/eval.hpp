#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lidarflow/error.hpp"
#include "lidarflow/flow.hpp"

namespace lidarflow {

/// Per-pixel evaluation masks over H x W. `valid` marks pixels with ground
/// truth; `noc` and `fg` are subsets of it.
struct EvalMasks {
  int height = 0, width = 0;
  std::vector<std::uint8_t> valid, noc, fg;

  /// Masks for `gt_all` (all GT pixels) and `gt_noc` (its non-occluded
  /// subset), with an optional foreground map; empty `fg` means none.
  static EvalMasks from(const FlowField& gt_all, const FlowField* gt_noc, const std::vector<std::uint8_t>& fg) {
    EvalMasks m;
    m.height = gt_all.height;
    m.width = gt_all.width;
    const std::size_t n = gt_all.size();
    if (gt_noc && !gt_noc->same_dims(gt_all)) throw ShapeError("eval: noc ground truth dims differ from all");
    if (!fg.empty() && fg.size() != n) throw ShapeError("eval: object map dims differ from ground truth");
    m.valid.resize(n);
    m.noc.resize(n);
    m.fg.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      m.valid[i] = gt_all.is_valid(i);
      m.noc[i] = m.valid[i] && (!gt_noc || gt_noc->is_valid(i));
      m.fg[i] = m.valid[i] && !fg.empty() && fg[i] != 0;
    }
    return m;
  }
};

struct EpeResult {
  std::vector<double> map;  // 0 at invalid pixels
  double mean = 0.0;
};

/// Per-pixel end-point error and its mean over valid pixels.
inline EpeResult epe_map(const FlowField& pred, const FlowField& gt, const std::vector<std::uint8_t>& valid) {
  if (!pred.same_dims(gt)) {
    throw ShapeError("epe_map: prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                     " vs ground truth " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
  if (valid.size() != gt.size()) throw ShapeError("epe_map: mask size mismatch");
  EpeResult r{std::vector<double>(gt.size(), 0.0), 0.0};
  std::size_t count = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!valid[i]) continue;
    const double du = static_cast<double>(pred.u[i]) - gt.u[i];
    const double dv = static_cast<double>(pred.v[i]) - gt.v[i];
    r.map[i] = std::sqrt(du * du + dv * dv);
    total += r.map[i];
    ++count;
  }
  if (count == 0) throw EmptyMaskError("epe_map: no valid pixels");
  r.mean = total / static_cast<double>(count);
  return r;
}

/// KITTI outlier rule: valid, epe >= 3 px and epe >= 5% of |gt|.
inline bool is_outlier(double epe, double gt_u, double gt_v) {
  return epe >= 3.0 && epe >= 0.05 * std::sqrt(gt_u * gt_u + gt_v * gt_v);
}

inline std::vector<std::uint8_t> outlier_mask(const std::vector<double>& epe, const FlowField& gt,
                                              const std::vector<std::uint8_t>& valid) {
  if (epe.size() != gt.size() || valid.size() != gt.size()) throw ShapeError("outlier_mask: size mismatch");
  std::vector<std::uint8_t> out(gt.size(), 0);
  for (std::size_t i = 0; i < gt.size(); ++i) out[i] = valid[i] && is_outlier(epe[i], gt.u[i], gt.v[i]);
  return out;
}

/// Outlier count over a bucket; the rate is undefined for an empty bucket.
struct FlBucket {
  std::size_t outliers = 0;
  std::size_t pixels = 0;

  [[nodiscard]] std::optional<double> rate() const {
    if (pixels == 0) return std::nullopt;
    return 100.0 * static_cast<double>(outliers) / static_cast<double>(pixels);
  }
  FlBucket& operator+=(const FlBucket& o) {
    outliers += o.outliers;
    pixels += o.pixels;
    return *this;
  }
  friend bool operator==(const FlBucket&, const FlBucket&) = default;
};

/// Regions: 0 background (valid minus fg), 1 foreground, 2 all valid.
/// Filters: 0 non-occluded, 1 all.
struct EvalReport {
  std::array<std::array<FlBucket, 3>, 2> fl{};
  double epe_sum = 0.0;
  std::size_t epe_pixels = 0;
  std::size_t frames = 0;

  [[nodiscard]] std::optional<double> epe_mean() const {
    if (epe_pixels == 0) return std::nullopt;
    return epe_sum / static_cast<double>(epe_pixels);
  }
  [[nodiscard]] const FlBucket& bucket(int filter, int region) const {
    return fl[static_cast<std::size_t>(filter)][static_cast<std::size_t>(region)];
  }

  /// Accumulate another frame; rates are pooled over pixels.
  EvalReport& operator+=(const EvalReport& o) {
    for (std::size_t f = 0; f < 2; ++f)
      for (std::size_t r = 0; r < 3; ++r) fl[f][r] += o.fl[f][r];
    epe_sum += o.epe_sum;
    epe_pixels += o.epe_pixels;
    frames += o.frames;
    return *this;
  }
};

inline EvalReport fl_scores(const std::vector<std::uint8_t>& outliers, const EvalMasks& m) {
  const std::size_t n = m.valid.size();
  if (outliers.size() != n || m.noc.size() != n || m.fg.size() != n) throw ShapeError("fl_scores: size mismatch");
  EvalReport r;
  r.frames = 1;
  for (std::size_t i = 0; i < n; ++i) {
    if (!m.valid[i]) continue;
    const int region = m.fg[i] ? 1 : 0;
    for (int f = 0; f < 2; ++f) {
      if (f == 0 && !m.noc[i]) continue;
      for (int reg : {region, 2}) {
        auto& b = r.fl[static_cast<std::size_t>(f)][static_cast<std::size_t>(reg)];
        ++b.pixels;
        b.outliers += outliers[i] != 0;
      }
    }
  }
  return r;
}

/// Full scoring of one frame. EPE is averaged over all valid pixels.
inline EvalReport evaluate_frame(const FlowField& pred, const FlowField& gt, const EvalMasks& m) {
  const auto epe = epe_map(pred, gt, m.valid);
  auto r = fl_scores(outlier_mask(epe.map, gt, m.valid), m);
  for (std::size_t i = 0; i < epe.map.size(); ++i) {
    if (!m.valid[i]) continue;
    r.epe_sum += epe.map[i];
    ++r.epe_pixels;
  }
  return r;
}

namespace detail {
inline std::string fmt_opt(const std::optional<double>& v, int precision) {
  if (!v) return "undefined";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << *v;
  return os.str();
}
}  // namespace detail

/// CSV: one row per occlusion filter with rates, counts and the EPE.
inline void write_report_csv(std::ostream& os, const EvalReport& r) {
  os << "filter,fl_bg,fl_fg,fl_all,px_bg,px_fg,px_all,epe\n";
  const char* names[] = {"noc", "occ"};
  for (int f = 0; f < 2; ++f) {
    os << names[f];
    for (int reg = 0; reg < 3; ++reg) os << ',' << detail::fmt_opt(r.bucket(f, reg).rate(), 4);
    for (int reg = 0; reg < 3; ++reg) os << ',' << r.bucket(f, reg).pixels;
    os << ',' << detail::fmt_opt(r.epe_mean(), 4) << '\n';
  }
}

/// Aligned table in the benchmark layout: Noc and Occ rows, Fl columns, one
/// EPE shared by both rows.
inline void write_report_table(std::ostream& os, const EvalReport& r) {
  auto cell = [](const std::optional<double>& v) {
    std::ostringstream c;
    c << std::setw(10) << detail::fmt_opt(v, 2);
    return c.str();
  };
  os << "      " << std::setw(10) << "Fl-BG" << std::setw(10) << "Fl-FG" << std::setw(10) << "Fl-ALL" << std::setw(10)
     << "EPE" << '\n';
  const char* names[] = {"Noc", "Occ"};
  for (int f = 0; f < 2; ++f) {
    os << std::left << std::setw(6) << names[f] << std::right;
    for (int reg = 0; reg < 3; ++reg) os << cell(r.bucket(f, reg).rate());
    os << (f == 0 ? cell(r.epe_mean()) : std::string(10, ' ')) << '\n';
  }
}

}  // namespace lidarflow
