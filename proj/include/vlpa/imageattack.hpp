#pragma once

// Image side of the attack: random differentiable input transforms, the
// momentum sign step with L1-normalised gradients, and projection onto the
// eps-ball around the clean image intersected with [0,1].

#include <array>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "vlpa/autodiff.hpp"
#include "vlpa/corpus.hpp"
#include "vlpa/rng.hpp"

namespace vlpa {

enum class TransformKind { kRotation, kSolarize, kTranslation, kShear, kColorJitter, kCrop, kPadResize };

inline constexpr std::array<TransformKind, 7> kAllTransforms = {
    TransformKind::kRotation, TransformKind::kSolarize,  TransformKind::kTranslation, TransformKind::kShear,
    TransformKind::kColorJitter, TransformKind::kCrop, TransformKind::kPadResize};

inline const char* transform_name(TransformKind k) {
  switch (k) {
    case TransformKind::kRotation: return "rotation";
    case TransformKind::kSolarize: return "solarize";
    case TransformKind::kTranslation: return "translation";
    case TransformKind::kShear: return "shear";
    case TransformKind::kColorJitter: return "color_jitter";
    case TransformKind::kCrop: return "crop";
    case TransformKind::kPadResize: return "pad_resize";
  }
  return "?";
}

inline TransformKind parse_transform(std::string_view s) {
  for (TransformKind k : kAllTransforms)
    if (s == transform_name(k)) return k;
  throw ConfigError("unknown transform '" + std::string(s) + "'");
}

struct Range {
  double lo, hi;
};

struct TransformSpec {
  std::vector<TransformKind> kinds{kAllTransforms.begin(), kAllTransforms.end()};
  double p = 0.6;
  Range rotation_deg{-15.0, 15.0};
  Range translation_px{-4.0, 4.0};
  Range shear{-0.2, 0.2};
  double crop_min_area = 0.75;
  Range jitter_gain{0.8, 1.2};
  Range jitter_bias{-0.1, 0.1};
  Range solarize_threshold{0.5, 0.9};
  double pad_max_px = 4.0;

  void validate() const {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("transform probability must lie in [0,1]");
    if (kinds.empty()) throw ConfigError("transform kind list is empty");
    for (const Range& r : {rotation_deg, translation_px, shear, jitter_gain, jitter_bias, solarize_threshold})
      if (!(r.lo <= r.hi)) throw ConfigError("transform parameter range is empty");
    if (!(crop_min_area > 0.0 && crop_min_area <= 1.0)) throw ConfigError("crop_min_area must lie in (0,1]");
    if (!(pad_max_px >= 0.0)) throw ConfigError("pad_max_px must be >= 0");
  }
};

// One concrete transform with its drawn parameters.
struct TransformDraw {
  bool identity = true;
  TransformKind kind = TransformKind::kRotation;
  std::array<double, 6> v{};  // kind-specific parameters
};

inline TransformDraw draw_transform(const TransformSpec& spec, Rng& rng) {
  TransformDraw d;
  if (!rng.bernoulli(spec.p)) return d;
  d.identity = false;
  d.kind = spec.kinds[rng.below(spec.kinds.size())];
  auto u = [&](Range r) { return rng.uniform(r.lo, r.hi); };
  switch (d.kind) {
    case TransformKind::kRotation: d.v[0] = u(spec.rotation_deg); break;
    case TransformKind::kSolarize: d.v[0] = u(spec.solarize_threshold); break;
    case TransformKind::kTranslation:
      d.v[0] = u(spec.translation_px);
      d.v[1] = u(spec.translation_px);
      break;
    case TransformKind::kShear:
      d.v[0] = u(spec.shear);
      d.v[1] = u(spec.shear);
      break;
    case TransformKind::kColorJitter:
      for (int c = 0; c < 3; ++c) {
        d.v[c] = u(spec.jitter_gain);
        d.v[3 + c] = u(spec.jitter_bias);
      }
      break;
    case TransformKind::kCrop: {
      const double area = rng.uniform(spec.crop_min_area, 1.0);
      const double aspect = std::exp(rng.uniform(-0.15, 0.15));
      const double side = static_cast<double>(kImageSide);
      const double w = std::min(side, side * std::sqrt(area * aspect));
      const double h = std::min(side, area * side * side / w);
      d.v[0] = rng.uniform(0.0, side - w);
      d.v[1] = rng.uniform(0.0, side - h);
      d.v[2] = w;
      d.v[3] = h;
      break;
    }
    case TransformKind::kPadResize:
      for (int i = 0; i < 4; ++i) d.v[i] = rng.uniform(0.0, spec.pad_max_px);
      break;
  }
  return d;
}

namespace detail {

// Sampling grid [32,32,2] of source (x,y) positions for a geometric transform.
template <class F>
Tensor make_grid(F&& source_of) {
  Tensor g(Shape{kImageSide, kImageSide, 2});
  for (std::size_t y = 0; y < kImageSide; ++y)
    for (std::size_t x = 0; x < kImageSide; ++x) {
      auto [sx, sy] = source_of(static_cast<double>(x), static_cast<double>(y));
      g[(y * kImageSide + x) * 2] = sx;
      g[(y * kImageSide + x) * 2 + 1] = sy;
    }
  return g;
}

inline constexpr double kCenter = (static_cast<double>(kImageSide) - 1.0) / 2.0;

// Crop box [x0,x0+w]x[y0,y0+h] (pixel-edge units) stretched back to the full frame.
inline std::pair<double, double> box_source(double x, double y, double x0, double y0, double w, double h) {
  const double side = static_cast<double>(kImageSide);
  return {x0 + (x + 0.5) * w / side - 0.5, y0 + (y + 0.5) * h / side - 0.5};
}

}  // namespace detail

// Sampling grid for a geometric draw; empty tensor for pixel-wise kinds.
inline Tensor transform_grid(const TransformDraw& d) {
  using detail::kCenter;
  switch (d.kind) {
    case TransformKind::kRotation: {
      const double r = d.v[0] * M_PI / 180.0, c = std::cos(r), s = std::sin(r);
      return detail::make_grid([&](double x, double y) {
        const double dx = x - kCenter, dy = y - kCenter;
        return std::pair{c * dx + s * dy + kCenter, -s * dx + c * dy + kCenter};
      });
    }
    case TransformKind::kTranslation:
      return detail::make_grid([&](double x, double y) { return std::pair{x - d.v[0], y - d.v[1]}; });
    case TransformKind::kShear:
      return detail::make_grid([&](double x, double y) {
        return std::pair{x + d.v[0] * (y - kCenter), y + d.v[1] * (x - kCenter)};
      });
    case TransformKind::kCrop:
      return detail::make_grid(
          [&](double x, double y) { return detail::box_source(x, y, d.v[0], d.v[1], d.v[2], d.v[3]); });
    case TransformKind::kPadResize: {
      const double side = static_cast<double>(kImageSide);
      const double w = side + d.v[0] + d.v[2], h = side + d.v[1] + d.v[3];
      return detail::make_grid(
          [&](double x, double y) { return detail::box_source(x, y, -d.v[0], -d.v[1], w, h); });
    }
    default: return Tensor();
  }
}

// Applies a drawn transform. Output stays in [0,1] for inputs in [0,1].
inline Var apply_draw(const Var& x, const TransformDraw& d) {
  if (d.identity) return x;
  Tape& tape = *x.tape();
  switch (d.kind) {
    case TransformKind::kSolarize: {
      Tensor f = x.value();
      for (double& v : f.data())
        if (v >= d.v[0]) v = 1.0 - v;
      return straight_through(x, std::move(f));
    }
    case TransformKind::kColorJitter: {
      Tensor gain(x.shape()), bias(x.shape());
      const std::size_t plane = kImageSide * kImageSide;
      for (std::size_t i = 0; i < gain.size(); ++i) {
        gain[i] = d.v[i / plane];
        bias[i] = d.v[3 + i / plane];
      }
      return clamp(add(mul(x, tape.constant(std::move(gain))), tape.constant(std::move(bias))), 0.0, 1.0);
    }
    default:
      return clamp(bilinear_sample(x, tape.constant(transform_grid(d))), 0.0, 1.0);
  }
}

// With probability 1-p returns x itself; otherwise one uniformly chosen transform.
inline Var apply_transform(const Var& x, const TransformSpec& spec, Rng& rng) {
  if (x.shape() != image_shape()) throw UsageError("apply_transform: expected [3,32,32], got " + shape_str(x.shape()));
  return apply_draw(x, draw_transform(spec, rng));
}

inline Tensor apply_transform(const Tensor& x, const TransformSpec& spec, Rng& rng) {
  Tape t;
  return apply_transform(t.borrow(x), spec, rng).value();
}

struct PerturbationState {
  Tensor x_orig;
  Tensor x_adv;
  Tensor g_accum;
  double eps = 16.0 / 255.0;
  double alpha = 1.6 / 255.0;
  double mu = 1.0;
};

inline PerturbationState init_perturbation(const Tensor& image, double eps, double alpha, double mu) {
  if (image.shape() != image_shape()) throw UsageError("init_perturbation: expected [3,32,32] image");
  if (!(eps > 0.0 && eps < 1.0)) throw ConfigError("eps must lie in (0,1)");
  return {image, image, Tensor(image.shape(), 0.0), eps, alpha, mu};
}

inline double linf_distance(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline Tensor averaged_gradient(std::span<const Tensor> grads) {
  if (grads.empty()) throw UsageError("averaged_gradient: no gradients");
  Tensor out(grads[0].shape(), 0.0);
  for (const Tensor& g : grads) {
    if (g.shape() != out.shape()) throw UsageError("averaged_gradient: shape mismatch");
    if (!g.all_finite()) throw NumericError("averaged_gradient: non-finite gradient");
    for (std::size_t i = 0; i < g.size(); ++i) out[i] += g[i];
  }
  const double inv = 1.0 / static_cast<double>(grads.size());
  for (double& v : out.data()) v *= inv;
  return out;
}

// Clip to the eps-ball around x_orig, then to [0,1].
inline void project(PerturbationState& s) {
  for (std::size_t i = 0; i < s.x_adv.size(); ++i) {
    const double lo = std::max(0.0, s.x_orig[i] - s.eps);
    const double hi = std::min(1.0, s.x_orig[i] + s.eps);
    s.x_adv[i] = std::clamp(s.x_adv[i], lo, hi);
  }
}

inline void momentum_sign_step(PerturbationState& s, const Tensor& grad) {
  if (grad.shape() != s.x_adv.shape()) throw UsageError("momentum_sign_step: gradient shape mismatch");
  if (!grad.all_finite()) throw NumericError("momentum_sign_step: non-finite gradient");
  double l1 = 0.0;
  for (double g : grad.data()) l1 += std::abs(g);
  l1 = std::max(l1, 1e-12);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    s.g_accum[i] = s.mu * s.g_accum[i] + grad[i] / l1;
    const double g = s.g_accum[i];
    s.x_adv[i] += s.alpha * static_cast<double>((g > 0.0) - (g < 0.0));
  }
  project(s);
}

// Lookahead point: transformed image plus alpha*mu*g_accum, clipped to [0,1].
inline Var nesterov_lookahead(const Var& transformed, const PerturbationState& s) {
  Tensor step(s.g_accum.shape());
  for (std::size_t i = 0; i < step.size(); ++i) step[i] = s.alpha * s.mu * s.g_accum[i];
  return clamp(add(transformed, transformed.tape()->constant(std::move(step))), 0.0, 1.0);
}

inline Tensor nesterov_lookahead(const PerturbationState& s, const TransformSpec& spec, Rng& rng) {
  Tape t;
  return nesterov_lookahead(apply_transform(t.borrow(s.x_adv), spec, rng), s).value();
}

}  // namespace vlpa
