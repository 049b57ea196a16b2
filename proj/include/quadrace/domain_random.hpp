#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "quadrace/dynamics.hpp"
#include "quadrace/rng.hpp"

namespace quadrace {

// Sampling intervals of the general (cross-platform) scheme.
struct GeneralRanges {
  static constexpr double omega_min_lo = 0.0, omega_min_hi = 500.0;
  static constexpr double omega_max_lo = 3000.0, omega_max_hi = 5000.0;
  static constexpr double k_l_lo = 0.0, k_l_hi = 1.0;
  static constexpr double tau_lo = 0.01, tau_hi = 0.1;
  static constexpr double k_omega_lo = 10.0, k_omega_hi = 30.0;
  static constexpr double k_xy_lo = 0.1, k_xy_hi = 0.3;
  static constexpr double k_pq_lo = 200.0, k_pq_hi = 800.0;
  static constexpr double k_pq_jitter = 50.0;
  static constexpr double k_r_lo = 20.0, k_r_hi = 80.0;
  static constexpr double k_rd_lo = 2.0, k_rd_hi = 8.0;
};

// Largest k_l the percentage scheme may produce.
inline constexpr double kKlCap = 1.0 - 1e-6;

ModelParams sample_general(Rng& rng);
// Multiplies every parameter by its own U(1 - p, 1 + p) draw. Requires
// 0 <= p < 1; throws InvalidScheme otherwise or when 100 consecutive draws
// all yield omega_max <= omega_min.
ModelParams sample_percentage(const ModelParams& base, double p, Rng& rng);

class RandomizationScheme {
 public:
  enum class Kind { General, Percentage, Fixed };

  static RandomizationScheme general() { return RandomizationScheme(Kind::General, {}, 0.0); }
  static RandomizationScheme percentage(const ModelParams& base, double p);
  static RandomizationScheme fixed(const ModelParams& base) {
    return RandomizationScheme(Kind::Fixed, base, 0.0);
  }

  // Parses "general", "fixed" or "pct:<p>" (p as a fraction, e.g. pct:0.2).
  // Fixed and percentage schemes require base parameters.
  static RandomizationScheme parse(std::string_view spec,
                                   const std::optional<ModelParams>& base);

  ModelParams sample(Rng& rng) const;
  std::string describe() const;

  Kind kind() const { return kind_; }
  const ModelParams& base() const { return base_; }
  double fraction() const { return p_; }

 private:
  RandomizationScheme(Kind kind, const ModelParams& base, double p)
      : kind_(kind), base_(base), p_(p) {}

  Kind kind_;
  ModelParams base_;
  double p_;
};

}  // namespace quadrace
