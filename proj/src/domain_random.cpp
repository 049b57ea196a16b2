#include "quadrace/domain_random.hpp"

#include <sstream>

#include "quadrace/errors.hpp"

namespace quadrace {

ModelParams sample_general(Rng& rng) {
  using R = GeneralRanges;
  ModelParams p;
  p.omega_min = uniform(rng, R::omega_min_lo, R::omega_min_hi);
  p.omega_max = uniform(rng, R::omega_max_lo, R::omega_max_hi);
  p.k_l = uniform(rng, R::k_l_lo, R::k_l_hi);
  p.tau = uniform(rng, R::tau_lo, R::tau_hi);
  p.k_omega_hat = uniform(rng, R::k_omega_lo, R::k_omega_hi);
  p.k_x_hat = uniform(rng, R::k_xy_lo, R::k_xy_hi);
  p.k_y_hat = uniform(rng, R::k_xy_lo, R::k_xy_hi);
  const double k_p = uniform(rng, R::k_pq_lo, R::k_pq_hi);
  const double k_q = uniform(rng, R::k_pq_lo, R::k_pq_hi);
  for (int i = 0; i < 4; ++i) p.k_p_hat[i] = k_p + uniform(rng, -R::k_pq_jitter, R::k_pq_jitter);
  for (int i = 0; i < 4; ++i) p.k_q_hat[i] = k_q + uniform(rng, -R::k_pq_jitter, R::k_pq_jitter);
  p.k_r_hat.setConstant(uniform(rng, R::k_r_lo, R::k_r_hi));
  p.k_rd_hat.setConstant(uniform(rng, R::k_rd_lo, R::k_rd_hi));
  return p;
}

ModelParams sample_percentage(const ModelParams& base, double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw InvalidScheme("randomization fraction must lie in [0, 1)");
  if (p == 0.0) return base;
  auto scale = [&](double x) { return x * uniform(rng, 1.0 - p, 1.0 + p); };
  auto scale4 = [&](const Vec4& x) {
    Vec4 out;
    for (int i = 0; i < 4; ++i) out[i] = scale(x[i]);
    return out;
  };
  for (int attempt = 0; attempt < 100; ++attempt) {
    ModelParams s;
    s.k_omega_hat = scale(base.k_omega_hat);
    s.k_x_hat = scale(base.k_x_hat);
    s.k_y_hat = scale(base.k_y_hat);
    s.k_p_hat = scale4(base.k_p_hat);
    s.k_q_hat = scale4(base.k_q_hat);
    s.k_r_hat = scale4(base.k_r_hat);
    s.k_rd_hat = scale4(base.k_rd_hat);
    s.omega_min = scale(base.omega_min);
    s.omega_max = scale(base.omega_max);
    s.k_l = std::min(scale(base.k_l), kKlCap);
    s.tau = scale(base.tau);
    if (s.omega_max > s.omega_min) return s;
  }
  throw InvalidScheme("percentage scheme could not produce omega_max > omega_min");
}

RandomizationScheme RandomizationScheme::percentage(const ModelParams& base, double p) {
  if (!(p >= 0.0 && p < 1.0)) throw InvalidScheme("randomization fraction must lie in [0, 1)");
  base.validate();
  return RandomizationScheme(Kind::Percentage, base, p);
}

RandomizationScheme RandomizationScheme::parse(std::string_view spec,
                                               const std::optional<ModelParams>& base) {
  if (spec == "general") return general();
  if (spec == "fixed") {
    if (!base) throw InvalidScheme("--dr fixed requires base parameters");
    return fixed(*base);
  }
  if (spec.starts_with("pct:")) {
    if (!base) throw InvalidScheme("--dr pct:<p> requires base parameters");
    const std::string text(spec.substr(4));
    std::istringstream in(text);
    double p = 0.0;
    if (!(in >> p) || !in.eof()) throw InvalidScheme("bad randomization fraction '" + text + "'");
    return percentage(*base, p);
  }
  throw InvalidScheme("unknown randomization scheme '" + std::string(spec) + "'");
}

ModelParams RandomizationScheme::sample(Rng& rng) const {
  switch (kind_) {
    case Kind::General:
      return sample_general(rng);
    case Kind::Percentage:
      return sample_percentage(base_, p_, rng);
    case Kind::Fixed:
      return base_;
  }
  return base_;
}

std::string RandomizationScheme::describe() const {
  switch (kind_) {
    case Kind::General:
      return "general";
    case Kind::Percentage: {
      std::ostringstream out;
      out << "pct:" << p_;
      return out.str();
    }
    case Kind::Fixed:
      return "fixed";
  }
  return "?";
}

}  // namespace quadrace
