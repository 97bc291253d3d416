#include "fflab/numerics.hpp"

#include "fflab/errors.hpp"

#include <algorithm>
#include <limits>
#include <string>
#include <vector>

namespace fflab {

Probability::Probability(double value) : value_(value) {
  if (std::isnan(value)) throw DomainError("probability is NaN");
  if (value < 0.0 || value > 1.0) throw DomainError("probability out of [0,1]: " + std::to_string(value));
}

LogOdds log_odds(Probability p) {
  const double v = p.value();
  if (v == 0.0) return {-std::numeric_limits<double>::infinity(), true};
  if (v == 1.0) return {std::numeric_limits<double>::infinity(), true};
  return {std::log(v) - std::log1p(-v), false};
}

LogBayesFactor log_bayes_factor(Probability p1, Probability p2) {
  const LogOdds a = log_odds(p1);
  const LogOdds b = log_odds(p2);
  const bool saturated = a.saturated || b.saturated;
  if (a.saturated && b.saturated && a.nats == b.nats) return {0.0, true};
  return {b.nats - a.nats, saturated};
}

Vector softmax(const Vector& x) {
  if (x.size() == 0) throw DomainError("softmax of an empty vector");
  if (!x.allFinite()) throw DomainError("softmax input has non-finite entries");
  const double m = x.maxCoeff();
  Vector e = (x.array() - m).exp().matrix();
  double total = 0.0;
  for (Eigen::Index i = 0; i < e.size(); ++i) total += e[i];
  return e / total;
}

double log_sum_exp(std::span<const double> x) {
  if (x.empty()) return -std::numeric_limits<double>::infinity();
  double m = -std::numeric_limits<double>::infinity();
  for (double v : x) m = std::max(m, v);
  if (std::isinf(m)) return m;
  double total = 0.0;
  for (double v : x) total += std::exp(v - m);
  return m + std::log(total);
}

namespace {

std::vector<char> class_mask(Eigen::Index n, std::span<const int> token_class) {
  std::vector<char> mask(static_cast<size_t>(n), 0);
  for (int t : token_class) {
    if (t < 0 || t >= n) throw InputError("answer class token out of range: " + std::to_string(t));
    mask[static_cast<size_t>(t)] = 1;
  }
  return mask;
}

}  // namespace

LogOdds class_log_odds(const Vector& logits, std::span<const int> token_class) {
  const auto mask = class_mask(logits.size(), token_class);
  std::vector<double> inside, outside;
  for (Eigen::Index i = 0; i < logits.size(); ++i) (mask[static_cast<size_t>(i)] ? inside : outside).push_back(logits[i]);
  if (inside.empty()) return {-std::numeric_limits<double>::infinity(), true};
  if (outside.empty()) return {std::numeric_limits<double>::infinity(), true};
  const double lo = log_sum_exp(inside) - log_sum_exp(outside);
  return {lo, std::isinf(lo)};
}

double class_probability(const Vector& logits, std::span<const int> token_class) {
  const auto mask = class_mask(logits.size(), token_class);
  const Vector p = softmax(logits);
  double total = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (mask[static_cast<size_t>(i)]) total += p[i];
  return std::min(total, 1.0);
}

namespace {

// log(p_i / sum_{j != i} p_j) from an explicit probability vector.
double coordinate_log_odds(const Vector& p, Eigen::Index i) {
  double rest = 0.0;
  for (Eigen::Index j = 0; j < p.size(); ++j)
    if (j != i) rest += p[j];
  return std::log(p[i]) - std::log(rest);
}

}  // namespace

LogBayesFactor logit_bump_shift(const Vector& x, Eigen::Index i, double c) {
  if (i < 0 || i >= x.size()) throw InputError("logit_bump_shift index out of range");
  if (!std::isfinite(c)) throw DomainError("logit_bump_shift shift must be finite");
  if (x.size() < 2) throw DomainError("logit_bump_shift needs at least two logits");
  Vector bumped = x;
  bumped[i] += c;
  const double before = coordinate_log_odds(softmax(x), i);
  const double after = coordinate_log_odds(softmax(bumped), i);
  return {after - before, false};
}

Vector rms_normalize(const Vector& x, const Vector& gain, double eps) {
  if (x.size() != gain.size()) throw InputError("rms_normalize: gain dimension mismatch");
  double ss = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) ss += x[i] * x[i];
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + eps);
  return (x * inv).cwiseProduct(gain);
}

void rope_apply_inplace(std::span<double> v, int position, double base) {
  const int d = static_cast<int>(v.size());
  if (d % 2 != 0) throw ConstructionError("rope needs an even head dimension, got " + std::to_string(d));
  for (int j = 0; j < d / 2; ++j) {
    const double angle = position * rope_frequency(j, d, base);
    const double c = std::cos(angle), s = std::sin(angle);
    const double a = v[2 * j], b = v[2 * j + 1];
    v[2 * j] = a * c - b * s;
    v[2 * j + 1] = a * s + b * c;
  }
}

Vector rope_apply(const Vector& v, int position, double base) {
  Vector out = v;
  rope_apply_inplace(std::span<double>(out.data(), static_cast<size_t>(out.size())), position, base);
  return out;
}

bool all_finite(const Matrix& m) { return m.allFinite(); }
bool all_finite(const Vector& v) { return v.allFinite(); }

}  // namespace fflab
