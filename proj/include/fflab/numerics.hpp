#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <span>

namespace fflab {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kRopeBase = 10000.0;
inline constexpr double kNormEps = 1e-6;

enum class DisplayBase { Nats, Dits };

// A probability in [0, 1]. Construction rejects NaN and out-of-range values.
class Probability {
 public:
  explicit Probability(double value);
  double value() const { return value_; }

 private:
  double value_;
};

// log(p / (1 - p)) in nats. Saturated when p was exactly 0 or 1 (value is +-inf).
struct LogOdds {
  double nats = 0.0;
  bool saturated = false;

  double in(DisplayBase base) const { return base == DisplayBase::Nats ? nats : nats / std::numbers::ln10; }
  double dits() const { return in(DisplayBase::Dits); }
};

// Difference of two log-odds, in nats.
struct LogBayesFactor {
  double nats = 0.0;
  bool saturated = false;

  double in(DisplayBase base) const { return base == DisplayBase::Nats ? nats : nats / std::numbers::ln10; }
  double dits() const { return in(DisplayBase::Dits); }
};

LogOdds log_odds(Probability p);
LogBayesFactor log_bayes_factor(Probability p1, Probability p2);

// Max-subtracted softmax. Throws DomainError on empty or non-finite input.
Vector softmax(const Vector& x);

// log(sum(exp(x))) with max subtraction; -inf for an empty range.
double log_sum_exp(std::span<const double> x);

// Log-odds that softmax(logits) lands in `token_class`, evaluated as
// lse(class) - lse(complement) so it stays finite for near-saturated classes.
// Repeated ids are counted once.
LogOdds class_log_odds(const Vector& logits, std::span<const int> token_class);

// Probability mass of `token_class` under softmax(logits).
double class_probability(const Vector& logits, std::span<const int> token_class);

// Change in log-odds of coordinate i when x_i is bumped by c. Both sides are
// evaluated from explicit softmax probabilities; the result equals c.
LogBayesFactor logit_bump_shift(const Vector& x, Eigen::Index i, double c);

// x / sqrt(mean(x^2) + eps), scaled elementwise by gain.
Vector rms_normalize(const Vector& x, const Vector& gain, double eps = kNormEps);

// Rotary embedding on interleaved pairs (2j, 2j+1) with angle position * base^(-2j/d).
Vector rope_apply(const Vector& v, int position, double base = kRopeBase);
void rope_apply_inplace(std::span<double> v, int position, double base = kRopeBase);

// Rotation angle per unit position for pair j of a d-dimensional head.
inline double rope_frequency(int pair, int dim, double base = kRopeBase) {
  return std::pow(base, -2.0 * pair / dim);
}

bool all_finite(const Matrix& m);
bool all_finite(const Vector& v);

}  // namespace fflab
