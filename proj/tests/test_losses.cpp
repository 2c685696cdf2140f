#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "dscl/gradcheck.hpp"
#include "dscl/losses.hpp"

using namespace dscl;

namespace {

std::vector<double> random_unit(std::size_t d, Rng& rng) {
  std::vector<double> v(d);
  double s = 0.0;
  for (double& x : v) {
    x = rng.normal();
    s += x * x;
  }
  for (double& x : v) x /= std::sqrt(s);
  return v;
}

struct Config {
  std::vector<double> anchor, zplus;
  QueueSnapshot snap;
  ClassId label = 0;
};

Config random_config(Rng& rng, std::size_t max_m = 64, std::size_t max_d = 16, std::size_t classes = 4) {
  const std::size_t d = 2 + rng.index(max_d - 1);
  const std::size_t m = rng.index(max_m + 1);
  Config c;
  c.anchor = random_unit(d, rng);
  c.zplus = random_unit(d, rng);
  Tensor q(Shape{m, d});
  std::vector<ClassId> labels(m);
  for (std::size_t k = 0; k < m; ++k) {
    const auto row = random_unit(d, rng);
    std::copy(row.begin(), row.end(), q.data() + k * d);
    labels[k] = rng.index(classes);
  }
  c.snap = QueueSnapshot(std::move(q), std::move(labels));
  c.label = rng.index(classes);
  return c;
}

Var vec(const std::vector<double>& v, bool grad = false) { return Var(Tensor(Shape{v.size()}, v), grad); }

double dotv(std::span<const double> a, std::span<const double> b) {
  long double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<long double>(a[i]) * b[i];
  return static_cast<double>(s);
}

// Term-by-term literal evaluation of
//   -1/(|P|+1) sum_{t in {z+} ∪ P} log[exp(w_t z_t·z/tau) / sum_{m in {z+} ∪ M} exp(z_m·z/tau)]
// with w_t = 1 (plain) or the decoupled weights.
double literal_loss(const Config& c, double tau, bool decoupled, double alpha) {
  std::vector<std::span<const double>> cands{c.zplus};
  for (std::size_t k = 0; k < c.snap.size(); ++k) cands.push_back(c.snap.row(k));
  long double denom = 0;
  for (auto z : cands) denom += std::exp(static_cast<long double>(dotv(z, c.anchor)) / tau);
  std::size_t np = 0;
  for (ClassId y : c.snap.labels()) np += y == c.label;
  long double w_plus = 1, w_q = 1;
  if (decoupled && np > 0) {
    w_plus = alpha * (np + 1.0L);
    w_q = (1.0L - alpha) * (np + 1.0L) / np;
  }
  long double total = std::log(std::exp(w_plus * dotv(c.zplus, c.anchor) / tau) / denom);
  for (std::size_t k = 0; k < c.snap.size(); ++k)
    if (c.snap.labels()[k] == c.label) total += std::log(std::exp(w_q * dotv(c.snap.row(k), c.anchor) / tau) / denom);
  return static_cast<double>(-total / (np + 1.0L));
}

// Exact rationals for checking the weight algebra without rounding.
struct Rational {
  __int128 n = 0, d = 1;
  Rational() = default;
  Rational(long long v) : n(v), d(1) {}  // NOLINT
  Rational(__int128 num, __int128 den) : n(num), d(den) { norm(); }
  void norm() {
    if (d < 0) n = -n, d = -d;
    __int128 a = n < 0 ? -n : n, b = d;
    while (b) {
      const __int128 t = a % b;
      a = b;
      b = t;
    }
    if (a > 1) n /= a, d /= a;
  }
  friend Rational operator*(Rational a, Rational b) { return {a.n * b.n, a.d * b.d}; }
  friend Rational operator/(Rational a, Rational b) { return {a.n * b.d, a.d * b.n}; }
  friend Rational operator-(Rational a, Rational b) { return {a.n * b.d - b.n * a.d, a.d * b.d}; }
  friend Rational operator+(Rational a, Rational b) { return {a.n * b.d + b.n * a.d, a.d * b.d}; }
  friend bool operator==(Rational a, Rational b) { return a.n == b.n && a.d == b.d; }
};

}  // namespace

TEST(ConditionalProb, EmptyQueueGivesCertainPositive) {
  const QueueSnapshot empty(Tensor(Shape{0, 2}), {});
  const auto p = conditional_prob(std::vector<double>{1, 0}, std::vector<double>{0, 1}, empty, 0.07);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p[0], 1.0);
}

TEST(ConditionalProb, OrthogonalCandidatesAreUniform) {
  const QueueSnapshot snap(Tensor(Shape{3, 4}, {0, 0, 1, 0, 0, 0, 0, 1, 0, 0, -1, 0}), {0, 1, 2});
  const auto p = conditional_prob(std::vector<double>{1, 0, 0, 0}, std::vector<double>{0, 1, 0, 0}, snap, 0.07);
  for (double v : p) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(ConditionalProb, ScalarSoftmaxValues) {
  const QueueSnapshot snap(Tensor(Shape{1, 2}, {0, 1}), {0});
  const auto p = conditional_prob(std::vector<double>{1, 0}, std::vector<double>{1, 0}, snap, 1.0);
  EXPECT_NEAR(p[0], 0.7311, 1e-4);
  EXPECT_NEAR(p[1], 0.2689, 1e-4);
  EXPECT_NEAR(p[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_THROW(conditional_prob(std::vector<double>{1, 0}, std::vector<double>{1, 0}, snap, 0.0), ConfigError);
}

TEST(SclLoss, EmptyQueueIsZero) {
  const QueueSnapshot empty(Tensor(Shape{0, 2}), {});
  EXPECT_EQ(scl_loss(vec({1, 0}), vec({0.6, 0.8}), empty, 0, 0.07).item(), 0.0);
}

TEST(SclLoss, EqualLogitsGiveLogOfCandidateCount) {
  Rng rng(1);
  for (std::size_t m : {1u, 5u, 30u}) {
    Tensor q(Shape{m, 6}, 0.0);
    std::vector<ClassId> labels(m);
    for (std::size_t k = 0; k < m; ++k) {
      auto r = random_unit(5, rng);
      std::copy(r.begin(), r.end(), q.data() + k * 6 + 1);
      labels[k] = k % 3;
    }
    const QueueSnapshot snap(q, labels);
    const double loss = scl_loss(vec({1, 0, 0, 0, 0, 0}), vec({0, 0, 1, 0, 0, 0}), snap, 0, 0.07).item();
    EXPECT_NEAR(loss, std::log(static_cast<double>(m + 1)), 1e-12);
  }
}

TEST(SclLoss, MatchesLiteralEnumeration) {
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    const Config c = random_config(rng);
    const double got = scl_loss(vec(c.anchor), vec(c.zplus), c.snap, c.label, 0.07).item();
    EXPECT_NEAR(got, literal_loss(c, 0.07, false, 0.0), 1e-10);
  }
}

TEST(DsclLoss, MatchesLiteralEnumeration) {
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const Config c = random_config(rng);
    const double alpha = rng.uniform();
    const double got = dscl_loss(vec(c.anchor), vec(c.zplus), c.snap, c.label, 0.07, alpha).item();
    EXPECT_NEAR(got, literal_loss(c, 0.07, true, alpha), 1e-10);
  }
}

TEST(DsclLoss, ReducesToSclWhenAlphaIsOneOverPositivesPlusOne) {
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const Config c = random_config(rng);
    const double alpha = 1.0 / static_cast<double>(c.snap.count_of(c.label) + 1);
    const double scl = scl_loss(vec(c.anchor), vec(c.zplus), c.snap, c.label, 0.07).item();
    const double dscl = dscl_loss(vec(c.anchor), vec(c.zplus), c.snap, c.label, 0.07, alpha).item();
    EXPECT_LE(std::abs(dscl - scl), 1e-12 * std::max(1.0, std::abs(scl)));
  }
}

TEST(DsclLoss, AlphaOneKeepsOnlyAugmentationPositive) {
  Rng rng(5);
  const Config c = random_config(rng, 40, 8, 2);
  const std::size_t np = c.snap.count_of(c.label);
  const PositiveWeights w = positive_weights(1.0, np);
  if (np > 0) {
    EXPECT_EQ(w.w_plus, static_cast<double>(np + 1));
    EXPECT_EQ(w.w_queue, 0.0);
  }
  EXPECT_NEAR(dscl_loss(vec(c.anchor), vec(c.zplus), c.snap, c.label, 0.07, 1.0).item(), literal_loss(c, 0.07, true, 1.0),
              1e-10);
}

TEST(DsclLoss, EmptyPositiveSetFallsBackToInstanceTerm) {
  const QueueSnapshot snap(Tensor(Shape{2, 2}, {0, 1, -1, 0}), {1, 2});
  const double loss = dscl_loss(vec({1, 0}), vec({0.6, 0.8}), snap, 0, 0.5, 0.1).item();
  const auto p = conditional_prob(std::vector<double>{1, 0}, std::vector<double>{0.6, 0.8}, snap, 0.5);
  EXPECT_NEAR(loss, -std::log(p[0]), 1e-14);
}

TEST(PositiveWeights, IdentityHoldsExactlyInRationalArithmetic) {
  for (long long num = 0; num <= 20; ++num)
    for (std::size_t np = 1; np <= 300; ++np) {
      const Rational alpha(num, 20);
      const auto w = positive_weights_as<Rational>(alpha, np);
      EXPECT_TRUE(w.w_plus + Rational(static_cast<long long>(np)) * w.w_queue == Rational(static_cast<long long>(np + 1)));
    }
}

TEST(PositiveWeights, IdentityHoldsInDoublesToRounding) {
  for (double alpha : {0.0, 0.05, 0.1, 0.3, 0.5, 1.0})
    for (std::size_t np = 1; np <= 1000; ++np) {
      const PositiveWeights w = positive_weights(alpha, np);
      const double n1 = static_cast<double>(np + 1);
      EXPECT_NEAR(w.w_plus + static_cast<double>(np) * w.w_queue, n1, 4 * n1 * std::numeric_limits<double>::epsilon());
    }
  EXPECT_THROW(positive_weights(1.5, 3), ConfigError);
}

TEST(SclGradient, AutodiffMatchesAnalyticForm) {
  Rng rng(6);
  for (int i = 0; i < 200; ++i) {
    const Config c = random_config(rng);
    Var a = vec(c.anchor, true);
    scl_loss(a, vec(c.zplus), c.snap, c.label, 0.07).backward();
    const auto g = scl_anchor_gradient_analytic(c.anchor, c.zplus, c.snap, c.label, 0.07);
    for (std::size_t j = 0; j < g.size(); ++j)
      EXPECT_LE(std::abs(a.grad()[j] - g[j]) / std::max(1.0, std::abs(g[j])), 1e-9);
  }
}

TEST(SclGradient, VanishesAtUniformPositiveOptimum) {
  // Queue of positives only, all at the same similarity as z+: p = 1/(|P|+1) everywhere.
  Tensor q(Shape{3, 3}, {0.6, 0.8, 0, 0.6, 0, 0.8, 0.6, -0.8, 0});
  const QueueSnapshot snap(q, {2, 2, 2});
  const std::vector<double> anchor{1, 0, 0}, zplus{0.6, 0, -0.8};
  for (double g : scl_anchor_gradient_analytic(anchor, zplus, snap, 2, 0.07)) EXPECT_NEAR(g, 0.0, 1e-14);
}

TEST(SclGradient, EmptyQueueGradientIsZero) {
  const QueueSnapshot empty(Tensor(Shape{0, 2}), {});
  for (double g : scl_anchor_gradient_analytic(std::vector<double>{1, 0}, std::vector<double>{0, 1}, empty, 0, 0.07))
    EXPECT_EQ(g, 0.0);
}

TEST(DsclStationarity, PositiveTermsVanishAtAlpha) {
  // No negatives; set s+ - s_t = tau log(alpha |P| / (1 - alpha)) so p+ = alpha, p_t = (1-alpha)/|P|.
  const double tau = 0.07;
  for (double alpha : {0.1, 0.3})
    for (std::size_t np : {1u, 4u, 16u}) {
      const std::size_t d = np + 2;
      const double st = 0.5;
      const double sp = st + tau * std::log(alpha * np / (1 - alpha));
      std::vector<double> anchor(d, 0.0), zplus(d, 0.0);
      anchor[0] = 1;
      zplus[0] = sp;
      zplus[1] = std::sqrt(1 - sp * sp);
      Tensor q(Shape{np, d}, 0.0);
      for (std::size_t t = 0; t < np; ++t) {
        q.at(t, 0) = st;
        q.at(t, t + 2) = std::sqrt(1 - st * st);
      }
      const QueueSnapshot snap(q, std::vector<ClassId>(np, 0));
      const auto p = conditional_prob(anchor, zplus, snap, tau);
      EXPECT_NEAR(p[0], alpha, 1e-12);
      std::vector<double> target(np + 1);
      fill_targets(target, snap.labels(), 0, ContrastiveMode::dscl, alpha);
      for (std::size_t m = 0; m <= np; ++m) EXPECT_NEAR(p[m] - target[m], 0.0, 1e-12);
      Var a = vec(anchor, true);
      dscl_loss(a, vec(zplus), snap, 0, tau, alpha).backward();
      for (double g : a.grad().values()) EXPECT_NEAR(g, 0.0, 1e-10);
    }
}

TEST(GradientRatio, SclTracksInverseOfPositiveCount) {
  Rng rng(7);
  double sum = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t d = 32, m = 200;
    Tensor q(Shape{m, d});
    std::vector<ClassId> labels(m, 1);
    for (std::size_t k = 0; k < m; ++k) {
      const auto r = random_unit(d, rng);
      std::copy(r.begin(), r.end(), q.data() + k * d);
    }
    for (std::size_t k = 0; k < 10; ++k) labels[rng.index(m)] = 0;
    while (std::count(labels.begin(), labels.end(), 0u) < 10) labels[rng.index(m)] = 0;
    const QueueSnapshot snap(q, labels);
    sum += positive_gradient_ratio(random_unit(d, rng), random_unit(d, rng), snap, 0, 0.07, ContrastiveMode::scl, 0.0);
  }
  EXPECT_NEAR(sum / 100, 0.1, 0.2 * 0.1);
}

TEST(GradientRatio, DsclIsFlatAtAlphaOverOneMinusAlpha) {
  Rng rng(8);
  for (std::size_t np : {1u, 5u, 25u}) {
    double sum = 0.0;
    for (int i = 0; i < 100; ++i) {
      const std::size_t d = 32, m = 200;
      Tensor q(Shape{m, d});
      std::vector<ClassId> labels(m, 1);
      for (std::size_t k = 0; k < m; ++k) {
        const auto r = random_unit(d, rng);
        std::copy(r.begin(), r.end(), q.data() + k * d);
      }
      for (std::size_t k = 0; k < np; ++k) labels[k] = 0;
      const QueueSnapshot snap(q, labels);
      sum += positive_gradient_ratio(random_unit(d, rng), random_unit(d, rng), snap, 0, 0.07, ContrastiveMode::dscl, 0.1);
    }
    EXPECT_NEAR(sum / 100, 0.1 / 0.9, 0.2 * 0.1 / 0.9) << "|P| = " << np;
  }
}

TEST(GradientRatio, DsclWithReducingAlphaMatchesScl) {
  Rng rng(9);
  for (int i = 0; i < 20; ++i) {
    Config c = random_config(rng, 64, 16, 2);
    const std::size_t np = c.snap.count_of(c.label);
    if (np == 0) {
      EXPECT_THROW(positive_gradient_ratio(c.anchor, c.zplus, c.snap, c.label, 0.07, ContrastiveMode::scl, 0.0),
                   DegenerateInputError);
      continue;
    }
    const double scl = positive_gradient_ratio(c.anchor, c.zplus, c.snap, c.label, 0.07, ContrastiveMode::scl, 0.0);
    const double dscl =
        positive_gradient_ratio(c.anchor, c.zplus, c.snap, c.label, 0.07, ContrastiveMode::dscl, 1.0 / (np + 1.0));
    EXPECT_NEAR(dscl, scl, 1e-12 * std::max(1.0, scl));
  }
}

TEST(PbsdTarget, OrthogonalQueryGivesUniformTarget) {
  const QueueSnapshot snap(Tensor(Shape{2, 3}, {0, 1, 0, 0, 0, 1}), {0, 1});
  for (double v : pbsd_target_distribution(std::vector<double>{1, 0, 0}, std::vector<double>{0, -1, 0}, snap, 0.07))
    EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(PbsdTarget, ConcentratesOnMatchingEntryAsTemperatureDrops) {
  Rng rng(10);
  const Config c = random_config(rng, 30, 8, 3);
  ASSERT_GT(c.snap.size(), 3u);
  const auto row = c.snap.row(2);
  const std::vector<double> query(row.begin(), row.end());
  const auto warm = pbsd_target_distribution(query, c.zplus, c.snap, 0.07);
  const auto cold = pbsd_target_distribution(query, c.zplus, c.snap, 0.01);
  EXPECT_EQ(std::max_element(warm.begin(), warm.end()) - warm.begin(), 3);
  EXPECT_EQ(std::max_element(cold.begin(), cold.end()) - cold.begin(), 3);
  EXPECT_GT(cold[3], warm[3]);
  EXPECT_GT(cold[3], 0.99);
}

TEST(PbsdLoss, EqualDistributionsGiveTargetEntropy) {
  Rng rng(11);
  const Config c = random_config(rng, 20, 6, 2);
  const auto target = pbsd_target_distribution(c.anchor, c.zplus, c.snap, 0.07);
  double entropy = 0.0;
  for (double p : target) entropy -= p * std::log(p);
  EXPECT_NEAR(pbsd_loss(vec(c.anchor), vec(c.anchor), vec(c.zplus), c.snap, 0.07).item(), entropy, 1e-12);
  // Any other prediction costs more.
  EXPECT_GT(pbsd_loss(vec(c.zplus), vec(c.anchor), vec(c.zplus), c.snap, 0.07).item(), entropy);
}

TEST(PbsdLoss, OneHotTargetAndPredictionGiveZero) {
  const Tensor target(Shape{1, 2}, {1.0, 0.0});
  EXPECT_EQ(soft_cross_entropy(Var::constant(Tensor(Shape{1, 2}, {0.0, -1000.0})), target, 1.0).item(), 0.0);
}

TEST(PbsdLoss, MatchesLiteralDoubleSum) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const Config base = random_config(rng, 32, 8, 3);
    const std::size_t d = base.anchor.size(), L = 1 + rng.index(5);
    Tensor s(Shape{L, d}), c(Shape{L, d});
    for (std::size_t j = 0; j < L; ++j) {
      auto a = random_unit(d, rng), b = random_unit(d, rng);
      std::copy(a.begin(), a.end(), s.data() + j * d);
      std::copy(b.begin(), b.end(), c.data() + j * d);
    }
    const Tensor zp = repeat_rows(Tensor(Shape{1, d}, base.zplus), L);
    const double got = pbsd_loss(Var::constant(s), Var::constant(c), Var::constant(zp), base.snap, 0.07).item();
    long double want = 0;
    for (std::size_t j = 0; j < L; ++j) {
      std::vector<std::span<const double>> cands{base.zplus};
      for (std::size_t k = 0; k < base.snap.size(); ++k) cands.push_back(base.snap.row(k));
      long double zc = 0, zs = 0;
      for (auto z : cands) {
        zc += std::exp(static_cast<long double>(dotv(z, c.row(j))) / 0.07);
        zs += std::exp(static_cast<long double>(dotv(z, s.row(j))) / 0.07);
      }
      for (auto z : cands) {
        const long double pc = std::exp(static_cast<long double>(dotv(z, c.row(j))) / 0.07) / zc;
        const long double ps = std::exp(static_cast<long double>(dotv(z, s.row(j))) / 0.07) / zs;
        want -= pc * std::log(ps);
      }
    }
    EXPECT_NEAR(got, static_cast<double>(want / L), 1e-10);
  }
}

TEST(PbsdLoss, TargetBranchReceivesNoGradient) {
  Rng rng(13);
  const Config base = random_config(rng, 16, 6, 2);
  const std::size_t d = base.anchor.size();
  Var c_raw = Var::parameter(Tensor(Shape{2, d}, 0.3));
  Var s_raw = Var::parameter(Tensor(Shape{2, d}, 0.0));
  for (double& v : c_raw.value_mut().values()) v = rng.normal();
  for (double& v : s_raw.value_mut().values()) v = rng.normal();
  const Tensor zp = repeat_rows(Tensor(Shape{1, d}, base.zplus), 2);
  pbsd_loss(l2_normalize(s_raw), l2_normalize(c_raw), Var::constant(zp), base.snap, 0.07).backward();
  EXPECT_FALSE(c_raw.has_grad());
  ASSERT_TRUE(s_raw.has_grad());
  EXPECT_GT(l2_norm(s_raw.grad().values()), 0.0);
}

TEST(Losses, InvariantUnderQueuePermutation) {
  Rng rng(14);
  for (int i = 0; i < 20; ++i) {
    const Config c = random_config(rng, 30, 8, 3);
    const std::size_t m = c.snap.size(), d = c.anchor.size();
    std::vector<std::size_t> perm(m);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    Tensor q(Shape{m, d});
    std::vector<ClassId> labels(m);
    for (std::size_t k = 0; k < m; ++k) {
      std::copy_n(c.snap.row(perm[k]).data(), d, q.data() + k * d);
      labels[k] = c.snap.labels()[perm[k]];
    }
    const QueueSnapshot shuffled(q, labels);
    EXPECT_NEAR(dscl_loss(vec(c.anchor), vec(c.zplus), c.snap, c.label, 0.07, 0.1).item(),
                dscl_loss(vec(c.anchor), vec(c.zplus), shuffled, c.label, 0.07, 0.1).item(), 1e-12);
    EXPECT_NEAR(pbsd_loss(vec(c.anchor), vec(c.zplus), vec(c.zplus), c.snap, 0.07).item(),
                pbsd_loss(vec(c.anchor), vec(c.zplus), vec(c.zplus), shuffled, 0.07).item(), 1e-12);
  }
}

TEST(MulticropLoss, NoCropsEqualsDscl) {
  Rng rng(15);
  const Config c = random_config(rng, 20, 6, 2);
  const std::vector<ClassId> labels{c.label};
  const double mc = multicrop_loss(vec(c.anchor), Var(), vec(c.zplus), c.snap, labels, 0, 0.07, 0.1).item();
  EXPECT_EQ(mc, dscl_loss(vec(c.anchor), vec(c.zplus), c.snap, c.label, 0.07, 0.1).item());
}

TEST(MulticropLoss, EachCropAddsItsOwnLiteralTerm) {
  Rng rng(16);
  for (int trial = 0; trial < 20; ++trial) {
    const Config c = random_config(rng, 30, 8, 3);
    const std::size_t d = c.anchor.size(), L = 1 + rng.index(4);
    Tensor s(Shape{L, d});
    double crop_sum = 0.0;
    for (std::size_t j = 0; j < L; ++j) {
      Config cj = c;
      cj.anchor = random_unit(d, rng);
      std::copy(cj.anchor.begin(), cj.anchor.end(), s.data() + j * d);
      crop_sum += literal_loss(cj, 0.07, true, 0.1);
    }
    const std::vector<ClassId> labels{c.label};
    const double got = multicrop_loss(vec(c.anchor), Var::constant(s), vec(c.zplus), c.snap, labels, L, 0.07, 0.1, 0.7).item();
    EXPECT_NEAR(got, literal_loss(c, 0.07, true, 0.1) + 0.7 * crop_sum / L, 1e-10);
  }
}

TEST(ContrastiveLoss, FreeEmbeddingMicroBatchPassesFiniteDifferences) {
  Rng rng(17);
  const std::size_t B = 5, d = 6, M = 12;
  Var raw_a = Var::parameter(Tensor(Shape{B, d})), raw_p = Var::parameter(Tensor(Shape{B, d}));
  Var raw_q = Var::parameter(Tensor(Shape{M, d}));
  for (Var* v : {&raw_a, &raw_p, &raw_q})
    for (double& x : v->value_mut().values()) x = rng.normal();
  std::vector<ClassId> ql(M), al(B);
  for (auto& y : ql) y = rng.index(3);
  for (auto& y : al) y = rng.index(3);
  const auto r = finite_difference_check(
      [&] {
        return contrastive_loss(l2_normalize(raw_a), l2_normalize(raw_p), l2_normalize(raw_q), ql, al,
                                ContrastiveMode::dscl, 0.1, 0.2);
      },
      {raw_a, raw_p, raw_q});
  EXPECT_LT(r.max_relative_error, 1e-4);
}

namespace {

struct MicroBatch {
  EncoderParams online;
  std::vector<Tensor> images;
  BatchInputs batch;
  QueueSnapshot snap;
};

MicroBatch micro_batch(std::uint64_t seed, std::size_t L) {
  EncoderConfig cfg;
  cfg.input_size = 8;
  cfg.patch_size = 8;
  cfg.conv_channels = {2, 3, 4};
  cfg.head_hidden = 5;
  cfg.d_proj = 4;
  MicroBatch mb{init_encoder(cfg, seed), {}, {}, {}};
  Rng rng(seed);
  for (auto v : mb.online.conv_b)
    for (double& x : v.value_mut().values()) x = rng.uniform(0.05, 0.2);
  for (int i = 0; i < 4; ++i) {
    Tensor img(Shape{8, 8, 3});
    for (double& x : img.values()) x = rng.uniform();
    mb.images.push_back(img);
  }
  for (const auto& im : mb.images) mb.batch.view_a.push_back(&im);
  mb.batch.labels = {0, 1, 0, 2};
  mb.batch.zplus = Tensor(Shape{4, 4});
  for (std::size_t r = 0; r < 4; ++r) {
    const auto u = random_unit(4, rng);
    std::copy(u.begin(), u.end(), mb.batch.zplus.data() + r * 4);
  }
  for (std::size_t i = 0; i < 4; ++i) mb.batch.boxes.push_back(sample_patch_boxes(L, {0.3, 0.6}, {0.75, 4.0 / 3.0}, rng));
  Tensor q(Shape{10, 4});
  std::vector<ClassId> ql(10);
  for (std::size_t k = 0; k < 10; ++k) {
    const auto u = random_unit(4, rng);
    std::copy(u.begin(), u.end(), q.data() + k * 4);
    ql[k] = k % 3;
  }
  mb.snap = QueueSnapshot(q, ql);
  return mb;
}

}  // namespace

TEST(OverallObjective, ZeroLambdaEqualsBatchMeanDscl) {
  const MicroBatch mb = micro_batch(1, 2);
  LossConfig cfg;
  cfg.lambda = 0.0;
  cfg.patches = 2;
  const ObjectiveTerms t = overall_objective(mb.online, nullptr, mb.batch, mb.snap, cfg);
  double mean = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const Var z = embed_patch(mb.online, mb.images[i], PatchBox::full(), 8);
    mean += dscl_loss(z, Var::constant(Tensor(Shape{4}, std::vector<double>(mb.batch.zplus.row(i).begin(),
                                                                             mb.batch.zplus.row(i).end()))),
                      mb.snap, mb.batch.labels[i], cfg.tau, cfg.alpha)
                .item();
  }
  EXPECT_NEAR(t.total.item(), mean / 4, 1e-12);
}

TEST(OverallObjective, WeightedSumOfTerms) {
  const MicroBatch mb = micro_batch(2, 3);
  LossConfig cfg;
  cfg.patches = 3;
  cfg.lambda = 1.5;
  const ObjectiveTerms t = overall_objective(mb.online, nullptr, mb.batch, mb.snap, cfg);
  EXPECT_EQ(t.total.item(), t.contrastive + 1.5 * t.patch);
  EXPECT_GT(t.patch, 0.0);
}

TEST(OverallObjective, FullGradientPassesFiniteDifferences) {
  for (PatchMode mode : {PatchMode::pbsd, PatchMode::multicrop}) {
    MicroBatch mb = micro_batch(3, 2);
    LossConfig cfg;
    cfg.patches = 2;
    cfg.tau = 0.2;
    cfg.patch_mode = mode;
    // The distillation target is a constant to the gradient; hold it fixed for the probe too.
    if (mode == PatchMode::pbsd) mb.batch.fixed_targets = overall_objective(mb.online, nullptr, mb.batch, mb.snap, cfg).c;
    const auto r = finite_difference_check(
        [&] { return overall_objective(mb.online, nullptr, mb.batch, mb.snap, cfg).total; }, mb.online.all());
    EXPECT_LT(r.max_relative_error, 1e-4) << to_string(mode);
  }
}

TEST(LossConfig, JsonRoundTripAndValidation) {
  LossConfig c;
  c.alpha = 0.3;
  c.patch_mode = PatchMode::multicrop;
  const LossConfig back = loss_config_from_json(loss_config_to_json(c));
  EXPECT_EQ(back.alpha, 0.3);
  EXPECT_EQ(back.patch_mode, PatchMode::multicrop);
  EXPECT_THROW(loss_config_from_json(Json{{"tau", 0.0}}), ConfigError);
  EXPECT_THROW(loss_config_from_json(Json{{"alpha", 1.2}}), ConfigError);
  EXPECT_THROW(loss_config_from_json(Json{{"temperature", 0.1}}), ConfigError);
}
