#include <doctest.h>

#include "pes/error.hpp"
#include "pes/losses.hpp"

#include <cmath>

using namespace pes;
using doctest::Approx;

namespace {

const double kLn2 = std::log(2.0);

IndexVector labels(std::initializer_list<int> xs) {
  IndexVector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (int x : xs) v[i++] = x;
  return v;
}

Matrix saturated(const IndexVector& y) {
  Matrix z(y.size(), 2);
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    z(i, y[i]) = 20.0;
    z(i, 1 - y[i]) = -20.0;
  }
  return z;
}

template <typename F>
Matrix numeric_grad(F f, Matrix x, double eps = 1e-6) {
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + eps;
    const double up = f(x);
    x.data()[i] = keep - eps;
    const double down = f(x);
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2 * eps);
  }
  return g;
}

}  // namespace

TEST_CASE("coarse loss values") {
  const IndexVector y = labels({0, 1, 1, 0, 0});
  CHECK(coarse_loss<double>(saturated(y), y).value < 1e-8);
  CHECK(coarse_loss<double>(Matrix::Zero(5, 2), y, 1.0).value == Approx(kLn2).epsilon(1e-12));
  CHECK(coarse_loss<double>(Matrix::Zero(1, 2), labels({1}), 5.0).value == Approx(kLn2).epsilon(1e-12));
  CHECK(coarse_loss<double>(Matrix::Zero(2, 2), labels({0, 1}), 5.0).value == Approx(kLn2).epsilon(1e-12));

  // Hand evaluation: frame 0 label 0 with p0 = 0.8, frame 1 label 1 with p1 = 0.6, fg weight 5.
  Matrix z(2, 2);
  z << std::log(0.8), std::log(0.2), std::log(0.4), std::log(0.6);
  const double expect = (-std::log(0.8) + 5 * -std::log(0.6)) / 6.0;
  CHECK(coarse_loss<double>(z, labels({0, 1}), 5.0).value == Approx(expect).epsilon(1e-12));
}

TEST_CASE("coarse loss errors") {
  CHECK_THROWS_AS(coarse_loss<double>(Matrix::Zero(3, 3), labels({0, 1, 0})), Error);
  CHECK_THROWS_AS(coarse_loss<double>(Matrix::Zero(3, 2), labels({0, 1})), Error);
  CHECK_THROWS_AS(coarse_loss<double>(Matrix::Zero(2, 2), labels({0, 2})), Error);
}

TEST_CASE("fine loss values") {
  CHECK(fine_loss<double>(Matrix::Zero(3, 14), Matrix::Ones(3, 14)).value == Approx(kLn2).epsilon(1e-12));
  CHECK(fine_loss<double>(Matrix::Zero(3, 14), Matrix::Zero(3, 14)).value == Approx(kLn2).epsilon(1e-12));
  const double l = fine_loss<double>(Matrix::Constant(2, 3, std::log(9.0)), Matrix::Ones(2, 3)).value;
  CHECK(l == Approx(-std::log(0.9)).epsilon(1e-12));
  CHECK(l == Approx(0.10536).epsilon(1e-4));

  Matrix y = Matrix::Zero(4, 5);
  y(1, 2) = y(3, 0) = 1;
  const Matrix z = 40.0 * y - Matrix::Constant(4, 5, 20.0);
  CHECK(fine_loss<double>(z, y).value < 1e-8);
  // Large magnitudes stay finite.
  CHECK(std::isfinite(fine_loss<double>(Matrix::Constant(1, 1, -800.0), Matrix::Ones(1, 1)).value));
}

TEST_CASE("unlabeled loss") {
  const auto& s = LabelSchema::tennis();
  const int t = 5;
  Matrix coarse = Matrix::Random(t, 2), fine = Matrix::Random(t, 14);

  SUBCASE("pseudo-labels equal to ground truth give the labeled loss") {
    PseudoLabels p;
    p.coarse = labels({0, 1, 0, 0, 1});
    p.fine = Matrix::Zero(t, 14);
    for (int i : {0, 2, 13}) p.fine(1, i) = 1;
    for (int i : {1, 4, 5, 9}) p.fine(4, i) = 1;
    const double a = unlabeled_loss<double>(coarse, fine, p).value;
    const double b = detector_loss<double>(coarse, fine, p.coarse, p.fine).value;
    CHECK(a == b);
  }
  SUBCASE("saturated self-predictions") {
    Matrix c2 = Matrix::Constant(t, 2, -20.0);
    c2.col(0).setConstant(20.0);
    c2(2, 0) = -20.0;
    c2(2, 1) = 20.0;
    Matrix f2 = Matrix::Constant(t, 14, -20.0);
    for (int i : {1, 3, 6, 8}) f2(2, i) = 20.0;
    const PseudoLabels p = make_pseudo_labels(c2, f2, s);
    // The background rows carry fine targets 0 and their logits are -20 too.
    CHECK(unlabeled_loss<double>(c2, f2, p).value < 1e-8);
  }
  SUBCASE("all-background pseudo-labels with uniform predictions") {
    PseudoLabels p;
    p.coarse = IndexVector::Zero(t);
    p.fine = Matrix::Zero(t, 14);
    CHECK(unlabeled_loss<double>(Matrix::Zero(t, 2), Matrix::Zero(t, 14), p).value ==
          Approx(2 * kLn2).epsilon(1e-12));
  }
  SUBCASE("stale pseudo-labels") {
    PseudoLabels p;
    p.coarse = IndexVector::Zero(t - 1);
    p.fine = Matrix::Zero(t - 1, 14);
    CHECK_THROWS_AS(unlabeled_loss<double>(coarse, fine, p), Error);
  }
}

TEST_CASE("anneal schedule") {
  const AnnealSchedule s;
  CHECK(lambda_at(10, s) == 0.0);
  CHECK(lambda_at(29, s) == 0.0);
  CHECK(lambda_at(30, s) == 0.0);
  CHECK(lambda_at(60, s) == 0.2);
  CHECK(lambda_at(95, s) == 0.4);
  CHECK(lambda_at(90, s) == 0.4);
  double prev = 0.0;
  for (int e = 0; e < 300; ++e) {
    const double l = lambda_at(e, s);
    CHECK(l >= prev);
    CHECK(l - prev <= s.target / (s.end - s.start) + 1e-15);
    prev = l;
  }
  CHECK_THROWS_AS(lambda_at(-1, s), Error);
  CHECK_THROWS_AS((AnnealSchedule{50, 50, 0.4}.validate()), Error);
  CHECK_THROWS_AS((AnnealSchedule{10, 50, -0.1}.validate()), Error);
}

TEST_CASE("stage I total loss") {
  const AnnealSchedule s;
  CHECK(total_stage1_loss(0.7, 123.0, 10, s) == 0.7);
  AnnealSchedule flat{0, 1, 0.4};
  CHECK(total_stage1_loss(1.0, 0.5, 5, flat) == Approx(1.2).epsilon(1e-12));
  CHECK(total_stage1_loss(0.0, 1.0, 60, s) == Approx(0.2).epsilon(1e-12));
}

TEST_CASE("distill loss") {
  const Matrix a = Matrix::Random(6, 4);
  CHECK(distill_loss<double>(a, a).value == 0.0);
  CHECK(distill_loss<double>(Matrix::Constant(3, 5, 2.0), Matrix::Zero(3, 5)).value == 4.0);
  const Matrix t = Matrix::Random(4, 3), st = Matrix::Random(4, 3);
  const auto r = distill_loss<double>(t, st);
  CHECK(r.grad.isApprox(2.0 * (st - t) / 12.0, 1e-14));
  const Matrix num = numeric_grad([&](const Matrix& x) { return distill_loss<double>(t, x).value; }, st);
  CHECK((num - r.grad).norm() / r.grad.norm() < 1e-7);
  CHECK_THROWS_AS(distill_loss<double>(Matrix::Zero(2, 2), Matrix::Zero(2, 3)), Error);
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const int t = 3 + static_cast<int>(rng.below(5));
    Matrix z(t, 2), f(t, 4), y = Matrix::Zero(t, 4);
    IndexVector lab(t);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = 2 * rng.normal();
    for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = 2 * rng.normal();
    for (int i = 0; i < t; ++i) lab[i] = static_cast<int>(rng.below(2));
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = static_cast<double>(rng.below(2));

    const auto c = coarse_loss<double>(z, lab, 5.0);
    const Matrix cn = numeric_grad([&](const Matrix& x) { return coarse_loss<double>(x, lab, 5.0).value; }, z);
    CHECK((cn - c.grad).norm() / c.grad.norm() < 1e-7);

    const auto fl = fine_loss<double>(f, y);
    const Matrix fn = numeric_grad([&](const Matrix& x) { return fine_loss<double>(x, y).value; }, f);
    CHECK((fn - fl.grad).norm() / fl.grad.norm() < 1e-7);
  }
}

TEST_CASE("losses are non-negative") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    Matrix z(4, 2), f(4, 3), y(4, 3);
    IndexVector lab(4);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = 10 * rng.normal();
    for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = 10 * rng.normal();
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = static_cast<double>(rng.below(2));
    for (int i = 0; i < 4; ++i) lab[i] = static_cast<int>(rng.below(2));
    CHECK(coarse_loss<double>(z, lab).value >= 0.0);
    CHECK(fine_loss<double>(f, y).value >= 0.0);
  }
}

TEST_CASE("single precision instantiation") {
  const MatrixX<float> z = MatrixX<float>::Zero(2, 2);
  IndexVector y(2);
  y << 0, 1;
  CHECK(coarse_loss<float>(z, y).value == Approx(kLn2).epsilon(1e-6));
}
