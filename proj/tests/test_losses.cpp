#include "support.hpp"

#include "fils/losses.hpp"

#include <cmath>

using namespace fils;

namespace {

// Direct transcription of the symmetric InfoNCE used as an independent oracle.
double infonce_oracle(const MatD& v, const MatD& t, double sigma) {
  const Index b = v.rows();
  double v2t = 0.0, t2v = 0.0;
  for (Index i = 0; i < b; ++i) {
    double zr = 0.0, zc = 0.0;
    for (Index j = 0; j < b; ++j) {
      zr += std::exp(v.row(i).dot(t.row(j)) / sigma);
      zc += std::exp(v.row(j).dot(t.row(i)) / sigma);
    }
    const double pos = v.row(i).dot(t.row(i)) / sigma;
    v2t += -(pos - std::log(zr));
    t2v += -(pos - std::log(zc));
  }
  return 0.5 * (v2t + t2v) / static_cast<double>(b);
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("contrastive loss closed forms") {
  const MatD one = test::unit_rows(1, 8, 1);
  CHECK(actclip_loss(one, test::unit_rows(1, 8, 2), 0.3).loss == 0.0);
  const MatD eye = MatD::Identity(2, 2);
  CHECK(std::abs(actclip_loss(eye, eye, 0.0).loss - std::log(1.0 + std::exp(-1.0))) <= 1e-10);
  MatD same = MatD::Zero(6, 4);
  same.col(2).setOnes();
  CHECK(std::abs(actclip_loss(same, same, std::log(0.07)).loss - std::log(6.0)) <= 1e-10);
}

TEST_CASE("contrastive loss matches the oracle and is non-negative") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const MatD v = test::unit_rows(5, 7, 100 + seed);
    const MatD t = test::unit_rows(5, 7, 200 + seed);
    const double ls = -2.0 + 0.2 * static_cast<double>(seed);
    const ActClipResult r = actclip_loss(v, t, ls);
    CHECK(r.loss == doctest::Approx(infonce_oracle(v, t, std::exp(ls))).epsilon(1e-12));
    CHECK(r.loss >= 0.0);
    CHECK(r.sigma == doctest::Approx(std::exp(ls)));
  }
}

TEST_CASE("contrastive loss decreases with sigma for a dominant diagonal") {
  MatD v = MatD::Identity(4, 4);
  MatD t = v;
  t.row(0) = (v.row(0) * 0.9 + v.row(1) * 0.1).normalized();
  double prev = actclip_loss(v, t, std::log(5.0)).loss;
  for (double sigma : {2.0, 1.0, 0.5, 0.1, 0.02}) {
    const double l = actclip_loss(v, t, std::log(sigma)).loss;
    CHECK(l < prev);
    prev = l;
  }
  CHECK(prev < 1e-6);
}

TEST_CASE("contrastive loss is invariant to a joint batch permutation") {
  const MatD v = test::unit_rows(6, 5, 3);
  const MatD t = test::unit_rows(6, 5, 4);
  const std::vector<Index> perm{3, 0, 5, 1, 4, 2};
  MatD vp(6, 5), tp(6, 5);
  for (Index i = 0; i < 6; ++i) {
    vp.row(i) = v.row(perm[static_cast<std::size_t>(i)]);
    tp.row(i) = t.row(perm[static_cast<std::size_t>(i)]);
  }
  CHECK(actclip_loss(vp, tp, -1.0).loss == doctest::Approx(actclip_loss(v, t, -1.0).loss).epsilon(1e-12));
}

TEST_CASE("contrastive loss gradients") {
  MatD v = test::unit_rows(4, 8, 5);
  MatD t = test::unit_rows(4, 8, 6);
  double ls = std::log(0.4);
  const ActClipResult r = actclip_loss(v, t, ls);
  // Loss as a function of unconstrained inputs; rows stay within the 1e-4
  // unit-norm tolerance for the step sizes used.
  CHECK(test::max_rel_error(v, r.d_video, [&] { return actclip_loss(v, t, ls).loss; }) <= 1e-3);
  CHECK(test::max_rel_error(t, r.d_text, [&] { return actclip_loss(v, t, ls).loss; }) <= 1e-3);
  std::vector<double> s{ls};
  CHECK(test::max_rel_error(s, {r.d_log_sigma}, [&] { return actclip_loss(v, t, s[0]).loss; }) <= 1e-3);
}

TEST_CASE("temperature clamp") {
  CHECK(sigma_of(std::log(1e-6)) == 1e-3);
  CHECK(sigma_of(std::log(50.0)) == 10.0);
  const MatD v = test::unit_rows(3, 4, 7), t = test::unit_rows(3, 4, 8);
  CHECK(actclip_loss(v, t, std::log(1e-6)).d_log_sigma == 0.0);
  CHECK(actclip_loss(v, t, std::log(0.5)).d_log_sigma != 0.0);
}

TEST_CASE("contrastive loss input checks") {
  CHECK_THROWS_AS(actclip_loss(MatD(0, 4), MatD(0, 4), 0.0), std::invalid_argument);
  CHECK_THROWS_AS(actclip_loss(test::unit_rows(2, 4, 1), test::unit_rows(3, 4, 1), 0.0), std::invalid_argument);
  CHECK_THROWS_AS(actclip_loss(2.0 * test::unit_rows(2, 4, 1), test::unit_rows(2, 4, 2), 0.0),
                  std::invalid_argument);
}

TEST_CASE("feature prediction loss: value and gradient") {
  const MatD a = (MatD(2, 2) << 1, 0, 0, 1).finished();
  const MatD b = (MatD(2, 2) << 0, 1, 0, 1).finished();
  const RegressionResult r = fp_loss(a, b);
  CHECK(r.loss == 1.0);  // rows contribute 2 and 0
  CHECK(fp_loss(a, a).loss == 0.0);
  CHECK(fp_loss(a, a).d_pred.isZero());
  MatD p = test::random_mat(4, 8, 9);
  const MatD g = test::random_mat(4, 8, 10);
  const RegressionResult rp = fp_loss(p, g);
  CHECK(test::max_rel_error(p, rp.d_pred, [&] { return fp_loss(p, g).loss; }) <= 1e-3);
  CHECK_THROWS_AS(fp_loss(MatD(2, 3), MatD(3, 3)), std::invalid_argument);
}

TEST_CASE("MSE pixel loss: value and gradient") {
  const MatD a = MatD::Constant(2, 3, 1.0), b = MatD::Zero(2, 3);
  CHECK(mse_pixel_loss(a, b).loss == 1.0);
  MatD p = test::random_mat(4, 8, 11);
  const MatD g = test::random_mat(4, 8, 12);
  const RegressionResult r = mse_pixel_loss(p, g);
  CHECK(test::max_rel_error(p, r.d_pred, [&] { return mse_pixel_loss(p, g).loss; }) <= 1e-3);
}

TEST_CASE("total loss weights and non-finite components") {
  CHECK(total_loss(2.0, 3.0, {1.0, 1.0}) == 5.0);
  CHECK(total_loss(2.0, 3.0, {1.0, 0.0}) == 2.0);
  CHECK(total_loss(2.0, 3.0, {0.0, 1.0}) == 3.0);
  CHECK_THROWS_WITH_AS(total_loss(std::nan(""), 1.0, {}), doctest::Contains("l_act=nan"), std::runtime_error);
  CHECK_THROWS_WITH_AS(total_loss(1.0, INFINITY, {}), doctest::Contains("l_fp=inf"), std::runtime_error);
}

}  // TEST_SUITE
