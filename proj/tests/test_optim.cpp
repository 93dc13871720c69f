#include "support.hpp"

#include "fils/checkpoint.hpp"
#include "fils/ema.hpp"
#include "fils/optim.hpp"

#include <fstream>

using namespace fils;

TEST_SUITE("ema") {

TEST_CASE("constant student: closed-form geometric mix") {
  std::vector<double> teacher{1.5, -2.0, 0.25};
  const std::vector<double> student{-0.5, 4.0, 0.25};
  const std::vector<double> start = teacher;
  const double tau = 0.996;
  for (int k = 0; k < 100; ++k) ema_update<double>(teacher, student, tau);
  const double tk = std::pow(tau, 100);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(teacher[i] - (tk * start[i] + (1.0 - tk) * student[i])) <= 1e-10);
}

TEST_CASE("tau = 1 freezes the teacher, tau = 0 copies the student") {
  std::vector<float> t{1.0f, 2.0f};
  const std::vector<float> s{5.0f, 6.0f};
  ema_update<float>(t, s, 1.0);
  CHECK(t == std::vector<float>{1.0f, 2.0f});
  ema_update<float>(t, s, 0.0);
  CHECK(t == s);
  std::vector<float> short_t{1.0f};
  CHECK_THROWS_AS(ema_update<float>(short_t, s, 0.5), std::invalid_argument);
}

TEST_CASE("momentum schedule endpoints and midpoint") {
  const EmaSchedule s{0.5, 1.0, 4};
  CHECK(tau_at(0, s) == 0.5);
  CHECK(tau_at(2, s) == 0.75);
  CHECK(tau_at(4, s) == 1.0);
  CHECK(tau_at(1000, s) == 1.0);
  const EmaSchedule d{0.996, 0.999, 100};
  CHECK(tau_at(0, d) == 0.996);
  CHECK(tau_at(100, d) == 0.999);
  CHECK(tau_at(50, d) == doctest::Approx(0.9975).epsilon(1e-15));
  for (std::int64_t k = 1; k <= 100; ++k) CHECK(tau_at(k, d) >= tau_at(k - 1, d));
  CHECK_THROWS_AS((EmaSchedule{0.9, 0.8, 1}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((EmaSchedule{0.9, 1.0, 0}.validate()), std::invalid_argument);
}

}  // TEST_SUITE

TEST_SUITE("optim") {

TEST_CASE("learning-rate schedule") {
  const LrSchedule s{1e-6, 1.5e-4, 1e-5, 93, 2790};
  CHECK(lr_at(0, s) == 1e-6);
  CHECK(std::abs(lr_at(93, s) - 1.5e-4) <= 1e-12);
  CHECK(std::abs(lr_at(2789, s) - 1e-5) <= 1e-9);
  CHECK(lr_at(5000, s) == 1e-5);
  const double mid = lr_at(93 + (2789 - 93) / 2, s);
  CHECK(mid == doctest::Approx(0.5 * (1.5e-4 + 1e-5)).epsilon(1e-3));
  for (std::int64_t k = 1; k <= 93; ++k) CHECK(lr_at(k, s) > lr_at(k - 1, s));
  for (std::int64_t k = 94; k < 2790; ++k) CHECK(lr_at(k, s) <= lr_at(k - 1, s));
}

TEST_CASE("AdamW matches a hand-rolled update, with decay and frozen slots") {
  nn::ParamLayout layout;
  layout.add("w", 1, 2, nn::Init::zeros, 0.0, true);
  layout.add("b", 1, 1, nn::Init::zeros, 0.0, false);
  layout.add("frozen", 1, 1, nn::Init::zeros, 0.0, true);
  const AdamWConfig cfg{0.9, 0.95, 1e-8, 0.05};
  AdamW opt(layout, {false, false, true}, cfg);
  std::vector<float> p{1.0f, -2.0f, 0.5f, 3.0f};
  std::vector<double> ref(p.begin(), p.end()), m(4, 0.0), v(4, 0.0);
  const std::vector<std::vector<float>> grads{{0.1f, -0.3f, 0.2f, 9.0f}, {-0.2f, 0.1f, 0.05f, 9.0f},
                                              {0.3f, 0.3f, -0.1f, 9.0f}};
  const double lr = 1e-2;
  for (std::size_t k = 0; k < grads.size(); ++k) {
    opt.step(p, grads[k], lr);
    const double t = static_cast<double>(k + 1);
    for (std::size_t i = 0; i < 3; ++i) {
      const double g = grads[k][i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.95 * v[i] + 0.05 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, t));
      const double vh = v[i] / (1 - std::pow(0.95, t));
      if (i < 2) ref[i] -= lr * 0.05 * ref[i];
      ref[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (std::size_t i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(ref[i]).epsilon(1e-5));
  CHECK(p[3] == 3.0f);
  CHECK(opt.steps() == 3);
}

TEST_CASE("lr = 0 leaves parameters unchanged") {
  nn::ParamLayout layout;
  layout.add("w", 2, 2, nn::Init::zeros, 0.0, true);
  AdamW opt(layout, {false}, {});
  std::vector<float> p{1, 2, 3, 4};
  const std::vector<float> keep = p;
  opt.step(p, std::vector<float>{1, -1, 1, -1}, 0.0);
  CHECK(p == keep);
}

TEST_CASE("global-norm clipping") {
  std::vector<float> g{3.0f, 4.0f};
  CHECK(clip_grad_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g[0] == doctest::Approx(0.6));
  CHECK(g[1] == doctest::Approx(0.8));
  std::vector<float> small{0.3f, 0.4f};
  CHECK(clip_grad_norm(small, 1.0) == doctest::Approx(0.5));
  CHECK(small[0] == 0.3f);
}

}  // TEST_SUITE

TEST_SUITE("checkpoint") {

TEST_CASE("round trip preserves every field bit for bit") {
  test::TempDir dir("ckpt");
  nn::ParamLayout layout;
  layout.add("a", 2, 3, nn::Init::normal, 1.0, true);
  layout.add("b", 1, 4, nn::Init::zeros);
  Checkpoint c;
  c.config = {{"hello", "world"}, {"model", {{"x", 1}}}};
  c.step = 1234;
  c.epoch = 7;
  Rng rng(1);
  for (int i = 0; i < 10; ++i) c.params.push_back(static_cast<float>(normal01(rng)));
  c.teacher.assign(c.params.begin(), c.params.begin() + 6);
  c.adam_m.assign(10, 0.25f);
  c.adam_v.assign(10, 1e-9f);
  c.adam_steps = 1234;
  save_checkpoint(dir.path() / "c.fils", c, layout);
  const Checkpoint r = load_checkpoint(dir.path() / "c.fils");
  CHECK(r.config == c.config);
  CHECK(r.step == 1234);
  CHECK(r.epoch == 7);
  CHECK(r.params == c.params);
  CHECK(r.teacher == c.teacher);
  CHECK(r.adam_m == c.adam_m);
  CHECK(r.adam_v == c.adam_v);
  CHECK(r.adam_steps == 1234);
  const auto header = read_checkpoint_header(dir.path() / "c.fils");
  CHECK(header.at("tensors").size() == 2);
  CHECK(header.at("tensors")[0].at("name") == "a");
  CHECK_FALSE(std::filesystem::exists(dir.path() / "c.fils.tmp"));
}

TEST_CASE("corrupt files are rejected") {
  test::TempDir dir("ckpt-bad");
  std::ofstream(dir.path() / "bad.fils") << "NOTACKPT";
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "bad.fils"), std::runtime_error);
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "missing.fils"), std::runtime_error);

  nn::ParamLayout layout;
  layout.add("a", 1, 4, nn::Init::zeros);
  Checkpoint c;
  c.params.assign(4, 1.0f);
  save_checkpoint(dir.path() / "t.fils", c, layout);
  const auto size = std::filesystem::file_size(dir.path() / "t.fils");
  std::filesystem::resize_file(dir.path() / "t.fils", size - 3);
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "t.fils"), std::runtime_error);
}

}  // TEST_SUITE
