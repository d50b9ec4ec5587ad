#include "doctest.h"
#include "test_support.hpp"

#include "splatmap/error.hpp"
#include "splatmap/gauss_init.hpp"

#include <cmath>
#include <filesystem>
#include <numbers>

using namespace splatmap;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

Image textured(int w, int h, std::uint64_t seed, double flat_fraction = 0.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image im(w, h, 3);
  const int flat_cols = static_cast<int>(std::round(flat_fraction * w));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) im.at(x, y, c) = x < flat_cols ? 0.4 : u(rng);
    }
  }
  return im;
}

// A fronto-parallel wall at depth z seen by an identity camera; one point per listed pixel.
Frame wall_frame(const Camera& cam, const Image& rgb, double z, const std::vector<Vec2>& pixels, int index,
                 bool reliable = false) {
  Frame f;
  f.index = index;
  f.rgb = rgb;
  f.depth = Image(cam.width, cam.height, 1, z);
  for (const auto& px : pixels) {
    WorldPoint p;
    p.position = unproject(cam, px, z);
    const int x = static_cast<int>(px.x()), y = static_cast<int>(px.y());
    p.color = Vec3(rgb.at(x, y, 0), rgb.at(x, y, 1), rgb.at(x, y, 2));
    p.covariance = 1e-4 * Mat3::Identity();
    f.points.push_back(p);
    GeomPrior g;
    g.reliable = reliable;
    g.log_scale = Vec3(-2.0, -2.5, -5.0);
    f.priors.push_back(g);
  }
  return f;
}

}  // namespace

TEST_CASE("keyframe and loopframe selection") {
  CHECK(select_keyframe(0, 5));
  CHECK_FALSE(select_keyframe(7, 5));
  for (int i = 0; i < 10; ++i) CHECK(select_keyframe(i, 1));
  CHECK_THROWS_AS(select_keyframe(3, 0), Error);

  const Pose a = Pose::identity();
  CHECK_FALSE(select_loopframe(a, a, 2.0, 15 * kDeg));
  CHECK(select_loopframe(Pose(Quat::Identity(), Vec3(3, 0, 0)), a, 2.0, 15 * kDeg));
  CHECK(select_loopframe(Pose(Quat(Eigen::AngleAxisd(20 * kDeg, Vec3::UnitZ())), Vec3::Zero()), a, 2.0, 15 * kDeg));
  CHECK_FALSE(select_loopframe(Pose(Quat(Eigen::AngleAxisd(10 * kDeg, Vec3::UnitZ())), Vec3(1, 0, 0)), a, 2.0,
                               15 * kDeg));
}

TEST_CASE("stub attribute provider") {
  StubProvider stub;
  SUBCASE("constant images have no valid pixels") {
    const Image flat(16, 16, 3, 0.3);
    const auto maps = stub.predict(flat, flat, 0);
    CHECK(maps.prev.valid_count() == 0);
    CHECK(maps.cur.valid_count() == 0);
  }
  SUBCASE("valid pixels carry unit quaternions and positive shapes") {
    const auto maps = stub.predict(textured(32, 24, 1), textured(32, 24, 2), 0);
    CHECK(maps.cur.valid_count() > 0);
    for (const auto* m : {&maps.prev, &maps.cur}) {
      for (std::size_t p = 0; p < m->valid.size(); ++p) {
        if (!m->valid[p]) continue;
        const Vec4 q(m->rotation[4 * p], m->rotation[4 * p + 1], m->rotation[4 * p + 2], m->rotation[4 * p + 3]);
        CHECK(std::abs(q.norm() - 1.0) < 1e-6);
        for (int k = 0; k < 3; ++k) CHECK(m->scale_shape[3 * p + k] > 0.0f);
      }
    }
  }
  SUBCASE("size mismatch") { CHECK_THROWS_AS(stub.predict(Image(8, 8, 3), Image(9, 8, 3), 0), Error); }
}

TEST_CASE("attribute maps survive a file round trip bit for bit") {
  StubProvider stub;
  const auto maps = stub.predict(textured(20, 12, 3), textured(20, 12, 4), 0);
  const auto root = std::filesystem::temp_directory_path() / "splatmap_maps_test";
  std::filesystem::remove_all(root);
  save_attribute_maps(DirectoryProvider::pair_dir(root, 3), maps);
  const auto back = load_attribute_maps(DirectoryProvider::pair_dir(root, 3));
  CHECK(back.prev == maps.prev);
  CHECK(back.cur == maps.cur);

  auto provider = make_provider("dir:" + root.string());
  REQUIRE(provider);
  const auto loaded = provider->predict(Image(20, 12, 3), Image(20, 12, 3), 3);
  CHECK(loaded.cur == maps.cur);
  CHECK_THROWS_AS(provider->predict(Image(20, 12, 3), Image(20, 12, 3), 4), Error);
  CHECK_THROWS_AS(provider->predict(Image(21, 12, 3), Image(21, 12, 3), 3), Error);
  std::filesystem::remove_all(root);

  CHECK(make_provider("off") == nullptr);
  CHECK(make_provider("stub")->name() == "stub");
  CHECK_THROWS_AS(make_provider("neural"), Error);
}

TEST_CASE("pick_view prefers the closer valid view") {
  const Camera cam{100, 100, 64, 64, 128, 128};
  const Pose cur = Pose::identity();
  SUBCASE("visible only in the current view") {
    const Pose prev(Quat(Eigen::AngleAxisd(std::numbers::pi, Vec3::UnitY())), Vec3::Zero());
    CHECK(pick_view({0, 0, 3}, cam, prev, cur).view == View::Cur);
  }
  SUBCASE("visible in both") {
    const Pose prev(Quat::Identity(), Vec3(0, 0, -5));
    const auto pick = pick_view({0, 0, 4}, cam, prev, cur);
    CHECK(pick.view == View::Cur);
    CHECK(pick.depth == doctest::Approx(4.0));
    const auto other = pick_view({0, 0, 4}, cam, cur, prev);
    CHECK(other.view == View::Prev);
    CHECK(other.depth == doctest::Approx(4.0));
  }
  SUBCASE("behind both cameras") { CHECK(pick_view({0, 0, -3}, cam, cur, cur).view == View::None); }
}

TEST_CASE("pixel conflicts keep the closest point") {
  const Camera cam{100, 100, 64, 64, 128, 128};
  std::vector<ViewPick> picks{{View::Cur, {10.2, 5.1}, 3.0}, {View::Cur, {9.9, 4.8}, 2.0}};
  CHECK(resolve_pixel_conflicts(picks, cam) == std::vector<bool>{false, true});
  picks = {{View::Cur, {10, 5}, 3.0}, {View::Cur, {11, 5}, 2.0}};
  CHECK(resolve_pixel_conflicts(picks, cam) == std::vector<bool>{true, true});
  picks = {{View::Cur, {10, 5}, 2.0}, {View::Cur, {10, 5}, 2.0}};
  CHECK(resolve_pixel_conflicts(picks, cam) == std::vector<bool>{true, false});
  // Different views never conflict.
  picks = {{View::Prev, {10, 5}, 2.0}, {View::Cur, {10, 5}, 3.0}, {View::None, {10, 5}, 1.0}};
  CHECK(resolve_pixel_conflicts(picks, cam) == std::vector<bool>{true, true, false});
}

TEST_CASE("sampling model attributes") {
  AttributeMaps maps(4, 4, 4);
  std::fill(maps.valid.begin(), maps.valid.end(), 1);
  auto set_shape = [&](int x, int y, const Vec3& a) {
    for (int k = 0; k < 3; ++k) maps.scale_shape[3 * maps.pixel(x, y) + k] = static_cast<float>(a(k));
  };

  SUBCASE("unit shape anchors to depth over focal") {
    const auto m = sample_model_attrs(maps, {1.5, 1.5}, Pose::identity(), 10.0, 500.0);
    REQUIRE(m);
    CHECK((m->log_scale - Vec3::Constant(std::log(0.02))).norm() < 1e-12);
    CHECK(m->log_scale(0) == doctest::Approx(-3.912).epsilon(1e-4));
  }
  SUBCASE("shape normalization by the geometric mean") {
    set_shape(1, 1, {2, 2, 0.5});
    const auto m = sample_model_attrs(maps, {1, 1}, Pose::identity(), 10.0, 500.0);
    REQUIRE(m);
    const Vec3 shape = m->log_scale.array().exp() / 0.02;
    CHECK((shape - Vec3(1.587, 1.587, 0.397)).norm() < 1e-3);
    CHECK(std::cbrt(shape.prod()) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("all neighbors invalid") {
    for (int y = 1; y <= 2; ++y)
      for (int x = 1; x <= 2; ++x) maps.valid[maps.pixel(x, y)] = 0;
    CHECK_FALSE(sample_model_attrs(maps, {1.5, 1.5}, Pose::identity(), 1.0, 100.0));
    // One valid neighbor carries all the weight.
    maps.valid[maps.pixel(2, 2)] = 1;
    maps.opacity_logit[maps.pixel(2, 2)] = 1.25f;
    const auto m = sample_model_attrs(maps, {1.5, 1.5}, Pose::identity(), 1.0, 100.0);
    REQUIRE(m);
    CHECK(m->opacity_logit == doctest::Approx(1.25));
  }
  SUBCASE("antipodal neighbors do not cancel") {
    const Quat q(Eigen::AngleAxisd(0.7, Vec3(1, 2, 3).normalized()));
    for (int y = 0; y < 4; ++y) {
      for (int x = 0; x < 4; ++x) {
        const double s = (x + y) % 2 ? -1.0 : 1.0;
        const std::size_t p = maps.pixel(x, y);
        maps.rotation[4 * p] = static_cast<float>(s * q.w());
        maps.rotation[4 * p + 1] = static_cast<float>(s * q.x());
        maps.rotation[4 * p + 2] = static_cast<float>(s * q.y());
        maps.rotation[4 * p + 3] = static_cast<float>(s * q.z());
      }
    }
    const auto m = sample_model_attrs(maps, {1.5, 1.5}, Pose::identity(), 1.0, 100.0);
    REQUIRE(m);
    CHECK(rotation_angle(m->rotation, q) < 1e-6);
  }
  SUBCASE("camera to world rotation") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      const Quat qc = splatmap::testing::random_quat(rng);
      for (std::size_t p = 0; p < maps.valid.size(); ++p) {
        maps.rotation[4 * p] = static_cast<float>(qc.w());
        maps.rotation[4 * p + 1] = static_cast<float>(qc.x());
        maps.rotation[4 * p + 2] = static_cast<float>(qc.y());
        maps.rotation[4 * p + 3] = static_cast<float>(qc.z());
      }
      const Quat stored = Quat(maps.rotation[0], maps.rotation[1], maps.rotation[2], maps.rotation[3]).normalized();
      const Pose pose = splatmap::testing::random_pose(rng);
      const auto m = sample_model_attrs(maps, {1.25, 2.5}, pose, 3.0, 100.0);
      REQUIRE(m);
      const Mat3 expected = pose.rotation_matrix() * stored.toRotationMatrix();
      CHECK((m->rotation.toRotationMatrix() - expected).norm() < 1e-9);
    }
  }
  SUBCASE("geometric mean of the output scale equals depth over focal") {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.2, 3.0);
    for (std::size_t p = 0; p < maps.valid.size(); ++p)
      for (int k = 0; k < 3; ++k) maps.scale_shape[3 * p + k] = static_cast<float>(u(rng));
    for (int trial = 0; trial < 100; ++trial) {
      const double d = u(rng) * 4.0, f = 50.0 + 100.0 * u(rng);
      const auto m = sample_model_attrs(maps, {u(rng), u(rng)}, Pose::identity(), d, f);
      REQUIRE(m);
      CHECK(std::abs(std::exp(m->log_scale.mean()) - d / f) < 1e-9 * d / f);
    }
  }
}

TEST_CASE("beta ratio") {
  CHECK(compute_beta(100, 100, 0.2) == 1.0);
  CHECK(compute_beta(0, 100, 0.2) == 0.2);
  CHECK(compute_beta(30, 100, 0.2) == doctest::Approx(0.3));
  double prev = 0.0;
  for (std::size_t n = 0; n <= 50; ++n) {
    const double b = compute_beta(n, 50, 0.2);
    CHECK(b >= prev);
    prev = b;
  }
  CHECK_THROWS_AS(compute_beta(5, 0, 0.2), Error);
  CHECK_THROWS_AS(compute_beta(6, 5, 0.2), Error);
}

TEST_CASE("cascade branches") {
  InitConfig cfg;
  WorldPoint pt;
  pt.position = Vec3(1, 2, 3);
  pt.color = Vec3(0.5, 0.5, 0.5);
  GeomPrior prior;
  prior.rotation = Quat(Eigen::AngleAxisd(0.3, Vec3::UnitX()));
  prior.log_scale = Vec3(-1.0, -1.5, -4.0);
  prior.reliable = true;

  SUBCASE("pca with beta one keeps the prior scale") {
    const auto g = cascade_init(pt, prior, std::nullopt, 1.0, 5.0, 500.0, cfg);
    CHECK(g.source == InitSource::Pca);
    CHECK((g.log_scale - prior.log_scale).norm() == 0.0);
    CHECK(rotation_angle(g.quat(), prior.rotation) < 1e-12);
    CHECK(sigmoid(g.opacity_logit) == doctest::Approx(0.1));
    CHECK(g.sh[0].norm() < 1e-15);
    CHECK(g.mean == pt.position);
  }
  SUBCASE("pca with beta shrinks every axis") {
    const auto g = cascade_init(pt, prior, std::nullopt, 0.25, 5.0, 500.0, cfg);
    CHECK((g.log_scale - (prior.log_scale + Vec3::Constant(std::log(0.25)))).norm() < 1e-12);
  }
  SUBCASE("heuristic is isotropic at depth over focal") {
    prior.reliable = false;
    const auto g = cascade_init(pt, prior, std::nullopt, 1.0, 5.0, 500.0, cfg);
    CHECK(g.source == InitSource::Heuristic);
    CHECK((g.log_scale.array().exp() - 0.01).matrix().norm() < 1e-15);
    CHECK(rotation_angle(g.quat(), Quat::Identity()) == 0.0);
  }
  SUBCASE("pca branch disabled") {
    cfg.use_pca = false;
    CHECK(cascade_init(pt, prior, std::nullopt, 1.0, 5.0, 500.0, cfg).source == InitSource::Heuristic);
  }
  SUBCASE("model attributes win and the DC color still comes from the point") {
    ModelAttrs m;
    m.log_scale = Vec3(-3, -3, -4);
    m.opacity_logit = 0.8;
    m.sh_coeffs = 4;
    m.sh[0] = Vec3(9, 9, 9);
    m.sh[1] = Vec3(0.1, 0.2, 0.3);
    pt.color = Vec3(1.0, 0.0, 0.5);
    const auto g = cascade_init(pt, prior, m, 0.3, 5.0, 500.0, cfg);
    CHECK(g.source == InitSource::Model);
    CHECK(g.log_scale == m.log_scale);
    CHECK(g.opacity_logit == 0.8);
    CHECK((sh_dc_to_color(g.sh[0]) - pt.color).norm() < 1e-12);
    CHECK(g.sh[1] == m.sh[1]);
  }
}

TEST_CASE("closing a segment") {
  const Camera cam{60, 60, 31.5, 31.5, 64, 64};
  std::vector<Vec2> all_pixels;
  for (int y = 2; y < 62; y += 2)
    for (int x = 2; x < 62; x += 2) all_pixels.emplace_back(x, y);

  SUBCASE("three keyframes of textured points are all model-initialized") {
    const Image rgb = textured(64, 64, 11);
    std::vector<Frame> frames;
    for (int k = 0; k < 3; ++k) {
      std::vector<Vec2> px(all_pixels.begin() + 100 * k, all_pixels.begin() + 100 * (k + 1));
      frames.push_back(wall_frame(cam, rgb, 2.0, px, k));
    }
    const Frame lf = wall_frame(cam, rgb, 2.0, {}, 3);
    StubProvider stub;
    const auto maps = stub.predict(rgb, rgb, 0);
    std::vector<const Frame*> kfs{&frames[0], &frames[1], &frames[2]};
    const auto build = close_segment(kfs, lf, lf, cam, &maps, 7, InitConfig{});
    CHECK(build.segment.gaussians.size() == 300);
    CHECK(build.counts.model == 300);
    CHECK(build.counts.pca == 0);
    CHECK(build.counts.heuristic == 0);
    CHECK(build.segment.id == 7);
    CHECK(build.segment.loopframe_index == 3);
    for (const auto& g : build.segment.gaussians) {
      CHECK(g.segment_id == 7);
      // Model scale anchored to depth over focal.
      CHECK(std::abs(std::exp(g.log_scale.mean()) - 2.0 / 60.0) < 1e-6);
    }
  }

  SUBCASE("textureless area falls through the model branch") {
    const Image rgb = textured(64, 64, 12, 0.4);
    const Frame kf = wall_frame(cam, rgb, 2.0, all_pixels, 0, true);
    const Frame lf = wall_frame(cam, rgb, 2.0, {}, 1);
    StubProvider stub;
    const auto maps = stub.predict(rgb, rgb, 0);
    std::vector<const Frame*> kfs{&kf};
    const auto build = close_segment(kfs, lf, lf, cam, &maps, 0, InitConfig{});
    const double share = static_cast<double>(build.counts.pca + build.counts.heuristic) / build.counts.total();
    CHECK(share == doctest::Approx(0.4).epsilon(0.25));
    // Every fallthrough point is reliable here, so beta is exactly the fallthrough share.
    CHECK(build.beta == doctest::Approx(share));
    CHECK(build.counts.heuristic == 0);
  }

  SUBCASE("without a provider every point uses the priors or the heuristic") {
    const Image rgb = textured(64, 64, 13);
    Frame kf = wall_frame(cam, rgb, 2.0, all_pixels, 0);
    for (std::size_t i = 0; i < kf.priors.size(); i += 2) kf.priors[i].reliable = true;
    const Frame lf = wall_frame(cam, rgb, 2.0, {}, 1);
    std::vector<const Frame*> kfs{&kf};
    const auto build = close_segment(kfs, lf, lf, cam, nullptr, 0, InitConfig{});
    CHECK(build.counts.model == 0);
    CHECK(build.counts.pca == (kf.points.size() + 1) / 2);
    CHECK(build.counts.total() == kf.points.size());
    for (const auto& g : build.segment.gaussians) {
      if (g.source == InitSource::Heuristic) CHECK((g.log_scale.array().exp() - 2.0 / 60.0).abs().maxCoeff() < 1e-12);
    }
  }

  SUBCASE("empty segment") {
    const Frame lf = wall_frame(cam, textured(64, 64, 1), 2.0, {}, 1);
    std::vector<const Frame*> kfs{&lf};
    CHECK_THROWS_AS(close_segment(kfs, lf, lf, cam, nullptr, 0, InitConfig{}), Error);
  }
}
