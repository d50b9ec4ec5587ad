#include "doctest.h"
#include "fixtures.hpp"
#include "test_support.hpp"

#include "splatmap/error.hpp"
#include "splatmap/loop_graph.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <filesystem>
#include <numbers>

using namespace splatmap;
using namespace splatmap::fixtures;
using splatmap::testing::random_pose;
using splatmap::testing::random_quat;
using splatmap::testing::random_vec3;

namespace {

// Planar pose (x, y, theta) algebra, written independently of the SE(3) code.
struct Planar {
  double x, y, th;
};

Planar planar_compose(const Planar& a, const Planar& b) {
  const double c = std::cos(a.th), s = std::sin(a.th);
  return {a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.th + b.th};
}

Planar planar_inverse(const Planar& a) {
  const double c = std::cos(a.th), s = std::sin(a.th);
  return {-(c * a.x + s * a.y), -(-s * a.x + c * a.y), -a.th};
}

// (theta, rho_x, rho_y) with rho = V(theta)^-1 t.
Eigen::Vector3d planar_log(const Planar& p) {
  const double th = std::atan2(std::sin(p.th), std::cos(p.th));
  double a = 1.0, b = 0.0;
  if (std::abs(th) > 1e-12) {
    a = std::sin(th) / th;
    b = (1.0 - std::cos(th)) / th;
  }
  Eigen::Matrix2d V;
  V << a, -b, b, a;
  const Eigen::Vector2d rho = V.inverse() * Eigen::Vector2d(p.x, p.y);
  return {th, rho.x(), rho.y()};
}

struct PlanarEdge {
  int i, j;
  Planar z;
  double w;
};

Eigen::VectorXd planar_residuals(const std::vector<PlanarEdge>& edges, const Eigen::VectorXd& params) {
  auto node = [&](int k) -> Planar {
    if (k == 0) return {0, 0, 0};
    return {params(3 * (k - 1)), params(3 * (k - 1) + 1), params(3 * (k - 1) + 2)};
  };
  Eigen::VectorXd r(3 * edges.size());
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto& E = edges[e];
    const Planar d = planar_compose(planar_inverse(E.z), planar_compose(planar_inverse(node(E.i)), node(E.j)));
    r.segment<3>(3 * e) = std::sqrt(E.w) * planar_log(d);
  }
  return r;
}

// Gauss-Newton with central-difference Jacobians.
Eigen::VectorXd planar_newton(const std::vector<PlanarEdge>& edges, Eigen::VectorXd params) {
  for (int it = 0; it < 100; ++it) {
    const Eigen::VectorXd r = planar_residuals(edges, params);
    Eigen::MatrixXd J(r.size(), params.size());
    for (int k = 0; k < params.size(); ++k) {
      Eigen::VectorXd p = params, m = params;
      p(k) += 1e-6;
      m(k) -= 1e-6;
      J.col(k) = (planar_residuals(edges, p) - planar_residuals(edges, m)) / 2e-6;
    }
    const Eigen::VectorXd step = (J.transpose() * J).ldlt().solve(-J.transpose() * r);
    params += step;
    if (step.norm() < 1e-14) break;
  }
  return params;
}

}  // namespace

TEST_CASE("regularize_covariance replaces the spectrum with a planar one") {
  const Mat3 a = regularize_covariance(Vec3(4.0, 1.0, 0.01).asDiagonal());
  CHECK((a - Mat3(Vec3(1.0, 1.0, 1e-3).asDiagonal())).norm() < 1e-12);

  const Eigen::SelfAdjointEigenSolver<Mat3> es(regularize_covariance(Mat3::Identity()));
  CHECK(es.eigenvalues()(0) == doctest::Approx(1e-3).epsilon(1e-9));
  CHECK(es.eigenvalues()(1) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(es.eigenvalues()(2) == doctest::Approx(1.0).epsilon(1e-9));

  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const Mat3 R = random_quat(rng).toRotationMatrix();
    const Mat3 out = regularize_covariance(R * Vec3(9.0, 4.0, 1.0).asDiagonal() * R.transpose());
    CHECK((out - out.transpose()).norm() < 1e-12);
    const Vec3 n = R.col(2);
    CHECK((out * n - 1e-3 * n).norm() < 1e-9);
    const Eigen::SelfAdjointEigenSolver<Mat3> e2(out);
    CHECK(e2.eigenvalues()(0) == doctest::Approx(1e-3).epsilon(1e-9));
    CHECK(e2.eigenvalues()(2) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("find_candidates applies radius and index gap") {
  std::vector<Pose> line;
  for (int k = 0; k < 40; ++k) line.push_back(Pose(Quat::Identity(), Vec3(5.0 * k, 0, 0)));
  CHECK(find_candidates(line, 39, 10.0, 20).empty());

  std::vector<Pose> loop;
  for (int k = 0; k < 40; ++k) {
    const double a = 2.0 * std::numbers::pi * k / 40.0;
    loop.push_back(Pose(Quat::Identity(), Vec3(30.0 * std::cos(a), 30.0 * std::sin(a), 0)));
  }
  loop.push_back(loop.front());
  const auto c = find_candidates(loop, 40, 10.0, 20);
  REQUIRE(!c.empty());
  CHECK(c.front().hist == 0);
  CHECK(c.front().cur == 40);
  CHECK(c.front().distance == 0.0);
  for (const auto& x : c) CHECK(40 - x.hist >= 20);

  // The neighbor one index back is within the radius but too recent.
  const auto near = find_candidates(loop, 40, 10.0, 1);
  bool has_neighbor = false;
  for (const auto& x : near) has_neighbor |= x.hist == 39;
  CHECK(has_neighbor);
  for (const auto& x : c) CHECK(x.hist != 39);
}

TEST_CASE("extract_target_set examples and brute-force oracle") {
  Camera cam;
  const Pose view = Pose::identity();  // looking down +z
  std::vector<Gaussian> gs(3);
  gs[0].mean = {0, 0, -5};   // behind
  gs[1].mean = {0, 0, 31};   // beyond d_max
  gs[2].mean = {0, 0, 29};   // inside
  const std::vector<Pose> views{view};
  const auto kept = extract_target_set(gs, views, cam, 30.0, std::vector<int>{});
  REQUIRE(kept.size() == 1);
  CHECK(kept[0] == 2);
  CHECK_THROWS_AS(extract_target_set(std::span(gs).first(2), views, cam, 30.0, std::vector<int>{}), Error);

  const auto f = target_set_fixture();
  const auto expected = brute_force_target_set(f.cloud, f.views, cam, f.d_max, f.excluded);
  REQUIRE(expected.size() > 20);
  CHECK(extract_target_set(f.cloud, f.views, cam, f.d_max, f.excluded) == expected);
}

TEST_CASE("GICP self-registration converges immediately") {
  const auto walls = two_walls(500, 1);
  const auto r = gaussian_gicp(walls, walls, Pose::identity());
  CHECK(r.converged);
  CHECK(r.iterations <= 2);
  CHECK(r.residual < 1e-9);
  CHECK(translation_error(r.transform, Pose::identity()) < 1e-12);
  CHECK(r.correspondences == 500);
  CHECK(accept_loop(r, 0.5, 50));
}

TEST_CASE("GICP recovers a known rigid offset between wall sets") {
  const auto src = two_walls(500, 2);
  const Pose truth = yaw_pose(5.0 * kDeg, Vec3(0.18, -0.24, 0.0));
  const auto tar = transformed(src, truth);
  const auto r = gaussian_gicp(src, tar, Pose::identity());
  CHECK(r.converged);
  CHECK(rotation_angle(r.transform.rotation, truth.rotation) < 1e-3);
  CHECK(translation_error(r.transform, truth) < 1e-3);
  CHECK(r.residual < 1e-3);
  for (const auto& [before, after] : r.accepted_steps) CHECK(after <= before);
  CHECK(!r.accepted_steps.empty());
}

TEST_CASE("GICP conditioning separates sliding from locked geometry") {
  auto corner = two_walls(600, 3);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 4.0);
  for (std::size_t k = 0; k < corner.size(); k += 3) {
    corner[k].mean = {u(rng), u(rng), 0.0};
    corner[k].set_quat(Quat::Identity());
  }
  const auto locked = gaussian_gicp(corner, corner, Pose::identity());
  CHECK(locked.conditioning > 0.1);

  std::vector<Gaussian> wall;
  for (const auto& g : two_walls(600, 3))
    if (g.mean.x() == 0.0) wall.push_back(g);
  const auto sliding = gaussian_gicp(wall, wall, Pose::identity());
  CHECK(sliding.converged);
  CHECK(sliding.conditioning < 0.01);
}

TEST_CASE("point clouds become oriented Gaussians for registration") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 4.0);
  std::vector<Vec3> pts;
  for (int k = 0; k < 1500; ++k) {
    const double a = u(rng), b = u(rng);
    if (k % 3 == 0) pts.emplace_back(a, b, 0.0);
    else if (k % 3 == 1) pts.emplace_back(0.0, a, b);
    else pts.emplace_back(a, 0.0, b);
  }
  const auto gs = gaussians_from_points(pts, 0.4);
  REQUIRE(gs.size() > 1000);
  for (const auto& g : gs) {
    if (g.mean.z() != 0.0 || g.mean.x() < 0.5 || g.mean.y() < 0.5) continue;
    // Interior floor points: the thinnest axis is the floor normal.
    const Mat3 R = g.quat().toRotationMatrix();
    int thin = 0;
    for (int k = 1; k < 3; ++k)
      if (g.log_scale(k) < g.log_scale(thin)) thin = k;
    CHECK(std::abs(R.col(thin).z()) > 0.99);
  }
  const Pose truth = yaw_pose(3.0 * kDeg, Vec3(0.1, -0.05, 0.08));
  std::vector<Vec3> moved;
  for (const auto& p : pts) moved.push_back(truth * p);
  const auto r = gaussian_gicp(gs, gaussians_from_points(moved, 0.4), Pose::identity());
  CHECK(r.converged);
  CHECK(rotation_angle(r.transform.rotation, truth.rotation) < 1e-3);
  CHECK(translation_error(r.transform, truth) < 1e-3);
  CHECK_THROWS_AS(gaussians_from_points(pts, 0.0), Error);
}

TEST_CASE("GICP objective never increases on noisy data") {
  std::mt19937_64 rng(5);
  const auto src = two_walls(400, 3);
  auto tar = transformed(src, yaw_pose(3.0 * kDeg, Vec3(0.1, 0.1, 0.05)));
  std::normal_distribution<double> n(0.0, 0.01);
  for (auto& g : tar) g.mean += Vec3(n(rng), n(rng), n(rng));
  const auto r = gaussian_gicp(src, tar, Pose::identity());
  REQUIRE(!r.accepted_steps.empty());
  for (const auto& [before, after] : r.accepted_steps) CHECK(after <= before);
}

TEST_CASE("GICP is equivariant under a common rigid motion") {
  const auto src = two_walls(300, 4);
  const auto tar = transformed(src, yaw_pose(4.0 * kDeg, Vec3(0.1, -0.15, 0.0)));
  const auto base = gaussian_gicp(src, tar, Pose::identity());
  std::mt19937_64 rng(9);
  for (int t = 0; t < 3; ++t) {
    const Pose G = random_pose(rng, 3.0);
    const auto moved = gaussian_gicp(transformed(src, G), transformed(tar, G), Pose::identity());
    const Pose expected = G * base.transform * G.inverse();
    CHECK(rotation_angle(moved.transform.rotation, expected.rotation) < 1e-6);
    CHECK(translation_error(moved.transform, expected) < 1e-6);
  }
}

TEST_CASE("GICP on disjoint rooms has no correspondences") {
  const auto a = two_walls(100, 6);
  const auto b = transformed(a, Pose(Quat::Identity(), Vec3(50, 0, 0)));
  CHECK_THROWS_AS(gaussian_gicp(a, b, Pose::identity()), Error);
}

TEST_CASE("accept_loop gates on convergence, residual and support") {
  GicpResult r;
  r.converged = true;
  r.residual = 0.1;
  r.correspondences = 100;
  CHECK(accept_loop(r, 0.5, 50));
  r.converged = false;
  r.residual = 0.01;
  CHECK_FALSE(accept_loop(r, 0.5, 50));
  r.converged = true;
  r.correspondences = 3;
  CHECK_FALSE(accept_loop(r, 0.5, 50));
  r.correspondences = 100;
  r.residual = 0.6;
  CHECK_FALSE(accept_loop(r, 0.5, 50));
}

TEST_CASE("pose graph: consistent odometry chain is left at dead reckoning") {
  std::mt19937_64 rng(8);
  PoseGraph g;
  g.nodes.push_back(random_pose(rng));
  for (int k = 1; k < 6; ++k) {
    const Pose step = random_pose(rng, 1.0);
    g.nodes.push_back(g.nodes.back() * step);
    g.edges.push_back({k - 1, k, step, Mat6::Identity(), false});
  }
  const auto r = optimize_pose_graph(g);
  CHECK(r.final_cost <= r.initial_cost);
  for (std::size_t k = 0; k < g.nodes.size(); ++k) CHECK(translation_error(r.poses[k], g.nodes[k]) < 1e-9);
  CHECK(r.poses[0].rotation.coeffs() == g.nodes[0].rotation.coeffs());
  CHECK(r.poses[0].translation == g.nodes[0].translation);
}

TEST_CASE("pose graph: co-located yaw square matches the closed-form optimum") {
  // Four nodes at the origin, true yaws 0/90/180/270 deg. Odometry reads
  // 92 deg per edge, the loop edge is exact. The 6 deg cycle error spreads in
  // proportion to inverse information: 1 per odometry edge, 0.1 for the loop.
  PoseGraph g;
  const double odo = 92.0 * kDeg;
  for (int k = 0; k < 4; ++k) g.nodes.push_back(yaw_pose(k * odo, Vec3::Zero()));
  for (int k = 0; k < 3; ++k) g.edges.push_back({k, k + 1, yaw_pose(odo, Vec3::Zero()), Mat6::Identity(), false});
  g.edges.push_back({3, 0, yaw_pose(90.0 * kDeg, Vec3::Zero()), 10.0 * Mat6::Identity(), true});
  const auto r = optimize_pose_graph(g);
  const double share = 6.0 / 3.1;
  for (int k = 1; k < 4; ++k) {
    const double expected = (92.0 * k - share * k) * kDeg;
    CHECK(rotation_angle(r.poses[k].rotation, yaw_pose(expected, Vec3::Zero()).rotation) < 1e-9);
    CHECK(r.poses[k].translation.norm() < 1e-12);
  }
  const Pose end_expected = yaw_pose((276.0 - 18.0 / 3.1) * kDeg, Vec3::Zero());
  CHECK(rotation_angle(r.poses[3].rotation, end_expected.rotation) < 1e-6);
  REQUIRE(!r.cost_history.empty());
  double prev = r.initial_cost;
  for (double c : r.cost_history) {
    CHECK(c < prev);
    prev = c;
  }
  CHECK(r.poses[0].rotation.coeffs() == g.nodes[0].rotation.coeffs());
}

TEST_CASE("pose graph: translated square agrees with a planar Newton oracle") {
  const Planar gt[4] = {{0, 0, 0}, {2, 0, std::numbers::pi / 2}, {2, 2, std::numbers::pi}, {0, 2, 1.5 * std::numbers::pi}};
  auto to_pose = [](const Planar& p) { return yaw_pose(p.th, Vec3(p.x, p.y, 0)); };
  PoseGraph g;
  std::vector<PlanarEdge> pe;
  g.nodes.push_back(to_pose(gt[0]));
  for (int k = 0; k < 3; ++k) {
    const Planar z = planar_compose(planar_compose(planar_inverse(gt[k]), gt[k + 1]), Planar{0, 0, 2.0 * kDeg});
    pe.push_back({k, k + 1, z, 1.0});
    g.edges.push_back({k, k + 1, to_pose(z), Mat6::Identity(), false});
    g.nodes.push_back(g.nodes.back() * to_pose(z));
  }
  const Planar zl = planar_compose(planar_inverse(gt[3]), gt[0]);
  pe.push_back({3, 0, zl, 10.0});
  g.edges.push_back({3, 0, to_pose(zl), 10.0 * Mat6::Identity(), true});

  Eigen::VectorXd init(9);
  Planar acc = gt[0];
  for (int k = 0; k < 3; ++k) {
    acc = planar_compose(acc, pe[k].z);
    init.segment<3>(3 * k) << acc.x, acc.y, acc.th;
  }
  const Eigen::VectorXd opt = planar_newton(pe, init);
  const auto r = optimize_pose_graph(g);
  for (int k = 1; k < 4; ++k) {
    const Pose expected = to_pose({opt(3 * (k - 1)), opt(3 * (k - 1) + 1), opt(3 * (k - 1) + 2)});
    CHECK(translation_error(r.poses[k], expected) < 1e-6);
    CHECK(rotation_angle(r.poses[k].rotation, expected.rotation) < 1e-6);
  }
  CHECK(r.final_cost < r.initial_cost);
}

TEST_CASE("pose graph: three-node solution matches a brute-force grid") {
  std::mt19937_64 rng(21);
  PoseGraph g;
  const Pose x1 = random_pose(rng, 1.0);
  const Pose x2 = random_pose(rng, 1.0);
  g.nodes = {Pose::identity(), x1, x1 * random_pose(rng, 0.1) * x1.inverse() * x2};
  // Node 1 is pinned by a stiff edge, so node 2 is a 6-DoF problem.
  g.edges.push_back({0, 1, x1, 1e8 * Mat6::Identity(), false});
  Vec6 noise;
  for (int k = 0; k < 6; ++k) noise(k) = std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
  g.edges.push_back({1, 2, x1.inverse() * x2 * se3_exp(noise), Mat6::Identity(), false});
  Mat6 info = Mat6::Identity();
  info.diagonal() << 4, 3, 2, 1, 2, 5;
  g.edges.push_back({0, 2, x2, info, true});
  const auto r = optimize_pose_graph(g);

  std::vector<Pose> probe = {Pose::identity(), x1, g.nodes[2]};
  double half = 2.0;
  double best = pose_graph_cost(g, probe);
  for (int level = 0; level < 30; ++level) {
    const Pose center = probe[2];
    Pose best_pose = center;
    for (int idx = 0; idx < 15625; ++idx) {
      Vec6 d;
      int rest = idx;
      for (int k = 0; k < 6; ++k) {
        d(k) = (rest % 5 - 2) * half / 2.0;
        rest /= 5;
      }
      probe[2] = se3_exp(d) * center;
      const double c = pose_graph_cost(g, probe);
      if (c < best) {
        best = c;
        best_pose = probe[2];
      }
    }
    probe[2] = best_pose;
    half *= 0.5;
  }
  CHECK(translation_error(r.poses[2], probe[2]) < 1e-5);
  CHECK(rotation_angle(r.poses[2].rotation, probe[2].rotation) < 1e-5);
  CHECK(r.final_cost <= best + 1e-9);
}

TEST_CASE("pose graph: disconnected node is singular") {
  PoseGraph g;
  g.nodes.resize(3);
  g.edges.push_back({0, 1, Pose::identity(), Mat6::Identity(), false});
  CHECK_THROWS_AS(optimize_pose_graph(g), Error);
}

TEST_CASE("pose graph dump round trip") {
  std::mt19937_64 rng(4);
  PoseGraph g;
  for (int k = 0; k < 4; ++k) g.nodes.push_back(random_pose(rng));
  for (int k = 0; k < 3; ++k) g.edges.push_back({k, k + 1, random_pose(rng), Mat6::Identity(), false});
  Mat6 info = Mat6::Identity() * 10.0;
  info(0, 5) = info(5, 0) = 0.5;
  g.edges.push_back({3, 0, random_pose(rng), info, true});
  const auto path = std::filesystem::temp_directory_path() / "splatmap_graph_test.txt";
  write_pose_graph(path, g);
  const PoseGraph back = read_pose_graph(path);
  REQUIRE(back.nodes.size() == g.nodes.size());
  REQUIRE(back.edges.size() == g.edges.size());
  for (std::size_t k = 0; k < g.nodes.size(); ++k) {
    CHECK(back.nodes[k].translation == g.nodes[k].translation);
    CHECK(back.nodes[k].rotation.coeffs() == g.nodes[k].rotation.coeffs());
  }
  for (std::size_t k = 0; k < g.edges.size(); ++k) {
    CHECK(back.edges[k].i == g.edges[k].i);
    CHECK(back.edges[k].information == g.edges[k].information);
    CHECK(back.edges[k].loop == g.edges[k].loop);
  }
  std::filesystem::remove(path);
}

namespace {

GlobalMap three_segment_map(std::vector<std::vector<Vec3>>& created) {
  GlobalMap map(0.01);
  std::mt19937_64 rng(17);
  for (int s = 0; s < 3; ++s) {
    Segment seg;
    seg.id = s;
    seg.loopframe_index = s + 1;
    std::vector<Vec3> means;
    for (int k = 0; k < 30; ++k) {
      Gaussian g;
      g.mean = random_vec3(rng, -1.0, 1.0) + Vec3(5.0 * s, 0, 0);
      g.set_quat(random_quat(rng));
      g.segment_id = s;
      seg.gaussians.push_back(g);
      means.push_back(g.mean);
    }
    created.push_back(means);
    map.insert_segment(seg);
    map.add_view({s, s, random_pose(rng), nullptr, nullptr});
  }
  return map;
}

}  // namespace

TEST_CASE("propagate_correction moves segments by their anchor deltas") {
  std::vector<std::vector<Vec3>> created;
  GlobalMap map = three_segment_map(created);
  const std::vector<Pose> nodes{Pose::identity(), yaw_pose(0.1, Vec3(1, 0, 0)), yaw_pose(0.2, Vec3(2, 0, 0)),
                                yaw_pose(0.3, Vec3(3, 0, 0))};
  const std::vector<int> anchor{1, 2, 3};

  SUBCASE("identity deltas leave the map bitwise unchanged") {
    const std::vector<Gaussian> before(map.gaussians().begin(), map.gaussians().end());
    propagate_correction(map, nodes, nodes, anchor);
    for (std::size_t k = 0; k < before.size(); ++k) {
      CHECK(map.gaussians()[k].mean == before[k].mean);
      CHECK(map.gaussians()[k].rotation == before[k].rotation);
    }
  }

  SUBCASE("pure translation shifts means exactly and keeps rotations") {
    std::vector<Pose> moved = nodes;
    moved[1].translation += Vec3(0.5, -0.25, 0.125);
    const std::vector<Gaussian> before(map.gaussians().begin(), map.gaussians().end());
    const Pose view_before = map.views()[0].pose;
    propagate_correction(map, nodes, moved, anchor);
    for (std::size_t k = 0; k < before.size(); ++k) {
      const bool in_seg0 = before[k].segment_id == 0;
      const Vec3 expected = in_seg0 ? Vec3(before[k].mean + Vec3(0.5, -0.25, 0.125)) : before[k].mean;
      CHECK((map.gaussians()[k].mean - expected).norm() < 1e-12);
      CHECK((map.gaussians()[k].rotation - before[k].rotation).norm() < 1e-12);
    }
    CHECK((map.views()[0].pose.translation - view_before.translation - Vec3(0.5, -0.25, 0.125)).norm() < 1e-12);
  }

  SUBCASE("stored corrections reproduce current means from creation-time means") {
    std::mt19937_64 rng(23);
    std::vector<Pose> cur = nodes;
    for (int round = 0; round < 5; ++round) {
      std::vector<Pose> next = cur;
      for (int k = 1; k < 4; ++k) next[k] = random_pose(rng, 0.2) * cur[k];
      propagate_correction(map, cur, next, anchor);
      cur = next;
    }
    for (const auto& seg : map.segments()) {
      const auto gs = map.segment_gaussians(seg.id);
      for (std::size_t k = 0; k < gs.size(); ++k)
        CHECK((gs[k].mean - seg.correction * created[seg.id][k]).norm() < 1e-9);
    }
  }
}

TEST_CASE("re-registration after correction lowers the loop residual") {
  const auto walls = two_walls(400, 12);
  Segment target;
  target.id = 0;
  target.gaussians = walls;
  Segment source;
  source.id = 1;
  source.gaussians = transformed(walls, yaw_pose(2.0 * kDeg, Vec3(0.15, 0.1, 0.0)));
  for (auto& g : source.gaussians) g.segment_id = 1;
  GlobalMap map(0.0);
  map.insert_segment(target);
  map.insert_segment(source);

  // max_iters = 0 evaluates the residual at the given transform.
  GicpConfig probe;
  probe.max_iters = 0;
  const double pre = gaussian_gicp(map.segment_gaussians(1), map.segment_gaussians(0), Pose::identity(), probe).residual;
  const auto loop = gaussian_gicp(map.segment_gaussians(1), map.segment_gaussians(0), Pose::identity());
  REQUIRE(loop.converged);
  const std::vector<Pose> old_nodes(3, Pose::identity());
  const std::vector<Pose> new_nodes{Pose::identity(), Pose::identity(), loop.transform};
  propagate_correction(map, old_nodes, new_nodes, std::vector<int>{1, 2});
  const double post =
      gaussian_gicp(map.segment_gaussians(1), map.segment_gaussians(0), Pose::identity(), probe).residual;
  CHECK(post < pre);
  CHECK(post < 1e-3);
}
