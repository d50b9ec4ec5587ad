#pragma once

// Synthetic looped dataset: ray-cast textured boxes over a textured ground
// inside an arena of walls, a closed camera path, drifting odometry and sparse
// colored points. Also the dataset loader shared by every consumer.

#include "splatmap/gauss_init.hpp"

#include "json.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace splatmap {

struct Box {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Ones();
  Vec3 color = Vec3(0.6, 0.5, 0.4);
  std::uint64_t texture_seed = 1;
  // One flag per face in the order -x, +x, -y, +y, -z, +z.
  std::array<bool, 6> textureless{};
};

struct SynthConfig {
  std::uint64_t seed = 7;
  Camera camera;
  double arena = 20.0;  // square side, m
  double wall_height = 4.0;
  int box_count = 6;
  double textureless_fraction = 0.3;
  std::vector<Box> boxes;  // explicit boxes replace the random ones
  bool walls = true;
  bool ground = true;
  std::vector<Vec2> waypoints = {{-6, -4}, {0, -5}, {6, -4}, {7, 0}, {6, 4}, {0, 5}, {-6, 4}, {-7, 0}};
  double height = 1.5;
  double pitch = 0.15;  // rad, positive looks down
  double speed = 1.0;   // m/s
  double rate = 10.0;   // Hz
  double duration = 60.0;  // s
  double range_sigma = 0.01;
  double drift_sigma_t = 0.02;  // m per frame
  double drift_sigma_r = 0.0005;  // rad per frame
  int points_per_frame = 2000;
};

void to_json(nlohmann::json& j, const Camera& c);
void from_json(const nlohmann::json& j, Camera& c);
void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

struct Hit {
  double t = 0.0;  // ray parameter; equals camera depth for z-normalized rays
  Vec3 normal = Vec3::Zero();
  Vec3 color = Vec3::Zero();
};

// Axis-aligned scene of boxes plus an optional ground plane z = 0.
class SynthScene {
 public:
  SynthScene() = default;
  explicit SynthScene(const SynthConfig& cfg);

  std::optional<Hit> intersect(const Vec3& origin, const Vec3& dir) const;
  // Lambertian color and z-depth (0 where nothing is hit).
  void render(const Camera& cam, const Pose& pose, Image& rgb, Image& depth) const;

  std::vector<Box> boxes;
  bool ground = true;
  double ground_extent = 10.0;  // half side of the textured ground square
  std::uint64_t ground_seed = 3;
  Vec3 sky = Vec3::Zero();  // matches the renderer background
};

// Closed Catmull-Rom path through the waypoints, arc-length parametrized.
std::vector<Pose> synth_trajectory(const SynthConfig& cfg);

struct DatasetMeta {
  Camera camera;
  double rate = 10.0;
  int frame_count = 0;
  nlohmann::json synth;  // generator configuration
};

void generate_dataset(const SynthConfig& cfg, const std::filesystem::path& out);

// Camera-frame colored points with per-point covariance sidecar.
void write_points(const std::filesystem::path& ply, std::span<const WorldPoint> points);
std::vector<WorldPoint> read_points(const std::filesystem::path& ply);

class Dataset {
 public:
  explicit Dataset(std::filesystem::path root);

  const DatasetMeta& meta() const { return meta_; }
  const Camera& camera() const { return meta_.camera; }
  int size() const { return meta_.frame_count; }
  const std::vector<TimedPose>& ground_truth() const { return gt_; }
  const std::vector<TimedPose>& odometry() const { return odom_; }

  // Frame k with points moved into the world by `pose` (world-from-camera).
  Frame load_frame(int k, const Pose& pose) const;
  Image load_rgb(int k) const;
  static std::string frame_stem(int k);

 private:
  std::filesystem::path root_;
  DatasetMeta meta_;
  std::vector<TimedPose> gt_;
  std::vector<TimedPose> odom_;
};

}  // namespace splatmap
