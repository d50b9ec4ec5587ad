#pragma once

// Keyframe/loopframe selection and the cascaded Gaussian initialization:
// feed-forward attribute maps first, voxel-PCA priors second, an isotropic
// depth-to-focal heuristic last.

#include "splatmap/gaussian.hpp"
#include "splatmap/geom.hpp"
#include "splatmap/image.hpp"
#include "splatmap/voxel_pca.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace splatmap {

struct Frame {
  int index = 0;
  double timestamp = 0.0;
  Pose pose;  // world-from-camera
  Image rgb;
  Image depth;  // metres, 0 = invalid
  std::vector<WorldPoint> points;
  std::vector<GeomPrior> priors;  // one per point
};

bool select_keyframe(int index, int gap);
bool select_loopframe(const Pose& pose, const Pose& last_loopframe_pose, double tau_t, double tau_r);

// Per-pixel attribute maps in the camera frame, float32 planes, row-major.
struct AttributeMaps {
  int width = 0;
  int height = 0;
  int sh_coeffs = 1;                  // coefficients per pixel, DC first
  std::vector<float> rotation;        // 4 per pixel, (w,x,y,z)
  std::vector<float> scale_shape;     // 3 per pixel, positive proportions
  std::vector<float> opacity_logit;   // 1 per pixel
  std::vector<float> sh;              // 3 * sh_coeffs per pixel
  std::vector<unsigned char> valid;   // 1 per pixel

  AttributeMaps() = default;
  AttributeMaps(int w, int h, int coeffs);
  std::size_t pixel(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  std::size_t valid_count() const;
  bool operator==(const AttributeMaps&) const = default;
};

struct AttributeMapPair {
  AttributeMaps prev;
  AttributeMaps cur;
};

void save_attribute_maps(const std::filesystem::path& dir, const AttributeMapPair& maps);
AttributeMapPair load_attribute_maps(const std::filesystem::path& dir);

class AttributeProvider {
 public:
  virtual ~AttributeProvider() = default;
  // pair_index counts loopframe pairs from zero.
  virtual AttributeMapPair predict(const Image& prev_rgb, const Image& cur_rgb, int pair_index) = 0;
  virtual std::string name() const = 0;
};

struct StubProviderConfig {
  double contrast_threshold = 0.02;  // local luminance std-dev below this is invalid
  double opacity = 0.7;
  Vec3 anisotropy = Vec3(2.0, 2.0, 1.0);
  int sh_coeffs = 4;
};

// Deterministic stand-in for a feed-forward model, driven by image gradients.
class StubProvider : public AttributeProvider {
 public:
  explicit StubProvider(StubProviderConfig cfg = {}) : cfg_(cfg) {}
  AttributeMapPair predict(const Image& prev_rgb, const Image& cur_rgb, int pair_index) override;
  AttributeMaps predict_one(const Image& rgb) const;
  std::string name() const override { return "stub"; }

 private:
  StubProviderConfig cfg_;
};

// Loads maps exported offline from <root>/pair_XXXXXX.
class DirectoryProvider : public AttributeProvider {
 public:
  explicit DirectoryProvider(std::filesystem::path root) : root_(std::move(root)) {}
  AttributeMapPair predict(const Image& prev_rgb, const Image& cur_rgb, int pair_index) override;
  std::string name() const override { return "dir:" + root_.string(); }
  static std::filesystem::path pair_dir(const std::filesystem::path& root, int pair_index);

 private:
  std::filesystem::path root_;
};

// "stub", "dir:<path>" or "off" (returns null).
std::unique_ptr<AttributeProvider> make_provider(const std::string& spec);

enum class View { None, Prev, Cur };

struct ViewPick {
  View view = View::None;
  Vec2 pixel = Vec2::Zero();
  double depth = 0.0;
};

ViewPick pick_view(const Vec3& p_world, const Camera& cam, const Pose& prev_pose, const Pose& cur_pose);

// Keeps the closest point per rounded pixel of each view; ties go to the lower index.
std::vector<bool> resolve_pixel_conflicts(std::span<const ViewPick> picks, const Camera& cam);

struct ModelAttrs {
  Quat rotation = Quat::Identity();  // world frame
  Vec3 log_scale = Vec3::Zero();
  double opacity_logit = 0.0;
  std::array<Vec3, kMaxShCoeffs> sh = zero_sh();
  int sh_coeffs = 1;
};

std::optional<ModelAttrs> sample_model_attrs(const AttributeMaps& maps, const Vec2& pixel, const Pose& cam_pose,
                                             double d, double f);

double compute_beta(std::size_t n_pca_only, std::size_t n_total, double beta_min);

struct InitConfig {
  int keyframe_gap = 5;
  double loop_tau_t = 2.0;
  double loop_tau_r = 15.0 * 3.14159265358979323846 / 180.0;
  double opacity0 = 0.1;
  double beta_min = 0.2;
  int sh_degree = 1;
  bool focal_mean = false;  // f = fx unless set
  bool use_pca = true;      // false drops the voxel-PCA branch
};

Gaussian cascade_init(const WorldPoint& point, const GeomPrior& prior, const std::optional<ModelAttrs>& model,
                      double beta, double d, double f, const InitConfig& cfg);

struct Segment {
  int id = 0;
  int loopframe_index = 0;
  std::vector<Gaussian> gaussians;
  Pose anchor_pose;
  Pose correction;
};

struct SourceCounts {
  std::size_t model = 0;
  std::size_t pca = 0;
  std::size_t heuristic = 0;
  std::size_t total() const { return model + pca + heuristic; }
};

struct SegmentBuild {
  Segment segment;
  SourceCounts counts;
  double beta = 1.0;
};

// Builds one Gaussian per point of the keyframes between two loopframes.
// maps may be null (no feed-forward provider).
SegmentBuild close_segment(std::span<const Frame* const> keyframes, const Frame& prev_lf, const Frame& cur_lf,
                           const Camera& cam, const AttributeMapPair* maps, int segment_id, const InitConfig& cfg);

}  // namespace splatmap
