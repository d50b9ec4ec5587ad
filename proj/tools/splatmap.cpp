#include "splatmap/error.hpp"
#include "splatmap/loop_graph.hpp"
#include "splatmap/pipeline.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace splatmap;
namespace fs = std::filesystem;

namespace {

constexpr const char* kModule = "cli";

Pose parse_pose(const std::string& text) {
  std::istringstream in(text);
  double v[7];
  for (double& x : v)
    if (!(in >> x)) throw Error(ErrorCode::InvalidArgument, kModule, "pose must be \"tx ty tz qw qx qy qz\"");
  std::string rest;
  if (in >> rest) throw Error(ErrorCode::InvalidArgument, kModule, "trailing text after pose");
  const Quat q(v[3], v[4], v[5], v[6]);
  if (q.norm() < 1e-12) throw Error(ErrorCode::InvalidArgument, kModule, "zero quaternion");
  return Pose(q.normalized(), Vec3(v[0], v[1], v[2]));
}

nlohmann::json pose_json(const Pose& p) {
  return {p.translation.x(), p.translation.y(), p.translation.z(), p.rotation.w(),
          p.rotation.x(),    p.rotation.y(),    p.rotation.z()};
}

bool is_splat_ply(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, kModule, "cannot read " + path.string());
  std::string line;
  while (std::getline(in, line) && line != "end_header")
    if (line == "property float scale_0") return true;
  return false;
}

std::vector<Gaussian> load_registration_set(const fs::path& path, double radius) {
  if (is_splat_ply(path)) return read_splat_ply(path);
  const auto pts = read_points(path);
  std::vector<Vec3> xyz;
  xyz.reserve(pts.size());
  for (const auto& p : pts) xyz.push_back(p.position);
  return gaussians_from_points(xyz, radius);
}

// Render settings recorded beside a checkpoint, or the defaults.
RenderConfig render_config_for(const fs::path& map_path) {
  auto sidecar = map_path;
  sidecar.replace_extension(".json");
  std::ifstream in(sidecar);
  if (!in) return {};
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::IoError, "map_opt", "malformed checkpoint sidecar " + sidecar.string());
  }
  if (!j.contains("config")) return {};
  return config_from_json(j["config"]).opt.render;
}

void print(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gaussian splatting mapping with voxel priors and Gaussian loop closure"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate a synthetic looped dataset");
  std::string synth_config, synth_out;
  synth->add_option("--config", synth_config, "synthetic scene JSON (partial documents allowed)")->check(CLI::ExistingFile);
  synth->add_option("--out", synth_out, "dataset directory")->required();

  auto* run = app.add_subcommand("run", "map a dataset");
  std::string run_dataset, run_out, run_config, run_mode = "deterministic", run_loop = "on";
  std::vector<std::string> run_sets;
  run->add_option("--dataset", run_dataset, "dataset directory")->required();
  run->add_option("--mode", run_mode, "execution mode")->check(CLI::IsMember({"streaming", "deterministic"}));
  run->add_option("--loop", run_loop, "loop closure")->check(CLI::IsMember({"on", "off"}));
  run->add_option("--out", run_out, "run directory")->required();
  run->add_option("--config", run_config, "pipeline config JSON")->check(CLI::ExistingFile);
  run->add_option("--set", run_sets, "dotted config override key=value (repeatable)");

  auto* eval = app.add_subcommand("eval", "held-out PSNR and SSIM of a map checkpoint");
  std::string eval_map, eval_dataset, eval_traj;
  int eval_hold_out = 8;
  eval->add_option("--map", eval_map, "splat PLY")->required()->check(CLI::ExistingFile);
  eval->add_option("--dataset", eval_dataset, "dataset directory")->required();
  eval->add_option("--trajectory", eval_traj,
                   "poses of the map's frame; defaults to trajectory.tsv beside the map, else ground truth");
  eval->add_option("--hold-out", eval_hold_out, "every Nth frame is a test view");

  auto* gicp = app.add_subcommand("gicp", "register two Gaussian or point sets");
  std::string gicp_src, gicp_tar, gicp_init;
  double gicp_radius = 0.3;
  gicp->add_option("--src", gicp_src, "source splat or point PLY")->required()->check(CLI::ExistingFile);
  gicp->add_option("--tar", gicp_tar, "target splat or point PLY")->required()->check(CLI::ExistingFile);
  gicp->add_option("--init", gicp_init, "initial guess \"tx ty tz qw qx qy qz\"");
  gicp->add_option("--radius", gicp_radius, "neighbour radius for point clouds, m");

  auto* rend = app.add_subcommand("render", "render a map checkpoint from a pose");
  std::string render_map, render_pose, render_out = "render.png", render_dataset;
  rend->add_option("--map", render_map, "splat PLY")->required()->check(CLI::ExistingFile);
  rend->add_option("--pose", render_pose, "world-from-camera \"tx ty tz qw qx qy qz\"")->required();
  rend->add_option("--out", render_out, "output PNG");
  rend->add_option("--dataset", render_dataset, "take camera intrinsics from this dataset");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      SynthConfig cfg;
      if (!synth_config.empty()) {
        std::ifstream in(synth_config);
        nlohmann::json j;
        try {
          in >> j;
        } catch (const nlohmann::json::exception& e) {
          throw Error(ErrorCode::IoError, "pipeline", std::string("malformed synth config: ") + e.what());
        }
        cfg = j.get<SynthConfig>();
      }
      generate_dataset(cfg, synth_out);
      const Dataset data(synth_out);
      print({{"dataset", synth_out}, {"frames", data.size()}});
    } else if (*run) {
      std::vector<std::string> sets = run_sets;
      sets.push_back("mode=" + run_mode);
      sets.push_back(std::string("loop.enabled=") + (run_loop == "on" ? "true" : "false"));
      const PipelineConfig cfg = load_config(run_config, sets);
      const Dataset data(run_dataset);
      const RunResult res = run_pipeline(data, cfg);
      write_run(res, cfg, run_out);
      print({{"out", run_out},
             {"ate_rmse", res.ate},
             {"ate_rmse_odometry", res.ate_odometry},
             {"mean_psnr", res.eval.mean_psnr},
             {"mean_ssim", res.eval.mean_ssim},
             {"accepted_loops", std::count_if(res.loops.begin(), res.loops.end(), [](const LoopEvent& e) { return e.accepted; })},
             {"real_time_factor", res.timing.at("real_time_factor")}});
    } else if (*eval) {
      const Dataset data(eval_dataset);
      const auto gs = read_splat_ply(eval_map);
      fs::path traj_path = eval_traj;
      if (traj_path.empty() && fs::exists(fs::path(eval_map).parent_path() / "trajectory.tsv"))
        traj_path = fs::path(eval_map).parent_path() / "trajectory.tsv";
      const auto traj = traj_path.empty() ? data.ground_truth() : read_trajectory_tsv(traj_path);
      const RenderConfig rc = render_config_for(eval_map);
      const EvalResult r = evaluate_views(gs, data, traj, eval_hold_out, rc);
      nlohmann::json views = nlohmann::json::array();
      for (const auto& v : r.views) views.push_back({{"frame", v.frame}, {"psnr", v.psnr}, {"ssim", v.ssim}});
      print({{"views", views}, {"mean_psnr", r.mean_psnr}, {"mean_ssim", r.mean_ssim}});
    } else if (*gicp) {
      const auto src = load_registration_set(gicp_src, gicp_radius);
      const auto tar = load_registration_set(gicp_tar, gicp_radius);
      const Pose init = gicp_init.empty() ? Pose::identity() : parse_pose(gicp_init);
      const GicpResult r = gaussian_gicp(src, tar, init);
      print({{"transform", pose_json(r.transform)},
             {"converged", r.converged},
             {"iterations", r.iterations},
             {"residual", r.residual},
             {"correspondences", r.correspondences},
             {"conditioning", r.conditioning}});
    } else if (*rend) {
      const Pose pose = parse_pose(render_pose);
      const Camera cam = render_dataset.empty() ? Camera{} : Dataset(render_dataset).camera();
      const auto gs = read_splat_ply(render_map);
      const RenderConfig rc = render_config_for(render_map);
      const RenderOutput out = render(gs, cam, pose, rc);
      write_png(render_out, out.color);
      print({{"out", render_out}, {"gaussians", gs.size()}});
    }
  } catch (const Error& e) {
    std::cerr << "splatmap: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "splatmap: " << kModule << ": " << e.what() << '\n';
    return 1;
  }
  return 0;
}
