#include "splatmap/error.hpp"
#include "splatmap/loop_graph.hpp"
#include "splatmap/pipeline.hpp"
#include "splatmap/voxel_pca.hpp"

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

namespace py = pybind11;
using namespace splatmap;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_numpy(const Image& im) {
  std::vector<py::ssize_t> shape{im.height, im.width};
  if (im.channels > 1) shape.push_back(im.channels);
  Array out(shape);
  std::memcpy(out.mutable_data(), im.data.data(), im.data.size() * sizeof(double));
  return out;
}

Image from_numpy(const Array& a) {
  if (a.ndim() != 2 && a.ndim() != 3) throw Error(ErrorCode::DimensionMismatch, "pipeline", "image must be HxW or HxWxC");
  Image im(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)), a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1);
  std::memcpy(im.data.data(), a.data(), im.data.size() * sizeof(double));
  return im;
}

Pose pose_from(const std::vector<double>& v) {
  if (v.size() != 7) throw Error(ErrorCode::InvalidArgument, "pipeline", "pose is [tx, ty, tz, qw, qx, qy, qz]");
  return Pose(Quat(v[3], v[4], v[5], v[6]), Vec3(v[0], v[1], v[2]));
}

std::vector<double> pose_to(const Pose& p) {
  return {p.translation.x(), p.translation.y(), p.translation.z(), p.rotation.w(),
          p.rotation.x(),    p.rotation.y(),    p.rotation.z()};
}

Eigen::MatrixXd trajectory_matrix(std::span<const TimedPose> poses) {
  Eigen::MatrixXd m(poses.size(), 8);
  for (std::size_t k = 0; k < poses.size(); ++k) {
    m(k, 0) = poses[k].timestamp;
    const auto v = pose_to(poses[k].pose);
    for (int c = 0; c < 7; ++c) m(k, c + 1) = v[c];
  }
  return m;
}

std::vector<Vec3> rows(const Eigen::Ref<const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>>& m) {
  std::vector<Vec3> out(m.rows());
  for (Eigen::Index i = 0; i < m.rows(); ++i) out[i] = m.row(i).transpose();
  return out;
}

const char* class_name(GeomClass c) {
  switch (c) {
    case GeomClass::Planar: return "planar";
    case GeomClass::Linear: return "linear";
    default: return "unreliable";
  }
}

Camera camera_from_json(const std::string& text) { return nlohmann::json::parse(text).get<Camera>(); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Gaussian splatting mapping core";

  py::register_exception<Error>(m, "Error");

  m.def("default_config_json", [] { return config_to_json(PipelineConfig{}).dump(); });
  m.def("default_synth_json", [] { return nlohmann::json(SynthConfig{}).dump(); });

  m.def("generate_dataset",
        [](const std::string& config_json, const std::string& out) {
          const SynthConfig cfg = nlohmann::json::parse(config_json).get<SynthConfig>();
          py::gil_scoped_release release;
          generate_dataset(cfg, out);
        },
        py::arg("config_json"), py::arg("out"));

  py::class_<Dataset>(m, "Dataset")
      .def(py::init<std::string>(), py::arg("root"))
      .def("__len__", &Dataset::size)
      .def_property_readonly("camera_json", [](const Dataset& d) { return nlohmann::json(d.camera()).dump(); })
      .def_property_readonly("rate", [](const Dataset& d) { return d.meta().rate; })
      .def("ground_truth", [](const Dataset& d) { return trajectory_matrix(d.ground_truth()); })
      .def("odometry", [](const Dataset& d) { return trajectory_matrix(d.odometry()); })
      .def("rgb", [](const Dataset& d, int k) { return to_numpy(d.load_rgb(k)); }, py::arg("k"))
      .def("depth", [](const Dataset& d, int k) { return to_numpy(d.load_frame(k, Pose{}).depth); }, py::arg("k"));

  m.def("run",
        [](const std::string& dataset, const std::string& config_json, const std::string& out) {
          const PipelineConfig cfg = config_from_json(nlohmann::json::parse(config_json));
          RunResult r;
          {
            py::gil_scoped_release release;
            r = run_pipeline(Dataset(dataset), cfg);
            if (!out.empty()) write_run(r, cfg, out);
          }
          nlohmann::json summary = r.report;
          summary["timing"] = r.timing;
          return summary.dump();
        },
        py::arg("dataset"), py::arg("config_json"), py::arg("out") = "");

  m.def("render",
        [](const std::string& map_path, const std::vector<double>& pose, const std::string& camera_json) {
          const auto gs = read_splat_ply(map_path);
          const RenderOutput r = render(gs, camera_from_json(camera_json), pose_from(pose));
          return py::make_tuple(to_numpy(r.color), to_numpy(r.depth));
        },
        py::arg("map_path"), py::arg("pose"), py::arg("camera_json"));

  m.def("gicp",
        [](const Eigen::Ref<const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>>& src,
           const Eigen::Ref<const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>>& tar, double radius,
           const std::vector<double>& init) {
          const auto a = gaussians_from_points(rows(src), radius);
          const auto b = gaussians_from_points(rows(tar), radius);
          const GicpResult r = gaussian_gicp(a, b, init.empty() ? Pose::identity() : pose_from(init));
          py::dict d;
          d["transform"] = pose_to(r.transform);
          d["converged"] = r.converged;
          d["iterations"] = r.iterations;
          d["residual"] = r.residual;
          d["correspondences"] = r.correspondences;
          d["conditioning"] = r.conditioning;
          return d;
        },
        py::arg("src"), py::arg("tar"), py::arg("radius") = 0.3, py::arg("init") = std::vector<double>{});

  m.def("fit_voxel",
        [](const Eigen::Ref<const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>>& pts, double tau_planar,
           double tau_linear) {
          std::vector<WorldPoint> wp;
          for (const auto& p : rows(pts)) wp.push_back({p, Vec3::Zero(), Mat3::Zero()});
          const VoxelStats s = fit_voxel(wp);
          py::dict d;
          d["mean"] = Vec3(s.mean);
          d["eigenvalues"] = Vec3(s.eigenvalues);
          d["eigenvectors"] = Mat3(s.eigenvectors);
          d["class"] = class_name(classify(s, tau_planar, tau_linear));
          return d;
        },
        py::arg("points"), py::arg("tau_planar") = 0.0025, py::arg("tau_linear") = 25.0);

  m.def("psnr", [](const Array& a, const Array& b) { return psnr(from_numpy(a), from_numpy(b)); });
  m.def("ssim", [](const Array& a, const Array& b) { return ssim(from_numpy(a), from_numpy(b)); });
}
