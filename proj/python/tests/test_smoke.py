import json

import numpy as np
import pytest

import splatmap

SMALL = {
    "camera": {"fx": 40, "fy": 40, "cx": 24, "cy": 24, "width": 48, "height": 48},
    "scene": {"arena": 10, "box_count": 3},
    "trajectory": {"waypoints": [[-2, -2], [2, -2], [2, 2], [-2, 2]], "duration": 3},
    "noise": {"points_per_frame": 300},
}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    splatmap.generate_dataset(root, SMALL)
    return root


def test_dataset_loads(dataset):
    ds = splatmap.Dataset(str(dataset))
    assert len(ds) == 30
    gt = ds.ground_truth()
    assert gt.shape == (30, 8)
    assert np.allclose(np.linalg.norm(gt[:, 4:], axis=1), 1.0)
    rgb = ds.rgb(0)
    assert rgb.shape == (48, 48, 3)
    assert ds.depth(0).shape == (48, 48)
    assert json.loads(ds.camera_json)["width"] == 48


def test_run_and_render(dataset, tmp_path):
    cfg = {"opt": {"steps_per_frame": 1}}
    report = splatmap.run(dataset, cfg, tmp_path / "run")
    assert report["timing"]["real_time_factor"] > 0
    assert (tmp_path / "run" / "map.ply").exists()
    ds = splatmap.Dataset(str(dataset))
    pose = ds.ground_truth()[0, 1:]
    rgb, depth = splatmap.render(tmp_path / "run" / "map.ply", pose, json.loads(ds.camera_json))
    assert rgb.shape == (48, 48, 3)
    assert splatmap.psnr(rgb, ds.rgb(0)) > 10.0


def test_metrics_closed_forms():
    a = np.full((8, 8, 3), 0.4)
    assert splatmap.psnr(a, a + 0.1) == pytest.approx(20.0)
    assert splatmap.psnr(a, a) == 99.0
    assert splatmap.ssim(a, a) == pytest.approx(1.0)


def test_fit_voxel_plane():
    rng = np.random.default_rng(0)
    pts = np.c_[rng.uniform(0, 0.5, (50, 2)), np.zeros(50)]
    s = splatmap.fit_voxel(pts)
    assert s["eigenvalues"][0] == pytest.approx(0.0, abs=1e-12)
    assert abs(s["eigenvectors"][2, 0]) == pytest.approx(1.0)
    assert s["class"] == "planar"


def test_gicp_recovers_offset():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(0, 4, (2, 1500))
    k = np.arange(1500) % 3
    pts = np.where(k[:, None] == 0, np.c_[a, b, 0 * a], np.where(k[:, None] == 1, np.c_[0 * a, a, b], np.c_[a, 0 * a, b]))
    t = np.array([0.1, -0.05, 0.08])
    res = splatmap.gicp(pts, pts + t, radius=0.4)
    assert res["converged"]
    assert np.allclose(res["transform"][:3], t, atol=1e-3)


def test_errors_name_the_module(tmp_path):
    with pytest.raises(splatmap.Error, match="pipeline"):
        splatmap.Dataset(str(tmp_path / "missing"))
    with pytest.raises(splatmap.Error):
        splatmap.run(tmp_path, {"voxel": {"nope": 1}})
