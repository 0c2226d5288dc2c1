import numpy as np
import pytest
from hypothesis import given, strategies as st

from gatedlift.camera import (BehindCameraError, CameraIntrinsics, frame_projection_error,
                              load_camera, project, project_jacobian, save_camera)

CAM = CameraIntrinsics(1000.0, 500.0, 400.0)

finite = st.floats(-3000, 3000, allow_nan=False)
depth = st.floats(100, 20000, allow_nan=False)


def test_hand_projection():
    np.testing.assert_allclose(project([100.0, 200.0, 2000.0], CAM), [550.0, 500.0])


@given(depth)
def test_optical_axis(z):
    np.testing.assert_allclose(project([0.0, 0.0, z], CAM), [CAM.cx, CAM.cy])


@pytest.mark.parametrize("lam", [0.5, 2.0, 10.0])
def test_scale_invariance(rng, lam):
    p = rng.uniform(-1000, 1000, (50, 3))
    p[:, 2] = rng.uniform(1000, 8000, 50)
    np.testing.assert_allclose(project(lam * p, CAM), project(p, CAM), rtol=1e-13)


def test_behind_camera():
    with pytest.raises(BehindCameraError):
        project([0.0, 0.0, 0.0], CAM)
    with pytest.raises(BehindCameraError):
        project_jacobian([[1.0, 1.0, 5.0], [0.0, 0.0, -1.0]], CAM)


def test_bad_focal():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 1.0)


def test_jacobian_on_axis_and_depth_scaling():
    j = project_jacobian([0.0, 0.0, 2000.0], CAM)
    np.testing.assert_allclose(j, [[0.5, 0, 0], [0, 0.5, 0]])
    j2 = project_jacobian([0.0, 0.0, 4000.0], CAM)
    assert j2[1, 1] == j[1, 1] / 2


def test_jacobian_matches_finite_differences(rng):
    h = 1e-3
    for _ in range(100):
        cam = CameraIntrinsics(rng.uniform(300, 3000), rng.uniform(0, 1000), rng.uniform(0, 1000))
        p = np.array([rng.uniform(-2000, 2000), rng.uniform(-2000, 2000), rng.uniform(500, 9000)])
        num = np.column_stack([(project(p + h * e, cam) - project(p - h * e, cam)) / (2 * h)
                               for e in np.eye(3)])
        ana = project_jacobian(p, cam)
        assert np.abs(ana - num).max() <= 1e-6 * np.abs(ana).max()


def test_batched_jacobian_shape(rng):
    p = np.column_stack([rng.normal(size=(4, 5, 2)).reshape(-1, 2), np.full(20, 3.0)]).reshape(4, 5, 3)
    assert project_jacobian(p, CAM).shape == (4, 5, 2, 3)


# --- masked frame error ---------------------------------------------------

def _frame(rng):
    rel = rng.normal(0, 300, (17, 3))
    rel[0] = 0
    root = np.array([100.0, -50.0, 4000.0])
    return rel, root, project(rel + root, CAM)


def test_exact_observations_cost_nothing(rng):
    rel, root, obs = _frame(rng)
    assert frame_projection_error(rel, root, obs, np.zeros(17), CAM) == pytest.approx(0, abs=1e-18)


def test_fully_occluded_frame_costs_nothing(rng):
    rel, root, obs = _frame(rng)
    assert frame_projection_error(rel, root, obs + 99, np.ones(17), CAM) == 0.0


def test_three_four_five(rng):
    rel, root, obs = _frame(rng)
    mask = np.ones(17)
    mask[5] = 0
    obs[5] += [3.0, 4.0]
    assert frame_projection_error(rel, root, obs, mask, CAM) == pytest.approx(25.0, rel=1e-9)


def test_occluded_joint_behind_camera_is_ignored(rng):
    rel, root, obs = _frame(rng)
    rel[3, 2] = -10_000
    mask = np.zeros(17)
    mask[3] = 1
    assert frame_projection_error(rel, root, obs, mask, CAM) == pytest.approx(0, abs=1e-18)
    with pytest.raises(BehindCameraError):
        frame_projection_error(rel, root, obs, np.zeros(17), CAM)


shift = st.one_of(st.just(0.0), st.floats(0.01, 3000), st.floats(-3000, -0.01))


@given(st.lists(shift, min_size=17, max_size=17), st.lists(st.integers(0, 1), min_size=17, max_size=17))
def test_error_non_negative_and_zero_iff_exact(offsets, mask):
    rng = np.random.default_rng(0)
    rel, root, obs = _frame(rng)
    obs = obs.copy()
    obs[:, 0] += offsets
    err = frame_projection_error(rel, root, obs, np.array(mask), CAM)
    assert err >= 0
    moved = (np.array(offsets) != 0) & (np.array(mask) == 0)
    assert (err == pytest.approx(0, abs=1e-12)) == (not moved.any())


# --- camera file ----------------------------------------------------------

@given(st.floats(1e-3, 1e5), finite, finite)
def test_camera_file_round_trip(tmp_path_factory, f, cx, cy):
    path = tmp_path_factory.mktemp("cam") / "cam.json"
    cam = CameraIntrinsics(f, cx, cy, 1920, 1080)
    save_camera(path, cam)
    assert load_camera(path) == cam


def test_camera_file_rejects_other_documents(tmp_path):
    (tmp_path / "c.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_camera(tmp_path / "c.json")
