import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from matplotlib.path import Path as MplPath

from drivecluster.data_model import Frame, LaneMap, Pose2D, Sequence
from drivecluster.render import (RasterConfig, SparseFrames, decompose_velocity, pixel_centers,
                                 rasterize_frame, render_sequence, render_sequence_sparse, to_ego_frame,
                                 world_to_pixel)
from conftest import make_agent, make_sequence

CFG = RasterConfig()


def test_config_validation():
    with pytest.raises(ValueError):
        RasterConfig(pixels=128)
    with pytest.raises(ValueError):
        RasterConfig(extent=0)
    assert CFG.resolution == pytest.approx(100 / 129)


def test_to_ego_frame_examples():
    np.testing.assert_allclose(to_ego_frame(Pose2D(0, 0, 0), (3, 4)), (3, 4))
    np.testing.assert_allclose(to_ego_frame(Pose2D(10, 5, math.pi / 2), (10, 15)), (10, 0), atol=1e-12)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-math.pi, math.pi))
def test_ego_position_is_origin(x, y, h):
    np.testing.assert_allclose(to_ego_frame(Pose2D(x, y, h), (x, y)), (0, 0), atol=1e-9)


@given(st.floats(-math.pi, math.pi), st.floats(-40, 40), st.floats(-40, 40))
def test_decompose_velocity_isometry(h, vx, vy):
    lon, lat = decompose_velocity(Pose2D(0, 0, h), (vx, vy))
    assert math.hypot(lon, lat) == pytest.approx(math.hypot(vx, vy), abs=1e-9)


def test_decompose_velocity_examples():
    assert decompose_velocity(Pose2D(0, 0, 0), (5, 0)) == (5, 0)
    lon, lat = decompose_velocity(Pose2D(0, 0, math.pi / 2), (5, 0))
    assert lon == pytest.approx(0, abs=1e-12) and lat == pytest.approx(-5)


def test_world_to_pixel_examples():
    assert world_to_pixel((0, 0), CFG) == (64, 64)
    assert world_to_pixel((49.9, 0), CFG) == (0, 64)
    assert world_to_pixel((60, 0), CFG) is None
    # left of the ego is toward column 0
    assert world_to_pixel((0, 10), CFG)[1] < 64


def test_pixel_centers_match_world_to_pixel():
    c = pixel_centers(CFG)
    for i in (0, 17, 64, 128):
        assert world_to_pixel((c[i], c[i]), CFG) == (i, i)


def test_empty_frame_half_speed():
    img = rasterize_frame(Frame(0.0, Pose2D(3, 4, 1.0), CFG.v_max / 2), None, CFG)
    assert img.shape == (4, 129, 129) and img.dtype == np.float32
    assert not img[1:].any()
    nz = np.argwhere(img[0])
    assert set(np.unique(img[0][img[0] != 0])) == {0.5}
    assert nz[:, 0].min() + nz[:, 0].max() == 128 and nz[:, 1].min() + nz[:, 1].max() == 128


def test_stationary_agent_same_support_as_moving():
    ego = Pose2D(0, 0, 0)
    still = rasterize_frame(Frame(0.0, ego, 1.0, (make_agent("a", 10, 0),)), None, CFG)
    fast = rasterize_frame(Frame(0.0, ego, 1.0, (make_agent("a", 10, 0, v=(CFG.v_max, 0)),)), None, CFG)
    assert not still[1:3].any()
    support = fast[1] != 0
    assert support.sum() > 0
    assert set(np.unique(fast[1][support])) == {1.0}
    assert not fast[2].any()


def _oracle_count(local_poly):
    c = pixel_centers(CFG)
    lon, lat = np.meshgrid(c, c, indexing="ij")
    return int(MplPath(local_poly).contains_points(np.stack([lon.ravel(), lat.ravel()], 1)).sum())


def test_agent_pixel_count_matches_point_in_polygon_scan():
    agent = make_agent("a", 10, 0, v=(CFG.v_max, 0))
    img = rasterize_frame(Frame(0.0, Pose2D(0, 0, 0), 1.0, (agent,)), None, CFG)
    assert int((img[1] != 0).sum()) == _oracle_count(np.array(agent.polygon))


def test_boundaries_are_binary_and_one_pixel_wide(straight_map):
    img = rasterize_frame(Frame(0.0, Pose2D(0, 0, 0), 1.0), straight_map, CFG)
    assert set(np.unique(img[3])) == {0.0, 1.0}
    # each horizontal-in-world line becomes one vertical column
    cols = np.flatnonzero(img[3].any(axis=0))
    assert len(cols) == 2
    assert all(img[3][:, c].all() for c in cols)


def test_out_of_view_content_is_clipped():
    far = rasterize_frame(Frame(0.0, Pose2D(0, 0, 0), 1.0, (make_agent("a", 300, 0, v=(5, 0)),)),
                          LaneMap(((( 300.0, 300.0), (400.0, 300.0)),)), CFG)
    assert not far[1:].any()


def test_render_sequence_length_and_constant_state():
    seq = Sequence("s", tuple(Frame(0.1 * k, Pose2D(1, 2, 0.3), 4.0, (make_agent("a", 10, 5, v=(2, 1)),))
                              for k in range(10)), "m")
    imgs = render_sequence(seq, None, CFG)
    assert len(imgs) == 10
    assert all(np.array_equal(imgs[0], im) for im in imgs)


def test_ego_footprint_constant_across_frames(small_synth):
    seq = small_synth.dataset.sequences[3]
    imgs = render_sequence(seq, small_synth.dataset.map_for(seq), CFG)
    ref = np.argwhere(imgs[0][0] != 0)
    for im, f in zip(imgs, seq.frames):
        if f.speed > 0:
            np.testing.assert_array_equal(np.argwhere(im[0] != 0), ref)


def test_sparse_frames_round_trip(small_synth):
    seq = small_synth.dataset.sequences[0]
    lane_map = small_synth.dataset.map_for(seq)
    dense = np.stack(render_sequence(seq, lane_map, CFG))
    sparse = render_sequence_sparse(seq, lane_map, CFG)
    assert len(sparse) == len(dense)
    np.testing.assert_array_equal(sparse.dense(), dense)
    np.testing.assert_array_equal(sparse.subset([4, 1]).dense(), dense[[4, 1]])
    np.testing.assert_array_equal(SparseFrames.from_dense(dense).dense([2]), dense[[2]])
