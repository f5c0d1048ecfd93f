from __future__ import annotations

import math

import numpy as np
import pytest

from extruflow.gcode import parse_gcode
from extruflow.path import detect_corners, discretize, print_regions, turn_angles


def line(length, step):
    return discretize(np.array([[0.0, 0.0, 0.2], [length, 0.0, 0.2]]), step)


def test_forty_mm_line_even_split():
    dp = line(40.0, 0.1)
    assert dp.n_segments == 400
    assert np.allclose(dp.segment_lengths, 0.1, atol=1e-12)
    assert dp.interior_corners() == ()


def test_remainder_segment():
    dp = line(1.05, 0.5)
    assert dp.segment_lengths == pytest.approx([0.5, 0.5, 0.05])


def test_l_shape_single_corner():
    verts = np.array([[0, 0, 0], [10, 0, 0], [10, 10, 0]], float)
    dp = discretize(verts, 0.1)
    assert dp.interior_corners() == (100,)
    assert [s.length for s in dp.line_spans] == pytest.approx([10.0, 10.0])


def test_square_perimeter_corners():
    sq = np.array([[0, 0, 0], [10, 0, 0], [10, 10, 0], [0, 10, 0], [0, 0, 0]], float)
    idx = detect_corners(sq, 30.0)
    assert idx == [0, 1, 2, 3, 4]  # three turns plus the two seam endpoints


def test_collinear_vertices_not_corners():
    verts = np.array([[0, 0, 0], [1, 0, 0], [2.5, 0, 0], [7, 0, 0]], float)
    assert detect_corners(verts, 30.0) == [0, 3]


@pytest.mark.parametrize("threshold,expected", [(30.0, 1), (60.0, 0)])
def test_elbow_threshold(threshold, expected):
    t = math.radians(45.0)
    verts = np.array([[0, 0, 0], [10, 0, 0], [10 + 10 * math.cos(t), 10 * math.sin(t), 0]])
    assert turn_angles(verts) == pytest.approx([45.0])
    assert len(detect_corners(verts, threshold)) - 2 == expected


def test_corners_invariant_under_rigid_motion():
    rng = np.random.default_rng(5)
    verts = np.c_[rng.uniform(0, 50, (12, 2)), np.zeros(12)]
    c, s = math.cos(0.7), math.sin(0.7)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    moved = verts @ rot.T + np.array([13.0, -4.0, 0.2])
    assert detect_corners(verts, 30.0) == detect_corners(moved, 30.0)


def test_arc_length_preserved():
    rng = np.random.default_rng(9)
    verts = np.c_[np.cumsum(rng.uniform(0.05, 3, 30)), rng.uniform(-2, 2, 30), np.zeros(30)]
    dp = discretize(verts, 0.1)
    true = sum(math.dist(a, b) for a, b in zip(verts[:-1], verts[1:]))
    assert abs(dp.total_length - true) <= 1e-9 * dp.n_segments


def test_rediscretize_idempotent():
    verts = np.array([[0, 0, 0], [3.33, 0, 0], [3.33, 2.07, 0]], float)
    dp = discretize(verts, 0.1)
    again = discretize(dp, 0.1)
    assert np.allclose(again.points, dp.points, atol=1e-12)


def test_short_line_warns():
    dp = discretize(np.array([[0, 0, 0], [0.03, 0, 0], [0.03, 5, 0]], float), 0.1)
    assert any("shorter than the step" in w for w in dp.warnings)
    assert dp.segment_lengths[0] == pytest.approx(0.03)


def test_bad_step_and_threshold():
    with pytest.raises(ValueError):
        line(1.0, 0.0)
    with pytest.raises(ValueError):
        detect_corners(np.zeros((3, 3)), 0.0)


def test_z_move_and_travel_split_regions():
    text = "M83\nG1 X10 E0.3\nG1 X10 Y10 E0.3\nG1 Z0.4\nG1 X0 E0.3\nG0 X5 Y5\nG1 X6 E0.03\n"
    regions = print_regions(parse_gcode(text))
    assert [len(r.moves) for r in regions] == [2, 1, 1]


def test_toolpath_discretize_keeps_source_ratio():
    tp = parse_gcode("M83\nG1 X10 E0.3 F1800\nG1 X10 Y5 E0.25\n")
    dp = discretize(tp, 0.1)
    assert dp.source_ratio[:100] == pytest.approx(0.03)
    assert dp.source_ratio[100:] == pytest.approx(0.05)
    assert np.all(dp.feedrate == 1800.0)
