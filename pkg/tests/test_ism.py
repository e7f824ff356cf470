"""Inverse-sensor-model tests against dense segment sampling.

The reference for the traversal is dumb and slow: walk each segment at a
tenth of a cell and mark every cell a sample lands in.  Exact corner
crossings are enumerated separately with integer arithmetic so the tests
can tell legitimate supercover extras from actual bugs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import dogm.ism as ism
from dogm.grid import GridSpec, Pose


def _spec(n: int) -> GridSpec:
    return GridSpec(length_cells=n, width_cells=n, cell_length=0.15, cell_width=0.15)


def dense_free_cells(targets, center, L, W, step_cells=0.1):
    """Sample each center-to-target segment every ``step_cells`` and collect
    the cells hit, excluding both endpoint cells.

    At the default step this is the coarse reference (it can miss cells the
    segment barely clips); ``step_cells=0.002`` resolves every cell except
    the side cells of exact corner crossings.
    """
    free = np.zeros((L, W), dtype=bool)
    cx, cy = center
    for tx, ty in np.asarray(targets).reshape(-1, 2):
        dx, dy = tx - cx, ty - cy
        length = math.hypot(dx, dy)
        if length == 0.0:
            continue
        t = np.linspace(0.0, 1.0, int(math.ceil(length / step_cells)) + 1)
        jx = np.floor(cx + 0.5 + t * dx).astype(int)
        jy = np.floor(cy + 0.5 + t * dy).astype(int)
        keep = (
            ~((jx == cx) & (jy == cy))
            & ~((jx == tx) & (jy == ty))
            & (jx >= 0)
            & (jx < L)
            & (jy >= 0)
            & (jy < W)
        )
        free[jx[keep], jy[keep]] = True
    return free


def corner_adjacent_cells(targets, center, L, W):
    """Cells adjacent to an exact corner crossing of any segment (integer
    arithmetic, no floats)."""
    out = np.zeros((L, W), dtype=bool)
    cx, cy = center
    for tx, ty in np.asarray(targets).reshape(-1, 2):
        dx, dy = tx - cx, ty - cy
        mx, my = abs(dx), abs(dy)
        if mx == 0 or my == 0:
            continue
        g = math.gcd(mx, my)
        ax, ay = mx // g, my // g
        if ax % 2 == 0 or ay % 2 == 0:
            continue  # crossings can never coincide
        sgx, sgy = (1 if dx > 0 else -1), (1 if dy > 0 else -1)
        for i in range(mx):
            num = (2 * i + 1) * my
            if num % mx:
                continue
            q = num // mx
            if q % 2 == 0:
                continue
            j = (q - 1) // 2
            if not 0 <= j < my:
                continue
            X = cx + i + 1 if sgx > 0 else cx - i
            Y = cy + j + 1 if sgy > 0 else cy - j
            for a in (X - 1, X):
                for b in (Y - 1, Y):
                    if 0 <= a < L and 0 <= b < W:
                        out[a, b] = True
    return out


def reduced_components_both_odd(dx, dy):
    if dx == 0 or dy == 0:
        return False
    g = math.gcd(abs(dx), abs(dy))
    return (abs(dx) // g) % 2 == 1 and (abs(dy) // g) % 2 == 1


@dataclass
class FakeCloud:
    xyz: np.ndarray
    ground: np.ndarray


class TestSupercover:
    def test_axis_aligned_ray(self):
        spec = _spec(9)
        free = ism.supercover_free_cells(np.array([[8, 4]]), (4, 4), spec)
        expected = np.zeros((9, 9), dtype=bool)
        expected[5:8, 4] = True
        np.testing.assert_array_equal(free, expected)

    def test_pure_diagonal_marks_corner_side_cells(self):
        # from (0, 0) to (2, 2) the segment runs through the corners at
        # (1, 1) and (2, 2); each corner contributes its two side cells
        spec = _spec(5)
        free = ism.supercover_free_cells(np.array([[2, 2]]), (0, 0), spec)
        expected = np.zeros((5, 5), dtype=bool)
        for cell in [(1, 1), (1, 0), (0, 1), (2, 1), (1, 2)]:
            expected[cell] = True
        np.testing.assert_array_equal(free, expected)

    def test_zero_length_ray_marks_nothing(self):
        spec = _spec(5)
        free = ism.supercover_free_cells(np.array([[2, 2]]), (2, 2), spec)
        assert not free.any()

    def test_matches_dense_sampling_when_no_corner_is_crossed(self, rng):
        spec = _spec(41)
        center = (20, 20)
        targets = []
        while len(targets) < 60:
            t = rng.integers(0, 41, size=2)
            d = t - np.array(center)
            if (d == 0).all() or reduced_components_both_odd(*d):
                continue
            targets.append(t)
        targets = np.array(targets)
        free = ism.supercover_free_cells(targets, center, spec)
        expected = dense_free_cells(targets, center, 41, 41, step_cells=0.002)
        np.testing.assert_array_equal(free, expected)

    def test_corner_crossings_add_only_corner_adjacent_cells(self, rng):
        spec = _spec(41)
        center = (20, 20)
        targets = rng.integers(0, 41, size=(120, 2))
        free = ism.supercover_free_cells(targets, center, spec)
        dense = dense_free_cells(targets, center, 41, 41, step_cells=0.002)
        corner = corner_adjacent_cells(targets, center, 41, 41)
        # dense sampling only ever lands in cells the segment passes through
        assert not (dense & ~free).any()
        extra = free & ~dense
        assert extra.any()  # the seeded targets do cross corners
        assert not (extra & ~corner).any()

    @settings(max_examples=40, deadline=None)
    @given(
        tx=st.integers(min_value=0, max_value=30),
        ty=st.integers(min_value=0, max_value=30),
    )
    def test_single_ray_stays_in_bounding_box(self, tx, ty):
        spec = _spec(31)
        center = (15, 15)
        free = ism.supercover_free_cells(np.array([[tx, ty]]), center, spec)
        cells = np.argwhere(free)
        if len(cells) == 0:
            return
        lo = np.minimum(center, (tx, ty))
        hi = np.maximum(center, (tx, ty))
        assert (cells >= lo).all() and (cells <= hi).all()
        # a ray visits at least one cell per step of its longest axis
        cheb = max(abs(tx - 15), abs(ty - 15))
        assert len(cells) >= max(0, cheb - 1)


class TestRaycastMeasurement:
    def test_single_return_due_east(self):
        spec = _spec(9)
        grid = ism.raycast_measurement(np.array([[8, 4]]), spec)
        assert grid.states[8, 4] == ism.OCCUPIED
        assert (grid.states[5:8, 4] == ism.FREE).all()
        assert grid.states[4, 4] == ism.UNKNOWN
        assert (grid.states == ism.UNKNOWN).sum() == 81 - 4

    def test_occupied_beats_free_on_collinear_returns(self):
        spec = _spec(15)
        cells = np.array([[10, 7], [13, 7]])
        grid = ism.raycast_measurement(cells, spec)
        assert grid.states[10, 7] == ism.OCCUPIED
        assert grid.states[13, 7] == ism.OCCUPIED
        assert (grid.states[8:10, 7] == ism.FREE).all()
        assert (grid.states[11:13, 7] == ism.FREE).all()

    def test_empty_input_is_all_unknown(self):
        spec = _spec(7)
        grid = ism.raycast_measurement(np.empty((0, 2)), spec)
        assert (grid.states == ism.UNKNOWN).all()

    def test_duplicate_cells_processed_once(self):
        spec = _spec(9)
        once = ism.raycast_measurement(np.array([[8, 4]]), spec)
        thrice = ism.raycast_measurement(np.array([[8, 4]] * 3), spec)
        np.testing.assert_array_equal(once.states, thrice.states)

    def test_adding_a_return_never_unoccupies_a_cell(self, rng):
        spec = _spec(21)
        base = rng.integers(0, 21, size=(15, 2))
        extra = np.concatenate([base, rng.integers(0, 21, size=(1, 2))])
        a = ism.raycast_measurement(base, spec).states
        b = ism.raycast_measurement(extra, spec).states
        assert ((a == ism.OCCUPIED) <= (b == ism.OCCUPIED)).all()

    def test_probability_view(self):
        spec = _spec(9)
        grid = ism.raycast_measurement(np.array([[8, 4]]), spec)
        probs = grid.probabilities()
        assert probs[8, 4] == 1.0
        assert probs[6, 4] == 0.0
        assert probs[0, 0] == 0.5
        assert grid.observable().sum() == 4


class TestMeasurementGrid:
    def test_ground_removal_splits_by_flag(self):
        xyz = np.array([[1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
        flags = np.array([False, True, False])
        obstacles, ground = ism.remove_ground(xyz, flags)
        np.testing.assert_array_equal(obstacles, xyz[[0, 2]])
        np.testing.assert_array_equal(ground, xyz[[1]])
        with pytest.raises(ValueError):
            ism.remove_ground(xyz, flags[:2])

    def test_ground_returns_leave_cells_unknown(self):
        # an obstacle at 3 m east; a ground return at 5 m east is removed,
        # so its cell carries no evidence at all
        spec = _spec(81)
        cloud = FakeCloud(
            xyz=np.array([[3.0, 0.0, 0.5], [5.0, 0.0, -1.7]]),
            ground=np.array([False, True]),
        )
        pose = Pose(timestamp=0.0, x=0.0, y=0.0, yaw=0.0)
        grid = ism.measurement_grid(cloud, pose, spec)
        obstacle_cell = (40 + 20, 40)  # 3.0 / 0.15 = 20 cells east
        ground_cell = (40 + 33, 40)  # floor(5.0 / 0.15) = 33
        assert grid.states[obstacle_cell] == ism.OCCUPIED
        assert grid.states[ground_cell] == ism.UNKNOWN
        assert (grid.states[41:60, 40] == ism.FREE).all()

    def test_pose_rotation_applies_before_projection(self):
        spec = _spec(81)
        cloud = FakeCloud(
            xyz=np.array([[3.0, 0.0, 0.5]]), ground=np.array([False])
        )
        pose = Pose(timestamp=0.0, x=10.0, y=-2.0, yaw=math.pi / 2)
        grid = ism.measurement_grid(cloud, pose, spec)
        # +x in the vehicle frame points to +y after the quarter turn
        assert grid.states[40, 60] == ism.OCCUPIED

    def test_points_outside_grid_are_dropped(self):
        spec = _spec(9)
        cloud = FakeCloud(
            xyz=np.array([[50.0, 0.0, 0.5]]), ground=np.array([False])
        )
        pose = Pose(timestamp=0.0, x=0.0, y=0.0, yaw=0.0)
        grid = ism.measurement_grid(cloud, pose, spec)
        assert (grid.states == ism.UNKNOWN).all()
