"""Octree layers, screening radii, and neighbor indexing."""

import math

import numpy as np
import pytest

from serbf.core import ErbfBasis, ErbfModel, SURFACE_LAYER
from serbf.spatial import (
    GridSamples,
    build_octree,
    build_screen_index,
    neighbors_within,
    octree_from_samples,
    screening_radius,
    support_pairs,
)
from scipy.spatial import cKDTree


def oracle_octree_points(points, max_depth):
    """Independent recursive reference: per depth, the set of corner
    points of all existing cells, where depth d+1 cells are the children
    of point-occupied depth d cells."""
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    extent = (hi - lo).max()
    size = extent * 1.10
    origin = (lo + hi) / 2.0 - size / 2.0

    corners_per_depth = []
    occupied = {(0, 0, 0)}
    for depth in range(1, max_depth + 1):
        cell = size / 2 ** (depth - 1)
        existing = (
            {(0, 0, 0)}
            if depth == 1
            else {
                (2 * c[0] + dx, 2 * c[1] + dy, 2 * c[2] + dz)
                for c in occupied
                for dx in (0, 1)
                for dy in (0, 1)
                for dz in (0, 1)
            }
        )
        corners = set()
        for c in existing:
            for dx in (0, 1):
                for dy in (0, 1):
                    for dz in (0, 1):
                        corners.add((c[0] + dx, c[1] + dy, c[2] + dz))
        corners_per_depth.append(
            {tuple(origin + cell * np.array(c)) for c in corners}
        )
        nxt = set()
        for p in points:
            idx = np.minimum(
                ((p - origin) // cell).astype(int), 2 ** (depth - 1) - 1
            )
            nxt.add(tuple(idx))
        occupied = {c for c in nxt if c in existing or depth == 1}
    return corners_per_depth, origin, size


class TestBuildOctree:
    def test_rejects_zero_extent(self):
        with pytest.raises(ValueError):
            build_octree(np.zeros((4, 3)), 3)

    def test_root_cube_padding_and_layer_one(self):
        """Layer 1 is the 8 corners of the 5%-per-side padded cube."""
        pts = np.array([[0.0, 0, 0], [1.0, 1, 1]])
        grid = build_octree(pts, 2)
        assert grid.size == pytest.approx(1.10)
        np.testing.assert_allclose(grid.origin, [-0.05, -0.05, -0.05])
        lay1 = grid.layers[0].points
        assert len(lay1) == 8
        want = {
            (x, y, z)
            for x in (-0.05, 1.05)
            for y in (-0.05, 1.05)
            for z in (-0.05, 1.05)
        }
        got = {tuple(np.round(p, 12)) for p in lay1}
        assert got == want

    def test_layer_two_completes_the_three_lattice(self):
        """All 8 root children exist, so layers 1+2 tile the 3x3x3 corner
        lattice with no duplicates."""
        pts = np.array([[0.0, 0, 0], [1.0, 1, 1]])
        grid = build_octree(pts, 2)
        assert len(grid.layers[1].points) == 27 - 8
        both = np.vstack([grid.layers[0].points, grid.layers[1].points])
        assert len(np.unique(np.round(both, 9), axis=0)) == 27

    def test_matches_recursive_oracle(self):
        rng = np.random.default_rng(21)
        pts = rng.uniform(-0.3, 0.7, (60, 3))
        depth = 4
        grid = build_octree(pts, depth)
        oracle_layers, origin, size = oracle_octree_points(pts, depth)
        np.testing.assert_allclose(grid.origin, origin, atol=1e-12)
        assert grid.size == pytest.approx(size)
        seen = set()
        for lay, want in zip(grid.layers, oracle_layers):
            got = {tuple(np.round(p, 9)) for p in lay.points}
            want = {tuple(np.round(np.array(c), 9)) for c in want}
            # The oracle keeps repeats across depths; the builder assigns
            # each lattice point to its shallowest layer only.
            assert got == want - seen
            seen |= want

    def test_layers_lie_on_their_lattice(self):
        rng = np.random.default_rng(22)
        pts = rng.normal(size=(40, 3))
        grid = build_octree(pts, 5)
        for lay in grid.layers:
            step = grid.spacing(lay.index)
            frac = (lay.points - grid.origin) / step
            np.testing.assert_allclose(frac, np.round(frac), atol=1e-9)

    def test_spacing_halves_per_layer(self):
        pts = np.array([[0.0, 0, 0], [1.0, 2, 0.5]])
        grid = build_octree(pts, 4)
        for i in range(1, 4):
            assert grid.spacing(i) == pytest.approx(2 * grid.spacing(i + 1))
        with pytest.raises(ValueError):
            grid.spacing(0)
        with pytest.raises(ValueError):
            grid.spacing(5)

    def test_deeper_layers_follow_the_points(self):
        """Fine layers only appear around occupied cells, so a surface
        cloud yields far fewer corners than the full lattice."""
        rng = np.random.default_rng(23)
        vec = rng.normal(size=(500, 3))
        vec /= np.linalg.norm(vec, axis=1, keepdims=True)
        grid = build_octree(0.5 * vec, 6)
        full = (2**5 + 1) ** 3
        assert sum(len(l.points) for l in grid.layers) < full / 2


class TestScreening:
    def test_radius_reference_value(self):
        basis = ErbfBasis(
            center=(0, 0, 0), axes=(2.0, 1.0, 0.5), angles=(0, 0, 0), weight=1.0
        )
        assert screening_radius(basis, 1e-6) == pytest.approx(
            7.4338443776996765, rel=1e-15
        )

    def test_radius_uses_smallest_axis(self):
        """The slowest-decaying direction bounds the support."""
        rng = np.random.default_rng(31)
        for _ in range(20):
            axes = tuple(rng.uniform(0.2, 4.0, 3))
            basis = ErbfBasis(center=(0, 0, 0), axes=axes, angles=(0, 0, 0), weight=1.0)
            r = screening_radius(basis, 1e-7)
            assert r == pytest.approx(math.sqrt(-math.log(1e-7)) / min(axes), rel=1e-12)

    def test_kernel_below_epsilon_outside_radius(self):
        rng = np.random.default_rng(32)
        from serbf.core import erbf_eval

        for _ in range(20):
            basis = ErbfBasis(
                center=tuple(rng.uniform(-1, 1, 3)),
                axes=tuple(rng.uniform(0.3, 3, 3)),
                angles=tuple(rng.uniform(-np.pi, np.pi, 3)),
                weight=1.0,
            )
            r = screening_radius(basis, 1e-6)
            dirs = rng.normal(size=(30, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            outside = np.array(basis.center) + dirs * r * (1.0 + 1e-9)
            assert np.all(erbf_eval(outside, basis) <= 1e-6 * (1 + 1e-9))

    def test_rejects_bad_epsilon(self):
        basis = ErbfBasis(center=(0, 0, 0), axes=(1, 1, 1), angles=(0, 0, 0), weight=1.0)
        for eps in (0.0, 1.0, -0.1, 2.0):
            with pytest.raises(ValueError):
                screening_radius(basis, eps)


class TestScreenIndex:
    def test_exact_brute_force_membership(self):
        rng = np.random.default_rng(33)
        pts = rng.uniform(-2, 2, (300, 3))
        model = ErbfModel(
            centers=rng.uniform(-1, 1, (6, 3)),
            axes=rng.uniform(0.8, 2.5, (6, 3)),
            angles=rng.uniform(-np.pi, np.pi, (6, 3)),
            weights=rng.uniform(-1, 1, 6),
            norm_m=-1.0,
            norm_h=math.log(2.0),
        )
        screen = build_screen_index(pts, model, 1e-6)
        assert screen.point_count == 300
        for j in range(6):
            d = np.linalg.norm(pts - model.centers[j], axis=1)
            want = np.flatnonzero(d <= screen.radii[j])
            np.testing.assert_array_equal(screen.neighbors[j], want)

    def test_boundary_point_included(self):
        r = screening_radius(
            ErbfBasis(center=(0, 0, 0), axes=(1, 1, 1), angles=(0, 0, 0), weight=1.0),
            1e-6,
        )
        pts = np.array([[r, 0.0, 0.0], [r + 1e-9, 0.0, 0.0]])
        model = ErbfModel(
            centers=np.zeros((1, 3)),
            axes=np.ones((1, 3)),
            angles=np.zeros((1, 3)),
            weights=np.ones(1),
            norm_m=-1.0,
            norm_h=math.log(2.0),
        )
        screen = build_screen_index(pts, model, 1e-6)
        np.testing.assert_array_equal(screen.neighbors[0], [0])

    def test_support_pairs_sign_agnostic_in_axes(self):
        """Axis scales enter squared, so sign flips cannot change pairs."""
        rng = np.random.default_rng(34)
        pts = rng.uniform(-1, 1, (100, 3))
        tree = cKDTree(pts)
        centers = rng.uniform(-1, 1, (4, 3))
        axes = rng.uniform(0.5, 2, (4, 3))
        flips = axes * np.where(rng.random((4, 3)) < 0.5, -1.0, 1.0)
        a = support_pairs(tree, centers, axes, 1e-6)
        b = support_pairs(tree, centers, flips, 1e-6)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_support_pairs_basis_major_and_sorted(self):
        rng = np.random.default_rng(35)
        pts = rng.uniform(-1, 1, (80, 3))
        tree = cKDTree(pts)
        centers = rng.uniform(-1, 1, (5, 3))
        axes = rng.uniform(0.6, 2, (5, 3))
        pair_pt, pair_basis = support_pairs(tree, centers, axes, 1e-6)
        assert np.all(np.diff(pair_basis) >= 0)
        for j in range(5):
            rows = pair_pt[pair_basis == j]
            assert np.all(np.diff(rows) > 0)


class TestNeighborsWithin:
    def test_brute_force_match(self):
        rng = np.random.default_rng(36)
        pts = rng.uniform(-1, 1, (120, 3))
        q = rng.uniform(-1, 1, 3)
        got = neighbors_within(pts, q, 0.7)
        want = np.flatnonzero(np.linalg.norm(pts - q, axis=1) <= 0.7)
        np.testing.assert_array_equal(got, want)

    def test_rejects_negative_radius(self):
        with pytest.raises(ValueError):
            neighbors_within(np.zeros((3, 3)), np.zeros(3), -1.0)


class TestOctreeRoundTrip:
    def test_samples_round_trip(self):
        rng = np.random.default_rng(37)
        vec = rng.normal(size=(200, 3))
        vec /= np.linalg.norm(vec, axis=1, keepdims=True)
        surface = 0.4 * vec
        grid = build_octree(surface, 4)
        for lay in grid.layers:
            lay.sdf = np.linalg.norm(lay.points, axis=1) - 0.4
        samples = GridSamples.from_octree(grid, surface)
        assert samples.max_layer == 4
        assert np.sum(samples.surface_mask) == 200

        rebuilt, surf = octree_from_samples(samples)
        assert rebuilt.max_depth == 4
        assert rebuilt.size == pytest.approx(grid.size, rel=1e-12)
        np.testing.assert_allclose(rebuilt.origin, grid.origin, atol=1e-12)
        np.testing.assert_array_equal(surf, surface)
        for a, b in zip(rebuilt.layers, grid.layers):
            assert a.index == b.index
            np.testing.assert_array_equal(a.points, b.points)
            np.testing.assert_array_equal(a.sdf, b.sdf)

    def test_rejects_missing_layer_one(self):
        samples = GridSamples(
            points=np.zeros((2, 3)),
            sdf=np.array([-0.1, 0.0]),
            layer=np.array([2, SURFACE_LAYER]),
        )
        with pytest.raises(ValueError):
            octree_from_samples(samples)
