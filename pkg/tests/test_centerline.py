import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from itpnp.centerline import (
    Centerline2D,
    Centerline3D,
    apply_precalibration,
    build_neighbor_sets,
    dumps_centerline,
    find_correspondences,
    load_centerline,
    load_centerline2d,
    load_centerline3d,
    save_centerline,
)
from itpnp.errors import EmptyCenterline, ParseError
from itpnp.geometry import RigidTransform, se3_exp


def doc3(points, polylines=None, **extra):
    d = {"dim": 3, "unit": "mm", "points": points}
    if polylines is not None:
        d["polylines"] = polylines
    d.update(extra)
    return json.dumps(d).encode()


def scan(points, queries, k, radius=np.inf):
    """Exhaustive (distance, index) ordered neighbours."""
    out_d, out_i = [], []
    for q in queries:
        d = np.sqrt(((points - q) ** 2).sum(axis=1))
        order = sorted((dist, j) for j, dist in enumerate(d) if dist <= radius)[:k]
        out_d.append([x for x, _ in order] + [np.inf] * (k - len(order)))
        out_i.append([j for _, j in order] + [-1] * (k - len(order)))
    return np.array(out_d), np.array(out_i)


class TestLoad:
    def test_three_point_document(self):
        cl = load_centerline3d(doc3([[0, 0, 0], [1, 2, 3], [2, 4, 9]], [[0, 1, 2]]))
        np.testing.assert_allclose(cl.centroid, [1, 2, 4], atol=1e-12)
        assert len(cl) == 3

    def test_index_out_of_range(self):
        with pytest.raises(ParseError):
            load_centerline3d(doc3([[0, 0, 0], [1, 0, 0]], [[0, 5]]))

    def test_empty(self):
        with pytest.raises(EmptyCenterline):
            load_centerline3d(doc3([]))

    def test_syntax_error_reports_line(self):
        with pytest.raises(ParseError) as info:
            load_centerline3d(b'{\n"dim": 3,\n"points": [1,\n')
        assert info.value.line is not None

    def test_schema_error_reports_field(self):
        with pytest.raises(ParseError) as info:
            load_centerline3d(doc3([[0, 0, "x"]]))
        assert info.value.field == "points[0][2]"

    def test_unknown_key_rejected(self):
        with pytest.raises(ParseError):
            load_centerline3d(doc3([[0, 0, 0]], colour="red"))

    def test_wrong_arity(self):
        with pytest.raises(ParseError) as info:
            load_centerline3d(doc3([[0, 0, 0], [1, 2]]))
        assert info.value.field == "points[1]"

    def test_bad_utf8(self):
        with pytest.raises(ParseError):
            load_centerline3d(b"\xff\xfe{}")

    def test_two_d_needs_spacing(self):
        with pytest.raises(ParseError):
            load_centerline2d(json.dumps({"dim": 2, "unit": "px", "points": [[1, 2]]}))

    def test_dimension_mismatch(self):
        with pytest.raises(ParseError):
            load_centerline2d(doc3([[0, 0, 0]]))

    def test_precalib_parsed(self):
        m = np.eye(4)
        m[:3, 3] = [1, 2, 3]
        cl = load_centerline3d(doc3([[0, 0, 0]], precalib=m.reshape(-1).tolist()))
        np.testing.assert_array_equal(cl.precalib.translation, [1, 2, 3])


class TestRoundTrip:
    def test_bit_exact_three_d(self, tmp_path):
        rng = np.random.default_rng(0)
        pts = rng.normal(scale=1e3, size=(200, 3)) * 10.0 ** rng.integers(-8, 8, size=(200, 1))
        cl = Centerline3D(pts, (np.arange(100), np.arange(100, 200)),
                          se3_exp(rng.normal(size=6)))
        path = tmp_path / "c.json"
        save_centerline(cl, str(path))
        back = load_centerline(str(path))
        assert np.array_equal(back.points, cl.points)
        assert np.array_equal(back.precalib.as_matrix(), cl.precalib.as_matrix())
        assert all(np.array_equal(a, b) for a, b in zip(back.polylines, cl.polylines))

    @given(st.lists(st.tuples(*[st.floats(allow_nan=False, allow_infinity=False, width=64)] * 2),
                    min_size=1, max_size=20))
    def test_bit_exact_two_d(self, pts):
        cl = Centerline2D(np.array(pts, dtype=float), 0.3)
        back = load_centerline2d(io.BytesIO(dumps_centerline(cl).encode()))
        assert np.array_equal(back.points, cl.points)
        assert back.pixel_spacing == 0.3

    def test_non_finite_refused(self):
        with pytest.raises(ValueError):
            dumps_centerline(Centerline2D(np.array([[np.inf, 0.0]]), 0.3))


class TestNeighbourSets:
    def test_two_point_line(self):
        cl = Centerline3D(np.array([[0, 0, 0], [1, 0, 0.0]]), (np.array([0, 1]),))
        assert cl.neighbor_sets[0].size == 0
        assert cl.neighbor_sets[1].size == 0

    def test_grid_axis_neighbours(self):
        g = np.array([[x, y, z] for x in range(3) for y in range(3) for z in range(3)], dtype=float)
        line = np.arange(27)
        sets = build_neighbor_sets(Centerline3D(g, (line,)), 6)
        centre = 13
        axis = {j for j in range(27) if np.isclose(np.abs(g[j] - g[centre]).sum(), 1.0)}
        chain = {12, 14}
        assert axis - chain <= set(sets[centre].tolist())
        assert centre not in set(sets[centre].tolist())

    def test_symmetric_and_irreflexive(self):
        rng = np.random.default_rng(1)
        for trial in range(100):
            n = int(rng.integers(2, 60))
            pts = rng.normal(size=(n, 3))
            cut = int(rng.integers(1, n))
            cl = Centerline3D(pts, (np.arange(cut), np.arange(cut, n)), k_spatial=int(rng.integers(1, 8)))
            sets = [set(s.tolist()) for s in cl.neighbor_sets]
            for i, s in enumerate(sets):
                assert i not in s
                assert all(i in sets[j] for j in s)

    def test_excludes_chain_neighbours_and_matches_scan(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(40, 3))
        cl = Centerline3D(pts, (np.arange(40),), k_spatial=4)
        d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        expected = [set() for _ in range(40)]
        for i in range(40):
            order = [j for j in np.lexsort((np.arange(40), d[i])) if j != i][:4]
            for j in order:
                if abs(i - j) != 1:
                    expected[i].add(j)
                    expected[j].add(i)
        assert [set(s.tolist()) for s in cl.neighbor_sets] == expected

    def test_polylines_must_share_only_endpoints(self):
        pts = np.zeros((5, 3))
        pts[:, 0] = np.arange(5)
        Centerline3D(pts, (np.array([0, 1, 2]), np.array([2, 3, 4])))
        with pytest.raises(ParseError):
            Centerline3D(pts, (np.array([0, 1, 2]), np.array([3, 1, 4])))


class TestCorrespondences:
    def test_coincident_point(self):
        tgt = Centerline2D(np.array([[0, 0], [5, 5], [9, 1.0]]))
        c = find_correspondences(np.array([[5, 5.0]]), tgt, k=1)
        assert c.tgt.tolist() == [1] and c.dist.tolist() == [0.0]

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(0, 100, size=(1000, 2))
        q = rng.uniform(-10, 110, size=(1000, 2))
        tgt = Centerline2D(pts)
        d, i = tgt.nearest(q, k=3)
        ed, ei = scan(pts, q, 3)
        assert np.array_equal(i, ei)
        assert np.array_equal(d, ed)
        c = find_correspondences(q, tgt, k=3)
        assert np.array_equal(c.tgt.reshape(-1, 3), ei)

    def test_ties_prefer_lower_index(self):
        pts = np.array([[1, 0], [-1, 0], [0, 1], [0, -1], [2, 0.0]])
        d, i = Centerline2D(pts).nearest(np.zeros((1, 2)), k=4)
        assert i.tolist() == [[0, 1, 2, 3]]
        d, i = Centerline2D(pts[::-1].copy()).nearest(np.zeros((1, 2)), k=2)
        assert i.tolist() == [[1, 2]]

    def test_radius_cutoff(self):
        tgt = Centerline2D(np.array([[10, 10], [20, 20.0]]))
        c = find_correspondences(np.array([[0, 0], [50, 50.0]]), tgt, k=2, radius=1.0)
        assert c.n_pairs == 0 and not c.matched.any()

    def test_radius_matches_scan(self):
        rng = np.random.default_rng(4)
        pts = rng.integers(0, 20, size=(300, 2)).astype(float)
        q = rng.integers(0, 20, size=(200, 2)) + rng.choice([0.0, 0.5], size=(200, 2))
        for r in (0.0, 1.0, 2.5, 7.0):
            d, i = Centerline2D(pts).nearest(q, k=5, radius=r)
            ed, ei = scan(pts, q, 5, r)
            assert np.array_equal(i, ei)

    def test_set_shape_and_order(self):
        rng = np.random.default_rng(5)
        tgt = Centerline2D(rng.uniform(0, 50, size=(80, 2)))
        c = find_correspondences(rng.uniform(0, 50, size=(40, 2)), tgt, k=4, radius=6.0)
        counts = np.diff(c.indptr)
        assert counts.max() <= 4
        for i in range(40):
            _, d = c.of(i)
            assert np.all(np.diff(d) >= 0)

    def test_invalid_projections_get_empty_sets(self):
        tgt = Centerline2D(np.array([[0, 0], [1, 1.0]]))
        c = find_correspondences(np.array([[0, 0], [np.nan, np.nan]]), tgt, k=2)
        assert c.matched.tolist() == [True, False]

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        tgt = Centerline2D(rng.uniform(0, 50, size=(500, 2)))
        q = rng.uniform(0, 50, size=(300, 2))
        a, b = find_correspondences(q, tgt, 3, 5.0), find_correspondences(q, tgt, 3, 5.0)
        assert np.array_equal(a.tgt, b.tgt) and np.array_equal(a.dist, b.dist)

    def test_rejects_bad_arguments(self):
        tgt = Centerline2D(np.array([[0, 0.0]]))
        with pytest.raises(ValueError):
            find_correspondences(np.zeros((0, 2)), tgt)
        with pytest.raises(ValueError):
            find_correspondences(np.zeros((1, 2)), tgt, k=0)


class TestPrecalibration:
    def test_identity_no_centre(self):
        pts = np.random.default_rng(7).normal(size=(10, 3))
        cl = Centerline3D(pts)
        np.testing.assert_array_equal(apply_precalibration(cl, center=np.zeros(3)), pts)

    def test_centred_output_has_zero_mean(self):
        cl = Centerline3D(np.random.default_rng(8).normal(loc=5, size=(50, 3)))
        assert np.abs(apply_precalibration(cl).mean(axis=0)).max() < 1e-12

    def test_dense_matrix_oracle(self):
        rng = np.random.default_rng(9)
        pts = rng.normal(scale=10, size=(30, 3))
        T = se3_exp(rng.normal(size=6))
        cl = Centerline3D(pts, precalib=T)
        M = T.as_matrix()
        homog = np.c_[pts, np.ones(30)] @ M.T
        moved = homog[:, :3]
        np.testing.assert_allclose(apply_precalibration(cl), moved - moved.mean(axis=0), atol=1e-10)
        np.testing.assert_allclose(apply_precalibration(cl, "before"),
                                   (np.c_[pts - pts.mean(axis=0), np.ones(30)] @ M.T)[:, :3], atol=1e-10)
        with pytest.raises(ValueError):
            apply_precalibration(cl, "sideways")

    def test_centroid_is_mean(self):
        pts = np.random.default_rng(10).normal(size=(17, 3))
        assert np.abs(Centerline3D(pts).centroid - pts.mean(axis=0)).max() < 1e-9

    def test_precalibrated_identity_transform(self):
        cl = Centerline3D(np.ones((3, 3)), precalib=RigidTransform.identity())
        assert np.array_equal(apply_precalibration(cl), np.zeros((3, 3)))
