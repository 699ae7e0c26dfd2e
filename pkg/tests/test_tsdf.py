import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hoshape.mesh import box, icosphere, read_obj, write_obj
from hoshape.tsdf import (
    GeometryWarning,
    GridSpec,
    PatchSpec,
    TsdfGrid,
    assemble_from_patches,
    extract_mesh,
    load_tsdf,
    sample_tsdf_from_mesh,
    save_tsdf,
    split_into_patches,
)


def sphere_grid(spec, radius, center=(0.0, 0.0, 0.0)):
    return TsdfGrid.from_sdf(spec, lambda p: np.linalg.norm(p - np.asarray(center), axis=1) - radius)


def test_gridspec_invariants():
    with pytest.raises(ValueError):
        GridSpec(32, 0.2, 0.01)  # truncation below voxel size 0.0125
    with pytest.raises(ValueError):
        GridSpec(32, -1.0, 0.1)
    spec = GridSpec()
    assert spec.resolution == 128
    assert spec.origin == (-0.2, -0.2, -0.2)
    assert spec.voxel_size == pytest.approx(0.4 / 128)


def test_clamp_invariant():
    spec = GridSpec(16, 0.2, 0.05)
    g = TsdfGrid(spec, np.random.default_rng(0).normal(scale=1.0, size=(16, 16, 16)))
    assert np.abs(g.values).max() <= spec.truncation


class TestSampleFromMesh:
    def test_sphere_center_is_clamped_inside(self):
        spec = GridSpec(32, 0.2, 0.05)
        g = sample_tsdf_from_mesh(icosphere(0.1, 3), spec)
        # centre voxels sit 0.1 m deep, beyond the truncation
        mid = g.values[15:17, 15:17, 15:17]
        assert np.all(mid == np.float32(-0.05))

    def test_far_exterior_is_plus_truncation(self):
        spec = GridSpec(32, 0.2, 0.05)
        g = sample_tsdf_from_mesh(icosphere(0.05, 3), spec)
        c = spec.voxel_centers()
        far = np.linalg.norm(c, axis=-1) > 0.05 + 0.05 + 1e-3
        assert np.all(g.values[far] == np.float32(0.05))

    def test_value_near_offset_point(self):
        spec = GridSpec(64, 0.2, 0.05)
        g = sample_tsdf_from_mesh(icosphere(0.06, 3), spec)
        c = spec.voxel_centers()
        idx = np.unravel_index(np.argmin(np.linalg.norm(c - [0.07, 0, 0], axis=-1)), c.shape[:3])
        assert abs(g.values[idx] - 0.01) < spec.voxel_size
        # analytic oracle at the actual voxel centre, facet error of the icosphere < 0.5 mm
        expected = np.linalg.norm(c[idx]) - 0.06
        assert abs(g.values[idx] - expected) < 5e-4

    def test_sign_exhaustive_box(self):
        spec = GridSpec(32, 0.2, 0.05)
        h = np.array([0.06, 0.045, 0.07])
        g = sample_tsdf_from_mesh(box(h), spec)
        c = spec.voxel_centers()
        q = np.abs(c) - h
        sdf = np.linalg.norm(np.maximum(q, 0), axis=-1) + np.minimum(q.max(-1), 0)
        inside = sdf < -1e-9
        assert np.all(g.values[inside] < 0)
        assert np.all(g.values[sdf > spec.truncation] == np.float32(spec.truncation))
        np.testing.assert_allclose(g.values, np.clip(sdf, -0.05, 0.05), atol=1e-6)

    def test_empty_mesh_errors(self):
        from hoshape.mesh import Mesh

        with pytest.raises(ValueError, match="empty geometry"):
            sample_tsdf_from_mesh(Mesh(), GridSpec(16, 0.2, 0.05))

    def test_mesh_outside_cube_warns(self):
        spec = GridSpec(16, 0.2, 0.05)
        with warnings.catch_warnings(record=True) as rec:
            warnings.simplefilter("always")
            g = sample_tsdf_from_mesh(icosphere(0.02, 1, center=(1.0, 1.0, 1.0)), spec)
        assert any(issubclass(w.category, GeometryWarning) for w in rec)
        assert "outside_cube" in g.flags
        assert np.all(g.values == np.float32(0.05))


class TestPatches:
    def test_default_count(self):
        spec, pspec = GridSpec(), PatchSpec()
        g = TsdfGrid.empty(spec)
        patches = split_into_patches(g, pspec)
        assert patches.shape == (512, 16, 16, 16)

    def test_small_count(self):
        spec, pspec = GridSpec(32, 0.2, 0.05), PatchSpec(4, 8)
        assert split_into_patches(TsdfGrid.empty(spec), pspec).shape == (64, 8, 8, 8)

    def test_patch_contents_row_major(self):
        spec, pspec = GridSpec(32, 0.2, 0.05), PatchSpec(4, 8)
        vals = np.random.default_rng(1).uniform(-0.05, 0.05, size=(32, 32, 32))
        patches = split_into_patches(TsdfGrid(spec, vals), pspec)
        i, j, k = 1, 2, 3
        np.testing.assert_array_equal(patches[(i * 4 + j) * 4 + k], np.float32(vals[8:16, 16:24, 24:32]))

    def test_divisibility_error(self):
        with pytest.raises(ValueError):
            split_into_patches(TsdfGrid.empty(GridSpec(32, 0.2, 0.05)), PatchSpec(8, 8))

    def test_wrong_count_errors(self):
        spec, pspec = GridSpec(), PatchSpec()
        with pytest.raises(ValueError):
            assemble_from_patches(np.zeros((511, 16, 16, 16)), pspec, spec)

    def test_permuted_order_changes_grid(self):
        spec, pspec = GridSpec(32, 0.2, 0.05), PatchSpec(4, 8)
        g = sphere_grid(spec, 0.08, (0.03, 0.0, 0.0))
        patches = split_into_patches(g, pspec)
        perm = np.random.default_rng(0).permutation(len(patches))
        back = assemble_from_patches(patches[perm], pspec, spec)
        assert not np.array_equal(back.values, g.values)

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(1, 4), r=st.sampled_from([2, 4, 8]), seed=st.integers(0, 2 ** 31 - 1))
    def test_round_trip(self, n, r, seed):
        res = n * r
        spec = GridSpec(res, 0.2, 0.5)
        vals = np.random.default_rng(seed).uniform(-0.5, 0.5, size=(res, res, res))
        g = TsdfGrid(spec, vals)
        back = assemble_from_patches(split_into_patches(g, PatchSpec(n, r)), PatchSpec(n, r), spec)
        assert np.array_equal(back.values, g.values)


class TestExtractMesh:
    def test_all_positive_is_empty(self):
        assert extract_mesh(TsdfGrid.empty(GridSpec(16, 0.2, 0.05))).is_empty

    def test_sphere_radius_and_closed(self):
        spec = GridSpec(128, 0.2, 0.05)
        m = extract_mesh(sphere_grid(spec, 0.1))
        radii = np.linalg.norm(m.vertices, axis=1)
        assert np.all(np.abs(radii - 0.1) <= 1.5 * spec.voxel_size)
        assert m.is_closed()
        assert m.signed_volume() > 0  # outward winding

    def test_negated_grid_flips_orientation(self):
        spec = GridSpec(32, 0.2, 0.05)
        g = sphere_grid(spec, 0.1)
        m = extract_mesh(g)
        neg = extract_mesh(TsdfGrid(spec, -g.values))
        np.testing.assert_allclose(np.sort(neg.vertices, axis=0), np.sort(m.vertices, axis=0), atol=1e-9)
        assert neg.signed_volume() == pytest.approx(-m.signed_volume(), rel=1e-9)

    def test_vertices_in_canonical_metres(self):
        spec = GridSpec(32, 0.2, 0.05, origin=(1.0, 2.0, 3.0))
        g = sphere_grid(spec, 0.08, center=spec.center)
        m = extract_mesh(g)
        assert np.all(np.abs(np.linalg.norm(m.vertices - spec.center, axis=1) - 0.08) < 1.5 * spec.voxel_size)


def test_tsdf_file_round_trip(tmp_path):
    spec = GridSpec(16, 0.2, 0.05)
    g = sphere_grid(spec, 0.1)
    save_tsdf(g, tmp_path / "a.tsdf")
    back = load_tsdf(tmp_path / "a.tsdf")
    assert back.spec == spec
    assert np.array_equal(back.values, g.values)
    raw = (tmp_path / "a.tsdf").read_bytes()
    header = raw[:raw.index(b"\n")].decode()
    assert '"order": "row-major z-fastest"' in header
    # z fastest: the second float is voxel (0, 0, 1)
    first = np.frombuffer(raw[raw.index(b"\n") + 1:][:8], dtype="<f4")
    assert first[1] == g.values[0, 0, 1]


def test_obj_round_trip(tmp_path):
    m = icosphere(0.1, 1)
    write_obj(m, tmp_path / "s.obj")
    back = read_obj(tmp_path / "s.obj")
    np.testing.assert_allclose(back.vertices, m.vertices, atol=1e-8)
    np.testing.assert_array_equal(back.triangles, m.triangles)
