"""Generators: determinism, geometry invariants, placement statistics, file I/O."""

import numpy as np
import pytest

from baenet.errors import FormatError, ParameterError
from baenet.shapes import (DatasetSpec, RasterShape, downsample_occupancy, gen_elements,
                           gen_tables3d, gen_triple_rings, generate_dataset, read_raster,
                           write_raster, RING_RADII)


def dataset_equal(a, b):
    return all(
        np.array_equal(x.occupancy, y.occupancy) and np.array_equal(x.gt_labels, y.gt_labels)
        for x, y in zip(a, b)
    )


class TestElements:
    def test_deterministic(self):
        spec = DatasetSpec("elements", count=8, seed=7)
        assert dataset_equal(gen_elements(spec), gen_elements(spec))

    def test_three_labels_and_validity(self):
        for s in gen_elements(DatasetSpec("elements", count=16, seed=3)):
            s.validate()
            assert sorted(np.unique(s.gt_labels[s.gt_labels > 0])) == [1, 2, 3]

    def test_triangle_and_rhombus_on_midlines(self):
        for s in gen_elements(DatasetSpec("elements", count=8, seed=1)):
            assert s.params["triangle"][1] == 32
            assert s.params["rhombus"][0] == 32

    def test_cross_placement_uniform(self):
        # chi-square over 8 bins at p > 0.001 (df=7 critical value 24.32)
        shapes = gen_elements(DatasetSpec("elements", count=10_000, seed=11))
        xs = np.array([s.params["cross"][0] for s in shapes])
        assert xs.min() >= 9 and xs.max() <= 54
        # centers are the 46 integers 9..54; bin edges on integer boundaries
        edges = np.array([9, 15, 21, 27, 33, 39, 45, 50, 55])
        counts, _ = np.histogram(xs, bins=edges)
        sizes = np.diff(edges)  # integers per bin: 6,6,6,6,6,6,5,5
        expected = len(xs) * sizes / 46
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        assert chi2 < 24.32

    def test_cross_prob_option(self):
        spec = DatasetSpec("elements", count=200, seed=5, options={"cross_prob": 0.2})
        shapes = gen_elements(spec)
        frac = np.mean(["cross" in s.params for s in shapes])
        assert 0.1 < frac < 0.3
        for s in shapes:
            s.validate()
            labels = set(np.unique(s.gt_labels[s.gt_labels > 0]).tolist())
            assert labels == {1, 2, 3} if "cross" in s.params else labels == {2, 3}

    def test_too_small_resolution(self):
        with pytest.raises(ParameterError):
            gen_elements(DatasetSpec("elements", count=1, seed=0, resolution=16))


class TestTripleRings:
    def test_deterministic(self):
        spec = DatasetSpec("triple_rings", count=4, seed=9)
        assert dataset_equal(gen_triple_rings(spec), gen_triple_rings(spec))

    def test_ring_areas_match_annulus(self):
        shapes = gen_triple_rings(DatasetSpec("triple_rings", count=10, seed=2))
        for s in shapes:
            s.validate()
            for label, (r_in, r_out) in enumerate(RING_RADII, start=1):
                analytic = np.pi * (r_out**2 - r_in**2)
                count = int(np.sum(s.gt_labels == label))
                # overlapped cells carry the higher label; tolerate that on top
                # of the lattice-vs-continuum deviation
                assert count <= analytic * 1.15
                if label == 3:  # largest ring is never overwritten
                    assert count >= analytic * 0.85

    def test_occupancy_is_union(self):
        for s in gen_triple_rings(DatasetSpec("triple_rings", count=6, seed=4)):
            assert np.array_equal(s.occupancy == 1, s.gt_labels > 0)


class TestTables3d:
    def test_two_labels(self):
        for s in gen_tables3d(DatasetSpec("tables3d", count=12, seed=6)):
            s.validate()
            assert sorted(np.unique(s.gt_labels[s.gt_labels > 0])) == [1, 2]

    def test_legs_below_top(self):
        for s in gen_tables3d(DatasetSpec("tables3d", count=12, seed=8)):
            z1 = s.params["top"][4]
            legs_z = np.nonzero(s.gt_labels == 2)[2]
            assert legs_z.max() < z1

    def test_counting_oracle(self):
        for s in gen_tables3d(DatasetSpec("tables3d", count=12, seed=10)):
            cx, cy, ax, ay, z1, t = s.params["top"]
            w, leg_h = s.params["leg"]
            top_vol = (2 * ax + 1) * (2 * ay + 1) * t
            legs_vol = 4 * w * w * leg_h
            assert int(s.occupancy.sum()) == top_vol + legs_vol

    def test_resolutions(self):
        for res in (16, 32, 64):
            s = gen_tables3d(DatasetSpec("tables3d", count=1, seed=0, resolution=res))[0]
            s.validate()
        with pytest.raises(ParameterError):
            gen_tables3d(DatasetSpec("tables3d", count=1, seed=0, resolution=48))


class TestDownsample:
    def test_max_pool(self):
        occ = np.zeros((4, 4, 4), np.uint8)
        occ[0, 0, 1] = 1
        out = downsample_occupancy(occ, 2)
        assert out.shape == (2, 2, 2)
        assert out[0, 0, 0] == 1 and out.sum() == 1


class TestRasterIO:
    def test_round_trip_2d(self, tmp_path):
        s = gen_elements(DatasetSpec("elements", count=1, seed=0))[0]
        p = tmp_path / "s.baevox"
        write_raster(s, p)
        r = read_raster(p)
        assert r.dims == s.dims
        assert np.array_equal(r.occupancy, s.occupancy)
        assert np.array_equal(r.gt_labels, s.gt_labels)

    def test_round_trip_3d_unlabeled(self, tmp_path):
        s = gen_tables3d(DatasetSpec("tables3d", count=1, seed=1))[0]
        bare = RasterShape(s.dims, s.occupancy, None, {}, "tables3d", 0)
        p = tmp_path / "bare.baevox"
        write_raster(bare, p)
        r = read_raster(p)
        assert r.gt_labels is None
        assert np.array_equal(r.occupancy, s.occupancy)

    def test_bad_magic(self, tmp_path):
        s = gen_elements(DatasetSpec("elements", count=1, seed=0))[0]
        p = tmp_path / "s.baevox"
        write_raster(s, p)
        blob = bytearray(p.read_bytes())
        blob[0] = ord("X")
        p.write_bytes(bytes(blob))
        with pytest.raises(FormatError) as err:
            read_raster(p)
        assert err.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        s = gen_elements(DatasetSpec("elements", count=1, seed=0))[0]
        p = tmp_path / "s.baevox"
        write_raster(s, p)
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(FormatError):
            read_raster(p)

    def test_label_inconsistency_offset(self, tmp_path):
        s = gen_elements(DatasetSpec("elements", count=1, seed=0))[0]
        p = tmp_path / "s.baevox"
        write_raster(s, p)
        blob = bytearray(p.read_bytes())
        header_len = blob.index(b"\n") + 1
        # find an empty cell and give it a label
        occ = s.occupancy.reshape(-1)
        victim = int(np.flatnonzero(occ == 0)[0])
        blob[header_len + occ.size + victim] = 2
        p.write_bytes(bytes(blob))
        with pytest.raises(FormatError) as err:
            read_raster(p)
        assert err.value.offset == header_len + occ.size + victim

    def test_golden_elements_seed0(self, tmp_path):
        import pathlib

        golden = pathlib.Path(__file__).parent / "golden" / "elements_seed0.baevox"
        s = gen_elements(DatasetSpec("elements", count=1, seed=0))[0]
        p = tmp_path / "regen.baevox"
        write_raster(s, p)
        assert p.read_bytes() == golden.read_bytes()


def test_generate_dataset_dispatch():
    shapes = generate_dataset(DatasetSpec("elements", count=2, seed=0))
    assert len(shapes) == 2 and shapes[0].category == "elements"
    with pytest.raises(ParameterError):
        DatasetSpec("unknown", count=1)
