"""Coordinate conventions, boundary-biased sampling, labeled points, point cache."""

import numpy as np
import pytest

from baenet.errors import ContractError, FormatError, ParameterError
from baenet.sampling import (boundary_cells, denormalize_coords, grid_coords,
                             labeled_points_from_gt, normalize_coords, read_points,
                             sample_points, write_points)
from baenet.shapes import DatasetSpec, RasterShape, gen_elements, gen_tables3d


class TestCoords:
    def test_center_cell_formula(self):
        c = normalize_coords(np.array([[31]]), (64,))
        assert c[0, 0] == np.float32(31.5 / 64 - 0.5) == np.float32(-0.0078125)

    def test_first_cell_formula(self):
        c = normalize_coords(np.array([[0]]), (64,))
        assert c[0, 0] == np.float32(-0.4921875)

    def test_round_trip_32_cubed(self):
        dims = (32, 32, 32)
        idx = np.indices(dims).reshape(3, -1).T
        coords = normalize_coords(idx, dims)
        back = denormalize_coords(coords, dims)
        assert np.array_equal(back, idx)

    def test_out_of_range(self):
        with pytest.raises(ParameterError):
            normalize_coords(np.array([[64]]), (64,))

    def test_grid_coords_c_order(self):
        g = grid_coords((2, 3))
        assert g.shape == (6, 2)
        assert np.array_equal(denormalize_coords(g, (2, 3))[:, 1], [0, 1, 2, 0, 1, 2])


class TestSamplePoints:
    def test_all_empty_shape(self):
        s = RasterShape((8, 8), np.zeros((8, 8), np.uint8))
        out = sample_points(s, 16, seed=0)
        assert np.all(out.values == 0.0)

    def test_full_grid_transcription(self):
        s = gen_elements(DatasetSpec("elements", count=1, seed=0))[0]
        out = sample_points(s, s.occupancy.size, seed=1)
        cells = denormalize_coords(out.coords, s.dims)
        looked_up = s.occupancy[tuple(cells.T)]
        assert np.array_equal(out.values.astype(np.uint8), looked_up)
        # without replacement at n == total -> every cell exactly once
        flat = cells[:, 0] * s.dims[1] + cells[:, 1]
        assert len(np.unique(flat)) == s.occupancy.size

    def test_values_match_grid_any_n(self):
        s = gen_elements(DatasetSpec("elements", count=1, seed=2))[0]
        for n in (17, 256, 1000):
            out = sample_points(s, n, seed=3)
            cells = denormalize_coords(out.coords, s.dims)
            assert np.array_equal(out.values.astype(np.uint8), s.occupancy[tuple(cells.T)])

    def test_boundary_cells_always_included(self):
        s = gen_elements(DatasetSpec("elements", count=1, seed=4))[0]
        b = boundary_cells(s.occupancy)
        out = sample_points(s, max(2048, b.size), seed=5)
        cells = denormalize_coords(out.coords, s.dims)
        flat = cells[:, 0] * s.dims[1] + cells[:, 1]
        assert np.isin(b, flat).all()

    def test_deterministic(self):
        s = gen_elements(DatasetSpec("elements", count=1, seed=6))[0]
        a = sample_points(s, 512, seed=7)
        b = sample_points(s, 512, seed=7)
        assert np.array_equal(a.coords, b.coords) and np.array_equal(a.values, b.values)
        c = sample_points(s, 512, seed=8)
        assert not np.array_equal(a.coords, c.coords)

    def test_3d_downsampled_to_32(self):
        spec = DatasetSpec("tables3d", count=1, seed=0, resolution=64)
        s = gen_tables3d(spec)[0]
        out = sample_points(s, 8192, seed=0)
        cells = denormalize_coords(out.coords, (32, 32, 32))
        assert cells.max() < 32

    def test_jitter_keeps_cell_values(self):
        s = gen_elements(DatasetSpec("elements", count=1, seed=9))[0]
        out = sample_points(s, 2048, seed=10, jitter=True)
        cells = denormalize_coords(out.coords, s.dims)
        assert np.array_equal(out.values.astype(np.uint8), s.occupancy[tuple(cells.T)])

    def test_n_too_large(self):
        s = gen_elements(DatasetSpec("elements", count=1, seed=0))[0]
        with pytest.raises(ParameterError):
            sample_points(s, s.occupancy.size + 1, seed=0)


class TestLabeledPoints:
    def test_one_hot(self):
        s = gen_elements(DatasetSpec("elements", count=1, seed=0))[0]
        lp = labeled_points_from_gt(s, 64, seed=0)
        assert lp.labels.shape == (64, 3)
        assert np.array_equal(lp.labels.sum(axis=1), np.ones(64, np.float32))

    def test_histogram_hypergeometric(self):
        s = gen_elements(DatasetSpec("elements", count=1, seed=1))[0]
        flat = s.gt_labels.reshape(-1)
        total = int(np.count_nonzero(flat))
        n = total // 2
        lp = labeled_points_from_gt(s, n, seed=2)
        counts = lp.labels.sum(axis=0)
        for m in range(3):
            k_m = int(np.sum(flat == m + 1))
            mean = n * k_m / total
            var = n * (k_m / total) * (1 - k_m / total) * (total - n) / (total - 1)
            assert abs(counts[m] - mean) <= 3 * np.sqrt(var) + 1

    def test_full_transcription(self):
        s = gen_elements(DatasetSpec("elements", count=1, seed=3))[0]
        occupied = int(np.count_nonzero(s.gt_labels))
        lp = labeled_points_from_gt(s, occupied, seed=4)
        cells = denormalize_coords(lp.coords, s.dims)
        got = lp.labels.argmax(axis=1) + 1
        assert np.array_equal(got.astype(np.uint8), s.gt_labels[tuple(cells.T)])

    def test_missing_gt_is_contract_error(self):
        s = RasterShape((8, 8), np.zeros((8, 8), np.uint8))
        with pytest.raises(ContractError):
            labeled_points_from_gt(s, 4, seed=0)


class TestPointCache:
    def test_round_trip_with_labels(self, tmp_path, rng):
        coords = rng.uniform(-0.5, 0.5, size=(32, 3)).astype(np.float32)
        values = np.ones(32, np.float32)
        labels = np.zeros((32, 4), np.float32)
        labels[np.arange(32), rng.integers(0, 4, 32)] = 1
        p = tmp_path / "pts.baepts"
        write_points(p, coords, values, labels)
        c, v, l = read_points(p)
        assert np.array_equal(c, coords) and np.array_equal(v, values) and np.array_equal(l, labels)

    def test_round_trip_plain(self, tmp_path, rng):
        coords = rng.uniform(-0.5, 0.5, size=(10, 2)).astype(np.float32)
        values = rng.integers(0, 2, 10).astype(np.float32)
        p = tmp_path / "pts.baepts"
        write_points(p, coords, values)
        c, v, l = read_points(p)
        assert l is None and np.array_equal(c, coords) and np.array_equal(v, values)

    def test_corrupt_header(self, tmp_path):
        p = tmp_path / "pts.baepts"
        p.write_bytes(b"BAEPTSX 4 2 0\nxxxx")
        with pytest.raises(FormatError):
            read_points(p)

    def test_wrong_length(self, tmp_path, rng):
        coords = rng.uniform(-0.5, 0.5, size=(10, 2)).astype(np.float32)
        p = tmp_path / "pts.baepts"
        write_points(p, coords, np.zeros(10, np.float32))
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(FormatError):
            read_points(p)
