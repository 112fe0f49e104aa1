"""Architecture wiring: shapes, parameter accounting, field grids, checkpoints."""

import numpy as np
import pytest

from baenet.autodiff import Tape
from baenet.errors import FormatError, ParameterError
from baenet.model import (BaeNet, DecoderConfig, EncoderConfig, build_preset,
                          decoder_param_count, interpolate_code, load_model, save_model)
from baenet.sampling import grid_coords


def tiny_net(seed=0, branches=3):
    enc = EncoderConfig((8, 8), code_dim=4, channels=[4, 8])
    dec = DecoderConfig(16, 8, branches)
    return BaeNet(enc, dec, seed=seed)


@pytest.fixture
def occ8(rng):
    return (rng.random((8, 8)) < 0.3).astype(np.uint8)


class TestEncoder:
    def test_deterministic(self, occ8):
        net = tiny_net()
        assert np.array_equal(net.feature_code(occ8), net.feature_code(occ8))

    def test_code_lengths_match_presets(self):
        assert build_preset("2d-toy").feature_code(np.zeros((64, 64))).shape == (16,)
        net3d = build_preset("3d-oneshot", resolution=16, branches=2)
        assert net3d.feature_code(np.zeros((16, 16, 16))).shape == (128,)

    def test_dim_mismatch(self, occ8):
        net = tiny_net()
        with pytest.raises(ParameterError):
            net.feature_code(np.zeros((16, 16)))

    def test_channel_schedule(self):
        enc = EncoderConfig((64, 64), 16)
        assert enc.channels == [32, 64, 128, 128, 128]
        enc = EncoderConfig((32, 32, 32), 128)
        assert enc.channels == [32, 64, 128, 128]
        with pytest.raises(ParameterError):
            EncoderConfig((48, 48), 16)


class TestDecoder:
    def test_outputs_in_unit_interval(self, rng, occ8):
        net = tiny_net()
        z = net.feature_code(occ8)
        pts = rng.uniform(-0.5, 0.5, (64, 2)).astype(np.float32)
        vals = net.branch_values(z, pts)
        assert vals.shape == (64, 3)
        assert np.all(vals > 0) and np.all(vals < 1)

    def test_zero_net_gives_half(self, occ8):
        net = tiny_net()
        for p in net.parameters():
            p.value[...] = 0.0
        vals = net.branch_values(net.feature_code(occ8), np.zeros((5, 2), np.float32))
        assert np.allclose(vals, 0.5)

    def test_param_count_formula_unsup_preset(self):
        cfg = DecoderConfig(3072, 384, 12)
        total = decoder_param_count(cfg, code_dim=128, point_dim=3)
        assert total == (131 * 3072 + 3072) + (3072 * 384 + 384) + (384 * 12 + 12)
        net = build_preset("3d-unsup", resolution=16)
        enumerated = sum(p.value.size for p in [*net.dec1, *net.dec2, *net.dec3])
        assert enumerated == total

    def test_param_count_other_presets(self):
        net = build_preset("3d-oneshot", resolution=16, branches=5)
        got = sum(p.value.size for p in [*net.dec1, *net.dec2, *net.dec3])
        assert got == decoder_param_count(DecoderConfig(1024, 256, 5), 128, 3)
        net = build_preset("2d-toy")
        got = sum(p.value.size for p in [*net.dec1, *net.dec2, *net.dec3])
        assert got == decoder_param_count(DecoderConfig(256, 256, 4), 16, 2)

    def test_pooled_equals_branch_max(self, rng, occ8):
        net = tiny_net()
        z = net.feature_code(occ8)
        pts = rng.uniform(-0.5, 0.5, (32, 2)).astype(np.float32)
        pooled, args = net.decode_pooled(Tape(), z, pts)
        vals = net.branch_values(z, pts)
        assert np.array_equal(pooled.data, vals.max(axis=1))
        assert np.array_equal(args, vals.argmax(axis=1))

    def test_single_branch_identity(self, rng, occ8):
        net = tiny_net(branches=1)
        z = net.feature_code(occ8)
        pts = rng.uniform(-0.5, 0.5, (16, 2)).astype(np.float32)
        pooled, _ = net.decode_pooled(Tape(), z, pts)
        assert np.array_equal(pooled.data, net.branch_values(z, pts)[:, 0])

    def test_raising_preactivation_never_lowers_pool(self, rng, occ8):
        net = tiny_net()
        z = net.feature_code(occ8)
        pts = rng.uniform(-0.5, 0.5, (128, 2)).astype(np.float32)
        before, _ = net.decode_pooled(Tape(), z, pts)
        for b in range(3):
            net.dec3[1].value[b] += 0.05
            after, _ = net.decode_pooled(Tape(), z, pts)
            assert np.all(after.data >= before.data - 1e-7)
            net.dec3[1].value[b] -= 0.05


class TestDecodeContinuity:
    def test_directional_derivative_wrt_points(self, rng, occ8):
        # pooled field is piecewise smooth in p; away from branch switches the
        # coordinate gradient matches finite differences
        from baenet.autodiff import Tape

        net = tiny_net(seed=9)
        for p in net.parameters():
            # moderate perturbation: off the all-tied init without saturating
            p.value += rng.normal(0, 0.4, size=p.value.shape).astype(np.float32)
        # one branch dominating keeps pool switches rare in the probe region
        net.dec3[1].value[0] += 1.5
        z = net.feature_code(occ8)
        pts = rng.uniform(-0.4, 0.4, (24, 2)).astype(np.float32)
        t = Tape()
        pn = t.leaf(pts)
        pooled, _ = net.decode_pooled(t, z, pn)
        t.backward(t.sum(pooled))
        got = t.grad(pn)

        def f(flat):
            tt = Tape()
            pooled2, _ = net.decode_pooled(tt, z, flat.reshape(24, 2))
            return tt.sum(pooled2).item64()

        from conftest import numeric_grad, rel_err

        flat = pts.reshape(-1)
        gmag = np.abs(got.reshape(-1))
        floor = 0.3 * float(gmag.max())
        checked = 0
        for i in np.argsort(-gmag)[:24]:
            est = numeric_grad(f, flat, h=1e-2, coords=[i])[i]
            est2 = numeric_grad(f, flat, h=5e-3, coords=[i])[i]
            if abs(est - est2) > 2e-2 * max(abs(est), abs(est2), 1e-4):
                continue  # branch switch inside the interval
            if abs(est) < floor:
                continue
            assert rel_err(got.reshape(-1)[i], est, floor=1e-9) < 3e-2
            checked += 1
        assert checked >= 8


class TestFieldGrid:
    def test_pooled_is_max_of_branches(self, occ8):
        net = tiny_net()
        z = net.feature_code(occ8)
        per_branch = net.eval_field_grid(z, 8, branch="all")
        pooled = net.eval_field_grid(z, 8, branch="pooled")
        assert np.array_equal(pooled, per_branch.max(axis=0))

    def test_grid_matches_pointwise_decode(self, occ8):
        net = tiny_net()
        z = net.feature_code(occ8)
        grid = net.eval_field_grid(z, 8, branch="pooled")
        pts = grid_coords((8, 8))
        direct = net.branch_values(z, pts).max(axis=1).reshape(8, 8)
        assert np.array_equal(grid, direct)

    def test_bad_resolution(self, occ8):
        net = tiny_net()
        with pytest.raises(ParameterError):
            net.eval_field_grid(net.feature_code(occ8), 1)


class TestInterpolation:
    def test_endpoints(self, rng):
        z1 = rng.normal(size=6).astype(np.float32)
        z2 = rng.normal(size=6).astype(np.float32)
        assert np.allclose(interpolate_code(z1, z2, 0.0), z1)
        assert np.allclose(interpolate_code(z1, z2, 1.0), z2)

    def test_midpoint_of_equal_codes(self, rng):
        z = rng.normal(size=6).astype(np.float32)
        assert np.allclose(interpolate_code(z, z, 0.5), z)

    def test_extrapolation_formula(self, rng):
        z1 = rng.normal(size=6).astype(np.float32)
        z2 = rng.normal(size=6).astype(np.float32)
        got = interpolate_code(z1, z2, 1.5)
        assert np.allclose(got, 1.5 * z2 - 0.5 * z1, atol=1e-6)

    def test_length_mismatch(self, rng):
        from baenet.errors import DimensionError

        with pytest.raises(DimensionError):
            interpolate_code(np.zeros(4), np.zeros(5), 0.5)


class TestCheckpoint:
    def test_round_trip_bitwise_forward(self, tmp_path, occ8, rng):
        net = tiny_net(seed=3)
        p = tmp_path / "net.ckpt"
        save_model(net, p)
        back = load_model(p)
        assert np.array_equal(net.feature_code(occ8), back.feature_code(occ8))
        pts = rng.uniform(-0.5, 0.5, (32, 2)).astype(np.float32)
        z = net.feature_code(occ8)
        assert np.array_equal(net.branch_values(z, pts), back.branch_values(z, pts))

    def test_truncated(self, tmp_path):
        net = tiny_net()
        p = tmp_path / "net.ckpt"
        save_model(net, p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(FormatError):
            load_model(p)

    def test_trailing_bytes(self, tmp_path):
        net = tiny_net()
        p = tmp_path / "net.ckpt"
        save_model(net, p)
        p.write_bytes(p.read_bytes() + b"\x00")
        with pytest.raises(FormatError):
            load_model(p)

    def test_bad_magic(self, tmp_path):
        net = tiny_net()
        p = tmp_path / "net.ckpt"
        save_model(net, p)
        blob = bytearray(p.read_bytes())
        blob[0] ^= 0xFF
        p.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_model(p)
