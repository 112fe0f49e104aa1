"""The branched autoencoder: CNN encoder, three-layer branched decoder,
max-pooled implicit output, and field-evaluation utilities.

The encoder halves the spatial extent with stride-2 4-wide kernels until
it reaches 2 cells per axis (channels 32, 64, then 128 capped), and a
final dense layer projects to the feature code; no normalization layers
(training runs with batch size 1) and no activation on the code. The
decoder concatenates the code with a point coordinate and runs dense
layers L1 -> L2 -> L3, leaky ReLU between, sigmoid on the branch outputs
so each branch is an inside-likelihood in (0, 1); the pooled field is the
max over branches.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import F32, Adam, Node, Parameter, Tape, as_f32
from .errors import DimensionError, FormatError, ParameterError
from .sampling import grid_coords

CKPT_MAGIC = b"BAECKPT1"
CKPT_VERSION = 1

CONV_KERNEL = 4
CONV_STRIDE = 2
CONV_PAD = 1


def _default_channels(extent: int) -> list[int]:
    stages = int(np.log2(extent)) - 1
    return [min(32 << i, 128) for i in range(stages)]


@dataclass
class EncoderConfig:
    dims: tuple[int, ...]  # (64, 64), (128, 128), (32, 32, 32), ...
    code_dim: int
    channels: list[int] = field(default_factory=list)
    code_activation: str = "none"  # "none" (unconstrained) or "sigmoid" ([0,1] codes)

    def __post_init__(self):
        if self.code_activation not in ("none", "sigmoid"):
            raise ParameterError(f"unknown code activation {self.code_activation!r}")
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) not in (2, 3):
            raise ParameterError("encoder input must be 2-D or 3-D")
        e = self.dims[0]
        if any(d != e for d in self.dims):
            raise ParameterError("encoder input must be square/cubic")
        if e < 4 or e & (e - 1):
            raise ParameterError(f"extent must be a power of two >= 4, got {e}")
        if self.code_dim < 1:
            raise ParameterError("code_dim must be >= 1")
        if not self.channels:
            self.channels = _default_channels(e)
        stages = int(np.log2(e)) - 1
        if len(self.channels) != stages:
            raise ParameterError(
                f"{stages} stride-2 stages needed to reach extent 2, got {len(self.channels)} channels"
            )


@dataclass
class DecoderConfig:
    width1: int
    width2: int
    branches: int
    activation: str = "sigmoid"  # branch output activation; "sigmoid" or "hardclip"
    leaky_slope: float = 0.02

    def __post_init__(self):
        if min(self.width1, self.width2, self.branches) < 1:
            raise ParameterError("decoder widths and branch count must be >= 1")
        if self.activation not in ("sigmoid", "hardclip", "leakyclip"):
            raise ParameterError(f"unknown branch activation {self.activation!r}")


def decoder_param_count(cfg: DecoderConfig, code_dim: int, point_dim: int) -> int:
    """Closed-form trainable scalar count of the three dense layers."""
    n_in = code_dim + point_dim
    return (
        (n_in * cfg.width1 + cfg.width1)
        + (cfg.width1 * cfg.width2 + cfg.width2)
        + (cfg.width2 * cfg.branches + cfg.branches)
    )


class BaeNet:
    """Encoder + branched decoder with parameters in fixed declaration order."""

    def __init__(self, encoder: EncoderConfig, decoder: DecoderConfig,
                 seed: int = 0, init_std: float = 0.02):
        self.encoder = encoder
        self.decoder = decoder
        self.init_std = float(init_std)
        self.point_dim = len(encoder.dims)
        rng = np.random.default_rng(seed)

        def w(shape, name):
            return Parameter(rng.normal(0.0, init_std, size=shape).astype(F32), name)

        def b(n, name):
            return Parameter(np.zeros(n, dtype=F32), name)

        self.conv_params: list[tuple[Parameter, Parameter]] = []
        c_in = 1
        k = (CONV_KERNEL,) * self.point_dim
        for i, c_out in enumerate(encoder.channels):
            self.conv_params.append(
                (w((c_out, c_in) + k, f"enc{i}.w"), b(c_out, f"enc{i}.b"))
            )
            c_in = c_out
        flat = c_in * 2**self.point_dim
        self.enc_dense = (w((encoder.code_dim, flat), "enc_out.w"), b(encoder.code_dim, "enc_out.b"))
        n_in = encoder.code_dim + self.point_dim
        self.dec1 = (w((decoder.width1, n_in), "dec1.w"), b(decoder.width1, "dec1.b"))
        self.dec2 = (w((decoder.width2, decoder.width1), "dec2.w"), b(decoder.width2, "dec2.b"))
        self.dec3 = (w((decoder.branches, decoder.width2), "dec3.w"), b(decoder.branches, "dec3.b"))

    # -- parameter bookkeeping -------------------------------------------

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for wp, bp in self.conv_params:
            out += [wp, bp]
        out += list(self.enc_dense)
        out += [*self.dec1, *self.dec2, *self.dec3]
        return out

    def l3_parameters(self) -> list[Parameter]:
        return list(self.dec3)

    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    # -- forward passes ----------------------------------------------------

    def encode(self, tape: Tape, occupancy) -> Node:
        """Occupancy grid -> feature code node (no output activation)."""
        occ = as_f32(occupancy, "occupancy")
        if occ.shape != self.encoder.dims:
            raise ParameterError(f"grid {occ.shape} does not match encoder {self.encoder.dims}")
        x = tape._as_node(occ[None])  # channel axis
        for wp, bp in self.conv_params:
            x = tape.conv(x, wp, stride=CONV_STRIDE, padding=CONV_PAD, bias=bp)
            x = tape.leaky_relu(x, self.decoder.leaky_slope)
        x = tape.flatten(x)
        x = tape.dense(x, *self.enc_dense)
        if self.encoder.code_activation == "sigmoid":
            x = tape.sigmoid(x)
        return x

    def decode_branches(self, tape: Tape, code, points) -> Node:
        """Per-branch inside likelihoods f_i(p), shape [N, branches]."""
        pts = points if isinstance(points, Node) else as_f32(points, "points")
        if not isinstance(pts, Node) and pts.ndim == 1:
            pts = pts[None]
        x = tape.concat_code_points(code, pts)
        x = tape.leaky_relu(tape.dense(x, *self.dec1), self.decoder.leaky_slope)
        x = tape.leaky_relu(tape.dense(x, *self.dec2), self.decoder.leaky_slope)
        x = tape.dense(x, *self.dec3)
        if self.decoder.activation == "sigmoid":
            return tape.sigmoid(x)
        if self.decoder.activation == "leakyclip":
            return tape.leakyclip(x)
        return tape.hardclip(x)

    def decode_pooled(self, tape: Tape, code, points) -> tuple[Node, np.ndarray]:
        """Pooled field f(p) = max_i f_i(p) and the argmax branch per point."""
        branches = self.decode_branches(tape, code, points)
        return tape.branch_max(branches)

    def layer_activation(self, code, points, layer: int, neuron: int) -> np.ndarray:
        """Post-activation value of one decoder neuron over a point batch."""
        widths = {1: self.decoder.width1, 2: self.decoder.width2, 3: self.decoder.branches}
        if layer not in widths:
            raise ParameterError(f"layer must be 1, 2 or 3, got {layer}")
        if not 0 <= neuron < widths[layer]:
            raise ParameterError(f"neuron {neuron} out of range for L{layer}")
        tape = Tape()
        pts = as_f32(points, "points")
        x = tape.concat_code_points(code, pts)
        h = tape.leaky_relu(tape.dense(x, *self.dec1), self.decoder.leaky_slope)
        if layer == 1:
            return h.data[:, neuron]
        h = tape.leaky_relu(tape.dense(h, *self.dec2), self.decoder.leaky_slope)
        if layer == 2:
            return h.data[:, neuron]
        out = tape.dense(h, *self.dec3)
        if self.decoder.activation == "sigmoid":
            out = tape.sigmoid(out)
        elif self.decoder.activation == "leakyclip":
            out = tape.leakyclip(out)
        else:
            out = tape.hardclip(out)
        return out.data[:, neuron]

    # -- array conveniences (fresh throwaway tape) -------------------------

    def feature_code(self, occupancy) -> np.ndarray:
        return self.encode(Tape(), occupancy).data

    def branch_values(self, code, points) -> np.ndarray:
        return self.decode_branches(Tape(), code, points).data

    def eval_field_grid(self, code, resolution: int | None = None, branch="pooled") -> np.ndarray:
        """Field values at every cell center of a grid.

        branch: "pooled" (max over branches), "all" ([branches, *dims]),
        or a branch index.
        """
        if resolution is None:
            resolution = self.encoder.dims[0]
        if resolution < 2:
            raise ParameterError("resolution must be >= 2")
        dims = (resolution,) * self.point_dim
        pts = grid_coords(dims)
        k = self.decoder.branches
        chunks = []
        for lo in range(0, pts.shape[0], 8192):
            chunks.append(self.branch_values(code, pts[lo : lo + 8192]))
        vals = np.concatenate(chunks, axis=0)  # [cells, k]
        if branch == "pooled":
            return vals.max(axis=1).reshape(dims)
        if branch == "all":
            return vals.T.reshape((k,) + dims)
        idx = int(branch)
        if not 0 <= idx < k:
            raise ParameterError(f"branch index {idx} out of range")
        return vals[:, idx].reshape(dims)


def interpolate_code(z1, z2, t: float) -> np.ndarray:
    """(1-t)*z1 + t*z2; t outside [0,1] extrapolates."""
    a = as_f32(z1, "code")
    b = as_f32(z2, "code")
    if a.shape != b.shape:
        raise DimensionError(f"code lengths differ: {a.shape} vs {b.shape}")
    return ((1.0 - t) * a.astype(np.float64) + t * b.astype(np.float64)).astype(F32)


# -- presets ----------------------------------------------------------------

def build_preset(name: str, resolution: int | None = None, branches: int | None = None,
                 seed: int = 0) -> BaeNet:
    """Named architecture presets.

    2d-toy:      16-D code, {256-256-4} decoder, 64x64 input
    2d-toy-wide: 16-D code, {512-512-4} decoder, 128x128 input
    3d-unsup:    128-D code, {3072-384-12} decoder
    3d-oneshot:  128-D code, {1024-256-n} decoder (n = exemplar part count)
    """
    if name == "2d-toy":
        enc = EncoderConfig((resolution or 64,) * 2, 16)
        dec = DecoderConfig(256, 256, branches or 4)
    elif name == "2d-toy-wide":
        enc = EncoderConfig((resolution or 128,) * 2, 16)
        dec = DecoderConfig(512, 512, branches or 4)
    elif name == "3d-unsup":
        enc = EncoderConfig((resolution or 64,) * 3, 128)
        dec = DecoderConfig(3072, 384, branches or 12)
    elif name == "3d-oneshot":
        if branches is None:
            raise ParameterError("3d-oneshot preset needs the exemplar part count")
        enc = EncoderConfig((resolution or 64,) * 3, 128)
        dec = DecoderConfig(1024, 256, branches)
    else:
        raise ParameterError(f"unknown preset {name!r}")
    return BaeNet(enc, dec, seed=seed)


PRESET_NAMES = ("2d-toy", "2d-toy-wide", "3d-unsup", "3d-oneshot")


# -- checkpoint serialization ------------------------------------------------
#
# Layout: magic "BAECKPT1", one version byte, uint32-LE config JSON length,
# config JSON, then every parameter in declaration order as raw little-endian
# float32. Training checkpoints append an optimizer section after this.


def _config_blob(net: BaeNet) -> bytes:
    cfg = {
        "encoder": {
            "dims": list(net.encoder.dims),
            "code_dim": net.encoder.code_dim,
            "channels": list(net.encoder.channels),
            "code_activation": net.encoder.code_activation,
        },
        "decoder": {
            "width1": net.decoder.width1,
            "width2": net.decoder.width2,
            "branches": net.decoder.branches,
            "activation": net.decoder.activation,
            "leaky_slope": net.decoder.leaky_slope,
        },
    }
    return json.dumps(cfg, sort_keys=True).encode("ascii")


def write_model_section(f, net: BaeNet) -> None:
    blob = _config_blob(net)
    f.write(CKPT_MAGIC)
    f.write(bytes([CKPT_VERSION]))
    f.write(len(blob).to_bytes(4, "little"))
    f.write(blob)
    for p in net.parameters():
        f.write(p.value.astype("<f4").tobytes(order="C"))


def read_model_section(f) -> BaeNet:
    magic = f.read(len(CKPT_MAGIC))
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    ver = f.read(1)
    if len(ver) != 1 or ver[0] != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {ver!r}", offset=len(CKPT_MAGIC))
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError("truncated config length", offset=f.tell())
    blob = f.read(int.from_bytes(raw, "little"))
    try:
        cfg = json.loads(blob)
        enc = EncoderConfig(tuple(cfg["encoder"]["dims"]), cfg["encoder"]["code_dim"],
                            list(cfg["encoder"]["channels"]),
                            cfg["encoder"].get("code_activation", "none"))
        dec = DecoderConfig(cfg["decoder"]["width1"], cfg["decoder"]["width2"],
                            cfg["decoder"]["branches"], cfg["decoder"]["activation"],
                            cfg["decoder"]["leaky_slope"])
    except (KeyError, ValueError, TypeError) as e:
        raise FormatError(f"bad checkpoint config: {e}", offset=f.tell()) from None
    net = BaeNet(enc, dec, seed=0)
    for p in net.parameters():
        nbytes = p.value.size * 4
        raw = f.read(nbytes)
        if len(raw) != nbytes:
            raise FormatError(f"truncated parameter {p.name}", offset=f.tell())
        arr = np.frombuffer(raw, dtype="<f4").reshape(p.value.shape)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"non-finite values in parameter {p.name}", offset=f.tell())
        p.value[...] = arr
    return net


def save_model(net: BaeNet, path) -> None:
    with open(path, "wb") as f:
        write_model_section(f, net)


def load_model(path) -> BaeNet:
    with open(path, "rb") as f:
        net = read_model_section(f)
        trailing = f.read(1)
        if trailing:
            raise FormatError("trailing bytes after parameters", offset=f.tell() - 1)
    return net


def make_optimizer(net: BaeNet, lr: float = 1e-4, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> Adam:
    return Adam(net.parameters(), lr=lr, beta1=beta1, beta2=beta2, eps=eps)
