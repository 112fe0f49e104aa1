"""Training loops: unsupervised reconstruction, one-shot with labeled
exemplars, and weakly supervised distribution rebalancing.

A step consumes every sampled point of one shape (mini-batch of size 1 at
shape granularity). One-shot training runs a supervised pretraining phase
on the exemplars, then strictly alternates 4 unsupervised steps with 1
supervised step. Everything a step does is a pure function of (config,
step index), so resuming from a checkpoint reproduces an uninterrupted
run bit for bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, asdict
import json

import numpy as np

from .autodiff import Adam, Tape
from .errors import ContractError, DimensionError, DivergenceError, FormatError, ParameterError
from .model import BaeNet, read_model_section, write_model_section
from .sampling import (LabeledPoints, SampleSet, default_point_count, labeled_points_from_gt,
                       sample_points)
from .shapes import RasterShape

_MASK64 = (1 << 64) - 1
STATE_MAGIC = b"BAESTAT1"


def derive_seed(base: int, t: int) -> int:
    """Independent 64-bit stream seed for step t (splitmix-style)."""
    return (base * 0x9E3779B97F4A7C15 + t + 1) & _MASK64


@dataclass
class TrainConfig:
    iterations: int = 200_000
    batch_size: int = 1
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha: float = 1.0
    l1_weight: float = 1e-5
    schedule: tuple[int, int] = (4, 1)  # unsupervised : supervised steps
    pretrain_iterations: int = 3_500
    refine_iterations: int = 0  # weak-supervision phase 2; 0 -> iterations // 4
    points_per_shape: int = 0  # 0 -> default for the grid geometry
    jitter: bool = False
    seed: int = 0
    log_interval: int = 500
    checkpoint_interval: int = 0  # 0 -> final checkpoint only
    weak_reinit_optimizer: bool = False

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ParameterError("iterations and batch size must be positive")
        if self.learning_rate <= 0 or self.l1_weight < 0 or self.alpha < 0:
            raise ParameterError("learning rate must be positive; alpha, l1 weight non-negative")
        a, b = self.schedule
        if int(a) != a or int(b) != b or a < 1 or b < 1:
            raise ParameterError("schedule must be a pair of positive integers")
        self.schedule = (int(a), int(b))
        if self.pretrain_iterations < 0 or self.refine_iterations < 0:
            raise ParameterError("iteration counts cannot be negative")


@dataclass
class LossReport:
    iteration: int
    unsup: float
    sup: float | None
    l1: float


@dataclass
class ExemplarSet:
    """Labeled exemplar shapes driving the one-shot supervised loss."""

    ids: list[int]
    shapes: list[RasterShape]
    labeled: list[LabeledPoints]

    def __post_init__(self):
        if not self.ids:
            raise ParameterError("one-shot training needs at least one exemplar")
        parts = {lp.labels.shape[1] for lp in self.labeled}
        if len(parts) != 1:
            raise ParameterError("exemplars disagree on part count")

    @property
    def num_parts(self) -> int:
        return self.labeled[0].labels.shape[1]


def make_exemplar_set(dataset: list[RasterShape], ids: list[int], n_points: int = 0,
                      seed: int = 0) -> ExemplarSet:
    shapes = [dataset[i] for i in ids]
    parts = {s.num_parts() for s in shapes}
    if len(parts) != 1 or 0 in parts:
        raise ContractError("exemplars must all carry the same number of gt parts")
    labeled = []
    for s in shapes:
        occupied = int(np.count_nonzero(s.gt_labels))
        n = min(n_points or default_point_count(s.dims), occupied)
        labeled.append(labeled_points_from_gt(s, n, derive_seed(seed, s.shape_id)))
    return ExemplarSet(list(ids), shapes, labeled)


class ShapeStream:
    """Seeded uniform shuffler cycling a dataset; position t is stateless."""

    def __init__(self, n: int, seed: int):
        if n < 1:
            raise ParameterError("empty dataset")
        self.n = n
        self.seed = seed

    def at(self, t: int) -> int:
        epoch, pos = divmod(t, self.n)
        rng = np.random.Generator(
            np.random.Philox(key=np.array([self.seed ^ 0xC2B2AE3D27D4EB4F, epoch], dtype=np.uint64))
        )
        return int(rng.permutation(self.n)[pos])


# -- losses ------------------------------------------------------------------


def loss_unsup(tape: Tape, net: BaeNet, batch: list[tuple[RasterShape, SampleSet]],
               l1_weight: float):
    """Mean squared reconstruction error of the pooled field plus the L1
    penalty on the branch output layer. Returns (loss node, parts dict)."""
    if not batch or any(len(s) == 0 for _, s in batch):
        raise ContractError("empty sample set")
    total = None
    for shape, samples in batch:
        z = net.encode(tape, shape.occupancy)
        pooled, _ = net.decode_pooled(tape, z, samples.coords)
        term = tape.mse(pooled, samples.values)
        total = term if total is None else tape.add(total, term)
    recon = tape.scale(total, 1.0 / len(batch)) if len(batch) > 1 else total
    penalty = tape.scale(tape.l1(net.l3_parameters()), l1_weight)
    loss = tape.add(recon, penalty)
    return loss, {"unsup": recon.item64(), "sup": None, "l1": penalty.item64()}


def loss_sup(tape: Tape, net: BaeNet, shape: RasterShape, samples: SampleSet,
             labeled: LabeledPoints, alpha: float, l1_weight: float):
    """Reconstruction term plus alpha times the per-branch label term.

    Every labeled point is an inside point by construction (drawn from
    occupied cells), so its pooled occupancy target is 1 implicitly via
    the one-hot branch targets.
    """
    if len(samples) == 0:
        raise ContractError("empty sample set")
    if labeled is None or labeled.coords.shape[0] == 0:
        raise ContractError("supervised loss needs labeled points")
    if labeled.labels.shape[1] != net.decoder.branches:
        raise DimensionError(
            f"{labeled.labels.shape[1]} label columns vs {net.decoder.branches} branches"
        )
    z = net.encode(tape, shape.occupancy)
    pooled, _ = net.decode_pooled(tape, z, samples.coords)
    recon = tape.mse(pooled, samples.values)
    branches = net.decode_branches(tape, z, labeled.coords)
    sup = tape.mse(branches, labeled.labels)
    penalty = tape.scale(tape.l1(net.l3_parameters()), l1_weight)
    loss = tape.add(tape.add(recon, tape.scale(sup, alpha)), penalty)
    return loss, {"unsup": recon.item64(), "sup": sup.item64(), "l1": penalty.item64()}


# -- loop internals ------------------------------------------------------------


class _CsvLog:
    def __init__(self, path):
        self.path = path
        if path is not None and not os.path.exists(path):
            with open(path, "w") as f:
                f.write("iter,unsup,sup,l1\n")

    def write(self, r: LossReport) -> None:
        if self.path is None:
            return
        sup = "" if r.sup is None else repr(r.sup)
        with open(self.path, "a") as f:
            f.write(f"{r.iteration},{r.unsup!r},{sup},{r.l1!r}\n")


def _points_for(shape: RasterShape, cfg: TrainConfig) -> int:
    if cfg.points_per_shape:
        return cfg.points_per_shape
    dims = shape.dims if len(shape.dims) == 2 else (min(shape.dims[0], 32),) * 3
    return default_point_count(dims)


def _unsup_step(net, tape, dataset, stream, pos, cfg, t):
    batch = []
    for j in range(cfg.batch_size):
        shape = dataset[stream.at(pos * cfg.batch_size + j)]
        n = min(_points_for(shape, cfg), int(np.prod(shape.dims)))
        batch.append((shape, sample_points(shape, n, derive_seed(cfg.seed, t), jitter=cfg.jitter)))
    return loss_unsup(tape, net, batch, cfg.l1_weight)


def _sup_step(net, tape, exemplars, stream, pos, cfg, t):
    j = stream.at(pos)
    shape = exemplars.shapes[j]
    n = min(_points_for(shape, cfg), int(np.prod(shape.dims)))
    samples = sample_points(shape, n, derive_seed(cfg.seed, t), jitter=cfg.jitter)
    return loss_sup(tape, net, shape, samples, exemplars.labeled[j], cfg.alpha, cfg.l1_weight)


def _apply(net, opt, tape, loss, t, checkpoint_path, cfg, extra):
    if not np.isfinite(loss.item64()):
        if checkpoint_path:
            diag = str(checkpoint_path) + ".diverged"
            save_checkpoint(diag, net, opt, t, dict(extra, diverged_at=t))
        raise DivergenceError(f"non-finite loss at step {t}")
    opt.zero_grad()
    tape.backward(loss)
    opt.step()


def _maybe_report(reports, log, parts, t, cfg, final):
    if cfg.log_interval and ((t + 1) % cfg.log_interval == 0 or final):
        r = LossReport(t + 1, parts["unsup"], parts["sup"], parts["l1"])
        reports.append(r)
        log.write(r)


def _run(net, opt, cfg, total_steps, step_fn, checkpoint_path, log_path, on_step,
         start_step, extra):
    reports: list[LossReport] = []
    log = _CsvLog(log_path)
    for t in range(start_step, total_steps):
        tape = Tape()
        kind, loss, parts = step_fn(tape, t)
        _apply(net, opt, tape, loss, t, checkpoint_path, cfg, extra)
        _maybe_report(reports, log, parts, t, cfg, final=(t + 1 == total_steps))
        if on_step is not None:
            on_step(t, kind, parts)
        if checkpoint_path and cfg.checkpoint_interval and (t + 1) % cfg.checkpoint_interval == 0:
            save_checkpoint(checkpoint_path, net, opt, t + 1, extra)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, net, opt, total_steps, extra)
    return reports


# -- public training entry points ----------------------------------------------


def train_unsupervised(net: BaeNet, dataset: list[RasterShape], cfg: TrainConfig, *,
                       opt: Adam | None = None, start_step: int = 0,
                       checkpoint_path=None, log_path=None, on_step=None):
    """Reconstruction-only training over a seeded shuffle of the dataset."""
    if not dataset:
        raise ParameterError("dataset is empty")
    opt = opt or _new_opt(net, cfg)
    stream = ShapeStream(len(dataset), cfg.seed)

    def step_fn(tape, t):
        loss, parts = _unsup_step(net, tape, dataset, stream, t, cfg, t)
        return "U", loss, parts

    extra = {"regime": "unsup", "config": asdict(cfg)}
    return _run(net, opt, cfg, cfg.iterations, step_fn, checkpoint_path, log_path,
                on_step, start_step, extra)


def train_oneshot(net: BaeNet, dataset: list[RasterShape], exemplars: ExemplarSet,
                  cfg: TrainConfig, *, opt: Adam | None = None, start_step: int = 0,
                  checkpoint_path=None, log_path=None, on_step=None):
    """Supervised pretraining on the exemplars, then 4:1 alternation of
    unsupervised steps over the whole set with supervised exemplar steps."""
    if not dataset:
        raise ParameterError("dataset is empty")
    if exemplars.num_parts != net.decoder.branches:
        raise ParameterError(
            f"decoder has {net.decoder.branches} branches but exemplars have "
            f"{exemplars.num_parts} parts"
        )
    opt = opt or _new_opt(net, cfg)
    unsup_stream = ShapeStream(len(dataset), cfg.seed)
    sup_stream = ShapeStream(len(exemplars.ids), derive_seed(cfg.seed, 0x51))
    a, b = cfg.schedule
    period = a + b

    def step_fn(tape, t):
        if t < cfg.pretrain_iterations:
            loss, parts = _sup_step(net, tape, exemplars, sup_stream, t, cfg, t)
            return "P", loss, parts
        i = t - cfg.pretrain_iterations
        cycle, phase = divmod(i, period)
        if phase < a:  # unsupervised slots come first in each cycle
            pos = cycle * a + phase
            loss, parts = _unsup_step(net, tape, dataset, unsup_stream, pos, cfg, t)
            return "U", loss, parts
        pos = cfg.pretrain_iterations + cycle * b + (phase - a)
        loss, parts = _sup_step(net, tape, exemplars, sup_stream, pos, cfg, t)
        return "S", loss, parts

    total = cfg.pretrain_iterations + cfg.iterations
    extra = {"regime": "oneshot", "config": asdict(cfg), "exemplar_ids": exemplars.ids}
    return _run(net, opt, cfg, total, step_fn, checkpoint_path, log_path,
                on_step, start_step, extra)


def rebalance_for_weak_supervision(dataset: list[RasterShape], has_part,
                                   seed: int = 0) -> list[RasterShape]:
    """Duplicate shapes round-robin until negatives outnumber positives
    exactly 4:1, then reshuffle. Shape objects are shared, not copied."""
    has_part = [bool(h) for h in has_part]
    if len(has_part) != len(dataset):
        raise ParameterError("has_part length does not match dataset")
    pos = [s for s, h in zip(dataset, has_part) if h]
    neg = [s for s, h in zip(dataset, has_part) if not h]
    if not pos or not neg:
        raise ParameterError("rebalancing needs both positive and negative shapes")
    if len(neg) > 4 * len(pos):
        # keep duplicating positives until 4:1 is reachable, then top up negatives
        target_pos = -(-len(neg) // 4)
        pos = [pos[i % len(pos)] for i in range(target_pos)]
    target_neg = 4 * len(pos)
    neg = [neg[i % len(neg)] for i in range(target_neg)]
    merged = pos + neg
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0x7EBA], dtype=np.uint64)))
    order = rng.permutation(len(merged))
    return [merged[i] for i in order]


def train_weak(net: BaeNet, dataset: list[RasterShape], has_part, cfg: TrainConfig, *,
               opt: Adam | None = None, start_step: int = 0,
               checkpoint_path=None, log_path=None, on_step=None):
    """Two-phase weak supervision: train on the 4:1 rebalanced set, then
    refine on the positive shapes only. Optimizer state carries across the
    phase boundary unless cfg.weak_reinit_optimizer is set."""
    rebalanced = rebalance_for_weak_supervision(dataset, has_part, cfg.seed)
    positives = [s for s, h in zip(dataset, has_part) if h]
    refine = cfg.refine_iterations or cfg.iterations // 4
    opt = opt or _new_opt(net, cfg)
    stream1 = ShapeStream(len(rebalanced), cfg.seed)
    stream2 = ShapeStream(len(positives), derive_seed(cfg.seed, 0x52))
    reinit_done = start_step > cfg.iterations

    def step_fn(tape, t):
        nonlocal opt, reinit_done
        if t < cfg.iterations:
            loss, parts = _unsup_step(net, tape, rebalanced, stream1, t, cfg, t)
            return "U", loss, parts
        if cfg.weak_reinit_optimizer and not reinit_done:
            opt = _new_opt(net, cfg)
            reinit_done = True
        loss, parts = _unsup_step(net, tape, positives, stream2, t - cfg.iterations, cfg, t)
        return "R", loss, parts

    total = cfg.iterations + refine
    extra = {"regime": "weak", "config": asdict(cfg),
             "positives": [i for i, h in enumerate(has_part) if h]}
    return _run(net, opt, cfg, total, step_fn, checkpoint_path, log_path,
                on_step, start_step, extra)


def _new_opt(net: BaeNet, cfg: TrainConfig) -> Adam:
    return Adam(net.parameters(), lr=cfg.learning_rate, beta1=cfg.beta1,
                beta2=cfg.beta2, eps=cfg.eps)


# -- checkpointing ---------------------------------------------------------------
#
# Training checkpoints are a model section (see model.py) followed by a state
# section: magic "BAESTAT1", uint32-LE JSON length, JSON metadata (optimizer
# hyperparameters, step counters, regime data), then the first- and
# second-moment buffers in parameter declaration order as raw float32.


def save_checkpoint(path, net: BaeNet, opt: Adam, step: int, extra: dict | None = None) -> None:
    meta = {
        "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
        "t": opt.t, "step": int(step), "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode("ascii")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        write_model_section(f, net)
        f.write(STATE_MAGIC)
        f.write(len(blob).to_bytes(4, "little"))
        f.write(blob)
        for buf in (*opt.m, *opt.v):
            f.write(buf.astype("<f4").tobytes(order="C"))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[BaeNet, Adam, int, dict]:
    with open(path, "rb") as f:
        net = read_model_section(f)
        magic = f.read(len(STATE_MAGIC))
        if magic != STATE_MAGIC:
            raise FormatError(f"bad optimizer-state magic {magic!r}", offset=f.tell())
        raw = f.read(4)
        if len(raw) != 4:
            raise FormatError("truncated state length", offset=f.tell())
        try:
            meta = json.loads(f.read(int.from_bytes(raw, "little")))
        except ValueError:
            raise FormatError("bad state metadata", offset=f.tell()) from None
        opt = Adam(net.parameters(), lr=meta["lr"], beta1=meta["beta1"],
                   beta2=meta["beta2"], eps=meta["eps"])
        m, v = [], []
        for group in (m, v):
            for p in net.parameters():
                nbytes = p.value.size * 4
                buf = f.read(nbytes)
                if len(buf) != nbytes:
                    raise FormatError("truncated optimizer moments", offset=f.tell())
                group.append(np.frombuffer(buf, dtype="<f4").reshape(p.value.shape))
        opt.load_state(meta["t"], m, v)
        if f.read(1):
            raise FormatError("trailing bytes after optimizer state", offset=f.tell() - 1)
    return net, opt, int(meta["step"]), meta.get("extra", {})
