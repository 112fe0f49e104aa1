"""Command line driver: generate datasets, train, segment, evaluate, and
render figures, all deterministic given flags plus seed.

Exit codes: 0 success, 1 usage/parameter error, 2 data/format error,
3 numeric divergence. BAENET_THREADS caps BLAS worker threads (0 = auto).
"""

from __future__ import annotations

import os


def _cap_threads_env() -> None:
    v = os.environ.get("BAENET_THREADS", "")
    if v.isdigit() and int(v) > 0:
        for key in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(key, v)


_cap_threads_env()  # must precede the numpy import chain

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import (BaeNetError, ContractError, DivergenceError, FormatError, ParameterError)
from .metrics import (auc_report, iou_report, label_grid, label_grid_from_code, match_branches)
from .model import BaeNet, PRESET_NAMES, build_preset, interpolate_code, load_model
from .sampling import grid_coords
from .shapes import DatasetSpec, RasterShape, generate_dataset, read_raster, write_raster
from .training import (TrainConfig, load_checkpoint, make_exemplar_set, train_oneshot,
                       train_unsupervised, train_weak)
from .viz import (hstack_frames, project_labels_3d, render_activation, render_labels,
                  write_pgm, write_ppm)

# defaults double as the catalogue of legal config-file keys per subcommand
DEFAULTS: dict[str, dict] = {
    "gen": {"category": "elements", "count": 100, "seed": 0, "resolution": 0,
            "option": [], "out": "dataset"},
    "train": {"mode": "unsup", "data": "dataset", "out": "run", "preset": "auto",
              "branches": 0, "iterations": 20000, "learning-rate": 1e-4, "alpha": 1.0,
              "l1-weight": 1e-5, "pretrain-iterations": 3500, "refine-iterations": 0,
              "points-per-shape": 0, "seed": 0, "log-interval": 500,
              "checkpoint-interval": 0, "exemplars": "", "positives": "", "resume": False},
    "segment": {"checkpoint": "run/model.ckpt", "data": "dataset", "ids": "all",
                "out": "segments"},
    "eval": {"checkpoint": "run/model.ckpt", "data": "dataset", "mode": "iou",
             "out": "eval"},
    "render-activation": {"checkpoint": "run/model.ckpt", "data": "dataset", "id": 0,
                          "layer": "L3", "neuron": 0, "out": "activation.pgm"},
    "interp": {"checkpoint": "run/model.ckpt", "data": "dataset", "shape-a": 0,
               "shape-b": 1, "steps": 8, "t0": 0.0, "t1": 1.0, "out": "interp.ppm"},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ParameterError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="baenet", description=__doc__)
    sub = p.add_subparsers(dest="command")
    for cmd, defs in DEFAULTS.items():
        sp = sub.add_parser(cmd, argument_default=argparse.SUPPRESS)
        sp.add_argument("--config", help="key=value file; flags override it")
        for key, default in defs.items():
            flag = f"--{key}"
            if isinstance(default, bool):
                sp.add_argument(flag, action="store_true")
            elif isinstance(default, list):
                sp.add_argument(flag, action="append")
            else:
                sp.add_argument(flag, type=type(default))
    return p


def _load_config_file(path: str, legal: dict) -> dict:
    out = {}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{ln}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in legal:
            raise ParameterError(f"{path}:{ln}: unknown key {key!r}")
        default = legal[key]
        if isinstance(default, bool):
            out[key] = value.lower() in ("1", "true", "yes")
        elif isinstance(default, list):
            out.setdefault(key, []).append(value)
        else:
            out[key] = type(default)(value)
    return out


def _merge_options(cmd: str, ns: argparse.Namespace) -> dict:
    defaults = DEFAULTS[cmd]
    merged = dict(defaults)
    given = {k.replace("_", "-"): v for k, v in vars(ns).items() if k != "command"}
    config_path = given.pop("config", None)
    if config_path:
        merged.update(_load_config_file(config_path, defaults))
    merged.update(given)
    return merged


def _parse_options_kv(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ParameterError(f"--option expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        try:
            out[k] = float(v)
        except ValueError:
            out[k] = v
    return out


def _parse_ids(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise ParameterError(f"expected comma-separated ids, got {text!r}") from None


# -- dataset directory layout -----------------------------------------------


def _elements_tags(shape: RasterShape) -> str:
    names = [n for n in ("cross", "triangle", "rhombus") if n in shape.params]
    return ",".join(names) if names else "-"


def cmd_gen(opts) -> int:
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    spec = DatasetSpec(opts["category"], opts["count"], opts["seed"],
                       opts["resolution"] or None, _parse_options_kv(opts["option"]))
    shapes = generate_dataset(spec)
    lines = []
    for s in shapes:
        fname = f"{spec.category}_{s.shape_id:05d}.baevox"
        write_raster(s, out / fname)
        lines.append(f"{s.shape_id} {spec.seed} {fname} {_elements_tags(s)}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(shapes)} shapes to {out}")
    return 0


def load_dataset(path) -> list[RasterShape]:
    root = Path(path)
    manifest = root / "manifest.txt"
    shapes = []
    if manifest.exists():
        for raw in manifest.read_text().splitlines():
            if not raw.strip():
                continue
            fields = raw.split()
            if len(fields) != 4:
                raise FormatError(f"manifest line {raw!r} must have 4 fields")
            sid, _, fname, tags = fields
            s = read_raster(root / fname)
            s.shape_id = int(sid)
            s.params = {"tags": tags.split(",")} if tags != "-" else {}
            shapes.append(s)
    else:
        for i, f in enumerate(sorted(root.glob("*.baevox"))):
            s = read_raster(f)
            s.shape_id = i
            shapes.append(s)
    if not shapes:
        raise ContractError(f"no shapes found under {root}")
    return shapes


def load_net(path) -> BaeNet:
    """Model-only checkpoint or full training checkpoint."""
    try:
        return load_model(path)
    except FormatError:
        net, _, _, _ = load_checkpoint(path)
        return net


# -- training ------------------------------------------------------------------


def _auto_preset(mode: str, dims: tuple[int, ...]) -> str:
    if len(dims) == 2:
        return "2d-toy" if dims[0] <= 64 else "2d-toy-wide"
    return "3d-oneshot" if mode == "oneshot" else "3d-unsup"


def _config_from(opts) -> TrainConfig:
    return TrainConfig(
        iterations=opts["iterations"], learning_rate=opts["learning-rate"],
        alpha=opts["alpha"], l1_weight=opts["l1-weight"],
        pretrain_iterations=opts["pretrain-iterations"],
        refine_iterations=opts["refine-iterations"],
        points_per_shape=opts["points-per-shape"], seed=opts["seed"],
        log_interval=opts["log-interval"], checkpoint_interval=opts["checkpoint-interval"],
    )


def _positives_vector(opts, data: list[RasterShape]) -> list[bool]:
    text = opts["positives"]
    if not text:
        raise ParameterError("weak mode needs --positives (ids, @file, or tag:<name>)")
    if text.startswith("tag:"):
        tag = text[4:]
        return [tag in s.params.get("tags", ()) for s in data]
    if text.startswith("@"):
        ids = _parse_ids(Path(text[1:]).read_text().replace("\n", ","))
    else:
        ids = _parse_ids(text)
    chosen = set(ids)
    return [s.shape_id in chosen for s in data]


def cmd_train(opts) -> int:
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.ckpt"
    log = out / "loss.csv"
    data = load_dataset(opts["data"])
    mode = opts["mode"]
    if mode not in ("unsup", "oneshot", "weak"):
        raise ParameterError(f"unknown training mode {mode!r}")

    if opts["resume"]:
        net, opt, step, extra = load_checkpoint(ckpt)
        stored = dict(extra["config"])
        stored["schedule"] = tuple(stored["schedule"])
        cfg = TrainConfig(**stored)
        regime = extra["regime"]
        print(f"resuming {regime} at step {step}")
        if regime == "unsup":
            train_unsupervised(net, data, cfg, opt=opt, start_step=step,
                               checkpoint_path=ckpt, log_path=log)
        elif regime == "oneshot":
            exemplars = make_exemplar_set(data, extra["exemplar_ids"],
                                          cfg.points_per_shape, cfg.seed)
            train_oneshot(net, data, exemplars, cfg, opt=opt, start_step=step,
                          checkpoint_path=ckpt, log_path=log)
        else:
            has_part = [s.shape_id in set(extra["positives"]) for s in data]
            train_weak(net, data, has_part, cfg, opt=opt, start_step=step,
                       checkpoint_path=ckpt, log_path=log)
        print(f"checkpoint: {ckpt}")
        return 0

    cfg = _config_from(opts)
    dims = data[0].dims
    preset = opts["preset"] if opts["preset"] != "auto" else _auto_preset(mode, dims)
    if preset not in PRESET_NAMES:
        raise ParameterError(f"unknown preset {preset!r}")
    branches = opts["branches"] or None

    if mode == "oneshot":
        if not opts["exemplars"]:
            raise ParameterError("oneshot mode needs --exemplars (comma-separated shape ids)")
        ids = _parse_ids(opts["exemplars"])
        exemplars = make_exemplar_set(data, ids, cfg.points_per_shape, cfg.seed)
        net = build_preset(preset, resolution=dims[0],
                           branches=branches or exemplars.num_parts, seed=cfg.seed)
        train_oneshot(net, data, exemplars, cfg, checkpoint_path=ckpt, log_path=log)
    elif mode == "weak":
        has_part = _positives_vector(opts, data)
        net = build_preset(preset, resolution=dims[0], branches=branches, seed=cfg.seed)
        train_weak(net, data, has_part, cfg, checkpoint_path=ckpt, log_path=log)
    else:
        net = build_preset(preset, resolution=dims[0], branches=branches, seed=cfg.seed)
        train_unsupervised(net, data, cfg, checkpoint_path=ckpt, log_path=log)
    print(f"checkpoint: {ckpt}")
    print(f"loss log:   {log}")
    return 0


# -- segmentation and rendering ---------------------------------------------------


def _write_label_render(lab: np.ndarray, stem: Path) -> None:
    if lab.ndim == 2:
        write_ppm(stem.with_suffix(".ppm"), render_labels(lab))
    else:
        for axis, proj in enumerate(project_labels_3d(lab)):
            write_ppm(stem.parent / f"{stem.name}_axis{axis}.ppm", render_labels(proj))


def cmd_segment(opts) -> int:
    net = load_net(opts["checkpoint"])
    data = load_dataset(opts["data"])
    if opts["ids"] != "all":
        chosen = set(_parse_ids(opts["ids"]))
        data = [s for s in data if s.shape_id in chosen]
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    for s in data:
        lab = label_grid(net, s)
        seg = RasterShape(s.dims, (lab > 0).astype(np.uint8), lab, {}, "segmentation",
                          s.shape_id)
        write_raster(seg, out / f"labels_{s.shape_id:05d}.baevox")
        _write_label_render(lab, out / f"render_{s.shape_id:05d}")
    print(f"segmented {len(data)} shapes into {out}")
    return 0


def cmd_eval(opts) -> int:
    net = load_net(opts["checkpoint"])
    data = load_dataset(opts["data"])
    if any(s.gt_labels is None for s in data):
        raise ContractError("evaluation needs ground-truth labels in the dataset")
    mode = opts["mode"]
    if mode not in ("iou", "mod-iou", "auc"):
        raise ParameterError(f"unknown eval mode {mode!r}")
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    preds = [label_grid(net, s) for s in data]
    gts = [s.gt_labels for s in data]
    assignment = match_branches(preds, gts, "mod-iou" if mode == "mod-iou" else "iou")
    for line in assignment.lines():
        print(line)
    if mode == "auc":
        rep = auc_report(net, data, assignment)
        rows = [f"{part},{auc!r}" for part, auc in rep.per_part.items()]
        (out / "auc.csv").write_text("part,auc\n" + "\n".join(rows) + "\n")
        for part, auc in rep.per_part.items():
            print(f"part {part}: AUC {auc:.4f}")
        return 0
    from .metrics import per_shape_iou

    rows = []
    for s, pred, gt in zip(data, preds, gts):
        for part, v in sorted(per_shape_iou(pred, gt, assignment).items()):
            rows.append(f"{s.shape_id},{part},{v!r}")
    (out / f"{mode}.csv").write_text("shape_id,part,iou\n" + "\n".join(rows) + "\n")
    rep = iou_report(preds, gts, assignment)
    for part, v in rep.per_part.items():
        print(f"part {part}: IOU {v:.4f}")
    print(f"mean {mode.upper()}: {rep.mean:.4f}")
    return 0


def cmd_render_activation(opts) -> int:
    net = load_net(opts["checkpoint"])
    data = load_dataset(opts["data"])
    shape = next((s for s in data if s.shape_id == opts["id"]), None)
    if shape is None:
        raise ParameterError(f"shape id {opts['id']} not in dataset")
    if len(shape.dims) != 2:
        raise ParameterError("activation rendering is defined for 2D shapes")
    layer = opts["layer"].upper()
    if layer not in ("L1", "L2", "L3"):
        raise ParameterError(f"layer must be L1, L2 or L3, got {opts['layer']!r}")
    code = net.feature_code(shape.occupancy)
    act = net.layer_activation(code, grid_coords(shape.dims), int(layer[1]), opts["neuron"])
    write_pgm(opts["out"], render_activation(act.reshape(shape.dims)))
    print(f"wrote {opts['out']}")
    return 0


def cmd_interp(opts) -> int:
    net = load_net(opts["checkpoint"])
    data = load_dataset(opts["data"])
    if opts["steps"] < 2:
        raise ParameterError("interp needs steps >= 2")
    by_id = {s.shape_id: s for s in data}
    try:
        a, b = by_id[opts["shape-a"]], by_id[opts["shape-b"]]
    except KeyError as e:
        raise ParameterError(f"shape id {e} not in dataset") from None
    za = net.feature_code(a.occupancy)
    zb = net.feature_code(b.occupancy)
    frames = []
    for t in np.linspace(opts["t0"], opts["t1"], opts["steps"]):
        lab = label_grid_from_code(net, interpolate_code(za, zb, float(t)), a.dims)
        frames.append(render_labels(lab))
    write_ppm(opts["out"], hstack_frames(frames))
    print(f"wrote {opts['out']}")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "segment": cmd_segment,
    "eval": cmd_eval,
    "render-activation": cmd_render_activation,
    "interp": cmd_interp,
}


def _apply_thread_cap() -> None:
    v = os.environ.get("BAENET_THREADS", "")
    if v.isdigit() and int(v) > 0:
        import threadpoolctl

        threadpoolctl.threadpool_limits(int(v))


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
        if getattr(ns, "command", None) is None:
            parser.print_usage(sys.stderr)
            return 1
        _apply_thread_cap()
        opts = _merge_options(ns.command, ns)
        return COMMANDS[ns.command](opts)
    except ParameterError as e:
        print(f"baenet: {e}", file=sys.stderr)
        return 1
    except (FormatError, ContractError, OSError) as e:
        print(f"baenet: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"baenet: {e}", file=sys.stderr)
        return 3
    except BaeNetError as e:
        print(f"baenet: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
