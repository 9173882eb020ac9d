"""``incdet`` command line: train, incr, eval, anchor-stats, gen-data, plot.

Configuration comes from built-in defaults, then an optional YAML/JSON file
(``--config``; a run manifest written by a previous command also works), then
flags. Everything is validated before any file is written.

Exit codes: 0 success, 1 runtime failure, 2 configuration or validation error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import (ManifestError, SyntheticSceneSpec, generate_synthetic_dataset, load_dataset,
                   load_manifest, strip_annotations, write_dataset)
from .detector import (DetectorConfig, build_detector, load_checkpoint, read_checkpoint_meta,
                       save_checkpoint)
from .distill import DistillationConfig, NonFiniteLossError
from .evaluation import COCO_THRESHOLDS
from .geometry import (AnchorGridSpec, ConfigurationError, generate_anchors,
                       missing_annotation_stats)
from .incremental import (LOSS_COLUMNS, ScheduleError, TaskSchedule, TrainConfig, evaluate_model,
                          run_schedule, train)

log = logging.getLogger("incdet")

# Desk-scale defaults for the synthetic-shapes task.
DEFAULTS = {
    "seed": None,
    "detector": {},
    "train": {"lr": 0.02, "iterations": 1500, "lr_decay_iter": 1125, "batch_size": 4},
    "incremental": {"lr": 0.005, "iterations": 800, "batch_size": 4},
    "distill": {},
    "anchors": {},
    "schedule": None,
}
SECTIONS = {"detector": DetectorConfig, "train": TrainConfig, "incremental": TrainConfig,
            "distill": DistillationConfig, "anchors": AnchorGridSpec}


class UsageError(Exception):
    """Bad configuration or inputs; maps to exit code 2."""


# --- configuration ------------------------------------------------------------------------


def _read_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise UsageError(f"{path}: cannot parse: {e}") from e
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: top level must be a mapping")
    if "config" in raw and "command" in raw:  # run manifest
        raw = raw["config"]
    return raw


def _check_keys(section, d, cls):
    import dataclasses

    known = {f.name for f in dataclasses.fields(cls)}
    if section in ("train", "incremental"):
        known.discard("distill")
    bad = set(d) - known
    if bad:
        raise UsageError(f"unknown key(s) in '{section}': {sorted(bad)}")


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        raw = _read_config(args.config)
        bad = set(raw) - set(DEFAULTS)
        if bad:
            raise UsageError(f"unknown config section(s): {sorted(bad)}")
        for k, v in raw.items():
            if isinstance(cfg.get(k), dict) and v is not None:
                if not isinstance(v, dict):
                    raise UsageError(f"section '{k}' must be a mapping")
                cfg[k].update(v)
            else:
                cfg[k] = v
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    section = "incremental" if args.command == "incr" else "train"
    if getattr(args, "iterations", None) is not None:
        cfg[section]["iterations"] = args.iterations
    for i in (1, 2, 3):
        v = getattr(args, f"lambda{i}", None)
        if v is not None:
            cfg["distill"][f"lambda{i}"] = v
    if getattr(args, "distill_threshold", None) is not None:
        cfg["distill"]["T"] = args.distill_threshold
    for name, cls in SECTIONS.items():
        _check_keys(name, cfg[name], cls)
    return cfg


def build_configs(cfg) -> dict:
    """Instantiate (and thereby validate) all config dataclasses."""
    try:
        det = DetectorConfig.from_dict(cfg["detector"])
        dist = DistillationConfig(**cfg["distill"])
        seed = cfg["seed"] if cfg["seed"] is not None else 0
        base = TrainConfig.from_dict({**cfg["train"], "seed": seed})
        incr = TrainConfig.from_dict({**cfg["incremental"], "seed": seed})
        incr.distill = dist
        anchors = AnchorGridSpec(**cfg["anchors"])
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from e
    return {"detector": det, "distill": dist, "train": base, "incremental": incr, "anchors": anchors}


def parse_groups(text: str) -> list:
    """``"a,b;c;d"`` -> ``[["a", "b"], ["c"], ["d"]]``."""
    groups = [[c.strip() for c in g.split(",") if c.strip()] for g in text.split(";")]
    if not groups or any(not g for g in groups):
        raise UsageError(f"bad class-group list {text!r}")
    return groups


def _need_file(path, what):
    if path is None or not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_manifest(path, what="dataset manifest"):
    path = _need_file(path, what)
    try:
        return load_manifest(path)
    except ManifestError as e:
        raise UsageError(str(e)) from e


def _load_dataset(manifest):
    try:
        return load_dataset(manifest)
    except (ManifestError, OSError) as e:
        raise UsageError(str(e)) from e


def _prepare_out(path) -> Path:
    if path is None:
        raise UsageError("--out is required")
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    return out


# --- outputs ------------------------------------------------------------------------------


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


class LossLog:
    def __init__(self):
        self.rows = []

    def add(self, step, it, lr, out):
        self.rows.append({"step": step, "iteration": it, "lr": lr, **out.to_row()})

    def write(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, LOSS_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def _step_metrics(step, classes, report):
    rec = {"step": step, "classes": list(classes)}
    if report is not None:
        rec.update({"mAP@0.5": report.map50, "old_mAP@0.5": report.old_map50 if report.old_classes
                    else None, "new_mAP@0.5": report.new_map50})
    return rec


def _write_report(out, stem, report):
    (out / f"{stem}.json").write_text(report.dumps() + "\n")
    (out / f"{stem}.csv").write_text(report.to_csv())


def _manifest(args, cfg, label, inputs, outputs, steps=()):
    return {
        "command": args.command,
        "version": __version__,
        "label": label,
        "argv": list(args.argv),
        "config": cfg,
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in inputs.items()},
        "outputs": sorted(outputs),
        "steps": list(steps),
    }


# --- commands -----------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if cfg["seed"] is None:
        raise UsageError("a seed is required for training (--seed or 'seed' in the config)")
    confs = build_configs(cfg)
    manifest = _load_manifest(args.data)
    test_manifest = _load_manifest(args.test, "test manifest") if args.test else None
    classes = parse_groups(args.classes)[0] if args.classes else list(manifest.classes)
    unknown = set(classes) - set(manifest.classes)
    if unknown:
        raise UsageError(f"classes {sorted(unknown)} not in dataset vocabulary {manifest.classes}")
    out = _prepare_out(args.out)
    data = _load_dataset(manifest)
    test = _load_dataset(test_manifest) if test_manifest else None

    seed = cfg["seed"]
    model = build_detector(confs["detector"], classes, seed=seed)
    losses = LossLog()
    samples = strip_annotations(data, classes).samples
    train(model, None, samples, confs["train"], lambda it, lr, o: losses.add(0, it, lr, o))
    report = evaluate_model(model, test.samples, [], classes) if test else None

    out.mkdir(parents=True, exist_ok=True)
    outputs = ["model.safetensors", "loss.csv", "run.json"]
    save_checkpoint(model, out / "model.safetensors", {"step": 0, "seed": seed})
    losses.write(out / "loss.csv")
    if report is not None:
        _write_report(out, "report", report)
        outputs += ["report.json", "report.csv"]
    inputs = {"data": args.data, **({"test": args.test} if args.test else {})}
    _write_json(out / "run.json", _manifest(args, cfg, "base", inputs, outputs,
                                            [_step_metrics(0, classes, report)]))
    print(f"trained {classes} for {confs['train'].iterations} iterations -> {out / 'model.safetensors'}")
    if report is not None:
        print(f"mAP@0.5 = {report.map50:.4f}")
    return 0


def cmd_incr(args) -> int:
    cfg = resolve_config(args)
    if cfg["seed"] is None:
        raise UsageError("a seed is required for training (--seed or 'seed' in the config)")
    confs = build_configs(cfg)
    ckpt = _need_file(args.checkpoint, "checkpoint")
    try:
        meta = read_checkpoint_meta(ckpt)
    except ConfigurationError as e:
        raise UsageError(str(e)) from e
    old = list(meta["classes"])
    if args.schedule:
        steps = parse_groups(args.schedule)
    elif cfg["schedule"]:
        sch = cfg["schedule"]
        if sch.get("initial") is not None and list(sch["initial"]) != old:
            raise UsageError(f"schedule initial classes {sch['initial']} do not match "
                             f"checkpoint classes {old}")
        steps = [list(g) for g in sch.get("steps", [])]
    else:
        raise UsageError("no schedule given (--schedule or 'schedule' in the config)")
    try:
        schedule = TaskSchedule(old, steps)
    except ScheduleError as e:
        raise UsageError(f"schedule does not fit checkpoint classes {old}: {e}") from e
    if not args.data:
        raise UsageError("--data is required")
    if len(args.data) not in (1, len(steps)):
        raise UsageError(f"{len(args.data)} datasets for {len(steps)} steps")
    manifests = [_load_manifest(p) for p in args.data]
    if len(manifests) == 1:
        manifests = manifests * len(steps)
    for i, (m, g) in enumerate(zip(manifests, steps), start=1):
        missing = set(g) - set(m.classes)
        if missing:
            raise UsageError(f"step {i}: classes {sorted(missing)} not in dataset vocabulary")
    test_manifest = _load_manifest(args.test, "test manifest") if args.test else None
    if test_manifest and set(schedule.all_classes) - set(test_manifest.classes):
        raise UsageError("test set vocabulary lacks some schedule classes")
    out = _prepare_out(args.out)
    base = load_checkpoint(ckpt)
    cache = {}
    datasets = [cache.setdefault(id(m), _load_dataset(m)) for m in manifests]
    test = _load_dataset(test_manifest) if test_manifest else None

    label = "distill" if confs["distill"].active else "finetune-control"
    losses = LossLog()
    out.mkdir(parents=True, exist_ok=True)
    results = run_schedule(schedule, datasets, confs["detector"], confs["train"], confs["incremental"],
                           eval_samples=test.samples if test else None, out_dir=out, base_model=base,
                           on_step=losses.add)
    outputs = ["loss.csv", "run.json"]
    for r in results:
        if r.checkpoint is not None:
            outputs.append(r.checkpoint.name)
        if r.report is not None:
            _write_report(out, f"report_step{r.step}", r.report)
            outputs += [f"report_step{r.step}.json", f"report_step{r.step}.csv"]
    losses.write(out / "loss.csv")
    inputs = {"checkpoint": ckpt, **{f"data{i}": p for i, p in enumerate(args.data, start=1)},
              **({"test": args.test} if args.test else {})}
    _write_json(out / "run.json", _manifest(args, cfg, label, inputs, outputs,
                                            [_step_metrics(r.step, r.classes, r.report) for r in results]))
    for r in results:
        if r.report is not None:
            print(f"step {r.step} ({label}): mAP@0.5 {r.report.map50:.4f}  "
                  f"old {r.report.old_map50:.4f}  new {r.report.new_map50:.4f}")
    print(f"{len(steps)} incremental step(s) -> {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = _need_file(args.checkpoint, "checkpoint")
    try:
        meta = read_checkpoint_meta(ckpt)
    except ConfigurationError as e:
        raise UsageError(str(e)) from e
    manifest = _load_manifest(args.data)
    classes = list(meta["classes"])
    missing = set(classes) - set(manifest.classes)
    if missing:
        raise UsageError(f"checkpoint classes {sorted(missing)} not in dataset vocabulary")
    old = parse_groups(args.old_classes)[0] if args.old_classes else []
    if set(old) - set(classes):
        raise UsageError("--old-classes must be checkpoint classes")
    out = _prepare_out(args.out)
    thresholds = COCO_THRESHOLDS if args.coco else tuple(args.iou)
    model = load_checkpoint(ckpt)
    data = _load_dataset(manifest)
    new = [c for c in classes if c not in old]
    report = evaluate_model(model, data.samples, old, new, thresholds)
    out.mkdir(parents=True, exist_ok=True)
    _write_report(out, "report", report)
    print(report.to_csv(), end="")
    print(f"mAP@[{','.join(f'{t:g}' for t in thresholds)}] = {report.map_coco:.4f}")
    return 0


def cmd_anchor_stats(args) -> int:
    cfg = resolve_config(args)
    spec = build_configs(cfg)["anchors"]
    if args.data is None and args.image_size is None:
        raise UsageError("need --data or --image-size")
    if args.image_size is not None:
        try:
            w, h = (int(v) for v in args.image_size.lower().split("x"))
        except ValueError as e:
            raise UsageError(f"--image-size must look like 480x364, got {args.image_size!r}") from e
        n = len(generate_anchors(spec, w, h))
        fw, fh = spec.grid_size(w, h)
        print(f"image {w}x{h}: {fw}x{fh} grid x {spec.shapes_per_location} shapes = {n} anchors")
        if args.data is None:
            return 0
    manifest = _load_manifest(args.data)
    visible = parse_groups(args.visible)[0] if args.visible else list(manifest.classes)
    if set(visible) - set(manifest.classes):
        raise UsageError(f"visible classes {sorted(set(visible) - set(manifest.classes))} unknown")
    out = _prepare_out(args.out) if args.out else None
    data = _load_dataset(manifest)
    rows = []
    total = None
    for s in data.samples:
        full = [a.box for a in s.analysis_annotations()]
        vis = [a.box for a in s.analysis_annotations() if a.label in visible]
        anchors = generate_anchors(spec, s.width, s.height)
        st = missing_annotation_stats(anchors, full, vis, args.pos_thresh, args.neg_thresh,
                                      (s.width, s.height) if args.filter else None)
        rows.append({"image_id": s.image_id, **st.to_record()})
        total = st if total is None else total + st
    agg = total.to_record()
    print(f"{'image':<16}{'anchors':>9}{'negative':>10}{'false_neg':>10}{'rate':>10}")
    for r in rows:
        print(f"{r['image_id']:<16}{r['n_total']:>9}{r['n_negative']:>10}{r['n_false_negative']:>10}"
              f"{100 * r['false_negative_rate']:>9.3f}%")
    print(f"{'TOTAL':<16}{agg['n_total']:>9}{agg['n_negative']:>10}{agg['n_false_negative']:>10}"
          f"{100 * agg['false_negative_rate']:>9.3f}%")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "anchor_stats.json", {"visible": visible, "anchors": cfg["anchors"] or
                                                {k: v for k, v in spec.__dict__.items()},
                                                "images": rows, "aggregate": agg})
    return 0


def cmd_gen_data(args) -> int:
    classes = parse_groups(args.classes)[0]
    try:
        spec = SyntheticSceneSpec(width=args.width, height=args.height, classes=tuple(classes),
                                  min_objects=args.min_objects, max_objects=args.max_objects,
                                  seed=args.seed, require=args.require,
                                  draw_classes=tuple(parse_groups(args.draw)[0]) if args.draw else None)
    except ValueError as e:
        raise UsageError(str(e)) from e
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    out = _prepare_out(args.out)
    ds = generate_synthetic_dataset(spec, args.n, args.prefix)
    path = write_dataset(ds, out)
    print(f"wrote {args.n} images -> {path}")
    return 0


def _read_run(path):
    path = Path(path)
    run = path / "run.json" if path.is_dir() else path
    if not run.is_file():
        raise UsageError(f"no run manifest at {run}")
    d = json.loads(run.read_text())
    loss = run.parent / "loss.csv"
    totals = []
    if loss.is_file():
        with open(loss) as f:
            totals = [float(r["total"]) for r in csv.DictReader(f)]
    points = [(s["step"], s["mAP@0.5"]) for s in d.get("steps", []) if s.get("mAP@0.5") is not None]
    return d.get("label") or run.parent.name, points, totals


def cmd_plot(args) -> int:
    runs = [_read_run(p) for p in args.runs]
    if all(not pts and not tot for _, pts, tot in runs):
        raise UsageError("run logs are empty: nothing to plot")
    out = _prepare_out(args.out)
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out.mkdir(parents=True, exist_ok=True)
    meta = {"Software": None}
    if any(pts for _, pts, _ in runs):
        fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
        for label, pts, _ in runs:
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, [100 * y for y in ys], marker="o", label=label)
        ax.set_xlabel("incremental step")
        ax.set_ylabel("mAP@0.5 (%)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "map_vs_step.png", metadata=meta)
        plt.close(fig)
    if any(tot for _, _, tot in runs):
        fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
        for label, _, tot in runs:
            if tot:
                ax.plot(np.arange(len(tot)), tot, label=label, lw=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("total loss")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "loss.png", metadata=meta)
        plt.close(fig)
    print(f"figures -> {out}")
    return 0


# --- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="incdet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"incdet {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, train_flags=False):
        sp.add_argument("--config", help="YAML/JSON config or a previous run.json")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        if train_flags:
            sp.add_argument("--iterations", type=int)
            for i in (1, 2, 3):
                sp.add_argument(f"--lambda{i}", type=float)
            sp.add_argument("--distill-threshold", type=float, help="RPN regression gate margin T")

    sp = sub.add_parser("train", help="train a base detector")
    common(sp, True)
    sp.add_argument("--data", required=True, help="training manifest")
    sp.add_argument("--test", help="evaluation manifest")
    sp.add_argument("--classes", help="comma-separated classes to learn (default: all)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("incr", help="incremental steps from a checkpoint")
    common(sp, True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", action="append", help="manifest per step (or one for all)")
    sp.add_argument("--test", help="evaluation manifest")
    sp.add_argument("--schedule", help='new-class groups, e.g. "c" or "c,d;e"')
    sp.set_defaults(func=cmd_incr)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iou", type=float, nargs="+", default=[0.5])
    sp.add_argument("--coco", action="store_true", help="IoU 0.5:0.05:0.95")
    sp.add_argument("--old-classes", help="comma-separated old classes for the old/new split")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("anchor-stats", help="false-negative anchors from missing annotations")
    sp.add_argument("--config")
    sp.add_argument("--out")
    sp.add_argument("--data")
    sp.add_argument("--visible", help="comma-separated annotated classes (default: all)")
    sp.add_argument("--image-size", help="WxH; print the anchor count for this size")
    sp.add_argument("--pos-thresh", type=float, default=0.7)
    sp.add_argument("--neg-thresh", type=float, default=0.3)
    sp.add_argument("--filter", action="store_true", help="drop cross-boundary and tiny anchors")
    sp.set_defaults(func=cmd_anchor_stats)

    sp = sub.add_parser("gen-data", help="render a synthetic shapes dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--classes", default="circle,square,triangle")
    sp.add_argument("--draw", help="subset of classes to draw")
    sp.add_argument("--require", help="class present in every image")
    sp.add_argument("--width", type=int, default=96)
    sp.add_argument("--height", type=int, default=96)
    sp.add_argument("--min-objects", type=int, default=1)
    sp.add_argument("--max-objects", type=int, default=3)
    sp.add_argument("--prefix", default="img")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("plot", help="mAP-vs-step and loss curves from run directories")
    sp.add_argument("runs", nargs="+", help="run directories or run.json files")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, ScheduleError, ManifestError) as e:
        print(f"incdet {args.command}: error: {e}", file=sys.stderr)
        return 2
    except NonFiniteLossError as e:
        print(f"incdet {args.command}: aborted: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - report and map to exit 1
        log.debug("failure", exc_info=True)
        print(f"incdet {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
