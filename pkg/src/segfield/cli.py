"""Command-line entry point.

Subcommands cover the whole workflow: phantom (generate a dataset),
pretrain (fit the template), train (fit encoder and heads), infer
(dense labels at any resolution), eval (metric report), export (OBJ
surfaces plus CSV tables).

Every run claims a fresh output directory and writes a manifest there:
first in "running" state before any work, finalized with timings and
artifact paths afterward. A run is reproducible from its manifest.

Exit codes: 0 success, 1 usage error, 2 data or format error,
3 numerical failure. SEGFIELD_THREADS caps BLAS parallelism; paths are
resolved relative to --workdir.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .metrics import evaluate_subject
from .model import load_pipeline, load_template, save_pipeline, save_template
from .nn import CheckpointError
from .phantom import (
    BundleError,
    PhantomError,
    PhantomSpec,
    generate_phantom,
    load_subject,
    save_subject,
    split_dataset,
)
from .train import (
    _MODE_CHANNELS,
    INPUT_MODES,
    NumericalError,
    TrainConfig,
    assemble_input,
    infer_labels,
    pretrain_template,
    template_kwargs_for_resolution,
    train_main,
)
from .volume import GridDims, LabelVolume, SvolFormatError, load_svol, read_json, save_svol, write_json


class _Usage(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise _Usage(message)


def _parse_dims(text: str) -> GridDims:
    parts = text.lower().split("x")
    try:
        nums = [int(p) for p in parts]
    except ValueError:
        raise _Usage(f"bad dims {text!r}; use N or DxHxW")
    if len(nums) == 1:
        nums = nums * 3
    if len(nums) != 3:
        raise _Usage(f"bad dims {text!r}; use N or DxHxW")
    return GridDims(*nums)


def _resolve(workdir: str, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else Path(workdir) / path


class _Run:
    """Manifest lifecycle around one subcommand's output directory."""

    def __init__(self, out_dir: Path, command: str, args: argparse.Namespace, argv: list[str]):
        if out_dir.exists():
            raise _Usage(f"output directory {out_dir} already exists; pick a fresh one")
        out_dir.mkdir(parents=True)
        self.out_dir = out_dir
        self.path = out_dir / "manifest.json"
        cfg = {k: _jsonable(v) for k, v in vars(args).items() if k != "func"}
        self.t0 = time.time()
        self.manifest = {
            "command": command,
            "argv": argv,
            "config": cfg,
            "seed": cfg.get("seed"),
            "version": __version__,
            "threads_cap": os.environ.get("SEGFIELD_THREADS"),
            "outputs": {},
            "status": "running",
            "started_at": _now(),
            "finished_at": None,
            "wall_seconds": None,
        }
        write_json(self.path, self.manifest)

    def add_output(self, name: str, path) -> None:
        self.manifest["outputs"][name] = str(path)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.manifest["status"] = "done" if exc_type is None else "failed"
        self.manifest["finished_at"] = _now()
        self.manifest["wall_seconds"] = round(time.time() - self.t0, 3)
        write_json(self.path, self.manifest)
        return False


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    return v


def _load_bundles(data_dir: Path, ids: list[str]) -> dict:
    root = data_dir / "subjects"
    if not root.is_dir():
        raise BundleError(f"{data_dir}: no subjects/ directory")
    out = {}
    for sid in ids:
        sub = root / sid
        if not sub.is_dir():
            raise BundleError(f"{data_dir}: split references missing subject {sid}")
        out[sid] = load_subject(sub)
    return out


def _read_split(path: Path) -> dict:
    split = read_json(path)
    for part in ("train", "val", "test"):
        if part not in split or not isinstance(split[part], list):
            raise BundleError(f"{path}: missing split part {part!r}")
    return split


# ---------------------------------------------------------------- subcommands


def cmd_phantom(args, argv):
    out = _resolve(args.workdir, args.out)
    dims = _parse_dims(args.dims)
    with _Run(out, "phantom", args, argv) as run:
        ids = []
        for i in range(args.n):
            seed_i = int(np.random.SeedSequence([args.seed, i]).generate_state(1)[0])
            spec = PhantomSpec(
                seed=seed_i,
                dims=dims,
                num_lobes=args.lobes,
                segments_per_lobe=args.segments_per_lobe,
                tree_depth=args.depth,
                branch_radius=args.radius,
                noise_std=args.noise,
            )
            sid = f"s{i:04d}"
            save_subject(generate_phantom(spec), out / "subjects" / sid)
            ids.append(sid)
        write_json(out / "split.json", {"seed": args.seed, **split_dataset(ids, args.seed)})
        run.add_output("subjects", out / "subjects")
        run.add_output("split", out / "split.json")
    print(f"wrote {args.n} subject bundles under {out}")
    return 0


def cmd_pretrain(args, argv):
    data = _resolve(args.workdir, args.data)
    split_path = _resolve(args.workdir, args.split) if args.split else data / "split.json"
    out = _resolve(args.workdir, args.out)
    split = _read_split(split_path)
    subjects = _load_bundles(data, split["train"])
    if not subjects:
        raise BundleError(f"{split_path}: empty training split")
    num_classes = next(iter(subjects.values())).segments.num_classes
    kwargs = template_kwargs_for_resolution(args.resolution)
    with _Run(out, "pretrain", args, argv) as run:
        net, history = pretrain_template(
            list(subjects.values()),
            num_classes,
            alpha=args.alpha,
            beta=args.beta,
            lr=args.lr,
            epochs=args.epochs,
            seed=args.seed,
            template_kwargs=kwargs,
        )
        save_template(out / "template.snn", net)
        _write_ndjson(out / "pretrain_log.ndjson", history)
        run.add_output("template", out / "template.snn")
        run.add_output("log", out / "pretrain_log.ndjson")
    print(f"template written to {out / 'template.snn'} (final loss {history[-1]['loss_total']:.4f})")
    return 0


def cmd_train(args, argv):
    data = _resolve(args.workdir, args.data)
    split_path = _resolve(args.workdir, args.split) if args.split else data / "split.json"
    out = _resolve(args.workdir, args.out)
    config = TrainConfig(
        input_mode=args.input_mode,
        points_per_subject=args.points,
        gamma=args.gamma,
        lr=args.lr,
        lambda_def=args.lambda_def,
        alpha=args.alpha,
        beta=args.beta,
        epochs=args.epochs,
        seed=args.seed,
    )
    split = _read_split(split_path)
    subjects = _load_bundles(data, split["train"] + split["val"])
    num_classes = next(iter(subjects.values())).segments.num_classes
    template = load_template(_resolve(args.workdir, args.template_ckpt))
    if template.config.num_classes != num_classes:
        raise CheckpointError(
            f"checkpoint/config mismatch: template has {template.config.num_classes} classes, "
            f"data has {num_classes}"
        )
    with _Run(out, "train", args, argv) as run:
        pipe, records = train_main(subjects, split, config, template.grid())
        save_pipeline(out / "model.snn", pipe)
        _write_ndjson(out / "train_log.ndjson", records)
        run.add_output("model", out / "model.snn")
        run.add_output("log", out / "train_log.ndjson")
    val = [r["dice_macro"] for r in records if r["split"] == "val"]
    tail = f", best val dice {max(val):.4f}" if val else ""
    print(f"model written to {out / 'model.snn'}{tail}")
    return 0


def cmd_infer(args, argv):
    out = _resolve(args.workdir, args.out)
    pipe = load_pipeline(_resolve(args.workdir, args.model))
    subject = load_subject(_resolve(args.workdir, args.subject))
    want = _MODE_CHANNELS[args.input_mode]
    have = pipe.config.encoder.in_channels
    if want != have:
        raise CheckpointError(
            f"checkpoint/config mismatch: model expects {have} input channels, "
            f"mode {args.input_mode} assembles {want}"
        )
    dims = _parse_dims(args.out_dims) if args.out_dims else subject.segments.dims
    with _Run(out, "infer", args, argv) as run:
        pred = infer_labels(pipe, assemble_input(subject, args.input_mode), dims)
        save_svol(out / "pred.svol", pred)
        run.add_output("prediction", out / "pred.svol")
    print(f"prediction {dims.shape} written to {out / 'pred.svol'}")
    return 0


def _load_prediction(path: Path, subject) -> LabelVolume:
    pred = load_svol(path, num_classes=subject.segments.num_classes)
    if not isinstance(pred, LabelVolume):
        raise SvolFormatError(f"{path}: prediction must hold labels, not scalars")
    return pred


def cmd_eval(args, argv):
    out = _resolve(args.workdir, args.out)
    subject = load_subject(_resolve(args.workdir, args.subject))
    pred = _load_prediction(_resolve(args.workdir, args.pred), subject)
    if pred.dims.shape != subject.segments.dims.shape:
        raise BundleError(
            f"prediction dims {pred.dims.shape} != ground truth {subject.segments.dims.shape}"
        )
    with _Run(out, "eval", args, argv) as run:
        report = evaluate_subject(subject, pred, tau=args.tau, subject_id=Path(args.subject).name)
        write_json(out / "report.json", report.to_json())
        run.add_output("report", out / "report.json")
    print(
        f"dice {report.dice_macro:.4f}  nsd {report.nsd:.4f}  "
        f"nib {report.nib}  nia {report.nia}"
    )
    return 0


_FACE_CORNERS = {
    # voxel (x, y, z) owns the unit cube [x-.5, x+.5] x ...; each entry
    # lists the four corner offsets of the face toward that neighbor,
    # wound counterclockwise seen from outside
    (1, 0, 0): [(0.5, -0.5, -0.5), (0.5, 0.5, -0.5), (0.5, 0.5, 0.5), (0.5, -0.5, 0.5)],
    (-1, 0, 0): [(-0.5, -0.5, -0.5), (-0.5, -0.5, 0.5), (-0.5, 0.5, 0.5), (-0.5, 0.5, -0.5)],
    (0, 1, 0): [(-0.5, 0.5, -0.5), (-0.5, 0.5, 0.5), (0.5, 0.5, 0.5), (0.5, 0.5, -0.5)],
    (0, -1, 0): [(-0.5, -0.5, -0.5), (0.5, -0.5, -0.5), (0.5, -0.5, 0.5), (-0.5, -0.5, 0.5)],
    (0, 0, 1): [(-0.5, -0.5, 0.5), (0.5, -0.5, 0.5), (0.5, 0.5, 0.5), (-0.5, 0.5, 0.5)],
    (0, 0, -1): [(-0.5, -0.5, -0.5), (-0.5, 0.5, -0.5), (0.5, 0.5, -0.5), (0.5, -0.5, -0.5)],
}


def write_obj(path, labels: LabelVolume, cls: int) -> int:
    """Axis-aligned voxel faces of one class as a Wavefront mesh.

    Emits one quad per exposed face (neighbor outside the class or
    outside the volume). Returns the face count.
    """
    mask = labels.class_mask(cls)
    d, h, w = labels.dims.shape
    verts: dict[tuple, int] = {}
    faces = []
    for z, y, x in np.argwhere(mask):
        for (dx, dy, dz), corners in _FACE_CORNERS.items():
            nz, ny, nx = z + dz, y + dy, x + dx
            inside = 0 <= nz < d and 0 <= ny < h and 0 <= nx < w
            if inside and mask[nz, ny, nx]:
                continue
            idx = []
            for cx, cy, cz in corners:
                key = (x + cx, y + cy, z + cz)
                if key not in verts:
                    verts[key] = len(verts) + 1
                idx.append(verts[key])
            faces.append(idx)
    with open(path, "w") as fh:
        fh.write(f"# class {cls} voxel-face surface, {len(faces)} quads\n")
        for vx, vy, vz in verts:
            fh.write(f"v {vx} {vy} {vz}\n")
        for a, b, c, e in faces:
            fh.write(f"f {a} {b} {c} {e}\n")
    return len(faces)


def cmd_export(args, argv):
    out = _resolve(args.workdir, args.out)
    subject = load_subject(_resolve(args.workdir, args.subject))
    pred = _load_prediction(_resolve(args.workdir, args.pred), subject)
    if pred.dims.shape != subject.segments.dims.shape:
        raise BundleError(
            f"prediction dims {pred.dims.shape} != ground truth {subject.segments.dims.shape}"
        )
    with _Run(out, "export", args, argv) as run:
        report = evaluate_subject(subject, pred, tau=args.tau, subject_id=Path(args.subject).name)
        n_meshes = 0
        for cls in range(1, pred.num_classes):
            if not pred.class_mask(cls).any():
                continue
            mesh = out / f"class_{cls:02d}.obj"
            write_obj(mesh, pred, cls)
            run.add_output(f"mesh_class_{cls}", mesh)
            n_meshes += 1
        with open(out / "per_class_dice.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["class", "dice"])
            for cls in sorted(report.per_class_dice):
                wr.writerow([cls, f"{report.per_class_dice[cls]:.6f}"])
        with open(out / "summary.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["dice_macro", "nsd", "nib", "idb", "nia", "ida"])
            wr.writerow(
                [
                    f"{report.dice_macro:.6f}",
                    f"{report.nsd:.6f}",
                    report.nib,
                    "" if report.idb is None else f"{report.idb:.6f}",
                    report.nia,
                    "" if report.ida is None else f"{report.ida:.6f}",
                ]
            )
        run.add_output("per_class_dice", out / "per_class_dice.csv")
        run.add_output("summary", out / "summary.csv")
    print(f"wrote {n_meshes} meshes and 2 metric tables to {out}")
    return 0


def _write_ndjson(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


# --------------------------------------------------------------------- wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="segfield", description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", default=".", help="base directory for relative paths")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a procedural dataset with a split file")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dims", default="48")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lobes", type=int, default=2)
    p.add_argument("--segments-per-lobe", type=int, default=2)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--radius", type=float, default=1.6)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--out", default="phantom_out")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("pretrain", help="fit the template on the training split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default=None, help="defaults to <data>/split.json")
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="pretrain_out")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train encoder and heads against a frozen template")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default=None, help="defaults to <data>/split.json")
    p.add_argument("--input-mode", choices=INPUT_MODES, default="IBAV")
    p.add_argument("--points", type=int, default=4096)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lambda-def", type=float, default=0.01)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--template-ckpt", required=True)
    p.add_argument("--out", default="train_out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="dense labels at any output resolution")
    p.add_argument("--model", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--input-mode", choices=INPUT_MODES, default="IBAV")
    p.add_argument("--out-dims", default=None, help="N or DxHxW; defaults to subject dims")
    p.add_argument("--out", default="infer_out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metric report for a prediction")
    p.add_argument("--subject", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--out", default="eval_out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="OBJ surfaces and CSV metric tables")
    p.add_argument("--subject", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--out", default="export_out")
    p.set_defaults(func=cmd_export)
    return parser


def _thread_cap():
    raw = os.environ.get("SEGFIELD_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise _Usage(f"SEGFIELD_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        cap = _thread_cap()
        args = parser.parse_args(argv)
    except _Usage as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        if cap is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=cap):
                return args.func(args, argv)
        return args.func(args, argv)
    except _Usage as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (SvolFormatError, BundleError, CheckpointError, PhantomError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (json.JSONDecodeError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
