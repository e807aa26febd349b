"""Training stages, point sampling, and dense field inference.

Stage one fits the template decoder alone: its grid is scored each step
against one training subject's labels downsampled to template
resolution. Stage two freezes the resulting grid and trains encoder +
deformation + correction end to end on randomly sampled points.

All randomness flows from TrainConfig.seed through named child streams,
so a rerun with the same config reproduces parameters bit for bit.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .model import (
    EncoderConfig,
    HeadConfig,
    Pipeline,
    PipelineConfig,
    TemplateConfig,
    TemplateNet,
)
from .nn import AdamW, Tensor, ops
from .phantom import Subject
from .volume import GridDims, LabelVolume, downsample, nearest_label

INPUT_MODES = ("I", "IBAV", "L", "LBAV")
_MODE_CHANNELS = {"I": 1, "IBAV": 4, "L": 1, "LBAV": 4}

# architecture defaults sized for one desk CPU; not exposed on the CLI
ENCODER_CHANNELS = (8, 16, 32, 64)
HEAD_HIDDEN = (96, 96)
TEMPLATE_DEFAULTS = {"latent_dim": 64, "resolution": 32, "channels": (32, 16, 8, 8)}
INFER_CHUNK = 4096


class NumericalError(Exception):
    """Raised when a loss or parameter goes non-finite during optimization."""


@dataclass(frozen=True)
class TrainConfig:
    input_mode: str = "IBAV"
    points_per_subject: int = 4096
    gamma: float = 0.5  # fraction of points drawn uniformly; rest near trees
    lr: float = 1e-3
    lambda_def: float = 0.01
    alpha: float = 0.5
    beta: float = 1.0
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.points_per_subject < 1 or self.epochs < 1:
            raise ValueError("points_per_subject and epochs must be positive")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def assemble_input(subject: Subject, mode: str) -> np.ndarray:
    """Input channels for one subject as (c, d, h, w) float64.

    I: centered image. IBAV: image plus the three binary tree masks.
    L: lobe ids scaled to [0, 1]. LBAV: lobe channel plus tree masks.
    """
    if mode not in INPUT_MODES:
        raise ValueError(f"unknown input mode {mode!r}")
    img = subject.image.data.astype(np.float64)
    img = img - img.mean()
    lob = subject.lobes.data.astype(np.float64) / subject.spec.num_lobes
    trees = [
        (subject.bronchi.data > 0).astype(np.float64),
        (subject.artery.data > 0).astype(np.float64),
        (subject.vein.data > 0).astype(np.float64),
    ]
    if mode == "I":
        chans = [img]
    elif mode == "IBAV":
        chans = [img, *trees]
    elif mode == "L":
        chans = [lob]
    else:
        chans = [lob, *trees]
    return np.stack(chans)


@dataclass
class PointBatch:
    coords: np.ndarray  # (n, 3) normalized (x, y, z)
    labels: np.ndarray  # (n,) uint8 segment classes
    bav_mask: np.ndarray  # (n,) bool, True where the point was tree-guided
    bav_fallback: bool  # True when no tree voxels existed to sample near


def sample_points(subject: Subject, n: int, gamma: float, rng: np.random.Generator) -> PointBatch:
    """Mix of uniform cube samples and samples near tree voxels.

    ceil(gamma * n) points are uniform over the cube; the rest land on
    random bronchi/artery/vein voxel centers plus ~1.5 voxels of
    Gaussian jitter. With no tree voxels at all the guided share falls
    back to uniform and the batch is flagged.
    """
    n_uniform = int(math.ceil(gamma * n))
    n_guided = n - n_uniform
    dims = subject.segments.dims
    parts = []
    if n_uniform:
        parts.append(rng.uniform(-1.0, 1.0, size=(n_uniform, 3)))
    fallback = False
    guided_ok = 0
    if n_guided:
        support = (
            (subject.bronchi.data > 0) | (subject.artery.data > 0) | (subject.vein.data > 0)
        )
        vox = np.argwhere(support)  # (m, 3) as (z, y, x)
        if len(vox) == 0:
            fallback = True
            parts.append(rng.uniform(-1.0, 1.0, size=(n_guided, 3)))
        else:
            pick = vox[rng.integers(0, len(vox), size=n_guided)]
            n_xyz = np.array(dims.xyz, dtype=np.float64)
            centers = 2.0 * pick[:, ::-1] / (n_xyz - 1.0) - 1.0  # zyx -> xyz
            jitter = rng.normal(0.0, 1.5, size=(n_guided, 3)) * (2.0 / (n_xyz - 1.0))
            parts.append(np.clip(centers + jitter, -1.0, 1.0))
            guided_ok = n_guided
    coords = np.concatenate(parts) if parts else np.empty((0, 3))
    labels = nearest_label(subject.segments, coords)
    mask = np.zeros(n, dtype=bool)
    if guided_ok:
        mask[n - guided_ok :] = True
    return PointBatch(coords=coords, labels=labels, bav_mask=mask, bav_fallback=fallback)


def grid_points(dims: GridDims) -> np.ndarray:
    """Normalized (x, y, z) coordinates of every voxel center, raster order.

    Uses the exact expression 2*j/(n-1) - 1 per axis so a center shared
    by two resolutions gets bitwise-identical coordinates in both.
    """
    d, h, w = dims.shape
    xs = 2.0 * np.arange(w) / (w - 1) - 1.0
    ys = 2.0 * np.arange(h) / (h - 1) - 1.0
    zs = 2.0 * np.arange(d) / (d - 1) - 1.0
    zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)


# ------------------------------------------------------------------ stage one


def pretrain_template(
    subjects: list[Subject],
    num_classes: int,
    alpha: float = 0.5,
    beta: float = 1.0,
    lr: float = 1e-3,
    epochs: int = 30,
    seed: int = 0,
    template_kwargs: dict | None = None,
) -> tuple[TemplateNet, list[dict]]:
    """Fit the template decoder against per-subject downsampled labels."""
    if not subjects:
        raise ValueError("need at least one training subject")
    cfg = TemplateConfig(num_classes=num_classes, **{**TEMPLATE_DEFAULTS, **(template_kwargs or {})})
    ss = np.random.SeedSequence([seed, 1])
    init_rng, order_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    net = TemplateNet(cfg, init_rng)
    opt = AdamW(net.parameters(), lr=lr)
    r = cfg.resolution
    targets = []
    eye = np.eye(num_classes)
    for s in subjects:
        if s.segments.num_classes != num_classes:
            raise ValueError("subjects disagree on the number of classes")
        lab = downsample(s.segments, GridDims(r, r, r)).data.reshape(-1)
        targets.append((lab.astype(np.int64), eye[lab]))
    history = []
    for epoch in range(epochs):
        order = order_rng.permutation(len(subjects))
        ce_sum = dice_sum = 0.0
        for idx in order:
            lab, onehot = targets[idx]
            grid = net.generate()  # (k, r, r, r)
            flat = ops.moveaxis(ops.reshape(grid, (num_classes, r**3)), 0, 1)
            ce = ops.cross_entropy(flat, lab)
            dice_l = ops.soft_dice_loss(ops.softmax(flat, axis=1), onehot)
            loss = ops.add(ops.mul(ce, alpha), ops.mul(dice_l, beta))
            if not np.isfinite(loss.data):
                raise NumericalError(f"template pretraining diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            ce_sum += ce.item()
            dice_sum += dice_l.item()
        n = len(subjects)
        history.append(
            {
                "epoch": epoch,
                "split": "pretrain",
                "loss_ce": ce_sum / n,
                "loss_dice": dice_sum / n,
                "loss_total": alpha * ce_sum / n + beta * dice_sum / n,
            }
        )
    return net, history


# ------------------------------------------------------------------ stage two


def template_kwargs_for_resolution(r: int) -> dict:
    """Template constructor kwargs whose stage count reaches side r.

    The seed block has side 4 and every stage doubles it, so r must be
    4 * 2**k; channel widths follow the defaults, padded with the last.
    """
    side, stages = 4, 1
    while side < r:
        side *= 2
        stages += 1
    if side != r:
        raise ValueError(f"template resolution {r} is not 4 * 2**k")
    base = TEMPLATE_DEFAULTS["channels"]
    return {
        "latent_dim": TEMPLATE_DEFAULTS["latent_dim"],
        "resolution": r,
        "channels": tuple(base[i] if i < len(base) else base[-1] for i in range(stages)),
        "seed_side": 4,
    }


def _frozen_template_config(k1: int, r: int) -> TemplateConfig:
    # the decoder channels are inert once the grid is frozen, but the
    # config still has to pass its own consistency check
    return TemplateConfig(num_classes=k1, **template_kwargs_for_resolution(r))


def build_pipeline(
    template_grid: np.ndarray,
    input_mode: str,
    seed: int,
    encoder_channels: tuple[int, ...] = ENCODER_CHANNELS,
    hidden: tuple[int, ...] = HEAD_HIDDEN,
) -> Pipeline:
    k1, r = template_grid.shape[0], template_grid.shape[1]
    cfg = PipelineConfig(
        encoder=EncoderConfig(in_channels=_MODE_CHANNELS[input_mode], channels=tuple(encoder_channels)),
        template=_frozen_template_config(k1, r),
        deform=HeadConfig(hidden=tuple(hidden)),
        correct=HeadConfig(hidden=tuple(hidden)),
    )
    init_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    return Pipeline(cfg, template_grid, init_rng)


def train_main(
    subjects: dict[str, Subject],
    split: dict[str, list[str]],
    config: TrainConfig,
    template_grid: np.ndarray,
    encoder_channels: tuple[int, ...] = ENCODER_CHANNELS,
    hidden: tuple[int, ...] = HEAD_HIDDEN,
    val_every: int = 0,
    val_subjects_cap: int = 3,
    select_best: bool = True,
    checkpoint_every: int = 0,
    checkpoint_dir=None,
) -> tuple[Pipeline, list[dict]]:
    """End-to-end stage-two training; returns the pipeline and log records.

    val_every 0 derives a light schedule (about four validation passes);
    validation runs dense inference on at most val_subjects_cap subjects.
    With select_best the returned parameters come from the validation
    pass with the highest macro Dice (ties keep the earlier epoch).
    checkpoint_every > 0 saves a numbered checkpoint into checkpoint_dir
    on that epoch cadence.
    """
    train_ids = list(split["train"])
    if not train_ids:
        raise ValueError("empty training split")
    pipe = build_pipeline(template_grid, config.input_mode, config.seed, encoder_channels, hidden)
    opt = AdamW(pipe.parameters(), lr=config.lr)
    ss = np.random.SeedSequence([config.seed, 3])
    order_rng, point_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    inputs = {sid: assemble_input(subjects[sid], config.input_mode) for sid in train_ids}
    k1 = template_grid.shape[0]
    eye = np.eye(k1)
    if val_every <= 0:
        val_every = max(1, config.epochs // 4)
    records = []
    best = None  # (dice, param snapshot)
    for epoch in range(config.epochs):
        sums = {"ce": 0.0, "dice": 0.0, "def": 0.0, "total": 0.0}
        for idx in order_rng.permutation(len(train_ids)):
            sid = train_ids[idx]
            subj = subjects[sid]
            batch = sample_points(subj, config.points_per_subject, config.gamma, point_rng)
            levels = pipe.encode_volume(inputs[sid])
            logits, disp = pipe.forward_points(levels, batch.coords)
            ce = ops.cross_entropy(logits, batch.labels.astype(np.int64))
            dice_l = ops.soft_dice_loss(ops.softmax(logits, axis=1), eye[batch.labels])
            pen = ops.deformation_penalty(disp)
            loss = ops.add(
                ops.add(ops.mul(ce, config.alpha), ops.mul(dice_l, config.beta)),
                ops.mul(pen, config.lambda_def),
            )
            if not np.isfinite(loss.data):
                raise NumericalError(f"training diverged at epoch {epoch} on {sid}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["ce"] += ce.item()
            sums["dice"] += dice_l.item()
            sums["def"] += pen.item()
            sums["total"] += loss.item()
        n = len(train_ids)
        records.append(
            {
                "epoch": epoch,
                "split": "train",
                "loss_ce": sums["ce"] / n,
                "loss_dice": sums["dice"] / n,
                "loss_def": sums["def"] / n,
                "loss_total": sums["total"] / n,
                "dice_macro": None,
            }
        )
        last = epoch == config.epochs - 1
        if split.get("val") and (epoch % val_every == val_every - 1 or last):
            dices = []
            for sid in split["val"][:val_subjects_cap]:
                subj = subjects[sid]
                pred = infer_labels(pipe, assemble_input(subj, config.input_mode), subj.segments.dims)
                dices.append(metrics_mod.dice_macro(subj.segments, pred)[1])
            val_dice = float(np.mean(dices))
            records.append(
                {
                    "epoch": epoch,
                    "split": "val",
                    "loss_ce": None,
                    "loss_dice": None,
                    "loss_def": None,
                    "loss_total": None,
                    "dice_macro": val_dice,
                }
            )
            if select_best and (best is None or val_dice > best[0]):
                best = (val_dice, [p.data.copy() for p in pipe.parameters()])
        if checkpoint_every > 0 and checkpoint_dir is not None and (epoch + 1) % checkpoint_every == 0:
            from .model import save_pipeline

            save_pipeline(Path(checkpoint_dir) / f"epoch_{epoch:04d}.snn", pipe)
    if best is not None:
        for p, snap in zip(pipe.parameters(), best[1]):
            p.data = snap
    return pipe, records


# ------------------------------------------------------------------ inference


def infer_labels(
    pipe: Pipeline, input_volume: np.ndarray, out_dims: GridDims, chunk: int = INFER_CHUNK
) -> LabelVolume:
    """Dense argmax labels at any output resolution.

    The output grid never has to match the input grid: points are
    normalized cube coordinates and the field is continuous.
    """
    levels = pipe.encode_volume(input_volume)
    pts = grid_points(out_dims)
    out = np.empty(len(pts), dtype=np.uint8)
    for i in range(0, len(pts), chunk):
        logits, _ = pipe.forward_points(levels, pts[i : i + chunk])
        out[i : i + chunk] = np.argmax(logits.data, axis=1).astype(np.uint8)
    return LabelVolume(out.reshape(out_dims.shape), pipe.config.template.num_classes)


def infer_logits(
    pipe: Pipeline, input_volume: np.ndarray, out_dims: GridDims, chunk: int = INFER_CHUNK
) -> np.ndarray:
    """Dense raw logits (num_classes, d, h, w); inspection/debug path."""
    levels = pipe.encode_volume(input_volume)
    pts = grid_points(out_dims)
    k1 = pipe.config.template.num_classes
    out = np.empty((len(pts), k1))
    for i in range(0, len(pts), chunk):
        logits, _ = pipe.forward_points(levels, pts[i : i + chunk])
        out[i : i + chunk] = logits.data
    return np.moveaxis(out, 1, 0).reshape(k1, *out_dims.shape)


def template_only_labels(template_grid: np.ndarray, out_dims: GridDims) -> LabelVolume:
    """Argmax of the frozen template sampled at the output centers; the
    no-deformation no-correction baseline."""
    from .volume import sample_grid

    vals = sample_grid(template_grid, grid_points(out_dims))
    lab = np.argmax(vals, axis=1).astype(np.uint8)
    return LabelVolume(lab.reshape(out_dims.shape), template_grid.shape[0])


def mean_displacement(pipe: Pipeline, input_volume: np.ndarray, coords: np.ndarray) -> float:
    """Mean displacement norm over coords; used to compare penalty settings."""
    levels = pipe.encode_volume(input_volume)
    total = 0.0
    for i in range(0, len(coords), INFER_CHUNK):
        _, disp = pipe.forward_points(levels, coords[i : i + INFER_CHUNK])
        total += float(np.linalg.norm(disp.data, axis=1).sum())
    return total / len(coords)


def evaluate_split(
    pipe: Pipeline,
    subjects: dict[str, Subject],
    ids: list[str],
    input_mode: str,
    tau: float = 1.0,
) -> list[metrics_mod.MetricsReport]:
    reports = []
    for sid in ids:
        subj = subjects[sid]
        pred = infer_labels(pipe, assemble_input(subj, input_mode), subj.segments.dims)
        reports.append(metrics_mod.evaluate_subject(subj, pred, tau=tau, subject_id=sid))
    return reports
