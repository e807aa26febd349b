"""Voxel-level and structure-level segmentation scores.

Voxel level: per-class Dice and normalized surface distance (NSD).
Structure level: how badly each tubular tree pokes out of its assigned
segment, counted per connected escape piece (branches) and measured as
the worst escape depth (distance).  Veins are scored nowhere here; they
cross segment boundaries by design and would only add noise.

Every score has a brute-force twin in oracle_* functions: same
definitions, exhaustive pairwise computation, no spatial index.  The
fast paths must match them exactly; tests enforce it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .volume import LabelVolume, connected_components, surface_voxels


def dice(gt: LabelVolume, pred: LabelVolume, cls: int) -> float:
    """Dice overlap of one class: 2|A&B| / (|A|+|B|).

    Both masks empty scores 1.0 (nothing to find, nothing found);
    exactly one empty scores 0.0.
    """
    if gt.dims != pred.dims:
        raise ValueError(f"dims mismatch {gt.dims} vs {pred.dims}")
    a = gt.data == cls
    b = pred.data == cls
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    inter = int((a & b).sum())
    return 2.0 * inter / (na + nb)


def dice_macro(gt: LabelVolume, pred: LabelVolume) -> tuple[dict[int, float], float]:
    """Per-class Dice over foreground classes 1..K-1 plus their mean."""
    per = {c: dice(gt, pred, c) for c in range(1, gt.num_classes)}
    return per, float(np.mean(list(per.values())))


def nsd(gt: LabelVolume, pred: LabelVolume, cls: int, tau: float = 1.0) -> float:
    """Normalized surface distance at tolerance tau (voxel units).

    Fraction of the two 6-adjacency surfaces lying within Euclidean
    distance tau of the other surface.  Empty/empty is 1.0, one empty 0.0.
    """
    if gt.dims != pred.dims:
        raise ValueError(f"dims mismatch {gt.dims} vs {pred.dims}")
    s = surface_voxels(gt, cls)
    t = surface_voxels(pred, cls)
    if not s and not t:
        return 1.0
    if not s or not t:
        return 0.0
    sa = np.array(sorted(s), dtype=np.float64)
    ta = np.array(sorted(t), dtype=np.float64)
    ds = cKDTree(ta).query(sa, k=1)[0]
    dt = cKDTree(sa).query(ta, k=1)[0]
    return (int((ds <= tau).sum()) + int((dt <= tau).sum())) / (len(s) + len(t))


@dataclass
class IntrusionBranch:
    """One connected piece of a tree that escapes its segment.

    distance is the worst escape depth: max over branch voxels of the
    min Euclidean distance to the predicted segment's surface.  It is
    None when that surface is empty (the segment was never predicted),
    in which case the branch still counts but cannot be measured.
    """

    cls: int
    voxels: set
    distance: float | None


def intrusion_branches(tree: LabelVolume, pred_seg: LabelVolume, cls: int) -> list[IntrusionBranch]:
    """26-connected components of tree voxels of class cls outside predicted segment cls."""
    if tree.dims != pred_seg.dims:
        raise ValueError(f"dims mismatch {tree.dims} vs {pred_seg.dims}")
    escape = (tree.data == cls) & (pred_seg.data != cls)
    vox = {(int(x), int(y), int(z)) for z, y, x in zip(*np.nonzero(escape))}
    comps = connected_components(vox, 26)
    surf = surface_voxels(pred_seg, cls)
    out = []
    kd = cKDTree(np.array(sorted(surf), dtype=np.float64)) if surf else None
    for comp in comps:
        if kd is None:
            out.append(IntrusionBranch(cls, comp, None))
            continue
        pts = np.array(sorted(comp), dtype=np.float64)
        out.append(IntrusionBranch(cls, comp, float(kd.query(pts, k=1)[0].max())))
    return out


def intrusion_distance(branch: IntrusionBranch, pred_seg: LabelVolume) -> float | None:
    """Recompute one branch's escape depth against pred_seg's surface."""
    surf = surface_voxels(pred_seg, branch.cls)
    if not surf:
        return None
    kd = cKDTree(np.array(sorted(surf), dtype=np.float64))
    pts = np.array(sorted(branch.voxels), dtype=np.float64)
    return float(kd.query(pts, k=1)[0].max())


@dataclass
class MetricsReport:
    per_class_dice: dict[int, float]
    dice_macro: float
    nsd: float
    nib: int
    idb: float | None
    nia: int
    ida: float | None
    excluded: str = "veins excluded from structure scores by design"
    subject_id: str = ""

    def to_json(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "per_class_dice": {str(k): v for k, v in self.per_class_dice.items()},
            "dice_macro": self.dice_macro,
            "nsd": self.nsd,
            "nib": self.nib,
            "idb": self.idb,
            "nia": self.nia,
            "ida": self.ida,
            "excluded": self.excluded,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        return cls(
            per_class_dice={int(k): float(v) for k, v in obj["per_class_dice"].items()},
            dice_macro=float(obj["dice_macro"]),
            nsd=float(obj["nsd"]),
            nib=int(obj["nib"]),
            idb=None if obj["idb"] is None else float(obj["idb"]),
            nia=int(obj["nia"]),
            ida=None if obj["ida"] is None else float(obj["ida"]),
            excluded=obj.get("excluded", ""),
            subject_id=obj.get("subject_id", ""),
        )


def _tree_scores(tree: LabelVolume, pred_seg: LabelVolume) -> tuple[int, float | None]:
    branches = []
    for cls in range(1, pred_seg.num_classes):
        branches.extend(intrusion_branches(tree, pred_seg, cls))
    count = len(branches)
    measured = [b.distance for b in branches if b.distance is not None]
    return count, (float(np.mean(measured)) if measured else None)


def evaluate_subject(gt_subject, pred_seg: LabelVolume, tau: float = 1.0, subject_id: str = "") -> MetricsReport:
    """Full per-subject report against ground truth.

    gt_subject needs .segments, .bronchi and .artery label volumes
    (a phantom Subject fits).  Dice and NSD are averaged over foreground
    classes; intrusion counts sum over classes, distances average over
    measured branches.
    """
    gt = gt_subject.segments
    per, macro = dice_macro(gt, pred_seg)
    nsds = [nsd(gt, pred_seg, c, tau) for c in range(1, gt.num_classes)]
    nib, idb = _tree_scores(gt_subject.bronchi, pred_seg)
    nia, ida = _tree_scores(gt_subject.artery, pred_seg)
    return MetricsReport(
        per_class_dice=per,
        dice_macro=macro,
        nsd=float(np.mean(nsds)),
        nib=nib,
        idb=idb,
        nia=nia,
        ida=ida,
        subject_id=subject_id,
    )


# ------------------------------------------------------------------ oracles
# Exhaustive recomputation of everything above.  Volumes are capped at
# 16^3 so the pairwise scans stay cheap.  Kept deliberately free of
# cKDTree and of the fast component code path.


def _check_oracle_size(vol: LabelVolume) -> None:
    if max(vol.dims.shape) > 16:
        raise ValueError(f"oracle paths accept at most 16^3 volumes, got {vol.dims.shape}")


def _oracle_surface(lab: LabelVolume, cls: int) -> list[tuple[int, int, int]]:
    d, h, w = lab.data.shape
    out = []
    for z in range(d):
        for y in range(h):
            for x in range(w):
                if lab.data[z, y, x] != cls:
                    continue
                on_surface = False
                for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    nx, ny, nz = x + dx, y + dy, z + dz
                    if not (0 <= nx < w and 0 <= ny < h and 0 <= nz < d) or lab.data[nz, ny, nx] != cls:
                        on_surface = True
                        break
                if on_surface:
                    out.append((x, y, z))
    return out


def _all_min_dists(src: list, dst: list) -> np.ndarray:
    a = np.array(src, dtype=np.float64)
    b = np.array(dst, dtype=np.float64)
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return np.sqrt(d2.min(axis=1))


def oracle_dice(gt: LabelVolume, pred: LabelVolume, cls: int) -> float:
    _check_oracle_size(gt)
    na = nb = inter = 0
    for z in range(gt.dims.d):
        for y in range(gt.dims.h):
            for x in range(gt.dims.w):
                ga = gt.data[z, y, x] == cls
                pb = pred.data[z, y, x] == cls
                na += ga
                nb += pb
                inter += ga and pb
    if na == 0 and nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def oracle_nsd(gt: LabelVolume, pred: LabelVolume, cls: int, tau: float = 1.0) -> float:
    _check_oracle_size(gt)
    s = _oracle_surface(gt, cls)
    t = _oracle_surface(pred, cls)
    if not s and not t:
        return 1.0
    if not s or not t:
        return 0.0
    hits = int((_all_min_dists(s, t) <= tau).sum()) + int((_all_min_dists(t, s) <= tau).sum())
    return hits / (len(s) + len(t))


def _oracle_flood(vox: set) -> list[set]:
    comps = []
    remaining = set(vox)
    while remaining:
        seed = min(remaining, key=lambda v: (v[2], v[1], v[0]))
        comp = set()
        stack = [seed]
        remaining.discard(seed)
        while stack:
            cur = stack.pop()
            comp.add(cur)
            for other in list(remaining):
                if max(abs(cur[0] - other[0]), abs(cur[1] - other[1]), abs(cur[2] - other[2])) == 1:
                    remaining.discard(other)
                    stack.append(other)
        comps.append(comp)
    comps.sort(key=lambda s: min((z, y, x) for (x, y, z) in s))
    return comps


def oracle_tree_scores(tree: LabelVolume, pred_seg: LabelVolume) -> tuple[int, float | None]:
    _check_oracle_size(tree)
    count = 0
    dists = []
    for cls in range(1, pred_seg.num_classes):
        escape = set()
        for z in range(tree.dims.d):
            for y in range(tree.dims.h):
                for x in range(tree.dims.w):
                    if tree.data[z, y, x] == cls and pred_seg.data[z, y, x] != cls:
                        escape.add((x, y, z))
        comps = _oracle_flood(escape)
        count += len(comps)
        surf = _oracle_surface(pred_seg, cls)
        if not surf:
            continue
        for comp in comps:
            dists.append(float(_all_min_dists(sorted(comp), surf).max()))
    return count, (float(np.mean(dists)) if dists else None)


def oracle_evaluate_subject(gt_subject, pred_seg: LabelVolume, tau: float = 1.0) -> MetricsReport:
    gt = gt_subject.segments
    _check_oracle_size(gt)
    per = {c: oracle_dice(gt, pred_seg, c) for c in range(1, gt.num_classes)}
    macro = float(np.mean(list(per.values())))
    nsds = [oracle_nsd(gt, pred_seg, c, tau) for c in range(1, gt.num_classes)]
    nib, idb = oracle_tree_scores(gt_subject.bronchi, pred_seg)
    nia, ida = oracle_tree_scores(gt_subject.artery, pred_seg)
    return MetricsReport(per, macro, float(np.mean(nsds)), nib, idb, nia, ida)
