"""Procedural lung-like phantoms: lobes, segments, tubular trees, image.

Everything is generated in voxel index space from a single seeded RNG,
so a spec reproduces bit-identically.  The construction guarantees the
invariants the metrics rely on:

* every bronchi / artery voxel of class i lies inside segment i
  (tubes are clipped to their own segment), so ground-truth intrusion
  counts are zero;
* intersegmental-vein voxels sit on segment boundaries (the Voronoi
  ridges of the branch distance fields);
* with one segment per lobe, segments are exactly the lobes relabeled.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import (
    GridDims,
    LabelVolume,
    ScalarVolume,
    load_svol,
    read_json,
    sample_grid,
    save_svol,
    write_json,
)


class PhantomError(Exception):
    """Raised when a spec cannot produce a valid subject (no partial output)."""


class BundleError(Exception):
    """Raised when a saved subject directory is missing files or inconsistent."""


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    dims: GridDims = GridDims(48, 48, 48)
    num_lobes: int = 2
    segments_per_lobe: int = 2
    tree_depth: int = 3
    branch_radius: float = 1.6
    noise_std: float = 0.02

    def __post_init__(self):
        if self.num_lobes < 1 or self.segments_per_lobe < 1:
            raise ValueError("need at least one lobe and one segment per lobe")
        if self.num_classes > 19:
            raise ValueError(f"{self.num_segments} segments exceed the supported 18")
        if self.tree_depth < 1:
            raise ValueError("tree_depth must be >= 1")
        if self.branch_radius < 1.0:
            raise ValueError("branch_radius below 1 voxel cannot be rasterized")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @property
    def num_segments(self) -> int:
        return self.num_lobes * self.segments_per_lobe

    @property
    def num_classes(self) -> int:
        return self.num_segments + 1  # background is class 0

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["dims"] = list(self.dims.shape)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "PhantomSpec":
        obj = dict(obj)
        obj["dims"] = GridDims(*obj["dims"])
        return cls(**obj)


@dataclass
class Subject:
    image: ScalarVolume
    lobes: LabelVolume  # 0 background, 1..num_lobes
    segments: LabelVolume  # 0 background, 1..K
    bronchi: LabelVolume  # segment class of the owning subtree, 0 elsewhere
    artery: LabelVolume
    vein: LabelVolume
    isv: LabelVolume  # 1 on intersegmental vein support, else 0
    spec: PhantomSpec

    def volumes(self) -> dict[str, object]:
        return {
            "image": self.image,
            "lobes": self.lobes,
            "segments": self.segments,
            "bronchi": self.bronchi,
            "artery": self.artery,
            "vein": self.vein,
            "isv": self.isv,
        }


@dataclass(frozen=True)
class _Branch:
    p0: np.ndarray  # (z, y, x) float endpoints
    p1: np.ndarray
    radius: float
    subtree: int  # 0-based principal-branch index within the lobe


def _segment_distance(points: np.ndarray, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    """Distance from (n, 3) points to the line segment p0-p1."""
    v = p1 - p0
    vv = float(v @ v)
    if vv == 0.0:
        return np.linalg.norm(points - p0, axis=1)
    t = np.clip((points - p0) @ v / vv, 0.0, 1.0)
    proj = p0 + t[:, None] * v
    return np.linalg.norm(points - proj, axis=1)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise PhantomError("degenerate branch direction")
    return v / n


def _perp(v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # random unit vector orthogonal to v
    while True:
        r = rng.normal(size=3)
        r -= (r @ v) * v
        n = np.linalg.norm(r)
        if n > 1e-6:
            return r / n


def _grow_tree(
    hilum: np.ndarray,
    direction: np.ndarray,
    length: float,
    depth: int,
    radius: float,
    subtree: int,
    rng: np.random.Generator,
) -> list[_Branch]:
    branches = []

    def grow(p0, d, ln, remaining, rad):
        p1 = p0 + d * ln
        branches.append(_Branch(p0.copy(), p1.copy(), rad, subtree))
        if remaining <= 1:
            return
        perp = _perp(d, rng)
        for sign in (1.0, -1.0):
            ang = rng.uniform(np.deg2rad(18), np.deg2rad(38))
            child = _unit(d * np.cos(ang) + sign * perp * np.sin(ang))
            grow(p1, child, ln * rng.uniform(0.58, 0.72), remaining - 1, max(rad * 0.82, 1.0))

    grow(hilum, direction, length, depth, radius)
    return branches


def generate_phantom(spec: PhantomSpec) -> Subject:
    """Build one subject; deterministic in spec (same spec, same bytes)."""
    rng = np.random.default_rng(spec.seed)
    d, h, w = spec.dims.shape
    zz, yy, xx = np.meshgrid(
        np.arange(d, dtype=np.float64),
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        indexing="ij",
    )

    # ---- lung envelope: a jittered ellipsoid
    c = np.array([(d - 1) / 2, (h - 1) / 2, (w - 1) / 2])
    c = c + rng.uniform(-0.02, 0.02, size=3) * np.array([d, h, w])
    radii = np.array([0.44 * (d - 1), 0.40 * (h - 1), 0.38 * (w - 1)])
    radii = radii * rng.uniform(0.95, 1.05, size=3)
    q = ((zz - c[0]) / radii[0]) ** 2 + ((yy - c[1]) / radii[1]) ** 2 + ((xx - c[2]) / radii[2]) ** 2
    lung = q <= 1.0
    if int(lung.sum()) < 64 * spec.num_lobes:
        raise PhantomError(f"lung envelope too small for dims {spec.dims.shape}")

    # ---- fissures: tilted planes stacked along z cut the lung into lobes
    t = (zz - (c[0] - radii[0])) / (2 * radii[0])  # 0 at lung bottom, 1 at top
    lobes_arr = np.ones(spec.dims.shape, dtype=np.uint8)
    cuts = sorted(
        (i / spec.num_lobes + rng.uniform(-0.03, 0.03), rng.normal(0, 0.05), rng.normal(0, 0.05))
        for i in range(1, spec.num_lobes)
    )
    for i, (cut, tilt_y, tilt_x) in enumerate(cuts, start=1):
        tt = t + tilt_y * (yy - c[1]) / max(h - 1, 1) + tilt_x * (xx - c[2]) / max(w - 1, 1)
        lobes_arr[tt > cut] = i + 1
    lobes_arr[~lung] = 0
    for lobe in range(1, spec.num_lobes + 1):
        if int((lobes_arr == lobe).sum()) < 32:
            raise PhantomError(f"lobe {lobe} degenerate after fissure cuts")

    segments_arr = np.zeros(spec.dims.shape, dtype=np.uint8)
    bronchi_arr = np.zeros(spec.dims.shape, dtype=np.uint8)
    artery_arr = np.zeros(spec.dims.shape, dtype=np.uint8)
    vein_arr = np.zeros(spec.dims.shape, dtype=np.uint8)
    isv_arr = np.zeros(spec.dims.shape, dtype=np.uint8)

    for lobe in range(1, spec.num_lobes + 1):
        base_cls = (lobe - 1) * spec.segments_per_lobe  # classes base+1..base+s
        lobe_mask = lobes_arr == lobe
        vz, vy, vx = np.nonzero(lobe_mask)
        pts = np.stack([vz, vy, vx], axis=1).astype(np.float64)

        # hilum sits medially (low x), at the lobe's z/y centroid
        centroid = pts.mean(axis=0)
        hilum = centroid.copy()
        hilum[2] = np.percentile(pts[:, 2], 12.0)
        hilum = pts[np.argmin(np.linalg.norm(pts - hilum, axis=1))].copy()

        # principal targets: greedy farthest-point picks among lobe voxels
        cand = pts[rng.choice(len(pts), size=min(256, len(pts)), replace=False)]
        chosen = []
        ref = [hilum]
        for _ in range(spec.segments_per_lobe):
            dmin = np.min(
                np.stack([np.linalg.norm(cand - r, axis=1) for r in ref]), axis=0
            )
            pick = cand[int(np.argmax(dmin))]
            chosen.append(pick)
            ref.append(pick)

        branches: list[_Branch] = []
        for sub, target in enumerate(chosen):
            direction = _unit(target - hilum)
            L = 0.55 * float(np.linalg.norm(target - hilum))
            if L < 2.0:
                raise PhantomError(f"lobe {lobe} too small to host a branch tree")
            branches.extend(
                _grow_tree(hilum, direction, L, spec.tree_depth, spec.branch_radius, sub, rng)
            )

        # Voronoi of subtree centerlines over the lobe; ties take the lower class
        nsub = spec.segments_per_lobe
        dist = np.full((nsub, len(pts)), np.inf)
        for b in branches:
            db = _segment_distance(pts, b.p0, b.p1)
            np.minimum(dist[b.subtree], db, out=dist[b.subtree])
        owner = np.argmin(dist, axis=0)  # argmin takes the first (lowest) on ties
        segments_arr[vz, vy, vx] = base_cls + 1 + owner

        # intersegmental sheet: near-tie of the two closest subtrees AND an
        # actual ownership change across a face (excludes the hilum blob
        # where every subtree distance ties without a boundary)
        if nsub >= 2:
            part = np.partition(dist, 1, axis=0)
            near_tie = (part[1] - part[0]) <= 1.0
            own_full = np.full(spec.dims.shape, -1, dtype=np.int16)
            own_full[vz, vy, vx] = owner
            boundary = np.zeros(spec.dims.shape, dtype=bool)
            for off in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                nb = _shift(own_full, off, fill=-1)
                boundary |= (own_full >= 0) & (nb >= 0) & (nb != own_full)
            ridge = near_tie & boundary[vz, vy, vx]
            if not ridge.any():
                raise PhantomError(f"lobe {lobe}: no intersegmental boundary sheet")
            isv_arr[vz[ridge], vy[ridge], vx[ridge]] = 1
            vein_arr[vz[ridge], vy[ridge], vx[ridge]] = (base_cls + 1 + owner[ridge]).astype(np.uint8)

        # rasterize tubes, clipped to the owning segment
        for b in branches:
            db = _segment_distance(pts, b.p0, b.p1)
            inside = (db <= b.radius) & (owner == b.subtree)
            bronchi_arr[vz[inside], vy[inside], vx[inside]] = base_cls + 1 + b.subtree

        # arteries run parallel to the bronchi: a coherent lateral offset per
        # subtree keeps them out of the airway lumen, thinner tubes, same clipping
        lateral = [_unit(rng.normal(size=3)) for _ in range(nsub)]
        for b in branches:
            off = lateral[b.subtree] * (0.9 * spec.branch_radius + 0.8) + rng.normal(0, 0.25, size=3)
            db = _segment_distance(pts, b.p0 + off, b.p1 + off)
            inside = (db <= max(b.radius * 0.75, 1.0)) & (owner == b.subtree)
            artery_arr[vz[inside], vy[inside], vx[inside]] = base_cls + 1 + b.subtree

        # intrasegmental veins: short tubes between random voxels of a segment
        for sub in range(nsub):
            seg_pts = pts[owner == sub]
            if len(seg_pts) < 8:
                continue
            for _ in range(2):
                a, bpt = seg_pts[rng.choice(len(seg_pts), size=2, replace=False)]
                db = _segment_distance(pts, a, bpt)
                inside = (db <= max(0.8 * spec.branch_radius, 1.0)) & (owner == sub)
                vein_arr[vz[inside], vy[inside], vx[inside]] = base_cls + 1 + sub

        for sub in range(nsub):
            if not (bronchi_arr[vz, vy, vx] == base_cls + 1 + sub).any():
                raise PhantomError(f"segment {base_cls + 1 + sub}: no bronchi voxels fit the grid")

    # ---- image: tissue plateaus + smooth bias + white noise
    image = np.zeros(spec.dims.shape, dtype=np.float64)
    for lobe in range(1, spec.num_lobes + 1):
        image[lobes_arr == lobe] = 0.40 + 0.02 * (lobe - 1)
    image[bronchi_arr > 0] = 0.15  # air-filled tubes, darker than parenchyma
    image[(artery_arr > 0) | (vein_arr > 0)] = 0.88
    coarse = rng.normal(0, 0.04, size=(4, 4, 4))
    pz, py, px = np.meshgrid(
        np.linspace(-1, 1, d), np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij"
    )
    qpts = np.stack([px.ravel(), py.ravel(), pz.ravel()], axis=1)
    image += sample_grid(coarse, qpts).reshape(spec.dims.shape)
    image += rng.normal(0, spec.noise_std, size=spec.dims.shape)

    subject = Subject(
        image=ScalarVolume(image.astype(np.float32)),
        lobes=LabelVolume(lobes_arr, spec.num_lobes + 1),
        segments=LabelVolume(segments_arr, spec.num_classes),
        bronchi=LabelVolume(bronchi_arr, spec.num_classes),
        artery=LabelVolume(artery_arr, spec.num_classes),
        vein=LabelVolume(vein_arr, spec.num_classes),
        isv=LabelVolume(isv_arr, 2),
        spec=spec,
    )
    _validate(subject)
    return subject


def _validate(s: Subject) -> None:
    seg = s.segments.data
    lob = s.lobes.data
    spl = s.spec.segments_per_lobe
    if ((seg > 0) != (lob > 0)).any():
        raise PhantomError("segment support must equal lobe support")
    seg_lobe = (seg.astype(np.int32) - 1) // spl + 1
    if (seg_lobe[seg > 0] != lob[seg > 0]).any():
        raise PhantomError("segment classes must nest inside their lobe")
    for name in ("bronchi", "artery"):
        tree = getattr(s, name).data
        m = tree > 0
        if (tree[m] != seg[m]).any():
            raise PhantomError(f"{name} voxels must lie in their own segment")
    if (s.isv.data.astype(bool) & (s.vein.data == 0)).any():
        raise PhantomError("intersegmental vein support must carry vein labels")


def _shift(arr: np.ndarray, offset: tuple[int, int, int], fill=0) -> np.ndarray:
    """Translate a (d, h, w) array by offset (dz, dy, dx), filling exposed edges."""
    out = np.full_like(arr, fill)
    src, dst = [], []
    for o, n in zip(offset, arr.shape):
        dst.append(slice(max(o, 0), n + min(o, 0)))
        src.append(slice(max(-o, 0), n + min(-o, 0)))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def corrupt_shapes(subject: Subject, flip_rate: float, salt: int = 0) -> Subject:
    """Return a copy whose tree shapes are noisily eroded/dilated.

    Simulates imperfect tubular annotations: each tree-surface voxel may
    drop to background and each touching background voxel may join the
    tree (taking its majority 6-neighbor class, ties to the lower class).
    Deterministic in (subject seed, salt).  Segments and lobes stay
    untouched; intersegmental vein support is restored afterwards so isv
    remains inside vein; a class emptied by erosion is restored wholesale.
    Corrupted trees may cross segment boundaries; that is the point.
    """
    if not 0.0 <= flip_rate <= 1.0:
        raise ValueError("flip_rate must lie in [0, 1]")
    rng = np.random.default_rng([subject.spec.seed, 0xC0FFEE, salt])
    shifts = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    new = {}
    for name in ("bronchi", "artery", "vein"):
        vol = getattr(subject, name)
        data = vol.data.copy()
        m = data > 0
        grown = np.zeros_like(m)
        shrunk = np.ones_like(m)
        neigh_cls = np.full(data.shape + (6,), 255, dtype=np.uint8)
        for k, off in enumerate(shifts):
            moved = _shift(data, off)
            grown |= moved > 0
            shrunk &= _shift(m, off)
            neigh_cls[..., k] = np.where(moved > 0, moved, 255)
        # erode candidates: tree voxels with a 6-neighbor off the tree (grid
        # edges count as off); dilate candidates: background touching the tree
        erode_cand = m & ~shrunk
        dilate_cand = ~m & grown
        flips = rng.random(size=data.shape)
        data[erode_cand & (flips < flip_rate)] = 0
        take = dilate_cand & (flips < flip_rate)
        # majority 6-neighbor class; ties and gaps resolve to the lowest class
        counts = np.zeros((data.shape + (subject.spec.num_classes,)), dtype=np.int8)
        for k in range(6):
            nc = neigh_cls[..., k]
            valid = nc != 255
            for cls in range(1, subject.spec.num_classes):
                counts[..., cls] += (valid & (nc == cls)).astype(np.int8)
        data[take] = np.argmax(counts, axis=-1)[take].astype(np.uint8)
        for cls in range(1, subject.spec.num_classes):
            if (vol.data == cls).any() and not (data == cls).any():
                data[vol.data == cls] = cls  # never lose a class outright
        new[name] = data
    # keep isv support inside vein
    lost = subject.isv.data.astype(bool) & (new["vein"] == 0)
    new["vein"][lost] = subject.vein.data[lost]
    return Subject(
        image=subject.image,
        lobes=subject.lobes,
        segments=subject.segments,
        bronchi=LabelVolume(new["bronchi"], subject.spec.num_classes),
        artery=LabelVolume(new["artery"], subject.spec.num_classes),
        vein=LabelVolume(new["vein"], subject.spec.num_classes),
        isv=subject.isv,
        spec=subject.spec,
    )


# ------------------------------------------------------------------ bundles

_FILES = ("image", "lobes", "segments", "bronchi", "artery", "vein", "isv")


def save_subject(subject: Subject, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, vol in subject.volumes().items():
        save_svol(out / f"{name}.svol", vol)
    meta = {
        "dims": list(subject.spec.dims.shape),
        "spacing_mm": [1.0, 1.0, 1.0],
        "num_classes": subject.spec.num_classes,
        "num_lobes": subject.spec.num_lobes,
        "class_names": ["background"] + [f"seg_{i}" for i in range(1, subject.spec.num_classes)],
        "generator_spec": subject.spec.to_json(),
    }
    write_json(out / "meta.json", meta)


def load_subject(subject_dir) -> Subject:
    sub = Path(subject_dir)
    meta_path = sub / "meta.json"
    if not meta_path.exists():
        raise BundleError(f"{sub}: missing meta.json")
    meta = read_json(meta_path)
    try:
        spec = PhantomSpec.from_json(meta["generator_spec"])
    except (KeyError, TypeError, ValueError) as e:
        raise BundleError(f"{sub}: bad generator_spec in meta.json ({e})") from e
    if list(spec.dims.shape) != list(meta["dims"]):
        raise BundleError(f"{sub}: meta dims disagree with generator spec")
    if meta.get("num_classes") != spec.num_classes:
        raise BundleError(f"{sub}: meta num_classes disagrees with generator spec")
    nc = {"image": None, "lobes": spec.num_lobes + 1, "isv": 2}
    vols = {}
    for name in _FILES:
        p = sub / f"{name}.svol"
        if not p.exists():
            raise BundleError(f"{sub}: missing {name}.svol")
        want_nc = nc.get(name, spec.num_classes)
        vols[name] = load_svol(p, num_classes=want_nc)
        if vols[name].dims.shape != spec.dims.shape:
            raise BundleError(
                f"{sub}/{name}.svol: dims {vols[name].dims.shape} != meta {spec.dims.shape}"
            )
    if not isinstance(vols["image"], ScalarVolume):
        raise BundleError(f"{sub}/image.svol: expected scalar payload")
    return Subject(spec=spec, **vols)


def split_dataset(ids: list, seed: int) -> dict[str, list]:
    """Deterministic 70/10/20 train/val/test split of subject ids."""
    ids = list(ids)
    n = len(ids)
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in perm]
    n_train = int(np.floor(0.7 * n))
    n_val = int(np.floor(0.1 * n))
    return {
        "train": shuffled[:n_train],
        "val": shuffled[n_train : n_train + n_val],
        "test": shuffled[n_train + n_val :],
    }
