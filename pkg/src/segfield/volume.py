"""Voxel grids and the geometry conventions shared by every other module.

Conventions, fixed package-wide:

* Grid arrays have shape (d, h, w): z slowest, then y, then x.
  Flat index of voxel (x, y, z) is ((z * h) + y) * w + x.
* Continuous query points live in [-1, 1]^3 as (x, y, z) triples.
* Normalized -> index mapping is align-corners: u = (p + 1) / 2 * (n - 1),
  so p = -1 lands on voxel center 0 and p = +1 on center n - 1.
* Out-of-range points are clamped to the valid cube, never an error.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Continuous indices this close to an integer snap onto it before the
# floor/ceil splits below.  Round-tripping normalized<->index coordinates
# through f64 leaves ~1e-14 residue; without snapping, a voxel-center query
# could straddle two cells and break exact-reproduction guarantees.
SNAP_TOL = 1e-9

_MAGIC = b"SVL1"
_DTYPE_LABELS = 0
_DTYPE_SCALAR = 1


class SvolFormatError(Exception):
    """Raised when a .svol file is truncated, mislabeled, or inconsistent."""


@dataclass(frozen=True)
class GridDims:
    """Grid extent (d, h, w), each axis at least 2 voxels."""

    d: int
    h: int
    w: int

    def __post_init__(self):
        for n in (self.d, self.h, self.w):
            if not isinstance(n, int) or n < 2:
                raise ValueError(f"grid dims must be ints >= 2, got {self}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.d, self.h, self.w)

    @property
    def num_voxels(self) -> int:
        return self.d * self.h * self.w

    # (x, y, z) extent order, used when mapping normalized points.
    @property
    def xyz(self) -> tuple[int, int, int]:
        return (self.w, self.h, self.d)


@dataclass
class ScalarVolume:
    data: np.ndarray  # (d, h, w) float32

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"scalar volume must be 3-d, got shape {self.data.shape}")
        GridDims(*self.data.shape)  # validates >= 2 per axis

    @property
    def dims(self) -> GridDims:
        return GridDims(*self.data.shape)


@dataclass
class LabelVolume:
    data: np.ndarray  # (d, h, w) uint8
    num_classes: int

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.data.ndim != 3:
            raise ValueError(f"label volume must be 3-d, got shape {self.data.shape}")
        GridDims(*self.data.shape)
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        mx = int(self.data.max()) if self.data.size else 0
        if mx >= self.num_classes:
            raise ValueError(f"label {mx} out of range for num_classes={self.num_classes}")

    @property
    def dims(self) -> GridDims:
        return GridDims(*self.data.shape)

    def class_mask(self, cls: int) -> np.ndarray:
        return self.data == cls


def norm_to_index(points: np.ndarray, dims: GridDims) -> np.ndarray:
    """Map (x, y, z) points in [-1, 1]^3 to continuous voxel indices.

    Returns an (n, 3) float64 array of (ux, uy, uz).  Points outside the
    cube are clamped first.  Indices within SNAP_TOL of an integer are
    snapped exactly onto it.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[-1] != 3:
        raise ValueError("points must be (..., 3) (x, y, z)")
    pts = np.clip(pts, -1.0, 1.0)
    n = np.array(dims.xyz, dtype=np.float64)
    u = (pts + 1.0) * 0.5 * (n - 1.0)
    r = np.rint(u)
    near = np.abs(u - r) <= SNAP_TOL
    return np.where(near, r, u)


def _cell_parts(u: np.ndarray, n_xyz: tuple[int, int, int]):
    """Split continuous indices into base cell corner + fractional offset.

    Base corners are clipped to [0, n-2] so the 8-corner stencil always
    stays inside the grid; u == n-1 then gets fraction exactly 1.0.
    """
    i0 = np.floor(u).astype(np.int64)
    for ax, n in enumerate(n_xyz):
        np.clip(i0[:, ax], 0, n - 2, out=i0[:, ax])
    frac = u - i0
    return i0, frac


def interp_parts(points: np.ndarray, dims: GridDims) -> tuple[np.ndarray, np.ndarray]:
    """Base cell corners and fractional offsets for trilinear interpolation.

    Shared by sample_grid and the autodiff sampling op so both produce
    bit-identical weights.
    """
    u = norm_to_index(points, dims)
    return _cell_parts(u, dims.xyz)


def sample_grid(field: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Trilinear sample of a (c, d, h, w) or (d, h, w) field at normalized points.

    Returns (n, c) float64 (or (n,) when the field has no channel axis).
    This is the single interpolation kernel in the package; the autodiff
    sampling op and dense inference both route through it so that their
    values agree bitwise.
    """
    fld = np.asarray(field, dtype=np.float64)
    squeeze = fld.ndim == 3
    if squeeze:
        fld = fld[None]
    c, d, h, w = fld.shape
    dims = GridDims(d, h, w)
    i0, f = interp_parts(points, dims)
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    flat = fld.reshape(c, -1)
    out = np.zeros((i0.shape[0], c), dtype=np.float64)
    for cz in (0, 1):
        wz = fz if cz else 1.0 - fz
        for cy in (0, 1):
            wy = fy if cy else 1.0 - fy
            for cx in (0, 1):
                wx = fx if cx else 1.0 - fx
                idx = ((z0 + cz) * h + (y0 + cy)) * w + (x0 + cx)
                out += (wx * wy * wz)[:, None] * flat[:, idx].T
    return out[:, 0] if squeeze else out


def nearest_label(labels: LabelVolume, points: np.ndarray) -> np.ndarray:
    """Nearest-voxel label lookup at normalized points, returns (n,) uint8.

    Halfway cases round DOWN (index ceil(u - 0.5)): the query exactly
    between voxels i and i+1 takes voxel i.
    """
    u = norm_to_index(points, labels.dims)
    idx = np.ceil(u - 0.5).astype(np.int64)
    for ax, n in enumerate(labels.dims.xyz):
        np.clip(idx[:, ax], 0, n - 1, out=idx[:, ax])
    return labels.data[idx[:, 2], idx[:, 1], idx[:, 0]]


_OFFSETS_6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
_OFFSETS_26 = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
]


def connected_components(voxels, connectivity: int = 26) -> list[set]:
    """Partition a set of (x, y, z) voxels into connected components.

    connectivity is 6 (face) or 26 (face+edge+corner).  Components come
    back ordered by their minimal member under (z, y, x) comparison, so
    the result is deterministic regardless of input iteration order.
    """
    if connectivity == 6:
        offsets = _OFFSETS_6
    elif connectivity == 26:
        offsets = _OFFSETS_26
    else:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    remaining = set(voxels)
    comps = []
    while remaining:
        seed = remaining.pop()
        comp = {seed}
        frontier = [seed]
        while frontier:
            x, y, z = frontier.pop()
            for dx, dy, dz in offsets:
                nb = (x + dx, y + dy, z + dz)
                if nb in remaining:
                    remaining.remove(nb)
                    comp.add(nb)
                    frontier.append(nb)
        comps.append(comp)
    comps.sort(key=lambda s: min((z, y, x) for (x, y, z) in s))
    return comps


def surface_voxels(labels: LabelVolume, cls: int) -> set:
    """Voxels of class cls with a 6-neighbor of another class or outside the grid."""
    m = labels.data == cls
    if not m.any():
        return set()
    # A voxel is interior iff all six face neighbors exist and share its class.
    inner = np.ones_like(m)
    inner[0, :, :] = False
    inner[-1, :, :] = False
    inner[:, 0, :] = False
    inner[:, -1, :] = False
    inner[:, :, 0] = False
    inner[:, :, -1] = False
    inner[1:-1, 1:-1, 1:-1] &= (
        m[:-2, 1:-1, 1:-1] & m[2:, 1:-1, 1:-1]
        & m[1:-1, :-2, 1:-1] & m[1:-1, 2:, 1:-1]
        & m[1:-1, 1:-1, :-2] & m[1:-1, 1:-1, 2:]
    )
    surf = m & ~inner
    zz, yy, xx = np.nonzero(surf)
    return {(int(x), int(y), int(z)) for x, y, z in zip(xx, yy, zz)}


def downsample(vol, target: GridDims):
    """Resample a volume to a coarser (or equal) grid.

    Labels: nearest-voxel pick at the target's align-corners centers,
    with the same round-half-down rule as nearest_label.  Scalars:
    box mean over the source voxels covered by each target voxel.
    Target dims must not exceed the source on any axis; equality gives
    back an identical copy.
    """
    src = vol.dims
    for ns, nt in zip(src.shape, target.shape):
        if nt > ns:
            raise ValueError(f"downsample target {target.shape} exceeds source {src.shape}")
    if isinstance(vol, LabelVolume):
        idx = []
        for ns, nt in zip(src.shape, target.shape):
            j = np.arange(nt, dtype=np.float64)
            u = j * (ns - 1) / (nt - 1)
            r = np.rint(u)
            u = np.where(np.abs(u - r) <= SNAP_TOL, r, u)
            idx.append(np.clip(np.ceil(u - 0.5).astype(np.int64), 0, ns - 1))
        out = vol.data[np.ix_(idx[0], idx[1], idx[2])]
        return LabelVolume(out.copy(), vol.num_classes)
    if isinstance(vol, ScalarVolume):
        data = vol.data.astype(np.float64)
        for ax, (ns, nt) in enumerate(zip(src.shape, target.shape)):
            lo = (np.arange(nt) * ns) // nt
            hi = (np.arange(1, nt + 1) * ns) // nt
            sums = np.add.reduceat(data, lo, axis=ax)
            counts = (hi - lo).reshape([-1 if a == ax else 1 for a in range(3)])
            data = sums / counts
        return ScalarVolume(data.astype(np.float32))
    raise TypeError(f"cannot downsample {type(vol).__name__}")


def save_svol(path, vol) -> None:
    """Write a volume as .svol: magic, dtype code, u32le dims (d,h,w), raw payload."""
    if isinstance(vol, LabelVolume):
        code, payload = _DTYPE_LABELS, vol.data.tobytes()
    elif isinstance(vol, ScalarVolume):
        code, payload = _DTYPE_SCALAR, vol.data.astype("<f4").tobytes()
    else:
        raise TypeError(f"cannot save {type(vol).__name__}")
    d, h, w = vol.dims.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<B3I", code, d, h, w))
        fh.write(payload)


def load_svol(path, num_classes: int | None = None):
    """Read a .svol file back into a LabelVolume or ScalarVolume.

    num_classes applies only to label payloads; when omitted it is
    inferred as max(label) + 1.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 17:
        raise SvolFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != _MAGIC:
        raise SvolFormatError(f"{path}: bad magic {raw[:4]!r}")
    code, d, h, w = struct.unpack_from("<B3I", raw, 4)
    if code not in (_DTYPE_LABELS, _DTYPE_SCALAR):
        raise SvolFormatError(f"{path}: unknown dtype code {code}")
    n = d * h * w
    body = raw[17:]
    itemsize = 1 if code == _DTYPE_LABELS else 4
    if len(body) != n * itemsize:
        raise SvolFormatError(
            f"{path}: payload is {len(body)} bytes, expected {n * itemsize}"
        )
    try:
        dims = GridDims(int(d), int(h), int(w))
    except ValueError as e:
        raise SvolFormatError(f"{path}: {e}") from e
    if code == _DTYPE_LABELS:
        data = np.frombuffer(body, dtype=np.uint8).reshape(dims.shape)
        nc = num_classes if num_classes is not None else int(data.max()) + 1
        try:
            return LabelVolume(data.copy(), nc)
        except ValueError as e:
            raise SvolFormatError(f"{path}: {e}") from e
    data = np.frombuffer(body, dtype="<f4").reshape(dims.shape)
    return ScalarVolume(data.copy())


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
