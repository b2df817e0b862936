"""Voxel-grid primitives: volumes, line traversal, patches, cylinders, file I/O.

Conventions used throughout the package:

* A volume is a dense 3D numpy array of shape ``(ni, nj, nk)`` with isotropic
  voxel spacing in millimetres and its origin fixed at (0, 0, 0) mm, so that
  ``x_mm = index * spacing_mm`` along each axis.
* Scalar volumes are ``float32``; binary volumes are ``uint8`` containing
  only {0, 1}.
* Voxel points are plain ``(i, j, k)`` integer tuples and may lie outside the
  grid; callers test bounds explicitly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import VolumeFormatError

VoxelPoint = tuple[int, int, int]

_NRRD_MAGIC = "NRRD0004"
_NRRD_TYPES = {"float": np.float32, "uchar": np.uint8}
_NRRD_TYPE_NAMES = {np.dtype(np.float32): "float", np.dtype(np.uint8): "uchar"}


@dataclass
class Volume:
    """A dense scalar or binary voxel grid with isotropic mm spacing."""

    data: np.ndarray
    spacing_mm: float = 1.5

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if self.data.dtype not in (np.float32, np.uint8):
            raise ValueError(f"volume dtype must be float32 or uint8, got {self.data.dtype}")
        if not self.spacing_mm > 0:
            raise ValueError(f"spacing_mm must be positive, got {self.spacing_mm}")
        if self.data.dtype == np.uint8 and self.data.size:
            if self.data.max() > 1:
                raise ValueError("binary volume contains values outside {0, 1}")

    @property
    def sizes(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def is_binary(self) -> bool:
        return self.data.dtype == np.uint8

    def in_bounds(self, p: VoxelPoint) -> bool:
        return all(0 <= p[a] < self.data.shape[a] for a in range(3))


def round_half_away(x: np.ndarray | float) -> np.ndarray | int:
    """Round to the nearest integer with ties away from zero (not banker's)."""
    r = np.sign(x) * np.floor(np.abs(x) + 0.5)
    if np.isscalar(x):
        return int(r)
    return r.astype(np.int64)


def mm_to_voxel(point_mm, spacing_mm: float) -> VoxelPoint:
    p = np.asarray(point_mm, dtype=np.float64) / spacing_mm
    return tuple(int(v) for v in round_half_away(p))


def voxel_to_mm(p: VoxelPoint, spacing_mm: float) -> np.ndarray:
    return np.asarray(p, dtype=np.float64) * spacing_mm


@dataclass
class Polyline:
    """An ordered 3D polyline in millimetres.

    ``spacing_mm`` records the voxel spacing of the grid the polyline belongs
    to; the coordinates themselves are in mm and independent of it.
    """

    points_mm: np.ndarray
    spacing_mm: float = 1.5

    def __post_init__(self) -> None:
        pts = np.asarray(self.points_mm, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points_mm must have shape (N, 3), got {pts.shape}")
        self.points_mm = pts

    def __len__(self) -> int:
        return len(self.points_mm)

    @property
    def cumulative_length_mm(self) -> np.ndarray:
        """Arc length at each vertex; starts at 0 and is non-decreasing."""
        if len(self.points_mm) == 0:
            return np.zeros(0)
        steps = np.linalg.norm(np.diff(self.points_mm, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    @property
    def length_mm(self) -> float:
        cum = self.cumulative_length_mm
        return float(cum[-1]) if len(cum) else 0.0

    def reversed(self) -> "Polyline":
        return Polyline(self.points_mm[::-1].copy(), self.spacing_mm)

    def resample(self, step_mm: float) -> "Polyline":
        """Resample by arc length at roughly ``step_mm`` intervals.

        Keeps both endpoints exactly. Requires at least 2 points.
        """
        if len(self.points_mm) < 2:
            raise ValueError("resampling needs a polyline with at least 2 points")
        cum = self.cumulative_length_mm
        total = cum[-1]
        n = max(int(np.ceil(total / step_mm)), 1) + 1
        target = np.linspace(0.0, total, n)
        out = np.empty((n, 3))
        for a in range(3):
            out[:, a] = np.interp(target, cum, self.points_mm[:, a])
        return Polyline(out, self.spacing_mm)


def line_voxels(a: VoxelPoint, b: VoxelPoint) -> list[VoxelPoint]:
    """Discrete voxel segment from ``a`` to ``b``, inclusive of both endpoints.

    Supercover DDA: the ray from the center of ``a`` to the center of ``b``
    steps through exactly one grid plane at a time, so the returned voxels
    form a face-connected chain that cannot tunnel through one-voxel walls.
    Reversing the arguments yields the reversed list.
    """
    a = tuple(int(v) for v in a)
    b = tuple(int(v) for v in b)
    if a == b:
        return [a]
    # Canonical orientation makes reversal symmetry exact by construction.
    if b < a:
        return list(reversed(line_voxels(b, a)))

    delta = [b[k] - a[k] for k in range(3)]
    n = [abs(d) for d in delta]
    step = [0 if d == 0 else (1 if d > 0 else -1) for d in delta]

    voxels = [a]
    cur = list(a)
    j = [1, 1, 1]  # next grid-plane crossing index per axis
    for _ in range(sum(n)):
        # Crossing times t = (2j-1)/(2n); equal rationals compare equal in
        # IEEE doubles, so simultaneous crossings tie exactly.
        best = None
        for k in range(3):
            if j[k] > n[k]:
                continue
            t = (2 * j[k] - 1) / (2 * n[k])
            if best is None or t < best[0]:
                best = (t, k)
        _, k = best  # type: ignore[misc]
        cur[k] += step[k]
        j[k] += 1
        voxels.append((cur[0], cur[1], cur[2]))
    return voxels


def extract_patch(v: Volume, center: VoxelPoint, size_mm: float) -> np.ndarray:
    """Cubic sub-volume of physical side ``size_mm`` centered at ``center``.

    The side in voxels is rounded to the nearest integer and then decremented
    to the nearest odd number so the center voxel is unambiguous. Regions
    outside the grid are zero-filled; the center itself may be anywhere.
    """
    if not size_mm > 0:
        raise ValueError("size_mm must be positive")
    side = int(np.floor(size_mm / v.spacing_mm + 0.5))
    if side % 2 == 0:
        side -= 1
    side = max(side, 1)
    return _extract_patch_array(v.data, center, side)


def patch_side_voxels(size_mm: float, spacing_mm: float) -> int:
    side = int(np.floor(size_mm / spacing_mm + 0.5))
    if side % 2 == 0:
        side -= 1
    return max(side, 1)


def _extract_patch_array(data: np.ndarray, center: VoxelPoint, side: int) -> np.ndarray:
    half = side // 2
    out = np.zeros((side, side, side), dtype=data.dtype)
    src = []
    dst = []
    for axis in range(3):
        lo = center[axis] - half
        hi = center[axis] + half + 1
        s_lo, s_hi = max(lo, 0), min(hi, data.shape[axis])
        if s_lo >= s_hi:
            return out
        src.append(slice(s_lo, s_hi))
        dst.append(slice(s_lo - lo, s_hi - lo))
    out[tuple(dst)] = data[tuple(src)]
    return out


def _segment_box_distance_sq(
    shape: tuple[int, int, int],
    spacing: float,
    a_mm: np.ndarray,
    b_mm: np.ndarray,
    radius_mm: float,
) -> tuple[tuple[slice, slice, slice], np.ndarray] | None:
    """Exact squared distance from voxel centers to segment ``a->b``.

    Only evaluates the bounding box of the segment inflated by the radius
    plus one voxel; returns the box slices and the distance-squared array,
    or None when the box misses the grid entirely.
    """
    lo_mm = np.minimum(a_mm, b_mm) - radius_mm - spacing
    hi_mm = np.maximum(a_mm, b_mm) + radius_mm + spacing
    lo = np.maximum(np.floor(lo_mm / spacing).astype(int), 0)
    hi = np.minimum(np.ceil(hi_mm / spacing).astype(int), np.asarray(shape) - 1)
    if np.any(lo > hi):
        return None
    coords = [np.arange(lo[a], hi[a] + 1) * spacing for a in range(3)]
    X, Y, Z = np.meshgrid(*coords, indexing="ij", sparse=True)
    px = X - a_mm[0]
    py = Y - a_mm[1]
    pz = Z - a_mm[2]
    ab = b_mm - a_mm
    denom = float(ab @ ab)
    if denom == 0.0:
        d2 = px * px + py * py + pz * pz
    else:
        t = (px * ab[0] + py * ab[1] + pz * ab[2]) / denom
        t = np.clip(t, 0.0, 1.0)
        dx = px - t * ab[0]
        dy = py - t * ab[1]
        dz = pz - t * ab[2]
        d2 = dx * dx + dy * dy + dz * dz
    box = tuple(slice(lo[a], hi[a] + 1) for a in range(3))
    return box, d2  # type: ignore[return-value]


def stamp_capsule(
    mask: np.ndarray, spacing: float, a_mm: np.ndarray, b_mm: np.ndarray, radius_mm: float
) -> None:
    """Mark voxels whose center is within ``radius_mm`` of segment ``a->b``."""
    hit = _segment_box_distance_sq(mask.shape, spacing, np.asarray(a_mm, float), np.asarray(b_mm, float), radius_mm)
    if hit is None:
        return
    box, d2 = hit
    mask[box] |= (d2 <= radius_mm * radius_mm).astype(mask.dtype)


def rasterize_cylinders(p: Polyline, radius_mm: float, template: Volume) -> Volume:
    """Binary volume marking voxels within ``radius_mm`` of any segment of ``p``.

    Distances are exact point-to-segment distances in mm. An empty polyline
    yields an all-zero volume; a single point is treated as a degenerate
    segment (a sphere).
    """
    if not radius_mm > 0:
        raise ValueError("radius_mm must be positive")
    out = np.zeros(template.sizes, dtype=np.uint8)
    pts = p.points_mm
    if len(pts) == 1:
        stamp_capsule(out, template.spacing_mm, pts[0], pts[0], radius_mm)
    else:
        for i in range(len(pts) - 1):
            stamp_capsule(out, template.spacing_mm, pts[i], pts[i + 1], radius_mm)
    return Volume(out, template.spacing_mm)


def save_volume(v: Volume, path: str | Path) -> None:
    """Write a volume in the documented NRRD subset (raw little-endian)."""
    path = Path(path)
    type_name = _NRRD_TYPE_NAMES[v.data.dtype]
    ni, nj, nk = v.sizes
    s = v.spacing_mm
    header = (
        f"{_NRRD_MAGIC}\n"
        f"type: {type_name}\n"
        f"dimension: 3\n"
        f"sizes: {ni} {nj} {nk}\n"
        f"spacings: {s!r} {s!r} {s!r}\n"
        f"encoding: raw\n"
        f"endian: little\n"
        f"\n"
    )
    if v.data.dtype == np.float32:
        payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    else:
        payload = np.ascontiguousarray(v.data, dtype=np.uint8).tobytes()
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(payload)


def load_volume(path: str | Path) -> Volume:
    """Read a volume written by :func:`save_volume`.

    Raises :class:`VolumeFormatError` with a distinct message for a malformed
    header, an unsupported element kind, an unsupported encoding, or a
    size/payload mismatch.
    """
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise VolumeFormatError(f"{path}: malformed header (no blank line before payload)")
    header_text = raw[:sep].decode("ascii", errors="replace")
    payload = raw[sep + 2 :]

    lines = header_text.splitlines()
    if not lines or lines[0].strip() != _NRRD_MAGIC:
        raise VolumeFormatError(f"{path}: malformed header (missing {_NRRD_MAGIC} magic)")
    fields: dict[str, str] = {}
    for line in lines[1:]:
        if ":" not in line:
            raise VolumeFormatError(f"{path}: malformed header line {line!r}")
        key, value = line.split(":", 1)
        fields[key.strip()] = value.strip()

    for key in ("type", "dimension", "sizes", "spacings", "encoding", "endian"):
        if key not in fields:
            raise VolumeFormatError(f"{path}: malformed header (missing key {key!r})")
    if fields["encoding"] != "raw":
        raise VolumeFormatError(f"{path}: unsupported encoding {fields['encoding']!r}")
    if fields["type"] not in _NRRD_TYPES:
        raise VolumeFormatError(f"{path}: unsupported element kind {fields['type']!r}")
    if fields["dimension"] != "3":
        raise VolumeFormatError(f"{path}: malformed header (dimension must be 3)")
    if fields["endian"] != "little":
        raise VolumeFormatError(f"{path}: malformed header (endian must be little)")

    try:
        sizes = tuple(int(tok) for tok in fields["sizes"].split())
        spacings = tuple(float(tok) for tok in fields["spacings"].split())
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: malformed header ({exc})") from exc
    if len(sizes) != 3 or any(n <= 0 for n in sizes):
        raise VolumeFormatError(f"{path}: malformed header (sizes must be 3 positive ints)")
    if len(spacings) != 3 or len(set(spacings)) != 1:
        raise VolumeFormatError(f"{path}: malformed header (spacings must be 3 equal reals)")

    dtype = _NRRD_TYPES[fields["type"]]
    expected = int(np.prod(sizes)) * np.dtype(dtype).itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: size mismatch (header implies {expected} payload bytes, got {len(payload)})"
        )
    if dtype is np.float32:
        data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(sizes)
    else:
        data = np.frombuffer(payload, dtype=np.uint8).copy().reshape(sizes)
    return Volume(data, spacings[0])


def save_polyline(p: Polyline, path: str | Path) -> None:
    obj = {"spacing_mm": p.spacing_mm, "points_mm": p.points_mm.tolist()}
    Path(path).write_text(json.dumps(obj, sort_keys=True))


def load_polyline(path: str | Path) -> Polyline:
    try:
        obj = json.loads(Path(path).read_text())
        return Polyline(np.asarray(obj["points_mm"], dtype=np.float64), float(obj["spacing_mm"]))
    except (KeyError, ValueError, TypeError) as exc:
        raise VolumeFormatError(f"{path}: malformed polyline file ({exc})") from exc
