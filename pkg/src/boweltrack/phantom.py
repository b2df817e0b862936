"""Procedural folded-tube phantoms with self-contact.

A phantom is a smooth self-avoiding tube folded back and forth inside the
grid, rasterized into a bright lumen, a dark wall shell, and a mid-gray
background. Folds are packed close enough that neighbouring tube surfaces
come within a voxel of touching, which is what makes tracking through the
volume non-trivial: locally, the cheapest geometric shortcut crosses a wall.

Generation is a pure function of (config, seed): control points are proposed
fold by fold with rejection on clearance violation, spline-interpolated, and
re-validated on the smoothed curve.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import splev, splprep

from .errors import DataError, PackingError
from .grid import (
    Polyline,
    Volume,
    _segment_box_distance_sq,
    load_polyline,
    load_volume,
    mm_to_voxel,
    save_polyline,
    save_volume,
)


class Annotation(enum.Enum):
    PATH_ANNOTATED = "path"
    SEGM_ONLY = "segm"


@dataclass
class PhantomConfig:
    grid_size: tuple[int, int, int] = (96, 96, 96)
    spacing_mm: float = 1.5
    tube_radius_mm: float = 6.0
    wall_thickness_mm: float = 1.5
    target_length_mm: float = 400.0
    min_fold_gap_mm: float = 0.0
    lumen_intensity: float = 1.0
    wall_intensity: float = 0.2
    background_intensity: float = 0.5
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.grid_size, int):
            self.grid_size = (self.grid_size,) * 3
        self.grid_size = tuple(int(n) for n in self.grid_size)
        if not (self.tube_radius_mm > self.wall_thickness_mm > 0):
            raise ValueError("need tube_radius_mm > wall_thickness_mm > 0")
        if not (self.lumen_intensity > self.background_intensity > self.wall_intensity):
            raise ValueError("need lumen_intensity > background_intensity > wall_intensity")
        if self.min_fold_gap_mm < 0:
            raise ValueError("min_fold_gap_mm must be >= 0")

    @property
    def extent_mm(self) -> np.ndarray:
        """Physical position of the last voxel center along each axis."""
        return (np.asarray(self.grid_size) - 1) * self.spacing_mm


@dataclass
class TrackingCase:
    """One episode's world: volumes, endpoints, and the annotation kind."""

    intensity: Volume
    segmentation: Volume
    gt_path: Polyline | None
    start_mm: np.ndarray
    end_mm: np.ndarray
    annotation: Annotation
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.start_mm = np.asarray(self.start_mm, dtype=np.float64)
        self.end_mm = np.asarray(self.end_mm, dtype=np.float64)
        seg = self.segmentation
        for name, pt in (("start", self.start_mm), ("end", self.end_mm)):
            v = mm_to_voxel(pt, seg.spacing_mm)
            if not seg.in_bounds(v) or not seg.data[v]:
                raise ValueError(f"{name}_mm lies outside the segmentation")
        if self.annotation is Annotation.PATH_ANNOTATED:
            if self.gt_path is None:
                raise ValueError("path-annotated case requires gt_path")
            pts = self.gt_path.points_mm
            if not (np.allclose(pts[0], self.start_mm) and np.allclose(pts[-1], self.end_mm)):
                raise ValueError("gt_path endpoints must equal start_mm/end_mm")
            vox = np.asarray([mm_to_voxel(p, seg.spacing_mm) for p in pts])
            if (vox < 0).any() or (vox >= np.asarray(seg.sizes)).any():
                raise ValueError("gt_path leaves the grid")
            if not seg.data[vox[:, 0], vox[:, 1], vox[:, 2]].all():
                raise ValueError("gt_path leaves the segmentation")
        elif self.gt_path is not None:
            raise ValueError("segmentation-only case must not carry a gt_path")


_MAX_ATTEMPTS = 40
_VALIDATE_STEP_MM = 0.5
_STORE_STEP_MM = 1.0


_SLACK_LO, _SLACK_HI = 1.2, 2.6


def _clearance_mm(cfg: PhantomConfig) -> float:
    return 2.0 * cfg.tube_radius_mm + cfg.min_fold_gap_mm


def fold_arc_window_mm(cfg: PhantomConfig) -> float:
    """Arc-length separation below which two curve points count as adjacent.

    Exceeds the half-circumference of the widest fold U-turn, whose turning
    radius is half the largest fold pitch; otherwise every fold would be
    rejected as a self-collision. Clearance guarantees apply only to pairs
    further apart than this window.
    """
    rho_max = 0.5 * (_clearance_mm(cfg) + _SLACK_HI)
    return 1.35 * np.pi * rho_max


def _propose_control_points(cfg: PhantomConfig, rng: np.random.Generator):
    """Serpentine control polygon: jittered legs joined by semicircular folds.

    Returns ``(control_points, max_slack)`` or None when this proposal ran out
    of room (retryable bad luck). Raises :class:`PackingError` when the grid
    provably cannot hold the requested length at all.
    """
    r = cfg.tube_radius_mm
    margin = r + 1.0
    extent = cfg.extent_mm
    span = extent - 2 * margin
    if (span <= 4.0).any():
        raise PackingError(f"grid {cfg.grid_size} too small for tube radius {r} mm")

    axes = rng.permutation(3)  # legs run along u, folds advance along v
    u, v, w = (int(a) for a in axes)

    clearance = _clearance_mm(cfg)
    n_fold_cap = int(span[v] // (clearance + _SLACK_HI))
    capacity = (n_fold_cap + 1) * span[u] * 0.85
    if capacity < cfg.target_length_mm:
        raise PackingError(
            f"cannot pack {cfg.target_length_mm:.0f} mm of tube into grid "
            f"{cfg.grid_size} at radius {r} mm (capacity ~{capacity:.0f} mm)"
        )

    mean_leg = 0.78 * span[u]
    n_need = min(int(np.ceil(1.25 * cfg.target_length_mm / mean_leg)), n_fold_cap)
    slacks = rng.uniform(_SLACK_LO, _SLACK_HI, size=max(n_fold_cap, 1))
    if cfg.min_fold_gap_mm == 0.0 and n_need >= 1:
        # Keep at least one used fold within half a voxel of touching so
        # phantoms genuinely exhibit surface contact.
        slacks[rng.integers(0, max(n_need - 1, 1))] = rng.uniform(1.2, 1.45)
    pitches = clearance + slacks

    w_mid = margin + rng.uniform(0.3, 0.7) * span[w]
    ctrl: list[np.ndarray] = []

    def point(cu: float, cv: float, cw: float) -> np.ndarray:
        p = np.empty(3)
        p[u], p[v], p[w] = cu, cv, cw
        return p

    def emit_leg(a_u: float, b_u: float, cv: float, cw: float) -> float:
        leg_len = abs(b_u - a_u)
        n_pts = max(int(leg_len // leg_step), 2)
        for j, t in enumerate(np.linspace(0.0, 1.0, n_pts + 1)):
            cu = a_u + t * (b_u - a_u)
            if 0 < j < n_pts:
                cu += rng.uniform(-1.0, 1.0)
                cw_j = cw + rng.uniform(-0.4, 0.4)  # mild out-of-plane waviness
            else:
                cw_j = cw
            ctrl.append(point(cu, cv, cw_j))
        return leg_len

    leg_step = 9.0
    low_in, high_in = margin, margin + span[u]
    inset_hi = lambda: rng.uniform(0.6, max(0.12 * span[u], 0.7))

    used_v = pitches[: max(n_need, 1)].sum()
    v_pos = margin + rng.uniform(0.0, max(span[v] - used_v, 0.0))
    going_up = bool(rng.integers(0, 2))

    total_len = 0.0
    need_len = 1.12 * cfg.target_length_mm
    start_u = (low_in if going_up else high_in) + (1 if going_up else -1) * inset_hi()
    k = 0
    while True:
        rho_next = pitches[k] / 2 if k < len(pitches) else 0.0
        # The fold arc overshoots the shared leg endpoint by its radius.
        if going_up:
            far_u = high_in - rho_next - inset_hi()
        else:
            far_u = low_in + rho_next + inset_hi()
        if abs(far_u - start_u) < 2 * leg_step:
            return None
        w_k = w_mid + rng.uniform(-0.8, 0.8)
        total_len += emit_leg(start_u, far_u, v_pos, w_k)
        if total_len >= need_len:
            break
        if k >= len(pitches) or v_pos + pitches[k] > margin + span[v]:
            return None  # ran out of fold room before reaching the length
        # Semicircular fold to the next leg, advancing v by one pitch.
        rho = pitches[k] / 2
        center_v = v_pos + rho
        w_next = w_mid + rng.uniform(-0.8, 0.8)
        sgn = 1.0 if going_up else -1.0
        for phi in (np.pi / 4, np.pi / 2, 3 * np.pi / 4):
            frac = phi / np.pi
            cw = w_k + frac * (w_next - w_k)
            ctrl.append(point(far_u + sgn * rho * np.sin(phi), center_v - rho * np.cos(phi), cw))
        total_len += np.pi * rho
        v_pos += pitches[k]
        going_up = not going_up
        start_u = far_u
        k += 1

    return np.asarray(ctrl), float(slacks[: k + 1].max())


def _smooth_and_trim(ctrl: np.ndarray, cfg: PhantomConfig) -> Polyline | None:
    tck, _ = splprep(ctrl.T, s=0, k=3)
    poly_len = np.linalg.norm(np.diff(ctrl, axis=0), axis=1).sum()
    uu = np.linspace(0.0, 1.0, max(int(poly_len * 4), 64))
    dense = np.asarray(splev(uu, tck)).T
    curve = Polyline(dense, cfg.spacing_mm).resample(_VALIDATE_STEP_MM)
    cum = curve.cumulative_length_mm
    if cum[-1] < 0.93 * cfg.target_length_mm:
        return None
    if cum[-1] <= cfg.target_length_mm:
        return curve
    # Trim the tail to land exactly on the target length.
    i = int(np.searchsorted(cum, cfg.target_length_mm))
    frac = (cfg.target_length_mm - cum[i - 1]) / (cum[i] - cum[i - 1])
    last = curve.points_mm[i - 1] + frac * (curve.points_mm[i] - curve.points_mm[i - 1])
    pts = np.vstack([curve.points_mm[:i], last])
    return Polyline(pts, cfg.spacing_mm)


def _min_nonadjacent_clearance(curve: Polyline, window_mm: float) -> float:
    """Minimum pairwise distance between curve samples more than ``window_mm``
    apart in arc length. Brute force over all sample pairs."""
    pts = curve.points_mm
    cum = curve.cumulative_length_mm
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    sep = np.abs(cum[:, None] - cum[None, :])
    d2[sep <= window_mm] = np.inf
    best = d2.min()
    return float(np.sqrt(best)) if np.isfinite(best) else np.inf


def generate_centerline(cfg: PhantomConfig, rng: np.random.Generator) -> Polyline:
    """Generate the phantom centerline: a smooth, self-avoiding folded curve.

    Postconditions: total arc length within 10% of ``target_length_mm``, the
    tube (centerline dilated by the tube radius) stays inside the grid, and
    any two points further apart than the fold-turn arc window keep a
    centerline clearance of at least ``2 * tube_radius + min_fold_gap`` so
    tube surfaces may touch but never overlap.

    Raises :class:`PackingError` when the requested length cannot be packed.
    """
    r = cfg.tube_radius_mm
    extent = cfg.extent_mm
    failure = "no attempts made"
    for _ in range(_MAX_ATTEMPTS):
        proposal = _propose_control_points(cfg, rng)
        if proposal is None:
            failure = "ran out of fold room"
            continue
        ctrl, _ = proposal
        curve = _smooth_and_trim(ctrl, cfg)
        if curve is None:
            failure = "curve came out too short after smoothing"
            continue
        pts = curve.points_mm
        if (pts < r).any() or (pts > extent - r).any():
            failure = "tube left the grid"
            continue
        clear = _min_nonadjacent_clearance(curve, fold_arc_window_mm(cfg))
        if clear < _clearance_mm(cfg) + _VALIDATE_STEP_MM:
            failure = f"fold clearance {clear:.2f} mm below {_clearance_mm(cfg):.2f} mm"
            continue
        stored = curve.resample(_STORE_STEP_MM)
        if abs(stored.length_mm - cfg.target_length_mm) > 0.1 * cfg.target_length_mm:
            failure = "length left the +-10% band"
            continue
        return stored
    raise PackingError(f"could not pack phantom centerline after {_MAX_ATTEMPTS} attempts: {failure}")


def _distance_field_sq(curve: Polyline, shape, spacing: float, reach_mm: float) -> np.ndarray:
    """Per-voxel squared distance to the polyline, exact wherever it is
    at most ``reach_mm``; +inf beyond that."""
    dist2 = np.full(shape, np.inf, dtype=np.float64)
    pts = curve.points_mm
    for i in range(len(pts) - 1):
        hit = _segment_box_distance_sq(shape, spacing, pts[i], pts[i + 1], reach_mm)
        if hit is None:
            continue
        box, d2 = hit
        np.minimum(dist2[box], d2, out=dist2[box])
    return dist2


def rasterize_case(
    centerline: Polyline,
    cfg: PhantomConfig,
    annotation: Annotation,
    rng: np.random.Generator,
) -> TrackingCase:
    """Rasterize a centerline into a :class:`TrackingCase`.

    Segmentation marks voxels within the tube radius of the centerline;
    intensity is lumen inside ``tube_radius - wall_thickness``, wall in the
    shell, background outside, with optional Gaussian noise clamped to [0, 1].
    """
    shape = cfg.grid_size
    r = cfg.tube_radius_mm
    w = cfg.wall_thickness_mm
    dist2 = _distance_field_sq(centerline, shape, cfg.spacing_mm, r + cfg.spacing_mm)

    in_tube = dist2 <= r * r
    in_lumen = dist2 < (r - w) ** 2
    segmentation = in_tube.astype(np.uint8)

    intensity = np.full(shape, cfg.background_intensity, dtype=np.float64)
    intensity[in_tube] = cfg.wall_intensity
    intensity[in_lumen] = cfg.lumen_intensity
    if cfg.noise_sigma > 0:
        intensity += rng.normal(0.0, cfg.noise_sigma, size=shape)
        np.clip(intensity, 0.0, 1.0, out=intensity)

    return TrackingCase(
        intensity=Volume(intensity.astype(np.float32), cfg.spacing_mm),
        segmentation=Volume(segmentation, cfg.spacing_mm),
        gt_path=centerline if annotation is Annotation.PATH_ANNOTATED else None,
        start_mm=centerline.points_mm[0],
        end_mm=centerline.points_mm[-1],
        annotation=annotation,
        meta={"config": asdict(cfg), "seed": cfg.seed},
    )


def build_case(cfg: PhantomConfig, annotation: Annotation) -> TrackingCase:
    """Generate and rasterize one case from ``cfg.seed``; bit-reproducible."""
    rng = np.random.default_rng(cfg.seed)
    centerline = generate_centerline(cfg, rng)
    return rasterize_case(centerline, cfg, annotation, rng)


def save_case(case: TrackingCase, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_volume(case.intensity, directory / "intensity.nrrd")
    save_volume(case.segmentation, directory / "segmentation.nrrd")
    if case.gt_path is not None:
        save_polyline(case.gt_path, directory / "gt_path.json")
    meta = {
        "start_mm": case.start_mm.tolist(),
        "end_mm": case.end_mm.tolist(),
        "annotation": case.annotation.value,
        **case.meta,
    }
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2))


def load_case(directory: str | Path) -> TrackingCase:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise DataError(f"{directory} is not a case directory (missing meta.json)")
    meta = json.loads(meta_path.read_text())
    annotation = Annotation(meta["annotation"])
    gt_path = None
    if annotation is Annotation.PATH_ANNOTATED:
        gt_path = load_polyline(directory / "gt_path.json")
    extra = {k: v for k, v in meta.items() if k not in ("start_mm", "end_mm", "annotation")}
    return TrackingCase(
        intensity=load_volume(directory / "intensity.nrrd"),
        segmentation=load_volume(directory / "segmentation.nrrd"),
        gt_path=gt_path,
        start_mm=np.asarray(meta["start_mm"]),
        end_mm=np.asarray(meta["end_mm"]),
        annotation=annotation,
        meta=extra,
    )
