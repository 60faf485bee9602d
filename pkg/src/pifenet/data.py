"""Point-cloud and label I/O, synthetic pedestrian scenes, scene augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .evaluation import GroundTruth
from .geometry import Box3D, Detection, normalize_angle
from .pillars import PillarConfig, PointCloud

PathLike = Union[str, Path]


class FormatError(ValueError):
    pass


# --- KITTI velodyne binaries -------------------------------------------------

def load_kitti_bin(path: PathLike) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise FormatError(f"{path}: truncated record ({len(raw)} bytes is not a multiple of 16)")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    bad = ~np.isfinite(pts).all(axis=1)
    if bad.any():
        raise FormatError(f"{path}: non-finite value in point {int(np.argmax(bad))}")
    return PointCloud(pts)


def save_kitti_bin(path: PathLike, cloud: PointCloud) -> None:
    np.asarray(cloud.points, dtype="<f4").reshape(-1, 4).tofile(str(path))


# --- KITTI labels and calibration ---------------------------------------------

@dataclass
class Calibration:
    R0_rect: np.ndarray  # 3x3
    Tr_velo_to_cam: np.ndarray  # 3x4

    def rect_to_velo(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        cam = np.linalg.solve(self.R0_rect, pts.T).T
        T = np.eye(4)
        T[:3] = self.Tr_velo_to_cam
        homo = np.c_[cam, np.ones(len(cam))]
        return np.linalg.solve(T, homo.T).T[:, :3]


def load_calibration(path: PathLike) -> Calibration:
    values = {}
    for line in Path(path).read_text().splitlines():
        if ":" not in line:
            continue
        key, rest = line.split(":", 1)
        try:
            values[key.strip()] = np.array([float(v) for v in rest.split()])
        except ValueError:
            raise FormatError(f"{path}: bad calibration row {key!r}") from None
    try:
        r0 = values.get("R0_rect", values.get("R_rect"))
        tr = values.get("Tr_velo_to_cam", values.get("Tr_velo_cam"))
        return Calibration(r0.reshape(3, 3), tr.reshape(3, 4))
    except AttributeError:
        raise FormatError(f"{path}: missing R0_rect or Tr_velo_to_cam") from None


def load_kitti_labels(path: PathLike, calib: Optional[Calibration],
                      classes: Sequence[str] = ("Pedestrian",)) -> list[GroundTruth]:
    """Parse camera-frame label records into sensor-frame boxes."""
    if calib is None:
        raise FormatError("KITTI labels need a calibration file")
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 15:
            raise FormatError(f"{path}:{lineno}: expected at least 15 fields, got {len(parts)}")
        name = parts[0]
        try:
            trunc, occ = float(parts[1]), int(float(parts[2]))
            bbox = tuple(float(v) for v in parts[4:8])
            h, w, l = (float(v) for v in parts[8:11])
            loc = np.array([float(v) for v in parts[11:14]])
            ry = float(parts[14])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed numeric field") from None
        if name not in classes:
            continue
        bottom = calib.rect_to_velo(loc)[0]
        box = Box3D(bottom[0], bottom[1], bottom[2] + h / 2, w, l, h, -ry - math.pi / 2)
        out.append(GroundTruth(box, name, trunc, occ, bbox))
    return out


# --- sensor-frame box records (toy labels and detections) ---------------------

def format_detection(det: Detection) -> str:
    b = det.box
    return (f"{det.label} {b.cx:.6f} {b.cy:.6f} {b.cz:.6f} {b.w:.6f} {b.l:.6f} {b.h:.6f} "
            f"{b.theta:.6f} {det.score:.6f}")


def format_box(box: Box3D, label: str = "Pedestrian") -> str:
    return (f"{label} {box.cx:.6f} {box.cy:.6f} {box.cz:.6f} {box.w:.6f} {box.l:.6f} {box.h:.6f} "
            f"{box.theta:.6f}")


def write_detections(path: PathLike, dets: Sequence[Detection]) -> None:
    Path(path).write_text("".join(format_detection(d) + "\n" for d in dets))


def read_box_records(path: PathLike):
    """Read ``label cx cy cz w l h theta [score]`` lines; returns (label, Box3D, score or None)."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) not in (8, 9):
            raise FormatError(f"{path}:{lineno}: expected 8 or 9 fields, got {len(parts)}")
        try:
            vals = [float(v) for v in parts[1:]]
            box = Box3D(*vals[:7])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        out.append((parts[0], box, vals[7] if len(vals) == 8 else None))
    return out


def read_detections(path: PathLike) -> list[Detection]:
    return [Detection(box, score if score is not None else 1.0, label)
            for label, box, score in read_box_records(path)]


def read_box_labels(path: PathLike) -> list[GroundTruth]:
    return [GroundTruth(box, label) for label, box, _ in read_box_records(path)]


# --- synthetic scenes ------------------------------------------------------

@dataclass
class SyntheticScene:
    cloud: PointCloud
    boxes: np.ndarray  # [G, 7]
    seed: int

    def ground_truth(self) -> list[GroundTruth]:
        return [GroundTruth(Box3D.from_array(b)) for b in self.boxes]


GROUND_Z = -1.9


def synthetic_scene(cfg: PillarConfig, seed: int, min_peds: int = 2, max_peds: int = 4,
                    ground_points: int = 1500, poles: int = 1) -> SyntheticScene:
    """Ground plane plus upright elliptic-cylinder pedestrians seen from the origin.

    Point density falls off with range; every pedestrian keeps at least 8
    points and footprints never overlap.
    """
    rng = np.random.default_rng(seed)
    margin = 0.8
    x_lo, x_hi = max(cfg.x_min, 0.0) + margin, cfg.x_max - margin
    y_lo, y_hi = cfg.y_min + margin, cfg.y_max - margin
    n_peds = int(rng.integers(min_peds, max_peds + 1))
    boxes, centers = [], []
    while len(boxes) < n_peds:
        c = np.array([rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi)])
        if any(np.hypot(*(c - o)) < 1.3 for o in centers):
            continue
        w, l, h = rng.uniform(0.5, 0.7), rng.uniform(0.6, 0.9), rng.uniform(1.55, 1.9)
        theta = rng.uniform(-math.pi, math.pi)
        centers.append(c)
        boxes.append([c[0], c[1], GROUND_Z + h / 2, w, l, h, theta])

    chunks = []
    # ground, thinned with range
    g = np.c_[rng.uniform(cfg.x_min, cfg.x_max, 3 * ground_points), rng.uniform(cfg.y_min, cfg.y_max, 3 * ground_points)]
    rng_d = np.hypot(g[:, 0], g[:, 1])
    g = g[rng.random(len(g)) < np.exp(-rng_d / 12.0)][:ground_points]
    chunks.append(np.c_[g, GROUND_Z + rng.normal(0, 0.02, len(g)), rng.uniform(0.0, 0.2, len(g))])

    for cx, cy, _, w, l, h, th in boxes:
        d = math.hypot(cx, cy)
        n = max(8, int(220 * math.exp(-d / 7.0)))
        ang = rng.uniform(0, 2 * math.pi, n)
        rad = rng.uniform(0.75, 0.98, n)
        u = rad * (l / 2) * np.cos(ang)
        v = rad * (w / 2) * np.sin(ang)
        c, s = math.cos(th), math.sin(th)
        z = GROUND_Z + rng.uniform(0.02, 0.98, n) * h
        chunks.append(np.c_[cx + c * u - s * v, cy + s * u + c * v, z, rng.uniform(0.2, 0.5, n)])

    placed = 0
    while placed < poles:
        c = np.array([rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi)])
        if any(np.hypot(*(c - o)) < 1.3 for o in centers):
            continue
        placed += 1
        n = 40
        ang = rng.uniform(0, 2 * math.pi, n)
        z = rng.uniform(GROUND_Z, min(cfg.z_max, GROUND_Z + 2.4), n)
        chunks.append(np.c_[c[0] + 0.08 * np.cos(ang), c[1] + 0.08 * np.sin(ang), z, rng.uniform(0.5, 0.8, n)])

    pts = np.concatenate(chunks)
    pts = pts[rng.permutation(len(pts))]
    return SyntheticScene(PointCloud(pts), np.array(boxes, dtype=np.float64).reshape(-1, 7), seed)


def synthetic_scenes(cfg: PillarConfig, count: int, seed: int, **kw) -> list[SyntheticScene]:
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=count)
    return [synthetic_scene(cfg, int(s), **kw) for s in seeds]


# --- augmentation ------------------------------------------------------------

@dataclass(frozen=True)
class AugmentRanges:
    rotation: float = math.pi / 4
    scale: tuple[float, float] = (0.95, 1.05)
    translation_std: float = 0.2
    flip_prob: float = 0.5


IDENTITY_AUGMENT = AugmentRanges(0.0, (1.0, 1.0), 0.0, 0.0)


def augment_scene(cloud: PointCloud, boxes: np.ndarray, seed: int,
                  ranges: AugmentRanges = AugmentRanges()) -> tuple[PointCloud, np.ndarray]:
    """Apply one random global flip, z-rotation, scaling and translation to points and boxes."""
    rng = np.random.default_rng(seed)
    flip = rng.random() < ranges.flip_prob
    angle = rng.uniform(-ranges.rotation, ranges.rotation) if ranges.rotation else 0.0
    scale = rng.uniform(*ranges.scale) if ranges.scale[0] != ranges.scale[1] else ranges.scale[0]
    shift = rng.normal(0.0, ranges.translation_std, 3) if ranges.translation_std else np.zeros(3)

    pts = cloud.points.copy()
    bx = np.asarray(boxes, dtype=np.float64).reshape(-1, 7).copy()
    if flip:
        pts[:, 1] *= -1
        bx[:, 1] *= -1
        bx[:, 6] *= -1
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    if angle:
        pts[:, :2] = pts[:, :2] @ rot.T
        bx[:, :2] = bx[:, :2] @ rot.T
        bx[:, 6] += angle
    if scale != 1.0:
        pts[:, :3] *= scale
        bx[:, :6] *= scale
    if shift.any():
        pts[:, :3] += shift
        bx[:, :3] += shift
    bx[:, 6] = [normalize_angle(t) for t in bx[:, 6]]
    return PointCloud(pts), bx
