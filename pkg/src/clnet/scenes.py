"""
Procedural scenes rendered twice: an orthographic top-down satellite raster and
a 360 degree ground panorama ray-cast from the camera.

World frame: x grows east, y grows north, metres. Panorama column ``c`` looks
along bearing ``2*pi*c/W`` measured clockwise from north, so north is column 0.
Images are float32 tensors ``(3, H, W)`` in [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .errors import DegenerateSceneError, ValidationError

# one colour per landmark class
PALETTE = np.array(
    [
        [0.85, 0.20, 0.15],
        [0.15, 0.45, 0.85],
        [0.95, 0.80, 0.15],
        [0.55, 0.25, 0.70],
        [0.95, 0.55, 0.10],
        [0.10, 0.70, 0.65],
    ],
    dtype=np.float32,
)
NUM_COLOR_CLASSES = len(PALETTE)
SKY_COLOR = np.array([0.70, 0.85, 0.97], dtype=np.float32)
TERRAIN_COLOR = np.array([0.35, 0.50, 0.28], dtype=np.float32)
ROAD_COLOR = np.array([0.45, 0.45, 0.47], dtype=np.float32)

CAMERA_HEIGHT = 1.6
VERTICAL_FOV = math.pi / 2


@dataclass(frozen=True)
class Landmark:
    x: float
    y: float
    radius: float
    height: float
    color_class: int


@dataclass(frozen=True)
class RoadSegment:
    points: Tuple[Tuple[float, float], ...]
    width: float


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    index: int
    extent: float
    landmarks: Tuple[Landmark, ...]
    roads: Tuple[RoadSegment, ...]
    camera: Tuple[float, float]
    noise: float = 0.0

    def __post_init__(self):
        if not self.landmarks:
            raise ValidationError("a scene needs at least one landmark")
        for lm in self.landmarks:
            if not (0 <= lm.x <= self.extent and 0 <= lm.y <= self.extent):
                raise ValidationError(f"landmark at ({lm.x:.2f}, {lm.y:.2f}) outside extent {self.extent}")
        cx, cy = self.camera
        if not (0 <= cx <= self.extent and 0 <= cy <= self.extent):
            raise ValidationError(f"camera at ({cx:.2f}, {cy:.2f}) outside extent {self.extent}")


@dataclass
class PairRecord:
    pair_id: str
    ground: torch.Tensor
    satellite: torch.Tensor
    # camera minus satellite centre, in pixels (row down, col right)
    offset: Tuple[float, float] = (0.0, 0.0)
    semi_positive_ids: List[str] = field(default_factory=list)
    semi_positive_images: Dict[str, torch.Tensor] = field(default_factory=dict)


# ---------- SCENE GENERATION ----------

def _random_road(rng: np.random.Generator, extent: float, camera: Tuple[float, float]) -> RoadSegment:
    # enters on one edge, bends near the camera, leaves on another edge
    def edge_point(side: int) -> Tuple[float, float]:
        t = float(rng.uniform(0.1, 0.9)) * extent
        return [(t, 0.0), (extent, t), (t, extent), (0.0, t)][side]

    start_side = int(rng.integers(4))
    end_side = (start_side + int(rng.integers(1, 4))) % 4
    bend = (
        camera[0] + float(rng.uniform(-0.25, 0.25)) * extent,
        camera[1] + float(rng.uniform(-0.25, 0.25)) * extent,
    )
    width = float(rng.uniform(0.03, 0.06)) * extent
    return RoadSegment(points=(edge_point(start_side), bend, edge_point(end_side)), width=width)


def generate_scene(
    dataset_seed: int,
    index: int,
    extent: float = 100.0,
    noise: float = 0.0,
    camera: Optional[Tuple[float, float]] = None,
    attempt: int = 0,
) -> SceneSpec:
    """Deterministic in (dataset_seed, index, attempt)."""
    if index < 0:
        raise ValidationError(f"scene index must be >= 0, got {index}")
    rng = np.random.default_rng([dataset_seed, index, attempt])
    camera = camera or (extent / 2, extent / 2)

    landmarks: List[Landmark] = []
    n_landmarks = int(rng.integers(3, 9))
    while len(landmarks) < n_landmarks:
        radius = float(rng.uniform(0.02, 0.06)) * extent
        x, y = (float(v) for v in rng.uniform(0.08, 0.92, size=2) * extent)
        # keep the camera outside every landmark with some clearance
        if math.hypot(x - camera[0], y - camera[1]) < radius + 0.05 * extent:
            continue
        landmarks.append(
            Landmark(
                x=x,
                y=y,
                radius=radius,
                height=float(rng.uniform(0.04, 0.20)) * extent,
                color_class=int(rng.integers(NUM_COLOR_CLASSES)),
            )
        )
    roads = tuple(_random_road(rng, extent, camera) for _ in range(int(rng.integers(1, 3))))
    return SceneSpec(
        seed=dataset_seed,
        index=index,
        extent=extent,
        landmarks=tuple(landmarks),
        roads=roads,
        camera=camera,
        noise=noise,
    )


# ---------- PROJECTIONS ----------

def world_to_raster(
    point: Tuple[float, float],
    hw: Tuple[int, int],
    extent: float,
    center: Tuple[float, float],
) -> Tuple[float, float]:
    """(row, col) of a world point in a raster of side ``extent`` metres centred at ``center``."""
    h, w = hw
    row = (center[1] + extent / 2 - point[1]) / extent * h - 0.5
    col = (point[0] - (center[0] - extent / 2)) / extent * w - 0.5
    return row, col


def _road_mask(px: np.ndarray, py: np.ndarray, roads: Sequence[RoadSegment]) -> np.ndarray:
    mask = np.zeros(px.shape, dtype=bool)
    for road in roads:
        for (x0, y0), (x1, y1) in zip(road.points, road.points[1:]):
            sx, sy = x1 - x0, y1 - y0
            length2 = sx * sx + sy * sy
            t = np.clip(((px - x0) * sx + (py - y0) * sy) / max(length2, 1e-12), 0.0, 1.0)
            dist = np.hypot(px - (x0 + t * sx), py - (y0 + t * sy))
            mask |= dist <= road.width / 2
    return mask


def _add_noise(img: np.ndarray, sigma: float, rng_key: Sequence[int]) -> np.ndarray:
    if sigma <= 0:
        return img
    rng = np.random.default_rng(list(rng_key))
    return np.clip(img + rng.normal(0.0, sigma, size=img.shape).astype(np.float32), 0.0, 1.0)


def _to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32))


# ---------- RENDERING ----------

def render_satellite(
    scene: SceneSpec,
    hw: Tuple[int, int] = (64, 64),
    center: Optional[Tuple[float, float]] = None,
    noise_stream: int = 0,
) -> torch.Tensor:
    """Orthographic top-down raster covering ``scene.extent`` metres around ``center``."""
    h, w = hw
    center = center or scene.camera
    rows, cols = np.mgrid[0:h, 0:w]
    px = center[0] - scene.extent / 2 + (cols + 0.5) * scene.extent / w
    py = center[1] + scene.extent / 2 - (rows + 0.5) * scene.extent / h

    img = np.broadcast_to(TERRAIN_COLOR, (h, w, 3)).copy()
    img[_road_mask(px, py, scene.roads)] = ROAD_COLOR
    # taller landmarks are seen on top
    for lm in sorted(scene.landmarks, key=lambda l: l.height):
        inside = (px - lm.x) ** 2 + (py - lm.y) ** 2 <= lm.radius ** 2
        img[inside] = PALETTE[lm.color_class]
    img = _add_noise(img, scene.noise, (scene.seed, scene.index, 1, noise_stream))
    return _to_tensor(img)


def render_ground(scene: SceneSpec, hw: Tuple[int, int] = (32, 128)) -> torch.Tensor:
    """
    Panorama by ray casting: each column hits the nearest landmark disc;
    the hit distance sets how tall it appears around the horizon row.
    """
    h, w = hw
    cx, cy = scene.camera
    theta = 2 * math.pi * np.arange(w) / w
    dx, dy = np.sin(theta), np.cos(theta)

    hit_t = np.full(w, np.inf)
    hit_id = np.full(w, -1)
    for i, lm in enumerate(scene.landmarks):
        ox, oy = lm.x - cx, lm.y - cy
        along = ox * dx + oy * dy
        perp2 = ox * ox + oy * oy - along ** 2
        hits = (along > 0) & (perp2 <= lm.radius ** 2)
        t = along - np.sqrt(np.clip(lm.radius ** 2 - perp2, 0.0, None))
        closer = hits & (t < hit_t)
        hit_t[closer] = t[closer]
        hit_id[closer] = i
    if (hit_id < 0).all():
        raise DegenerateSceneError(f"scene ({scene.seed}, {scene.index}) has no landmark visible from the camera")

    elevation = (h / 2 - np.arange(h) - 0.5) / h * VERTICAL_FOV
    elev = elevation[:, None]
    img = np.empty((h, w, 3), dtype=np.float32)
    img[elevation > 0] = SKY_COLOR

    below = elev <= 0
    depression = np.where(below, -elev, 1.0)
    ground_t = CAMERA_HEIGHT / np.tan(np.clip(depression, 1e-6, None))
    gx = cx + ground_t * dx[None, :]
    gy = cy + ground_t * dy[None, :]
    terrain = np.where(_road_mask(gx, gy, scene.roads)[..., None], ROAD_COLOR, TERRAIN_COLOR)
    img = np.where(below[..., None], terrain, img).astype(np.float32)

    heights = np.array([lm.height for lm in scene.landmarks])
    colors = PALETTE[[lm.color_class for lm in scene.landmarks]]
    visible = hit_id >= 0
    top = np.arctan2(heights[hit_id] - CAMERA_HEIGHT, hit_t)
    base = -np.arctan2(CAMERA_HEIGHT, hit_t)
    covered = visible[None, :] & (elev <= top[None, :]) & (elev >= base[None, :])
    img[covered] = colors[np.broadcast_to(hit_id[None, :], covered.shape)[covered]]

    img = _add_noise(img, scene.noise, (scene.seed, scene.index, 0))
    return _to_tensor(img)


def render_pair(
    scene: SceneSpec,
    ground_hw: Tuple[int, int] = (32, 128),
    satellite_hw: Tuple[int, int] = (64, 64),
    pair_id: Optional[str] = None,
) -> PairRecord:
    """Center-aligned ground/satellite pair of one scene."""
    return PairRecord(
        pair_id=pair_id or f"{scene.seed}-{scene.index:06d}",
        ground=render_ground(scene, ground_hw),
        satellite=render_satellite(scene, satellite_hw),
    )


def render_offset_group(
    scene: SceneSpec,
    ground_hw: Tuple[int, int] = (32, 128),
    satellite_hw: Tuple[int, int] = (64, 64),
    pair_id: Optional[str] = None,
) -> PairRecord:
    """
    One positive crop with the camera in its central region plus three
    semi-positive crops that contain the camera away from the centre.
    """
    pair_id = pair_id or f"{scene.seed}-{scene.index:06d}"
    rng = np.random.default_rng([scene.seed, scene.index, 99])
    ext = scene.extent
    cx, cy = scene.camera

    def pixel_offset(center: Tuple[float, float]) -> Tuple[float, float]:
        row, col = world_to_raster(scene.camera, satellite_hw, ext, center)
        return row - (satellite_hw[0] / 2 - 0.5), col - (satellite_hw[1] / 2 - 0.5)

    positive_center = (cx + float(rng.uniform(-0.1, 0.1)) * ext, cy + float(rng.uniform(-0.1, 0.1)) * ext)
    quadrants = [(1, 1), (1, -1), (-1, -1), (-1, 1)]
    chosen = rng.permutation(4)[:3]
    semi_images: Dict[str, torch.Tensor] = {}
    for k, q in enumerate(chosen):
        sx, sy = quadrants[int(q)]
        center = (cx + sx * float(rng.uniform(0.3, 0.4)) * ext, cy + sy * float(rng.uniform(0.3, 0.4)) * ext)
        semi_images[f"{pair_id}-sp{k}"] = render_satellite(scene, satellite_hw, center=center, noise_stream=k + 1)

    return PairRecord(
        pair_id=pair_id,
        ground=render_ground(scene, ground_hw),
        satellite=render_satellite(scene, satellite_hw, center=positive_center),
        offset=pixel_offset(positive_center),
        semi_positive_ids=list(semi_images),
        semi_positive_images=semi_images,
    )


# ---------- AUGMENTATION ----------

def apply_augmentation(rec: PairRecord, k: int, flip: bool) -> PairRecord:
    """
    Flip the satellite east-west and/or rotate it clockwise by ``k`` quarter
    turns; the panorama is mirrored/shifted so the pair stays consistent.
    """
    if tuple(rec.offset) != (0, 0):
        raise ValidationError(f"pair {rec.pair_id}: augmentation needs a center-aligned record")
    k = k % 4
    _, h, w = rec.satellite.shape
    width = rec.ground.shape[-1]
    if k % 2 and h != w:
        raise ValidationError(f"pair {rec.pair_id}: cannot rotate non-square satellite {h}x{w} by 90 degrees")
    if k and width % 4:
        raise ValidationError(f"pair {rec.pair_id}: panorama width {width} not divisible by 4")

    ground, satellite = rec.ground, rec.satellite
    if flip:
        satellite = torch.flip(satellite, dims=[-1])
        ground = torch.roll(torch.flip(ground, dims=[-1]), shifts=1, dims=-1)
    if k:
        satellite = torch.rot90(satellite, k=-k, dims=(-2, -1))
        ground = torch.roll(ground, shifts=k * width // 4, dims=-1)
    return replace(rec, ground=ground.contiguous(), satellite=satellite.contiguous())


def sample_augmentation(seed: Union[int, Sequence[int]]) -> Tuple[int, bool]:
    rng = np.random.default_rng(seed)
    return int(rng.integers(4)), bool(rng.random() < 0.5)


def augment_pair(rec: PairRecord, seed: Union[int, Sequence[int]]) -> PairRecord:
    k, flip = sample_augmentation(seed)
    return apply_augmentation(rec, k, flip)
