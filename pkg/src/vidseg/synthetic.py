"""Moving-shape scenes with dense labels, rendered on the fly.

Shapes (rectangles, disks, triangles, one kind per class) glide over a
static textured background and bounce off the borders. Labels are exact by
construction: each pixel takes the class of the topmost shape covering it,
or background (class 0). Shape shading moves with the shape so motion is
observable away from silhouette edges, and the background texture is fixed
across frames so zero flow is learnable where nothing moves.

Overlapping shapes continuously occlude and reveal one another (and the
background), which is exactly the failure mode pure warping cannot repair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SyntheticConfig
from .errors import ShapeError


@dataclass(frozen=True)
class ShapeSpec:
    kind: str  # rect | disk | tri
    class_id: int
    cy: float
    cx: float
    vy: float
    vx: float
    half_h: float
    half_w: float
    shade: float


@dataclass(frozen=True)
class SyntheticScene:
    height: int
    width: int
    class_count: int
    frame_count: int
    shapes: tuple[ShapeSpec, ...]
    texture: np.ndarray  # (H, W) static background texture in [0, 1]
    travel_margin: float = 0.0  # how far past the canvas shape centers roam


@dataclass(frozen=True)
class Snippet:
    """Consecutive frames (3, H, W) in [0, 1] with per-frame labels (H, W)."""

    frames: tuple[np.ndarray, ...]
    labels: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.frames)


_KINDS = ("rect", "disk", "tri")


def class_color(class_id: int, class_count: int) -> np.ndarray:
    """Distinct, deterministic RGB per class (background is dark gray)."""
    if class_id == 0:
        return np.array([0.12, 0.12, 0.12])
    phase = 2 * np.pi * (class_id - 1) / max(class_count - 1, 1)
    return 0.55 + 0.4 * np.cos(phase + np.array([0.0, 2.1, 4.2]))


def _bounce(start: float, velocity: float, t: int, lo: float, hi: float) -> float:
    """Position after t frames of constant velocity with reflection at lo/hi."""
    if hi <= lo:
        return (lo + hi) / 2
    span = hi - lo
    m = (start - lo + velocity * t) % (2 * span)
    return lo + (2 * span - m if m > span else m)


def _mask(kind: str, dy: np.ndarray, dx: np.ndarray, hh: float, hw: float) -> np.ndarray:
    if kind == "rect":
        return (np.abs(dy) <= hh) & (np.abs(dx) <= hw)
    if kind == "disk":
        return (dy / hh) ** 2 + (dx / hw) ** 2 <= 1.0
    if kind == "tri":
        return (dy >= -hh) & (dy <= hh) & (np.abs(dx) <= hw * (hh - dy) / (2 * hh))
    raise ShapeError(f"unknown shape kind {kind!r}")


def make_scene(rng: np.random.Generator, cfg: SyntheticConfig,
               frame_count: int | None = None) -> SyntheticScene:
    frame_count = frame_count or cfg.frames_per_scene
    n = int(rng.integers(cfg.shape_count_min, cfg.shape_count_max + 1))
    shapes = []
    for i in range(n):
        class_id = 1 + i % (cfg.class_count - 1)
        kind = _KINDS[(class_id - 1) % len(_KINDS)]
        hh = float(rng.uniform(cfg.size_min, cfg.size_max))
        hw = float(rng.uniform(cfg.size_min, cfg.size_max))
        # uniform direction, magnitude in [speed_min, speed_max] px/frame
        angle = float(rng.uniform(0, 2 * np.pi))
        speed = float(rng.uniform(cfg.speed_min, cfg.speed_max))
        # travel bounds extend past the canvas so shapes keep entering and
        # leaving the view: freshly revealed content has no source in the
        # previous frame and can only come from the current one
        my, mx = hh + cfg.size_max, hw + cfg.size_max
        shapes.append(ShapeSpec(
            kind=kind, class_id=class_id,
            cy=float(rng.uniform(-my, cfg.height - 1 + my)),
            cx=float(rng.uniform(-mx, cfg.width - 1 + mx)),
            vy=speed * float(np.sin(angle)),
            vx=speed * float(np.cos(angle)),
            half_h=hh, half_w=hw,
            shade=float(rng.uniform(0.75, 1.0))))
    texture = rng.uniform(0.0, 1.0, size=(cfg.height, cfg.width))
    return SyntheticScene(height=cfg.height, width=cfg.width,
                          class_count=cfg.class_count, frame_count=frame_count,
                          shapes=tuple(shapes), texture=texture,
                          travel_margin=float(cfg.size_max))


def render(scene: SyntheticScene, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Frame (3, H, W) and label map (H, W) at time t."""
    h, w = scene.height, scene.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    background = class_color(0, scene.class_count)
    frame = background[:, None, None] + 0.08 * scene.texture[None]
    frame = np.ascontiguousarray(np.broadcast_to(frame, (3, h, w)).copy())
    labels = np.zeros((h, w), dtype=np.int64)
    for s in scene.shapes:
        my = s.half_h + scene.travel_margin
        mx = s.half_w + scene.travel_margin
        cy = _bounce(s.cy, s.vy, t, -my, h - 1 + my)
        cx = _bounce(s.cx, s.vx, t, -mx, w - 1 + mx)
        dy, dx = ys - cy, xs - cx
        m = _mask(s.kind, dy, dx, s.half_h, s.half_w)
        if not m.any():
            continue
        r = np.sqrt((dy / s.half_h) ** 2 + (dx / s.half_w) ** 2)
        grad = s.shade * (1.0 - 0.3 * np.clip(r, 0, 1.4) / 1.4)
        color = class_color(s.class_id, scene.class_count)
        for ch in range(3):
            frame[ch][m] = color[ch] * grad[m]
        labels[m] = s.class_id
    return np.clip(frame, 0.0, 1.0), labels


def scene_snippet(scene: SyntheticScene) -> Snippet:
    frames, labels = zip(*(render(scene, t) for t in range(scene.frame_count)))
    return Snippet(frames=frames, labels=labels)


def make_snippets(cfg: SyntheticConfig, count: int, seed: int,
                  frame_count: int | None = None) -> list[Snippet]:
    rng = np.random.default_rng(seed)
    return [scene_snippet(make_scene(rng, cfg, frame_count)) for _ in range(count)]


def aligned_static_snippet(height: int = 96, width: int = 96, class_count: int = 4,
                           frame_count: int = 21) -> Snippet:
    """A static scene of full-width horizontal class bands on 8-row boundaries.

    Band alignment makes the 1/8-scale label subsample lossless: upsampling
    the one-hot map by 8 and taking the argmax reproduces the full-resolution
    labels exactly. (Finite rectangles would not: bilinear interpolation
    flips the argmax near interior corners, while full-width bands only have
    horizontal boundaries, where the nearer row always dominates.)
    """
    if height % 8 or width % 8:
        raise ShapeError(f"dims must be divisible by 8, got {(height, width)}")
    labels = np.zeros((height, width), dtype=np.int64)
    bands = height // 8
    for b in range(bands):
        labels[b * 8:(b + 1) * 8, :] = (b * class_count) // bands
    frame = np.zeros((3, height, width))
    for cid in range(class_count):
        color = class_color(cid, class_count)
        m = labels == cid
        for ch in range(3):
            frame[ch][m] = color[ch]
    frames = tuple(frame.copy() for _ in range(frame_count))
    return Snippet(frames=frames, labels=tuple(labels.copy() for _ in range(frame_count)))
