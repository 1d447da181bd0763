"""Synthetic latent clips with known object masks.

A scene is a background noise field shared by all frames plus one object
whose footprint (shape token) carries a fixed channel vector (color token)
and drifts linearly across frames.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .text import Prompt, token_id, tokenize, UNK_ID

LATENT_PEAK = 2.0
OBJECT_SIZE = 5
BACKGROUND_AMPLITUDE = 0.15

# rows: R, G, B; columns: latent channels
COLORIZER = np.array([
    [0.55, 0.25, -0.10, 0.20],
    [0.10, 0.55, 0.25, -0.15],
    [-0.15, 0.10, 0.60, 0.25],
])


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class RegionMask:
    masks: np.ndarray  # (n, H, W) bool
    provenance: str = "ground-truth synthetic"

    def __post_init__(self):
        m = np.asarray(self.masks)
        if m.ndim != 3:
            raise SceneError(f"region mask must be (n, H, W), got {m.shape}")
        if m.dtype != bool:
            if not np.all((m == 0) | (m == 1)):
                raise SceneError("region mask must be binary")
            m = m.astype(bool)
        object.__setattr__(self, "masks", m)


@dataclass(frozen=True)
class SceneSpec:
    shape: str = "square"
    color: str = "red"
    velocity: tuple[int, int] = (1, 0)  # (dx, dy) sites per frame
    background: str = "grass"
    frames: int = 8
    channels: int = 4
    height: int = 16
    width: int = 16
    start: tuple[int, int] | None = None  # top-left (x, y); centered-left by default

    def validate(self) -> None:
        for word in (self.shape, self.color, self.background):
            if token_id(word) == UNK_ID:
                raise SceneError(f"token {word!r} is not in the vocabulary")
        if self.shape not in SHAPES:
            raise SceneError(f"no footprint defined for shape {self.shape!r}")
        if self.frames < 1:
            raise SceneError("need at least one frame")
        for i, (x, y) in enumerate(self.positions()):
            if x < 0 or y < 0 or x + OBJECT_SIZE > self.width or y + OBJECT_SIZE > self.height:
                raise SceneError(f"object leaves the frame at frame {i} (top-left {x}, {y})")

    def origin(self) -> tuple[int, int]:
        if self.start is not None:
            return self.start
        dx, dy = self.velocity
        span_x = dx * (self.frames - 1)
        span_y = dy * (self.frames - 1)
        x = (self.width - OBJECT_SIZE - span_x) // 2
        y = (self.height - OBJECT_SIZE - span_y) // 2
        return int(x), int(y)

    def positions(self) -> list[tuple[int, int]]:
        x0, y0 = self.origin()
        dx, dy = self.velocity
        return [(x0 + i * dx, y0 + i * dy) for i in range(self.frames)]

    @property
    def prompt(self) -> str:
        return f"a {self.color} {self.shape}"


def _footprint(shape: str) -> np.ndarray:
    k = OBJECT_SIZE
    yy, xx = np.mgrid[0:k, 0:k]
    c = (k - 1) / 2
    if shape == "square":
        return np.ones((k, k), dtype=bool)
    if shape == "circle":
        return (xx - c) ** 2 + (yy - c) ** 2 <= (k / 2) ** 2 - 0.5
    if shape == "diamond":
        return np.abs(xx - c) + np.abs(yy - c) <= c
    if shape == "triangle":
        return np.abs(xx - c) <= yy / 2 + 0.01
    if shape == "cross":
        return (np.abs(xx - c) < 1) | (np.abs(yy - c) < 1)
    raise SceneError(f"no footprint for {shape!r}")


SHAPES = ("square", "circle", "diamond", "triangle", "cross")


def token_pattern(word: str, channels: int) -> np.ndarray:
    """Unit-RMS channel vector keyed by the word's token id."""
    rng = np.random.default_rng(np.random.SeedSequence([token_id(word), 0xC0102]))
    v = rng.standard_normal(channels)
    return v / np.sqrt(np.mean(v * v))


def render_scene(spec: SceneSpec, seed: int):
    """Returns ``(latents (n, C, H, W), RegionMask, Prompt)``."""
    spec.validate()
    n, c, h, w = spec.frames, spec.channels, spec.height, spec.width
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), token_id(spec.background)]))
    background = BACKGROUND_AMPLITUDE * rng.standard_normal((c, h, w))
    background += 0.1 * token_pattern(spec.background, c)[:, None, None]
    pattern = token_pattern(spec.color, c)
    foot = _footprint(spec.shape)
    video = np.broadcast_to(background, (n, c, h, w)).copy()
    masks = np.zeros((n, h, w), dtype=bool)
    k = OBJECT_SIZE
    for i, (x, y) in enumerate(spec.positions()):
        window = masks[i, y:y + k, x:x + k]
        window |= foot
        video[i][:, masks[i]] = pattern[:, None]
    return video, RegionMask(masks), tokenize(spec.prompt)


def reference_scene():
    return render_scene(SceneSpec(), seed=7)


def render_frame_image(frame: np.ndarray, colorizer: np.ndarray = COLORIZER,
                       peak: float = LATENT_PEAK) -> np.ndarray:
    """``(C, H, W)`` latent -> ``(H, W, 3)`` uint8 through a fixed linear map."""
    frame = np.asarray(frame, dtype=np.float64)
    if not np.all(np.isfinite(frame)):
        raise SceneError("cannot render non-finite latents")
    rgb = np.tensordot(colorizer, frame, axes=(1, 0))  # 3, H, W
    pix = np.rint(127.5 + 127.5 * rgb / peak)
    return np.clip(pix, 0, 255).astype(np.uint8).transpose(1, 2, 0)
