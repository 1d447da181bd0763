"""Cross-attention recording and editing: swap, refinement, re-weighting,
time-averaged word maps, union masks and latent blending.

Maps are ``(sites, tokens)`` per frame, or stacked ``(frames, sites, tokens)``.
Edit functions count ``step`` in denoising order: step 0 is the first
(noisiest, ``t = T``) denoising step, so ``step = T - t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .text import Alignment

STOCHASTIC_TOL = 1e-6


class ControlError(ValueError):
    pass


class AttentionStore:
    """Cross-attention maps per (step t, frame) plus cumulative sums for
    time-averaged maps over steps ``T..t``."""

    def __init__(self, num_steps: int, grid: tuple[int, int] | None = None):
        self.T = int(num_steps)
        self.grid = grid
        self.maps: dict[tuple[int, int], np.ndarray] = {}
        self._cum: dict[tuple[int, int], np.ndarray] = {}

    def record(self, t: int, frame: int, attn: np.ndarray) -> "AttentionStore":
        attn = np.array(attn, dtype=np.float64)
        if attn.ndim != 2:
            raise ControlError(f"attention map must be (sites, tokens), got {attn.shape}")
        if not 0 <= t <= self.T:
            raise ControlError(f"step {t} outside [0, {self.T}]")
        rows = attn.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > STOCHASTIC_TOL):
            raise ControlError(f"attention rows must sum to 1, worst row sums to {rows[np.argmax(np.abs(rows - 1))]:.6g}")
        key = (t, frame)
        if key in self.maps:
            for s in range(0, t + 1):
                self._cum.pop((s, frame), None)
        self.maps[key] = attn
        if t == self.T:
            self._cum[key] = attn.copy()
        elif (t + 1, frame) in self._cum:
            self._cum[key] = self._cum[(t + 1, frame)] + attn
        return self

    def record_all(self, t: int, maps: np.ndarray) -> "AttentionStore":
        for i, m in enumerate(maps):
            self.record(t, i, m)
        return self

    def get(self, t: int, frame: int) -> np.ndarray:
        return self.maps[(t, frame)]

    def frames(self) -> list[int]:
        return sorted({f for _, f in self.maps})

    def steps(self) -> list[int]:
        return sorted({t for t, _ in self.maps}, reverse=True)

    def _cumulative(self, t: int, frame: int) -> np.ndarray:
        key = (t, frame)
        if key in self._cum:
            return self._cum[key]
        missing = [s for s in range(self.T, t - 1, -1) if (s, frame) not in self.maps]
        if missing:
            raise ControlError(f"frame {frame}: steps {missing[:5]} not recorded (need {self.T}..{t})")
        s = self.T
        while (s - 1, frame) in self._cum and s - 1 >= t:
            s -= 1
        if (s, frame) not in self._cum:
            self._cum[(s, frame)] = self.maps[(s, frame)].copy()
        for u in range(s - 1, t - 1, -1):
            self._cum[(u, frame)] = self._cum[(u + 1, frame)] + self.maps[(u, frame)]
        return self._cum[key]

    def averaged_map(self, word: int, t: int, frame: int) -> np.ndarray:
        return averaged_map(self, word, t, frame)


def averaged_map(store: AttentionStore, word: int, t: int, frame: int) -> np.ndarray:
    """Mean of ``word``'s spatial map over recorded steps ``T..t`` for one frame."""
    if t > store.T:
        raise ControlError(f"empty step range: t={t} > T={store.T}")
    avg = store._cumulative(t, frame)[:, word] / (store.T - t + 1)
    if store.grid is not None:
        avg = avg.reshape(store.grid)
    return avg


def averaged_maps(store: AttentionStore, word: int, t: int) -> np.ndarray:
    """Per-frame averaged maps stacked along a leading frame axis."""
    return np.stack([averaged_map(store, word, t, f) for f in store.frames()])


def _same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ControlError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def edit_swap(maps: np.ndarray, injected: np.ndarray, step: int, tau: int) -> np.ndarray:
    """Word swap: use ``injected`` for denoising steps ``step < tau``, else ``maps``."""
    _same_shape(maps, injected, "edit_swap")
    return injected if step < tau else maps


def edit_refine(src_maps: np.ndarray, dst_maps: np.ndarray, align: Alignment,
                step: int, tau: int) -> np.ndarray:
    """Prompt refinement: for ``step < tau`` aligned token columns of the
    target map come from the source map, new tokens keep their own columns,
    and rows are renormalized."""
    src_maps = np.asarray(src_maps)
    dst_maps = np.asarray(dst_maps)
    if src_maps.shape[:-1] != dst_maps.shape[:-1]:
        raise ControlError(f"edit_refine: site shapes differ {src_maps.shape} vs {dst_maps.shape}")
    n_src, n_dst = src_maps.shape[-1], dst_maps.shape[-1]
    for j, i in align.pairs:
        if not (0 <= j < n_dst and 0 <= i < n_src):
            raise ControlError(f"alignment pair {j}->{i} out of range for maps with {n_dst}/{n_src} tokens")
    if step >= tau:
        return dst_maps
    out = dst_maps.copy()
    if align.pairs:
        dst_idx, src_idx = zip(*align.pairs)
        out[..., list(dst_idx)] = src_maps[..., list(src_idx)]
    return out / out.sum(axis=-1, keepdims=True)


def reweight(maps: np.ndarray, word: int, scale: float) -> np.ndarray:
    """Scale one token column; rows are deliberately not renormalized."""
    maps = np.asarray(maps)
    if not 0 <= word < maps.shape[-1]:
        raise ControlError(f"token index {word} out of range for {maps.shape[-1]} tokens")
    out = maps.copy()
    out[..., word] = out[..., word] * scale
    return out


def max_normalize(m: np.ndarray, spatial_axes: int) -> np.ndarray:
    axes = tuple(range(m.ndim - spatial_axes, m.ndim))
    peak = m.max(axis=axes, keepdims=True)
    safe = np.where(peak > 0, peak, 1.0)
    return np.where(peak > 0, m / safe, 0.0)


def binarize(avg: np.ndarray, threshold: float, spatial_axes: int = 2) -> np.ndarray:
    """Max-normalize each map over its trailing ``spatial_axes`` and keep sites
    strictly above ``threshold``.  An all-zero map gives an empty mask."""
    if not 0.0 < threshold < 1.0:
        raise ControlError(f"threshold must lie in (0, 1), got {threshold}")
    return max_normalize(np.asarray(avg, dtype=np.float64), spatial_axes) > threshold


def binarize_union(avg_src: np.ndarray, avg_dst: np.ndarray, threshold: float,
                   spatial_axes: int = 2) -> np.ndarray:
    _same_shape(avg_src, avg_dst, "binarize_union")
    return binarize(avg_src, threshold, spatial_axes) | binarize(avg_dst, threshold, spatial_axes)


def blend(z_src: np.ndarray, z_dst: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Per-site selection: ``z_dst`` where ``alpha`` is set, ``z_src`` elsewhere.

    ``alpha`` is ``(n, H, W)`` or ``(H, W)`` and broadcast over channels.
    """
    _same_shape(z_src, z_dst, "blend")
    alpha = np.asarray(alpha)
    if alpha.dtype != bool:
        if not np.all((alpha == 0) | (alpha == 1)):
            raise ControlError("blend mask must be binary")
        alpha = alpha.astype(bool)
    n, c, h, w = np.shape(z_src)
    if alpha.shape == (h, w):
        alpha = np.broadcast_to(alpha, (n, h, w))
    if alpha.shape != (n, h, w):
        raise ControlError(f"blend mask shape {alpha.shape} incompatible with latents {np.shape(z_src)}")
    return np.where(alpha[:, None, :, :], z_dst, z_src)


@dataclass
class EditSpec:
    kind: str  # "swap" | "refine" | "reweight"
    word_map: Alignment
    src_words: frozenset[int]
    dst_words: frozenset[int]
    tau_ratio: float = 0.4
    refine_ratio: float = 0.4
    reweight_scale: float = 1.0
    reweight_word: int | None = None
    mask_threshold: float = 0.3
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("swap", "refine", "reweight"):
            raise ControlError(f"unknown edit kind {self.kind!r}")
        for name in ("tau_ratio", "refine_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ControlError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ControlError(f"mask_threshold must lie in (0, 1), got {self.mask_threshold}")
        if self.kind == "swap" and self.word_map.src_len != self.word_map.dst_len:
            raise ControlError("word swap needs source and target prompts of equal length")
        if self.kind == "reweight" and self.reweight_word is None:
            raise ControlError("re-weighting needs reweight_word")

    def injection_steps(self, T: int) -> int:
        """Number of leading denoising steps that receive source maps."""
        ratio = self.refine_ratio if self.kind == "refine" else self.tau_ratio
        return int(round(ratio * T))

    def edit(self, src_maps: np.ndarray, dst_maps: np.ndarray, step: int, T: int) -> np.ndarray:
        """Maps the target branch should use at denoising ``step``."""
        tau = self.injection_steps(T)
        if self.kind == "swap":
            return edit_swap(dst_maps, src_maps, step, tau)
        if self.kind == "refine" or self.word_map.src_len != self.word_map.dst_len:
            out = edit_refine(src_maps, dst_maps, self.word_map, step, tau)
        else:
            out = edit_swap(dst_maps, src_maps, step, tau)
        if self.kind == "reweight":
            out = reweight(out, self.reweight_word, self.reweight_scale)
        return out
