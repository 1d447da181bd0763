"""DDIM video inversion and unconditional-embedding optimization.

Trajectories are indexed by diffusion step: ``traj[t]`` is the latent video
at step ``t`` regardless of the direction it was produced in.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import Adam
from .schedule import NoiseSchedule, ddim_coefficients, ddim_inverse_step, ddim_step

EARLY_STOP_LOSS = 1e-5
DIVERGENCE_LOSS = 1e6


class InversionError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass
class Trajectory:
    latents: list[np.ndarray]
    direction: str  # "diffusion" or "denoising"
    residuals: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.direction not in ("diffusion", "denoising"):
            raise ValueError(f"unknown trajectory direction {self.direction!r}")
        shape = self.latents[0].shape
        for t, z in enumerate(self.latents):
            if z.shape != shape:
                raise ValueError(f"state {t} has shape {z.shape}, expected {shape}")

    def __getitem__(self, t: int) -> np.ndarray:
        return self.latents[t]

    def __len__(self) -> int:
        return len(self.latents)

    @property
    def T(self) -> int:
        return len(self.latents) - 1


def _finite_or_raise(z: np.ndarray, t: int) -> None:
    if not np.all(np.isfinite(z)):
        raise InversionError("non-finite latent encountered", step=t)


def ddim_invert_video(model, z0, cond, sched: NoiseSchedule, method: str = "implicit",
                      max_iters: int = 100, tol: float = 1e-13) -> Trajectory:
    """DDIM inversion at guidance 1 (conditional prediction only).

    ``method="explicit"`` evaluates the noise at the current latent and
    step, ``eps(z_t, t)``.  ``method="implicit"`` (default) solves
    ``z_{t+1} = inverse_step(z_t, eps(z_{t+1}, t+1))`` by fixed-point
    iteration, so that a DDIM denoising step from ``z_{t+1}`` lands back on
    ``z_t``; the final relative update size per step is kept in
    ``residuals``.
    """
    if method not in ("implicit", "explicit"):
        raise ValueError(f"unknown inversion method {method!r}")
    z = np.array(z0, dtype=np.float64)
    _finite_or_raise(z, 0)
    latents, residuals = [z], []
    for t in range(sched.T):
        if method == "explicit":
            eps, _, _ = model.forward(z, t, cond)
            nxt = ddim_inverse_step(z, eps, t, sched)
            residuals.append(0.0)
        else:
            eps, _, _ = model.forward(z, t + 1, cond)
            nxt = ddim_inverse_step(z, eps, t, sched)
            scale = max(np.max(np.abs(z)), 1e-300)
            rel = np.inf
            for _ in range(max_iters):
                _finite_or_raise(nxt, t + 1)
                eps, _, _ = model.forward(nxt, t + 1, cond)
                cand = ddim_inverse_step(z, eps, t, sched)
                rel = float(np.max(np.abs(cand - nxt))) / scale
                nxt = cand
                if rel <= tol:
                    break
            residuals.append(rel)
        _finite_or_raise(nxt, t + 1)
        latents.append(nxt)
        z = nxt
    return Trajectory(latents, "diffusion", residuals)


@dataclass
class NullSchedule:
    """Unconditional embeddings per step; ``embeddings[t - 1]`` serves step ``t``.

    Shared mode stores ``(T, L, d)``, per-frame mode ``(T, n, L, d)``.
    """
    mode: str
    embeddings: np.ndarray

    def __post_init__(self):
        if self.mode not in ("shared", "per_frame"):
            raise ValueError(f"unknown null mode {self.mode!r}")
        want = 3 if self.mode == "shared" else 4
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != want:
            raise ValueError(f"{self.mode} embeddings must have rank {want}, got {self.embeddings.shape}")

    @property
    def T(self) -> int:
        return self.embeddings.shape[0]

    def at(self, t: int) -> np.ndarray:
        if not 1 <= t <= self.T:
            raise IndexError(f"no unconditional embedding for step {t}")
        return self.embeddings[t - 1]

    @property
    def num_params(self) -> int:
        return int(self.embeddings.size)

    @classmethod
    def constant(cls, uncond: np.ndarray, T: int, mode: str = "shared", frames: int = 1) -> "NullSchedule":
        uncond = np.asarray(uncond, dtype=np.float64)
        if mode == "per_frame":
            uncond = np.broadcast_to(uncond, (frames,) + uncond.shape)
        return cls(mode, np.broadcast_to(uncond, (T,) + uncond.shape).copy())


@dataclass
class NullReport:
    initial_loss: list[float]
    final_loss: list[float]
    iterations: list[int]


def optimize_null(model, traj: Trajectory, cond, w: float, uncond_init, sched: NoiseSchedule,
                  mode: str = "shared", inner_steps: int = 10, lr: float = 1e-2):
    """Fit one unconditional embedding per step so guided DDIM sampling
    retraces ``traj`` (steps ``T`` down to 1).

    The embedding is shared by all frames (``mode="shared"``) or held per
    frame.  Each step runs Adam from fresh moments, warm-started from the
    previous step's embedding, and keeps the best evaluated iterate.  The
    reconstructed latent at that iterate seeds the next step.
    Returns ``(NullSchedule, reconstruction Trajectory, NullReport)``.
    """
    if traj.direction != "diffusion":
        raise ValueError("optimize_null needs a diffusion-direction trajectory")
    if traj.T != sched.T:
        raise ValueError(f"trajectory has {traj.T} steps, schedule {sched.T}")
    if mode not in ("shared", "per_frame"):
        raise ValueError(f"unknown null mode {mode!r}")
    n = traj[0].shape[0]
    emb = np.array(uncond_init, dtype=np.float64)
    if mode == "per_frame" and emb.ndim == 2:
        emb = np.broadcast_to(emb, (n,) + emb.shape).copy()
    T = sched.T
    out = np.empty((T,) + emb.shape)
    recon: list[np.ndarray | None] = [None] * (T + 1)
    z_bar = traj[T].copy()
    recon[T] = z_bar
    report = NullReport([], [], [])

    for t in range(T, 0, -1):
        eps_c, _, _ = model.forward(z_bar, t, cond)
        target = traj[t - 1]
        _, b = ddim_coefficients(t, sched)
        opt = Adam(emb.shape, lr)
        best_loss, best_emb, best_z = np.inf, emb, None
        first_loss, iters = None, 0
        for k in range(inner_steps + 1):
            if w == 1.0:
                eps, cache = eps_c, None
            else:
                eps_u, _, cache = model.forward(z_bar, t, emb, keep=True)
                eps = w * eps_c + (1.0 - w) * eps_u
            z_prev = ddim_step(z_bar, eps, t, sched)
            resid = target - z_prev
            loss = float(np.sum(resid * resid))
            if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
                raise InversionError(f"null optimization diverged, loss={loss:.3e}", step=t)
            if first_loss is None:
                first_loss = loss
            if loss < best_loss:
                best_loss, best_emb, best_z = loss, emb, z_prev
            if loss < EARLY_STOP_LOSS or k == inner_steps or cache is None:
                break
            g_emb, _ = model.backward(cache, -2.0 * b * resid, want_params=False)
            emb = opt.step(emb, (1.0 - w) * g_emb)
            iters += 1
        emb = best_emb
        out[t - 1] = emb
        z_bar = best_z
        recon[t - 1] = z_bar
        report.initial_loss.append(first_loss)
        report.final_loss.append(best_loss)
        report.iterations.append(iters)
    return NullSchedule(mode, out), Trajectory(recon, "denoising"), report


def reconstruct_with_null(model, zT, cond, nulls: NullSchedule, w: float, sched: NoiseSchedule,
                          return_trajectory: bool = False):
    """Guided DDIM sampling from ``zT`` using ``nulls.at(t)`` at each step."""
    if nulls.T != sched.T:
        raise ValueError(f"null schedule covers {nulls.T} steps, schedule has {sched.T}")
    z = np.array(zT, dtype=np.float64)
    states = [None] * (sched.T + 1)
    states[sched.T] = z
    for t in range(sched.T, 0, -1):
        eps_c, _, _ = model.forward(z, t, cond)
        if w == 1.0:
            eps = eps_c
        else:
            eps_u, _, _ = model.forward(z, t, nulls.at(t))
            eps = w * eps_c + (1.0 - w) * eps_u
        z = ddim_step(z, eps, t, sched)
        _finite_or_raise(z, t - 1)
        states[t - 1] = z
    if return_trajectory:
        return Trajectory(states, "denoising")
    return z


# -- checkpoint ---------------------------------------------------------------
# little-endian: magic "VP2N" | u32 version | u32 mode (0 shared, 1 per-frame)
# | u32 T | u32 frames (1 if shared) | u32 L | u32 d | u64 offsets[T] (element
# offset of each step's block in the payload) | f64 payload

_NULL_MAGIC = b"VP2N"
_NULL_HEADER = struct.Struct("<4sIIIIII")


def save_nulls(path, nulls: NullSchedule) -> None:
    e = nulls.embeddings
    frames = 1 if nulls.mode == "shared" else e.shape[1]
    block = int(np.prod(e.shape[1:]))
    head = _NULL_HEADER.pack(_NULL_MAGIC, 1, int(nulls.mode == "per_frame"), nulls.T, frames,
                             e.shape[-2], e.shape[-1])
    offsets = np.arange(nulls.T, dtype="<u8") * block
    Path(path).write_bytes(head + offsets.tobytes() + e.astype("<f8").tobytes())


def load_nulls(path) -> NullSchedule:
    raw = Path(path).read_bytes()
    if len(raw) < _NULL_HEADER.size:
        raise ValueError(f"{path}: truncated null checkpoint")
    magic, version, mode, T, frames, L, d = _NULL_HEADER.unpack_from(raw)
    if magic != _NULL_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != 1:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = _NULL_HEADER.size + 8 * T
    shape = (T, L, d) if mode == 0 else (T, frames, L, d)
    if len(raw) - pos != 8 * int(np.prod(shape)):
        raise ValueError(f"{path}: truncated null checkpoint")
    data = np.frombuffer(raw[pos:], dtype="<f8").astype(np.float64).reshape(shape)
    return NullSchedule("shared" if mode == 0 else "per_frame", data)
