"""Toy Text-to-Set noise predictor with frame-, cross- and temporal attention.

One block of each layer type, single-head attention, float64 throughout::

    h0 = silu(conv_in(z) + time_proj(sinusoid(t)))
    h1 = h0 + frame_attn(LN(h0))       # Q from frame i, K/V from frame 0
    h2 = h1 + cross_attn(LN(h1), text) # recorded / injectable maps
    h3 = h2 + temporal_attn(LN(h2))    # over the frame axis, per site (optional)
    eps = prior_eps(z, t) + conv_out(h3)

``prior_eps`` is the fixed posterior-mean noise estimate for a zero-mean
Gaussian latent prior with variance ``dims.prior_var``.  It makes the
untrained network a generic denoiser and the learned path a residual on top.

Only the query projections of the frame and cross attention and all temporal
attention parameters are tunable; :func:`backward` returns gradients for that
subset and for the text embedding fed to the cross attention.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import layers as L
from .schedule import NoiseSchedule, ScheduleError, build_schedule

TUNABLE_PREFIXES = ("frame.wq", "cross.wq", "temporal.")
_CKPT_MAGIC = b"VP2M"
_CKPT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    channels: int = 4
    hidden: int = 16
    inner: int = 16
    d_txt: int = 16
    time_dim: int = 16
    temporal: bool = True
    prior_var: float = 0.25
    attention: str = "frame"  # "frame" (K/V from frame 0) or "self" (image model)

    def __post_init__(self):
        if self.attention not in ("frame", "self"):
            raise ModelError(f"attention must be 'frame' or 'self', got {self.attention!r}")

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in declaration (serialization) order."""
        c, f, d, dt = self.channels, self.hidden, self.inner, self.d_txt
        spec = [
            ("conv_in.weight", (c * 9, f)), ("conv_in.bias", (f,)),
            ("time.weight", (self.time_dim, f)), ("time.bias", (f,)),
            ("frame.norm.gain", (f,)), ("frame.norm.shift", (f,)),
            ("frame.wq", (f, d)), ("frame.wk", (f, d)), ("frame.wv", (f, f)),
            ("cross.norm.gain", (f,)), ("cross.norm.shift", (f,)),
            ("cross.wq", (f, d)), ("cross.wk", (dt, d)), ("cross.wv", (dt, f)),
        ]
        if self.temporal:
            spec += [
                ("temporal.norm.gain", (f,)), ("temporal.norm.shift", (f,)),
                ("temporal.wq", (f, d)), ("temporal.wk", (f, d)), ("temporal.wv", (f, f)),
            ]
        spec += [("conv_out.weight", (f * 9, c)), ("conv_out.bias", (c,))]
        return spec


@dataclass(frozen=True)
class EpsPrediction:
    eps: np.ndarray
    cross_maps: np.ndarray | None = None  # (n, H*W, L), conditional pass


@dataclass(frozen=True, eq=False)
class ToyT2SDenoiser:
    dims: ModelDims
    seed: int
    params: np.ndarray = field(repr=False)
    sched: NoiseSchedule = field(default_factory=build_schedule, repr=False)

    def __post_init__(self):
        p = np.array(self.params, dtype=np.float64)
        if p.shape != (self.num_params,):
            raise ModelError(f"expected {self.num_params} parameters, got {p.shape}")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    @cached_property
    def offsets(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        out, pos = {}, 0
        for name, shape in self.dims.layout():
            out[name] = (pos, shape)
            pos += int(np.prod(shape))
        return out

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.dims.layout())

    def param(self, name: str) -> np.ndarray:
        start, shape = self.offsets[name]
        return self.params[start:start + int(np.prod(shape))].reshape(shape)

    @cached_property
    def tunable_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_params, dtype=bool)
        for name, (start, shape) in self.offsets.items():
            if name.startswith(TUNABLE_PREFIXES):
                mask[start:start + int(np.prod(shape))] = True
        mask.setflags(write=False)
        return mask

    def with_params(self, params: np.ndarray) -> "ToyT2SDenoiser":
        return ToyT2SDenoiser(self.dims, self.seed, params, self.sched)

    def prior_eps(self, z: np.ndarray, t: int) -> np.ndarray:
        ab = self.sched.alpha_bar[t]
        return np.sqrt(1.0 - ab) * z / (ab * self.dims.prior_var + 1.0 - ab)

    # -- forward ------------------------------------------------------------

    def forward(self, z, t: int, cond, cross_override=None, keep: bool = False):
        """Predict noise for every frame of ``z`` (``n, C, H, W``).

        ``cond`` is ``(L, d_txt)`` shared by all frames or ``(n, L, d_txt)``.
        Returns ``(eps, cross_probs, cache)``; ``cache`` is None unless ``keep``.
        """
        z = np.asarray(z, dtype=np.float64)
        cond = np.asarray(cond, dtype=np.float64)
        self._check_inputs(z, cond)
        n, c, h, w = z.shape
        t = self.sched.check_step(t, 0, self.sched.T, "forward")
        P = self.param

        pre, cols_in = L.conv3x3(z, P("conv_in.weight"), P("conv_in.bias"))
        sinus = L.timestep_embedding(t, self.dims.time_dim)
        pre = pre + (sinus @ P("time.weight") + P("time.bias"))
        h0, sig0 = L.silu(pre)

        # frame attention: every frame attends to frame 0 (or to itself)
        x0, ln_f = L.layer_norm(h0, P("frame.norm.gain"), P("frame.norm.shift"))
        qf = x0 @ P("frame.wq")
        kv_src = x0[0] if self.dims.attention == "frame" else x0
        kf = kv_src @ P("frame.wk")
        vf = kv_src @ P("frame.wv")
        out_f, pf, _ = L.attention(qf, kf, vf)
        h1 = h0 + out_f

        x1, ln_c = L.layer_norm(h1, P("cross.norm.gain"), P("cross.norm.shift"))
        qc = x1 @ P("cross.wq")
        kc = cond @ P("cross.wk")
        vc = cond @ P("cross.wv")
        if cross_override is not None:
            cross_override = np.asarray(cross_override, dtype=np.float64)
            expect = (n, h * w, cond.shape[-2])
            if cross_override.shape != expect:
                raise ModelError(f"cross-attention override must be {expect}, got {cross_override.shape}")
        out_c, pc, _ = L.attention(qc, kc, vc, probs=cross_override)
        h2 = h1 + out_c

        tcache = None
        if self.dims.temporal:
            x2, ln_t = L.layer_norm(h2, P("temporal.norm.gain"), P("temporal.norm.shift"))
            xt = x2.transpose(1, 0, 2)  # sites, frames, channels
            qt, kt, vt = xt @ P("temporal.wq"), xt @ P("temporal.wk"), xt @ P("temporal.wv")
            out_t, pt, _ = L.attention(qt, kt, vt)
            h3 = h2 + out_t.transpose(1, 0, 2)
            tcache = (ln_t, xt, qt, kt, vt, pt)
        else:
            h3 = h2

        y, cols_out = L.conv3x3(L.sites_to_image(h3, h, w), P("conv_out.weight"), P("conv_out.bias"))
        eps = self.prior_eps(z, t) + L.sites_to_image(y, h, w)
        cache = None
        if keep:
            cache = dict(shape=z.shape, cond=cond, override=cross_override is not None,
                         cols_in=cols_in, sinus=sinus, pre=pre, sig0=sig0, cols_out=cols_out,
                         ln_f=ln_f, x0=x0, qf=qf, kf=kf, vf=vf, pf=pf,
                         ln_c=ln_c, x1=x1, qc=qc, kc=kc, vc=vc, pc=pc, tcache=tcache)
        return eps, pc, cache

    def _check_inputs(self, z, cond):
        if z.ndim != 4 or z.shape[1] != self.dims.channels:
            raise ModelError(f"latent video must be (n, {self.dims.channels}, H, W), got {z.shape}")
        if z.shape[0] < 1:
            raise ModelError("latent video needs at least one frame")
        if cond.ndim == 2:
            ok = cond.shape[1] == self.dims.d_txt and cond.shape[0] >= 1
        elif cond.ndim == 3:
            ok = cond.shape[0] == z.shape[0] and cond.shape[2] == self.dims.d_txt and cond.shape[1] >= 1
        else:
            ok = False
        if not ok:
            raise ModelError(f"text embedding shape {cond.shape} incompatible with video {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ModelError("latent video contains non-finite values")

    # -- reverse mode ---------------------------------------------------------

    def backward(self, cache, deps, want_cond: bool = True, want_params: bool | str = True):
        """Reverse pass of ``<deps, eps>``.

        Returns ``(d_cond, d_params)``.  With ``want_params=True`` the
        parameter gradient is a full-length vector that is zero outside
        :attr:`tunable_mask`; ``want_params="all"`` fills every entry.
        Either part is None when not requested.
        """
        if cache is None:
            raise ModelError("backward needs a cache from forward(..., keep=True)")
        if cache["override"]:
            raise ModelError("backward through injected cross-attention maps is not supported")
        full = want_params == "all"
        n, c, h, w = cache["shape"]
        deps = np.asarray(deps, dtype=np.float64)
        if deps.shape != cache["shape"]:
            raise ModelError(f"upstream gradient shape {deps.shape} != output shape {cache['shape']}")
        P = self.param
        grads: dict[str, np.ndarray] = {}

        dy = L.image_to_sites(deps)
        if full:
            grads["conv_out.weight"] = np.einsum("nsk,nsc->kc", cache["cols_out"], dy)
            grads["conv_out.bias"] = dy.sum(axis=(0, 1))
        dh3 = L.image_to_sites(
            L.conv3x3_backward_input(dy, P("conv_out.weight"), self.dims.hidden, h, w))

        if self.dims.temporal:
            ln_t, xt, qt, kt, vt, pt = cache["tcache"]
            dout = dh3.transpose(1, 0, 2)
            dq, dk, dv = L.attention_backward(dout, qt, kt, vt, pt)
            grads["temporal.wq"] = np.einsum("snf,snd->fd", xt, dq)
            grads["temporal.wk"] = np.einsum("snf,snd->fd", xt, dk)
            grads["temporal.wv"] = np.einsum("snf,sng->fg", xt, dv)
            dxt = dq @ P("temporal.wq").T + dk @ P("temporal.wk").T + dv @ P("temporal.wv").T
            dx2, grads["temporal.norm.gain"], grads["temporal.norm.shift"] = L.layer_norm_backward(
                dxt.transpose(1, 0, 2), P("temporal.norm.gain"), ln_t)
            dh2 = dh3 + dx2
        else:
            dh2 = dh3

        cond = cache["cond"]
        dq, dk, dv = L.attention_backward(dh2, cache["qc"], cache["kc"], cache["vc"], cache["pc"])
        d_cond = None
        if want_cond:
            d_cond = dk @ P("cross.wk").T + dv @ P("cross.wv").T
        if not want_params:
            return d_cond, None
        if full:
            flat = cond.reshape(-1, cond.shape[-1])
            grads["cross.wk"] = flat.T @ dk.reshape(-1, dk.shape[-1])
            grads["cross.wv"] = flat.T @ dv.reshape(-1, dv.shape[-1])
        grads["cross.wq"] = np.einsum("nsf,nsd->fd", cache["x1"], dq)
        dx1 = dq @ P("cross.wq").T
        dln, dg, ds = L.layer_norm_backward(dx1, P("cross.norm.gain"), cache["ln_c"])
        if full:
            grads["cross.norm.gain"], grads["cross.norm.shift"] = dg, ds
        dh1 = dh2 + dln

        x0 = cache["x0"]
        dq, dk, dv = L.attention_backward(dh1, cache["qf"], cache["kf"], cache["vf"], cache["pf"])
        grads["frame.wq"] = np.einsum("nsf,nsd->fd", x0, dq)
        if full:
            kv_src = x0[0] if self.dims.attention == "frame" else x0
            flat = kv_src.reshape(-1, kv_src.shape[-1])
            grads["frame.wk"] = flat.T @ dk.reshape(-1, dk.shape[-1])
            grads["frame.wv"] = flat.T @ dv.reshape(-1, dv.shape[-1])
            dx0 = dq @ P("frame.wq").T
            dkv = dk @ P("frame.wk").T + dv @ P("frame.wv").T
            if self.dims.attention == "frame":
                dx0[0] += dkv
            else:
                dx0 += dkv
            dln, grads["frame.norm.gain"], grads["frame.norm.shift"] = L.layer_norm_backward(
                dx0, P("frame.norm.gain"), cache["ln_f"])
            dh0 = dh1 + dln
            dpre = L.silu_backward(dh0, cache["pre"], cache["sig0"])
            grads["conv_in.weight"] = np.einsum("nsk,nsf->kf", cache["cols_in"], dpre)
            grads["conv_in.bias"] = dpre.sum(axis=(0, 1))
            dtemb = dpre.sum(axis=(0, 1))
            grads["time.weight"] = np.outer(cache["sinus"], dtemb)
            grads["time.bias"] = dtemb

        d_params = np.zeros(self.num_params)
        for name, g in grads.items():
            start, shape = self.offsets[name]
            d_params[start:start + g.size] = g.reshape(-1)
        return d_cond, d_params


def init_toy_t2s(seed: int, dims: ModelDims | None = None,
                 sched: NoiseSchedule | None = None) -> ToyT2SDenoiser:
    """Seeded scaled-Gaussian initialization (std = 1/sqrt(fan_in)).

    The output convolution and the cross-attention value projection start
    at a tenth of that scale, so the initial prediction stays close to the
    prior term and text conditioning starts as a small nudge.
    """
    dims = dims or ModelDims()
    sched = sched or build_schedule()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1417]))
    chunks = []
    for name, shape in dims.layout():
        if name.endswith(".gain"):
            chunks.append(np.ones(shape))
        elif name.endswith((".bias", ".shift")):
            chunks.append(np.zeros(shape))
        else:
            std = 1.0 / np.sqrt(shape[0])
            if name in ("conv_out.weight", "cross.wv"):
                std *= 0.1
            chunks.append(rng.standard_normal(shape) * std)
    return ToyT2SDenoiser(dims, int(seed), np.concatenate([ch.reshape(-1) for ch in chunks]), sched)


def predict_noise_set(model: ToyT2SDenoiser, z, t: int, cond, record: bool = False,
                      cross_override=None) -> EpsPrediction:
    eps, probs, _ = model.forward(z, t, cond, cross_override=cross_override)
    return EpsPrediction(eps, probs if record else None)


def guided_predict(model: ToyT2SDenoiser, z, t: int, cond, uncond, w: float,
                   record: bool = False, cross_override=None, eps_cond=None) -> EpsPrediction:
    """Classifier-free guidance ``w * eps(cond) + (1 - w) * eps(uncond)``.

    ``cross_override`` applies to the conditional pass only; ``eps_cond``
    may carry a precomputed conditional prediction.
    """
    if not np.isfinite(w):
        raise ModelError(f"guidance weight must be finite, got {w!r}")
    probs = None
    if eps_cond is None:
        eps_cond, probs, _ = model.forward(z, t, cond, cross_override=cross_override)
    if w == 1.0:
        return EpsPrediction(eps_cond, probs if record else None)
    eps_unc, _, _ = model.forward(z, t, uncond)
    return EpsPrediction(w * eps_cond + (1.0 - w) * eps_unc, probs if record else None)


def backward(model: ToyT2SDenoiser, z, t: int, cond, uncond, w: float, upstream_grad):
    """Gradients of ``<upstream_grad, guided eps>`` w.r.t. the unconditional
    embedding and the tunable parameters (full-length vector, zero elsewhere)."""
    uncond = np.asarray(uncond, dtype=np.float64)
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    _, _, cache_c = model.forward(z, t, cond, keep=True)
    _, gp_c = model.backward(cache_c, upstream_grad, want_cond=False)
    grad_params = w * gp_c
    if w == 1.0:
        return np.zeros_like(uncond), grad_params
    _, _, cache_u = model.forward(z, t, uncond, keep=True)
    gu, gp_u = model.backward(cache_u, upstream_grad)
    return (1.0 - w) * gu, grad_params + (1.0 - w) * gp_u


def analytic_eps(z_t, t: int, mu, sigma2: float, sched: NoiseSchedule) -> np.ndarray:
    """Exact posterior-mean noise prediction for data ``z0 ~ N(mu, sigma2 I)``."""
    if sigma2 < 0:
        raise ModelError("sigma2 must be non-negative")
    t = int(t)
    if t == 0:
        raise ScheduleError("analytic_eps is undefined at t=0 (zero noise)")
    t = sched.check_step(t, 1, sched.T, "analytic_eps")
    ab = sched.alpha_bar[t]
    z_t = np.asarray(z_t, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if np.isinf(sigma2):
        return np.zeros(np.broadcast(z_t, mu).shape)
    gain = np.sqrt(ab) * sigma2 / (ab * sigma2 + 1.0 - ab)
    z0_mean = mu + gain * (z_t - np.sqrt(ab) * mu)
    return (z_t - np.sqrt(ab) * z0_mean) / np.sqrt(1.0 - ab)


class AnalyticDenoiser:
    """Closed-form Gaussian-prior denoiser usable wherever a model is expected
    by the inversion routines (text conditioning is ignored)."""

    def __init__(self, mu, sigma2: float, sched: NoiseSchedule):
        self.mu = np.asarray(mu, dtype=np.float64)
        self.sigma2 = float(sigma2)
        self.sched = sched

    def forward(self, z, t, cond, cross_override=None, keep=False):
        return analytic_eps(z, t, self.mu, self.sigma2, self.sched), None, None


# -- checkpoints ------------------------------------------------------------
# layout (little-endian): magic "VP2M" | u32 version | u32 channels, hidden,
# inner, d_txt, time_dim, temporal, attention (0 frame, 1 self) | f64 prior_var | i64 seed | u32 T |
# u64 count | f64 alpha_bar[T + 1] | f64 params[count]

_CKPT_HEADER = struct.Struct("<4sI7IdqIQ")


def save_model(path, model: ToyT2SDenoiser) -> None:
    d = model.dims
    header = _CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_VERSION, d.channels, d.hidden, d.inner,
                               d.d_txt, d.time_dim, int(d.temporal),
                               int(d.attention == "self"), d.prior_var, model.seed,
                               model.sched.T, model.num_params)
    Path(path).write_bytes(header + model.sched.alpha_bar.astype("<f8").tobytes()
                           + model.params.astype("<f8").tobytes())


def load_model(path) -> ToyT2SDenoiser:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise ModelError(f"{path}: truncated model checkpoint")
    (magic, version, c, f, d, dt, td, temporal, attention,
     prior_var, seed, T, count) = _CKPT_HEADER.unpack_from(raw)
    if magic != _CKPT_MAGIC:
        raise ModelError(f"{path}: bad magic {magic!r}")
    if version != _CKPT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    payload = raw[_CKPT_HEADER.size:]
    if len(payload) != 8 * (T + 1 + count):
        raise ModelError(f"{path}: truncated model checkpoint")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if attention > 1:
        raise ModelError(f"{path}: unknown attention mode {attention}")
    dims = ModelDims(c, f, d, dt, td, bool(temporal), prior_var, "self" if attention else "frame")
    sched = NoiseSchedule(T, values[:T + 1])
    return ToyT2SDenoiser(dims, seed, values[T + 1:], sched)
