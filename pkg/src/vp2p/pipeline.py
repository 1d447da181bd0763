"""End-to-end editing: fine-tune, invert, fit unconditional embeddings, then
run the two-branch attention-controlled denoising loop."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import backbone, control
from .control import AttentionStore, EditSpec
from .denoiser import ModelDims, ToyT2SDenoiser, init_toy_t2s
from .inversion import (DIVERGENCE_LOSS, NullSchedule, Trajectory, ddim_invert_video,
                        optimize_null, reconstruct_with_null)
from .metrics import masked_psnr, osv_proxy, psnr
from .optim import Adam
from .schedule import NoiseSchedule, add_noise, build_schedule, ddim_step
from .text import Prompt, align_prompts, embed_prompt, null_prompt, tokenize

REPORT_SCHEMA_VERSION = 1


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    backbone: str = "pretrained"
    num_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.3
    guidance: float = 7.5
    finetune_steps: int = 500
    finetune_lr: float = 3e-3
    null_inner_steps: int = 10
    null_lr: float = 1e-2
    null_mode: str = "shared"
    optimize_nulls: bool = True
    temporal: bool = True
    decoupled_guidance: bool = True
    inversion: str = "implicit"
    edit_kind: str = "swap"
    tau_ratio: float = 0.4
    refine_ratio: float = 0.4
    mask_threshold: float = 0.3
    reweight_word: str = ""
    reweight_scale: float = 2.0
    blend_words_src: str = ""
    blend_words_dst: str = ""

    def __post_init__(self):
        checks = [
            (self.backbone in ("pretrained", "random"), "backbone must be pretrained or random"),
            (self.num_steps >= 1, "num_steps must be >= 1"),
            (0.0 < self.beta_start <= self.beta_end < 1.0, "need 0 < beta_start <= beta_end < 1"),
            (np.isfinite(self.guidance), "guidance must be finite"),
            (self.finetune_steps >= 0, "finetune_steps must be >= 0"),
            (self.finetune_lr > 0, "finetune_lr must be positive"),
            (self.null_inner_steps >= 0, "null_inner_steps must be >= 0"),
            (self.null_lr > 0, "null_lr must be positive"),
            (self.null_mode in ("shared", "per_frame"), "null_mode must be shared or per_frame"),
            (self.inversion in ("implicit", "explicit"), "inversion must be implicit or explicit"),
            (self.edit_kind in ("swap", "refine", "reweight"), "edit_kind must be swap, refine or reweight"),
            (0.0 <= self.tau_ratio <= 1.0, "tau_ratio must lie in [0, 1]"),
            (0.0 <= self.refine_ratio <= 1.0, "refine_ratio must lie in [0, 1]"),
            (0.0 < self.mask_threshold < 1.0, "mask_threshold must lie in (0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.num_steps, self.beta_start, self.beta_end)

    def text_seed(self) -> int:
        """The pretrained backbone is tied to the embedding table it saw in training."""
        return backbone.text_seed() if self.backbone == "pretrained" else self.seed

    def initial_model(self) -> ToyT2SDenoiser:
        sched = self.schedule()
        if self.backbone == "pretrained":
            return backbone.pretrained_video_model(self.seed, sched, self.temporal)
        return init_toy_t2s(self.seed, ModelDims(temporal=self.temporal), sched)

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(f.default) for f in fields(cls)}


# -- fine-tuning ---------------------------------------------------------------

def finetune_t2s(model: ToyT2SDenoiser, video, cond, steps: int, lr: float,
                 sched: NoiseSchedule, seed: int):
    """Adam on the tunable parameters against the noise-prediction loss.

    Each step draws ``t ~ U{1..T}`` and unit Gaussian noise from a stream
    seeded independently of model initialization.  The recorded loss is the
    per-element mean squared error.  Returns ``(tuned_model, losses)``.
    """
    if sched.T != model.sched.T:
        raise ValueError("fine-tuning schedule does not match the model's schedule")
    video = np.asarray(video, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xF1E7]))
    mask = model.tunable_mask
    params = model.params.copy()
    opt = Adam(int(mask.sum()), lr)
    losses: list[float] = []
    current = model
    for step in range(steps):
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(video.shape)
        z_t = add_noise(video, t, eps, sched)
        pred, _, cache = current.forward(z_t, t, cond, keep=True)
        resid = pred - eps
        loss = float(np.mean(resid * resid))
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise RuntimeError(f"fine-tuning diverged at step {step}, loss={loss:.3e}")
        losses.append(loss)
        _, grad = current.backward(cache, 2.0 * resid / resid.size, want_cond=False)
        params[mask] = opt.step(params[mask], grad[mask])
        current = model.with_params(params)
    return current, losses


# -- shared source-side preparation ----------------------------------------------

@dataclass
class PreparedSource:
    """Everything the source branch needs, reusable across edit arms."""
    config: RunConfig
    video: np.ndarray
    src: Prompt
    sched: NoiseSchedule
    model: ToyT2SDenoiser
    cond: np.ndarray
    null_init: np.ndarray
    trajectory: Trajectory
    nulls: NullSchedule
    reconstruction: np.ndarray
    finetune_losses: list[float]
    null_losses: dict
    timings: dict[str, float]


def _stage(name, timings, fn, *args, **kwargs):
    start = time.perf_counter()
    try:
        out = fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as exc:  # tag and propagate
        raise PipelineError(name, exc) from exc
    timings[name] = time.perf_counter() - start
    return out


def prepare_source(video, src_prompt: str, config: RunConfig, model: ToyT2SDenoiser | None = None) -> PreparedSource:
    timings: dict[str, float] = {}
    video = np.asarray(video, dtype=np.float64)
    sched = config.schedule()
    src = _stage("text", timings, tokenize, src_prompt)
    cond = embed_prompt(src, config.text_seed())
    null_init = embed_prompt(null_prompt(len(src)), config.text_seed())
    if model is None:
        model = config.initial_model()
    losses: list[float] = []
    if config.finetune_steps:
        model, losses = _stage("finetune", timings, finetune_t2s, model, video, cond,
                               config.finetune_steps, config.finetune_lr, sched, config.seed)
    else:
        timings["finetune"] = 0.0
    traj = _stage("invert", timings, ddim_invert_video, model, video, cond, sched,
                  method=config.inversion)
    if config.optimize_nulls:
        nulls, recon_traj, rep = _stage(
            "null_optimization", timings, optimize_null, model, traj, cond, config.guidance,
            null_init, sched, mode=config.null_mode, inner_steps=config.null_inner_steps,
            lr=config.null_lr)
        recon = recon_traj[0]
        null_losses = {"initial": rep.initial_loss, "final": rep.final_loss, "iterations": rep.iterations}
    else:
        nulls = NullSchedule.constant(null_init, sched.T, config.null_mode, video.shape[0])
        recon = _stage("null_optimization", timings, reconstruct_with_null, model, traj[sched.T],
                       cond, nulls, config.guidance, sched)
        null_losses = {"initial": [], "final": [], "iterations": []}
    return PreparedSource(config, video, src, sched, model, cond, null_init, traj, nulls, recon,
                          losses, null_losses, timings)


# -- editing ------------------------------------------------------------------------

def _blend_indices(src: Prompt, dst: Prompt, config: RunConfig):
    """Token positions whose averaged maps define the blend mask."""
    if config.blend_words_src or config.blend_words_dst:
        s = frozenset(src.index_of(w) for w in config.blend_words_src.split())
        d = frozenset(dst.index_of(w) for w in config.blend_words_dst.split())
        return s, d
    if config.edit_kind == "reweight" and config.reweight_word:
        return frozenset({src.index_of(config.reweight_word)}), frozenset({dst.index_of(config.reweight_word)})
    align = align_prompts(src, dst)
    if config.edit_kind == "swap" and len(src) == len(dst):
        diff = [i for i in range(len(src)) if src.tokens[i] != dst.tokens[i]]
        return frozenset(diff), frozenset(diff)
    new = sorted(align.new_tokens)
    dst_set, src_set = set(new), set()
    # the word a refinement modifies is the next aligned token after it
    for j in new:
        nxt = [(jj, ii) for jj, ii in align.pairs if jj > j]
        if nxt:
            dst_set.add(nxt[0][0])
            src_set.add(nxt[0][1])
    unmatched_src = set(range(len(src))) - set(align.map.values())
    src_set |= unmatched_src
    return frozenset(src_set), frozenset(dst_set)


def make_edit_spec(src: Prompt, dst: Prompt, config: RunConfig) -> EditSpec:
    src_words, dst_words = _blend_indices(src, dst, config)
    rw = dst.index_of(config.reweight_word) if config.edit_kind == "reweight" else None
    return EditSpec(config.edit_kind, align_prompts(src, dst), src_words, dst_words,
                    tau_ratio=config.tau_ratio, refine_ratio=config.refine_ratio,
                    reweight_scale=config.reweight_scale, reweight_word=rw,
                    mask_threshold=config.mask_threshold)


@dataclass
class EditResult:
    reconstruction: np.ndarray
    edited: np.ndarray
    masks: list[np.ndarray]  # union mask per denoising step (t = T..1)
    injected: list[bool]  # whether source maps were injected, per step
    src_store: AttentionStore
    dst_store: AttentionStore
    timings: dict[str, float] = field(default_factory=dict)


def _union_mask(store_src, store_dst, spec: EditSpec, t: int, grid) -> np.ndarray:
    n = len(store_src.frames())
    mask = np.zeros((n,) + grid, dtype=bool)
    for w in spec.src_words:
        mask |= control.binarize(control.averaged_maps(store_src, w, t), spec.mask_threshold)
    for w in spec.dst_words:
        mask |= control.binarize(control.averaged_maps(store_dst, w, t), spec.mask_threshold)
    return mask


def edit_loop(prep: PreparedSource, dst_prompt: str, config: RunConfig | None = None) -> EditResult:
    """Two-branch denoising with cross-attention injection and latent blending."""
    config = config or prep.config
    model, sched, w = prep.model, prep.sched, config.guidance
    T = sched.T
    dst = tokenize(dst_prompt)
    spec = make_edit_spec(prep.src, dst, config)
    cond_dst = embed_prompt(dst, config.text_seed())
    null_dst_init = embed_prompt(null_prompt(len(dst)), config.text_seed())
    n, _, h, wd = prep.video.shape
    grid = (h, wd)
    store_src, store_dst = AttentionStore(T, grid), AttentionStore(T, grid)
    z_src = prep.trajectory[T].copy()
    z_dst = z_src.copy()
    masks, injected = [], []
    for t in range(T, 0, -1):
        step = T - t
        null_src = prep.nulls.at(t)
        eps_c, maps_src, _ = model.forward(z_src, t, prep.cond)
        if w == 1.0:
            eps = eps_c
        else:
            eps_u, _, _ = model.forward(z_src, t, null_src)
            eps = w * eps_c + (1.0 - w) * eps_u
        z_src_prev = ddim_step(z_src, eps, t, sched)

        eps_own, maps_dst, _ = model.forward(z_dst, t, cond_dst)
        store_src.record_all(t, maps_src)
        store_dst.record_all(t, maps_dst)
        edited = spec.edit(maps_src, maps_dst, step, T)
        injected.append(edited is not maps_dst)
        if edited is maps_dst:
            eps_c_dst = eps_own
        else:
            eps_c_dst, _, _ = model.forward(z_dst, t, cond_dst, cross_override=edited)
        if w == 1.0:
            eps_dst = eps_c_dst
        else:
            null_dst = null_dst_init if config.decoupled_guidance else null_src
            eps_u_dst, _, _ = model.forward(z_dst, t, null_dst)
            eps_dst = w * eps_c_dst + (1.0 - w) * eps_u_dst
        z_dst_prev = ddim_step(z_dst, eps_dst, t, sched)

        alpha = _union_mask(store_src, store_dst, spec, t, grid)
        masks.append(alpha)
        z_dst = control.blend(z_src_prev, z_dst_prev, alpha)
        z_src = z_src_prev
        if not (np.all(np.isfinite(z_src)) and np.all(np.isfinite(z_dst))):
            raise RuntimeError(f"non-finite latent in editing loop at step {t}")
    return EditResult(z_src, z_dst, masks, injected, store_src, store_dst)


def run_video_p2p(video, src_prompt: str, dst_prompt: str, config: RunConfig,
                  prepared: PreparedSource | None = None, object_mask=None):
    """Full method.  Returns ``(reconstruction, edited, report)``."""
    prep = prepared or prepare_source(video, src_prompt, config)
    timings = dict(prep.timings)
    result = _stage("edit", timings, edit_loop, prep, dst_prompt, config)
    report = build_report(prep, config, dst_prompt, timings, result, object_mask)
    return result.reconstruction, result.edited, report


def baseline_edit(video, src_prompt: str, dst_prompt: str, config: RunConfig,
                  prepared: PreparedSource | None = None) -> np.ndarray:
    """Guided denoising of the inverted latent under the target prompt with
    the initial unconditional embedding; no attention control or blending."""
    prep = prepared or prepare_source(video, src_prompt, replace(config, optimize_nulls=False))
    dst = tokenize(dst_prompt)
    cond_dst = embed_prompt(dst, config.text_seed())
    null_dst = NullSchedule.constant(embed_prompt(null_prompt(len(dst)), config.text_seed()), prep.sched.T)
    try:
        return reconstruct_with_null(prep.model, prep.trajectory[prep.sched.T], cond_dst, null_dst,
                                     config.guidance, prep.sched)
    except Exception as exc:
        raise PipelineError("baseline", exc) from exc


def build_report(prep: PreparedSource, config: RunConfig, dst_prompt: str, timings: dict,
                 result: EditResult | None = None, object_mask=None) -> dict:
    model = prep.model
    tunable = int(model.tunable_mask.sum())
    stages = {k: float(v) for k, v in timings.items()}
    metrics = {"reconstruction_psnr": psnr(prep.reconstruction, prep.video)}
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": {f.name: getattr(config, f.name) for f in fields(config)},
        "prompts": {"source": prep.src.raw, "target": dst_prompt},
        "losses": {
            "finetune": prep.finetune_losses,
            "null_initial": prep.null_losses["initial"],
            "null_final": prep.null_losses["final"],
            "null_iterations": prep.null_losses["iterations"],
        },
        "parameters": {
            "model_total": model.num_params,
            "model_tunable": tunable,
            "model_frozen": model.num_params - tunable,
            "null_embeddings": prep.nulls.num_params,
        },
        "timings": {"stages": stages, "total": float(sum(stages.values()))},
        "metrics": metrics,
    }
    if result is not None:
        total_sites = int(np.prod(result.masks[0].shape))
        report["masks"] = {
            "area_per_step": [int(m.sum()) for m in result.masks],
            "final_area": int(result.masks[-1].sum()),
            "sites": total_sites,
        }
        report["injected_steps"] = int(sum(result.injected))
        metrics["edited_vs_reconstruction_psnr"] = psnr(result.edited, result.reconstruction)
        if object_mask is not None:
            metrics["masked_psnr_edit"] = masked_psnr(result.edited, prep.video, object_mask)
            metrics["masked_psnr_reconstruction"] = masked_psnr(prep.reconstruction, prep.video, object_mask)
            metrics["osv_proxy_edit"] = osv_proxy(result.edited, object_mask)
            metrics["osv_proxy_source"] = osv_proxy(prep.video, object_mask)
    return report


# -- ablations --------------------------------------------------------------------

ABLATION_ARMS = ("no_finetune", "initialized_null", "shared_null", "per_frame_null",
                 "dg_on", "dg_off")


def _arm_config(arm: str, config: RunConfig) -> RunConfig:
    """Config of the source preparation an arm needs."""
    if arm == "no_finetune":
        return replace(config, finetune_steps=0)
    if arm == "initialized_null":
        return replace(config, optimize_nulls=False)
    if arm == "per_frame_null":
        return replace(config, null_mode="per_frame")
    return replace(config, null_mode="shared", optimize_nulls=True)


def _run_arm_group(video, src_prompt, dst_prompt, config, arms, object_mask):
    prep = prepare_source(video, src_prompt, _arm_config(arms[0], config))
    rows = []
    for arm in arms:
        row = {"arm": arm, "reconstruction_psnr": psnr(prep.reconstruction, prep.video),
               "null_embeddings": prep.nulls.num_params}
        if arm in ("dg_on", "dg_off"):
            cfg = replace(prep.config, decoupled_guidance=arm == "dg_on")
            result = edit_loop(prep, dst_prompt, cfg)
            if object_mask is not None:
                row["masked_psnr_edit"] = masked_psnr(result.edited, prep.video, object_mask)
            row["final_mask_area"] = int(result.masks[-1].sum())
        rows.append(row)
    return rows


def run_ablation(video, src_prompt: str, dst_prompt: str, config: RunConfig, object_mask=None,
                 arms=ABLATION_ARMS, jobs: int = 1) -> list[dict]:
    """Independent runs over the ablation arms; arms with identical source
    preparation share one run.  ``jobs > 1`` spreads the runs over processes."""
    unknown = set(arms) - set(ABLATION_ARMS)
    if unknown:
        raise ValueError(f"unknown ablation arms {sorted(unknown)}")
    groups: dict[RunConfig, list[str]] = {}
    for arm in arms:
        groups.setdefault(_arm_config(arm, config), []).append(arm)
    tasks = [(video, src_prompt, dst_prompt, config, group, object_mask) for group in groups.values()]
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_arm_group, *zip(*tasks)))
    else:
        results = [_run_arm_group(*task) for task in tasks]
    by_arm = {row["arm"]: row for rows in results for row in rows}
    return [by_arm[arm] for arm in arms]
