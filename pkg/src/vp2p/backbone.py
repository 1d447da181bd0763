"""Pretrained image backbone: a toy text-to-image model trained on a synthetic
corpus of single-frame scenes, and its inflation into the frame-attention
video model.

Editing by attention control assumes the backbone already ties words to image
regions.  A freshly initialized network does not, so the pipeline starts from
this pretrained model instead.  The weights ship with the package and can be
regenerated bit-for-bit (same platform) with :func:`pretrain_t2i`.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from importlib import resources

import numpy as np

from .denoiser import ModelDims, ModelError, ToyT2SDenoiser, init_toy_t2s, load_model
from .optim import Adam
from .scenegen import SHAPES, SceneSpec, render_scene
from .schedule import NoiseSchedule, add_noise, build_schedule
from .text import embed_prompt, null_prompt

COLORS = ("red", "green", "blue", "yellow", "orange", "purple",
          "white", "black", "pink", "gray", "brown", "golden")
BACKGROUNDS = ("grass", "sand", "water", "snow", "sky", "road", "field", "wall")

CHECKPOINT = "backbone.ckpt"
MANIFEST = "backbone.json"


@dataclass(frozen=True)
class PretrainConfig:
    seed: int = 0
    text_seed: int = 0
    steps: int = 6000
    batch: int = 8
    lr: float = 3e-3
    uncond_prob: float = 0.1
    num_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.3

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.num_steps, self.beta_start, self.beta_end)


def sample_corpus(rng: np.random.Generator, batch: int, text_seed: int, uncond_prob: float):
    """One batch of single-frame scenes: ``(images (B, C, H, W), cond (B, L, d))``.

    Color, shape, background and placement are uniform; the caption is the
    scene's canonical prompt, replaced by the null prompt with probability
    ``uncond_prob`` so the unconditional branch is trained too.
    """
    images, conds = [], []
    for _ in range(batch):
        spec = SceneSpec(shape=SHAPES[rng.integers(len(SHAPES))],
                         color=COLORS[rng.integers(len(COLORS))],
                         background=BACKGROUNDS[rng.integers(len(BACKGROUNDS))],
                         frames=1, start=(int(rng.integers(0, 12)), int(rng.integers(0, 12))))
        video, _, prompt = render_scene(spec, int(rng.integers(1 << 30)))
        if rng.random() < uncond_prob:
            prompt = null_prompt(len(prompt))
        images.append(video[0])
        conds.append(embed_prompt(prompt, text_seed))
    return np.stack(images), np.stack(conds)


def pretrain_t2i(config: PretrainConfig = PretrainConfig(), log_every: int = 0):
    """Train the image model (self-attention, no temporal layer) on every
    parameter with the noise-prediction loss.  Returns ``(model, losses)``."""
    sched = config.schedule()
    model = init_toy_t2s(config.seed, ModelDims(temporal=False, attention="self"), sched)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xB0B0]))
    params = model.params.copy()
    opt = Adam(model.num_params, config.lr)
    losses = []
    for step in range(config.steps):
        x, cond = sample_corpus(rng, config.batch, config.text_seed, config.uncond_prob)
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(x.shape)
        pred, _, cache = model.forward(add_noise(x, t, eps, sched), t, cond, keep=True)
        resid = pred - eps
        losses.append(float(np.mean(resid * resid)))
        _, grad = model.backward(cache, 2.0 * resid / resid.size, want_cond=False, want_params="all")
        params = opt.step(params, grad)
        model = model.with_params(params)
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1}: loss {np.mean(losses[-log_every:]):.4f}", flush=True)
    return model, losses


def inflate(image_model: ToyT2SDenoiser, seed: int, temporal: bool = True) -> ToyT2SDenoiser:
    """Image model -> video model.

    Self-attention becomes frame-attention with the same weights and a
    temporal-attention layer is appended.  Its value projection starts at
    zero, so the new layer is silent until fine-tuning moves it.
    """
    if image_model.dims.attention != "self" or image_model.dims.temporal:
        raise ModelError("inflate expects an image model (self-attention, no temporal layer)")
    dims = replace(image_model.dims, attention="frame", temporal=temporal)
    fresh = init_toy_t2s(seed, dims, image_model.sched)
    params = fresh.params.copy()
    for name, (start, shape) in image_model.offsets.items():
        dst, _ = fresh.offsets[name]
        size = int(np.prod(shape))
        params[dst:dst + size] = image_model.params[start:start + size]
    if temporal:
        start, shape = fresh.offsets["temporal.wv"]
        params[start:start + int(np.prod(shape))] = 0.0
    return fresh.with_params(params)


def _data_path(name: str):
    return resources.files("vp2p") / "data" / name


@lru_cache(maxsize=1)
def pretrained_image_model() -> ToyT2SDenoiser:
    with resources.as_file(_data_path(CHECKPOINT)) as path:
        return load_model(path)


def backbone_manifest() -> dict:
    return json.loads(_data_path(MANIFEST).read_text())


def pretrained_video_model(seed: int, sched: NoiseSchedule | None = None,
                           temporal: bool = True) -> ToyT2SDenoiser:
    """The shipped image backbone, inflated with temporal weights drawn from ``seed``."""
    base = pretrained_image_model()
    if sched is not None and not np.array_equal(sched.alpha_bar, base.sched.alpha_bar):
        raise ModelError("the pretrained backbone was trained on a different noise schedule")
    return inflate(base, seed, temporal)


def text_seed() -> int:
    """Seed of the embedding table the backbone was trained against."""
    return int(backbone_manifest()["config"]["text_seed"])


def write_backbone(directory, config: PretrainConfig = PretrainConfig(), log_every: int = 0):
    """Regenerate the checkpoint and its manifest into ``directory``."""
    from pathlib import Path
    from .denoiser import save_model

    model, losses = pretrain_t2i(config, log_every)
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / CHECKPOINT, model)
    tail = losses[-500:]
    manifest = {"config": asdict(config), "final_loss_mean_500": float(np.mean(tail)),
                "num_params": model.num_params}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return model, losses
