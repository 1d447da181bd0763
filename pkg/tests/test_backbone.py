import numpy as np
import pytest

from vp2p import backbone
from vp2p.denoiser import ModelDims, ModelError, init_toy_t2s
from vp2p.scenegen import reference_scene
from vp2p.schedule import add_noise, build_schedule
from vp2p.text import embed_prompt, tokenize


def test_shipped_checkpoint_matches_manifest():
    model = backbone.pretrained_image_model()
    manifest = backbone.backbone_manifest()
    assert model.dims.attention == "self" and not model.dims.temporal
    assert model.num_params == manifest["num_params"]
    cfg = backbone.PretrainConfig(**manifest["config"])
    assert model.sched.alpha_bar.tobytes() == cfg.schedule().alpha_bar.tobytes()
    assert backbone.text_seed() == cfg.text_seed
    assert np.isfinite(manifest["final_loss_mean_500"])


def test_pretraining_is_deterministic_and_learns():
    cfg = backbone.PretrainConfig(steps=40, batch=4)
    a, la = backbone.pretrain_t2i(cfg)
    b, lb = backbone.pretrain_t2i(cfg)
    assert a.params.tobytes() == b.params.tobytes() and la == lb
    assert np.mean(la[-10:]) < np.mean(la[:10])


def test_corpus_batches(rng):
    x, cond = backbone.sample_corpus(rng, 6, 0, 0.5)
    assert x.shape == (6, 4, 16, 16) and cond.shape == (6, 3, 16)


def test_inflation_preserves_single_frame_prediction(rng):
    image = backbone.pretrained_image_model()
    video_model = backbone.inflate(image, seed=3)
    assert video_model.dims.attention == "frame" and video_model.dims.temporal
    assert not video_model.param("temporal.wv").any()
    for name in image.offsets:
        np.testing.assert_array_equal(video_model.param(name), image.param(name))
    z = rng.standard_normal((1, 4, 16, 16))
    cond = embed_prompt(tokenize("a red square"), backbone.text_seed())
    a = image.forward(z, 20, cond)[0]
    b = video_model.forward(z, 20, cond)[0]
    assert a.tobytes() == b.tobytes()
    flat = backbone.inflate(image, seed=3, temporal=False)
    assert flat.forward(z, 20, cond)[0].tobytes() == a.tobytes()


def test_inflation_guards():
    with pytest.raises(ModelError):
        backbone.inflate(init_toy_t2s(0), 0)
    with pytest.raises(ModelError):
        backbone.pretrained_video_model(0, build_schedule(10))


def test_backbone_grounds_color_word():
    video, mask, prompt = reference_scene()
    model = backbone.pretrained_video_model(0)
    cond = embed_prompt(prompt, backbone.text_seed())
    z = add_noise(video, 5, np.random.default_rng(1).standard_normal(video.shape), model.sched)
    _, maps, _ = model.forward(z, 5, cond)
    red = maps[:, :, prompt.index_of("red")].reshape(mask.masks.shape)
    assert red[mask.masks].mean() > 10 * red[~mask.masks].mean()


def test_write_backbone(tmp_path):
    model, losses = backbone.write_backbone(tmp_path, backbone.PretrainConfig(steps=2, batch=2))
    assert (tmp_path / backbone.CHECKPOINT).exists()
    assert (tmp_path / backbone.MANIFEST).exists()
    assert len(losses) == 2
