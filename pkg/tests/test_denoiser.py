from dataclasses import replace

import numpy as np
import pytest

from vp2p import layers as L
from vp2p.denoiser import (AnalyticDenoiser, ModelDims, ModelError, ToyT2SDenoiser, analytic_eps,
                           backward, guided_predict, init_toy_t2s, load_model, predict_noise_set,
                           save_model)
from vp2p.schedule import NoiseSchedule, ScheduleError, add_noise
from vp2p.text import embed_prompt, null_prompt, tokenize


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


@pytest.fixture(scope="module")
def texts():
    return embed_prompt(tokenize("a red square on grass"), 3), embed_prompt(null_prompt(7), 3)


def test_seeded_construction(small_sched):
    a, b = init_toy_t2s(5, sched=small_sched), init_toy_t2s(5, sched=small_sched)
    assert a.params.tobytes() == b.params.tobytes()
    assert not np.array_equal(a.params, init_toy_t2s(6, sched=small_sched).params)
    assert not a.params.flags.writeable


def test_parameter_count_audit():
    c, f, d, dt, td = 4, 16, 16, 16, 16
    conv_in = c * 9 * f + f
    time = td * f + f
    frame = 2 * f + f * d + f * d + f * f
    cross = 2 * f + f * d + dt * d + dt * f
    temporal = 2 * f + f * d + f * d + f * f
    conv_out = f * 9 * c + c
    expect = conv_in + time + frame + cross + temporal + conv_out
    assert init_toy_t2s(0).num_params == expect < 50_000
    assert init_toy_t2s(0, ModelDims(temporal=False)).num_params == expect - temporal


def test_tunable_mask_names(small_model):
    tunable = {name for name, (s, shape) in small_model.offsets.items()
               if small_model.tunable_mask[s:s + int(np.prod(shape))].all()}
    assert tunable == {"frame.wq", "cross.wq", "temporal.norm.gain", "temporal.norm.shift",
                       "temporal.wq", "temporal.wk", "temporal.wv"}


def test_bad_dims_and_inputs(small_model, texts):
    with pytest.raises(ModelError):
        ModelDims(attention="sparse")
    with pytest.raises(ModelError):
        small_model.forward(np.zeros((2, 3, 4, 4)), 1, texts[0])
    with pytest.raises(ModelError):
        small_model.forward(np.zeros((2, 4, 4, 4)), 1, np.zeros((5, 15)))
    with pytest.raises(ModelError):
        small_model.forward(np.full((1, 4, 4, 4), np.nan), 1, texts[0])
    with pytest.raises(ModelError):
        ToyT2SDenoiser(ModelDims(), 0, np.zeros(3))


def test_cross_maps_row_stochastic(small_model, small_video, texts):
    pred = predict_noise_set(small_model, small_video, 5, texts[0], record=True)
    n, _, h, w = small_video.shape
    assert pred.cross_maps.shape == (n, h * w, 5)
    np.testing.assert_allclose(pred.cross_maps.sum(axis=-1), 1.0, atol=1e-6)
    assert predict_noise_set(small_model, small_video, 5, texts[0]).cross_maps is None
    assert np.all(np.isfinite(pred.eps))


def test_single_frame_equals_self_attention(small_model, rng, texts):
    z = rng.standard_normal((1, 4, 6, 6))
    self_model = ToyT2SDenoiser(replace(small_model.dims, attention="self"), small_model.seed,
                                small_model.params, small_model.sched)
    a = small_model.forward(z, 4, texts[0])[0]
    b = self_model.forward(z, 4, texts[0])[0]
    assert a.tobytes() == b.tobytes()


def test_single_frame_matches_straight_line_reference(small_model, rng, texts):
    """Independent per-site loops for the whole network at n=1."""
    m, cond = small_model, texts[0]
    z = rng.standard_normal((1, 4, 5, 5))
    t = 6
    P = m.param
    _, c, h, w = z.shape

    def conv(img, weight, bias):  # img (C, H, W) -> (H, W, out)
        k = weight.reshape(img.shape[0], 3, 3, -1)
        pad = np.pad(img, ((0, 0), (1, 1), (1, 1)))
        return np.array([[np.einsum("cyx,cyxo->o", pad[:, i:i + 3, j:j + 3], k) + bias
                          for j in range(w)] for i in range(h)])

    def ln(x, g, s):
        mu = x.mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(((x - mu) ** 2).mean(-1, keepdims=True) + 1e-5) * g + s

    def attend(q, k, v):
        s = q @ k.T / np.sqrt(q.shape[-1])
        e = np.exp(s - s.max(-1, keepdims=True))
        return (e / e.sum(-1, keepdims=True)) @ v

    pre = conv(z[0], P("conv_in.weight"), P("conv_in.bias")).reshape(h * w, -1)
    pre = pre + L.timestep_embedding(t, 16) @ P("time.weight") + P("time.bias")
    h0 = pre / (1 + np.exp(-pre))
    x = ln(h0, P("frame.norm.gain"), P("frame.norm.shift"))
    h1 = h0 + attend(x @ P("frame.wq"), x @ P("frame.wk"), x @ P("frame.wv"))
    x = ln(h1, P("cross.norm.gain"), P("cross.norm.shift"))
    h2 = h1 + attend(x @ P("cross.wq"), cond @ P("cross.wk"), cond @ P("cross.wv"))
    # a one-frame temporal axis attends only to itself
    x = ln(h2, P("temporal.norm.gain"), P("temporal.norm.shift"))
    h3 = h2 + x @ P("temporal.wv")
    out = conv(h3.reshape(h, w, -1).transpose(2, 0, 1), P("conv_out.weight"), P("conv_out.bias"))
    ab = m.sched.alpha_bar[t]
    prior = np.sqrt(1 - ab) * z[0] / (ab * 0.25 + 1 - ab)
    expect = prior + out.transpose(2, 0, 1)
    np.testing.assert_allclose(m.forward(z, t, cond)[0][0], expect, rtol=1e-11, atol=1e-12)


def test_identical_frames_identical_outputs(small_model, rng, texts):
    frame = rng.standard_normal((4, 6, 6))
    eps = small_model.forward(np.stack([frame] * 4), 7, texts[0])[0]
    for i in range(1, 4):
        np.testing.assert_array_equal(eps[i], eps[0])


def test_frame_attention_anchors_on_first_frame(small_model, rng, texts):
    z = rng.standard_normal((3, 4, 6, 6))
    nt = init_toy_t2s(3, ModelDims(temporal=False), small_model.sched)
    base = nt.forward(z, 5, texts[0])[0]
    z2 = z.copy()
    z2[2] += 1.0
    moved = nt.forward(z2, 5, texts[0])[0]
    # without temporal mixing, changing frame 2 leaves frame 1 untouched
    np.testing.assert_array_equal(moved[1], base[1])
    z3 = z.copy()
    z3[0] += 1.0
    assert not np.allclose(nt.forward(z3, 5, texts[0])[0][1], base[1])


def test_guidance_combination(small_model, small_video, texts):
    cond, unc = texts
    ec = predict_noise_set(small_model, small_video, 3, cond).eps
    eu = predict_noise_set(small_model, small_video, 3, unc).eps
    np.testing.assert_array_equal(guided_predict(small_model, small_video, 3, cond, unc, 1.0).eps, ec)
    np.testing.assert_array_equal(guided_predict(small_model, small_video, 3, cond, unc, 0.0).eps, eu)
    np.testing.assert_allclose(guided_predict(small_model, small_video, 3, cond, unc, 7.5).eps,
                               7.5 * ec - 6.5 * eu, rtol=1e-13, atol=1e-14)
    with pytest.raises(ModelError):
        guided_predict(small_model, small_video, 3, cond, unc, np.inf)


def test_uncond_gradient_zero_at_unit_guidance(small_model, small_video, texts, rng):
    g = rng.standard_normal(small_video.shape)
    gu, gp = backward(small_model, small_video, 4, texts[0], texts[1], 1.0, g)
    assert gu.shape == texts[1].shape and not gu.any()
    assert not gp[~small_model.tunable_mask].any()


def test_uncond_gradient_finite_differences(small_model, small_video, texts, rng):
    cond, unc = texts
    w, t = 7.5, 6
    g = rng.standard_normal(small_video.shape)
    gu, _ = backward(small_model, small_video, t, cond, unc, w, g)

    def f(u):
        return np.sum(g * guided_predict(small_model, small_video, t, cond, u, w).eps)

    h = 1e-4
    fd = np.zeros_like(unc)
    for idx in np.ndindex(unc.shape):  # 7 x 16 = 112 coordinates
        up, dn = unc.copy(), unc.copy()
        up[idx] += h
        dn[idx] -= h
        fd[idx] = (f(up) - f(dn)) / (2 * h)
    assert fd.size >= 100
    assert rel_err(gu, fd).max() <= 1e-4


@pytest.mark.parametrize("attention,temporal", [("frame", True), ("frame", False), ("self", False)])
def test_parameter_gradient_finite_differences(attention, temporal, small_sched, texts, rng):
    model = init_toy_t2s(11, ModelDims(attention=attention, temporal=temporal), small_sched)
    z = rng.standard_normal((3, 4, 5, 5))
    g = rng.standard_normal(z.shape)
    cond, unc = texts
    w, t = 3.0, 5
    _, masked = backward(model, z, t, cond, unc, w, g)
    assert not masked[~model.tunable_mask].any()

    def f(params):
        return np.sum(g * guided_predict(model.with_params(params), z, t, cond, unc, w).eps)

    def fd_at(k, h=1e-4):
        up, dn = model.params.copy(), model.params.copy()
        up[k] += h
        dn[k] -= h
        return (f(up) - f(dn)) / (2 * h)

    tunable = np.flatnonzero(model.tunable_mask)
    probes = rng.choice(tunable, size=min(100, tunable.size), replace=False)
    assert max(rel_err(masked[k], fd_at(k)) for k in probes) <= 1e-4

    # every parameter, through the full reverse pass
    _, _, cache = model.forward(z, t, cond, keep=True)
    _, full = model.backward(cache, g, want_cond=False, want_params="all")
    fc = lambda params: np.sum(g * model.with_params(params).forward(z, t, cond)[0])
    probes = rng.choice(model.num_params, size=100, replace=False)
    errs = []
    for k in probes:
        up, dn = model.params.copy(), model.params.copy()
        up[k] += 1e-4
        dn[k] -= 1e-4
        errs.append(rel_err(full[k], (fc(up) - fc(dn)) / 2e-4))
    assert max(errs) <= 1e-4


def test_backward_requires_cache(small_model, small_video, texts):
    with pytest.raises(ModelError):
        small_model.backward(None, small_video)
    _, _, cache = small_model.forward(small_video, 2, texts[0], keep=True)
    with pytest.raises(ModelError):
        small_model.backward(cache, np.zeros((1, 4, 6, 6)))


def test_analytic_eps_examples():
    s = NoiseSchedule(2, np.array([1.0, 0.8, 0.5]))
    mu = np.array([0.3, -0.2])
    z = np.array([0.9, 0.1])
    np.testing.assert_allclose(analytic_eps(z, 2, mu, 0.0, s), (z - np.sqrt(0.5) * mu) / np.sqrt(0.5),
                               rtol=1e-14)
    assert np.all(np.abs(analytic_eps(z, 2, mu, 1e12, s)) < 1e-10)
    np.testing.assert_array_equal(analytic_eps(z, 2, mu, np.inf, s), 0.0)
    # E[z0|z_t] = 0.707107, eps = (1 - 0.5) / 0.707107
    np.testing.assert_allclose(analytic_eps(1.0, 2, 0.0, 1.0, s), 0.707107, atol=1e-6)
    with pytest.raises(ScheduleError):
        analytic_eps(z, 0, mu, 1.0, s)
    with pytest.raises(ModelError):
        analytic_eps(z, 1, mu, -1.0, s)


def test_posterior_mean_monte_carlo():
    ab, zt = 0.5, 1.0
    rng = np.random.default_rng(2024)
    z0 = rng.standard_normal(1_000_000)
    # self-normalized importance weights: likelihood of z_t given each prior draw
    logw = -0.5 * (zt - np.sqrt(ab) * z0) ** 2 / (1 - ab)
    wts = np.exp(logw - logw.max())
    post = np.sum(wts * z0) / wts.sum()
    eps_mc = (zt - np.sqrt(ab) * post) / np.sqrt(1 - ab)
    s = NoiseSchedule(2, np.array([1.0, 0.8, 0.5]))
    assert abs(post - 0.707107) <= 0.01
    assert abs(eps_mc - float(analytic_eps(zt, 2, 0.0, 1.0, s))) <= 0.01
    assert abs(eps_mc - 0.707107) <= 0.01


def test_analytic_denoiser_exact_for_point_prior(small_sched, rng):
    mu = rng.standard_normal((2, 4, 3, 3))
    eps = rng.standard_normal(mu.shape)
    model = AnalyticDenoiser(mu, 0.0, small_sched)
    for t in (1, 5, 10):
        got = model.forward(add_noise(mu, t, eps, small_sched), t, None)[0]
        np.testing.assert_allclose(got, eps, rtol=1e-9, atol=1e-9)


def test_checkpoint_round_trip(tmp_path, small_model):
    path = tmp_path / "m.ckpt"
    save_model(path, small_model)
    back = load_model(path)
    assert back.params.tobytes() == small_model.params.tobytes()
    assert back.dims == small_model.dims and back.seed == small_model.seed
    assert back.sched.alpha_bar.tobytes() == small_model.sched.alpha_bar.tobytes()
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short").write_bytes(raw[:-8])
    for name in ("bad", "short"):
        with pytest.raises(ModelError):
            load_model(tmp_path / name)
