import numpy as np
import pytest
from hypothesis import given, strategies as st

from vp2p.metrics import PSNR_CAP, MetricError, masked_psnr, osv_proxy, psnr
from vp2p.scenegen import RegionMask


def test_psnr_examples(rng):
    a = rng.standard_normal((2, 3, 4, 4))
    assert psnr(a, a) == PSNR_CAP
    np.testing.assert_allclose(psnr(a, a + 0.1, peak=1.0), 20.0, rtol=1e-12)
    with pytest.raises(MetricError):
        psnr(a, a, peak=0.0)
    with pytest.raises(MetricError):
        psnr(a, a[:1])


def test_masked_psnr_examples(rng):
    a = rng.standard_normal((2, 3, 4, 4))
    mask = np.zeros((2, 4, 4), dtype=bool)
    mask[:, :, :2] = True
    b = a.copy()
    b[:, :, mask[0]] += rng.standard_normal((2, 3, 8))
    assert masked_psnr(a, b, mask) == PSNR_CAP
    half = a + np.where(mask[:, None], 5.0, 0.1)
    np.testing.assert_allclose(masked_psnr(a, half, RegionMask(mask), peak=1.0), 20.0, rtol=1e-12)
    with pytest.raises(MetricError):
        masked_psnr(a, b, np.ones((2, 4, 4), dtype=bool))
    with pytest.raises(MetricError):
        masked_psnr(a, b, np.zeros((1, 4, 4), dtype=bool))


@given(st.integers(0, 2**32 - 1))
def test_empty_mask_equals_psnr(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((2, 3, 4, 5))
    assert masked_psnr(a, b, np.zeros((2, 4, 5), dtype=bool)) == psnr(a, b)


def test_osv_examples(rng):
    frame = rng.standard_normal((3, 4, 4))
    mask = np.zeros((3, 4, 4), dtype=bool)
    mask[:, 1:3, 1:3] = True
    assert osv_proxy(np.stack([frame] * 3), mask) == 0.0
    d = np.array([1.0, -2.0, 0.5])
    pair = np.stack([np.broadcast_to(d[:, None, None], (3, 4, 4)),
                     np.broadcast_to(-d[:, None, None], (3, 4, 4))])
    np.testing.assert_allclose(osv_proxy(pair, mask[:2]), d @ d, rtol=1e-15)
    empty = mask.copy()
    empty[1] = False
    with pytest.raises(MetricError):
        osv_proxy(np.stack([frame] * 3), empty)


def test_osv_brute_force(rng):
    video = rng.standard_normal((3, 4, 5, 5))
    mask = rng.random((3, 5, 5)) < 0.4
    mask[:, 0, 0] = True
    desc = []
    for i in range(3):
        acc, count = np.zeros(4), 0
        for y in range(5):
            for x in range(5):
                if mask[i, y, x]:
                    acc += video[i, :, y, x]
                    count += 1
        desc.append(acc / count)
    mean = sum(desc) / 3
    brute = sum(float(np.sum((d - mean) ** 2)) for d in desc) / 3
    assert abs(osv_proxy(video, mask) - brute) <= 1e-12


@given(st.integers(0, 2**32 - 1))
def test_osv_invariances(seed):
    rng = np.random.default_rng(seed)
    video = rng.standard_normal((4, 3, 4, 4))
    mask = np.zeros((4, 4, 4), dtype=bool)
    mask[:, 1:, :2] = True
    base = osv_proxy(video, mask)
    perm = rng.permutation(4)
    np.testing.assert_allclose(osv_proxy(video[perm], mask[perm]), base, rtol=1e-12, atol=1e-15)
    shift = rng.standard_normal(3)[None, :, None, None]
    np.testing.assert_allclose(osv_proxy(video + shift, mask), base, rtol=1e-9, atol=1e-12)


def test_osv_pooling(rng):
    video = rng.standard_normal((2, 3, 6, 6))
    mask = np.zeros((2, 6, 6), dtype=bool)
    mask[:, 2:4, 2:4] = True
    assert osv_proxy(video, mask, pool=3) != osv_proxy(video, mask)
    with pytest.raises(MetricError):
        osv_proxy(video, mask, pool=0)
