import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats

from rsgan.metrics import (METRICS, LPIPSConfig, MetricError, MetricReport, RandomConvExtractor,
                           WeberRegions, evaluate, gaussian_window, lpips, lpips_from_features, mae,
                           mae_cyc, mae_rec, paired_ttest, psnr, ssim, to_unit, weber_contrast)
from rsgan.phantom import DomainStyle, phantom_views, render_pseudo_cxr


def _regions(size=8):
    rib = np.zeros((size, size), bool)
    rib[2:4, 2:6] = True
    ring = np.zeros_like(rib)
    ring[5:7, 2:6] = True
    return WeberRegions(rib, ring)


# --- Weber contrast ---------------------------------------------------------

def test_weber_uniform_and_arithmetic():
    reg = _regions()
    assert weber_contrast(np.full((8, 8), 0.4), reg) == 0.0
    img = np.full((8, 8), 0.5)
    img[reg.rib_mask] = 0.6
    assert weber_contrast(img, reg) == pytest.approx(0.2, abs=1e-12)


def test_weber_errors():
    reg = _regions()
    with pytest.raises(MetricError):
        weber_contrast(np.zeros((8, 8)), reg)
    with pytest.raises(MetricError):
        weber_contrast(np.ones((9, 9)), reg)
    with pytest.raises(MetricError):
        WeberRegions(reg.rib_mask, reg.rib_mask)
    with pytest.raises(MetricError):
        weber_contrast(np.ones((8, 8)), WeberRegions(np.zeros((8, 8)), reg.background_ring))


@settings(max_examples=40, deadline=None)
@given(k=st.floats(1e-3, 1e3), seed=st.integers(0, 10_000))
def test_weber_scale_invariant(k, seed):
    img = np.random.default_rng(seed).uniform(0.1, 1.0, (8, 8))
    reg = _regions()
    assert weber_contrast(k * img, reg) == pytest.approx(weber_contrast(img, reg), abs=1e-9)


@pytest.fixture(scope="module")
def desk_views():
    views = phantom_views(0, 42, (64, 64, 64), (64, 64)) + phantom_views(1, 42, (64, 64, 64), (64, 64))
    return [render_pseudo_cxr(v, DomainStyle()) for v in views]


def test_ground_truth_suppression_halves_weber_contrast(desk_views):
    assert len(desk_views) == 84
    for s in desk_views:
        reg = WeberRegions(s.eval_rib_mask, s.eval_background_ring)
        c_in = weber_contrast(to_unit(s.image), reg)
        c_q = weber_contrast(to_unit(s.truth_suppressed), reg)
        assert c_in > 0 and abs(c_q) < c_in / 2


# --- LPIPS ------------------------------------------------------------------

def test_lpips_identity_and_zero_weights(rng):
    x, y = rng.uniform(-1, 1, (2, 16, 16))
    assert lpips(x, x) == 0.0
    assert lpips(x, y) > 0
    assert lpips(x, y, LPIPSConfig(layer_weights=(0.0, 0.0, 0.0))) == 0.0
    with pytest.raises(MetricError):
        lpips(x, np.zeros((8, 8)))
    with pytest.raises(MetricError):
        LPIPSConfig(layer_weights=(1.0, -1.0, 1.0))


def _conv_relu_np(x, w, b, stride):
    """Zero-padded 3x3 correlation followed by ReLU, written out explicitly."""
    cin, h, wd = x.shape
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((w.shape[0], ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = pad[:, i * stride:i * stride + 3, j * stride:j * stride + 3]
            out[:, i, j] = np.tensordot(w, patch, axes=([1, 2, 3], [0, 1, 2])) + b
    return np.maximum(out, 0.0)


def test_lpips_matches_direct_oracle(rng):
    cfg = LPIPSConfig(layer_weights=(1.0, 0.5, 2.0))
    x, x0 = rng.uniform(-1, 1, (2, 16, 16))
    ext = RandomConvExtractor(cfg)
    expected = 0.0
    fa, fb = x[None], x0[None]
    for l, conv in enumerate(ext.layers):
        w = conv.weight.detach().double().numpy()
        b = conv.bias.detach().double().numpy()
        fa = _conv_relu_np(fa, w, b, conv.stride[0])
        fb = _conv_relu_np(fb, w, b, conv.stride[0])
        na = fa / (np.sqrt((fa**2).sum(0, keepdims=True)) + 1e-10)
        nb = fb / (np.sqrt((fb**2).sum(0, keepdims=True)) + 1e-10)
        expected += np.mean(((cfg.layer_weights[l] * (na - nb)) ** 2).sum(0))
    assert lpips(x, x0, cfg) == pytest.approx(expected, abs=1e-6)


def test_lpips_layer_order_invariant(rng):
    feats = [torch.from_numpy(rng.normal(size=(1, c, s, s))) for c, s in ((4, 8), (6, 4), (3, 2))]
    feats0 = [torch.from_numpy(rng.normal(size=f.shape)) for f in feats]
    w = (1.0, 0.3, 2.0)
    base = lpips_from_features(feats, feats0, w)
    for perm in ((2, 0, 1), (1, 2, 0)):
        val = lpips_from_features([feats[i] for i in perm], [feats0[i] for i in perm], [w[i] for i in perm])
        assert val == pytest.approx(base, abs=1e-12)


def test_lpips_mask_ignores_outside_pixels(rng):
    x, x0 = rng.uniform(-1, 1, (2, 16, 16))
    mask = np.zeros((16, 16), bool)
    mask[4:12, 4:12] = True
    y = x.copy()
    y[~mask] = rng.uniform(-1, 1, (~mask).sum())
    assert lpips(x, x0, mask=mask) == lpips(y, x0, mask=mask)


# --- PSNR / SSIM ------------------------------------------------------------

def test_psnr_cap_and_formula(rng):
    x = rng.uniform(-1, 1, (10, 10))
    m = np.ones_like(x, bool)
    assert psnr(x, x, m) == 99.0
    err = np.where(rng.uniform(size=x.shape) > 0.5, 0.02, -0.02)
    assert psnr(x + err, x, m) == pytest.approx(40.0, abs=1e-9)
    with pytest.raises(MetricError):
        psnr(x, x, np.zeros_like(m))


def test_ssim_identical_is_one(rng):
    x = rng.uniform(-1, 1, (20, 20))
    assert ssim(x, x, np.ones_like(x)) == pytest.approx(1.0, abs=1e-12)


def _ssim_oracle(x, y, mask):
    w = gaussian_window()
    r = w.shape[0] // 2
    h, wd = x.shape
    c1, c2 = (0.01 * 2) ** 2, (0.03 * 2) ** 2
    vals = []
    for i in range(h):
        for j in range(wd):
            if not mask[i, j]:
                continue
            sw = sx = sy = sxx = syy = sxy = 0.0
            for a in range(max(0, i - r), min(h, i + r + 1)):
                for b in range(max(0, j - r), min(wd, j + r + 1)):
                    if not mask[a, b]:
                        continue
                    g = w[a - i + r, b - j + r]
                    sw += g
                    sx += g * x[a, b]
                    sy += g * y[a, b]
                    sxx += g * x[a, b] ** 2
                    syy += g * y[a, b] ** 2
                    sxy += g * x[a, b] * y[a, b]
            mx, my = sx / sw, sy / sw
            vx, vy, cov = sxx / sw - mx**2, syy / sw - my**2, sxy / sw - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_windowed_oracle(rng):
    x = rng.uniform(-1, 1, (18, 18))
    y = np.clip(x + rng.normal(0, 0.3, x.shape), -1, 1)
    mask = rng.uniform(size=x.shape) > 0.3
    assert ssim(x, y, mask) == pytest.approx(_ssim_oracle(x, y, mask), abs=1e-5)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_ssim_symmetric(seed):
    r = np.random.default_rng(seed)
    x, y = r.uniform(-1, 1, (2, 14, 14))
    mask = r.uniform(size=x.shape) > 0.2
    mask[7, 7] = True
    assert ssim(x, y, mask) == pytest.approx(ssim(y, x, mask), abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_masked_metrics_ignore_outside_pixels(seed):
    r = np.random.default_rng(seed)
    x, y = r.uniform(-1, 1, (2, 16, 16))
    mask = np.zeros((16, 16), bool)
    mask[3:11, 5:14] = True
    x2, y2 = x.copy(), y.copy()
    x2[~mask] = r.uniform(-1, 1, (~mask).sum())
    y2[~mask] = r.uniform(-1, 1, (~mask).sum())
    assert psnr(x, y, mask) == psnr(x2, y2, mask)
    assert ssim(x, y, mask) == pytest.approx(ssim(x2, y2, mask), abs=1e-12)


# --- MAE --------------------------------------------------------------------

def test_mae_cases(rng):
    x = rng.uniform(-1, 1, (6, 6))
    assert mae_rec(x, x) == 0.0
    assert mae_cyc(x + 0.3, x) == pytest.approx(0.3)
    y = rng.uniform(-1, 1, (6, 6))
    assert mae(x, y) == pytest.approx(sum(abs(a - b) for a, b in zip(x.ravel(), y.ravel())) / 36)
    with pytest.raises(MetricError):
        mae(x, y[:5])


# --- paired t-test ----------------------------------------------------------

def _pairs_with_t(t, n, rng):
    e = rng.normal(size=n)
    e = (e - e.mean()) / e.std(ddof=1)
    d = e + t / np.sqrt(n)
    b = rng.normal(size=n)
    return b + d, b


@pytest.mark.parametrize("t,df,p", [(2.262, 9, 0.05), (3.250, 9, 0.01), (2.045, 29, 0.05),
                                    (2.756, 29, 0.01), (1.729, 19, 0.10)])
def test_ttest_matches_t_table(rng, t, df, p):
    a, b = _pairs_with_t(t, df + 1, rng)
    assert paired_ttest(a, b) == pytest.approx(p, abs=1e-3)
    assert paired_ttest(a, b) == pytest.approx(stats.ttest_rel(a, b).pvalue, abs=1e-12)


def test_ttest_degenerate_inputs(rng):
    b = rng.normal(size=30)
    with pytest.raises(MetricError, match="zero variance"):
        paired_ttest(b + 0.5, b)
    with pytest.raises(MetricError):
        paired_ttest([1.0], [2.0])
    with pytest.raises(MetricError):
        paired_ttest(b, b[:10])


def test_ttest_pvalues_uniform_under_null():
    r = np.random.default_rng(7)
    ps = [paired_ttest(r.normal(size=15), r.normal(size=15)) for _ in range(500)]
    assert stats.kstest(ps, "uniform").pvalue > 0.05


# --- reports and evaluation -------------------------------------------------

def test_report_aggregate_and_serialization(rng):
    rep = MetricReport(names=[f"s{i}" for i in range(5)], settings={"region": "lung"})
    for m in ("a", "b"):
        rep.per_image[m] = {k: list(rng.normal(size=5)) for k in METRICS}
    agg = rep.aggregate()
    for m in ("a", "b"):
        for k in METRICS:
            assert agg[m][k]["mean"] == pytest.approx(np.mean(rep.per_image[m][k]), abs=1e-9)
    rep.compute_pvalues()
    assert rep.pvalue("b", "a", "PSNR") == rep.pvalue("a", "b", "PSNR")
    lines = rep.to_csv().splitlines()
    assert lines[0] == "# region=lung" and lines[1].startswith("method,n,C_w_mean")
    assert len(lines) == 4
    assert len(rep.pvalues_csv().splitlines()) == 1 + len(METRICS)
    assert json.loads(rep.to_json())["samples"] == rep.names


def test_evaluate_ground_truth_against_itself(small_cxr):
    samples = small_cxr[:3]
    truth = [{"Q": s.truth_suppressed} for s in samples]
    inputs = [{"Q": s.image, "I_rec": s.image} for s in samples]
    rep = evaluate({"truth": truth, "input": inputs}, samples, region="lung")
    assert rep.methods == ["truth", "input"]
    agg = rep.aggregate()
    assert agg["truth"]["PSNR"]["mean"] == 99.0
    assert agg["truth"]["SSIM"]["mean"] == pytest.approx(1.0)
    assert agg["truth"]["LPIPS"]["mean"] == 0.0
    assert "MAE_rec" not in agg["truth"] and agg["input"]["MAE_rec"]["mean"] == 0.0
    assert len(rep.to_csv().splitlines()) == 1 + len(rep.settings) + 2
    with pytest.raises(MetricError):
        evaluate({"truth": truth[:2]}, samples)
