"""Evaluation quantities for rib suppression and paired significance tests.

All similarity metrics take images in [-1, 1] (data range 2) and a binary
evaluation mask; pixels outside the mask never influence the value.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage, special

PSNR_CAP = 99.0
DATA_RANGE = 2.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
METRICS = ("C_w", "LPIPS", "PSNR", "SSIM", "MAE_rec", "MAE_cyc")


class MetricError(ValueError):
    pass


def _mask(mask, shape) -> np.ndarray:
    m = np.asarray(mask) > 0
    if m.shape != tuple(shape):
        raise MetricError(f"mask shape {m.shape} does not match image shape {tuple(shape)}")
    if not m.any():
        raise MetricError("evaluation mask is empty")
    return m


def _pair(x, ref) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise MetricError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


# --- Weber contrast ---------------------------------------------------------

@dataclass
class WeberRegions:
    rib_mask: np.ndarray
    background_ring: np.ndarray

    def __post_init__(self):
        self.rib_mask = np.asarray(self.rib_mask) > 0
        self.background_ring = np.asarray(self.background_ring) > 0
        if self.rib_mask.shape != self.background_ring.shape:
            raise MetricError("rib mask and background ring differ in shape")
        if (self.rib_mask & self.background_ring).any():
            raise MetricError("rib mask and background ring overlap")


def to_unit(image) -> np.ndarray:
    """Map [-1, 1] intensities to [0, 1]."""
    return (np.asarray(image, dtype=np.float64) + 1.0) / 2.0


def weber_contrast(image, regions: WeberRegions, eps: float = 1e-6) -> float:
    """``mean(rib) / mean(ring) - 1`` for an image already in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape != regions.rib_mask.shape:
        raise MetricError(f"image shape {img.shape} does not match regions {regions.rib_mask.shape}")
    if not regions.rib_mask.any() or not regions.background_ring.any():
        raise MetricError("Weber contrast needs nonempty rib and background regions")
    i_b = img[regions.background_ring].mean()
    if i_b <= eps:
        raise MetricError(f"background intensity {i_b:.3g} is not above {eps}")
    return float(img[regions.rib_mask].mean() / i_b - 1.0)


# --- LPIPS ------------------------------------------------------------------

@dataclass(frozen=True)
class LPIPSConfig:
    n_layers: int = 3
    channels: tuple = (16, 32, 64)
    extractor_seed: int = 0
    layer_weights: tuple | None = None

    def __post_init__(self):
        if self.n_layers < 1 or len(self.channels) != self.n_layers:
            raise MetricError("channels must list one width per layer")
        if self.layer_weights is not None:
            if len(self.layer_weights) != self.n_layers:
                raise MetricError("layer_weights must list one weight per layer")
            if any(w < 0 for w in self.layer_weights):
                raise MetricError("layer weights must be non-negative")

    def weights(self) -> tuple:
        return tuple(self.layer_weights) if self.layer_weights is not None else (1.0,) * self.n_layers


class RandomConvExtractor(torch.nn.Module):
    """Fixed-seed convolutional stack; layer ``l > 0`` halves the resolution."""

    def __init__(self, cfg: LPIPSConfig):
        super().__init__()
        g = torch.Generator().manual_seed(cfg.extractor_seed)
        layers = []
        cin = 1
        for i, cout in enumerate(cfg.channels):
            conv = torch.nn.Conv2d(cin, cout, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * np.sqrt(2.0 / (9 * cin)))
                conv.bias.zero_()
            layers.append(conv)
            cin = cout
        self.layers = torch.nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.layers:
            x = torch.relu(conv(x))
            feats.append(x)
        return feats


_EXTRACTORS: dict = {}


def _extractor(cfg: LPIPSConfig) -> RandomConvExtractor:
    if cfg not in _EXTRACTORS:
        _EXTRACTORS[cfg] = RandomConvExtractor(cfg).double().eval()
    return _EXTRACTORS[cfg]


def unit_normalize(feat: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    """Scale each spatial feature vector (channel axis 1) to unit length."""
    return feat / (feat.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)


def lpips_from_features(feats, feats0, weights) -> float:
    """Sum over layers of the spatially averaged squared distance of unit-normalized features."""
    total = 0.0
    for f, f0, w in zip(feats, feats0, weights):
        diff = w * (unit_normalize(f) - unit_normalize(f0))
        total += float(diff.pow(2).sum(dim=1).mean())
    return total


def lpips(x, x0, cfg: LPIPSConfig | None = None, mask=None, extractor=None) -> float:
    """Perceptual distance between two [-1, 1] images.

    ``extractor`` maps an ``N x 1 x H x W`` float64 tensor to a list of
    feature maps; by default a fixed-seed random convolutional stack. With a
    mask, pixels of ``x`` outside it are replaced by ``x0`` first.
    """
    cfg = cfg or LPIPSConfig()
    x, x0 = _pair(x, x0)
    if mask is not None:
        m = _mask(mask, x.shape)
        x = np.where(m, x, x0)
    ext = extractor or _extractor(cfg)
    with torch.no_grad():
        batch = torch.from_numpy(np.stack([x, x0])[:, None])
        feats = ext(batch)
    return lpips_from_features([f[:1] for f in feats], [f[1:] for f in feats], cfg.weights())


# --- PSNR / SSIM ------------------------------------------------------------

def psnr(x, ref, mask, data_range: float = DATA_RANGE) -> float:
    """Masked PSNR in dB, reported as 99 when the masked MSE is below 1e-12."""
    x, ref = _pair(x, ref)
    m = _mask(mask, x.shape)
    mse = float(np.mean((x[m] - ref[m]) ** 2))
    if mse < 1e-12:
        return PSNR_CAP
    return float(min(10.0 * np.log10(data_range ** 2 / mse), PSNR_CAP))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(x, ref, mask, data_range: float = DATA_RANGE, window: np.ndarray | None = None):
    """Per-pixel SSIM with mask-restricted Gaussian windows.

    Local statistics at each centre use the Gaussian weights times the mask,
    renormalized, so only in-mask pixels contribute. Returns the map and the
    boolean set of valid centres (the mask itself).
    """
    x, ref = _pair(x, ref)
    m = _mask(mask, x.shape).astype(np.float64)
    w = gaussian_window() if window is None else window

    def filt(a):
        return ndimage.correlate(a, w, mode="constant", cval=0.0)

    norm = filt(m)
    valid = (m > 0) & (norm > 0)
    norm = np.where(norm > 0, norm, 1.0)
    mu_x = filt(m * x) / norm
    mu_y = filt(m * ref) / norm
    var_x = filt(m * x * x) / norm - mu_x ** 2
    var_y = filt(m * ref * ref) / norm - mu_y ** 2
    cov = filt(m * x * ref) / norm - mu_x * mu_y
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return s, valid


def ssim(x, ref, mask, data_range: float = DATA_RANGE) -> float:
    """Mean SSIM over windows centred inside the mask."""
    s, valid = ssim_map(x, ref, mask, data_range)
    return float(s[valid].mean())


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def mae_rec(I_rec, I_x) -> float:
    return mae(I_rec, I_x)


def mae_cyc(I_cyc, I_x) -> float:
    return mae(I_cyc, I_x)


# --- paired t-test ----------------------------------------------------------

def paired_ttest(a, b) -> float:
    """Two-sided paired t-test p-value.

    Raises ``MetricError`` when the differences have zero variance, where the
    statistic is undefined.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise MetricError(f"paired samples differ in length: {a.size} vs {b.size}")
    n = a.size
    if n < 2:
        raise MetricError("paired t-test needs at least 2 pairs")
    d = a - b
    sd = d.std(ddof=1)
    if not np.isfinite(sd) or sd <= 1e-12 * max(1.0, np.abs(d).max()):
        raise MetricError("paired differences have zero variance")
    t = d.mean() / (sd / np.sqrt(n))
    df = n - 1
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


# --- reports ----------------------------------------------------------------

@dataclass
class MetricReport:
    per_image: dict = field(default_factory=dict)     # method -> metric -> list
    names: list = field(default_factory=list)         # sample names, aligned across methods
    pvalues: dict = field(default_factory=dict)       # "a|b|metric" -> p or None
    settings: dict = field(default_factory=dict)

    @property
    def methods(self) -> list[str]:
        return list(self.per_image)

    def values(self, method: str, metric: str) -> np.ndarray:
        return np.asarray(self.per_image[method].get(metric, []), dtype=np.float64)

    def aggregate(self) -> dict:
        out = {}
        for method in self.per_image:
            row = {}
            for metric in METRICS:
                v = self.values(method, metric)
                if v.size and np.isfinite(v).all():
                    row[metric] = {"mean": float(v.mean()), "std": float(v.std())}
            out[method] = row
        return out

    def compute_pvalues(self) -> dict:
        self.pvalues = {}
        for a, b in itertools.combinations(self.per_image, 2):
            for metric in METRICS:
                va, vb = self.values(a, metric), self.values(b, metric)
                if va.size == 0 or va.size != vb.size or not (np.isfinite(va).all() and np.isfinite(vb).all()):
                    continue
                try:
                    self.pvalues[f"{a}|{b}|{metric}"] = paired_ttest(va, vb)
                except MetricError:
                    self.pvalues[f"{a}|{b}|{metric}"] = None
        return self.pvalues

    def pvalue(self, a: str, b: str, metric: str):
        key = f"{a}|{b}|{metric}"
        return self.pvalues[key] if key in self.pvalues else self.pvalues.get(f"{b}|{a}|{metric}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in sorted(self.settings.items()):
            buf.write(f"# {k}={v}\n")
        w = csv.writer(buf, lineterminator="\n")
        agg = self.aggregate()
        w.writerow(["method", "n"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")])
        for method, row in agg.items():
            cells = [method, len(self.names)]
            for m in METRICS:
                cells += [f"{row[m]['mean']:.6f}", f"{row[m]['std']:.6f}"] if m in row else ["", ""]
            w.writerow(cells)
        return buf.getvalue()

    def pvalues_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method_a", "method_b", "metric", "p_value"])
        for key, p in self.pvalues.items():
            w.writerow(key.split("|") + ["" if p is None else f"{p:.6g}"])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"settings": self.settings, "summary": self.aggregate(),
                           "pvalues": self.pvalues, "samples": self.names,
                           "per_image": self.per_image}, indent=1, sort_keys=True)


def similarity_mask(sample, region: str = "lung_minus_bone") -> np.ndarray:
    lung = np.asarray(sample.eval_lung_mask) > 0
    if region == "lung":
        return lung
    if region == "lung_minus_bone":
        return lung & ~(np.asarray(sample.eval_rib_mask) > 0)
    raise MetricError(f"unknown similarity region {region!r}")


def image_metrics(Q, sample, lpips_cfg: LPIPSConfig | None = None, region: str = "lung_minus_bone",
                  I_rec=None, I_cyc=None, I_net=None) -> dict:
    """All six quantities for one prediction against a pseudo-CXR sample.

    ``I_rec``/``I_cyc`` are compared with ``I_net`` (the input at network
    resolution), defaulting to the sample image.
    """
    regions = WeberRegions(sample.eval_rib_mask, sample.eval_background_ring)
    mask = similarity_mask(sample, region)
    truth = sample.truth_suppressed
    ref = sample.image if I_net is None else I_net
    nan = float("nan")
    return {
        "C_w": weber_contrast(to_unit(Q), regions),
        "LPIPS": lpips(Q, truth, lpips_cfg, mask=mask),
        "PSNR": psnr(Q, truth, mask),
        "SSIM": ssim(Q, truth, mask),
        "MAE_rec": mae_rec(I_rec, ref) if I_rec is not None else nan,
        "MAE_cyc": mae_cyc(I_cyc, ref) if I_cyc is not None else nan,
    }


def evaluate(outputs: dict, samples: list, names: list | None = None,
             lpips_cfg: LPIPSConfig | None = None, region: str = "lung_minus_bone") -> MetricReport:
    """Score several methods on the same pseudo-CXR samples.

    ``outputs`` maps a method name to a list (aligned with ``samples``) of
    dicts holding ``Q`` and optionally ``I_rec``, ``I_cyc`` and ``I_net``.
    """
    lpips_cfg = lpips_cfg or LPIPSConfig()
    for method, outs in outputs.items():
        if len(outs) != len(samples):
            raise MetricError(f"method {method!r} has {len(outs)} outputs for {len(samples)} samples")
    report = MetricReport(names=list(names) if names is not None else [str(i) for i in range(len(samples))],
                          settings={"data_range": DATA_RANGE, "psnr_cap_db": PSNR_CAP,
                                    "ssim_window": SSIM_WINDOW, "ssim_sigma": SSIM_SIGMA,
                                    "ssim_k1": SSIM_K1, "ssim_k2": SSIM_K2, "region": region,
                                    "lpips_channels": list(lpips_cfg.channels),
                                    "lpips_seed": lpips_cfg.extractor_seed,
                                    "lpips_weights": list(lpips_cfg.weights())})
    for method, outs in outputs.items():
        cols = {m: [] for m in METRICS}
        for out, s in zip(outs, samples):
            vals = image_metrics(out["Q"], s, lpips_cfg, region, out.get("I_rec"), out.get("I_cyc"),
                                 out.get("I_net"))
            for m in METRICS:
                cols[m].append(vals[m])
        report.per_image[method] = cols
    report.compute_pvalues()
    return report
