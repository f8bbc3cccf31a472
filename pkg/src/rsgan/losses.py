"""Loss terms, finite-difference operators and bone-mask extraction.

Every ``L1`` here is a mean absolute error so that the loss weights do not
depend on image resolution.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 1.0
    lambda_f: float = 1.0
    lambda_i: float = 10.0
    lambda_grad: float = 10.0
    lambda_inter: float = 500.0
    lambda_lap: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative, got {v}")


@dataclass(frozen=True)
class BoneMaskConfig:
    sigma_spatial: float = 3.0
    sigma_range: float = 0.1
    theta_thresh: float = 0.0
    kernel_radius: int = 6

    def __post_init__(self):
        if self.sigma_spatial <= 0 or self.sigma_range <= 0:
            raise ValueError("bilateral sigmas must be positive")
        if not -1.0 < self.theta_thresh < 1.0:
            raise ValueError("theta_thresh must lie in (-1, 1)")
        if self.kernel_radius < math.ceil(2 * self.sigma_spatial):
            raise ValueError("kernel_radius must be >= ceil(2 * sigma_spatial)")


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b)
    return (a - b).abs().mean()


def loss_supervised(pred: dict, truth: dict) -> torch.Tensor:
    """L1 on the suppressed image, the residual and the bone projection of a DRR."""
    for k in ("Q", "R", "B"):
        if k not in pred or k not in truth:
            raise KeyError(f"supervised loss needs component {k!r}")
    return l1(pred["Q"], truth["Q"]) + l1(pred["R"], truth["R"]) + l1(pred["B"], truth["B"])


def lsgan_d(real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    if real.numel() == 0 or fake.numel() == 0:
        raise ValueError("empty patch map")
    return ((real - 1) ** 2).mean() + (fake ** 2).mean()


def lsgan_g(fake: torch.Tensor) -> torch.Tensor:
    if fake.numel() == 0:
        raise ValueError("empty patch map")
    return ((fake - 1) ** 2).mean()


def loss_adversarial(pairs, role: str) -> torch.Tensor:
    """Least-squares adversarial loss summed over ``(real_map, fake_map)`` pairs.

    For ``role='D'`` both maps are scored; for ``role='G'`` only the fakes
    (the real map of each pair may be ``None``).
    """
    if not pairs:
        raise ValueError("no patch maps given")
    if role == "D":
        return sum(lsgan_d(r, f) for r, f in pairs)
    if role == "G":
        return sum(lsgan_g(f) for _, f in pairs)
    raise ValueError(f"unknown role {role!r}")


def loss_feature_consistency(enc_c, enc_s, enc_b, images: dict, feats: dict | None = None):
    """Contrast (2 terms) and structure (4 terms) feature consistency.

    ``images`` holds ``x``, ``d``, ``x2d`` and ``d2x``. Already-computed
    encodings may be passed through ``feats`` keyed like ``('C', 'x')``.
    """
    feats = dict(feats or {})
    encs = {"C": enc_c, "S": enc_s, "B": enc_b}

    def f(kind, key):
        if (kind, key) not in feats:
            feats[(kind, key)] = encs[kind](images[key])
        return feats[(kind, key)]

    l_c = l1(f("C", "x"), f("C", "d2x")) + l1(f("C", "d"), f("C", "x2d"))
    l_s = (l1(f("S", "x"), f("S", "x2d")) + l1(f("S", "d"), f("S", "d2x"))
           + l1(f("B", "x"), f("B", "x2d")) + l1(f("B", "d"), f("B", "d2x")))
    return l_c, l_s


def loss_rec_cyc(I: dict, I_rec: dict, I_cyc: dict):
    """Reconstruction and cycle L1 over both domains (keys ``x`` and ``d``)."""
    l_rec = l1(I_rec["x"], I["x"]) + l1(I_rec["d"], I["d"])
    l_cyc = l1(I_cyc["x"], I["x"]) + l1(I_cyc["d"], I["d"])
    return l_rec, l_cyc


def _as4d(img: torch.Tensor):
    if img.dim() == 2:
        return img[None, None], 2
    if img.dim() == 3:
        return img[:, None], 3
    return img, 4


def grad_map(img: torch.Tensor) -> torch.Tensor:
    """Central differences along rows and columns with replicated borders.

    Returns N x 2 x H x W (row derivative first) for batched input, or
    2 x H x W for a single 2D image.
    """
    x, nd = _as4d(img)
    if x.shape[-1] < 3 or x.shape[-2] < 3:
        raise ValueError("image must be at least 3 x 3")
    p = F.pad(x, (1, 1, 1, 1), mode="replicate")
    gi = (p[..., 2:, 1:-1] - p[..., :-2, 1:-1]) / 2.0
    gj = (p[..., 1:-1, 2:] - p[..., 1:-1, :-2]) / 2.0
    out = torch.cat([gi, gj], dim=1)
    return out[0] if nd == 2 else out


def laplacian_map(img: torch.Tensor) -> torch.Tensor:
    """5-point Laplacian with replicated borders, same shape as the input."""
    x, nd = _as4d(img)
    if x.shape[-1] < 3 or x.shape[-2] < 3:
        raise ValueError("image must be at least 3 x 3")
    p = F.pad(x, (1, 1, 1, 1), mode="replicate")
    lap = (p[..., 2:, 1:-1] + p[..., :-2, 1:-1] + p[..., 1:-1, 2:] + p[..., 1:-1, :-2]
           - 4.0 * p[..., 1:-1, 1:-1])
    if nd == 2:
        return lap[0, 0]
    if nd == 3:
        return lap[:, 0]
    return lap


def binarize(mask: torch.Tensor, level: float = 0.5) -> torch.Tensor:
    return (mask.detach() > level).to(mask.dtype)


def loss_grad_adv(d_grad, role: str, I_x, R_x, L_x, Q_d2x=None, L_d=None) -> torch.Tensor:
    """Adversarial loss on lung-masked gradient maps of suppressed images.

    The "real" branch is the DRR-to-CXR suppressed transfer, the "fake" one
    is ``I_x - R_x``. Masks are binarised at 0.5 and multiply both channels.
    """
    _same_shape(I_x, R_x)
    fake = d_grad(grad_map(I_x - R_x) * binarize(L_x))
    if role == "G":
        return lsgan_g(fake)
    if role == "D":
        if Q_d2x is None or L_d is None:
            raise ValueError("discriminator role needs Q_d2x and L_d")
        _same_shape(Q_d2x, L_d)
        real = d_grad(grad_map(Q_d2x) * binarize(L_d))
        return lsgan_d(real, fake)
    raise ValueError(f"unknown role {role!r}")


def bilateral_filter(image: np.ndarray, cfg: BoneMaskConfig) -> np.ndarray:
    """Gaussian-spatial x Gaussian-range filter over a square window.

    Only in-bounds neighbours contribute; weights are renormalised per pixel.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("bilateral_filter expects a 2D image")
    r = int(cfg.kernel_radius)
    h, w = img.shape
    pad = np.pad(img, r, mode="constant")
    valid = np.pad(np.ones_like(img), r, mode="constant")
    num = np.zeros_like(img)
    den = np.zeros_like(img)
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            ws = math.exp(-(di * di + dj * dj) / (2.0 * cfg.sigma_spatial ** 2))
            nb = pad[r + di:r + di + h, r + dj:r + dj + w]
            ok = valid[r + di:r + di + h, r + dj:r + dj + w]
            wr = np.exp(-((nb - img) ** 2) / (2.0 * cfg.sigma_range ** 2))
            wt = ws * wr * ok
            num += wt * nb
            den += wt
    return num / den


def bone_mask(B_x, cfg: BoneMaskConfig | None = None):
    """Binary rib mask from a predicted bone projection: bilateral filter, then threshold.

    Accepts numpy arrays or tensors (any leading batch dims); the result
    never carries gradient.
    """
    cfg = cfg or BoneMaskConfig()
    if isinstance(B_x, torch.Tensor):
        arr = B_x.detach().cpu().double().numpy()
        out = _bone_mask_np(arr, cfg)
        return torch.from_numpy(out).to(dtype=B_x.dtype, device=B_x.device)
    return _bone_mask_np(np.asarray(B_x, dtype=np.float64), cfg)


def _bone_mask_np(arr, cfg):
    flat = arr.reshape(-1, *arr.shape[-2:])
    out = np.stack([bilateral_filter(a, cfg) > cfg.theta_thresh for a in flat])
    return out.reshape(arr.shape).astype(np.float64)


INTER_REGIONS = ("union", "lung")


def loss_inter(R_x, M_x, L_x, region: str = "union") -> torch.Tensor:
    """Mean |R_x| over the inter-rib region.

    ``"union"`` penalises (1 - M_x) union (1 - L_x), everything outside
    ribs-within-lung; ``"lung"`` penalises (1 - M_x) * L_x, only the
    inter-rib pixels inside the lung.
    """
    _same_shape(R_x, M_x)
    _same_shape(R_x, L_x)
    if region == "union":
        mask = torch.maximum(1.0 - M_x, 1.0 - L_x)
    elif region == "lung":
        mask = (1.0 - M_x) * L_x
    else:
        raise ValueError(f"region must be one of {INTER_REGIONS}, got {region!r}")
    return (R_x * mask.detach()).abs().mean()


def loss_laplace(R_x, M_x, L_x) -> torch.Tensor:
    """Mean |Laplacian(R_x)| over M_x union L_x."""
    _same_shape(R_x, M_x)
    _same_shape(R_x, L_x)
    region = torch.maximum(M_x, L_x).detach()
    return (laplacian_map(R_x) * region).abs().mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Soft Dice loss ``1 - 2|P.T| / (|P| + |T|)`` with ``eps`` smoothing."""
    _same_shape(pred, target)
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + eps) / (pred.sum() + target.sum() + eps)


# ---------------------------------------------------------------------------
# totals
# ---------------------------------------------------------------------------

INIT_G_TERMS = ("L_su", "L_G_adv", "L_c", "L_s", "L_rec", "L_cyc")
FINE_G_TERMS = ("L_G_grad", "L_inter", "L_lap")


@dataclass
class LossReport:
    stage: str
    terms: dict = field(default_factory=dict)
    total: float = 0.0
    d_terms: dict = field(default_factory=dict)
    d_total: float = 0.0

    def as_record(self, iteration: int) -> dict:
        rec = {"iter": int(iteration), "stage": self.stage}
        rec.update({k: float(v) for k, v in self.terms.items()})
        rec["total"] = float(self.total)
        rec.update({k: float(v) for k, v in self.d_terms.items()})
        if self.d_terms:
            rec["D_total"] = float(self.d_total)
        return rec


def _coeffs(weights: LossWeights) -> dict:
    w = weights
    return {"L_su": 1.0, "L_G_adv": w.lambda_adv, "L_c": w.lambda_f, "L_s": w.lambda_f,
            "L_rec": w.lambda_i, "L_cyc": w.lambda_i, "L_G_grad": w.lambda_grad,
            "L_inter": w.lambda_inter, "L_lap": w.lambda_lap,
            "L_D_adv": w.lambda_adv, "L_D_grad": w.lambda_grad, "L_nRM": 1.0}


def stage_terms(stage: str) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Generator and discriminator term names for a stage or ablation mode."""
    if stage == "init":
        return INIT_G_TERMS, ("L_D_adv",)
    if stage == "fine":
        return INIT_G_TERMS + FINE_G_TERMS, ("L_D_adv", "L_D_grad")
    if stage == "RM":
        return ("L_su", "L_rec"), ()
    if stage == "nRM":
        return ("L_nRM",), ()
    raise ValueError(f"unknown stage {stage!r}")


def total_loss(stage: str, parts: dict, weights: LossWeights = LossWeights(),
               d_parts: dict | None = None):
    """Weighted generator (and discriminator) totals for one stage.

    Returns ``(LossReport, g_total, d_total)``; the totals keep their autograd
    graph when the parts are tensors. Parts outside the stage are ignored.
    """
    g_names, d_names = stage_terms(stage)
    c = _coeffs(weights)
    missing = [n for n in g_names if n not in parts]
    if missing:
        raise KeyError(f"stage {stage!r} is missing loss parts {missing}")
    g_total = sum(c[n] * parts[n] for n in g_names)
    d_total = None
    d_terms = {}
    if d_parts is not None and d_names:
        missing = [n for n in d_names if n not in d_parts]
        if missing:
            raise KeyError(f"stage {stage!r} is missing discriminator parts {missing}")
        d_total = sum(c[n] * d_parts[n] for n in d_names)
        d_terms = {n: _scalar(d_parts[n]) for n in d_names}
    report = LossReport(stage, {n: _scalar(parts[n]) for n in g_names}, _scalar(g_total),
                        d_terms, _scalar(d_total) if d_total is not None else 0.0)
    return report, g_total, d_total


def _scalar(v) -> float:
    if isinstance(v, torch.Tensor):
        return float(v.detach())
    return float(v)
