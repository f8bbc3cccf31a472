"""
Synthetic chest phantoms and the DRR / pseudo-CXR rendering pipeline.

Volumes are indexed ``(depth, rows, cols)``: depth is the antero-posterior
ray axis, rows run superior to inferior and cols run across the chest.
A frontal projection sums along depth and yields a ``rows x cols`` image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .imaging import resize_bilinear

MIN_AXIS = 16
MAX_ANGLE = 10.0

# attenuation values, all within [0, 1]
MU_TISSUE = 0.30
MU_LUNG = 0.06
MU_RIB = 0.90
MU_SPINE = 0.70
MU_HEART = 0.36
MU_NODULE = 0.34
MU_VESSEL = 0.22


class ParameterError(ValueError):
    pass


@dataclass
class PhantomVolume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.voxels.ndim != 3 or min(self.voxels.shape) < MIN_AXIS:
            raise ParameterError(f"volume must be 3D with every axis >= {MIN_AXIS}, "
                                 f"got {self.voxels.shape}")
        v = self.voxels
        if not np.isfinite(v).all() or v.min() < 0.0 or v.max() > 1.0:
            raise ParameterError("voxel values must be finite and within [0, 1]")

    def replace(self, voxels: np.ndarray) -> "PhantomVolume":
        return PhantomVolume(voxels, self.spacing, self.seed)


@dataclass
class ComponentMasks:
    rib: np.ndarray
    lung: np.ndarray
    nodule: np.ndarray | None = None


@dataclass(frozen=True)
class ProjectionGeometry:
    azimuth_deg: float = 0.0
    elevation_deg: float = 0.0
    detector_shape: tuple[int, int] = (64, 64)

    def __post_init__(self):
        for name in ("azimuth_deg", "elevation_deg"):
            v = getattr(self, name)
            if not (-MAX_ANGLE - 1e-9 <= v <= MAX_ANGLE + 1e-9):
                raise ParameterError(f"{name}={v} outside [-{MAX_ANGLE}, {MAX_ANGLE}]")


@dataclass
class DrrSample:
    """Aligned DRR components. ``image == suppressed + residual`` elementwise."""

    image: np.ndarray
    suppressed: np.ndarray
    residual: np.ndarray
    bone: np.ndarray
    lung: np.ndarray
    meta: dict = field(default_factory=dict)

    ARRAYS = ("image", "suppressed", "residual", "bone", "lung")


@dataclass
class PseudoCxrSample:
    """A domain-shifted rendering standing in for a real radiograph.

    The ``eval_*`` masks and ``truth_*`` arrays exist only because the data is
    synthetic; the trainer never reads them.
    """

    image: np.ndarray
    eval_rib_mask: np.ndarray
    eval_lung_mask: np.ndarray
    eval_background_ring: np.ndarray
    truth_suppressed: np.ndarray
    truth_residual: np.ndarray
    meta: dict = field(default_factory=dict)

    ARRAYS = ("image", "eval_rib_mask", "eval_lung_mask", "eval_background_ring",
              "truth_suppressed", "truth_residual")


@dataclass(frozen=True)
class DomainStyle:
    gamma: float = 1.0
    gain: float = 1.0
    bias: float = 0.0
    noise_sigma: float = 0.0
    blur_radius: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.gamma <= 0 or self.gain <= 0:
            raise ParameterError("gamma and gain must be positive")
        if self.noise_sigma < 0 or self.blur_radius < 0:
            raise ParameterError("noise_sigma and blur_radius must be non-negative")

    @property
    def is_identity(self) -> bool:
        return (self.gamma == 1.0 and self.gain == 1.0 and self.bias == 0.0
                and self.noise_sigma == 0.0 and self.blur_radius == 0.0)


# ---------------------------------------------------------------------------
# phantom synthesis
# ---------------------------------------------------------------------------

def _grid(shape):
    d, h, w = shape
    return np.meshgrid(np.arange(d, dtype=np.float64), np.arange(h, dtype=np.float64),
                       np.arange(w, dtype=np.float64), indexing="ij")


def _ellipsoid(z, y, x, center, semi):
    return (((z - center[0]) / semi[0]) ** 2 + ((y - center[1]) / semi[1]) ** 2
            + ((x - center[2]) / semi[2]) ** 2) <= 1.0


def _tube(shape, points, radius):
    """Voxels within ``radius`` of any of the sampled centreline ``points`` (P x 3)."""
    mask = np.zeros(shape, dtype=bool)
    reach = int(math.ceil(radius)) + 1
    offs = np.arange(-reach, reach + 1)
    oz, oy, ox = np.meshgrid(offs, offs, offs, indexing="ij")
    offsets = np.stack([oz.ravel(), oy.ravel(), ox.ravel()], axis=1)
    base = np.floor(points).astype(np.int64)
    cand = base[:, None, :] + offsets[None, :, :]
    dist2 = ((cand - points[:, None, :]) ** 2).sum(-1)
    keep = dist2 <= radius**2
    cand = cand[keep]
    inside = np.all((cand >= 0) & (cand < np.array(shape)), axis=1)
    cand = cand[inside]
    mask[cand[:, 0], cand[:, 1], cand[:, 2]] = True
    return mask


def synth_phantom(seed: int, shape=(64, 64, 64), n_ribs: int = 6,
                  spacing=(1.0, 1.0, 1.0)) -> tuple[PhantomVolume, ComponentMasks]:
    """Generate a chest phantom with exact rib and lung masks.

    The anatomy is a soft-tissue torso ellipsoid holding two low-attenuation
    lungs, a heart, a spine column, ``n_ribs`` pairs of curved tubular ribs
    wrapped around the chest wall, a few lung vessels and at least one nodule.
    Everything is randomised mildly from ``seed``.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < MIN_AXIS:
        raise ParameterError(f"shape must have three axes >= {MIN_AXIS}, got {shape}")
    if int(n_ribs) < 1:
        raise ParameterError(f"n_ribs must be >= 1, got {n_ribs}")
    rng = np.random.default_rng(seed)
    D, H, W = shape
    z, y, x = _grid(shape)
    jit = lambda s: 1.0 + rng.uniform(-s, s)  # noqa: E731

    vol = np.zeros(shape, dtype=np.float64)

    t_center = (D / 2.0, 0.56 * H, W / 2.0)
    t_semi = (0.36 * D * jit(0.04), 0.62 * H, 0.46 * W * jit(0.04))
    torso = _ellipsoid(z, y, x, t_center, t_semi)
    vol[torso] = MU_TISSUE

    heart = _ellipsoid(z, y, x, (0.45 * D, 0.62 * H, 0.54 * W),
                       (0.16 * D, 0.14 * H * jit(0.1), 0.13 * W * jit(0.1)))
    vol[heart & torso] = MU_HEART

    lung = np.zeros(shape, dtype=bool)
    lung_params = []
    for side in (-1.0, 1.0):
        c = (0.52 * D, 0.44 * H * jit(0.03), W / 2.0 + side * 0.2 * W * jit(0.05))
        s = (0.19 * D * jit(0.05), 0.27 * H * jit(0.05), 0.14 * W * jit(0.05))
        lung |= _ellipsoid(z, y, x, c, s)
        lung_params.append((c, s))
    lung &= torso & ~heart
    vol[lung] = MU_LUNG

    # lung vessels: short random segments inside each lung
    for c, s in lung_params:
        for _ in range(4):
            start = np.array(c) + rng.uniform(-0.5, 0.5, 3) * np.array(s)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            length = rng.uniform(0.4, 0.9) * min(s)
            ts = np.linspace(0.0, length, 24)
            pts = start[None, :] + ts[:, None] * direction[None, :]
            v = _tube(shape, pts, max(0.55, 0.012 * H)) & lung
            vol[v] = MU_VESSEL

    nodule = np.zeros(shape, dtype=bool)
    n_nodules = 1 + int(rng.integers(0, 2))
    for _ in range(n_nodules):
        c, s = lung_params[int(rng.integers(0, 2))]
        u = rng.uniform(-0.5, 0.5, 3)
        pos = np.array(c) + u * np.array(s)
        r = rng.uniform(0.035, 0.055) * H
        nodule |= _ellipsoid(z, y, x, pos, (r, r, r))
    nodule &= lung
    vol[nodule] = MU_NODULE

    spine = (((z - 0.78 * D) / (0.07 * D)) ** 2 + ((x - W / 2.0) / (0.06 * W)) ** 2 <= 1.0)
    spine &= torso
    vol[spine] = MU_SPINE

    # ribs: arcs around the chest wall, higher at the back, sloping down to the front
    rib = np.zeros(shape, dtype=bool)
    radius = max(1.0, 0.021 * H) * jit(0.05)
    top, bottom = 0.14 * H, 0.6 * H
    step = (bottom - top) / max(int(n_ribs), 1)
    phis = np.linspace(0.1 * np.pi, 0.72 * np.pi, 160)
    for k in range(int(n_ribs)):
        y0 = top + (k + 0.3) * step + rng.uniform(-0.08, 0.08) * step
        drop = (2.2 + rng.uniform(-0.1, 0.1)) * step
        for side in (-1.0, 1.0):
            ys = y0 + drop * (phis / np.pi)
            frac = np.clip((ys - t_center[1]) / t_semi[1], -0.99, 0.99)
            ring = 0.87 * np.sqrt(1.0 - frac**2)
            zs = t_center[0] + ring * t_semi[0] * np.cos(phis)
            xs = t_center[2] + side * ring * t_semi[2] * np.sin(phis)
            pts = np.stack([zs, ys, xs], axis=1)
            rib |= _tube(shape, pts, radius)
    rib &= torso
    rib &= ~spine
    vol[rib] = MU_RIB * jit(0.03)

    lung &= ~rib
    nodule &= ~rib
    vol = np.clip(vol, 0.0, 1.0)
    spacing = tuple(float(s) for s in spacing)
    return (PhantomVolume(vol, spacing, int(seed)),
            ComponentMasks(rib=rib.astype(np.uint8), lung=lung.astype(np.uint8),
                           nodule=nodule.astype(np.uint8)))


# ---------------------------------------------------------------------------
# rib inpainting
# ---------------------------------------------------------------------------

def inpaint_ribs(volume: PhantomVolume, rib_mask: np.ndarray, tol: float = 1e-4,
                 max_iter: int = 20000) -> PhantomVolume:
    """Harmonic fill of the masked voxels from their unmasked surroundings.

    Jacobi sweeps over the 6-neighbourhood (replicated volume borders) run until
    the largest per-voxel change drops below ``tol``.
    """
    vox = volume.voxels
    mask = np.asarray(rib_mask).astype(bool)
    if mask.shape != vox.shape:
        raise ParameterError(f"mask shape {mask.shape} does not match volume {vox.shape}")
    if not mask.any():
        return volume.replace(vox.copy())
    if mask.all():
        raise ParameterError("mask covers the whole volume; nothing to inpaint from")

    # restrict the work to the bounding box of the mask plus a one-voxel margin
    idx = np.argwhere(mask)
    lo = np.maximum(idx.min(0) - 1, 0)
    hi = np.minimum(idx.max(0) + 2, np.array(vox.shape))
    box = tuple(slice(a, b) for a, b in zip(lo, hi))
    f = vox[box].astype(np.float64).copy()
    m = mask[box]

    boundary = ndimage.binary_dilation(m) & ~m
    f[m] = f[boundary].mean() if boundary.any() else f[~m].mean()
    for _ in range(max_iter):
        p = np.pad(f, 1, mode="edge")
        avg = (p[:-2, 1:-1, 1:-1] + p[2:, 1:-1, 1:-1] + p[1:-1, :-2, 1:-1]
               + p[1:-1, 2:, 1:-1] + p[1:-1, 1:-1, :-2] + p[1:-1, 1:-1, 2:]) / 6.0
        change = np.abs(avg[m] - f[m]).max()
        f[m] = avg[m]
        if change < tol:
            break
    out = vox.copy()
    out[box] = np.where(m, f, vox[box])
    return volume.replace(out)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def _rotation(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    a = math.radians(azimuth_deg)
    e = math.radians(elevation_deg)
    # azimuth turns about the rows axis (mixes depth and cols),
    # elevation about the cols axis (mixes depth and rows)
    r_az = np.array([[math.cos(a), 0.0, -math.sin(a)],
                     [0.0, 1.0, 0.0],
                     [math.sin(a), 0.0, math.cos(a)]])
    r_el = np.array([[math.cos(e), -math.sin(e), 0.0],
                     [math.sin(e), math.cos(e), 0.0],
                     [0.0, 0.0, 1.0]])
    return r_az @ r_el


def project(volume: PhantomVolume | np.ndarray, geom: ProjectionGeometry) -> np.ndarray:
    """Parallel-beam line integral along depth after rotating the volume."""
    if isinstance(volume, PhantomVolume):
        vox, spacing = volume.voxels, volume.spacing
    else:
        vox, spacing = np.asarray(volume), (1.0, 1.0, 1.0)
    if not isinstance(geom, ProjectionGeometry):
        raise ParameterError("geom must be a ProjectionGeometry")
    vox = vox.astype(np.float64, copy=False)
    if geom.azimuth_deg == 0.0 and geom.elevation_deg == 0.0:
        rotated = vox
    else:
        rot = _rotation(geom.azimuth_deg, geom.elevation_deg)
        center = (np.array(vox.shape, dtype=np.float64) - 1.0) / 2.0
        offset = center - rot @ center
        rotated = ndimage.affine_transform(vox, rot, offset=offset, order=1,
                                           mode="grid-constant", cval=0.0)
    image = rotated.sum(axis=0) * spacing[0]
    return resize_bilinear(image, geom.detector_shape)


def sample_geometries(n: int, detector_shape=(64, 64)) -> list[ProjectionGeometry]:
    """``n`` view angles on a near-square grid over [-10, 10]^2 degrees.

    The azimuth axis gets the larger factor, so ``n=42`` is a 7 x 6 grid.
    """
    n = int(n)
    if n < 1:
        raise ParameterError("n must be >= 1")
    rows = max(b for b in range(1, int(math.isqrt(n)) + 1) if n % b == 0)
    cols = n // rows

    def axis(k):
        return [0.0] if k == 1 else [float(v) for v in np.linspace(-MAX_ANGLE, MAX_ANGLE, k)]

    return [ProjectionGeometry(a, e, tuple(detector_shape))
            for a in axis(cols) for e in axis(rows)]


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

BONE_REF_PERCENTILE = 90.0
# kept inside the open tanh range so a tanh decoder can reach every target value
BONE_RANGE = (-0.9, 0.9)
# fraction of the reference rib line integral that maps to the midpoint 0 of BONE_RANGE,
# so a zero threshold on the bone map captures the projected rib foreground
BONE_FOREGROUND_FRACTION = 0.05
BONE_EXPONENT = float(np.log(0.5) / np.log(BONE_FOREGROUND_FRACTION))
# fraction of the reference rib line integral above which a pixel counts as rib for evaluation
EVAL_RIB_FRACTION = 0.65


def bone_level(fraction):
    """Bone-map value for a line integral given as a fraction of the reference."""
    b_lo, b_hi = BONE_RANGE
    return b_lo + (b_hi - b_lo) * np.clip(fraction, 0.0, 1.0) ** BONE_EXPONENT


EVAL_RIB_LEVEL = float(bone_level(EVAL_RIB_FRACTION))


def render_drr_sample(volume: PhantomVolume, suppressed_volume: PhantomVolume,
                      masks: ComponentMasks, geom: ProjectionGeometry) -> DrrSample:
    """Project every component with the same geometry.

    ``image`` and ``suppressed`` share one affine map (from the image's
    min/max to [-1, 1]) so ``residual = image - suppressed`` is the exact
    rib contribution. ``bone`` maps zero to ``BONE_RANGE[0]`` and the typical
    single-rib line integral (90th percentile of the non-zero bone
    projection) to ``BONE_RANGE[1]`` through the concave ``bone_level``
    curve, so thin rib edges already lie above 0.
    """
    if (suppressed_volume.voxels.shape != volume.voxels.shape
            or masks.rib.shape != volume.voxels.shape
            or masks.lung.shape != volume.voxels.shape):
        raise ParameterError("volume, suppressed volume and masks must share one shape")
    p_full = project(volume, geom)
    p_supp = project(suppressed_volume, geom)
    p_bone = project(volume.replace(volume.voxels * masks.rib), geom)
    p_lung = project(volume.replace(masks.lung.astype(np.float64)), geom)

    lo, hi = float(p_full.min()), float(p_full.max())
    scale = 2.0 / (hi - lo) if hi > lo else 0.0
    image = ((p_full - lo) * scale - 1.0).astype(np.float32)
    suppressed = ((p_supp - lo) * scale - 1.0).astype(np.float32)
    residual = image - suppressed

    b_lo = BONE_RANGE[0]
    positive = p_bone[p_bone > 1e-9]
    if positive.size:
        ref = float(np.percentile(positive, BONE_REF_PERCENTILE))
        bone = bone_level(p_bone / ref)
        bone[p_bone <= 1e-9] = b_lo
    else:
        bone = np.full(p_bone.shape, b_lo)
    lung = (p_lung > 1e-6).astype(np.float32)
    meta = {"phantom_seed": int(volume.seed), "azimuth_deg": float(geom.azimuth_deg),
            "elevation_deg": float(geom.elevation_deg)}
    return DrrSample(image, suppressed, residual, bone.astype(np.float32), lung, meta)


def ring_mask(mask: np.ndarray, radius: int = 5) -> np.ndarray:
    """Pixels within Chebyshev distance ``radius`` of ``mask`` but outside it."""
    mask = np.asarray(mask).astype(bool)
    grown = ndimage.binary_dilation(mask, structure=np.ones((2 * radius + 1,) * 2, bool))
    return grown & ~mask


def _style_map(v: np.ndarray, style: DomainStyle, noise: np.ndarray | None) -> np.ndarray:
    u = style.gain * np.power((v.astype(np.float64) + 1.0) / 2.0, style.gamma) + style.bias
    u = np.clip(u, 0.0, 1.0)
    if style.blur_radius > 0:
        u = ndimage.gaussian_filter(u, sigma=style.blur_radius, mode="nearest")
    if noise is not None:
        u = u + noise
    return np.clip(2.0 * u - 1.0, -1.0, 1.0)


def render_pseudo_cxr(sample: DrrSample, style: DomainStyle,
                      ring_radius: int = 5) -> PseudoCxrSample:
    """Apply a monotone intensity transform, blur and noise to a DRR sample.

    The suppressed image goes through the identical transform (same noise
    realisation), so the held-out truth residual is ``image - truth_suppressed``.
    Evaluation masks are confined to the projected lung field.
    """
    if style.is_identity:
        image = sample.image.copy()
        truth_q = sample.suppressed.copy()
    else:
        noise = None
        if style.noise_sigma > 0:
            rng = np.random.default_rng(style.seed)
            noise = rng.normal(0.0, style.noise_sigma, sample.image.shape)
        image = _style_map(sample.image, style, noise).astype(np.float32)
        truth_q = _style_map(sample.suppressed, style, noise).astype(np.float32)
    truth_r = image - truth_q

    lung = sample.lung > 0.5
    rib = (sample.bone > EVAL_RIB_LEVEL) & lung
    ring = ring_mask(rib, ring_radius) & lung
    meta = dict(sample.meta)
    meta["style"] = {k: getattr(style, k) for k in
                     ("gamma", "gain", "bias", "noise_sigma", "blur_radius", "seed")}
    return PseudoCxrSample(image, rib.astype(np.float32), lung.astype(np.float32),
                           ring.astype(np.float32), truth_q, truth_r, meta)


def phantom_views(seed: int, n_views: int = 42, volume_shape=(64, 64, 64),
                  detector_shape=(64, 64), n_ribs: int = 6) -> list[DrrSample]:
    """Generate one phantom, inpaint its ribs and render every view."""
    vol, masks = synth_phantom(seed, volume_shape, n_ribs)
    supp = inpaint_ribs(vol, masks.rib)
    return [render_drr_sample(vol, supp, masks, g)
            for g in sample_geometries(n_views, detector_shape)]
