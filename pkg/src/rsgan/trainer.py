"""Training orchestration: lung pretraining, contrast exchange, staged updates, inference."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .imaging import resize_tensor
from .losses import (INTER_REGIONS, BoneMaskConfig, LossReport, LossWeights, bone_mask, binarize,
                     dice_loss, l1, loss_adversarial, loss_feature_consistency, loss_grad_adv, loss_inter,
                     loss_laplace, loss_rec_cyc, loss_supervised, total_loss)
from .nets import DiscriminatorBundle, GeneratorBundle, NetConfig

log = logging.getLogger(__name__)

MODES = ("full", "nRM", "RM", "RMDA")
MODE_GENERATORS = {
    "full": ("E_C", "E_S", "E_B", "G_Q", "G_R", "G_B"),
    "RMDA": ("E_C", "E_S", "E_B", "G_Q", "G_R", "G_B"),
    "RM": ("E_C", "E_S", "E_B", "G_Q", "G_R", "G_B"),
    "nRM": ("E_C", "E_S", "G_Q"),
}


class TrainingAborted(RuntimeError):
    """A loss term became non-finite."""

    def __init__(self, term: str, iteration: int, value: float):
        super().__init__(f"non-finite loss {term}={value} at iteration {iteration}")
        self.term = term
        self.iteration = iteration


@dataclass
class TrainConfig:
    iters_init: int = 2000
    iters_fine: int = 500
    lr: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 1
    seed: int = 0
    mode: str = "full"
    lung_iters: int = 500
    lung_lr: float = 1e-3
    lung_batch: int = 4
    checkpoint_every: int = 500
    weights: LossWeights = field(default_factory=LossWeights)
    net: NetConfig = field(default_factory=NetConfig)
    bone_mask: BoneMaskConfig = field(default_factory=BoneMaskConfig)
    # the union region also zeroes real rib residue outside the lung, which DRR supervision keeps
    inter_region: str = "lung"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.inter_region not in INTER_REGIONS:
            raise ValueError(f"inter_region must be one of {INTER_REGIONS}, got {self.inter_region!r}")
        if self.iters_init < 0 or self.iters_fine < 0 or self.lung_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.lr <= 0 or self.lung_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["net"] = NetConfig(**d.get("net", {}))
        d["bone_mask"] = BoneMaskConfig(**d.get("bone_mask", {}))
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def schedule(self) -> list[tuple[str, int]]:
        """Stages with their iteration counts for this mode.

        The ablations without a fine-tuning stage (RMDA, RM, nRM) run for
        ``iters_init`` iterations.
        """
        if self.mode == "full":
            return [("init", self.iters_init), ("fine", self.iters_fine)]
        if self.mode == "RMDA":
            return [("init", self.iters_init)]
        return [(self.mode, self.iters_init)]

    @property
    def total_iters(self) -> int:
        return sum(n for _, n in self.schedule())

    def stage_at(self, iteration: int) -> str:
        edge = 0
        for stage, n in self.schedule():
            edge += n
            if iteration < edge:
                return stage
        return self.schedule()[-1][0]

    @property
    def needs_lung(self) -> bool:
        return self.mode == "full" and self.iters_fine > 0


def _t(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, dtype=np.float32))


@dataclass
class TrainData:
    """Stacked tensors, N x 1 x H x W, for both domains."""

    drr_image: torch.Tensor
    drr_suppressed: torch.Tensor
    drr_residual: torch.Tensor
    drr_bone: torch.Tensor
    drr_lung: torch.Tensor
    cxr_image: torch.Tensor
    cxr_lung: torch.Tensor | None = None

    @classmethod
    def from_samples(cls, drr, cxr, size: int | None = None, cxr_lung_labels: bool = True):
        if not drr or not cxr:
            raise ValueError("training needs at least one DRR and one pseudo-CXR sample")

        def stack(items, attr):
            t = torch.stack([_t(getattr(s, attr)) for s in items])[:, None]
            return resize_tensor(t, size) if size else t

        lung = stack(cxr, "eval_lung_mask") if cxr_lung_labels else None
        if lung is not None and size:
            lung = (lung > 0.5).float()
        dl = stack(drr, "lung")
        if size:
            dl = (dl > 0.5).float()
        return cls(stack(drr, "image"), stack(drr, "suppressed"), stack(drr, "residual"),
                   stack(drr, "bone"), dl, stack(cxr, "image"), lung)


@dataclass
class TransferSet:
    I_x: torch.Tensor
    I_d: torch.Tensor
    I_x_rec: torch.Tensor
    I_d_rec: torch.Tensor
    I_x2d: torch.Tensor
    I_d2x: torch.Tensor
    I_x_cyc: torch.Tensor
    I_d_cyc: torch.Tensor
    Q_x: torch.Tensor
    Q_d: torch.Tensor
    R_x: torch.Tensor
    R_d: torch.Tensor
    B_x: torch.Tensor
    B_d: torch.Tensor
    L_x: torch.Tensor
    L_d: torch.Tensor
    Q_d2x: torch.Tensor
    feats: dict = field(default_factory=dict, repr=False)

    ARRAYS = ("I_x", "I_d", "I_x_rec", "I_d_rec", "I_x2d", "I_d2x", "I_x_cyc", "I_d_cyc",
              "Q_x", "Q_d", "R_x", "R_d", "B_x", "B_d", "L_x", "L_d", "Q_d2x")


def ce_transfer(I_x: torch.Tensor, I_d: torch.Tensor, gen: GeneratorBundle,
                with_lung: bool = True) -> TransferSet:
    """One full disentangle / exchange / cycle forward pass."""
    if I_x.shape != I_d.shape:
        raise ValueError(f"shape mismatch: {tuple(I_x.shape)} vs {tuple(I_d.shape)}")
    c_x, c_d = gen.E_C(I_x), gen.E_C(I_d)
    s_x, s_d = gen.E_S(I_x), gen.E_S(I_d)
    b_x, b_d = gen.E_B(I_x), gen.E_B(I_d)

    Q_x, R_x = gen.G_Q(s_x, c_x), gen.G_R(b_x, c_x)
    Q_d, R_d = gen.G_Q(s_d, c_d), gen.G_R(b_d, c_d)
    B_x, B_d = gen.G_B(b_x), gen.G_B(b_d)

    # contrast exchange: structure of one domain rendered with the other's contrast
    Q_x2d = gen.G_Q(s_x, c_d)
    I_x2d = Q_x2d + gen.G_R(b_x, c_d)
    Q_d2x = gen.G_Q(s_d, c_x)
    I_d2x = Q_d2x + gen.G_R(b_d, c_x)

    c_d2x, c_x2d = gen.E_C(I_d2x), gen.E_C(I_x2d)
    s_x2d, s_d2x = gen.E_S(I_x2d), gen.E_S(I_d2x)
    b_x2d, b_d2x = gen.E_B(I_x2d), gen.E_B(I_d2x)
    I_x_cyc = gen.G_Q(s_x2d, c_d2x) + gen.G_R(b_x2d, c_d2x)
    I_d_cyc = gen.G_Q(s_d2x, c_x2d) + gen.G_R(b_d2x, c_x2d)

    if with_lung:
        L_x, L_d = gen.lung_mask(I_x), gen.lung_mask(I_d)
    else:
        L_x, L_d = torch.zeros_like(I_x), torch.zeros_like(I_d)

    feats = {("C", "x"): c_x, ("C", "d"): c_d, ("S", "x"): s_x, ("S", "d"): s_d,
             ("B", "x"): b_x, ("B", "d"): b_d, ("C", "d2x"): c_d2x, ("C", "x2d"): c_x2d,
             ("S", "x2d"): s_x2d, ("S", "d2x"): s_d2x, ("B", "x2d"): b_x2d, ("B", "d2x"): b_d2x}
    return TransferSet(I_x, I_d, Q_x + R_x, Q_d + R_d, I_x2d, I_d2x, I_x_cyc, I_d_cyc,
                       Q_x, Q_d, R_x, R_d, B_x, B_d, L_x, L_d, Q_d2x, feats)


def dice_score(pred: torch.Tensor, target: torch.Tensor) -> float:
    p = (pred > 0.5).float()
    t = (target > 0.5).float()
    denom = float(p.sum() + t.sum())
    return 1.0 if denom == 0 else float(2 * (p * t).sum() / denom)


def pretrain_lung_decoder(gen: GeneratorBundle, images: torch.Tensor, masks: torch.Tensor,
                          iters: int, lr: float = 1e-3, batch: int = 4, seed: int = 0,
                          freeze: bool = True) -> list[float]:
    """Train the lung pathway (``E_L`` -> ``G_L``) with soft Dice, then freeze it.

    ``E_S`` keeps its own initialisation, so the init stage of a full run
    matches an RMDA run with the same seed.
    """
    if images.shape[0] == 0:
        raise ValueError("lung pretraining needs a non-empty dataset")
    params = list(gen.E_L.parameters()) + list(gen.G_L.parameters())
    opt = torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999))
    rng = np.random.default_rng([seed, 3])
    losses = []
    for _ in range(int(iters)):
        idx = torch.as_tensor(rng.integers(0, images.shape[0], batch))
        loss = dice_loss(gen.lung_mask(images[idx]), masks[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    if freeze:
        gen.freeze_lung()
    return losses


class Trainer:
    """Holds the networks, optimisers and data streams of one training run."""

    def __init__(self, cfg: TrainConfig, data: TrainData | None = None):
        self.cfg = cfg
        self.data = data
        torch.manual_seed(cfg.seed)
        self.gen = GeneratorBundle(cfg.net)
        self.disc = DiscriminatorBundle(cfg.net) if cfg.mode in ("full", "RMDA") else None
        self.iteration = 0
        self.rng_d = np.random.default_rng([cfg.seed, 1])
        self.rng_x = np.random.default_rng([cfg.seed, 2])
        self._build_optimizers()

    def _build_optimizers(self):
        cfg = self.cfg
        self.opt_g = torch.optim.Adam(self.gen.trainable(MODE_GENERATORS[cfg.mode]),
                                      lr=cfg.lr, betas=cfg.betas)
        self.opt_d = (torch.optim.Adam(self.disc.parameters(), lr=cfg.lr, betas=cfg.betas)
                      if self.disc is not None else None)

    # -- lung pathway ------------------------------------------------------

    def pretrain_lung(self, iters: int | None = None) -> list[float]:
        d = self.data
        images, masks = d.drr_image, d.drr_lung
        if d.cxr_lung is not None:
            images = torch.cat([images, d.cxr_image])
            masks = torch.cat([masks, d.cxr_lung])
        losses = pretrain_lung_decoder(self.gen, images, masks,
                                       self.cfg.lung_iters if iters is None else iters,
                                       self.cfg.lung_lr, self.cfg.lung_batch, self.cfg.seed)
        return losses

    # -- one iteration -----------------------------------------------------

    def sample_batch(self) -> dict:
        d = self.data
        n = self.cfg.batch_size
        i_d = torch.as_tensor(self.rng_d.integers(0, d.drr_image.shape[0], n))
        i_x = torch.as_tensor(self.rng_x.integers(0, d.cxr_image.shape[0], n))
        return {"I_d": d.drr_image[i_d], "Q_d": d.drr_suppressed[i_d],
                "R_d": d.drr_residual[i_d], "B_d": d.drr_bone[i_d], "I_x": d.cxr_image[i_x]}

    def _check(self, parts: dict):
        for k, v in parts.items():
            val = float(v.detach()) if torch.is_tensor(v) else float(v)
            if not math.isfinite(val):
                raise TrainingAborted(k, self.iteration, val)

    def generator_parts(self, ts: TransferSet, batch: dict, stage: str) -> dict:
        """Generator loss terms for ``stage`` from one forward pass."""
        truth = {"Q": batch["Q_d"], "R": batch["R_d"], "B": batch["B_d"]}
        parts = {"L_su": loss_supervised({"Q": ts.Q_d, "R": ts.R_d, "B": ts.B_d}, truth)}
        I = {"x": ts.I_x, "d": ts.I_d}
        l_rec, l_cyc = loss_rec_cyc(I, {"x": ts.I_x_rec, "d": ts.I_d_rec},
                                    {"x": ts.I_x_cyc, "d": ts.I_d_cyc})
        parts["L_rec"] = l_rec
        if stage == "RM":
            return parts
        disc = self.disc
        parts["L_G_adv"] = loss_adversarial(
            [(None, disc.D_x(ts.I_d2x)), (None, disc.D_d(ts.I_x2d)), (None, disc.D_B(ts.B_x))],
            "G")
        images = {"x": ts.I_x, "d": ts.I_d, "x2d": ts.I_x2d, "d2x": ts.I_d2x}
        parts["L_c"], parts["L_s"] = loss_feature_consistency(
            self.gen.E_C, self.gen.E_S, self.gen.E_B, images, ts.feats)
        parts["L_cyc"] = l_cyc
        if stage == "fine":
            M_x = bone_mask(ts.B_x, self.cfg.bone_mask)
            L_x = binarize(ts.L_x)
            parts["L_G_grad"] = loss_grad_adv(disc.D_grad, "G", ts.I_x, ts.R_x, ts.L_x)
            parts["L_inter"] = loss_inter(ts.R_x, M_x, L_x, self.cfg.inter_region)
            parts["L_lap"] = loss_laplace(ts.R_x, M_x, L_x)
        return parts

    def discriminator_parts(self, ts: TransferSet, stage: str) -> dict:
        disc = self.disc
        det = lambda t: t.detach()  # noqa: E731
        parts = {"L_D_adv": loss_adversarial([
            (disc.D_x(ts.I_x), disc.D_x(det(ts.I_d2x))),
            (disc.D_d(ts.I_d), disc.D_d(det(ts.I_x2d))),
            (disc.D_B(det(ts.B_d)), disc.D_B(det(ts.B_x))),
        ], "D")}
        if stage == "fine":
            parts["L_D_grad"] = loss_grad_adv(disc.D_grad, "D", ts.I_x, det(ts.R_x), ts.L_x,
                                              det(ts.Q_d2x), ts.L_d)
        return parts

    def train_step(self, batch: dict | None = None, stage: str | None = None) -> LossReport:
        """One discriminator update followed by one generator update."""
        cfg = self.cfg
        stage = stage or cfg.stage_at(self.iteration)
        batch = batch if batch is not None else self.sample_batch()
        gen = self.gen

        if stage == "nRM":
            Q_d = gen.G_Q(gen.E_S(batch["I_d"]), gen.E_C(batch["I_d"]))
            parts = {"L_nRM": l1(Q_d, batch["Q_d"])}
            self._check(parts)
            report, g_total, _ = total_loss(stage, parts, cfg.weights)
            self.opt_g.zero_grad(set_to_none=True)
            g_total.backward()
            self.opt_g.step()
            self.iteration += 1
            return report

        if stage == "RM":
            c_x, c_d = gen.E_C(batch["I_x"]), gen.E_C(batch["I_d"])
            b_x, b_d = gen.E_B(batch["I_x"]), gen.E_B(batch["I_d"])
            Q_d, R_d = gen.G_Q(gen.E_S(batch["I_d"]), c_d), gen.G_R(b_d, c_d)
            I_x_rec = gen.G_Q(gen.E_S(batch["I_x"]), c_x) + gen.G_R(b_x, c_x)
            truth = {"Q": batch["Q_d"], "R": batch["R_d"], "B": batch["B_d"]}
            parts = {"L_su": loss_supervised({"Q": Q_d, "R": R_d, "B": gen.G_B(b_d)}, truth),
                     "L_rec": l1(I_x_rec, batch["I_x"]) + l1(Q_d + R_d, batch["I_d"])}
            self._check(parts)
            report, g_total, _ = total_loss(stage, parts, cfg.weights)
            self.opt_g.zero_grad(set_to_none=True)
            g_total.backward()
            self.opt_g.step()
            self.iteration += 1
            return report

        ts = ce_transfer(batch["I_x"], batch["I_d"], gen, with_lung=(stage == "fine"))

        d_parts = self.discriminator_parts(ts, stage)
        self._check(d_parts)
        d_names = ("L_D_adv", "L_D_grad") if stage == "fine" else ("L_D_adv",)
        c = {"L_D_adv": cfg.weights.lambda_adv, "L_D_grad": cfg.weights.lambda_grad}
        d_total = sum(c[n] * d_parts[n] for n in d_names)
        self.opt_d.zero_grad(set_to_none=True)
        d_total.backward()
        self.opt_d.step()

        self.disc.requires_grad_(False)
        try:
            parts = self.generator_parts(ts, batch, stage)
            self._check(parts)
            report, g_total, _ = total_loss(stage, parts, cfg.weights, d_parts)
            self.opt_g.zero_grad(set_to_none=True)
            g_total.backward()
            self.opt_g.step()
        finally:
            self.disc.requires_grad_(True)
        self.iteration += 1
        return report

    # -- full run ----------------------------------------------------------

    def run(self, log_path: str | Path | None = None, out_dir: str | Path | None = None,
            until: int | None = None, callback=None) -> list[dict]:
        """Train up to ``until`` (default: the end of the schedule).

        Appends one JSON line per iteration to ``log_path`` and writes
        checkpoints every ``checkpoint_every`` iterations and at stage ends.
        """
        cfg = self.cfg
        end = cfg.total_iters if until is None else min(until, cfg.total_iters)
        boundaries = set(np.cumsum([n for _, n in cfg.schedule()]).tolist())
        records = []
        fh = open(log_path, "a") if log_path else None
        try:
            while self.iteration < end:
                report = self.train_step()
                rec = report.as_record(self.iteration)
                records.append(rec)
                if fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    fh.flush()
                if callback is not None:
                    callback(self, rec)
                it = self.iteration
                if out_dir and ((cfg.checkpoint_every and it % cfg.checkpoint_every == 0)
                                or it in boundaries):
                    self.save(Path(out_dir) / f"ckpt_{it:06d}.zip")
        finally:
            if fh:
                fh.close()
        return records

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> Path:
        tensors = ckpt_io.state_tensors("gen", self.gen)
        meta = {"train": self.cfg.to_dict(), "iteration": self.iteration,
                "mode": self.cfg.mode, "lung_frozen": self.gen.lung_frozen,
                "rng_d": self.rng_d.bit_generator.state, "rng_x": self.rng_x.bit_generator.state}
        blobs, groups = ckpt_io.optimizer_tensors("opt_g", self.opt_g)
        tensors.update(blobs)
        meta["opt_g"] = groups
        if self.disc is not None:
            tensors.update(ckpt_io.state_tensors("disc", self.disc))
            blobs, groups = ckpt_io.optimizer_tensors("opt_d", self.opt_d)
            tensors.update(blobs)
            meta["opt_d"] = groups
        return ckpt_io.save_checkpoint(path, self.cfg.net, tensors, meta)

    @classmethod
    def load(cls, path: str | Path, data: TrainData | None = None,
             cfg: TrainConfig | None = None) -> "Trainer":
        """Restore a run; ``cfg`` (if given) must agree on the network layout."""
        ck = ckpt_io.load_checkpoint(path, expect=cfg.net if cfg else None)
        stored = TrainConfig.from_dict(ck.meta["train"])
        cfg = cfg or stored
        self = cls(cfg, data)
        self.gen.load_state_dict(ck.group("gen"))
        if ck.meta.get("lung_frozen"):
            self.gen.freeze_lung()
        self._build_optimizers()
        self.opt_g.load_state_dict(ckpt_io.optimizer_state("opt_g", ck, ck.meta["opt_g"]))
        if self.disc is not None and "opt_d" in ck.meta:
            self.disc.load_state_dict(ck.group("disc"))
            self.opt_d.load_state_dict(ckpt_io.optimizer_state("opt_d", ck, ck.meta["opt_d"]))
        self.iteration = int(ck.meta["iteration"])
        self.rng_d.bit_generator.state = ck.meta["rng_d"]
        self.rng_x.bit_generator.state = ck.meta["rng_x"]
        return self


def load_generator(path: str | Path) -> tuple[GeneratorBundle, TrainConfig]:
    ck = ckpt_io.load_checkpoint(path)
    cfg = TrainConfig.from_dict(ck.meta.get("train", {"net": asdict(ck.net)}))
    cfg = replace(cfg, net=ck.net)
    gen = GeneratorBundle(ck.net)
    gen.load_state_dict(ck.group("gen"))
    if ck.meta.get("lung_frozen"):
        gen.freeze_lung()
    gen.eval()
    return gen, cfg


@torch.no_grad()
def suppress(image: np.ndarray, gen: GeneratorBundle, mode: str = "full",
             bone_cfg: BoneMaskConfig | None = None) -> dict:
    """Suppress ribs in one image of any resolution >= the network size.

    The image is resized to the network size, the residual is predicted
    there, upsampled back and subtracted. ``nRM`` models predict the
    suppressed image directly instead. Auxiliary maps stay at network size.
    """
    img = np.asarray(image, dtype=np.float32)
    size = gen.cfg.image_size
    if img.ndim != 2 or min(img.shape) < size:
        raise ValueError(f"input must be a 2D image of at least {size} x {size}, got {img.shape}")
    full = torch.from_numpy(img)[None, None]
    x = resize_tensor(full, size)
    c, s, b = gen.E_C(x), gen.E_S(x), gen.E_B(x)
    if mode == "nRM":
        q_low = gen.G_Q(s, c)
        r_low = x - q_low
        q_full = resize_tensor(q_low, tuple(img.shape))
    else:
        r_low = gen.G_R(b, c)
        q_full = full - resize_tensor(r_low, tuple(img.shape))
    q_full = q_full.clamp(-1.0, 1.0)
    B = gen.G_B(b)
    L = gen.lung_mask(x)
    M = bone_mask(B, bone_cfg or BoneMaskConfig())
    return {"Q": q_full[0, 0].numpy(), "R": r_low[0, 0].numpy(), "B": B[0, 0].numpy(),
            "L": L[0, 0].numpy(), "M": M[0, 0].numpy()}
