"""Joint pre-training: mask sampling, the weighted reconstruction+alignment
objective, optimization schedule, checkpointing and deterministic resume.

All randomness is drawn from stateless named substreams of the run seed, so a
resumed run replays the exact masks and data order of an uninterrupted one.
The data path applies normalization only; no augmentation of any kind.
"""

import hashlib
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import PROFILES, PixelDecoder, assemble_full
from .errors import ConfigError, TrainingError
from .id_branch import (
    ID_LOSS_KINDS,
    TARGET_VIEW_KINDS,
    MaskedRepRegressor,
    OnlineBranch,
    build_target,
    ema_momentum,
    ema_update,
    forward_online_variant,
    forward_target_variant,
    loss_id_variant,
)
from .masking import STRATEGIES, sample_mask
from .mim import loss_rec, recon_targets
from .regions import patchify_parsing
from .rng import substream, substream_seed

__all__ = [
    "PretrainConfig",
    "LossReport",
    "PretrainModel",
    "Trainer",
    "pretrain",
    "save_checkpoint",
    "load_checkpoint",
    "config_hash",
    "prepare_images",
    "prepare_indices",
    "batch_pixel_hash",
    "LOSS_LOG_COLUMNS",
]

LOSS_LOG_COLUMNS = ("step", "rec_m", "rec_fr", "sim", "total")

CHECKPOINT_FORMAT = "fsvfm-checkpoint-v1"


@dataclass
class PretrainConfig:
    mask_strategy: str = "crfr_p"
    r: float = 0.75
    lambda_fr: float = 0.007
    lambda_cl: float = 0.1
    id_enabled: bool = True
    target_view: str = "full"
    id_loss: str = "ncs_asym"
    infonce_temperature: float = 0.1
    epochs: int = 10
    batch_size: int = 16
    base_lr: float = 1.5e-4
    min_lr: float = 0.0
    warmup_epochs: float = 1.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    ema_base: float = 0.996
    seed: int = 0
    profile: str = "micro"
    image_size: int = 64
    proj_hidden: int = 2048
    proj_out: int = 256
    rep_depth: int = 2
    norm_mean: tuple = (0.5, 0.5, 0.5)
    norm_std: tuple = (0.5, 0.5, 0.5)
    checkpoint_every: int = 0  # steps between periodic checkpoints; 0 = final only
    dtype: str = "float64"

    def validate(self):
        if self.mask_strategy not in STRATEGIES:
            raise ConfigError(f"unknown mask strategy {self.mask_strategy!r}")
        if not 0.0 < self.r < 1.0:
            raise ConfigError("mask ratio r must lie in (0, 1)")
        if self.id_loss not in ID_LOSS_KINDS:
            raise ConfigError(f"unknown id loss {self.id_loss!r}")
        if self.target_view not in TARGET_VIEW_KINDS:
            raise ConfigError(f"unknown target view {self.target_view!r}")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        if self.image_size % PROFILES[self.profile].patch_size:
            raise ConfigError("image_size must be divisible by the profile patch size")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass
class LossReport:
    rec_m: float
    rec_fr: float
    sim: float
    total: float
    step: int = 0
    epoch: int = 0

    def log_line(self) -> str:
        return "\t".join(
            [str(self.step)]
            + [f"{v:.10e}" for v in (self.rec_m, self.rec_fr, self.sim, self.total)]
        )


def config_hash(config: PretrainConfig) -> str:
    payload = "\n".join(f"{k}={v!r}" for k, v in sorted(asdict(config).items()))
    return hashlib.sha256(payload.encode()).hexdigest()


class PretrainModel(nn.Module):
    """Online branch + pixel decoder + shared mask token, with the EMA target.

    Weight init is seeded from the run seed's "init" substream; the target
    branch starts as an exact copy of the online branch.
    """

    def __init__(self, config: PretrainConfig):
        super().__init__()
        config.validate()
        profile = PROFILES[config.profile]
        torch.manual_seed(substream_seed(config.seed, "init"))
        self.online = OnlineBranch(
            profile, config.image_size, config.proj_hidden, config.proj_out, config.rep_depth
        )
        self.pixel_decoder = PixelDecoder(profile)
        self.mask_token = nn.Parameter(torch.zeros(profile.embed_dim))
        nn.init.normal_(self.mask_token, std=0.02)
        self.regressor = (
            MaskedRepRegressor(profile) if config.target_view == "masked_same_mask" else None
        )
        self.target = build_target(self.online)
        self.profile = profile
        self.to(config.torch_dtype)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def prepare_images(samples, config: PretrainConfig) -> torch.Tensor:
    """Stacked normalized tensor (n, 3, H, W); normalization is the only
    transform applied by the data path."""
    mean = np.asarray(config.norm_mean, dtype=np.float64)
    std = np.asarray(config.norm_std, dtype=np.float64)
    arrays = []
    for sample in samples:
        image = sample.image
        if image.shape[:2] != (config.image_size, config.image_size):
            raise ConfigError(
                f"sample size {image.shape[:2]} does not match config image_size "
                f"{config.image_size}; regenerate or re-ingest the dataset"
            )
        arrays.append(((image - mean) / std).transpose(2, 0, 1))
    if not arrays:
        raise ConfigError("dataset is empty")
    return torch.from_numpy(np.stack(arrays)).to(config.torch_dtype)


def prepare_indices(samples, config: PretrainConfig):
    patch = PROFILES[config.profile].patch_size
    return [patchify_parsing(sample.parsing, patch) for sample in samples]


def batch_pixel_hash(images: torch.Tensor) -> str:
    """Audit hash of a delivered batch (float64 little-endian bytes)."""
    arr = np.ascontiguousarray(images.detach().cpu().numpy().astype("<f8"))
    return hashlib.sha256(arr.tobytes()).hexdigest()


def save_checkpoint(payload: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"not a recognized checkpoint: {path}")
    return payload


class Trainer:
    """Single-writer training loop over an in-memory dataset."""

    def __init__(self, samples, config: PretrainConfig, out_dir=None):
        config.validate()
        self.config = config
        self.out_dir = Path(out_dir) if out_dir else None
        self.images = prepare_images(samples, config)
        self.indices = prepare_indices(samples, config)
        self.model = PretrainModel(config)
        self.optimizer = torch.optim.AdamW(
            self.model.trainable_parameters(),
            lr=config.base_lr,
            betas=(config.beta1, config.beta2),
            weight_decay=config.weight_decay,
        )
        n = len(samples)
        self.steps_per_epoch = math.ceil(n / config.batch_size)
        self.total_steps = self.steps_per_epoch * config.epochs
        self.global_step = 0
        self.cursor = (0, 0)  # next (epoch, batch) to run
        self.reports: list[LossReport] = []
        self._log_file = None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # -- schedule ----------------------------------------------------------

    def lr_at(self, step: int) -> float:
        cfg = self.config
        peak = cfg.base_lr * cfg.batch_size / 256.0
        warmup_steps = cfg.warmup_epochs * self.steps_per_epoch
        if warmup_steps > 0 and step < warmup_steps:
            return peak * (step + 1) / warmup_steps
        span = max(self.total_steps - warmup_steps, 1)
        frac = min(max((step - warmup_steps) / span, 0.0), 1.0)
        return cfg.min_lr + (peak - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))

    # -- one optimization step ---------------------------------------------

    def _sample_masks(self, batch_ids, epoch: int, batch_idx: int, stream: str):
        cfg = self.config
        masks, region_masks = [], []
        for i, sample_id in enumerate(batch_ids):
            rng = substream(cfg.seed, stream, epoch, batch_idx, i)
            pair = sample_mask(cfg.mask_strategy, self.indices[sample_id], cfg.r, rng)
            masks.append(pair.mask)
            region_masks.append(pair.region_mask)
        to_tensor = lambda xs: torch.from_numpy(np.stack(xs)).to(torch.long)  # noqa: E731
        return to_tensor(masks), to_tensor(region_masks)

    def train_step(self, batch_ids, epoch: int, batch_idx: int) -> LossReport:
        cfg = self.config
        model = self.model
        images = self.images[batch_ids]
        mask, region_mask = self._sample_masks(batch_ids, epoch, batch_idx, "mask")
        alt_mask = None
        if cfg.id_enabled and cfg.target_view == "visible_other_mask":
            alt_mask, _ = self._sample_masks(batch_ids, epoch, batch_idx, "mask_alt")

        lr = self.lr_at(self.global_step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        encoder = model.online.encoder
        tokens_v = encoder.embed_visible(images, mask)
        z_v, _ = encoder.encode(tokens_v)
        z_f = assemble_full(z_v, mask, model.mask_token, encoder.pos_embed)
        pred = model.pixel_decoder(z_f)
        targets = recon_targets(images, model.profile.patch_size)
        rec_total, parts = loss_rec(pred, targets, mask, region_mask, cfg.lambda_fr)

        sim = images.new_zeros(())
        if cfg.id_enabled:
            v_o = forward_online_variant(
                cfg.target_view,
                model.online,
                z_full=z_f,
                z_visible=z_v,
                mask=mask,
                regressor=model.regressor,
                pos_embed=encoder.pos_embed,
            )
            v_t = forward_target_variant(
                cfg.target_view, model.target, images, mask=mask, alt_mask=alt_mask
            )
            sim = loss_id_variant(cfg.id_loss, v_o, v_t, cfg.infonce_temperature)

        total = rec_total + cfg.lambda_cl * sim
        if not torch.isfinite(total):
            self._dump_diagnostic()
            raise TrainingError(
                f"non-finite loss at step {self.global_step} "
                f"(rec_m={float(parts['rec_m'].detach())}, sim={float(sim.detach())})"
            )

        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        # the target is exactly the EMA of pre-step online values: update it
        # from the not-yet-stepped parameters, then let the optimizer run
        tau = ema_momentum(self.global_step, self.total_steps, cfg.ema_base)
        ema_update(model.target, model.online, tau)
        self.optimizer.step()

        report = LossReport(
            rec_m=float(parts["rec_m"].detach()),
            rec_fr=float(parts["rec_fr"].detach()),
            sim=float(sim.detach()),
            total=float(total.detach()),
            step=self.global_step + 1,
            epoch=epoch,
        )
        self.global_step += 1
        return report

    # -- loop --------------------------------------------------------------

    def _epoch_order(self, epoch: int):
        order = substream(self.config.seed, "data", epoch).permutation(len(self.indices))
        bs = self.config.batch_size
        return [order[i : i + bs] for i in range(0, len(order), bs)]

    def train(self) -> dict:
        cfg = self.config
        log_path = self.out_dir / "loss_log.tsv" if self.out_dir else None
        if log_path and not log_path.exists():
            log_path.write_text("#" + "\t".join(LOSS_LOG_COLUMNS) + "\n")
        start_epoch, start_batch = self.cursor
        for epoch in range(start_epoch, cfg.epochs):
            self._order = self._epoch_order(epoch)
            first = start_batch if epoch == start_epoch else 0
            for batch_idx in range(first, len(self._order)):
                report = self.train_step(self._order[batch_idx], epoch, batch_idx)
                self.reports.append(report)
                if log_path:
                    with log_path.open("a") as fh:
                        fh.write(report.log_line() + "\n")
                self.cursor = (
                    (epoch, batch_idx + 1)
                    if batch_idx + 1 < len(self._order)
                    else (epoch + 1, 0)
                )
                if (
                    self.out_dir
                    and cfg.checkpoint_every
                    and self.global_step % cfg.checkpoint_every == 0
                    and self.global_step < self.total_steps
                ):
                    save_checkpoint(
                        self.state_payload(),
                        self.out_dir / f"checkpoint_step{self.global_step:06d}.pt",
                    )
        payload = self.state_payload()
        if self.out_dir:
            save_checkpoint(payload, self.out_dir / "checkpoint.pt")
        return payload

    # -- state -------------------------------------------------------------

    def state_payload(self) -> dict:
        cfg = self.config
        return {
            "format": CHECKPOINT_FORMAT,
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "cursor": {"epoch": self.cursor[0], "batch": self.cursor[1], "step": self.global_step},
            "config": asdict(cfg),
            "config_hash": config_hash(cfg),
            "profile": cfg.profile,
            "normalization": {"mean": list(cfg.norm_mean), "std": list(cfg.norm_std)},
            "torch_rng": torch.get_rng_state(),
        }

    def load_payload(self, payload: dict):
        if payload.get("config_hash") != config_hash(self.config):
            raise ConfigError("checkpoint config hash does not match the current config")
        self.model.load_state_dict(payload["model"])
        self.optimizer.load_state_dict(payload["optimizer"])
        cursor = payload["cursor"]
        self.cursor = (int(cursor["epoch"]), int(cursor["batch"]))
        self.global_step = int(cursor["step"])
        torch.set_rng_state(payload["torch_rng"])

    def _dump_diagnostic(self):
        if self.out_dir:
            save_checkpoint(
                self.state_payload(),
                self.out_dir / f"diagnostic_step{self.global_step:06d}.pt",
            )


def restore_config(payload: dict) -> PretrainConfig:
    raw = dict(payload["config"])
    for key in ("norm_mean", "norm_std"):
        raw[key] = tuple(raw[key])
    return PretrainConfig(**raw)


def restore_model(payload: dict) -> PretrainModel:
    model = PretrainModel(restore_config(payload))
    model.load_state_dict(payload["model"])
    return model


def pretrain(samples, config: PretrainConfig, out_dir=None, resume=None) -> dict:
    """Run (or resume) a full pre-training job; returns the final payload."""
    trainer = Trainer(samples, config, out_dir=out_dir)
    if resume is not None:
        payload = resume if isinstance(resume, dict) else load_checkpoint(resume)
        trainer.load_payload(payload)
    result = trainer.train()
    result["reports"] = [asdict(r) for r in trainer.reports]
    return result
