"""Downstream adaptation (full fine-tuning, adapter tuning, linear probing)
and the binary-detection metric suite (frame/video AUC, HTER, EER).

The positive class is "fake" throughout: a score is the predicted probability
of fake, FAR is the fraction of reals pushed over the threshold and FRR the
fraction of fakes falling under it.
"""

import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from scipy import stats

from .adapter import (
    AdapterConfig,
    build_adapters,
    fuse,
    loss_rac,
    loss_scl_variant,
    project_bottleneck,
)
from .backbone import PROFILES, ViTEncoder, mean_pool
from .errors import ConfigError, FsvfmError, StateError
from .pretrainer import (
    PretrainConfig,
    load_checkpoint,
    prepare_images,
    restore_config,
    restore_model,
)
from .rng import substream, substream_seed

__all__ = [
    "HeadConfig",
    "LinearHead",
    "FinetuneConfig",
    "Classifier",
    "finetune",
    "predict_scores",
    "restore_classifier",
    "save_finetuned",
    "load_finetuned",
    "backbone_param_hash",
    "frame_auc",
    "video_auc",
    "far_frr",
    "hter",
    "eer_threshold",
    "EvalResult",
    "evaluate_scores",
    "scores_to_lines",
]

FINETUNE_FORMAT = "fsvfm-finetune-v1"
MODES = ("full", "adapter", "linear_probe")
LABEL_TO_INT = {"real": 0, "fake": 1}


@dataclass
class HeadConfig:
    input_dim: int
    classes: int = 2
    init_std: float = 0.01


class LinearHead(nn.Module):
    """The entire task head: one linear layer on pooled features."""

    def __init__(self, config: HeadConfig):
        super().__init__()
        self.linear = nn.Linear(config.input_dim, config.classes)
        nn.init.trunc_normal_(self.linear.weight, std=config.init_std)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x):
        return self.linear(x)


@dataclass
class FinetuneConfig:
    mode: str = "adapter"
    steps: int = 300
    batch_size: int = 32
    lr: float = 1e-2
    weight_decay: float = 0.05
    seed: int = 0
    adapter: AdapterConfig = field(default_factory=AdapterConfig)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        self.adapter.validate()


class Classifier(nn.Module):
    """Encoder plus (optionally) adapters plus the one-layer head."""

    def __init__(self, encoder: ViTEncoder, mode: str, adapter_config: AdapterConfig,
                 seed: int = 0):
        super().__init__()
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        torch.manual_seed(substream_seed(seed, "init", 1))
        self.encoder = encoder
        self.mode = mode
        self.adapter_config = adapter_config
        d = encoder.profile.embed_dim
        self.adapters = None
        head_input = d
        if mode == "adapter":
            adapter_config.validate(d)
            self.adapters = build_adapters(adapter_config, d, encoder.profile.depth)
            if adapter_config.kind == "vanilla_all_layers":
                head_input = d
            else:
                head_input = 2 * d if adapter_config.fusion == "concat" else d
        self.head_config = HeadConfig(input_dim=head_input)
        self.head = LinearHead(self.head_config)
        if mode != "full":
            self.encoder.requires_grad_(False)
        self.to(next(encoder.parameters()).dtype)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def _encode_frozen(self, images):
        with torch.no_grad():
            tokens = self.encoder.embed_full(images)
            z, _ = self.encoder.encode(tokens)
        return z

    def _encode_vanilla_adapters(self, images):
        # frozen blocks interleaved with trainable residual bottlenecks
        token_set = self.encoder.embed_full(images)
        x = token_set.tokens
        for block, adapter in zip(self.encoder.blocks, self.adapters):
            x, _ = block(x)
            f_a, _ = adapter(x)
            x = x + self.adapter_config.vanilla_scale * f_a
        return self.encoder.norm(x), token_set.has_cls

    def uses_frozen_tokens(self) -> bool:
        """True when the trainable path consumes precomputable encoder tokens."""
        return self.mode == "linear_probe" or (
            self.mode == "adapter" and self.adapter_config.kind != "vanilla_all_layers"
        )

    def head_forward(self, tokens: torch.Tensor, has_cls: bool):
        """Trainable path on (possibly cached) frozen encoder tokens."""
        cfg = self.adapter_config
        if self.mode == "linear_probe":
            return self.head(mean_pool(tokens, has_cls)), None
        adapter = self.adapters[0]
        f_a, f_b = adapter(tokens)
        fused = fuse(tokens, f_a, cfg.fusion, has_cls, cfg.vanilla_scale)
        f_p = None
        if cfg.contrastive is not None:
            if adapter.w_lp is not None:
                source = f_b if cfg.projector == "bottleneck" else f_a
                f_p = project_bottleneck(source, adapter.w_lp, has_cls)
            else:
                pooled = mean_pool(f_b, has_cls)
                f_p = pooled / pooled.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return self.head(fused), f_p

    def forward(self, images):
        """Returns (logits, projected contrastive features or None)."""
        if self.mode == "adapter" and self.adapter_config.kind == "vanilla_all_layers":
            x, has_cls = self._encode_vanilla_adapters(images)
            return self.head(mean_pool(x, has_cls)), None
        if self.uses_frozen_tokens():
            z = self._encode_frozen(images)
            return self.head_forward(z.tokens, z.has_cls)
        tokens = self.encoder.embed_full(images)
        z, _ = self.encoder.encode(tokens)
        return self.head(mean_pool(z.tokens, z.has_cls)), None


def backbone_param_hash(encoder: ViTEncoder) -> str:
    digest = hashlib.sha256()
    for name, param in sorted(encoder.state_dict().items()):
        digest.update(name.encode())
        digest.update(param.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def _labels_tensor(samples) -> torch.Tensor:
    values = []
    for sample in samples:
        if sample.label not in LABEL_TO_INT:
            raise ConfigError(f"sample label {sample.label!r} is not real/fake")
        values.append(LABEL_TO_INT[sample.label])
    return torch.tensor(values, dtype=torch.long)


def finetune(backbone, samples, mode: str, config: FinetuneConfig,
             pretrain_config: PretrainConfig | None = None, backbone_path=None) -> dict:
    """Tune on labeled samples; returns the tuned payload (not yet on disk).

    `backbone` is a pre-training checkpoint payload (or path).  In adapter and
    linear-probe modes the encoder is frozen; a parameter hash recorded before
    and after training makes the freeze auditable.
    """
    config = config or FinetuneConfig()
    config.mode = mode
    config.validate()
    payload = backbone if isinstance(backbone, dict) else load_checkpoint(backbone)
    pre_cfg = pretrain_config or restore_config(payload)
    model = restore_model(payload)
    encoder = model.online.encoder

    clf = Classifier(encoder, mode, config.adapter, seed=config.seed)
    images = prepare_images(samples, pre_cfg)
    labels = _labels_tensor(samples)
    pre_hash = backbone_param_hash(clf.encoder)

    # with the backbone frozen, the encoder runs once and the tuning loop
    # trains on cached tokens
    cached = None
    if clf.uses_frozen_tokens():
        with torch.no_grad():
            z = clf._encode_frozen(images)
        cached = (z.tokens, z.has_cls)

    optimizer = torch.optim.AdamW(
        clf.trainable_parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    n = len(samples)
    order = np.array([], dtype=np.int64)
    pass_idx = 0
    train_log = []
    ce = nn.CrossEntropyLoss()
    for step in range(config.steps):
        for group in optimizer.param_groups:  # half-cosine decay to zero
            group["lr"] = config.lr * 0.5 * (1.0 + math.cos(math.pi * step / config.steps))
        if config.batch_size >= n:
            batch = np.arange(n)
        else:
            if order.size < config.batch_size:
                fresh = substream(config.seed, "data", pass_idx).permutation(n)
                order = np.concatenate([order, fresh])
                pass_idx += 1
            batch, order = order[: config.batch_size], order[config.batch_size :]
        if cached is not None:
            logits, f_p = clf.head_forward(cached[0][batch], cached[1])
        else:
            logits, f_p = clf(images[batch])
        loss = ce(logits, labels[batch])
        rac = None
        if mode == "adapter" and config.adapter.contrastive is not None and f_p is not None:
            contrastive = loss_rac if config.adapter.contrastive == "rac" else loss_scl_variant
            rac = contrastive(f_p, labels[batch] == 1, config.adapter.tau_rac)
            loss = loss + config.adapter.lambda_rac * rac
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        train_log.append(
            {
                "step": step + 1,
                "loss": float(loss.detach()),
                "rac": None if rac is None else float(rac.detach()),
            }
        )

    post_hash = backbone_param_hash(clf.encoder)
    if mode != "full" and pre_hash != post_hash:
        raise StateError("frozen backbone changed during tuning")
    return {
        "format": FINETUNE_FORMAT,
        "mode": mode,
        "head": clf.head.state_dict(),
        "head_config": asdict(clf.head_config),
        "adapters": None if clf.adapters is None else clf.adapters.state_dict(),
        "adapter_config": asdict(config.adapter),
        "encoder": clf.encoder.state_dict() if mode == "full" else None,
        "backbone_path": None if backbone_path is None else str(backbone_path),
        "backbone_config_hash": payload.get("config_hash"),
        "pretrain_config": payload.get("config"),
        "config": {**asdict(config), "adapter": asdict(config.adapter)},
        "backbone_frozen_hash": post_hash if mode != "full" else None,
        "train_log": train_log,
    }


def save_finetuned(payload: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_finetuned(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != FINETUNE_FORMAT:
        raise ConfigError(f"not a recognized tuned checkpoint: {path}")
    return payload


def restore_classifier(tuned: dict, backbone: dict | None = None) -> tuple:
    """Rebuild the classifier from a tuned payload (+ backbone for frozen modes)."""
    mode = tuned["mode"]
    if mode == "full":
        pre_cfg = PretrainConfig(**{
            k: tuple(v) if k in ("norm_mean", "norm_std") else v
            for k, v in tuned["pretrain_config"].items()
        })
        encoder = ViTEncoder(PROFILES[pre_cfg.profile], pre_cfg.image_size)
        encoder.to(pre_cfg.torch_dtype)
    else:
        if backbone is None:
            if not tuned.get("backbone_path"):
                raise StateError("tuned checkpoint does not embed or reference a backbone")
            backbone = load_checkpoint(tuned["backbone_path"])
        if tuned.get("backbone_config_hash") and backbone.get("config_hash") != tuned["backbone_config_hash"]:
            raise StateError("backbone checkpoint hash does not match the tuned reference")
        pre_cfg = restore_config(backbone)
        encoder = restore_model(backbone).online.encoder
    adapter_config = AdapterConfig(**tuned["adapter_config"])
    clf = Classifier(encoder, mode, adapter_config)
    if mode == "full":
        clf.encoder.load_state_dict(tuned["encoder"])
    if tuned.get("adapters") is not None:
        clf.adapters.load_state_dict(tuned["adapters"])
    clf.head.load_state_dict(tuned["head"])
    clf.eval()
    return clf, pre_cfg


def predict_scores(clf: Classifier, samples, pre_cfg: PretrainConfig,
                   batch_size: int = 64) -> np.ndarray:
    """Per-frame probability of fake, deterministic under a fixed checkpoint."""
    images = prepare_images(samples, pre_cfg)
    scores = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            logits, _ = clf(images[start : start + batch_size])
            scores.append(torch.softmax(logits, dim=-1)[:, 1])
    return torch.cat(scores).cpu().numpy()


# ---------------------------------------------------------------------------
# Metrics


def _check_binary(labels: np.ndarray):
    if not ((labels == 0) | (labels == 1)).all():
        raise ConfigError("labels must be 0 (real) or 1 (fake)")
    if labels.min() == labels.max():
        raise FsvfmError("metric undefined: needs both classes")


def frame_auc(scores, labels) -> float:
    """ROC AUC by rank statistic; tied scores get midranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _check_binary(labels)
    ranks = stats.rankdata(scores, method="average")
    n_pos = int((labels == 1).sum())
    n_neg = labels.size - n_pos
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def video_auc(scores, labels, group_ids) -> float:
    """Per-group score = mean of its frame scores, then AUC over groups."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    groups = {}
    for score, label, gid in zip(scores, labels, group_ids):
        entry = groups.setdefault(gid, {"scores": [], "label": int(label)})
        if entry["label"] != int(label):
            raise ConfigError(f"group {gid!r} mixes real and fake frames")
        entry["scores"].append(float(score))
    g_scores = np.array([np.mean(v["scores"]) for v in groups.values()])
    g_labels = np.array([v["label"] for v in groups.values()])
    return frame_auc(g_scores, g_labels)


def far_frr(scores, labels, threshold: float):
    """Decision is fake iff score >= threshold (fake = positive class)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _check_binary(labels)
    pred_fake = scores >= threshold
    far = float(pred_fake[labels == 0].mean())
    frr = float((~pred_fake)[labels == 1].mean())
    return far, frr


def hter(scores, labels, threshold: float) -> float:
    far, frr = far_frr(scores, labels, threshold)
    return (far + frr) / 2.0


def eer_threshold(scores, labels):
    """Threshold minimizing |FAR - FRR| over the observed scores (plus an
    above-max sentinel); ties resolve to the lower threshold.  Returns
    (eer, threshold) with eer = (FAR + FRR) / 2 at that threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    candidates = np.append(np.unique(scores), np.inf)
    best = None
    for thr in candidates:
        far, frr = far_frr(scores, labels, thr)
        gap = abs(far - frr)
        if best is None or gap < best[0]:
            best = (gap, thr, (far + frr) / 2.0)
    return best[2], float(best[1])


@dataclass
class EvalResult:
    frame_auc: float
    video_auc: float
    hter: float
    eer: float
    threshold: float
    n_frames: int
    n_videos: int

    def lines(self):
        return [f"{k}={v:.10g}" if isinstance(v, float) else f"{k}={v}"
                for k, v in asdict(self).items()]


def evaluate_scores(scores, labels, group_ids=None, threshold=None) -> EvalResult:
    """Full metric bundle.  When no threshold is supplied, the operating point
    comes from the EER of this very score set (the alternative protocol fixes
    it on a development split and passes it in)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    eer, eer_thr = eer_threshold(scores, labels)
    thr = eer_thr if threshold is None else float(threshold)
    if group_ids is None:
        group_ids = [str(i) for i in range(len(scores))]
    v_auc = video_auc(scores, labels, group_ids)
    result = EvalResult(
        frame_auc=frame_auc(scores, labels),
        video_auc=v_auc,
        hter=hter(scores, labels, thr),
        eer=eer,
        threshold=thr,
        n_frames=int(len(scores)),
        n_videos=int(len(set(group_ids))),
    )
    for name in ("frame_auc", "video_auc", "hter", "eer"):
        value = getattr(result, name)
        if not 0.0 <= value <= 1.0:
            raise FsvfmError(f"{name}={value} escaped [0, 1]")
    return result


def scores_to_lines(sample_ids, group_ids, labels, scores):
    """Scores export records: sample_id<TAB>group_id<TAB>label<TAB>score."""
    lines = []
    for sid, gid, label, score in zip(sample_ids, group_ids, labels, scores):
        lines.append(f"{sid}\t{gid}\t{label}\t{score:.10g}")
    return lines
