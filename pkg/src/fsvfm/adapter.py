"""Bottleneck adapters for efficient tuning on a frozen backbone.

The last-block adapter adds a down-projection, ReLU, up-projection and (in
its full form) a linear projector on the bottleneck features whose pooled,
normalized output feeds a real-anchor contrastive loss: real faces are pulled
together and pushed away from fakes, while distances among fakes are left
unconstrained.  The listed variants reproduce the ablation grid
(all-layer vanilla adapters, last-layer-only, supervised-contrastive,
projector-on-output, no-projector).
"""

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import mean_pool
from .errors import ConfigError

__all__ = [
    "ADAPTER_KINDS",
    "AdapterConfig",
    "AdapterModule",
    "build_adapters",
    "adapter_forward",
    "project_bottleneck",
    "fuse",
    "loss_rac",
    "loss_scl_variant",
    "count_trainable",
    "head_param_count",
]

ADAPTER_KINDS = (
    "vanilla_all_layers",
    "variant1_last",
    "variant2_scl",
    "variant3_proj_fa",
    "variant4_no_proj",
    "fs_adapter",
)

# which contrastive loss each kind applies to the projected features
_CONTRASTIVE = {
    "vanilla_all_layers": None,
    "variant1_last": None,
    "variant2_scl": "scl",
    "variant3_proj_fa": "rac",
    "variant4_no_proj": "rac",
    "fs_adapter": "rac",
}

# where the linear projector sits, if anywhere
_PROJECTOR = {
    "vanilla_all_layers": None,
    "variant1_last": None,
    "variant2_scl": "bottleneck",
    "variant3_proj_fa": "adapter_out",
    "variant4_no_proj": None,
    "fs_adapter": "bottleneck",
}


@dataclass
class AdapterConfig:
    kind: str = "fs_adapter"
    bottleneck: int | None = None  # default: encoder width / 4
    fusion: str = "concat"
    tau_rac: float = 0.07
    lambda_rac: float = 0.1
    # the residual scale is a fixed hyperparameter, not a parameter, so the
    # trainable count stays exactly 2*d*b per adapter instance
    vanilla_scale: float = 0.1

    def validate(self, d: int | None = None):
        if self.kind not in ADAPTER_KINDS:
            raise ConfigError(f"unknown adapter kind {self.kind!r}")
        if self.fusion not in ("concat", "residual"):
            raise ConfigError("fusion must be concat or residual")
        if self.kind == "fs_adapter" and self.fusion != "concat":
            raise ConfigError("fs_adapter commits to concat fusion")
        if self.tau_rac <= 0:
            raise ConfigError("tau_rac must be positive")
        if d is not None and self.resolve_bottleneck(d) >= d:
            raise ConfigError("bottleneck width must be smaller than the encoder width")

    def resolve_bottleneck(self, d: int) -> int:
        return self.bottleneck if self.bottleneck else d // 4

    @property
    def contrastive(self) -> str | None:
        return _CONTRASTIVE[self.kind]

    @property
    def projector(self) -> str | None:
        return _PROJECTOR[self.kind]


class AdapterModule(nn.Module):
    """One bottleneck instance; bias-free so the parameter count is exact.

    Residual insertion starts as an identity map (zero up-projection); the
    concat-fused last-block form starts live so its pooled output carries
    gradient signal from the first step.
    """

    def __init__(self, d: int, b: int, projector: str | None = None,
                 residual: bool = False):
        super().__init__()
        self.w_down = nn.Linear(d, b, bias=False)
        self.w_up = nn.Linear(b, d, bias=False)
        if projector == "bottleneck":
            self.w_lp = nn.Linear(b, b, bias=False)
        elif projector == "adapter_out":
            self.w_lp = nn.Linear(d, d, bias=False)
        elif projector is None:
            self.w_lp = None
        else:
            raise ConfigError(f"unknown projector placement {projector!r}")
        nn.init.xavier_uniform_(self.w_down.weight)
        if residual:
            nn.init.zeros_(self.w_up.weight)
        else:
            nn.init.xavier_uniform_(self.w_up.weight)
        if self.w_lp is not None:
            nn.init.xavier_uniform_(self.w_lp.weight)

    def forward(self, f_e: torch.Tensor):
        f_b = torch.relu(self.w_down(f_e))
        return self.w_up(f_b), f_b


def build_adapters(config: AdapterConfig, d: int, layers: int) -> nn.ModuleList:
    """All trainable adapter instances for the configured kind."""
    config.validate(d)
    b = config.resolve_bottleneck(d)
    if config.kind == "vanilla_all_layers":
        return nn.ModuleList(AdapterModule(d, b, residual=True) for _ in range(layers))
    return nn.ModuleList([AdapterModule(d, b, projector=config.projector)])


def adapter_forward(f_e: torch.Tensor, adapter: AdapterModule):
    """Tokenwise bottleneck: returns (f_a, f_b), both B x N x {d, b}."""
    return adapter(f_e)


def project_bottleneck(f_b: torch.Tensor, w_lp: nn.Linear, has_cls: bool = True) -> torch.Tensor:
    """Tokenwise linear map, mean pool over non-CLS tokens, l2-normalize."""
    projected = mean_pool(w_lp(f_b), has_cls)
    return projected / projected.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def fuse(f_e: torch.Tensor, f_a: torch.Tensor, fusion: str,
         has_cls: bool = True, scale: float = 1.0) -> torch.Tensor:
    """Head input: pooled concat (2d) or scaled residual sum (d)."""
    if fusion == "concat":
        return torch.cat([mean_pool(f_e, has_cls), mean_pool(f_a, has_cls)], dim=-1)
    if fusion == "residual":
        return mean_pool(f_e + scale * f_a, has_cls)
    raise ConfigError(f"unknown fusion {fusion!r}")


def _anchored_contrastive(f_p: torch.Tensor, positives_of, negatives_of, tau: float) -> torch.Tensor:
    sims = f_p @ f_p.T / tau
    terms = []
    for i, (pos, neg) in enumerate(zip(positives_of, negatives_of)):
        if len(pos) == 0:
            continue  # anchors without positives are skipped, not zero-padded
        denom = torch.logsumexp(sims[i, pos + neg], dim=0)
        terms.append((denom - sims[i, pos]).mean())
    if not terms:
        return f_p.new_zeros(())
    return torch.stack(terms).mean()


def loss_rac(f_p: torch.Tensor, labels_fake, tau: float) -> torch.Tensor:
    """Real-anchor contrastive loss over unit-norm projected features.

    Anchors are real samples only; positives are the other reals, negatives
    are every fake.  Fake-fake distances never enter the loss.
    """
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    fake = torch.as_tensor(labels_fake, dtype=torch.bool).reshape(-1)
    if fake.shape[0] != f_p.shape[0]:
        raise ConfigError("labels and features disagree on batch size")
    reals = [i for i in range(len(fake)) if not fake[i]]
    fakes = [i for i in range(len(fake)) if fake[i]]
    positives, negatives = [], []
    for i in range(len(fake)):
        if fake[i]:
            positives.append([])
            negatives.append([])
        else:
            positives.append([j for j in reals if j != i])
            negatives.append(fakes)
    return _anchored_contrastive(f_p, positives, negatives, tau)


def loss_scl_variant(f_p: torch.Tensor, labels_fake, tau: float) -> torch.Tensor:
    """Supervised-contrastive form: fake anchors with fake positives also
    contribute, additionally pulling fakes toward each other."""
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    fake = torch.as_tensor(labels_fake, dtype=torch.bool).reshape(-1)
    positives, negatives = [], []
    for i in range(len(fake)):
        positives.append([j for j in range(len(fake)) if j != i and fake[j] == fake[i]])
        negatives.append([j for j in range(len(fake)) if fake[j] != fake[i]])
    return _anchored_contrastive(f_p, positives, negatives, tau)


def head_param_count(input_dim: int, classes: int = 2) -> int:
    return classes * input_dim + classes


def count_trainable(config: AdapterConfig, d: int, layers: int,
                    head: bool = False, classes: int = 2) -> int:
    """Exact trainable-parameter count for the adapter stack (+ task head)."""
    config.validate(d)
    b = config.resolve_bottleneck(d)
    if config.kind == "vanilla_all_layers":
        count = layers * 2 * d * b
        head_input = d
    else:
        count = 2 * d * b
        if config.projector == "bottleneck":
            count += b * b
        elif config.projector == "adapter_out":
            count += d * d
        head_input = 2 * d if config.fusion == "concat" else d
    if head:
        count += head_param_count(head_input, classes)
    return count
