"""Siamese multi-task CNN.

Two images pass through one shared stem; the feature maps are concatenated
along channels and processed by a joint trunk of ``D - c`` blocks, followed by
one branch per criterion holding the last ``c`` blocks, global average pooling
and a scalar output. ``c = 0`` is hard parameter sharing: branches differ only
in their normalization and output layer.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

BACKBONES = ("dense_block", "residual_block")


class NetConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    backbone: str = "dense_block"
    stem_blocks: int = 2
    post_merge_blocks: int = 3
    c: int = 1
    n_heads: int = 5
    init_channels: int = 16
    growth: int = 12
    layers_per_block: int = 3
    dropout_p: float = 0.2
    in_size: int = 64
    individual: bool = False

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise NetConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if not 0 <= self.c <= self.post_merge_blocks:
            raise NetConfigError(
                f"c={self.c} must lie in [0, post_merge_blocks={self.post_merge_blocks}]"
            )
        if self.n_heads < 1:
            raise NetConfigError("n_heads must be at least 1")
        if self.stem_blocks < 1:
            raise NetConfigError("stem_blocks must be at least 1")
        if not 0 <= self.dropout_p < 1:
            raise NetConfigError("dropout_p must lie in [0, 1)")
        if self.in_size % (2 ** (self.stem_blocks + 3)):
            raise NetConfigError("in_size must be divisible by 2**(stem_blocks + 3)")


class GuidedReLU(nn.Module):
    """ReLU that can switch to the guided-backpropagation backward rule."""

    def __init__(self):
        super().__init__()
        self.guided = False

    def forward(self, x):
        if self.guided:
            return _GuidedReluFn.apply(x)
        return F.relu(x)


class _GuidedReluFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        out = x.clamp(min=0)
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        (out,) = ctx.saved_tensors
        return grad * (out > 0) * (grad > 0)


class DenseLayer(nn.Module):
    def __init__(self, in_ch: int, growth: int):
        super().__init__()
        self.norm = nn.BatchNorm2d(in_ch)
        self.act = GuidedReLU()
        self.conv = nn.Conv2d(in_ch, growth, 3, padding=1, bias=False)

    def forward(self, x):
        return torch.cat([x, self.conv(self.act(self.norm(x)))], dim=1)


class Transition(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, pool: bool):
        super().__init__()
        self.norm = nn.BatchNorm2d(in_ch)
        self.act = GuidedReLU()
        self.conv = nn.Conv2d(in_ch, out_ch, 1, bias=False)
        self.pool = nn.AvgPool2d(2) if pool else nn.Identity()

    def forward(self, x):
        return self.pool(self.conv(self.act(self.norm(x))))


class DenseStage(nn.Module):
    """Dense block, dropout, then a compressing transition."""

    def __init__(self, in_ch: int, cfg: NetConfig, pool: bool):
        super().__init__()
        layers = []
        ch = in_ch
        for _ in range(cfg.layers_per_block):
            layers.append(DenseLayer(ch, cfg.growth))
            ch += cfg.growth
        self.block = nn.Sequential(*layers)
        self.drop = nn.Dropout(cfg.dropout_p)
        self.out_channels = ch // 2
        self.transition = Transition(ch, self.out_channels, pool)

    def forward(self, x):
        return self.transition(self.drop(self.block(x)))


class ResidualStage(nn.Module):
    """Basic residual block with a projection shortcut, dropout, optional pooling."""

    def __init__(self, in_ch: int, cfg: NetConfig, pool: bool):
        super().__init__()
        out_ch = in_ch + cfg.growth * cfg.layers_per_block // 2
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False)
        self.norm1 = nn.BatchNorm2d(out_ch)
        self.act1 = GuidedReLU()
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1, bias=False)
        self.act2 = GuidedReLU()
        self.drop = nn.Dropout(cfg.dropout_p)
        self.pool = nn.AvgPool2d(2) if pool else nn.Identity()
        self.out_channels = out_ch

    def forward(self, x):
        y = self.norm2(self.conv2(self.act1(self.norm1(self.conv1(x)))))
        return self.pool(self.drop(self.act2(y + self.shortcut(x))))


def _stage(cfg: NetConfig, in_ch: int, pool: bool) -> nn.Module:
    cls = DenseStage if cfg.backbone == "dense_block" else ResidualStage
    return cls(in_ch, cfg, pool)


class Stem(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.conv = nn.Conv2d(3, cfg.init_channels, 3, stride=2, padding=1, bias=False)
        self.pool = nn.MaxPool2d(2)
        stages = []
        ch = cfg.init_channels
        for _ in range(cfg.stem_blocks):
            stages.append(_stage(cfg, ch, pool=True))
            ch = stages[-1].out_channels
        self.stages = nn.Sequential(*stages)
        self.out_channels = ch

    def forward(self, x):
        return self.stages(self.pool(self.conv(x)))


class Branch(nn.Module):
    """Task-specific blocks plus the scalar output for one criterion."""

    def __init__(self, cfg: NetConfig, in_ch: int, first_index: int):
        super().__init__()
        stages = []
        ch = in_ch
        for i in range(first_index, cfg.post_merge_blocks):
            stages.append(_stage(cfg, ch, pool=i == 0))
            ch = stages[-1].out_channels
        self.stages = nn.Sequential(*stages)
        self.norm = nn.BatchNorm2d(ch)
        self.act = GuidedReLU()
        self.fc = nn.Linear(ch, 1)

    def forward(self, x):
        x = self.act(self.norm(self.stages(x)))
        return self.fc(x.mean(dim=(2, 3)))


class SiameseMTLNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.config = cfg
        self.stem = Stem(cfg)
        ch = 2 * self.stem.out_channels
        trunk = []
        n_joint = cfg.post_merge_blocks - cfg.c
        for i in range(n_joint):
            trunk.append(_stage(cfg, ch, pool=i == 0))
            ch = trunk[-1].out_channels
        self.trunk = nn.Sequential(*trunk)
        self.branches = nn.ModuleList(Branch(cfg, ch, n_joint) for _ in range(cfg.n_heads))
        _init_weights(self)

    @property
    def n_outputs(self) -> int:
        return self.config.n_heads

    def embed(self, x):
        return self.stem(x)

    def head(self, feat_a, feat_b):
        joint = self.trunk(torch.cat([feat_a, feat_b], dim=1))
        return torch.cat([branch(joint) for branch in self.branches], dim=1)

    def forward(self, img_a, img_b):
        _check_pair(self.config, img_a, img_b)
        # one stem call keeps batch statistics shared between the two streams
        feats = self.embed(torch.cat([img_a, img_b], dim=0))
        feat_a, feat_b = feats.split(len(img_a), dim=0)
        return self.head(feat_a, feat_b)


class IndividualNets(nn.Module):
    """Separate single-output networks, one per criterion (no parameter sharing)."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.config = cfg
        single = replace(cfg, n_heads=1, individual=False)
        self.nets = nn.ModuleList(SiameseMTLNet(single) for _ in range(cfg.n_heads))

    @property
    def n_outputs(self) -> int:
        return self.config.n_heads

    def embed(self, x):
        return [net.embed(x) for net in self.nets]

    def head(self, feat_a, feat_b):
        return torch.cat([net.head(fa, fb) for net, fa, fb in zip(self.nets, feat_a, feat_b)], dim=1)

    def forward(self, img_a, img_b):
        return torch.cat([net(img_a, img_b) for net in self.nets], dim=1)


def _check_pair(cfg: NetConfig, img_a, img_b):
    expected = (3, cfg.in_size, cfg.in_size)
    if img_a.shape != img_b.shape or tuple(img_a.shape[1:]) != expected:
        raise ValueError(
            f"expected two (N, {expected[0]}, {expected[1]}, {expected[2]}) batches, "
            f"got {tuple(img_a.shape)} and {tuple(img_b.shape)}"
        )


def _init_weights(model: nn.Module):
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)


def build(cfg: NetConfig) -> nn.Module:
    return IndividualNets(cfg) if cfg.individual else SiameseMTLNet(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def forward(model, img_a, img_b):
    return model(img_a, img_b)


def _map_features(fn, *feats):
    if isinstance(feats[0], list):
        return [fn(*parts) for parts in zip(*feats)]
    return fn(*feats)


def content_keys(x: torch.Tensor) -> list[str]:
    """Per-sample digest of tensor contents, the default canonical ordering key."""
    arr = x.detach().cpu().contiguous().numpy()
    return [hashlib.sha1(arr[i].tobytes()).hexdigest() for i in range(len(arr))]


def symmetric_head(model, feat_a, feat_b, keys_a, keys_b):
    """Mean of both input orders, with each pair put in canonical key order first."""
    swap = torch.tensor([ka > kb for ka, kb in zip(keys_a, keys_b)], dtype=torch.bool)

    def pick(fa, fb):
        mask = swap.view(-1, *([1] * (fa.dim() - 1)))
        return torch.where(mask, fb, fa), torch.where(mask, fa, fb)

    picked = _map_features(pick, feat_a, feat_b)
    if isinstance(picked, list):
        first = [p[0] for p in picked]
        second = [p[1] for p in picked]
    else:
        first, second = picked
    return 0.5 * (model.head(first, second) + model.head(second, first))


def forward_symmetric(model, img_a, img_b, keys_a=None, keys_b=None):
    """Swap-invariant prediction; stems run once per image and are reused for both orders."""
    _check_pair(model.config, img_a, img_b)
    keys_a = content_keys(img_a) if keys_a is None else list(keys_a)
    keys_b = content_keys(img_b) if keys_b is None else list(keys_b)
    return symmetric_head(model, model.embed(img_a), model.embed(img_b), keys_a, keys_b)


def branch_parameters(model, head: int) -> list[nn.Parameter]:
    """Parameters that belong exclusively to one output path."""
    if isinstance(model, IndividualNets):
        return list(model.nets[head].parameters())
    return list(model.branches[head].parameters())


def shared_parameters(model) -> dict[str, list[nn.Parameter]]:
    if isinstance(model, IndividualNets):
        return {"stem": [], "trunk": []}
    return {"stem": list(model.stem.parameters()), "trunk": list(model.trunk.parameters())}


CHECKPOINT_WEIGHTS = "checkpoint.pt"
CHECKPOINT_META = "checkpoint.json"


def save_checkpoint(run_dir: Path, model: nn.Module, meta: dict) -> dict:
    """Write weights plus a JSON sidecar {net_config, weights_hash, ...meta}."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    weights = run_dir / CHECKPOINT_WEIGHTS
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    torch.save(state, weights)
    sidecar = dict(meta)
    sidecar["net_config"] = asdict(model.config)
    sidecar["weights_hash"] = state_hash(state)
    sidecar["n_parameters"] = count_parameters(model)
    with open(run_dir / CHECKPOINT_META, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return sidecar


def load_checkpoint(run_dir: Path) -> tuple[nn.Module, dict]:
    run_dir = Path(run_dir)
    meta_path = run_dir / CHECKPOINT_META
    if not meta_path.is_file():
        raise FileNotFoundError(f"no checkpoint in {run_dir}")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    model = build(NetConfig(**meta["net_config"]))
    state = torch.load(run_dir / CHECKPOINT_WEIGHTS, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    if state_hash(model.state_dict()) != meta["weights_hash"]:
        raise ValueError(f"weights in {run_dir} do not match the recorded hash")
    model.eval()
    return model, meta


def state_hash(state: dict) -> str:
    digest = hashlib.sha256()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        digest.update(name.encode("utf-8"))
        digest.update(str(tensor.dtype).encode("utf-8"))
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()[:16]
