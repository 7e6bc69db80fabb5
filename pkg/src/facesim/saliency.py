"""Guided-backpropagation saliency with SmoothGrad averaging."""

from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image

from .net import GuidedReLU, forward_symmetric
from .scores import ALL_CRITERIA
from .seeding import substream

TARGETS = ("a", "b", "both")


class SaliencyError(ValueError):
    pass


@dataclass(frozen=True)
class SaliencyConfig:
    head: str = "MS"
    n_samples: int = 100
    noise_scale: float = 0.15
    target_image: str = "both"
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise SaliencyError("n_samples must be at least 1")
        if self.noise_scale < 0:
            raise SaliencyError("noise_scale must be non-negative")
        if self.target_image not in TARGETS:
            raise SaliencyError(f"target_image must be one of {TARGETS}")


def head_names(model) -> tuple[str, ...]:
    n = model.n_outputs
    names = ALL_CRITERIA[:n] if n <= 5 else tuple(f"H{k + 1}" for k in range(n))
    return (*names, "MS") if n > 1 and "MS" not in names else names


def head_index(model, head: str | int) -> int | None:
    """Output column for `head`; None selects the mean over all heads (MS)."""
    if isinstance(head, int):
        if not 0 <= head < model.n_outputs:
            raise SaliencyError(f"head index {head} out of range [0, {model.n_outputs})")
        return head
    valid = head_names(model)
    if head not in valid:
        raise SaliencyError(f"unknown head {head!r}; valid heads: {', '.join(valid)}")
    if head == "MS" and model.n_outputs > 1:
        return None
    return valid.index(head)


@contextlib.contextmanager
def guided_mode(model):
    relus = [m for m in model.modules() if isinstance(m, GuidedReLU)]
    for m in relus:
        m.guided = True
    try:
        yield model
    finally:
        for m in relus:
            m.guided = False


def reduce_channels(grad: torch.Tensor) -> np.ndarray:
    """(N, C, H, W) gradient to (N, H, W) maps by the largest absolute channel value."""
    return grad.abs().amax(dim=1).detach().cpu().numpy()


def guided_backprop(model, img_a: torch.Tensor, img_b: torch.Tensor, head: str | int = "MS"):
    """Attribution maps (N, H, W) for both inputs from one head's summed output."""
    idx = head_index(model, head)
    model.eval()
    a = img_a.detach().clone().requires_grad_(True)
    b = img_b.detach().clone().requires_grad_(True)
    with guided_mode(model):
        out = forward_symmetric(model, a, b)
        score = out.mean(dim=1) if idx is None else out[:, idx]
        grad_a, grad_b = torch.autograd.grad(score.sum(), (a, b), allow_unused=True)
    grad_a = torch.zeros_like(a) if grad_a is None else grad_a
    grad_b = torch.zeros_like(b) if grad_b is None else grad_b
    return reduce_channels(grad_a), reduce_channels(grad_b)


def smoothgrad(attribution_fn, img_a: torch.Tensor, img_b: torch.Tensor, config: SaliencyConfig):
    """Mean attribution over noisy copies; noise sd is noise_scale times each image's range.

    The running mean is updated in place so that identical repetitions return
    exactly the single-pass result.
    """
    rng = substream(config.seed, "smoothgrad")
    images = (img_a.detach(), img_b.detach())
    sigmas = [
        config.noise_scale * (x.flatten(1).amax(dim=1) - x.flatten(1).amin(dim=1)).view(-1, 1, 1, 1)
        for x in images
    ]
    means = None
    for k in range(1, config.n_samples + 1):
        noisy = []
        for x, sigma in zip(images, sigmas):
            if config.noise_scale == 0:
                noisy.append(x)
                continue
            noise = torch.from_numpy(rng.standard_normal(tuple(x.shape)).astype(np.float32))
            noisy.append(x + sigma * noise)
        maps = [np.asarray(m, dtype=np.float64) for m in attribution_fn(*noisy)]
        if means is None:
            means = maps
        else:
            means = [mean + (m - mean) / k for mean, m in zip(means, maps)]
    return tuple(means)


def saliency_maps(model, img_a, img_b, config: SaliencyConfig) -> dict[str, np.ndarray]:
    """SmoothGrad-averaged guided backprop, keyed by target image ("a" and/or "b")."""
    head_index(model, config.head)
    map_a, map_b = smoothgrad(lambda a, b: guided_backprop(model, a, b, config.head), img_a, img_b, config)
    out = {"a": map_a, "b": map_b}
    return out if config.target_image == "both" else {config.target_image: out[config.target_image]}


def heatmap(values: np.ndarray) -> np.ndarray:
    """(H, W) values to an RGB uint8 heatmap scaled to the map's own maximum."""
    values = np.asarray(values, dtype=np.float64)
    peak = values.max()
    scaled = values / peak if peak > 0 else np.zeros_like(values)
    return (colormaps["inferno"](scaled)[..., :3] * 255).round().astype(np.uint8)


def export_map(out_dir: Path, name: str, values: np.ndarray) -> list[Path]:
    """Write <name>.png (heatmap), <name>.f32 (raw little-endian float32) and <name>.json (shape)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    values = np.asarray(values, dtype="<f4")
    png = out_dir / f"{name}.png"
    raw = out_dir / f"{name}.f32"
    header = out_dir / f"{name}.json"
    Image.fromarray(heatmap(values)).save(png, format="PNG")
    raw.write_bytes(values.tobytes(order="C"))
    header.write_text(json.dumps({"shape": list(values.shape), "dtype": "float32", "byte_order": "little"}) + "\n")
    return [png, raw, header]


def read_map(path_f32: Path) -> np.ndarray:
    path_f32 = Path(path_f32)
    meta = json.loads(path_f32.with_suffix(".json").read_text())
    return np.frombuffer(path_f32.read_bytes(), dtype="<f4").reshape(meta["shape"])
