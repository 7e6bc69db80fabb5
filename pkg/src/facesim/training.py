"""Pair sampling, the multi-task objective, the optimization loop, grid search and probes."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .crops import CropConfig, FullImageDetector, augment_train
from .evaluation import eval_images, predict_pairs, sample_eval_pairs
from .metrics import mae, metric_report
from .net import NetConfig, Stem, build, save_checkpoint
from .scores import ALL_CRITERIA, MatchPair, ScoreVector
from .seeding import substream, torch_seed

log = logging.getLogger(__name__)

SELECTION_MODES = ("best_val_pcc", "last")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    lr: float = 3e-3
    batch_size: int = 32
    lr_grid: tuple[float, ...] = (3e-4, 1e-3, 3e-3)
    bs_grid: tuple[int, ...] = (16, 32)
    grid_epochs: int = 20
    tail_gamma: float = 1.0
    same_sex_fraction: float = 0.1
    self_identity_fraction: float = 0.0
    patience: int = 30
    selection: str = "best_val_pcc"
    val_pairs_per_user: int = 20
    seed: int = 0
    deterministic: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.grid_epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr must be positive and batch_size at least 1")
        if not self.lr_grid or not self.bs_grid:
            raise ValueError("grids must be non-empty")
        if self.tail_gamma < 0:
            raise ValueError("tail_gamma must be non-negative")
        fractions = (self.same_sex_fraction, self.self_identity_fraction)
        if min(fractions) < 0 or max(fractions) > 1 or sum(fractions) > 1:
            raise ValueError("same_sex_fraction and self_identity_fraction must lie in [0, 1] and sum to at most 1")
        if self.selection not in SELECTION_MODES:
            raise ValueError(f"selection must be one of {SELECTION_MODES}")
        if self.patience < 0:
            raise ValueError("patience must be non-negative (0 disables early stopping)")


def tail_weights(ms: np.ndarray, median: float, gamma: float) -> np.ndarray:
    w = np.abs(np.asarray(ms, dtype=np.float64) - median) ** gamma
    if not np.any(w > 0):
        return np.ones_like(w)
    return w


def sample_epoch(view, config: TrainConfig, rng: np.random.Generator, median_ms: float) -> list[MatchPair]:
    """One pair per user of the split, drawn as described by the config.

    Each user first rolls which kind of pair it contributes: self/identity with
    probability `self_identity_fraction`, same-sex with `same_sex_fraction`,
    otherwise a hetero partner weighted towards the score tails.
    """
    if len(view) < 2 or not view.hetero.any():
        raise TrainingError(f"split {view.name!r} has no eligible pairs to train on")
    perfect = ScoreVector.perfect()
    rho, ss = config.self_identity_fraction, config.same_sex_fraction
    pairs = []
    for i, user in enumerate(view.users):
        roll = rng.random()
        image_a = user.image_ids[rng.integers(len(user.image_ids))]
        if roll < rho:
            others = [im for im in user.image_ids if im != image_a]
            if others and rng.random() < 0.5:
                image_b = others[rng.integers(len(others))]
                kind = "self"
            else:
                image_b, kind = image_a, "identity"
            pairs.append(MatchPair(user.user_id, user.user_id, image_a, image_b, perfect, kind))
            continue
        kind = "same_sex" if roll < rho + ss else "normal"
        cand = np.flatnonzero(view.same_sex[i] if kind == "same_sex" else view.hetero[i])
        if cand.size == 0 and kind == "same_sex":
            kind = "normal"
            cand = np.flatnonzero(view.hetero[i])
        if cand.size == 0:
            log.warning("user %s has no eligible partner in %s; skipped", user.user_id, view.name)
            continue
        w = tail_weights(view.overall[i, cand], median_ms, config.tail_gamma)
        j = int(rng.choice(cand, p=w / w.sum()))
        partner = view.users[j]
        pairs.append(
            MatchPair(
                user.user_id,
                partner.user_id,
                image_a,
                partner.image_ids[rng.integers(len(partner.image_ids))],
                ScoreVector(tuple(view.raw[i, j]), tuple(view.adjusted[i, j])),
                kind,
            )
        )
    members = set(view.index)
    if any(p.user_a not in members or p.user_b not in members for p in pairs):
        raise TrainingError("sampled pair crosses the split boundary")
    return pairs


def mtl_loss(preds: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over heads of the per-head batch mean squared error."""
    if preds.shape != targets.shape:
        raise ValueError(f"shape mismatch: {tuple(preds.shape)} vs {tuple(targets.shape)}")
    per_head = ((targets - preds) ** 2).mean(dim=0)
    return per_head.mean()


def augmented_batch(data, image_ids, crop: CropConfig, seed: int, epoch: int, offset: int, side: int):
    crops = []
    for k, image_id in enumerate(image_ids):
        rng = substream(seed, "augment", epoch, offset + k, side)
        img = data.image(image_id)
        box = data.boxes[image_id] if crop.use_boxes else FullImageDetector().detect(img)
        crops.append(augment_train(img, box, crop, rng))
    return torch.from_numpy(np.stack(crops).transpose(0, 3, 1, 2).copy())


@dataclass
class TrainResult:
    model: nn.Module
    history: list[dict]
    best_epoch: int
    best_val_pcc: float
    notes: list[str] = field(default_factory=list)


HISTORY_FIELDS = (
    ["epoch", "train_loss", "n_pairs"]
    + [f"val_mae_{c}" for c in ALL_CRITERIA]
    + [f"val_pcc_{c}" for c in ALL_CRITERIA]
    + ["config_hash"]
)


def write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else repr(v) if isinstance(v, float) else v)
                             for k, v in row.items()})


def configure_torch(deterministic: bool, workers: int | None = None) -> None:
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    elif workers:
        torch.set_num_threads(workers)


def _validation_row(model, data, val_pairs, m_c, no_box: bool) -> dict:
    preds = predict_pairs(model, data, val_pairs, m_c, no_box)
    targets = np.array([p.target.adjusted for p in val_pairs])
    report = metric_report(preds, targets)
    row = {}
    for c in ALL_CRITERIA:
        row[f"val_mae_{c}"] = report.rows[c].mae
        row[f"val_pcc_{c}"] = report.rows[c].pcc
    return row


def train(data, net_config: NetConfig, config: TrainConfig, crop: CropConfig | None = None, *,
          m_c: float = 0.85, init_state: dict | None = None, run_dir: Path | None = None,
          meta: dict | None = None, workers: int | None = None) -> TrainResult:
    """Fit a model on the training split, selecting by validation MS correlation.

    With `run_dir`, the selected checkpoint and history.csv are written there.
    """
    crop = crop or CropConfig(out_size=net_config.in_size)
    if crop.out_size != net_config.in_size:
        raise ValueError("crop out_size must equal the network input size")
    configure_torch(config.deterministic, workers)
    torch.manual_seed(torch_seed(config.seed, "init"))
    model = build(net_config)
    if init_state is not None:
        model.load_state_dict(init_state)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    torch.manual_seed(torch_seed(config.seed, "dropout"))

    view = data.split("train")
    val_pairs = sample_eval_pairs(data, "val", config.seed, config.val_pairs_per_user)
    median = data.manifest.median_ms
    history = []
    best_pcc, best_epoch, best_state = -math.inf, 0, None
    stale = 0
    for epoch in range(1, config.epochs + 1):
        pairs = sample_epoch(view, config, substream(config.seed, "pairs", epoch), median)
        order = substream(config.seed, "order", epoch).permutation(len(pairs))
        pairs = [pairs[k] for k in order]
        model.train()
        total, count = 0.0, 0
        for start in range(0, len(pairs), config.batch_size):
            batch = pairs[start : start + config.batch_size]
            if len(batch) < 2:
                continue  # batch norm needs more than one sample per channel
            img_a = augmented_batch(data, [p.image_a for p in batch], crop, config.seed, epoch, start, 0)
            img_b = augmented_batch(data, [p.image_b for p in batch], crop, config.seed, epoch, start, 1)
            # an identity match is one image twice, so both streams get the same crop
            twins = [k for k, p in enumerate(batch) if p.kind == "identity"]
            if twins:
                img_b[twins] = img_a[twins]
            targets = torch.tensor([p.target.adjusted for p in batch], dtype=torch.float32)
            preds = model(img_a, img_b)
            loss = mtl_loss(preds, targets[:, : preds.shape[1]])
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, batch starting at {start} "
                    f"(lr={config.lr}, batch_size={config.batch_size})"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
            count += len(batch)
        row = {"epoch": epoch, "train_loss": total / max(count, 1), "n_pairs": len(pairs)}
        row.update(_validation_row(model, data, val_pairs, m_c, not crop.use_boxes))
        row["config_hash"] = (meta or {}).get("config_hash", "")
        history.append(row)
        val_pcc = row["val_pcc_MS"]
        score = val_pcc if math.isfinite(val_pcc) else -math.inf
        log.info("epoch %d loss %.5f val MS PCC %.4f", epoch, row["train_loss"], val_pcc)
        if config.selection == "last" or score > best_pcc or best_state is None:
            best_pcc, best_epoch = score, epoch
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    model.load_state_dict(best_state)
    model.eval()
    result = TrainResult(model, history, best_epoch, best_pcc)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_history(run_dir / "history.csv", history)
        sidecar = dict(meta or {})
        sidecar.update(
            {
                "best_epoch": best_epoch,
                "seed": config.seed,
                "best_val_pcc_MS": best_pcc if math.isfinite(best_pcc) else None,
                "train_config": _plain(asdict(config)),
                "crop_config": _plain(asdict(crop)),
                "m_c": m_c,
            }
        )
        save_checkpoint(run_dir, model, sidecar)
    return result


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class GridPoint:
    lr: float
    batch_size: int
    val_pcc: float = math.nan
    val_mae: float = math.nan
    error: str = ""


def grid_search(data, net_config: NetConfig, config: TrainConfig, crop: CropConfig | None = None,
                **train_kwargs) -> tuple[TrainConfig, list[GridPoint]]:
    """Short-budget run per (lr, batch size); best validation MS PCC wins.

    Ties go to the lower validation MS MAE, then the lower learning rate.
    """
    points = []
    for lr in config.lr_grid:
        for bs in config.bs_grid:
            point = GridPoint(lr, bs)
            trial = replace(config, lr=lr, batch_size=bs, epochs=config.grid_epochs)
            try:
                result = train(data, net_config, trial, crop, **train_kwargs)
            except TrainingError as exc:
                point.error = str(exc)
            else:
                best = result.history[result.best_epoch - 1]
                point.val_pcc = best["val_pcc_MS"]
                point.val_mae = best["val_mae_MS"]
            points.append(point)
    ok = [p for p in points if not p.error and math.isfinite(p.val_pcc)]
    if not ok:
        failures = "; ".join(f"lr={p.lr:g} bs={p.batch_size}: {p.error or 'no finite validation PCC'}" for p in points)
        raise TrainingError(f"every grid point failed: {failures}")
    best = min(ok, key=lambda p: (-p.val_pcc, p.val_mae, p.lr))
    return replace(config, lr=best.lr, batch_size=best.batch_size), points


PROBE_TASKS = ("age_regression", "sex_classification")


class ProbeNet(nn.Module):
    """Single-path network: one stem, pooled features, one output."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.config = cfg
        self.stem = Stem(cfg)
        self.norm = nn.BatchNorm2d(self.stem.out_channels)
        self.fc = nn.Linear(self.stem.out_channels, 1)

    def forward(self, x):
        x = torch.relu(self.norm(self.stem(x)))
        return self.fc(x.mean(dim=(2, 3))).squeeze(1)


def _probe_labels(users, task: str, age_mean: float, age_sd: float) -> np.ndarray:
    if task == "sex_classification":
        return np.array([1.0 if u.sex == "female" else 0.0 for u in users], dtype=np.float32)
    return np.array([(u.age - age_mean) / age_sd for u in users], dtype=np.float32)


def probe_train(data, task: str, net_config: NetConfig, config: TrainConfig,
                crop: CropConfig | None = None, m_c: float = 0.85, eval_split: str = "test") -> dict:
    """Single-task sanity check on age or sex labels; metrics on `eval_split` images."""
    if task not in PROBE_TASKS:
        raise ValueError(f"task must be one of {PROBE_TASKS}, got {task!r}")
    crop = crop or CropConfig(out_size=net_config.in_size)
    configure_torch(config.deterministic)
    torch.manual_seed(torch_seed(config.seed, "probe-init"))
    model = ProbeNet(net_config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    train_users = data.split("train").users
    ages = np.array([u.age for u in train_users], dtype=np.float64)
    age_mean, age_sd = float(ages.mean()), float(ages.std() or 1.0)
    items = [(im, u) for u in train_users for im in u.image_ids]
    labels = _probe_labels([u for _, u in items], task, age_mean, age_sd)
    loss_fn = nn.BCEWithLogitsLoss() if task == "sex_classification" else nn.MSELoss()

    for epoch in range(1, config.epochs + 1):
        order = substream(config.seed, "probe-order", epoch).permutation(len(items))
        model.train()
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            x = augmented_batch(data, [items[k][0] for k in idx], crop, config.seed, epoch, start, 2)
            loss = loss_fn(model(x), torch.from_numpy(labels[idx]))
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite probe loss at epoch {epoch}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

    test_users = data.split(eval_split).users
    test_items = [(im, u) for u in test_users for im in u.image_ids]
    x = eval_images(data, [im for im, _ in test_items], m_c, net_config.in_size, no_box=not crop.use_boxes)
    model.eval()
    with torch.no_grad():
        out = model(x).numpy().astype(np.float64)
    if task == "sex_classification":
        truth = _probe_labels([u for _, u in test_items], task, age_mean, age_sd)
        return {"task": task, "n_images": len(test_items), "accuracy": float(np.mean((out > 0) == (truth > 0.5))),
                "baseline_accuracy": float(max(truth.mean(), 1 - truth.mean()))}
    true_age = np.array([u.age for _, u in test_items], dtype=np.float64)
    pred_age = out * age_sd + age_mean
    return {"task": task, "n_images": len(test_items), "mae_years": mae(pred_age, true_age),
            "baseline_mae_years": mae(np.full_like(true_age, age_mean), true_age)}

