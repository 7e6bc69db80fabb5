"""Evaluation protocols: metric reports, zoom sweep, self/identity matching, pair variation."""

from __future__ import annotations

import itertools
import logging
from collections import defaultdict

import numpy as np
import torch

from .crops import FullImageDetector, eval_crop
from .metrics import metric_report
from .net import symmetric_head
from .scores import ALL_CRITERIA, MatchPair, ScoreVector, criterion_correlation
from .seeding import substream

log = logging.getLogger(__name__)


class EvaluationError(RuntimeError):
    pass


def sample_eval_pairs(data, split: str, seed: int, pairs_per_user: int = 20) -> list[MatchPair]:
    """Hetero test pairs drawn from the full score distribution.

    Each user picks up to `pairs_per_user` eligible partners uniformly; pairs
    picked from both ends are kept once. Images are chosen uniformly per pair.
    """
    view = data.split(split)
    rng = substream(seed, f"eval-pairs/{split}")
    chosen = set()
    for i in range(len(view)):
        cand = np.flatnonzero(view.hetero[i])
        if cand.size == 0:
            continue
        k = min(pairs_per_user, cand.size)
        for j in rng.choice(cand, size=k, replace=False):
            chosen.add((min(i, int(j)), max(i, int(j))))
    if not chosen:
        raise EvaluationError(f"split {split!r} has no eligible pairs")
    pairs = []
    for i, j in sorted(chosen):
        ua, ub = view.users[i], view.users[j]
        pairs.append(
            MatchPair(
                user_a=ua.user_id,
                user_b=ub.user_id,
                image_a=ua.image_ids[rng.integers(len(ua.image_ids))],
                image_b=ub.image_ids[rng.integers(len(ub.image_ids))],
                target=ScoreVector(tuple(view.raw[i, j]), tuple(view.adjusted[i, j])),
            )
        )
    return pairs


def eval_images(data, image_ids, m_c: float, out_size: int, no_box: bool = False) -> torch.Tensor:
    crops = []
    for image_id in image_ids:
        img = data.image(image_id)
        box = FullImageDetector().detect(img) if no_box else data.boxes[image_id]
        crops.append(eval_crop(img, box, 1.0 if no_box else m_c, out_size))
    return torch.from_numpy(np.stack(crops).transpose(0, 3, 1, 2).copy())


def _index_features(feats, idx):
    if isinstance(feats, list):
        return [f[idx] for f in feats]
    return feats[idx]


def _cat_features(chunks):
    if isinstance(chunks[0], list):
        return [torch.cat(parts) for parts in zip(*chunks)]
    return torch.cat(chunks)


@torch.no_grad()
def predict_pairs(model, data, pairs, m_c: float = 0.85, no_box: bool = False,
                  batch_size: int = 256, clamp: bool = True) -> np.ndarray:
    """(N, K) swap-invariant predictions; each image's stem runs once.

    Heads are unbounded regressors, so reported predictions are clamped to the
    target range [0, 1] unless `clamp` is False.
    """
    model.eval()
    out_size = model.config.in_size
    image_ids = sorted({p.image_a for p in pairs} | {p.image_b for p in pairs})
    slot = {im: i for i, im in enumerate(image_ids)}
    chunks = []
    for start in range(0, len(image_ids), batch_size):
        batch = eval_images(data, image_ids[start : start + batch_size], m_c, out_size, no_box)
        chunks.append(model.embed(batch))
    feats = _cat_features(chunks)
    preds = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        ia = torch.tensor([slot[p.image_a] for p in chunk])
        ib = torch.tensor([slot[p.image_b] for p in chunk])
        preds.append(
            symmetric_head(
                model,
                _index_features(feats, ia),
                _index_features(feats, ib),
                [p.image_a for p in chunk],
                [p.image_b for p in chunk],
            )
        )
    out = torch.cat(preds).numpy().astype(np.float64)
    return np.clip(out, 0.0, 1.0) if clamp else out


def pair_targets(pairs) -> np.ndarray:
    return np.array([p.target.adjusted for p in pairs], dtype=np.float64)


def evaluate(model, data, split: str = "test", m_c: float = 0.85, pairs=None, *, seed: int = 0,
             pairs_per_user: int = 20, no_box: bool = False, label: str = "",
             config_hash: str = ""):
    """Metric report for one split at one zoom. Returns (report, predictions, targets)."""
    if pairs is None:
        pairs = sample_eval_pairs(data, split, seed, pairs_per_user)
    if not pairs:
        raise EvaluationError("no eligible pairs to evaluate")
    preds = predict_pairs(model, data, pairs, m_c, no_box)
    targets = pair_targets(pairs)
    report = metric_report(
        preds, targets, label=label or ("no-box" if no_box else f"m_c={m_c:g}"),
        m_c=None if no_box else m_c, config_hash=config_hash,
    )
    return report, preds, targets


def zoom_sweep(model, data, split: str, m_c_list, *, include_no_box: bool = True, no_box_model=None,
               pairs=None, seed: int = 0, pairs_per_user: int = 20, config_hash: str = ""):
    """One report per zoom value, plus the full-image (no detection) setting.

    The no-box row uses `no_box_model` when given, typically a model trained on
    full images; otherwise it shows `model` itself applied to full frames.
    """
    if any(m <= 0 for m in m_c_list):
        raise ValueError("zoom values must be positive")
    if pairs is None:
        pairs = sample_eval_pairs(data, split, seed, pairs_per_user)
    reports = [
        evaluate(model, data, split, m, pairs, config_hash=config_hash)[0] for m in m_c_list
    ]
    if include_no_box:
        full = model if no_box_model is None else no_box_model
        reports.append(evaluate(full, data, split, 1.0, pairs, no_box=True, config_hash=config_hash)[0])
    return reports


def self_identity_pairs(data, split: str):
    """Identity pairs (one image twice) and self pairs (two images of one user)."""
    identity, self_pairs = [], []
    perfect = ScoreVector.perfect()
    for user in data.split(split).users:
        ids = user.image_ids
        identity.append(MatchPair(user.user_id, user.user_id, ids[0], ids[0], perfect, "identity"))
        for a, b in itertools.combinations(ids, 2):
            self_pairs.append(MatchPair(user.user_id, user.user_id, a, b, perfect, "self"))
    return identity, self_pairs


def self_identity_eval(model, data, split: str = "test", m_c: float = 0.85, no_box: bool = False) -> dict:
    """MAE per criterion against the perfect score for identity and self matches."""
    identity, self_pairs = self_identity_pairs(data, split)
    out = {}
    for name, pairs in (("identity", identity), ("self", self_pairs)):
        if not pairs:
            log.warning("no users with two or more images in %s; self matching skipped", split)
            continue
        preds = predict_pairs(model, data, pairs, m_c, no_box)
        preds = np.column_stack([preds, preds.mean(axis=1)])
        out[name] = {
            "n_pairs": len(pairs),
            "mae": {c: float(np.mean(np.abs(1.0 - preds[:, k]))) for k, c in enumerate(ALL_CRITERIA)},
        }
    return out


def _image_pair_sets(user_a, user_b):
    """Image combinations for one user pair: (distinct, all)."""
    ia, ib = user_a.image_ids, user_b.image_ids
    distinct = list(zip(ia, ib))  # k-th image with k-th image, every image used once
    every = list(itertools.product(ia, ib))
    return distinct, every


def pair_variation(model, data, split: str = "test", m_c: float = 0.85, pairs=None, *,
                   seed: int = 0, pairs_per_user: int = 20, no_box: bool = False) -> list[dict]:
    """Mean absolute prediction difference across image pairs of the same two users.

    Rows are grouped by mode ("distinct" or "all") and by how many image pairs
    the user pair offers; user pairs with a single image combination are skipped.
    """
    if pairs is None:
        pairs = sample_eval_pairs(data, split, seed, pairs_per_user)
    jobs = []
    for pair in pairs:
        ua, ub = data.users[pair.user_a], data.users[pair.user_b]
        for mode, combos in zip(("distinct", "all"), _image_pair_sets(ua, ub)):
            if len(combos) >= 2:
                jobs.append((mode, combos, pair))
    if not jobs:
        return []
    flat = [
        MatchPair(p.user_a, p.user_b, a, b, p.target, p.kind)
        for _, combos, p in jobs
        for a, b in combos
    ]
    preds = predict_pairs(model, data, flat, m_c, no_box)
    preds = np.column_stack([preds, preds.mean(axis=1)])
    groups = defaultdict(list)
    pos = 0
    for mode, combos, _ in jobs:
        block = preds[pos : pos + len(combos)]
        pos += len(combos)
        diffs = [np.abs(block[i] - block[j]) for i, j in itertools.combinations(range(len(block)), 2)]
        groups[(mode, len(combos))].append(np.mean(diffs, axis=0))
    rows = []
    for (mode, count) in sorted(groups, key=lambda key: (key[0] != "distinct", key[1])):
        values = np.mean(groups[(mode, count)], axis=0)
        row = {"mode": mode, "image_pairs": count, "n_user_pairs": len(groups[(mode, count)])}
        row.update({c: float(v) for c, v in zip(ALL_CRITERIA, values)})
        rows.append(row)
    return rows


def dataset_criterion_correlation(data) -> np.ndarray:
    """Criterion correlation over all eligible hetero pairs within every split."""
    scores = []
    for split in ("train", "val", "test"):
        view = data.split(split)
        idx = view.hetero_pairs()
        scores.append(view.adjusted[idx[:, 0], idx[:, 1]])
    return criterion_correlation(np.concatenate(scores))

