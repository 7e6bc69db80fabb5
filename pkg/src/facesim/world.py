"""Synthetic stand-in for a dating dataset.

Users carry latent trait vectors (one block of `d` traits per criterion, values
in [0, 1]). Matching scores are scaled L1 distances between trait blocks, and
each user is rendered as a procedural face whose attributes are affine in the
traits, so appearance carries a controllable amount of score signal.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import ndtr

from .crops import BoundingBox
from .scores import N_CRITERIA, RAW_MAX, UserRecord

# named random substreams, mixed into every SeedSequence
STREAM_USERS = 1
STREAM_TRAITS = 2
STREAM_USER_NOISE = 3
STREAM_IMAGE = 4
STREAM_SPLIT = 5


@dataclass(frozen=True)
class WorldConfig:
    n_users: int = 600
    d_traits_per_criterion: int = 4
    images_per_user: tuple[int, int] = (1, 3)
    signal_strength: float = 1.0
    nuisance_strength: float = 1.0
    image_size: int = 96
    age_range: tuple[int, int] = (18, 70)
    age_mean: float = 42.0
    age_sd: float = 11.0
    coupling: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.n_users < 4:
            raise ValueError("n_users must be at least 4")
        if not 0 <= self.signal_strength <= 1:
            raise ValueError("signal_strength must lie in [0, 1]")
        if self.nuisance_strength < 0:
            raise ValueError("nuisance_strength must be non-negative")
        if not 0 <= self.coupling < 1:
            raise ValueError("coupling must lie in [0, 1)")
        lo, hi = self.images_per_user
        if not 1 <= lo <= hi:
            raise ValueError("images_per_user must be a range with lower bound >= 1")
        if self.age_range[0] >= self.age_range[1]:
            raise ValueError("age_range must be increasing")
        if self.d_traits_per_criterion < 1:
            raise ValueError("d_traits_per_criterion must be positive")
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")

    @property
    def n_traits(self) -> int:
        return N_CRITERIA * self.d_traits_per_criterion


@dataclass
class RenderedImage:
    pixels: np.ndarray
    true_box: BoundingBox
    nuisance: dict = field(default_factory=dict)


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def _user_key(user_id: str) -> int:
    return zlib.crc32(user_id.encode("utf-8"))


def _abs_diff_corr(rho: float, n: int = 200_000) -> float:
    """Correlation of |U1a - U1b| and |U2a - U2b| under a Gaussian copula with correlation rho."""
    rng = _rng(20240917, n)
    z = rng.standard_normal((4, n))
    s = math.sqrt(rho)
    c = math.sqrt(1 - rho)
    shared_a, shared_b = z[0], z[1]
    rest = rng.standard_normal((4, n))
    x = np.abs(ndtr(s * shared_a + c * rest[0]) - ndtr(s * shared_b + c * rest[1]))
    y = np.abs(ndtr(s * shared_a + c * rest[2]) - ndtr(s * shared_b + c * rest[3]))
    return float(np.corrcoef(x, y)[0, 1])


@lru_cache(maxsize=32)
def copula_rho(coupling: float) -> float:
    """Latent trait correlation whose induced criterion-score correlation equals `coupling`."""
    if coupling <= 0:
        return 0.0
    lo, hi = 0.0, 0.999
    for _ in range(20):
        mid = 0.5 * (lo + hi)
        if _abs_diff_corr(mid) < coupling:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _truncated_normal_ints(rng, n, mean, sd, lo, hi) -> np.ndarray:
    out = np.empty(n, dtype=np.int64)
    filled = 0
    while filled < n:
        draw = np.rint(rng.normal(mean, sd, size=2 * n)).astype(np.int64)
        draw = draw[(draw >= lo) & (draw <= hi)][: n - filled]
        out[filled : filled + len(draw)] = draw
        filled += len(draw)
    return out


def gen_users(config: WorldConfig) -> list[UserRecord]:
    """Users with balanced sexes, bell-shaped ages and block-coupled traits."""
    n = config.n_users
    rng = _rng(config.seed, STREAM_USERS)
    sexes = np.array(["female"] * ((n + 1) // 2) + ["male"] * (n // 2))
    sexes = sexes[rng.permutation(n)]
    ages = _truncated_normal_ints(rng, n, config.age_mean, config.age_sd, *config.age_range)
    lo, hi = config.images_per_user
    counts = rng.integers(lo, hi + 1, size=n)

    # one shared latent vector per user couples the criterion blocks
    d = config.d_traits_per_criterion
    rho = copula_rho(round(config.coupling, 6))
    trng = _rng(config.seed, STREAM_TRAITS)
    shared = trng.standard_normal((n, 1, d))
    own = trng.standard_normal((n, N_CRITERIA, d))
    latent = math.sqrt(rho) * shared + math.sqrt(1 - rho) * own
    traits = ndtr(latent).reshape(n, N_CRITERIA * d)

    users = []
    for i in range(n):
        uid = f"u{i:05d}"
        users.append(
            UserRecord(
                user_id=uid,
                sex=str(sexes[i]),
                age=int(ages[i]),
                traits=tuple(float(t) for t in traits[i]),
                image_ids=tuple(f"{uid}_{k}" for k in range(int(counts[i]))),
            )
        )
    return users


def trait_blocks(traits, d: int) -> np.ndarray:
    traits = np.asarray(traits, dtype=np.float64)
    return traits.reshape(traits.shape[:-1] + (N_CRITERIA, d))


def oracle_raw_scores(a: UserRecord, b: UserRecord) -> np.ndarray:
    """Per-criterion raw distance in [0, 5]: 5 * L1(block_a - block_b) / block diameter."""
    if len(a.traits) != len(b.traits) or len(a.traits) % N_CRITERIA:
        raise ValueError("users come from different worlds")
    d = len(a.traits) // N_CRITERIA
    diff = np.abs(trait_blocks(a.traits, d) - trait_blocks(b.traits, d))
    # support is [0, 1]^d, whose L1 diameter is d
    return RAW_MAX * diff.sum(axis=-1) / d


def oracle_raw_matrix(traits_a, traits_b) -> np.ndarray:
    """Raw scores for all (i, j) between two trait matrices; shape (n_a, n_b, 5)."""
    traits_a = np.asarray(traits_a, dtype=np.float64)
    traits_b = np.asarray(traits_b, dtype=np.float64)
    d = traits_a.shape[1] // N_CRITERIA
    blocks_a = trait_blocks(traits_a, d)
    blocks_b = trait_blocks(traits_b, d)
    out = np.empty((len(blocks_a), len(blocks_b), N_CRITERIA))
    for c in range(N_CRITERIA):
        diff = np.abs(blocks_a[:, None, c, :] - blocks_b[None, :, c, :])
        out[..., c] = RAW_MAX * diff.sum(axis=-1) / d
    return out


# Rendering attributes, each normalized to [0, 1]. Slot j is driven by trait
# j (mod n_traits); with the default 4 traits per criterion the four slots of a
# row below read the same latent direction across criteria. All of them sit
# inside the face oval; hair, face outline and background are per-user noise.
FACE_ATTRIBUTES = (
    "skin_lightness", "iris_hue", "brow_darkness", "lip_hue",
    "skin_redness", "iris_darkness", "brow_thickness", "mouth_width",
    "blush", "eye_size", "brow_tilt", "nose_shade",
    "lip_darkness", "eye_spacing", "lip_thickness", "nose_length",
    "nose_width", "eye_height", "pupil_size", "mouth_height",
)
N_ATTRIBUTES = len(FACE_ATTRIBUTES)
# order in which slots become trait-driven as signal_strength grows
_SIGNAL_ORDER = tuple(
    j for k in range(4) for j in range(k, N_ATTRIBUTES, 4)
)


def face_parameters(user: UserRecord, config: WorldConfig) -> np.ndarray:
    """Identity-level face attributes in [0, 1].

    A fraction signal_strength of the slots copies traits (an affine map); the
    remaining slots are per-user noise drawn independently of the traits.
    """
    traits = np.asarray(user.traits, dtype=np.float64)
    noise = _rng(config.seed, STREAM_USER_NOISE, _user_key(user.user_id)).uniform(
        size=N_ATTRIBUTES
    )
    n_signal = int(round(config.signal_strength * N_ATTRIBUTES))
    params = noise.copy()
    for j in _SIGNAL_ORDER[:n_signal]:
        params[j] = traits[j % len(traits)]
    return params


def _user_style(user: UserRecord, config: WorldConfig) -> dict:
    """Trait-independent per-user appearance: background, clothing, hair, face outline."""
    rng = _rng(config.seed, STREAM_USER_NOISE, _user_key(user.user_id), 1)
    return {
        "bg_color": rng.uniform(0.15, 0.85, size=3),
        "bg_angle": rng.uniform(0, math.pi),
        "bg_freq": rng.uniform(2.0, 6.0),
        "bg_phase": rng.uniform(0, 2 * math.pi),
        "bg_amp": rng.uniform(0.03, 0.12),
        "shirt_color": rng.uniform(0.1, 0.9, size=3),
        "face_width": rng.uniform(),
        "hair_hue": rng.uniform(),
        "hair_lightness": rng.uniform(),
    }


def _soft(sd: np.ndarray) -> np.ndarray:
    """Anti-aliased coverage from a signed distance in pixels."""
    return np.clip(0.5 - sd, 0.0, 1.0)


def _ellipse(u, v, cu, cv, au, av):
    r = np.sqrt(((u - cu) / au) ** 2 + ((v - cv) / av) ** 2)
    return _soft((r - 1.0) * min(au, av))


def _paint(canvas, alpha, color):
    alpha = alpha[..., None]
    canvas *= 1 - alpha
    canvas += alpha * np.asarray(color, dtype=np.float64)


def _hsv(h, s, v):
    from matplotlib.colors import hsv_to_rgb

    return hsv_to_rgb(np.array([h % 1.0, s, v]))


def render_face(user: UserRecord, image_index: int, config: WorldConfig) -> RenderedImage:
    if not 0 <= image_index < len(user.image_ids):
        raise IndexError(f"user {user.user_id} has no image {image_index}")
    size = config.image_size
    p = dict(zip(FACE_ATTRIBUTES, face_parameters(user, config)))
    style = _user_style(user, config)
    male = user.sex == "male"
    age01 = (user.age - config.age_range[0]) / (config.age_range[1] - config.age_range[0])

    ns = config.nuisance_strength
    rng = _rng(config.seed, STREAM_IMAGE, _user_key(user.user_id), image_index)
    draws = rng.uniform(-1, 1, size=9)
    nuisance = {
        # framing: where and how large the face sits in the photo
        "dx": float(ns * 0.10 * size * draws[0]),
        "dy": float(ns * 0.10 * size * draws[1]),
        "rotation": float(ns * math.radians(10) * draws[2]),
        "scale": float(math.exp(ns * 0.25 * draws[3])),
        "gain": float(1 + ns * 0.15 * draws[4]),
        "light_slope": float(ns * 0.15 * draws[5]),
        "light_angle": float(math.pi * draws[6]),
        "expression": float(ns * draws[7]),
        "bg_shift": float(ns * 0.08 * draws[8]),
    }
    pixel_noise = ns * 0.01 * rng.standard_normal((size, size, 3))

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    canvas = np.empty((size, size, 3))

    # background: user-level color with a soft stripe texture, no trait content
    phase = (xs * math.cos(style["bg_angle"]) + ys * math.sin(style["bg_angle"])) / size
    stripes = style["bg_amp"] * np.sin(2 * math.pi * style["bg_freq"] * phase + style["bg_phase"])
    canvas[:] = np.clip(style["bg_color"] + nuisance["bg_shift"], 0, 1)
    canvas += stripes[..., None]

    # face-aligned coordinates (pixels), origin at the face center
    s = size * nuisance["scale"]
    cx = 0.5 * size + nuisance["dx"]
    cy = 0.47 * size + nuisance["dy"]
    cos_r, sin_r = math.cos(nuisance["rotation"]), math.sin(nuisance["rotation"])
    u = cos_r * (xs - cx) + sin_r * (ys - cy)
    v = -sin_r * (xs - cx) + cos_r * (ys - cy)

    face_a = s * (0.18 + 0.05 * style["face_width"]) * (1.06 if male else 1.0)
    face_b = s * 0.25

    skin = (0.45 + 0.45 * p["skin_lightness"]) * np.array(
        [1.0, 0.80 - 0.12 * p["skin_redness"], 0.66 - 0.22 * p["skin_redness"]]
    )
    gray = 0.6 * max(0.0, age01 - 0.45)
    hair = _hsv(0.02 + 0.11 * style["hair_hue"], 0.65 * (1 - gray), 0.15 + 0.65 * style["hair_lightness"])
    hair = (1 - gray) * hair + gray * np.array([0.75, 0.75, 0.75])

    # torso and long hair behind the head
    _paint(canvas, _ellipse(u, v, 0, 0.47 * s, 0.36 * s, 0.2 * s), style["shirt_color"])
    if not male:
        _paint(canvas, _ellipse(u, v, 0, 0.05 * s, face_a * 1.35, face_b * 1.25), hair)
    _paint(canvas, _ellipse(u, v, 0, -0.04 * s, face_a * 1.1, face_b * 1.02), hair)
    _paint(canvas, _ellipse(u, v, 0, 0, face_a, face_b), skin)

    # cheeks
    blush = 0.35 * p["blush"] * np.exp(
        -(((np.abs(u) - 0.6 * face_a) ** 2 + (v - 0.06 * s) ** 2) / (2 * (0.04 * s) ** 2))
    )
    _paint(canvas, blush * _ellipse(u, v, 0, 0, face_a, face_b), [0.85, 0.3, 0.35])
    if male:
        stubble = 0.18 * np.clip((v - 0.06 * s) / (0.05 * s), 0, 1)
        _paint(canvas, stubble * _ellipse(u, v, 0, 0, face_a, face_b), [0.2, 0.17, 0.15])

    # forehead lines with age
    for line_v in (-0.165, -0.14, -0.115):
        line = _soft(np.abs(v - line_v * s) - 0.4) * (np.abs(u) < 0.5 * face_a)
        _paint(canvas, 0.3 * age01 * line, skin * 0.6)

    # hair fringe over the top of the face
    fringe = _ellipse(u, v, 0, -0.04 * s, face_a * 1.1, face_b * 1.02) * _soft(v + 0.19 * s)
    _paint(canvas, fringe, hair)

    # eyes
    eye_v = (-0.04 + 0.04 * (p["eye_height"] - 0.5)) * s
    eye_u = (0.065 + 0.035 * p["eye_spacing"]) * s
    eye_a = (0.03 + 0.018 * p["eye_size"]) * s
    eye_b = 0.55 * eye_a
    iris = _hsv(0.05 + 0.6 * p["iris_hue"], 0.7, 0.25 + 0.6 * (1 - p["iris_darkness"]))
    brow = (0.08 + 0.55 * (1 - p["brow_darkness"])) * np.array([0.75, 0.6, 0.5])
    tilt = math.radians(30) * (p["brow_tilt"] - 0.5)
    brow_half = 0.012 * s + 0.016 * s * p["brow_thickness"]
    for side in (-1, 1):
        _paint(canvas, _ellipse(u, v, side * eye_u, eye_v, eye_a, eye_b), [0.95, 0.95, 0.93])
        _paint(canvas, _ellipse(u, v, side * eye_u, eye_v, 0.9 * eye_b, 0.9 * eye_b), iris)
        pupil = (0.3 + 0.3 * p["pupil_size"]) * eye_b
        _paint(canvas, _ellipse(u, v, side * eye_u, eye_v, pupil, pupil), [0.05] * 3)
        # brow: a thin rotated ellipse above each eye, tilt mirrored across the midline
        bu, bv = u - side * eye_u, v - (eye_v - eye_b - 0.035 * s)
        ang = side * tilt
        ru = math.cos(ang) * bu + math.sin(ang) * bv
        rv = -math.sin(ang) * bu + math.cos(ang) * bv
        _paint(canvas, _ellipse(ru, rv, 0, 0, 0.065 * s, 0.5 * brow_half), brow)

    # nose
    nose_len = (0.05 + 0.05 * p["nose_length"]) * s
    nose_w = (0.016 + 0.018 * p["nose_width"]) * s
    _paint(canvas, 0.7 * _ellipse(u, v, 0, eye_v + 0.5 * nose_len + 0.01 * s, nose_w, 0.5 * nose_len),
           skin * (0.62 + 0.3 * p["nose_shade"]))

    # mouth: a curved band whose bend is the per-image expression
    mouth_v = (0.125 + 0.04 * (p["mouth_height"] - 0.5)) * s
    mouth_half = (0.045 + 0.045 * p["mouth_width"]) * s
    bend = (0.25 + 0.6 * nuisance["expression"]) / s * 1.5
    lip = _hsv(0.94 + 0.1 * p["lip_hue"], 0.55, 0.85 - 0.45 * p["lip_darkness"])
    centerline = mouth_v - bend * u**2
    lip_half = (0.012 + 0.014 * p["lip_thickness"]) * s
    band = _soft(np.abs(v - centerline) - lip_half) * _soft(np.abs(u) - mouth_half)
    _paint(canvas, band, lip)

    # illumination and sensor noise
    grad = nuisance["light_slope"] * (
        (xs / size - 0.5) * math.cos(nuisance["light_angle"])
        + (ys / size - 0.5) * math.sin(nuisance["light_angle"])
    )
    canvas *= (nuisance["gain"] + grad)[..., None]
    canvas += pixel_noise
    pixels = np.clip(canvas, 0.0, 1.0).astype(np.float32)

    # square detector box spanning the head height; it follows framing but no facial attribute
    box = BoundingBox(cx - face_b, cy - face_b, 2 * face_b, 2 * face_b).clamped(size, size)
    return RenderedImage(pixels=pixels, true_box=box, nuisance=nuisance)


class DatasetError(ValueError):
    pass


def _split_sizes(n: int, fractions) -> list[int]:
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1) > 1e-9:
        raise DatasetError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return [n_train, n_val, n - n_train - n_val]


def build_dataset(config: WorldConfig, split_fractions=(0.7, 0.15, 0.15), out_dir=None,
                  config_hash: str | None = None):
    """Generate users and images, split users disjointly, fit normalization on train.

    Returns a FaceData; when `out_dir` is given, PNGs and manifest.jsonl are written there.
    """
    from pathlib import Path

    from .dataset import (
        DatasetManifest, FaceData, ImageRecord, SPLITS, content_hash, save_png, to_uint8, world_dict,
    )
    from .scores import eligibility_matrix, fit_normalization

    sizes = _split_sizes(config.n_users, split_fractions)
    users = gen_users(config)
    order = _rng(config.seed, STREAM_SPLIT).permutation(len(users))
    split_of = {}
    start = 0
    for name, size in zip(SPLITS, sizes):
        for i in order[start : start + size]:
            split_of[users[i].user_id] = name
        start += size
    users = [
        UserRecord(u.user_id, u.sex, u.age, u.traits, u.image_ids, split_of[u.user_id])
        for u in users
    ]

    for name in SPLITS:
        members = [u for u in users if u.split == name]
        if len(members) < 2 or not eligibility_matrix(
            [u.sex for u in members], [u.age for u in members], "hetero"
        ).any():
            raise DatasetError(f"split {name!r} ({len(members)} users) contains no eligible pair")

    train = [u for u in users if u.split == "train"]
    traits = np.array([u.traits for u in train])
    elig = eligibility_matrix([u.sex for u in train], [u.age for u in train], "hetero")
    i, j = np.nonzero(np.triu(elig, k=1))
    raw = oracle_raw_matrix(traits, traits)[i, j]
    params = fit_normalization(raw)
    median_ms = float(np.median(params.adjust(raw).mean(axis=1)))

    world = world_dict(config)
    fractions = tuple(float(f) for f in split_fractions)
    if config_hash is None:
        config_hash = content_hash({"world": world, "split_fractions": list(fractions)})

    pixels = {}
    images = []
    for u in users:
        for k, image_id in enumerate(u.image_ids):
            rendered = render_face(u, k, config)
            pixels[image_id] = to_uint8(rendered.pixels)
            images.append(ImageRecord(image_id, u.user_id, f"images/{image_id}.png", rendered.true_box))

    manifest = DatasetManifest(
        world=world,
        split_fractions=fractions,
        config_hash=config_hash,
        users=users,
        images=images,
        normalization=params,
        median_ms=median_ms,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        for im in images:
            save_png(out_dir / im.path, pixels[im.image_id] / 255.0)
        manifest.write(out_dir)
    return FaceData(manifest, pixels)
