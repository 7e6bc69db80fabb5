"""Dataset manifest (line-delimited JSON) and the in-memory face store."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .crops import BoundingBox
from .scores import (
    NormalizationParams,
    UserRecord,
    eligibility_matrix,
)

MANIFEST_NAME = "manifest.jsonl"
MANIFEST_FORMAT = "facesim-manifest/1"
SPLITS = ("train", "val", "test")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def normalization_hash(params: NormalizationParams) -> str:
    return content_hash(params.to_records())


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    user_id: str
    path: str
    box: BoundingBox


@dataclass
class DatasetManifest:
    world: dict
    split_fractions: tuple[float, float, float]
    config_hash: str
    users: list[UserRecord]
    images: list[ImageRecord]
    normalization: NormalizationParams
    median_ms: float

    @property
    def norm_hash(self) -> str:
        return normalization_hash(self.normalization)

    def records(self) -> list[dict]:
        header = {
            "record": "header",
            "format": MANIFEST_FORMAT,
            "world": self.world,
            "split_fractions": list(self.split_fractions),
            "config_hash": self.config_hash,
            "n_users": len(self.users),
            "n_images": len(self.images),
        }
        norm = {
            "record": "normalization",
            "params": self.normalization.to_records(),
            "norm_hash": self.norm_hash,
            "median_ms": self.median_ms,
            "config_hash": self.config_hash,
        }
        out = [header, norm]
        for u in self.users:
            out.append(
                {
                    "record": "user",
                    "id": u.user_id,
                    "sex": u.sex,
                    "age": u.age,
                    "traits": list(u.traits),
                    "image_ids": list(u.image_ids),
                    "split": u.split,
                }
            )
        for im in self.images:
            out.append(
                {
                    "record": "image",
                    "id": im.image_id,
                    "user_id": im.user_id,
                    "path": im.path,
                    "box": im.box.to_list(),
                }
            )
        return out

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(canonical_json(rec) + "\n")
        return path

    @classmethod
    def read(cls, data_dir: Path) -> "DatasetManifest":
        path = Path(data_dir) / MANIFEST_NAME
        if not path.is_file():
            raise FileNotFoundError(f"no {MANIFEST_NAME} in {data_dir}")
        header = norm = None
        users, images = [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                kind = rec["record"]
                if kind == "header":
                    header = rec
                elif kind == "normalization":
                    norm = rec
                elif kind == "user":
                    users.append(
                        UserRecord(
                            user_id=rec["id"],
                            sex=rec["sex"],
                            age=int(rec["age"]),
                            traits=tuple(rec["traits"]),
                            image_ids=tuple(rec["image_ids"]),
                            split=rec["split"],
                        )
                    )
                elif kind == "image":
                    images.append(
                        ImageRecord(rec["id"], rec["user_id"], rec["path"], BoundingBox(*rec["box"]))
                    )
                else:
                    raise ValueError(f"unknown manifest record {kind!r}")
        if header is None or norm is None:
            raise ValueError(f"{path} lacks header or normalization records")
        if header.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"unsupported manifest format {header.get('format')!r}")
        return cls(
            world=header["world"],
            split_fractions=tuple(header["split_fractions"]),
            config_hash=header["config_hash"],
            users=users,
            images=images,
            normalization=NormalizationParams.from_records(norm["params"]),
            median_ms=float(norm["median_ms"]),
        )


def save_png(path: Path, pixels: np.ndarray) -> None:
    Image.fromarray(to_uint8(pixels)).save(path, format="PNG", optimize=False)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(pixels, 0.0, 1.0) * 255).astype(np.uint8)


class FaceData:
    """Manifest plus decoded images, with per-split score lookups.

    Images are held as uint8 (the PNG content) and handed out as float32 in [0, 1].
    """

    def __init__(self, manifest: DatasetManifest, pixels: dict[str, np.ndarray]):
        self.manifest = manifest
        self._pixels = pixels
        self.users = {u.user_id: u for u in manifest.users}
        self.boxes = {im.image_id: im.box for im in manifest.images}
        self.image_owner = {im.image_id: im.user_id for im in manifest.images}
        self._split_cache: dict[str, SplitView] = {}

    @classmethod
    def load(cls, data_dir: Path) -> "FaceData":
        data_dir = Path(data_dir)
        manifest = DatasetManifest.read(data_dir)
        pixels = {}
        for im in manifest.images:
            with Image.open(data_dir / im.path) as img:
                pixels[im.image_id] = np.asarray(img.convert("RGB"), dtype=np.uint8)
        return cls(manifest, pixels)

    @property
    def normalization(self) -> NormalizationParams:
        return self.manifest.normalization

    def image(self, image_id: str) -> np.ndarray:
        return self._pixels[image_id].astype(np.float32) / 255.0

    def split(self, name: str) -> "SplitView":
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        if name not in self._split_cache:
            users = [u for u in self.manifest.users if u.split == name]
            self._split_cache[name] = SplitView(name, users, self.normalization)
        return self._split_cache[name]


class SplitView:
    """Users of one split with precomputed eligibility and oracle scores."""

    def __init__(self, name: str, users: list[UserRecord], params: NormalizationParams):
        from .world import oracle_raw_matrix

        self.name = name
        self.users = users
        self.index = {u.user_id: i for i, u in enumerate(users)}
        sexes = [u.sex for u in users]
        ages = [u.age for u in users]
        self.hetero = eligibility_matrix(sexes, ages, "hetero")
        self.same_sex = eligibility_matrix(sexes, ages, "same_sex")
        traits = np.array([u.traits for u in users], dtype=np.float64)
        self.raw = oracle_raw_matrix(traits, traits)
        self.adjusted = params.adjust(self.raw)
        self.overall = self.adjusted.mean(axis=-1)

    def __len__(self) -> int:
        return len(self.users)

    def target(self, user_a: str, user_b: str) -> np.ndarray:
        """Adjusted M1..M5 for two users of this split."""
        return self.adjusted[self.index[user_a], self.index[user_b]]

    def hetero_pairs(self) -> np.ndarray:
        """Unordered eligible hetero pairs (i < j) as an (n, 2) index array."""
        i, j = np.nonzero(np.triu(self.hetero, k=1))
        return np.stack([i, j], axis=1)


def world_dict(config) -> dict:
    out = asdict(config)
    for k, v in out.items():
        if isinstance(v, tuple):
            out[k] = list(v)
    return out

