"""Seeded synthetic cloth-changing dataset, PK sampling and on-disk format.

Each image is a sum of an identity pattern (head and leg bands), an outfit
pattern (torso band), a per-camera colour tint and Gaussian noise. The two
signal strengths are the difficulty dial: identity-only data is trivially
separable, clothing-only data carries no identity information across outfits.

On disk a dataset is ``manifest.json`` plus ``images.f32le``, a flat
little-endian float32 blob of row-major H x W x 3 images.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from .errors import BlobLengthError, ContractError, ManifestError, VersionMismatchError

FORMAT_NAME = "sci-reid-dataset"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "images.f32le"
PRESETS = ("ltcc", "prcc")
SPLITS = ("train", "query", "gallery")


@dataclass
class SynthConfig:
    num_pids: int = 8
    outfits_per_pid: int = 3
    cams: int = 3
    images_per_group: int = 4
    H: int = 32
    W: int = 16
    id_signal_strength: float = 0.6
    clo_signal_strength: float = 0.8
    noise_sigma: float = 0.3
    num_train_pids: int = 4
    preset: str = "ltcc"
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_pids", "outfits_per_pid", "cams", "images_per_group", "H", "W", "num_train_pids"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("id_signal_strength", "clo_signal_strength"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.noise_sigma < 0:
            raise ContractError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.num_train_pids >= self.num_pids:
            raise ContractError(
                f"num_train_pids must leave held-out identities (got {self.num_train_pids} of {self.num_pids})"
            )
        if self.H < 4:
            raise ContractError(f"H must be >= 4 for the body bands, got {self.H}")
        if self.preset not in PRESETS:
            raise ContractError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.preset == "prcc" and (self.outfits_per_pid != 2 or self.cams < 2):
            raise ContractError("preset 'prcc' needs outfits_per_pid == 2 and cams >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class Dataset:
    images: np.ndarray
    pids: np.ndarray
    clothes_ids: np.ndarray
    camera_ids: np.ndarray
    splits: np.ndarray
    config: Dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.images.dtype == other.images.dtype
            and self.images.shape == other.images.shape
            and self.images.tobytes() == other.images.tobytes()
            and np.array_equal(self.pids, other.pids)
            and np.array_equal(self.clothes_ids, other.clothes_ids)
            and np.array_equal(self.camera_ids, other.camera_ids)
            and np.array_equal(self.splits, other.splits)
            and self.config == other.config
        )

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def subset(self, split: str) -> "Dataset":
        idx = self.indices(split)
        return Dataset(self.images[idx], self.pids[idx], self.clothes_ids[idx],
                       self.camera_ids[idx], self.splits[idx], dict(self.config))

    def counts(self) -> Dict[str, int]:
        out = {"images": len(self), "pids": len(np.unique(self.pids)),
               "clothes": len(np.unique(self.clothes_ids)), "cameras": len(np.unique(self.camera_ids))}
        for s in SPLITS:
            out[s] = int((self.splits == s).sum())
        return out


def _band_rows(H: int):
    head = slice(0, H // 4)
    torso = slice(H // 4, (5 * H) // 8)
    legs = slice((5 * H) // 8, H)
    return head, torso, legs


def _outfit_for(cfg: SynthConfig, outfit: int, cam: int) -> bool:
    if cfg.preset == "ltcc":
        return True
    # prcc: every camera but the last shares outfit 0, the last sees outfit 1
    return outfit == (1 if cam == cfg.cams - 1 else 0)


def _split_for(cfg: SynthConfig, pid: int, cam: int, k: int) -> str:
    if pid < cfg.num_train_pids:
        return "train"
    if cfg.preset == "prcc":
        return "gallery" if cam == 0 else "query"
    return "query" if k == 0 else "gallery"


def generate(cfg: SynthConfig) -> Dataset:
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 101])
    H, W = cfg.H, cfg.W
    head, torso, legs = _band_rows(H)
    id_patterns = np.zeros((cfg.num_pids, H, W, 3))
    for p in range(cfg.num_pids):
        id_patterns[p, head] = rng.normal(size=(head.stop - head.start, W, 3))
        id_patterns[p, legs] = rng.normal(size=(legs.stop - legs.start, W, 3))
    n_clo = cfg.num_pids * cfg.outfits_per_pid
    clo_patterns = np.zeros((n_clo, H, W, 3))
    clo_patterns[:, torso] = rng.normal(size=(n_clo, torso.stop - torso.start, W, 3))
    tints = rng.normal(0.0, 0.5, size=(cfg.cams, 3))

    images, pids, clothes, cams, splits = [], [], [], [], []
    for p in range(cfg.num_pids):
        for o in range(cfg.outfits_per_pid):
            c_id = p * cfg.outfits_per_pid + o
            for cam in range(cfg.cams):
                if not _outfit_for(cfg, o, cam):
                    continue
                base = (cfg.id_signal_strength * id_patterns[p]
                        + cfg.clo_signal_strength * clo_patterns[c_id] + tints[cam])
                for k in range(cfg.images_per_group):
                    noise = rng.normal(0.0, 1.0, size=(H, W, 3)) * cfg.noise_sigma
                    images.append(base + noise)
                    pids.append(p)
                    clothes.append(c_id)
                    cams.append(cam)
                    splits.append(_split_for(cfg, p, cam, k))
    return Dataset(
        images=np.asarray(images, dtype=np.float32),
        pids=np.asarray(pids, dtype=np.int64),
        clothes_ids=np.asarray(clothes, dtype=np.int64),
        camera_ids=np.asarray(cams, dtype=np.int64),
        splits=np.asarray(splits),
        config=cfg.to_dict(),
    )


@dataclass
class PkBatch:
    indices: np.ndarray
    P: int
    K: int


def pk_sample(labels, P: int, K: int, rng: np.random.Generator) -> PkBatch:
    """P identities uniformly without replacement, K samples each.

    ``labels`` is a per-sample identity array (indices refer to it) or a
    :class:`Dataset`, in which case the train split is used and the indices
    refer to the full dataset. Identities with fewer than K samples are
    drawn with replacement.
    """
    if isinstance(labels, Dataset):
        pool = labels.indices("train")
        lab = labels.pids[pool]
    else:
        lab = np.asarray(labels)
        pool = np.arange(len(lab))
    if P < 1 or K < 1:
        raise ContractError("P and K must be >= 1")
    uniq = np.unique(lab)
    if P > len(uniq):
        raise ContractError(f"P={P} exceeds the {len(uniq)} available identities")
    chosen = rng.choice(uniq, size=P, replace=False)
    out = []
    for pid in chosen:
        members = pool[lab == pid]
        out.append(rng.choice(members, size=K, replace=len(members) < K))
    return PkBatch(np.concatenate(out), P, K)


# -- persistence --------------------------------------------------------------------

def save(dataset: Dataset, path: Union[str, os.PathLike]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, H, W, ch = dataset.images.shape
    stride = H * W * ch * 4
    samples = [
        {"pid": int(p), "clothes_id": int(c), "camera_id": int(k), "split": str(s), "offset": i * stride}
        for i, (p, c, k, s) in enumerate(zip(dataset.pids, dataset.clothes_ids, dataset.camera_ids, dataset.splits))
    ]
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": dataset.config,
        "image_shape": [H, W, ch],
        "num_images": n,
        "blob": BLOB_NAME,
        "samples": samples,
    }
    (path / BLOB_NAME).write_bytes(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
    with open(path / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load(path: Union[str, os.PathLike]) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text())
    except FileNotFoundError as exc:
        raise ManifestError(f"no {MANIFEST_NAME} in {path}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{MANIFEST_NAME} is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise ManifestError(f"{path / MANIFEST_NAME} is not a {FORMAT_NAME} manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"dataset format version {manifest.get('version')!r} unsupported (expected {FORMAT_VERSION})"
        )
    try:
        H, W, ch = (int(v) for v in manifest["image_shape"])
        n = int(manifest["num_images"])
        samples = manifest["samples"]
        blob_name = manifest.get("blob", BLOB_NAME)
        recs = [(int(s["pid"]), int(s["clothes_id"]), int(s["camera_id"]), str(s["split"]), int(s["offset"]))
                for s in samples]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed manifest: {exc}") from exc
    if len(recs) != n:
        raise ManifestError(f"manifest lists {len(recs)} samples but num_images={n}")
    if any(r[3] not in SPLITS for r in recs):
        raise ManifestError("unknown split name in manifest")

    raw = (path / blob_name).read_bytes()
    stride = H * W * ch * 4
    if stride == 0 or len(raw) % stride or len(raw) // stride != n:
        raise BlobLengthError(f"blob holds {len(raw)} bytes; expected {n} images x {stride} bytes")
    flat = np.frombuffer(raw, dtype="<f4")
    images = np.empty((n, H, W, ch), dtype=np.float32)
    for i, r in enumerate(recs):
        off = r[4]
        if off % 4 or off < 0 or off + stride > len(raw):
            raise BlobLengthError(f"sample {i} offset {off} lies outside the blob")
        images[i] = flat[off // 4: off // 4 + stride // 4].reshape(H, W, ch)
    return Dataset(
        images=images,
        pids=np.asarray([r[0] for r in recs], dtype=np.int64),
        clothes_ids=np.asarray([r[1] for r in recs], dtype=np.int64),
        camera_ids=np.asarray([r[2] for r in recs], dtype=np.int64),
        splits=np.asarray([r[3] for r in recs]),
        config=manifest.get("config", {}),
    )


def blob_image_count(path: Union[str, os.PathLike]) -> Optional[int]:
    """Number of whole images implied by the blob size alone."""
    path = Path(path)
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    H, W, ch = manifest["image_shape"]
    size = (path / manifest.get("blob", BLOB_NAME)).stat().st_size
    stride = H * W * ch * 4
    return size // stride if size % stride == 0 else None
