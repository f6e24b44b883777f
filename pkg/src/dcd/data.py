"""Synthetic paired features and the on-disk feature format.

Layout of a dataset directory::

    manifest.txt          key=value lines
    {split}_images.bin    one row per image
    {split}_texts.bin     captions_per_image consecutive rows per image

Each blob is an 8-byte magic, two little-endian uint64 counts (rows, cols) and
rows*cols little-endian float64 values in row-major order. Caption row ``r`` of
a split belongs to image row ``r // captions_per_image``; group ids are global
image indices (split offset + row).
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from dcd.errors import ConfigError, FormatError
from dcd.model import read_kv

MAGIC = b"DCDFEAT1"
HEADER = struct.Struct("<8sQQ")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetManifest:
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    captions_per_image: int = 5
    image_dim: int = 64
    text_dim: int = 64
    latent_dim: int = 16
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_train", "n_val", "n_test", "captions_per_image", "image_dim", "text_dim", "latent_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    @property
    def n_images(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def split_size(self, split: str) -> int:
        return getattr(self, f"n_{split}")

    def split_offset(self, split: str) -> int:
        return sum(self.split_size(s) for s in SPLITS[: SPLITS.index(split)])

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, kv: dict) -> DatasetManifest:
        kwargs = {}
        for f in fields(cls):
            if f.name in kv:
                cast = float if f.type in ("float", float) else int
                try:
                    kwargs[f.name] = cast(kv[f.name])
                except ValueError:
                    raise FormatError(f"manifest value {f.name}={kv[f.name]!r} is not a number") from None
        return cls(**kwargs)


@dataclass(frozen=True)
class FeatureRecord:
    id: int
    group_id: int
    modality: str
    vector: np.ndarray


@dataclass
class Split:
    name: str
    images: np.ndarray
    texts: np.ndarray
    captions_per_image: int
    group_offset: int = 0

    def __post_init__(self):
        if len(self.texts) != len(self.images) * self.captions_per_image:
            raise FormatError(
                f"{self.name}: {len(self.texts)} text rows for {len(self.images)} images "
                f"x {self.captions_per_image} captions"
            )

    @property
    def image_groups(self) -> np.ndarray:
        return self.group_offset + np.arange(len(self.images))

    @property
    def text_groups(self) -> np.ndarray:
        return self.group_offset + np.arange(len(self.texts)) // self.captions_per_image

    @property
    def n_pairs(self) -> int:
        return len(self.texts)

    def text_image(self, text_idx):
        """Row of the image each caption belongs to."""
        return np.asarray(text_idx) // self.captions_per_image

    def records(self) -> list[FeatureRecord]:
        imgs = [
            FeatureRecord(i, int(g), "image", self.images[i : i + 1])
            for i, g in enumerate(self.image_groups)
        ]
        txts = [
            FeatureRecord(j, int(g), "text", self.texts[j : j + 1])
            for j, g in enumerate(self.text_groups)
        ]
        return imgs + txts

    def subset(self, n_images: int) -> Split:
        n = min(n_images, len(self.images))
        return Split(self.name, self.images[:n], self.texts[: n * self.captions_per_image],
                     self.captions_per_image, self.group_offset)


@dataclass
class Dataset:
    manifest: DatasetManifest
    splits: dict[str, Split]

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]


def projections(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    """The fixed latent->image and latent->text maps (unit expected row norm)."""
    rng = np.random.default_rng([manifest.seed, 1])
    scale = 1.0 / np.sqrt(manifest.latent_dim)
    a = rng.normal(0.0, scale, size=(manifest.latent_dim, manifest.image_dim))
    b = rng.normal(0.0, scale, size=(manifest.latent_dim, manifest.text_dim))
    return a, b


def synthesize(manifest: DatasetManifest) -> Dataset:
    a, b = projections(manifest)
    cpi = manifest.captions_per_image
    splits = {}
    for k, name in enumerate(SPLITS):
        rng = np.random.default_rng([manifest.seed, 2, k])
        n = manifest.split_size(name)
        z = rng.standard_normal((n, manifest.latent_dim))
        images = z @ a + manifest.noise_sigma * rng.standard_normal((n, manifest.image_dim))
        texts = np.repeat(z @ b, cpi, axis=0)
        texts = texts + manifest.noise_sigma * rng.standard_normal((n * cpi, manifest.text_dim))
        splits[name] = Split(name, images, texts, cpi, manifest.split_offset(name))
    return Dataset(manifest, splits)


def write_blob(path: Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    path.write_bytes(HEADER.pack(MAGIC, arr.shape[0], arr.shape[1]) + arr.tobytes())


def read_blob(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: header truncated at byte {len(raw)} (need {HEADER.size})")
    magic, rows, cols = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    expected = HEADER.size + 8 * rows * cols
    if len(raw) != expected:
        raise FormatError(
            f"{path}: blob is {len(raw)} bytes but header ({rows}x{cols}) implies {expected}; "
            f"mismatch from byte {min(len(raw), expected)}"
        )
    arr = np.frombuffer(raw, dtype="<f8", offset=HEADER.size).reshape(rows, cols).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise FormatError(f"{path}: non-finite value at byte {HEADER.size + 8 * int(bad[0])}")
    return arr


def write_dataset(dataset: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, split in dataset.splits.items():
        write_blob(out / f"{name}_images.bin", split.images)
        write_blob(out / f"{name}_texts.bin", split.texts)
    (out / "manifest.txt").write_text(dataset.manifest.to_text(), encoding="utf-8")
    return out


def generate_synthetic(manifest: DatasetManifest, out_dir) -> Dataset:
    dataset = synthesize(manifest)
    write_dataset(dataset, out_dir)
    return dataset


def load_features(path) -> Dataset:
    path = Path(path)
    manifest_path = path / "manifest.txt"
    if not manifest_path.exists():
        raise FormatError(f"missing {manifest_path}")
    try:
        manifest = DatasetManifest.from_mapping(read_kv(manifest_path.read_text(encoding="utf-8")))
    except ConfigError as e:
        raise FormatError(f"{manifest_path}: {e}") from None
    splits = {}
    for name in SPLITS:
        ipath, tpath = path / f"{name}_images.bin", path / f"{name}_texts.bin"
        if not ipath.exists() or not tpath.exists():
            raise FormatError(f"missing feature blobs for split {name!r} in {path}")
        images, texts = read_blob(ipath), read_blob(tpath)
        n = manifest.split_size(name)
        if images.shape != (n, manifest.image_dim):
            raise FormatError(
                f"{ipath}: blob is {images.shape[0]}x{images.shape[1]}, "
                f"manifest says {n}x{manifest.image_dim}"
            )
        if texts.shape != (n * manifest.captions_per_image, manifest.text_dim):
            raise FormatError(
                f"{tpath}: blob is {texts.shape[0]}x{texts.shape[1]}, "
                f"manifest says {n * manifest.captions_per_image}x{manifest.text_dim}"
            )
        splits[name] = Split(name, images, texts, manifest.captions_per_image, manifest.split_offset(name))
    return Dataset(manifest, splits)


def batch_iterator(split: Split, K: int, seed: int, epoch: int):
    """Yield arrays of K caption indices (each caption is one matched pair)."""
    if K < 1 or K > split.n_pairs:
        raise ConfigError(f"batch size {K} must be in [1, {split.n_pairs}] for split {split.name!r}")
    order = np.random.default_rng([seed, epoch]).permutation(split.n_pairs)
    for lo in range(0, split.n_pairs - K + 1, K):
        yield order[lo : lo + K]


def latent_nn_recall(dataset: Dataset, split: str = "test") -> float:
    """Text-retrieval R@1 of nearest neighbours after mapping both modalities back to the latent space.

    Sanity oracle that the generated data is learnable.
    """
    a, b = projections(dataset.manifest)
    s = dataset[split]
    zi = s.images @ np.linalg.pinv(a)
    zt = s.texts @ np.linalg.pinv(b)
    d = ((zi[:, None, :] - zt[None, :, :]) ** 2).sum(-1)
    best = d.argmin(axis=1)
    return 100.0 * float(np.mean(s.text_groups[best] == s.image_groups))
