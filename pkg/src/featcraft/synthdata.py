"""Deterministic synthetic "faces": Gaussian-blob identities with lighting/pose nuisance.

Each identity is a fixed arrangement of blobs (centres, widths, amplitudes).
Each image of that identity adds a global brightness offset and a small
translation.  The binary utility attribute is whether the brightness offset
is positive, so it is independent of identity by construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class IdentitySpec:
    identity: int
    centers: np.ndarray  # (k, 2) blob centres in pixel coordinates
    widths: np.ndarray  # (k,)
    amplitudes: np.ndarray  # (k,)


@dataclass
class LabeledImages:
    images: np.ndarray  # (n, h, w) in [0, 1]
    ids: np.ndarray  # (n,) identity label
    attrs: np.ndarray  # (n, n_attr) binary utility labels
    brightness: np.ndarray  # (n,) nuisance, kept for inspection
    shifts: np.ndarray  # (n, 2)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self.images), -1)

    def subset(self, idx) -> LabeledImages:
        idx = np.asarray(idx)
        return LabeledImages(self.images[idx], self.ids[idx], self.attrs[idx], self.brightness[idx], self.shifts[idx])

    def identities(self) -> np.ndarray:
        return np.unique(self.ids)


@dataclass
class DatasetSplit:
    x_pub: LabeledImages
    x_train: LabeledImages
    x_test: LabeledImages

    def __post_init__(self):
        check_disjoint(self)


def check_disjoint(split: DatasetSplit) -> None:
    pub = set(split.x_pub.ids.tolist())
    pvt = set(split.x_train.ids.tolist()) | set(split.x_test.ids.tolist())
    if pub & pvt:
        raise AssertionError(f"public and private identities overlap: {sorted(pub & pvt)}")


def sample_identity(identity: int, rng: np.random.Generator, dims, n_blobs: int = 3) -> IdentitySpec:
    h, w = dims
    margin = 0.2
    centers = np.column_stack(
        [rng.uniform(margin * h, (1 - margin) * h, n_blobs), rng.uniform(margin * w, (1 - margin) * w, n_blobs)]
    )
    widths = rng.uniform(0.1, 0.2, n_blobs) * min(h, w)
    amplitudes = rng.uniform(0.35, 0.7, n_blobs)
    return IdentitySpec(identity, centers, widths, amplitudes)


def render(spec: IdentitySpec, dims, brightness: float, shift, noise: np.ndarray | None = None) -> np.ndarray:
    h, w = dims
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.full((h, w), 0.15 + brightness)
    for (cy, cx), s, a in zip(spec.centers, spec.widths, spec.amplitudes):
        cy, cx = cy + shift[0], cx + shift[1]
        img += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    if noise is not None:
        img += noise
    return np.clip(img, 0.0, 1.0)


def generate_dataset(
    n_identities: int,
    images_per_identity: int,
    image_dims=(16, 16),
    seed: int = 0,
    n_blobs: int = 3,
    brightness_range: float = 0.2,
    max_shift: float = 1.0,
    noise_std: float = 0.02,
) -> LabeledImages:
    if n_identities < 2:
        raise ValueError("need at least two identities")
    if images_per_identity < 1:
        raise ValueError("need at least one image per identity")
    dims = tuple(int(d) for d in image_dims)
    if len(dims) != 2 or min(dims) < 4:
        raise ValueError(f"image_dims must be two sizes >= 4, got {image_dims}")
    rng = np.random.default_rng(seed)
    specs = [sample_identity(i, rng, dims, n_blobs) for i in range(n_identities)]
    n = n_identities * images_per_identity
    ids = np.repeat(np.arange(n_identities), images_per_identity)
    brightness = rng.uniform(-brightness_range, brightness_range, n)
    # two classes are guaranteed for every identity with two or more images
    if images_per_identity >= 2:
        for i in range(n_identities):
            sl = slice(i * images_per_identity, (i + 1) * images_per_identity)
            b = brightness[sl]
            b[0], b[1] = abs(b[0]) + 1e-3, -abs(b[1]) - 1e-3
    shifts = rng.uniform(-max_shift, max_shift, (n, 2))
    noise = rng.normal(0.0, noise_std, (n, *dims))
    images = np.stack([render(specs[ids[k]], dims, brightness[k], shifts[k], noise[k]) for k in range(n)])
    attrs = (brightness > 0).astype(np.int64)[:, None]
    return LabeledImages(images, ids, attrs, brightness, shifts)


def split_dataset(data: LabeledImages, pub_fraction: float = 0.5, train_test_ratio=(2, 1), seed: int = 0) -> DatasetSplit:
    """Identity-disjoint public/private split, then a per-identity train/test split."""
    idents = data.identities()
    rng = np.random.default_rng(seed)
    n_pub = int(round(pub_fraction * len(idents)))
    if n_pub < 1 or n_pub >= len(idents):
        raise ValueError(f"pub_fraction={pub_fraction} leaves one side without identities")
    order = rng.permutation(idents)
    pub_ids, pvt_ids = np.sort(order[:n_pub]), np.sort(order[n_pub:])
    r_train, r_test = train_test_ratio
    pub_idx, train_idx, test_idx = [], [], []
    for i in pub_ids:
        pub_idx.extend(np.flatnonzero(data.ids == i).tolist())
    for i in pvt_ids:
        rows = rng.permutation(np.flatnonzero(data.ids == i))
        n_train = int(round(len(rows) * r_train / (r_train + r_test)))
        if n_train < 1 or n_train >= len(rows):
            raise ValueError(f"identity {i} has too few images for a {r_train}:{r_test} split")
        train_idx.extend(sorted(rows[:n_train].tolist()))
        test_idx.extend(sorted(rows[n_train:].tolist()))
    return DatasetSplit(data.subset(pub_idx), data.subset(train_idx), data.subset(test_idx))


def normalize_to_reference(images, reference) -> np.ndarray:
    """Affinely map ``images`` so its pixel mean and variance equal ``reference``'s."""
    x = np.asarray(images, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    sx, sr = x.std(), ref.std()
    if sr == 0:
        raise ValueError("reference has zero variance")
    if sx == 0:
        raise ValueError("input has zero variance")
    return (x - x.mean()) * (sr / sx) + ref.mean()


def save_split(path, data: LabeledImages) -> None:
    """Dump one split: count, rank, dims, label columns, then f64 pixels and i64 labels."""
    imgs = np.ascontiguousarray(data.images, dtype="<f8")
    labels = np.column_stack([data.ids, data.attrs]).astype("<i8")
    header = struct.pack("<II", len(imgs), imgs.ndim - 1) + struct.pack(f"<{imgs.ndim - 1}I", *imgs.shape[1:])
    header += struct.pack("<I", labels.shape[1])
    Path(path).write_bytes(header + imgs.tobytes() + labels.tobytes())


def load_split(path) -> LabeledImages:
    raw = Path(path).read_bytes()
    n, rank = struct.unpack_from("<II", raw, 0)
    pos = 8
    dims = struct.unpack_from(f"<{rank}I", raw, pos)
    pos += 4 * rank
    (ncol,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    size = n * int(np.prod(dims))
    imgs = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(n, *dims).astype(np.float64)
    pos += 8 * size
    labels = np.frombuffer(raw, dtype="<i8", count=n * ncol, offset=pos).reshape(n, ncol).astype(np.int64)
    return LabeledImages(imgs, labels[:, 0], labels[:, 1:], np.full(n, np.nan), np.full((n, 2), np.nan))
