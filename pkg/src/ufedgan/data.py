"""Datasets, the Dirichlet non-IID partitioner, loaders and toy distributions."""
import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, DataError, ParseError
from .rng import make_stream


@dataclass
class LabeledDataset:
    """Samples with integer class labels.

    Labels are only used for partitioning and evaluation. Clients receive an
    :class:`UnlabeledView` instead.
    """

    samples: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.samples) != len(self.labels):
            raise DataError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.samples)

    @property
    def sample_shape(self):
        return self.samples.shape[1:]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.samples[indices], self.labels[indices], self.num_classes)

    def unlabeled(self):
        return UnlabeledView(self.samples)


class UnlabeledView:
    """Read-only sample access with no route to the labels."""

    __slots__ = ("_samples",)

    def __init__(self, samples):
        samples = np.asarray(samples)
        samples.flags.writeable = False
        self._samples = samples

    def __len__(self):
        return len(self._samples)

    @property
    def sample_shape(self):
        return self._samples.shape[1:]

    def batch(self, indices):
        return self._samples[np.asarray(indices)].copy()


# partitioning ----------------------------------------------------------------

@dataclass
class PartitionPlan:
    proportions: np.ndarray  # (classes, users); each row sums to 1
    counts: np.ndarray  # (classes, users) integer sample counts
    assignment: np.ndarray  # per-sample user index
    beta: float
    num_users: int
    seed: int = 0

    def user_indices(self, user):
        return np.flatnonzero(self.assignment == user)

    def to_dict(self):
        return {
            "num_users": self.num_users,
            "beta": self.beta,
            "seed": self.seed,
            "proportions": self.proportions.tolist(),
            "counts": self.counts.tolist(),
            "users": {str(u): self.user_indices(u).tolist() for u in range(self.num_users)},
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        n = sum(len(v) for v in d["users"].values())
        assignment = np.full(n, -1, dtype=np.int64)
        for u, idx in d["users"].items():
            assignment[np.asarray(idx, dtype=np.int64)] = int(u)
        return cls(np.asarray(d["proportions"]), np.asarray(d["counts"]), assignment,
                   d["beta"], d["num_users"], d.get("seed", 0))


def sample_dirichlet(rng, beta, size):
    """Dir(beta, ..., beta) draw as normalized Gamma(beta, 1) variates.

    Gammas are drawn in log space (Gamma(b) = Gamma(b + 1) * U**(1/b)) so tiny
    concentrations do not underflow to an all-zero vector.
    """
    log_g = np.log(rng.gamma(beta + 1.0, 1.0, size)) + np.log(rng.uniform(size=size)) / beta
    log_g -= log_g.max()
    g = np.exp(log_g)
    return g / g.sum()


def largest_remainder(shares, total):
    """Integer split of ``total`` following ``shares`` with exact conservation."""
    raw = np.asarray(shares, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    remainder = total - counts.sum()
    if remainder > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts


def dirichlet_partition(dataset, num_users, beta, seed=0):
    """Split a labeled dataset across users with Dir(beta) class shares.

    For every class a share vector over users is drawn; the class's
    (shuffled) samples are then dealt out in proportion, with integer counts
    fixed by the largest-remainder rule.
    """
    labels = dataset.labels if isinstance(dataset, LabeledDataset) else np.asarray(dataset)
    num_classes = dataset.num_classes if isinstance(dataset, LabeledDataset) else int(labels.max(initial=-1)) + 1
    if num_users < 1:
        raise ConfigError("num_users must be >= 1")
    if not beta > 0:
        raise ConfigError("beta must be > 0")
    if num_classes == 0 or len(labels) == 0:
        raise DataError("cannot partition a dataset with no classes")
    rng = make_stream(seed, "partition")
    proportions = np.zeros((num_classes, num_users))
    counts = np.zeros((num_classes, num_users), dtype=np.int64)
    assignment = np.full(len(labels), -1, dtype=np.int64)
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        proportions[c] = sample_dirichlet(rng, beta, num_users)
        members = members[rng.permutation(len(members))]
        counts[c] = largest_remainder(proportions[c], len(members))
        bounds = np.concatenate([[0], np.cumsum(counts[c])])
        for u in range(num_users):
            assignment[members[bounds[u]:bounds[u + 1]]] = u
    return PartitionPlan(proportions, counts, assignment, float(beta), int(num_users), int(seed))


# IDX and CSV -----------------------------------------------------------------

IDX_TYPES = {
    0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8"),
}
IDX_CODES = {v.newbyteorder("="): k for k, v in IDX_TYPES.items()}


def read_idx(path):
    """Raw array from an IDX file (big-endian header and data)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read IDX file: {exc.strerror}") from None
    if len(raw) < 4:
        raise ParseError(f"{path}: truncated IDX header", offset=len(raw))
    if raw[0] != 0 or raw[1] != 0 or raw[2] not in IDX_TYPES:
        raise ParseError(f"{path}: bad IDX magic {raw[:4].hex()}", offset=0)
    dtype, ndim = IDX_TYPES[raw[2]], raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{path}: truncated IDX dimensions", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header != need:
        raise ParseError(f"{path}: expected {need} data bytes, found {len(raw) - header}",
                         offset=header + min(need, len(raw) - header))
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array):
    array = np.asarray(array)
    code = IDX_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise DataError(f"dtype {array.dtype} has no IDX type code")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(IDX_TYPES[code]).tobytes())


def load_idx_images(path, labels_path=None, num_classes=None):
    """Images from an IDX file as (n, 1, H, W) scaled from [0, 255] to [-1, 1]."""
    images = read_idx(path)
    if images.ndim == 3:
        images = images[:, None]
    elif images.ndim != 4:
        raise ParseError(f"{path}: expected rank-3 or rank-4 image data, got rank {images.ndim}", offset=3)
    samples = (images.astype(np.float32) / np.float32(127.5) - 1.0).astype(np.float32)
    if labels_path is None:
        labels = np.zeros(len(samples), dtype=np.int64)
    else:
        labels = read_idx(labels_path).astype(np.int64).ravel()
    k = num_classes if num_classes is not None else int(labels.max(initial=-1)) + 1
    return LabeledDataset(samples, labels, max(k, 1) if len(labels) else 0)


def load_csv_vectors(path, num_classes=None):
    """Rows ``label, f0, ..., f{d-1}`` after a header line."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"{path}: cannot read CSV file: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "label":
            raise ParseError(f"{path}: first column header must be 'label'", offset=0)
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
    labels = np.asarray(labels, dtype=np.int64)
    k = num_classes if num_classes is not None else int(labels.max(initial=-1)) + 1
    return LabeledDataset(np.asarray(rows, dtype=np.float32).reshape(len(rows), -1), labels, k)


# resizing --------------------------------------------------------------------

def _area_matrix(src, dst):
    """(dst, src) weights averaging source cells over each target cell."""
    m = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), int(np.ceil(hi))):
            m[i, j] = min(hi, j + 1) - max(lo, j)
    return m / m.sum(axis=1, keepdims=True)


def resize_images(images, size):
    """Area-average resize of (n, C, H, W) images to ``size`` = (h, w)."""
    images = np.asarray(images)
    h, w = size
    a = _area_matrix(images.shape[-2], h)
    b = _area_matrix(images.shape[-1], w)
    out = np.einsum("ij,ncjk,lk->ncil", a, images.astype(np.float64), b)
    return out.astype(images.dtype)


def downscale(dataset, size):
    """Dataset with images area-mean pooled to ``size`` = (h, w)."""
    return LabeledDataset(resize_images(dataset.samples, size), dataset.labels, dataset.num_classes)


# toy distributions -----------------------------------------------------------

@dataclass
class ToyDistribution:
    kind: str  # gaussian1d | mixture2d | discrete
    mean: float = 0.0
    std: float = 1.0
    means: Optional[np.ndarray] = None
    covs: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind == "gaussian1d":
            if not self.std > 0:
                raise ConfigError("gaussian1d needs std > 0")
        elif self.kind == "mixture2d":
            self.means = np.asarray(self.means, dtype=np.float64)
            self.covs = np.asarray(self.covs, dtype=np.float64)
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if abs(self.weights.sum() - 1) > 1e-9 or np.any(self.weights < 0):
                raise ConfigError("mixture weights must be non-negative and sum to 1")
        elif self.kind == "discrete":
            self.probs = np.asarray(self.probs, dtype=np.float64)
            if abs(self.probs.sum() - 1) > 1e-9 or np.any(self.probs < 0):
                raise ConfigError("discrete probabilities must be non-negative and sum to 1")
        else:
            raise ConfigError(f"unknown toy distribution {self.kind!r}")

    @property
    def num_classes(self):
        if self.kind == "mixture2d":
            return len(self.weights)
        if self.kind == "discrete":
            return len(self.probs)
        return 1


def gaussian1d(mean=2.0, std=0.5):
    return ToyDistribution("gaussian1d", mean=mean, std=std)


def mixture2d(means=None, std=0.25, weights=None):
    """Gaussian mixture; defaults to eight isotropic modes on a radius-2 ring."""
    if means is None:
        angles = np.arange(8) * np.pi / 4
        means = np.stack([2 * np.cos(angles), 2 * np.sin(angles)], axis=1)
    means = np.asarray(means, dtype=np.float64)
    k = len(means)
    weights = np.full(k, 1.0 / k) if weights is None else weights
    covs = np.stack([np.eye(2) * std ** 2] * k)
    return ToyDistribution("mixture2d", means=means, covs=covs, weights=weights)


def discrete(probs):
    return ToyDistribution("discrete", probs=probs)


def sample_toy_labeled(dist, n, rng):
    """(samples, component labels) drawn iid from ``dist``."""
    if n < 1:
        raise ContractError("n must be >= 1")
    if dist.kind == "gaussian1d":
        return (dist.mean + dist.std * rng.standard_normal((n, 1))), np.zeros(n, dtype=np.int64)
    if dist.kind == "discrete":
        symbols = rng.choice(len(dist.probs), size=n, p=dist.probs)
        return symbols, symbols
    comps = rng.choice(len(dist.weights), size=n, p=dist.weights)
    chol = np.linalg.cholesky(dist.covs)
    z = rng.standard_normal((n, 2))
    return dist.means[comps] + np.einsum("nij,nj->ni", chol[comps], z), comps


def sample_toy(dist, n, rng):
    """n iid samples: (n, 1) for gaussian1d, (n, 2) for mixture2d, (n,) symbols for discrete."""
    return sample_toy_labeled(dist, n, rng)[0]


def toy_dataset(dist, n, seed=0):
    samples, labels = sample_toy_labeled(dist, n, make_stream(seed, "toy-data"))
    return LabeledDataset(np.asarray(samples, dtype=np.float32), labels, dist.num_classes)


# synthetic tiny images -------------------------------------------------------

TINY_CLASSES = ("hbar", "vbar", "square", "disk", "plus", "diagonal", "cross", "ring")


def _draw_shape(kind, size, cy, cx, r, thick):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "hbar":
        mask = (np.abs(dy) <= thick) & (np.abs(dx) <= r + 1)
    elif kind == "vbar":
        mask = (np.abs(dx) <= thick) & (np.abs(dy) <= r + 1)
    elif kind == "square":
        edge = np.maximum(np.abs(dx), np.abs(dy))
        mask = (edge <= r) & (edge >= r - thick)
    elif kind == "disk":
        mask = dx * dx + dy * dy <= r * r
    elif kind == "plus":
        mask = ((np.abs(dy) <= thick) | (np.abs(dx) <= thick)) & (np.maximum(np.abs(dx), np.abs(dy)) <= r)
    elif kind == "diagonal":
        mask = (np.abs(dx - dy) <= thick + 0.5) & (np.maximum(np.abs(dx), np.abs(dy)) <= r)
    elif kind == "cross":
        mask = ((np.abs(dx - dy) <= thick + 0.5) | (np.abs(dx + dy) <= thick + 0.5)) & \
               (np.maximum(np.abs(dx), np.abs(dy)) <= r)
    else:  # ring
        d = np.sqrt(dx * dx + dy * dy)
        mask = (d <= r) & (d >= r - thick - 0.5)
    return mask


def tiny_images(n, seed=0, size=16, num_classes=8, noise=0.05):
    """Synthetic grayscale shape images in [-1, 1], shape (n, 1, size, size).

    Each class is a simple glyph (bars, square, disk, plus, ...) with random
    position jitter, scale and stroke width; the desk-scale stand-in for a
    small image benchmark.
    """
    if not 1 <= num_classes <= len(TINY_CLASSES):
        raise ConfigError(f"num_classes must be in [1, {len(TINY_CLASSES)}]")
    rng = make_stream(seed, "tiny-images")
    labels = rng.integers(0, num_classes, size=n)
    images = np.empty((n, 1, size, size), dtype=np.float32)
    centre = (size - 1) / 2
    for i, c in enumerate(labels):
        cy, cx = centre + rng.integers(-2, 3, size=2)
        r = size * rng.uniform(0.25, 0.34)
        thick = rng.choice([0.5, 1.0])
        mask = _draw_shape(TINY_CLASSES[c], size, cy, cx, r, thick)
        img = np.where(mask, 1.0, -1.0) + noise * rng.standard_normal((size, size))
        images[i, 0] = np.clip(img, -1, 1)
    return LabeledDataset(images, labels, num_classes)
