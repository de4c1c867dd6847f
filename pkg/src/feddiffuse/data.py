"""IDX ingestion and client partitioning (IID, label skew, quantity skew)."""
from __future__ import annotations

import gzip
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IngestionError

log = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
PARTITION_KINDS = ("iid", "label_skew", "quantity_skew")
DATA_DIR_ENV = "FEDDIFFUSE_DATA_DIR"


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # uint8, (n, rows, cols)
    labels: np.ndarray  # int64, (n,)
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def as_float(self, indices=None) -> np.ndarray:
        """Images as float64 of shape (n, 1, rows, cols), scaled from [0, 255] to [-1, 1]."""
        imgs = self.images if indices is None else self.images[np.asarray(indices, dtype=np.int64)]
        return (imgs.astype(np.float64) / 127.5 - 1.0)[:, None]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes)


# ---------------------------------------------------------------------------
# IDX files


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IngestionError(f"{path}: cannot read ({exc})") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise IngestionError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def _parse_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    raw = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IngestionError(f"{path}: truncated header ({len(raw)} bytes, need {header})")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IngestionError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IngestionError(
            f"{path}: truncated payload, expected {size} bytes from offset {header}, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims).copy()


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Load an IDX image/label file pair (optionally gzip-compressed)."""
    images = _parse_idx(images_path, IMAGES_MAGIC, 3)
    labels = _parse_idx(labels_path, LABELS_MAGIC, 1).astype(np.int64)
    if len(images) != len(labels):
        raise IngestionError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels")
    if len(labels) and labels.max() >= num_classes:
        raise IngestionError(f"{labels_path}: label {labels.max()} outside [0, {num_classes})")
    return Dataset(images, labels, num_classes)


def write_idx(ds: Dataset, images_path, labels_path, compress: bool = False) -> None:
    imgs = np.ascontiguousarray(ds.images, dtype=np.uint8)
    img_bytes = struct.pack(">4I", IMAGES_MAGIC, *imgs.shape) + imgs.tobytes()
    lbl_bytes = struct.pack(">2I", LABELS_MAGIC, len(ds.labels)) + ds.labels.astype(np.uint8).tobytes()
    for path, payload in ((images_path, img_bytes), (labels_path, lbl_bytes)):
        Path(path).write_bytes(gzip.compress(payload, mtime=0) if compress else payload)


def find_idx_pair(directory, split: str = "train"):
    """Locate ``{split}-images-idx3-ubyte[.gz]`` and the matching labels file in ``directory``."""
    directory = Path(directory)
    found = []
    for kind, stem in (("images", "idx3"), ("labels", "idx1")):
        for name in (f"{split}-{kind}-{stem}-ubyte", f"{split}-{kind}-{stem}-ubyte.gz",
                     f"{split}-{kind}.{stem}-ubyte", f"{split}-{kind}.{stem}-ubyte.gz"):
            if (directory / name).exists():
                found.append(directory / name)
                break
        else:
            return None
    return tuple(found)


def default_data_dir() -> Path | None:
    value = os.environ.get(DATA_DIR_ENV)
    return Path(value) if value else None


# ---------------------------------------------------------------------------
# synthetic stand-in data


def _silhouette(label: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # u: horizontal, v: vertical, both roughly in [-1, 1]
    au = np.abs(u)
    if label == 0:  # t-shirt
        return ((au < 0.45) & (v > -0.6) & (v < 0.8)) | ((au < 0.85) & (v > -0.6) & (v < -0.2))
    if label == 1:  # trouser
        return (v > -0.8) & (v < 0.9) & (au < 0.45) & ((au > 0.08) | (v < -0.3))
    if label == 2:  # pullover
        return ((au < 0.45) & (v > -0.7) & (v < 0.8)) | ((au < 0.75) & (au > 0.5) & (v > -0.6) & (v < 0.7))
    if label == 3:  # dress
        return (v > -0.8) & (v < 0.85) & (au < 0.2 + 0.35 * (v + 0.8))
    if label == 4:  # coat
        return ((au < 0.55) & (v > -0.8) & (v < 0.85) & (au > 0.04)) | ((au < 0.8) & (v > -0.7) & (v < 0.6))
    if label == 5:  # sandal
        return (au < 0.85) & (v > 0.1) & (v < 0.5) & ((np.round(u * 5) % 2 == 0) | (v > 0.4))
    if label == 6:  # shirt
        return ((au < 0.5) & (v > -0.6) & (v < 0.8)) | ((au < 0.7) & (v > -0.6) & (v < 0.3) & (au > 0.5)) \
            | ((au < 0.2) & (v < -0.6) & (v > -0.8))
    if label == 7:  # sneaker
        return (au < 0.9) & (v > 0.0) & (v < 0.55) & (v > 0.35 - 0.6 * (u + 0.9))
    if label == 8:  # bag
        return ((au < 0.7) & (v > -0.2) & (v < 0.75)) | ((np.hypot(u, v + 0.2) < 0.45) & (np.hypot(u, v + 0.2) > 0.3) & (v < -0.2))
    # ankle boot
    return ((u > -0.5) & (u < 0.1) & (v > -0.8) & (v < 0.6)) | ((u > -0.5) & (u < 0.85) & (v > 0.2) & (v < 0.65))


def synthetic_fashion(n: int, seed: int = 0, size: int = 28, num_classes: int = 10) -> Dataset:
    """Deterministic grayscale garment silhouettes with balanced labels.

    A structurally faithful stand-in for Fashion-MNIST (uint8 28x28, 10 classes)
    when the real files are not available.
    """
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes).astype(np.int64)
    grid = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    images = np.zeros((n, size, size), dtype=np.uint8)
    scale = rng.uniform(0.8, 1.05, n)
    shift = rng.uniform(-0.12, 0.12, (n, 2))
    level = rng.uniform(140, 250, n)
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if not idx.size:
            continue
        u = (grid[None, None, :] - shift[idx, 0, None, None]) / scale[idx, None, None]
        v = (grid[None, :, None] - shift[idx, 1, None, None]) / scale[idx, None, None]
        mask = _silhouette(c, np.broadcast_to(u, (idx.size, size, size)), np.broadcast_to(v, (idx.size, size, size)))
        shade = level[idx, None, None] * (0.85 + 0.15 * np.cos(3.0 * v))
        pixels = mask * shade + rng.normal(0.0, 8.0, mask.shape) * mask
        images[idx] = np.clip(pixels, 0, 255).astype(np.uint8)
    return Dataset(images, labels, num_classes)


# ---------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "iid"
    num_clients: int = 2
    beta: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PARTITION_KINDS:
            raise ConfigurationError(f"partition kind must be one of {PARTITION_KINDS}, got {self.kind!r}")
        if self.num_clients < 1:
            raise ConfigurationError(f"need at least one client, got {self.num_clients}")
        if not self.beta > 0:
            raise ConfigurationError(f"Dirichlet concentration must be > 0, got {self.beta}")


@dataclass
class Partition:
    spec: PartitionSpec
    shards: list[np.ndarray]
    proportions: np.ndarray | None = field(default=None)

    @property
    def sizes(self) -> list[int]:
        return [len(s) for s in self.shards]

    def manifest(self) -> dict:
        return {
            "kind": self.spec.kind,
            "num_clients": self.spec.num_clients,
            "beta": self.spec.beta,
            "seed": self.spec.seed,
            "proportions": None if self.proportions is None else self.proportions.tolist(),
            "sizes": self.sizes,
            "shards": [s.tolist() for s in self.shards],
        }

    def write_manifest(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.manifest()))
        tmp.replace(path)


def dirichlet_sample(beta: float, num_clients: int, rng: np.random.Generator) -> np.ndarray:
    """Draw from Dir_K(beta) by normalising independent Gamma(beta, 1) variates."""
    if not beta > 0:
        raise ConfigurationError(f"Dirichlet concentration must be > 0, got {beta}")
    if num_clients < 1:
        raise ConfigurationError(f"need at least one client, got {num_clients}")
    g = rng.gamma(beta, 1.0, num_clients)
    total = g.sum()
    if total == 0.0:
        # every variate underflowed (tiny beta): the limit is a point mass on one client
        g = np.zeros(num_clients)
        g[rng.integers(num_clients)] = 1.0
        total = 1.0
    return g / total


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing exactly to ``total``, closest to ``proportions * total``."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _split(indices: np.ndarray, counts: np.ndarray) -> list[np.ndarray]:
    return np.split(indices, np.cumsum(counts)[:-1])


def partition_iid(ds: Dataset, num_clients: int, rng: np.random.Generator) -> list[np.ndarray]:
    if num_clients > len(ds):
        raise ConfigurationError(f"cannot split {len(ds)} examples over {num_clients} clients")
    if num_clients < 1:
        raise ConfigurationError(f"need at least one client, got {num_clients}")
    return [np.sort(s) for s in np.array_split(rng.permutation(len(ds)), num_clients)]


def partition_label_skew(ds: Dataset, num_clients: int, beta: float,
                         rng: np.random.Generator) -> tuple[list[np.ndarray], np.ndarray]:
    """Per class j, allocate a Dir_K(beta) share of that class to each client.

    Returns the shards and the realised (classes x clients) proportion matrix.
    """
    parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    props = np.zeros((ds.num_classes, num_clients))
    for j in range(ds.num_classes):
        members = rng.permutation(np.flatnonzero(ds.labels == j))
        if not members.size:
            raise ConfigurationError(f"class {j} has no examples")
        props[j] = dirichlet_sample(beta, num_clients, rng)
        for k, chunk in enumerate(_split(members, largest_remainder(props[j], members.size))):
            parts[k].append(chunk)
    shards = [np.sort(np.concatenate(p)).astype(np.int64) for p in parts]
    return shards, props


def partition_quantity_skew(ds: Dataset, num_clients: int, beta: float,
                            rng: np.random.Generator) -> tuple[list[np.ndarray], np.ndarray]:
    """Allocate a single Dir_K(beta) share of the whole (shuffled) dataset to each client."""
    q = dirichlet_sample(beta, num_clients, rng)
    order = rng.permutation(len(ds))
    shards = [np.sort(s) for s in _split(order, largest_remainder(q, len(ds)))]
    return shards, q


def make_partition(ds: Dataset, spec: PartitionSpec) -> Partition:
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "iid":
        part = Partition(spec, partition_iid(ds, spec.num_clients, rng))
    elif spec.kind == "label_skew":
        part = Partition(spec, *partition_label_skew(ds, spec.num_clients, spec.beta, rng))
    else:
        part = Partition(spec, *partition_quantity_skew(ds, spec.num_clients, spec.beta, rng))
    empty = [k for k, s in enumerate(part.shards) if not len(s)]
    if empty:
        log.warning("clients %s received no data under %s partitioning (beta=%s)", empty, spec.kind, spec.beta)
    return part
