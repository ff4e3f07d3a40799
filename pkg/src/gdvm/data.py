"""Datasets: seeded synthetic generators, IDX files, subsampling and splits."""

from __future__ import annotations

import csv
import gzip
import io
import os
import struct
from dataclasses import dataclass, field, replace
from statistics import NormalDist
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, FormatError

MULTICLASS = "multiclass"
MULTILABEL = "multilabel"
ZEROSHOT = "zeroshot"
TASK_KINDS = (MULTICLASS, MULTILABEL, ZEROSHOT)


@dataclass
class TaskKind:
    """Which head and loss a dataset binds.

    ``n_outputs`` is the class count, the label count, or the attribute
    dimension. Zero-shot tasks also carry one prototype row per seen and
    unseen class.
    """

    kind: str
    n_outputs: int
    seen_prototypes: Optional[np.ndarray] = None
    unseen_prototypes: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.kind == ZEROSHOT:
            for name in ("seen_prototypes", "unseen_prototypes"):
                p = getattr(self, name)
                if p is None or p.ndim != 2 or p.shape[1] != self.n_outputs:
                    raise ConfigError(f"zero-shot task needs {name} with {self.n_outputs} columns")


@dataclass
class Dataset:
    """Features plus targets.

    ``targets`` holds class indices (multi-class), multi-hot rows
    (multi-label) or semantic vectors (zero-shot). ``class_ids`` holds the
    class index of every row where one exists; for zero-shot rows it is a
    global id, seen classes first.
    """

    features: np.ndarray
    targets: np.ndarray
    task: TaskKind
    class_ids: Optional[np.ndarray] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.features)
        if n < 1:
            raise DataError("dataset is empty")
        if len(self.targets) != n:
            raise DataError(f"{len(self.targets)} target rows for {n} samples")
        if self.class_ids is not None and len(self.class_ids) != n:
            raise DataError(f"{len(self.class_ids)} class ids for {n} samples")
        if self.task.kind == MULTICLASS:
            t = self.targets
            if t.min() < 0 or t.max() >= self.task.n_outputs:
                raise DataError(f"class index outside [0, {self.task.n_outputs})")

    def __len__(self):
        return len(self.features)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.features.shape[1:])

    @property
    def labels(self) -> Optional[np.ndarray]:
        """Class index per row, or ``None`` for multi-label data."""
        if self.task.kind == MULTICLASS:
            return self.targets
        return self.class_ids

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            features=self.features[idx],
            targets=self.targets[idx],
            class_ids=None if self.class_ids is None else self.class_ids[idx],
            provenance=dict(self.provenance),
        )

    def to_csv(self, path) -> None:
        """One row per sample: flattened features, then targets."""
        flat = self.features.reshape(len(self), -1)
        tgt = self.targets.reshape(len(self), -1)
        header = [f"x{i}" for i in range(flat.shape[1])] + [f"y{i}" for i in range(tgt.shape[1])]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row_x, row_y in zip(flat, tgt):
                w.writerow([repr(float(v)) for v in row_x] + [_csv_val(v) for v in row_y])


def _csv_val(v):
    return int(v) if float(v).is_integer() else repr(float(v))


# ---------------------------------------------------------------- generators


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def gen_blobs(seed: int, n_classes: int, n_per_class: int, dim: int, spread: float, radius: float = 1.0) -> Dataset:
    """Gaussian blobs around class means at random directions on a sphere of ``radius``."""
    if n_classes < 2:
        raise ConfigError("gen_blobs needs at least two classes")
    if spread < 0:
        raise ConfigError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    means = radius * _unit_rows(rng, n_classes, dim)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    x = means[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(
        features=x[order],
        targets=labels[order],
        task=TaskKind(MULTICLASS, n_classes),
        class_ids=labels[order],
        provenance={"generator": "blobs", "seed": seed, "means": means},
    )


def _label_directions(rng, n_labels: int, dim: int, overlap: float) -> np.ndarray:
    if n_labels <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, n_labels)))
        base = q.T
    else:
        base = _unit_rows(rng, n_labels, dim)
    shared = _unit_rows(rng, 1, dim)[0]
    d = np.sqrt(1.0 - overlap) * base + np.sqrt(overlap) * shared
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def gen_multilabel(seed: int, n_labels: int, n_samples: int, dim: int, overlap: float = 0.0,
                   positive_rate: float = 0.25, noise: float = 0.0) -> Dataset:
    """Each label fires when the latent projection on its direction clears a threshold.

    Latents are standard normal, so the threshold ``Φ⁻¹(1 - positive_rate)``
    gives every label the configured positive rate. ``overlap`` mixes a shared
    direction into every label direction (pairwise correlation ≈ overlap);
    observed features are the latents plus ``noise``-scaled Gaussian noise.
    """
    if n_labels < 2:
        raise ConfigError("gen_multilabel needs at least two labels")
    if not 0.0 <= overlap < 1.0:
        raise ConfigError("overlap must be in [0, 1)")
    if not 0.0 < positive_rate < 1.0:
        raise ConfigError("positive_rate must be in (0, 1)")
    rng = np.random.default_rng(seed)
    directions = _label_directions(rng, n_labels, dim, overlap)
    latent = rng.standard_normal((n_samples, dim))
    threshold = NormalDist().inv_cdf(1.0 - positive_rate)
    targets = (latent @ directions.T > threshold).astype(np.int64)
    x = latent + noise * rng.standard_normal(latent.shape)
    return Dataset(
        features=x,
        targets=targets,
        task=TaskKind(MULTILABEL, n_labels),
        provenance={"generator": "multilabel", "seed": seed, "directions": directions,
                    "threshold": threshold, "empty_label_sets": int((targets.sum(axis=1) == 0).sum())},
    )


def gen_zeroshot(seed: int, n_seen: int, n_unseen: int, attr_dim: int, n_per_class: int, noise: float = 0.0,
                 nuisance_dim: int = 8, nuisance_scale: float = 1.0, feature_dim: Optional[int] = None) -> Dataset:
    """Features are a fixed linear lift of ``[prototype + noise, nuisance]``.

    The nuisance block gives same-class samples distinct inputs without
    touching the attribute coordinates, so inverting the lift and reading the
    attribute block recovers the prototype exactly when ``noise == 0``.
    Rows of seen classes come first in ``class_ids``.
    """
    if n_seen < 2 or n_unseen < 2:
        raise ConfigError("gen_zeroshot needs at least two seen and two unseen classes")
    rng = np.random.default_rng(seed)
    latent_dim = attr_dim + nuisance_dim
    feature_dim = feature_dim or latent_dim
    if feature_dim < latent_dim:
        raise ConfigError(f"feature_dim {feature_dim} must be >= attr_dim + nuisance_dim = {latent_dim}")
    prototypes = _unit_rows(rng, n_seen + n_unseen, attr_dim)
    lift = rng.standard_normal((latent_dim, feature_dim)) / np.sqrt(latent_dim)
    ids = np.repeat(np.arange(n_seen + n_unseen), n_per_class)
    attrs = prototypes[ids] + noise * rng.standard_normal((ids.size, attr_dim))
    nuisance = nuisance_scale * rng.standard_normal((ids.size, nuisance_dim))
    x = np.concatenate([attrs, nuisance], axis=1) @ lift
    order = rng.permutation(ids.size)
    task = TaskKind(ZEROSHOT, attr_dim, seen_prototypes=prototypes[:n_seen], unseen_prototypes=prototypes[n_seen:])
    return Dataset(
        features=x[order],
        targets=prototypes[ids][order],
        task=task,
        class_ids=ids[order],
        provenance={"generator": "zeroshot", "seed": seed, "lift": lift, "attr_dim": attr_dim, "n_seen": n_seen},
    )


def zero_shot_partition(ds: Dataset) -> tuple[Dataset, Dataset]:
    """Split into (seen-class data, unseen-class data); unseen ids are re-based to 0."""
    n_seen = len(ds.task.seen_prototypes)
    seen = np.flatnonzero(ds.class_ids < n_seen)
    unseen = np.flatnonzero(ds.class_ids >= n_seen)
    if seen.size == 0 or unseen.size == 0:
        raise DataError("zero-shot data needs samples of both seen and unseen classes")
    test = ds.take(unseen)
    test.class_ids = test.class_ids - n_seen
    test.provenance["prototypes"] = "unseen"
    train = ds.take(seen)
    train.provenance["prototypes"] = "seen"
    return train, test


# ---------------------------------------------------------------- IDX files

_IDX_TYPES = {0x08: np.uint8}
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


def _open(path):
    path = os.fspath(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    dtype_code, ndim = (magic >> 8) & 0xFF, magic & 0xFF
    if magic >> 16 != 0 or dtype_code not in _IDX_TYPES or ndim == 0:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    actual = len(raw) - header
    if actual != expected:
        raise FormatError(f"{path}: payload should be {expected} bytes, found {actual}")
    return np.frombuffer(raw, dtype=_IDX_TYPES[dtype_code], offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise FormatError(f"only unsigned-byte IDX payloads are supported, got {array.dtype}")
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if os.fspath(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + np.ascontiguousarray(array).tobytes())


def load_idx(path_images, path_labels, n_classes: int = 10) -> Dataset:
    """Load an image/label IDX pair; pixels are scaled to ``[0, 1]``."""
    images = read_idx(path_images)
    labels = read_idx(path_labels)
    if images.ndim != 3:
        raise FormatError(f"{path_images}: expected magic 0x{IMAGE_MAGIC:08x} (3-D images), got {images.ndim}-D data")
    if labels.ndim != 1:
        raise FormatError(f"{path_labels}: expected magic 0x{LABEL_MAGIC:08x} (1-D labels), got {labels.ndim}-D data")
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    x = (images.astype(np.float64) / 255.0)[:, None, :, :]
    y = labels.astype(np.int64)
    return Dataset(x, y, TaskKind(MULTICLASS, n_classes), class_ids=y,
                   provenance={"generator": "idx", "images": os.fspath(path_images), "labels": os.fspath(path_labels)})


def mnist_sample_arrays() -> tuple[np.ndarray, np.ndarray]:
    """The 5000-image MNIST sample (500 per digit) bundled with ``mlxtend``."""
    try:
        from importlib.resources import files

        src = files("mlxtend.data") / "data" / "mnist_5k.csv.gz"
        raw = gzip.decompress(src.read_bytes())
    except (ImportError, FileNotFoundError) as exc:
        raise DataError("the MNIST sample needs the 'mlxtend' package (pip install mlxtend)") from exc
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    return images, table[:, -1].astype(np.uint8)


def prepare_mnist(out_dir) -> tuple[str, str]:
    """Write the bundled MNIST sample as an IDX image/label pair; returns both paths."""
    os.makedirs(out_dir, exist_ok=True)
    img_path = os.path.join(out_dir, "mnist5k-images-idx3-ubyte")
    lbl_path = os.path.join(out_dir, "mnist5k-labels-idx1-ubyte")
    if not (os.path.exists(img_path) and os.path.exists(lbl_path)):
        images, labels = mnist_sample_arrays()
        write_idx(img_path + ".tmp", images)
        write_idx(lbl_path + ".tmp", labels)
        os.replace(img_path + ".tmp", img_path)
        os.replace(lbl_path + ".tmp", lbl_path)
    return img_path, lbl_path


# ---------------------------------------------------------------- sampling and splits


def _stratified_counts(labels: np.ndarray, n: int) -> dict:
    classes, counts = np.unique(labels, return_counts=True)
    quota = counts * n / counts.sum()
    base = np.floor(quota).astype(int)
    rest = n - base.sum()
    order = np.lexsort((classes, -(quota - base)))
    base[order[:rest]] += 1
    return dict(zip(classes.tolist(), base.tolist()))


def _pick(labels: Optional[np.ndarray], n: int, rng: np.random.Generator, stratified: bool) -> np.ndarray:
    total = len(labels) if labels is not None else None
    if stratified and labels is not None:
        chosen = []
        for cls, k in _stratified_counts(labels, n).items():
            members = np.flatnonzero(labels == cls)
            chosen.append(rng.permutation(members)[:k])
        idx = np.concatenate(chosen)
        return rng.permutation(idx)
    return rng.permutation(total)[:n]


def subsample(ds: Dataset, n: int, seed: int, stratified: bool = True) -> Dataset:
    """Seeded sample without replacement; stratified mode keeps class shares within ±1."""
    if not 1 <= n <= len(ds):
        raise ConfigError(f"cannot subsample {n} of {len(ds)} samples")
    rng = np.random.default_rng(seed)
    labels = ds.labels if ds.labels is not None else np.zeros(len(ds), dtype=np.int64)
    idx = _pick(labels, n, rng, stratified and ds.labels is not None)
    return ds.take(idx)


@dataclass
class SplitSpec:
    """``test_fraction`` of the data is held out, then ``val_fraction`` of the rest."""

    val_fraction: float = 0.2
    test_fraction: float = 0.0
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        for name in ("val_fraction", "test_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {v}")

    def to_dict(self) -> dict:
        return {"val_fraction": self.val_fraction, "test_fraction": self.test_fraction,
                "seed": self.seed, "stratified": self.stratified}


def _carve(ds_len: int, labels, frac: float, rng, stratified: bool) -> tuple[np.ndarray, np.ndarray]:
    """Return (kept, carved) index arrays; carved holds ``round(frac * n)`` rows."""
    all_idx = np.arange(ds_len)
    if frac == 0.0:
        return rng.permutation(all_idx), np.zeros(0, dtype=np.int64)
    if stratified and labels is not None:
        carved = []
        for cls in np.unique(labels):
            members = rng.permutation(np.flatnonzero(labels == cls))
            carved.append(members[: int(round(frac * members.size))])
        carved = np.concatenate(carved)
    else:
        carved = rng.permutation(all_idx)[: int(round(frac * ds_len))]
    mask = np.ones(ds_len, dtype=bool)
    mask[carved] = False
    return rng.permutation(all_idx[mask]), rng.permutation(carved)


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Optional[Dataset], Optional[Dataset]]:
    """Disjoint, exhaustive (train, validation, test); empty parts come back as ``None``.

    Zero-shot data ignores ``test_fraction``: the unseen classes are the test set.
    Data that is already partitioned (seen classes only) is split like any other.
    """
    rng = np.random.default_rng(spec.seed)
    if ds.task.kind == ZEROSHOT and "prototypes" not in ds.provenance:
        pool, test = zero_shot_partition(ds)
    else:
        keep, held = _carve(len(ds), ds.labels, spec.test_fraction, rng, spec.stratified)
        pool, test = ds.take(keep), (ds.take(held) if held.size else None)
    keep, val = _carve(len(pool), pool.labels, spec.val_fraction, rng, spec.stratified)
    if keep.size == 0:
        raise ConfigError("split leaves no training data")
    return pool.take(keep), (pool.take(val) if val.size else None), test
