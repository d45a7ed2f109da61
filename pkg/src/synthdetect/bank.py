"""Labeled feature banks: the on-disk and in-memory form of every dataset here.

A bank is an ordered set of float32 feature vectors with a binary label per
vector (1 = real image, 0 = AI-generated). Two interchangeable file formats
are supported:

* binary (default): little-endian, magic ``FBNK``, u16 version, u32 dim,
  u64 count, then per sample ``dim`` float32 values followed by one label
  byte. The header is 18 bytes and each sample occupies ``4*dim + 1`` bytes.
* csv: one sample per line, ``dim`` feature columns then the label column,
  with an optional leading ``# dim=<d>`` header line.

Writers go through a temp file and ``os.replace`` so a failed save never
leaves a partial file behind.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from typing import Iterator, NamedTuple

import numpy as np

from .validation import as_binary_labels

_MAGIC = b"FBNK"
_VERSION = 1
_HEADER = struct.Struct("<4sHIQ")  # magic, version, dim, count
HEADER_SIZE = _HEADER.size  # 18 bytes

BINARY_FORMAT = "binary"
CSV_FORMAT = "csv"


class BankFormatError(ValueError):
    """A bank file does not conform to the format, with the offending location."""


class Sample(NamedTuple):
    features: np.ndarray
    label: int


class ClassCounts(NamedTuple):
    n_real: int
    n_fake: int


class FeatureBank:
    """Immutable container of labeled feature vectors.

    Features are stored as a read-only float32 array of shape (n, dim) and
    labels as a read-only uint8 array of shape (n,). All feature values must
    be finite and at least one sample is required.
    """

    __slots__ = ("features", "labels")

    def __init__(self, features, labels):
        feats = np.array(features, dtype=np.float32, copy=True)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        if feats.shape[0] < 1:
            raise ValueError("a bank needs at least one sample")
        if feats.shape[1] < 1:
            raise ValueError("feature dimension must be at least 1")
        if not np.isfinite(feats).all():
            raise ValueError("features contain non-finite values")
        labs = as_binary_labels(labels, n=feats.shape[0])
        feats.setflags(write=False)
        labs.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)

    def __setattr__(self, name, value):
        raise AttributeError("FeatureBank is immutable")

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_samples(self) -> int:
        return int(self.features.shape[0])

    def __len__(self) -> int:
        return self.n_samples

    def sample(self, i: int) -> Sample:
        return Sample(self.features[i], int(self.labels[i]))

    def __iter__(self) -> Iterator[Sample]:
        for i in range(self.n_samples):
            yield self.sample(i)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureBank):
            return NotImplemented
        return (
            self.features.shape == other.features.shape
            and bool((self.features == other.features).all())
            and bool((self.labels == other.labels).all())
        )

    def __repr__(self) -> str:
        counts = class_counts(self)
        return (
            f"FeatureBank(n={self.n_samples}, dim={self.dim}, "
            f"real={counts.n_real}, fake={counts.n_fake})"
        )


def class_counts(bank: FeatureBank) -> ClassCounts:
    """Count real (label 1) and fake (label 0) samples."""
    n_real = int(np.count_nonzero(bank.labels == 1))
    return ClassCounts(n_real=n_real, n_fake=bank.n_samples - n_real)


def _sample_dtype(dim: int) -> np.dtype:
    # Packed layout: itemsize is exactly 4*dim + 1, no padding.
    return np.dtype([("features", "<f4", (dim,)), ("label", "u1")])


def _sample_offset(dim: int, i: int) -> int:
    return HEADER_SIZE + i * (4 * dim + 1)


def _to_binary(bank: FeatureBank) -> bytes:
    records = np.empty(bank.n_samples, dtype=_sample_dtype(bank.dim))
    records["features"] = bank.features
    records["label"] = bank.labels
    header = _HEADER.pack(_MAGIC, _VERSION, bank.dim, bank.n_samples)
    return header + records.tobytes()


def _from_binary(data: bytes, path: str) -> FeatureBank:
    if len(data) < HEADER_SIZE:
        raise BankFormatError(
            f"{path}: truncated header, {len(data)} bytes but the header needs {HEADER_SIZE}"
        )
    magic, version, dim, count = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise BankFormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != _VERSION:
        raise BankFormatError(f"{path}: unsupported version {version} at byte offset 4")
    if dim < 1:
        raise BankFormatError(f"{path}: dim must be >= 1, got {dim} at byte offset 6")
    if count < 1:
        raise BankFormatError(f"{path}: bank holds no samples (count 0 at byte offset 10)")
    expected = _sample_offset(dim, count)
    if len(data) != expected:
        raise BankFormatError(
            f"{path}: expected {expected} bytes for {count} samples of dim {dim}, "
            f"got {len(data)} (body ends at byte offset {len(data)})"
        )
    records = np.frombuffer(data, dtype=_sample_dtype(dim), count=count, offset=HEADER_SIZE)
    labels = records["label"]
    bad = np.nonzero(~np.isin(labels, (0, 1)))[0]
    if bad.size:
        i = int(bad[0])
        offset = _sample_offset(dim, i) + 4 * dim
        raise BankFormatError(
            f"{path}: label {int(labels[i])} outside {{0,1}} for sample {i} "
            f"at byte offset {offset}"
        )
    feats = records["features"]
    finite = np.isfinite(feats)
    if not finite.all():
        i, j = (int(v) for v in np.argwhere(~finite)[0])
        offset = _sample_offset(dim, i) + 4 * j
        raise BankFormatError(
            f"{path}: non-finite feature value for sample {i} at byte offset {offset}"
        )
    return FeatureBank(feats.copy(), labels.copy())


def _to_csv(bank: FeatureBank) -> str:
    lines = [f"# dim={bank.dim}"]
    for i in range(bank.n_samples):
        # repr(float(v)) is the shortest decimal that round-trips the float64
        # promotion of a float32 exactly, so csv -> load recovers bit-equal values.
        fields = [repr(float(v)) for v in bank.features[i]]
        fields.append(str(int(bank.labels[i])))
        lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


def _from_csv(text: str, path: str) -> FeatureBank:
    dim: int | None = None
    feats: list[list[np.float32]] = []
    labels: list[int] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if feats or dim is not None:
                raise BankFormatError(f"{path}: unexpected header at line {lineno}")
            body = line[1:].strip()
            if not body.startswith("dim="):
                raise BankFormatError(f"{path}: malformed header {line!r} at line {lineno}")
            try:
                dim = int(body[4:])
            except ValueError:
                raise BankFormatError(
                    f"{path}: malformed header {line!r} at line {lineno}"
                ) from None
            if dim < 1:
                raise BankFormatError(f"{path}: dim must be >= 1 at line {lineno}")
            continue
        fields = line.split(",")
        if dim is None:
            dim = len(fields) - 1
            if dim < 1:
                raise BankFormatError(f"{path}: need at least one feature column at line {lineno}")
        if len(fields) != dim + 1:
            raise BankFormatError(
                f"{path}: expected {dim} feature values plus a label, "
                f"got {len(fields)} fields at line {lineno}"
            )
        row = []
        for field in fields[:-1]:
            try:
                value = np.float32(float(field))
            except ValueError:
                raise BankFormatError(
                    f"{path}: bad feature value {field.strip()!r} at line {lineno}"
                ) from None
            if not np.isfinite(value):
                raise BankFormatError(f"{path}: non-finite feature value at line {lineno}")
            row.append(value)
        label_field = fields[-1].strip()
        if label_field not in ("0", "1"):
            raise BankFormatError(
                f"{path}: label {label_field!r} outside {{0,1}} at line {lineno}"
            )
        feats.append(row)
        labels.append(int(label_field))
    if not feats:
        raise BankFormatError(f"{path}: no samples found")
    return FeatureBank(np.array(feats, dtype=np.float32), labels)


def _atomic_write(path, data: bytes) -> None:
    """Write bytes to ``path`` via a temp file so failures leave no partial file."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def save_bank(bank: FeatureBank, path, format: str = BINARY_FORMAT) -> None:
    """Write a bank to ``path`` in the chosen format ("binary" or "csv")."""
    if format == BINARY_FORMAT:
        _atomic_write(path, _to_binary(bank))
    elif format == CSV_FORMAT:
        _atomic_write(path, _to_csv(bank).encode("ascii"))
    else:
        raise ValueError(f"unknown bank format {format!r}")


def load_bank(path, format: str = BINARY_FORMAT) -> FeatureBank:
    """Read a bank from ``path``; raises BankFormatError on malformed input."""
    path = os.fspath(path)
    if format == BINARY_FORMAT:
        with open(path, "rb") as fh:
            return _from_binary(fh.read(), path)
    if format == CSV_FORMAT:
        with open(path, "r", encoding="utf-8") as fh:
            return _from_csv(fh.read(), path)
    raise ValueError(f"unknown bank format {format!r}")


def _ceil_fraction(fraction: float, n: int) -> int:
    # ceil(fraction * n) with a guard against float dust: 0.1 * 30 evaluates to
    # 3.0000000000000004 and must still count as 3.
    return max(1, math.ceil(fraction * n - 1e-9))


def split_bank(bank: FeatureBank, val_fraction: float, seed: int):
    """Split into (train, validation) with per-class proportions preserved.

    Each class is shuffled under ``seed`` and its first ceil(val_fraction * n_c)
    samples go to validation. Within each side, samples keep their original
    relative order. Raises ValueError if a present class would leave either
    side empty.
    """
    if not (isinstance(val_fraction, float) or isinstance(val_fraction, int)):
        raise ValueError("val_fraction must be a real number")
    if not 0.0 < float(val_fraction) < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    val_mask = np.zeros(bank.n_samples, dtype=bool)
    for label in (0, 1):
        idx = np.nonzero(bank.labels == label)[0]
        if idx.size == 0:
            continue
        n_val = _ceil_fraction(float(val_fraction), idx.size)
        if n_val >= idx.size:
            raise ValueError(
                f"val_fraction {val_fraction} leaves no training samples for label {label}"
            )
        chosen = rng.permutation(idx.size)[:n_val]
        val_mask[idx[chosen]] = True
    train = FeatureBank(bank.features[~val_mask], bank.labels[~val_mask])
    val = FeatureBank(bank.features[val_mask], bank.labels[val_mask])
    return train, val


def generate_synthetic(n_real: int, n_fake: int, dim: int, separation: float, seed: int) -> FeatureBank:
    """Build a Gaussian two-class bank for pipeline tests.

    Real samples (label 1) are drawn first with their first coordinate shifted
    by +separation/2, then fake samples (label 0) shifted by -separation/2.
    """
    if n_real < 1 or n_fake < 1:
        raise ValueError("need at least one sample per class")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if not np.isfinite(separation) or separation < 0:
        raise ValueError("separation must be finite and >= 0")
    rng = np.random.default_rng(seed)
    real = rng.standard_normal((n_real, dim))
    real[:, 0] += separation / 2.0
    fake = rng.standard_normal((n_fake, dim))
    fake[:, 0] -= separation / 2.0
    features = np.concatenate([real, fake]).astype(np.float32)
    labels = np.concatenate([np.ones(n_real, dtype=np.uint8), np.zeros(n_fake, dtype=np.uint8)])
    return FeatureBank(features, labels)
