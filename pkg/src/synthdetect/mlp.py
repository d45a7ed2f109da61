"""A small fully-connected detection head with hand-written forward/backward.

Architecture per hidden layer: affine, batch norm, ReLU, inverted dropout.
The output layer is a plain affine map to a single logit (no sigmoid; losses
work on raw logits). All math runs in float64 and matrix products go through
``np.einsum(..., optimize=False)``, whose summation order does not depend on
how rows are batched, so evaluation logits are bitwise identical no matter
how a bank is chunked.

Batch norm uses biased (population) variance both for normalization and for
the running update ``running = (1 - momentum) * running + momentum * batch``.
Running stats are only touched in train mode when ``update_running`` is on.

Checkpoints (magic ``MLPC``) store the architecture header, every parameter
and running-stat array as little-endian float64 in a fixed documented order,
and optionally the optimizer state for resuming.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bank import FeatureBank, _atomic_write
from .optim import AdamWState
from .validation import as_feature_matrix, as_score_vector

TRAIN = "train"
EVAL = "eval"

_CKPT_MAGIC = b"MLPC"
_CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHII")  # magic, version, input_dim, n_hidden


class CheckpointFormatError(ValueError):
    """A checkpoint file does not conform to the format."""


@dataclass(frozen=True)
class MlpSpec:
    """Shape and regularization knobs of the head."""

    input_dim: int = 768
    hidden_dims: tuple[int, ...] = (512, 256)
    dropout_rate: float = 0.3
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if any(d < 1 for d in self.hidden_dims):
            raise ValueError(f"hidden widths must be >= 1, got {self.hidden_dims}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not self.bn_epsilon > 0:
            raise ValueError(f"bn_epsilon must be > 0, got {self.bn_epsilon}")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ValueError(f"bn_momentum must be in (0, 1), got {self.bn_momentum}")

    @property
    def depth(self) -> int:
        """Number of affine layers, hidden plus output."""
        return len(self.hidden_dims) + 1


def hidden_dims_for_depth(depth: int, base: Sequence[int] = (512, 256)) -> tuple[int, ...]:
    """Widths for a deeper variant: the base stack, then its last width repeated."""
    base = tuple(int(d) for d in base)
    if depth < len(base) + 1:
        raise ValueError(f"depth {depth} is shallower than the base stack {base}")
    return base + (base[-1],) * (depth - 1 - len(base))


def trainable_keys(spec: MlpSpec) -> tuple[str, ...]:
    keys: list[str] = []
    for i in range(len(spec.hidden_dims)):
        keys += [f"h{i}.weight", f"h{i}.bias", f"h{i}.bn_scale", f"h{i}.bn_shift"]
    keys += ["out.weight", "out.bias"]
    return tuple(keys)


def running_keys(spec: MlpSpec) -> tuple[str, ...]:
    keys: list[str] = []
    for i in range(len(spec.hidden_dims)):
        keys += [f"h{i}.bn_mean", f"h{i}.bn_var"]
    return tuple(keys)


@dataclass
class MlpParams:
    """Trainable parameters plus batch-norm running stats for one head."""

    spec: MlpSpec
    trainable: dict[str, np.ndarray]
    running: dict[str, np.ndarray]

    def copy(self) -> "MlpParams":
        return MlpParams(
            spec=self.spec,
            trainable={k: v.copy() for k, v in self.trainable.items()},
            running={k: v.copy() for k, v in self.running.items()},
        )


def _layer_sizes(spec: MlpSpec) -> list[tuple[int, int]]:
    dims = [spec.input_dim, *spec.hidden_dims, 1]
    return list(zip(dims[:-1], dims[1:]))


def init_params(spec: MlpSpec, seed: int) -> MlpParams:
    """Xavier-uniform weights (limit sqrt(6/(fan_in+fan_out))), zero biases,
    batch norm at identity (scale 1, shift 0, running mean 0, running var 1).
    Weights are drawn layer by layer from a generator seeded with ``seed``."""
    rng = np.random.default_rng(seed)
    trainable: dict[str, np.ndarray] = {}
    running: dict[str, np.ndarray] = {}
    sizes = _layer_sizes(spec)
    for i, (fan_in, fan_out) in enumerate(sizes[:-1]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        trainable[f"h{i}.weight"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        trainable[f"h{i}.bias"] = np.zeros(fan_out)
        trainable[f"h{i}.bn_scale"] = np.ones(fan_out)
        trainable[f"h{i}.bn_shift"] = np.zeros(fan_out)
        running[f"h{i}.bn_mean"] = np.zeros(fan_out)
        running[f"h{i}.bn_var"] = np.ones(fan_out)
    fan_in, fan_out = sizes[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    trainable["out.weight"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    trainable["out.bias"] = np.zeros(fan_out)
    return MlpParams(spec=spec, trainable=trainable, running=running)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Fixed-order product: unlike BLAS matmul, the result for any row subset is
    # bitwise identical to the matching rows of the full product.
    return np.einsum("nd,dh->nh", a, b, optimize=False)


@dataclass
class _HiddenCache:
    x_in: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    relu_mask: np.ndarray
    drop_mask: np.ndarray | None


@dataclass
class ForwardCache:
    """Intermediates from one forward pass, consumed by :func:`backward`."""

    mode: str
    hidden: list[_HiddenCache] = field(default_factory=list)
    final_in: np.ndarray | None = None
    logits: np.ndarray | None = None

    @property
    def dropout_masks(self) -> list[np.ndarray | None]:
        return [h.drop_mask for h in self.hidden]


def forward(
    params: MlpParams,
    batch,
    mode: str = EVAL,
    rng: np.random.Generator | None = None,
    *,
    dropout_masks: Sequence[np.ndarray | None] | None = None,
    update_running: bool = True,
):
    """Run the head on a batch, returning ``(logits, cache)``.

    Train mode normalizes with batch statistics (and needs batch size >= 2),
    applies dropout, and by default folds the batch statistics into the
    running estimates. Passing ``dropout_masks`` (from an earlier cache)
    replays the exact same dropout; otherwise masks come from ``rng``.
    Eval mode normalizes with running statistics and skips dropout.
    """
    spec = params.spec
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be '{TRAIN}' or '{EVAL}', got {mode!r}")
    x = as_feature_matrix(batch, dim=spec.input_dim, name="batch")
    if mode == TRAIN and x.shape[0] < 2:
        raise ValueError("train mode needs a batch of at least 2 samples")
    needs_masks = mode == TRAIN and spec.dropout_rate > 0 and dropout_masks is None
    if needs_masks and rng is None:
        raise ValueError("train mode with dropout needs an rng (or explicit dropout_masks)")
    if dropout_masks is not None and len(dropout_masks) != len(spec.hidden_dims):
        raise ValueError(
            f"got {len(dropout_masks)} dropout masks for {len(spec.hidden_dims)} hidden layers"
        )

    cache = ForwardCache(mode=mode)
    h = x
    for i in range(len(spec.hidden_dims)):
        x_in = h
        w = params.trainable[f"h{i}.weight"]
        a = _mm(x_in, w) + params.trainable[f"h{i}.bias"]
        if mode == TRAIN:
            mean = a.mean(axis=0)
            var = a.var(axis=0)  # biased, matches the running update below
            if update_running:
                m = spec.bn_momentum
                params.running[f"h{i}.bn_mean"] = (1.0 - m) * params.running[f"h{i}.bn_mean"] + m * mean
                params.running[f"h{i}.bn_var"] = (1.0 - m) * params.running[f"h{i}.bn_var"] + m * var
        else:
            mean = params.running[f"h{i}.bn_mean"]
            var = params.running[f"h{i}.bn_var"]
        inv_std = 1.0 / np.sqrt(var + spec.bn_epsilon)
        xhat = (a - mean) * inv_std
        z = params.trainable[f"h{i}.bn_scale"] * xhat + params.trainable[f"h{i}.bn_shift"]
        relu_mask = z > 0
        r = np.where(relu_mask, z, 0.0)
        drop_mask = None
        if mode == TRAIN and spec.dropout_rate > 0:
            if dropout_masks is not None:
                drop_mask = dropout_masks[i]
                if drop_mask is None or drop_mask.shape != r.shape:
                    raise ValueError(f"dropout mask {i} does not match layer shape {r.shape}")
            else:
                drop_mask = rng.random(r.shape) >= spec.dropout_rate
            h = r * drop_mask / (1.0 - spec.dropout_rate)
        else:
            h = r
        cache.hidden.append(
            _HiddenCache(x_in=x_in, xhat=xhat, inv_std=inv_std,
                         relu_mask=relu_mask, drop_mask=drop_mask)
        )
    cache.final_in = h
    logits = (_mm(h, params.trainable["out.weight"]) + params.trainable["out.bias"]).ravel()
    cache.logits = logits
    return logits, cache


def backward(params: MlpParams, cache: ForwardCache, d_logits) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every trainable array, given the
    loss derivative for each logit of a train-mode forward pass."""
    if cache.mode != TRAIN:
        raise ValueError("backward needs a cache from a train-mode forward pass")
    spec = params.spec
    if len(cache.hidden) != len(spec.hidden_dims):
        raise ValueError("cache does not match the parameter spec")
    g = as_score_vector(d_logits, n=cache.logits.size, name="d_logits")

    grads: dict[str, np.ndarray] = {}
    gout = g[:, None]
    grads["out.weight"] = np.einsum("nd,nk->dk", cache.final_in, gout, optimize=False)
    grads["out.bias"] = gout.sum(axis=0)
    dh = np.einsum("nk,dk->nd", gout, params.trainable["out.weight"], optimize=False)

    for i in reversed(range(len(spec.hidden_dims))):
        layer = cache.hidden[i]
        if layer.drop_mask is not None:
            dh = dh * layer.drop_mask / (1.0 - spec.dropout_rate)
        dh = np.where(layer.relu_mask, dh, 0.0)
        # batch norm backward through the batch statistics:
        # dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        grads[f"h{i}.bn_scale"] = (dh * layer.xhat).sum(axis=0)
        grads[f"h{i}.bn_shift"] = dh.sum(axis=0)
        dxhat = dh * params.trainable[f"h{i}.bn_scale"]
        da = layer.inv_std * (
            dxhat - dxhat.mean(axis=0) - layer.xhat * (dxhat * layer.xhat).mean(axis=0)
        )
        grads[f"h{i}.weight"] = np.einsum("nd,nh->dh", layer.x_in, da, optimize=False)
        grads[f"h{i}.bias"] = da.sum(axis=0)
        dh = np.einsum("nh,dh->nd", da, params.trainable[f"h{i}.weight"], optimize=False)
    return grads


def predict_logits(params: MlpParams, bank, batch_size: int | None = None) -> np.ndarray:
    """Eval-mode logits for a bank (or a feature matrix).

    Results are bitwise independent of ``batch_size`` because the underlying
    products are chunk-stable.
    """
    features = bank.features if isinstance(bank, FeatureBank) else bank
    x = as_feature_matrix(features, dim=params.spec.input_dim)
    if batch_size is None:
        batch_size = x.shape[0]
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    parts = []
    for start in range(0, x.shape[0], batch_size):
        logits, _ = forward(params, x[start : start + batch_size], EVAL)
        parts.append(logits)
    return np.concatenate(parts)


def _checkpoint_specs(spec: MlpSpec) -> list[str]:
    order: list[str] = []
    for i in range(len(spec.hidden_dims)):
        order += [
            f"h{i}.weight", f"h{i}.bias", f"h{i}.bn_scale", f"h{i}.bn_shift",
            f"h{i}.bn_mean", f"h{i}.bn_var",
        ]
    order += ["out.weight", "out.bias"]
    return order


def _array_shapes(spec: MlpSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    sizes = _layer_sizes(spec)
    for i, (fan_in, fan_out) in enumerate(sizes[:-1]):
        shapes[f"h{i}.weight"] = (fan_in, fan_out)
        for part in ("bias", "bn_scale", "bn_shift", "bn_mean", "bn_var"):
            shapes[f"h{i}.{part}"] = (fan_out,)
    fan_in, fan_out = sizes[-1]
    shapes["out.weight"] = (fan_in, fan_out)
    shapes["out.bias"] = (fan_out,)
    return shapes


def save_checkpoint(params: MlpParams, path, opt_state: AdamWState | None = None) -> None:
    """Serialize params (and optionally optimizer state) to ``path``.

    Layout after the header: hidden widths (u32 each), dropout rate, bn
    epsilon, bn momentum (f64 each), a has-optimizer flag byte, then for each
    hidden layer weight/bias/bn_scale/bn_shift/bn_mean/bn_var followed by
    out.weight/out.bias, every array as little-endian float64 in C order.
    With the flag set, the step count (u64) and the first/second moment
    arrays follow in trainable-key order.
    """
    spec = params.spec
    blob = bytearray()
    blob += _CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_VERSION, spec.input_dim, len(spec.hidden_dims))
    blob += struct.pack(f"<{len(spec.hidden_dims)}I", *spec.hidden_dims)
    blob += struct.pack("<3d", spec.dropout_rate, spec.bn_epsilon, spec.bn_momentum)
    blob += struct.pack("<B", 0 if opt_state is None else 1)
    merged = {**params.trainable, **params.running}
    for key in _checkpoint_specs(spec):
        blob += np.ascontiguousarray(merged[key], dtype="<f8").tobytes()
    if opt_state is not None:
        blob += struct.pack("<Q", opt_state.t)
        for moments in (opt_state.m, opt_state.v):
            for key in trainable_keys(spec):
                blob += np.ascontiguousarray(moments[key], dtype="<f8").tobytes()
    _atomic_write(path, bytes(blob))


def load_checkpoint(path):
    """Read a checkpoint, returning ``(MlpParams, AdamWState | None)``."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _CKPT_HEADER.size:
        raise CheckpointFormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, input_dim, n_hidden = _CKPT_HEADER.unpack_from(data)
    if magic != _CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != _CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    pos = _CKPT_HEADER.size
    need = pos + 4 * n_hidden + 24 + 1
    if len(data) < need:
        raise CheckpointFormatError(f"{path}: truncated at byte offset {len(data)}")
    hidden = struct.unpack_from(f"<{n_hidden}I", data, pos)
    pos += 4 * n_hidden
    dropout_rate, bn_epsilon, bn_momentum = struct.unpack_from("<3d", data, pos)
    pos += 24
    (has_opt,) = struct.unpack_from("<B", data, pos)
    pos += 1
    if has_opt not in (0, 1):
        raise CheckpointFormatError(f"{path}: bad optimizer flag {has_opt}")
    try:
        spec = MlpSpec(
            input_dim=input_dim, hidden_dims=hidden, dropout_rate=dropout_rate,
            bn_epsilon=bn_epsilon, bn_momentum=bn_momentum,
        )
    except ValueError as exc:
        raise CheckpointFormatError(f"{path}: bad architecture header: {exc}") from None

    shapes = _array_shapes(spec)

    def take(key: str) -> np.ndarray:
        nonlocal pos
        shape = shapes[key]
        count = int(np.prod(shape))
        end = pos + 8 * count
        if end > len(data):
            raise CheckpointFormatError(
                f"{path}: truncated in array {key!r} at byte offset {len(data)}"
            )
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        if not np.isfinite(arr).all():
            raise CheckpointFormatError(f"{path}: non-finite values in array {key!r}")
        pos = end
        return arr

    trainable: dict[str, np.ndarray] = {}
    running: dict[str, np.ndarray] = {}
    for key in _checkpoint_specs(spec):
        arr = take(key)
        if key.endswith(("bn_mean", "bn_var")):
            running[key] = arr
        else:
            trainable[key] = arr
    for key, arr in running.items():
        if key.endswith("bn_var") and not (arr > 0).all():
            raise CheckpointFormatError(f"{path}: running variance {key!r} must be positive")

    opt_state = None
    if has_opt:
        if pos + 8 > len(data):
            raise CheckpointFormatError(f"{path}: truncated optimizer state")
        (t,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        m = {key: take(key) for key in trainable_keys(spec)}
        v = {key: take(key) for key in trainable_keys(spec)}
        opt_state = AdamWState(m=m, v=v, t=int(t))
    if pos != len(data):
        raise CheckpointFormatError(
            f"{path}: {len(data) - pos} trailing bytes at byte offset {pos}"
        )
    return MlpParams(spec=spec, trainable=trainable, running=running), opt_state
