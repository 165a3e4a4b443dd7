"""Filter and feature-map analyses plus the operator approximation experiment.

* Salient positions: for a filter reshaped to ``(k*k, c)`` the norm of each
  row (kernel position) across channels; the salient position is the argmax.
* Channel similarity: cosine similarity between flattened channel maps.
* Approximation: fit "spatial operator + pointwise conv" students to the
  outputs of a regular 3x3 convolution with an MSE loss.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError, TrainingError
from .operators import (ConvSpec, ConvWeights, conv_backward_data_weights, conv_forward,
                        init_conv_weights)
from .tensor import DTYPE, Tensor, splitmix64, tensor_new

SPLIT = (0.7, 0.1, 0.2)


def frobenius_position_norms(filt) -> np.ndarray:
    """Per-position norms of one filter.

    ``filt`` is ``(k*k, c)`` (positions by channels) or ``(k, k, c)``. Returns
    ``k*k`` values ``sqrt(sum_j f[i, j]**2)``.
    """
    f = np.asarray(filt, dtype=np.float64)
    if f.ndim == 3:
        f = f.reshape(f.shape[0] * f.shape[1], f.shape[2])
    if f.ndim != 2:
        raise ShapeError(f"filter must be (k*k, c) or (k, k, c), got {f.shape}")
    return np.sqrt(np.sum(f * f, axis=1))


def conv_filters(weight: np.ndarray) -> list:
    """Split an ``(out, in, k, k)`` conv weight into ``(k*k, in)`` per-filter views."""
    o, c, k, _ = weight.shape
    return [weight[i].reshape(c, k * k).T for i in range(o)]


def salient_position(filt) -> int:
    """1-based index of the largest position norm; ties go to the lowest index."""
    return int(np.argmax(frobenius_position_norms(filt))) + 1


@dataclass
class SalientHistogram:
    k: int
    counts: np.ndarray
    per_stage: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def as_mapping(self) -> dict:
        """Non-zero bins keyed by 1-based position."""
        return {i + 1: int(v) for i, v in enumerate(self.counts) if v}

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "total": self.total,
            "counts": [int(v) for v in self.counts],
            "per_stage": {str(s): [int(v) for v in c] for s, c in self.per_stage.items()},
        }

    def csv_rows(self) -> list:
        rows = [["stage", "position", "count"]]
        for stage, counts in self.per_stage.items():
            rows += [[stage, i + 1, int(v)] for i, v in enumerate(counts)]
        rows += [["all", i + 1, int(v)] for i, v in enumerate(self.counts)]
        return rows


def salient_histogram(filters, stages=None, k: Optional[int] = None) -> SalientHistogram:
    """Histogram of salient positions over ``filters`` (each ``(k*k, c)`` or ``(k, k, c)``).

    ``stages`` optionally labels each filter for the per-stage breakdown.
    """
    filters = list(filters)
    if not filters:
        size = 0 if k is None else k * k
        return SalientHistogram(k or 0, np.zeros(size, dtype=np.int64))
    norms = [frobenius_position_norms(f) for f in filters]
    positions = norms[0].shape[0]
    kk = math.isqrt(positions)
    if kk * kk != positions or (k is not None and k != kk):
        raise ShapeError(f"filter has {positions} positions, not a square kernel of size {k or '?'}")
    if any(n.shape[0] != positions for n in norms):
        raise ShapeError("all filters must share the same kernel size")
    hist = SalientHistogram(kk, np.zeros(positions, dtype=np.int64))
    labels = stages if stages is not None else [None] * len(filters)
    if len(labels) != len(filters):
        raise ShapeError("one stage label per filter is required")
    for n, stage in zip(norms, labels):
        pos = int(np.argmax(n))
        hist.counts[pos] += 1
        if stage is not None:
            hist.per_stage.setdefault(stage, np.zeros(positions, dtype=np.int64))[pos] += 1
    return hist


def network_histogram(net, kernel: int = 3) -> SalientHistogram:
    """Salient-position histogram over every ``kernel x kernel`` filter in a network.

    Stage labels count residual-block runs from 1.
    """
    from .arch import Block, ConvLayer

    filters, stages = [], []
    stage = 0
    prev_block = False
    for entry in net.entries:
        is_block = isinstance(entry, Block)
        if is_block and not prev_block:
            stage += 1
        prev_block = is_block
        layers = entry.layers if is_block else (entry,)
        for layer in layers:
            if isinstance(layer, ConvLayer) and layer.spec.kernel == kernel:
                fs = conv_filters(layer.weights.filter)
                filters += fs
                stages += [stage if is_block else 0] * len(fs)
    return salient_histogram(filters, stages, k=kernel)


class ZeroChannelWarning(RuntimeWarning):
    pass


def channel_similarity(x: Tensor) -> np.ndarray:
    """Cosine similarity between channels, each flattened over batch and space.

    All-zero channels get similarity 0 with everything (including themselves)
    and trigger a :class:`ZeroChannelWarning`.
    """
    if x.c < 2:
        raise ShapeError("channel similarity needs at least 2 channels")
    v = x.data.transpose(1, 0, 2, 3).reshape(x.c, -1).astype(np.float64)
    norms = np.linalg.norm(v, axis=1)
    zero = norms == 0
    if zero.any():
        warnings.warn(f"all-zero channels {np.flatnonzero(zero).tolist()} have undefined similarity",
                      ZeroChannelWarning, stacklevel=2)
    safe = np.where(zero, 1.0, norms)
    u = v / safe[:, None]
    sim = np.clip(u @ u.T, -1.0, 1.0)
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    idx = np.flatnonzero(~zero)
    sim[idx, idx] = 1.0
    return sim


# --- approximation experiment -------------------------------------------------

STUDENT_KINDS = ("partial", "depthwise", "group")


def student_spec(kind: str, channels: int, ratio: float = 0.25, groups: int = 16) -> ConvSpec:
    if kind == "partial":
        return ConvSpec.partial(channels, ratio)
    if kind == "depthwise":
        return ConvSpec.depthwise(channels)
    if kind == "group":
        return ConvSpec.group(channels, channels, groups)
    raise ConfigError(f"student kind must be one of {STUDENT_KINDS}, got {kind!r}")


def synthetic_dataset(n: int, c: int, h: int, w: int, seed: int) -> Tensor:
    """Seeded uniform ``[-1, 1)`` feature maps."""
    return tensor_new((n, c, h, w), "uniform", seed=seed, low=-1.0, high=1.0)


def split_indices(n: int, seed: int, fractions=SPLIT):
    """Seeded permutation cut into train/val/test index arrays."""
    order = np.argsort(splitmix64(seed, n), kind="stable")
    n_train = round(fractions[0] * n)
    n_val = round(fractions[1] * n)
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


@dataclass
class ApproxRun:
    teacher: ConvSpec
    teacher_weights: ConvWeights
    spatial: ConvSpec
    spatial_weights: ConvWeights
    pointwise_weights: ConvWeights
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    @property
    def student_kind(self) -> str:
        return self.spatial.kind

    @property
    def final_test_mse(self) -> float:
        return self.test[-1]

    def curve_rows(self) -> list:
        return [[e, tr, va, te] for e, (tr, va, te) in enumerate(zip(self.train, self.val, self.test))]

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train", "val", "test"])
            for e, tr, va, te in self.curve_rows():
                writer.writerow([e, repr(tr), repr(va), repr(te)])
        return path


def _mse(pred: np.ndarray, target: np.ndarray) -> float:
    d = pred.astype(np.float64) - target
    return float(np.mean(d * d))


def run_approximation(teacher: ConvSpec, teacher_weights: ConvWeights, student_kind,
                      dataset: Tensor, epochs: int = 400, lr: float = 8.0, seed: int = 0, *,
                      ratio: float = 0.25, groups: int = 16, batch_size: Optional[int] = None,
                      init: Optional[tuple] = None, train_spatial: bool = True) -> ApproxRun:
    """Fit ``pointwise(spatial(x))`` to ``teacher(x)`` with plain SGD on MSE.

    The dataset is split 70/10/20 by a seeded permutation. ``batch_size=None``
    means full-batch gradient descent. Losses are recorded on all three
    splits before training (index 0) and after every epoch. ``student_kind``
    is a kind name or a ready-made spatial ConvSpec.
    """
    c = teacher.in_channels
    if dataset.c != c:
        raise ShapeError(f"dataset has {dataset.c} channels, teacher expects {c}")
    if teacher.out_channels != c:
        raise ConfigError("the student keeps the channel count, so the teacher must too")
    if isinstance(student_kind, ConvSpec):
        spatial = student_kind
    else:
        spatial = student_spec(student_kind, c, ratio, groups)
    pw = ConvSpec.pointwise(c, c)
    if init is None:
        sw = init_conv_weights(spatial, int(splitmix64(seed, 1, 11)[0]))
        pww = init_conv_weights(pw, int(splitmix64(seed, 1, 12)[0]))
    else:
        sw, pww = ConvWeights(init[0].filter.copy()), ConvWeights(init[1].filter.copy())
        sw.check(spatial)
        pww.check(pw)

    targets = conv_forward(teacher, teacher_weights, dataset).data
    tr_idx, va_idx, te_idx = split_indices(dataset.n, seed)
    x_tr = dataset.data[tr_idx]
    parts = [(Tensor.wrap(dataset.data[i]), targets[i]) for i in (tr_idx, va_idx, te_idx)]
    run = ApproxRun(teacher, teacher_weights, spatial, sw, pww)

    def record(epoch):
        losses = []
        for x, t in parts:
            losses.append(_mse(conv_forward(pw, pww, conv_forward(spatial, sw, x)).data, t) if len(t) else 0.0)
        if not all(math.isfinite(v) for v in losses):
            raise TrainingError(f"non-finite loss at epoch {epoch}", epoch)
        run.train.append(losses[0])
        run.val.append(losses[1])
        run.test.append(losses[2])

    record(0)
    n_tr = len(tr_idx)
    step = n_tr if batch_size is None else batch_size
    for epoch in range(1, epochs + 1):
        order = np.arange(n_tr) if batch_size is None else \
            np.argsort(splitmix64(seed + epoch, n_tr), kind="stable")
        for start in range(0, n_tr, step):
            batch = order[start:start + step]
            xb = Tensor.wrap(x_tr[batch])
            tb = targets[tr_idx[batch]]
            h = conv_forward(spatial, sw, xb)
            y = conv_forward(pw, pww, h)
            dy = (2.0 / y.data.size) * (y.data - tb)
            dh, dpw = conv_backward_data_weights(pw, pww, h, Tensor.wrap(dy.astype(DTYPE)))
            pww = ConvWeights(pww.filter - DTYPE(lr) * dpw)
            if train_spatial:
                _, dsw = conv_backward_data_weights(spatial, sw, xb, dh)
                sw = ConvWeights(sw.filter - DTYPE(lr) * dsw)
        record(epoch)
    run.spatial_weights, run.pointwise_weights = sw, pww
    return run


@dataclass
class ApproxConfig:
    """JSON-configurable approximation run (see the ``approx`` CLI command)."""

    teacher_seed: int = 0
    student_kind: str = "partial"
    r: float = 0.25
    g: int = 16
    epochs: int = 400
    lr: float = 8.0
    n: int = 256
    c: int = 16
    h: int = 14
    w: int = 14
    dataset_seed: int = 0
    seed: int = 0
    batch_size: Optional[int] = None

    @classmethod
    def from_json(cls, obj: dict) -> "ApproxConfig":
        known = {k: v for k, v in obj.items() if k != "dataset"}
        ds = obj.get("dataset", {})
        unknown = set(known) - set(cls.__dataclass_fields__) | set(ds) - {"n", "c", "h", "w", "seed"}
        if unknown:
            raise ConfigError(f"unknown approx config keys: {sorted(unknown)}")
        cfg = cls(**known)
        for key in ("n", "c", "h", "w"):
            if key in ds:
                setattr(cfg, key, int(ds[key]))
        if "seed" in ds:
            cfg.dataset_seed = int(ds["seed"])
        return cfg

    def run(self) -> ApproxRun:
        teacher = ConvSpec.regular(self.c, self.c, 3)
        tw = init_conv_weights(teacher, self.teacher_seed)
        data = synthetic_dataset(self.n, self.c, self.h, self.w, self.dataset_seed)
        return run_approximation(teacher, tw, self.student_kind, data, self.epochs, self.lr, self.seed,
                                 ratio=self.r, groups=self.g, batch_size=self.batch_size)
