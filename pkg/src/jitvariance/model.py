"""Two-channel text CNN (commit message + code change) trained with plain SGD.

Every stochastic mechanism draws from an explicitly passed generator:

* W: ``init_params`` consumes the weight-init stream,
* D: one inverted-dropout mask per SGD step from the dropout stream,
* B: one training-set permutation per epoch from the batch-order stream,
* P: when enabled, the batch gradient is summed from ``workers`` shard
  gradients in an order drawn from an entropy-seeded generator, so
  floating-point non-associativity produces run-to-run drift.

Model math is numpy, float64 throughout. Training pins BLAS to one thread so
results do not depend on the thread pool.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .dataset import SplitDataset, TokenizedCommit, stack
from .seedctl import NiFactor, SeedPlan, entropy_seed, make_rng

PROB_CLAMP = 1e-12
CHANNELS = ("msg", "code")
CHECKPOINT_MAGIC = b"JITVAR-CKPT v1\n"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    embed_dim: int = 16
    filter_widths: tuple[int, ...] = (1, 2, 3)
    filters_per_width: int = 8
    hidden_units: int = 16
    dropout_p: float = 0.5
    learning_rate: float = 0.3
    batch_size: int = 32
    epochs: int = 10
    workers: int = 4

    def __post_init__(self):
        object.__setattr__(self, "filter_widths", tuple(sorted(set(int(w) for w in self.filter_widths))))
        counts = (self.embed_dim, self.filters_per_width, self.hidden_units, self.batch_size, self.epochs, self.workers)
        if min(counts) < 1 or not self.filter_widths or min(self.filter_widths) < 1:
            raise ValueError("all hyperparameter counts must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    @property
    def pooled_dim(self) -> int:
        return 2 * self.filters_per_width * len(self.filter_widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filter_widths"] = list(self.filter_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(**{**d, "filter_widths": tuple(d["filter_widths"])})


def tensor_shapes(hp: Hyperparams, vocab_size: int) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes, in the fixed order used for init and I/O."""
    shapes: dict[str, tuple[int, ...]] = {}
    for ch in CHANNELS:
        shapes[f"{ch}.embed"] = (vocab_size, hp.embed_dim)
    for ch in CHANNELS:
        for w in hp.filter_widths:
            shapes[f"{ch}.conv{w}.kernel"] = (w * hp.embed_dim, hp.filters_per_width)
            shapes[f"{ch}.conv{w}.bias"] = (hp.filters_per_width,)
    shapes["fc.weight"] = (hp.pooled_dim, hp.hidden_units)
    shapes["fc.bias"] = (hp.hidden_units,)
    shapes["out.weight"] = (hp.hidden_units,)
    shapes["out.bias"] = (1,)
    return shapes


def _fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if name == "out.weight":
        return shape[0], 1
    return shape[0], shape[1]


@dataclass
class ModelParams:
    hp: Hyperparams
    vocab_size: int
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.hp, self.vocab_size, {k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())

    def to_bytes(self) -> bytes:
        """Byte-stable checkpoint: magic line, JSON header line, then each
        tensor as little-endian float64 in row-major order."""
        header = {
            "hyperparams": self.hp.to_dict(),
            "vocab_size": self.vocab_size,
            "tensors": [[k, list(v.shape)] for k, v in self.tensors.items()],
        }
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for v in self.tensors.values():
            buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelParams":
        if not data.startswith(CHECKPOINT_MAGIC):
            raise ValueError("not a checkpoint (bad magic)")
        rest = data[len(CHECKPOINT_MAGIC) :]
        nl = rest.index(b"\n")
        header = json.loads(rest[:nl])
        offset = nl + 1
        tensors = {}
        for name, shape in header["tensors"]:
            count = math.prod(shape)
            arr = np.frombuffer(rest, dtype="<f8", count=count, offset=offset).reshape(shape)
            tensors[name] = arr.astype(np.float64)
            offset += 8 * count
        if offset != len(rest):
            raise ValueError("trailing bytes in checkpoint")
        return cls(Hyperparams.from_dict(header["hyperparams"]), header["vocab_size"], tensors)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def init_params(hp: Hyperparams, vocab_size: int, w_stream: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights in ``tensor_shapes`` order; biases zero and
    consume nothing from the stream."""
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    tensors = {}
    for name, shape in tensor_shapes(hp, vocab_size).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(name, shape)
            a = math.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = w_stream.uniform(-a, a, size=shape)
    return ModelParams(hp, vocab_size, tensors)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500.0, 500.0)))


def weighted_bce(probs, labels, class_weight: float) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    per_example = class_weight * y * -np.log(p) + (1.0 - y) * -np.log1p(-p)
    return float(per_example.mean())


# -- forward / backward on id matrices --------------------------------------


def _forward(params: ModelParams, msg: np.ndarray, code: np.ndarray, mask: np.ndarray | None):
    """Returns (probs, cache). ``mask`` is the already-scaled dropout
    multiplier [n, hidden] or None for eval mode.

    A width-w filter at position t sees tokens t..t+w-1; row block j of its
    kernel multiplies token t+j. All kernels of a channel are applied with one
    matmul against the embeddings and the shifted blocks are then summed.
    """
    hp = params.hp
    F = hp.filters_per_width
    d = hp.embed_dim
    pooled, conv_cache = [], []
    for ch, ids in zip(CHANNELS, (msg, code)):
        if ids.size and (ids.max() >= params.vocab_size or ids.min() < 0):
            raise ValueError(f"token id out of range for vocab_size {params.vocab_size}")
        L = ids.shape[1]
        if L < max(hp.filter_widths):
            raise ValueError(f"{ch} sequence length {L} shorter than widest filter")
        emb = params[f"{ch}.embed"][ids]
        blocks = [params[f"{ch}.conv{w}.kernel"][j * d : (j + 1) * d] for w in hp.filter_widths for j in range(w)]
        proj = emb @ np.concatenate(blocks, axis=1)  # [n, L, F * sum(widths)]
        col = 0
        for w in hp.filter_widths:
            span = L - w + 1
            pre = proj[:, 0:span, col : col + F].copy()
            for j in range(1, w):
                pre += proj[:, j : j + span, col + j * F : col + (j + 1) * F]
            pre += params[f"{ch}.conv{w}.bias"]
            col += w * F
            arg = pre.argmax(axis=1)  # first maximal position on ties
            best = np.take_along_axis(pre, arg[:, None, :], axis=1)[:, 0, :]
            pooled.append(np.maximum(best, 0.0))
            conv_cache.append((ch, w, arg))
    h0 = np.concatenate(pooled, axis=1)
    z1 = h0 @ params["fc.weight"] + params["fc.bias"]
    a1 = np.maximum(z1, 0.0)
    a1d = a1 * mask if mask is not None else a1
    z2 = a1d @ params["out.weight"] + params["out.bias"][0]
    probs = sigmoid(z2)
    return probs, ((msg, code), conv_cache, h0, z1, a1d, mask)


def _backward(params: ModelParams, probs, cache, labels: np.ndarray, class_weight: float, n_total: int):
    """Gradient of the batch-mean weighted BCE; ``n_total`` is the size of the
    full batch so shard gradients sum to the full-batch gradient.

    Max-over-time pooling passes gradient only to the argmax position, and
    ReLU passes none where the pooled value is not positive, so each filter
    touches exactly one window per example.
    """
    hp = params.hp
    (msg, code), conv_cache, h0, z1, a1d, mask = cache
    y = labels.astype(np.float64)
    grads: dict[str, np.ndarray] = {}

    dz2 = (class_weight * y * (probs - 1.0) + (1.0 - y) * probs) / n_total
    grads["out.weight"] = a1d.T @ dz2
    grads["out.bias"] = np.array([dz2.sum()])
    da1 = np.outer(dz2, params["out.weight"])
    if mask is not None:
        da1 = da1 * mask
    dz1 = da1 * (z1 > 0.0)
    grads["fc.weight"] = h0.T @ dz1
    grads["fc.bias"] = dz1.sum(axis=0)
    dh0 = dz1 @ params["fc.weight"].T

    d = hp.embed_dim
    F = hp.filters_per_width
    ids_by_ch = dict(zip(CHANNELS, (msg, code)))
    scatter: dict[str, tuple[list, list]] = {ch: ([], []) for ch in CHANNELS}
    for k, (ch, w, arg) in enumerate(conv_cache):
        g = dh0[:, k * F : (k + 1) * F] * (h0[:, k * F : (k + 1) * F] > 0.0)  # [n, F]
        ids = ids_by_ch[ch]
        rows = np.arange(ids.shape[0])[:, None]
        kernel = params[f"{ch}.conv{w}.kernel"]
        dkernel = np.empty_like(kernel)
        for j in range(w):
            tok = ids[rows, arg + j]  # [n, F]
            emb_sel = params[f"{ch}.embed"][tok]  # [n, F, d]
            dkernel[j * d : (j + 1) * d] = np.einsum("nfd,nf->df", emb_sel, g)
            scatter[ch][0].append(tok.ravel())
            scatter[ch][1].append((g[:, :, None] * kernel[j * d : (j + 1) * d].T[None]).reshape(-1, d))
        grads[f"{ch}.conv{w}.kernel"] = dkernel
        grads[f"{ch}.conv{w}.bias"] = g.sum(axis=0)
    for ch in CHANNELS:
        demb = np.zeros_like(params[f"{ch}.embed"])
        np.add.at(demb, np.concatenate(scatter[ch][0]), np.concatenate(scatter[ch][1]))
        grads[f"{ch}.embed"] = demb
    return {name: grads[name] for name in params.tensors}


def _dropout_mask(d_stream: np.random.Generator, n: int, hp: Hyperparams) -> np.ndarray:
    keep = d_stream.random((n, hp.hidden_units)) >= hp.dropout_p
    return keep / (1.0 - hp.dropout_p)


# -- public per-batch API ----------------------------------------------------


def forward(
    params: ModelParams,
    batch: Sequence[TokenizedCommit],
    mode: str = "eval",
    d_stream: np.random.Generator | None = None,
) -> np.ndarray:
    if not batch:
        raise ValueError("batch is empty")
    msg, code, _ = stack(batch)
    mask = None
    if mode == "train":
        if d_stream is None:
            raise ValueError("train mode needs a dropout stream")
        mask = _dropout_mask(d_stream, len(batch), params.hp)
    elif mode != "eval":
        raise ValueError(f"unknown mode {mode!r}")
    return _forward(params, msg, code, mask)[0]


def backward(
    params: ModelParams,
    batch: Sequence[TokenizedCommit],
    labels,
    class_weight: float,
    d_stream: np.random.Generator | None,
) -> dict[str, np.ndarray]:
    """Analytic gradients of ``weighted_bce(forward(...))``.

    The dropout mask is drawn from ``d_stream`` exactly as ``forward`` in
    train mode would draw it, so a stream in the same state reproduces the
    paired forward pass. ``d_stream=None`` differentiates the eval-mode net.
    """
    msg, code, _ = stack(batch)
    mask = _dropout_mask(d_stream, len(batch), params.hp) if d_stream is not None else None
    probs, cache = _forward(params, msg, code, mask)
    return _backward(params, probs, cache, np.asarray(labels), class_weight, len(batch))


def predict(params: ModelParams, test: Sequence[TokenizedCommit] | tuple, chunk: int = 256) -> np.ndarray:
    """Eval-mode scores; a fixed chunking keeps this a pure function."""
    msg, code, _ = test if isinstance(test, tuple) else stack(test)
    out = [_forward(params, msg[i : i + chunk], code[i : i + chunk], None)[0] for i in range(0, len(msg), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


# -- training ----------------------------------------------------------------


@dataclass
class TrainOutcome:
    params: ModelParams
    runtime_seconds: float
    epoch_losses: list[float]
    stream_digests: dict[str, str]
    combine_orders: list[tuple[int, ...]] = field(default_factory=list)
    combine_seed: int | None = None


def _shard_bounds(n: int, workers: int) -> list[tuple[int, int]]:
    edges = [n * k // workers for k in range(workers + 1)]
    return [(lo, hi) for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]


def train(
    split: SplitDataset,
    hp: Hyperparams,
    plan: SeedPlan,
    p_on: bool = False,
    combine_seed: int | None = None,
    record_orders: bool = False,
) -> TrainOutcome:
    """Mini-batch SGD for ``hp.epochs`` epochs.

    With ``p_on`` the combine order of shard gradients comes from a generator
    seeded by ``combine_seed``, or by fresh OS entropy when it is None.
    ``stream_digests`` fingerprint what each factor's stream produced (init
    tensors, dropout masks, epoch permutations, combine orders).
    """
    msg, code, labels = split.arrays("train")
    n = len(labels)
    if n == 0:
        raise ValueError("training set is empty")

    hashers = {f.value: hashlib.sha256() for f in (NiFactor.W, NiFactor.D, NiFactor.B, NiFactor.P)}
    combine_rng = None
    if p_on:
        if combine_seed is None:
            combine_seed = entropy_seed()
        combine_rng = make_rng(combine_seed)
    else:
        combine_seed = None

    # divergence is detected explicitly below, so overflow warnings are noise
    with threadpool_limits(limits=1), np.errstate(over="ignore", invalid="ignore"):
        params = init_params(hp, split.vocab_size, make_rng(plan.seeds[NiFactor.W]))
        hashers["W"].update(params.to_bytes())
        d_stream = make_rng(plan.seeds[NiFactor.D])
        b_stream = make_rng(plan.seeds[NiFactor.B])
        tensors = params.tensors
        lr = hp.learning_rate
        epoch_losses: list[float] = []
        orders: list[tuple[int, ...]] = []

        start = time.perf_counter()
        for epoch in range(hp.epochs):
            perm = b_stream.permutation(n)
            hashers["B"].update(perm.astype("<i8").tobytes())
            batch_losses = []
            for lo in range(0, n, hp.batch_size):
                idx = perm[lo : lo + hp.batch_size]
                bm, bc, by = msg[idx], code[idx], labels[idx]
                mask = _dropout_mask(d_stream, len(idx), hp)
                hashers["D"].update(np.packbits(mask > 0).tobytes())
                if combine_rng is None:
                    probs, cache = _forward(params, bm, bc, mask)
                    grads = _backward(params, probs, cache, by, split.class_weight, len(idx))
                else:
                    shards = []
                    prob_parts = []
                    for s_lo, s_hi in _shard_bounds(len(idx), hp.workers):
                        sp, sc = _forward(params, bm[s_lo:s_hi], bc[s_lo:s_hi], mask[s_lo:s_hi])
                        shards.append(_backward(params, sp, sc, by[s_lo:s_hi], split.class_weight, len(idx)))
                        prob_parts.append(sp)
                    probs = np.concatenate(prob_parts)
                    order = tuple(int(i) for i in combine_rng.permutation(len(shards)))
                    hashers["P"].update(np.asarray(order, dtype="<i8").tobytes())
                    if record_orders:
                        orders.append(order)
                    grads = shards[order[0]]
                    for k in order[1:]:
                        for name, g in shards[k].items():
                            grads[name] += g
                loss = weighted_bce(probs, by, split.class_weight)
                if not math.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch + 1}; learning rate {lr} is probably too high"
                    )
                batch_losses.append(loss)
                for name, g in grads.items():
                    tensors[name] -= lr * g
            epoch_losses.append(float(np.mean(batch_losses)))
        runtime = time.perf_counter() - start

    if not params.is_finite():
        raise TrainingDiverged("parameters became non-finite; learning rate is probably too high")
    return TrainOutcome(
        params=params,
        runtime_seconds=runtime,
        epoch_losses=epoch_losses,
        stream_digests={k: h.hexdigest() for k, h in hashers.items()},
        combine_orders=orders,
        combine_seed=combine_seed,
    )
