"""Training loop (Adam + cosine decay) and checkpoint serialization.

Noise only ever enters the forward pass; backward runs on the recorded
graph where the injected noise is a constant.  Given the same config and
data order, two runs produce bit-identical parameter trajectories.
"""

from __future__ import annotations

import csv
import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset
from .errors import FormatError, InputError, TrainingDiverged, UsageError
from .model import (
    KIND_CONV,
    KIND_DENSE,
    KIND_FLATTEN,
    KIND_MAXPOOL,
    KIND_RELU,
    LayerSpec,
    ModelGraph,
    forward,
    predict_accuracy,
)
from .noise import NoiseContext, NoiseSchedule, RngStream


@dataclass(frozen=True)
class TrainConfig:
    """Paper-mirroring defaults: batch 128, lr0 1e-3, Adam(0.9, 0.999, 1e-8).

    Desk-scale default is 60 epochs; the full-scale 400 remains a config
    value away.
    """

    lr0: float = 0.001
    epochs: int = 60
    batch_size: int = 128
    seed: int = 0
    schedule: NoiseSchedule = NoiseSchedule.none()
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle: bool = True

    def __post_init__(self):
        if self.lr0 <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise UsageError("lr0, epochs and batch_size must be positive")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @staticmethod
    def fresh(params: list[np.ndarray]) -> "AdamState":
        return AdamState(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            t=0,
        )


def cosine_lr(lr0: float, t: int, total_steps: int) -> float:
    """lr0 * 0.5 * (1 + cos(pi * t / T)); lr0 at t=0, exactly 0 at t=T."""
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    names: Optional[list[str]] = None,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; pure function of its inputs."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise UsageError("params, grads and state must have matching lengths")
    t = state.t + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_params, new_m, new_v = [], [], []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise UsageError(f"parameter/gradient shape mismatch at index {i}")
        if not np.isfinite(g).all():
            name = names[i] if names else f"param[{i}]"
            raise InputError(f"non-finite gradient for {name}")
        m = state.m[i] * np.float32(beta1) + g * np.float32(1.0 - beta1)
        v = state.v[i] * np.float32(beta2) + (g * g) * np.float32(1.0 - beta2)
        m_hat = m / np.float32(bc1)
        v_hat = v / np.float32(bc2)
        new_params.append(p - np.float32(lr) * m_hat / (np.sqrt(v_hat) + np.float32(eps)))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)


@dataclass
class TrainLog:
    """Per-epoch (loss, clean accuracy on the training data, last lr)."""

    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "loss", "clean_acc", "lr"])
            for epoch, loss, acc, lr in self.rows:
                w.writerow([epoch, repr(loss), repr(acc), repr(lr)])

    @property
    def final_clean_acc(self) -> float:
        return self.rows[-1][2]


def _clean_accuracy(model: ModelGraph, data: Dataset, batch_size: int = 256) -> float:
    correct = 0
    for start in range(0, len(data), batch_size):
        x = Tensor(data.images[start : start + batch_size])
        logits = forward(model, x)
        correct += int(
            (logits.data.argmax(axis=1) == data.labels[start : start + batch_size]).sum()
        )
    return correct / len(data)


def train(
    model: ModelGraph,
    data: Dataset,
    cfg: TrainConfig,
    progress: Optional[Callable[[int, float, float], None]] = None,
) -> tuple[ModelGraph, TrainLog]:
    """Train in place; returns the model and the per-epoch log.

    Per batch: draw per-image sigma_var, noisy-or-clean forward per the
    schedule, cross-entropy, backward, Adam with per-step cosine decay.
    """
    if len(data) == 0:
        raise UsageError("training data is empty")
    if data.sample_shape != model.input_shape:
        raise UsageError(
            f"data sample shape {data.sample_shape} != model input {model.input_shape}"
        )
    n = len(data)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    root = RngStream(cfg.seed)
    named = model.parameters()
    names = [name for name, _ in named]
    tensors = [p for _, p in named]
    state = AdamState.fresh([p.data for p in tensors])
    log = TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        if cfg.shuffle:
            order = root.child("shuffle", epoch).permutation(n)
        else:
            order = np.arange(n)
        loss_sum = 0.0
        last_lr = 0.0
        for b_idx, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            x = Tensor(data.images[idx])
            labels = data.labels[idx]
            ctx = NoiseContext.for_batch(
                cfg.schedule, root.child("noise", epoch, b_idx), len(idx), mode="train"
            )
            with Tape() as tape:
                logits = forward(model, x, ctx)
                loss = ad.softmax_cross_entropy(logits, labels)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise TrainingDiverged(epoch, b_idx)
            ad.backward(tape, loss)
            last_lr = cosine_lr(cfg.lr0, step, total_steps)
            try:
                new_params, state = adam_step(
                    [p.data for p in tensors],
                    [p.grad for p in tensors],
                    state,
                    last_lr,
                    cfg.beta1,
                    cfg.beta2,
                    cfg.eps,
                    names=names,
                )
            except InputError as exc:
                raise TrainingDiverged(epoch, b_idx, str(exc)) from exc
            for p, new in zip(tensors, new_params):
                p.data = new
            model.zero_grad()
            loss_sum += loss_val * len(idx)
            step += 1
        epoch_loss = loss_sum / n
        clean_acc = _clean_accuracy(model, data)
        log.rows.append((epoch, epoch_loss, clean_acc, last_lr))
        if progress is not None:
            progress(epoch, epoch_loss, clean_acc)
    return model, log


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
#
# magic "NFCK", u16 version=1, u16 record count, then per record:
#   kind tag (u8), rank (u8), dims (u32 each), payload (little-endian f32);
# trailing u32 CRC32 over all payload bytes.  Multi-byte integers are
# little-endian.  Record tag 0 holds the model input shape (dims only); for
# dense/conv records the payload is weight then bias.

_MAGIC = b"NFCK"
_VERSION = 1
_TAG_INPUT = 0
_KIND_TO_TAG = {KIND_DENSE: 1, KIND_CONV: 2, KIND_RELU: 3, KIND_MAXPOOL: 4, KIND_FLATTEN: 5}
_TAG_TO_KIND = {v: k for k, v in _KIND_TO_TAG.items()}


def _layer_payload(layer: LayerSpec) -> bytes:
    if layer.kind in (KIND_DENSE, KIND_CONV):
        return (
            layer.weight.data.astype("<f4").tobytes()
            + layer.bias.data.astype("<f4").tobytes()
        )
    return b""


def save_checkpoint(model: ModelGraph, path: str) -> None:
    records = [(
        _TAG_INPUT,
        tuple(model.input_shape),
        b"",
    )]
    for layer in model.layers:
        records.append((_KIND_TO_TAG[layer.kind], layer.dims, _layer_payload(layer)))
    crc = 0
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<HH", _VERSION, len(records))
    for tag, dims, payload in records:
        blob += struct.pack("<BB", tag, len(dims))
        blob += struct.pack(f"<{len(dims)}I", *dims)
        blob += payload
        crc = zlib.crc32(payload, crc)
    blob += struct.pack("<I", crc & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(blob))


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(
                f"{self.path}: truncated checkpoint at byte {self.pos} "
                f"(wanted {n} more bytes)"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out


def _payload_floats(tag: int, dims: tuple) -> int:
    if tag == _KIND_TO_TAG[KIND_DENSE]:
        fin, fout = dims
        return fin * fout + fout
    if tag == _KIND_TO_TAG[KIND_CONV]:
        cin, cout, k, _, _ = dims
        return cout * cin * k * k + cout
    return 0


def load_checkpoint(path: str, expected: Optional[ModelGraph] = None) -> ModelGraph:
    """Reconstruct a model from a checkpoint file.

    The loaded graph gets the default injection points; callers adjust with
    :meth:`ModelGraph.with_injection_points` as needed.  With ``expected``
    given, the stored architecture must match that graph's structure.
    """
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(blob, path)
    if r.take(4) != _MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    version, count = struct.unpack("<HH", r.take(4))
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    input_shape: Optional[tuple] = None
    layers: list[LayerSpec] = []
    crc = 0
    for rec in range(count):
        tag, rank = struct.unpack("<BB", r.take(2))
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        if tag == _TAG_INPUT:
            if rec != 0:
                raise FormatError(f"{path}: input record must come first")
            input_shape = dims
            continue
        if tag not in _TAG_TO_KIND:
            raise FormatError(f"{path}: unknown layer tag {tag}")
        kind = _TAG_TO_KIND[tag]
        nfloats = _payload_floats(tag, dims)
        payload = r.take(4 * nfloats)
        crc = zlib.crc32(payload, crc)
        if kind == KIND_DENSE:
            fin, fout = dims
            flat = np.frombuffer(payload, dtype="<f4")
            w = Tensor(flat[: fin * fout].reshape(fin, fout), requires_grad=True)
            b = Tensor(flat[fin * fout :].copy(), requires_grad=True)
            layers.append(LayerSpec(kind, dims, weight=w, bias=b))
        elif kind == KIND_CONV:
            cin, cout, k, stride, pad = dims
            flat = np.frombuffer(payload, dtype="<f4")
            w = Tensor(
                flat[: cout * cin * k * k].reshape(cout, cin, k, k),
                requires_grad=True,
            )
            b = Tensor(flat[cout * cin * k * k :].copy(), requires_grad=True)
            layers.append(LayerSpec(kind, dims, weight=w, bias=b))
        else:
            layers.append(LayerSpec(kind, dims))
    (stored_crc,) = struct.unpack("<I", r.take(4))
    if r.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.pos} trailing bytes")
    if stored_crc != (crc & 0xFFFFFFFF):
        raise FormatError(f"{path}: payload CRC mismatch")
    if input_shape is None:
        raise FormatError(f"{path}: missing input-shape record")
    if not layers or layers[-1].kind != KIND_DENSE:
        raise FormatError(f"{path}: final layer must be dense")
    num_classes = layers[-1].dims[1]
    try:
        graph = ModelGraph(layers, input_shape, num_classes)
    except Exception as exc:
        raise FormatError(f"{path}: inconsistent checkpoint structure: {exc}") from exc
    if expected is not None:
        want = [(l.kind, l.dims) for l in expected.layers]
        got = [(l.kind, l.dims) for l in graph.layers]
        if want != got or expected.input_shape != graph.input_shape:
            raise FormatError(
                f"{path}: checkpoint architecture {got} with input "
                f"{graph.input_shape} disagrees with expected {want} with input "
                f"{expected.input_shape}"
            )
    return graph
