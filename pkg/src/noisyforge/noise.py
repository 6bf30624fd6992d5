"""Noise schedules and deterministic noise sampling.

Everything random in the package flows through :class:`RngStream`, a
counter-based generator: a 64-bit root seed plus a path of integer/string
components is hashed (SplitMix64-style finalizer) into a key, and draws are
pure functions of (key, draw counter).  There is no hidden state, so any
worker can resample any slice of the experiment independently and two runs
with the same seed agree bit for bit.

The schedule side implements the two training modes: plain noisy training
with a fixed sigma, and the variance-aware extension where the per-image
sigma is itself Gaussian,

    sigma_i ~ N(alpha * sigma_train, theta),   noise ~ N(0, sigma_i),

rectified at zero (negative sigma draws are clamped by default).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import UsageError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_INV_2_53 = float(2.0**-53)


def _mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int (wraps mod 2**64)."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX_A) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX_B) & _MASK64
    return z ^ (z >> 31)


def _mix64_vec(z: np.ndarray) -> np.ndarray:
    """Vectorized SplitMix64 finalizer on uint64 arrays."""
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_MIX_A)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_MIX_B)
    return z ^ (z >> np.uint64(31))


@lru_cache(maxsize=None)
def _tag(name: str) -> int:
    """Stable 64-bit hash of a string path component (process-independent)."""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _derive_key(root_seed: int, path: tuple[int, ...]) -> int:
    h = _mix64(root_seed & _MASK64)
    for part in path:
        h = _mix64((h ^ ((part * _GOLDEN) & _MASK64)) + _GOLDEN)
    return h


def _uniforms_at(key: int, counters: np.ndarray) -> np.ndarray:
    """Uniforms in (0, 1] for the given draw counters under ``key``."""
    v = _mix64_vec(np.uint64(key) + (counters + np.uint64(1)) * np.uint64(_GOLDEN))
    return ((v >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53


def _normals_at(key: int, n: int, offset: int = 0) -> np.ndarray:
    """Standard normals for draw counters [offset, offset+n) under ``key``.

    Box-Muller on counter pairs (2p, 2p+1); draw 2p takes the cosine branch
    and draw 2p+1 the sine branch, so any (offset, n) window is consistent
    with any other.
    """
    if n == 0:
        return np.empty(0, dtype=np.float64)
    p0 = offset // 2
    p1 = (offset + n - 1) // 2
    pairs = np.arange(p0, p1 + 1, dtype=np.uint64)
    u1 = _uniforms_at(key, pairs * np.uint64(2))
    u2 = _uniforms_at(key, pairs * np.uint64(2) + np.uint64(1))
    r = np.sqrt(-2.0 * np.log(u1))
    angle = (2.0 * np.pi) * u2
    out = np.empty(2 * len(pairs), dtype=np.float64)
    out[0::2] = r * np.cos(angle)
    out[1::2] = r * np.sin(angle)
    start = offset - 2 * p0
    return out[start : start + n]


def _normals_table(keys: np.ndarray, n: int) -> np.ndarray:
    """Standard normals, one row of length ``n`` per key (counters 0..n-1)."""
    keys = keys.reshape(-1, 1).astype(np.uint64)
    npairs = (n + 1) // 2
    pairs = np.arange(npairs, dtype=np.uint64)
    u1 = _uniforms_at_2d(keys, pairs * np.uint64(2))
    u2 = _uniforms_at_2d(keys, pairs * np.uint64(2) + np.uint64(1))
    r = np.sqrt(-2.0 * np.log(u1))
    angle = (2.0 * np.pi) * u2
    out = np.empty((keys.shape[0], 2 * npairs), dtype=np.float64)
    out[:, 0::2] = r * np.cos(angle)
    out[:, 1::2] = r * np.sin(angle)
    return out[:, :n]


def _uniforms_at_2d(keys: np.ndarray, counters: np.ndarray) -> np.ndarray:
    v = _mix64_vec(keys + (counters[None, :] + np.uint64(1)) * np.uint64(_GOLDEN))
    return ((v >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53


@dataclass(frozen=True)
class RngStream:
    """A deterministic, forkable random stream.

    ``path`` components are appended with :meth:`child`; strings are hashed,
    integers are used as-is.  The final component conventionally acts as the
    draw counter, but draws themselves are indexed explicitly so a stream is
    reusable (same stream, same values).
    """

    root_seed: int
    path: tuple[int, ...] = ()

    def child(self, *parts: Union[int, str]) -> "RngStream":
        encoded = tuple(_tag(p) if isinstance(p, str) else int(p) for p in parts)
        return RngStream(self.root_seed, self.path + encoded)

    @property
    def key(self) -> int:
        return _derive_key(self.root_seed, self.path)

    def uniforms(self, n: int, offset: int = 0) -> np.ndarray:
        """``n`` uniforms in (0, 1] at draw counters [offset, offset+n)."""
        counters = np.arange(offset, offset + n, dtype=np.uint64)
        return _uniforms_at(self.key, counters)

    def normals(self, n: int, offset: int = 0) -> np.ndarray:
        """``n`` standard normals at draw counters [offset, offset+n)."""
        return _normals_at(self.key, n, offset)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (order of random keys)."""
        v = _mix64_vec(
            np.uint64(self.key)
            + (np.arange(n, dtype=np.uint64) + np.uint64(1)) * np.uint64(_GOLDEN)
        )
        return np.argsort(v, kind="stable")


def normal_draw(stream: RngStream) -> float:
    """One standard normal, fully determined by (root_seed, path)."""
    return float(stream.normals(1)[0])


_RECTIFY_MODES = ("clamp", "abs", "resample")


@dataclass(frozen=True)
class NoiseSchedule:
    """Tagged choice of training-noise behavior.

    kind "none"  -> no injection;
    kind "fixed" -> every image sees sigma_train;
    kind "vant"  -> per-image sigma drawn from N(alpha*sigma_train, theta).

    ``rectify`` selects how negative sigma draws are handled ("clamp" to 0,
    "abs", or "resample"); clamp keeps the upper tail intact and is the
    default.
    """

    kind: str
    sigma_train: float = 0.0
    alpha: float = 1.0
    theta: float = 0.0
    rectify: str = "clamp"

    def __post_init__(self):
        if self.kind not in ("none", "fixed", "vant"):
            raise UsageError(f"unknown schedule kind {self.kind!r}")
        if self.sigma_train < 0:
            raise UsageError("sigma_train must be >= 0")
        if self.theta < 0:
            raise UsageError("theta must be >= 0")
        if self.rectify not in _RECTIFY_MODES:
            raise UsageError(f"rectify must be one of {_RECTIFY_MODES}")

    @staticmethod
    def none() -> "NoiseSchedule":
        return NoiseSchedule(kind="none")

    @staticmethod
    def fixed(sigma_train: float) -> "NoiseSchedule":
        return NoiseSchedule(kind="fixed", sigma_train=float(sigma_train))

    @staticmethod
    def variance_aware(
        sigma_train: float, alpha: float, theta: float, rectify: str = "clamp"
    ) -> "NoiseSchedule":
        return NoiseSchedule(
            kind="vant",
            sigma_train=float(sigma_train),
            alpha=float(alpha),
            theta=float(theta),
            rectify=rectify,
        )

    def to_json(self) -> dict:
        if self.kind == "none":
            return {"kind": "none"}
        if self.kind == "fixed":
            return {"kind": "fixed", "sigma_train": self.sigma_train}
        out = {
            "kind": "vant",
            "sigma_train": self.sigma_train,
            "alpha": self.alpha,
            "theta": self.theta,
        }
        if self.rectify != "clamp":
            out["rectify"] = self.rectify
        return out

    @staticmethod
    def from_json(obj: dict) -> "NoiseSchedule":
        kind = obj.get("kind")
        if kind == "none":
            return NoiseSchedule.none()
        if kind == "fixed":
            return NoiseSchedule.fixed(obj["sigma_train"])
        if kind == "vant":
            return NoiseSchedule.variance_aware(
                obj["sigma_train"],
                obj.get("alpha", 1.0),
                obj.get("theta", 0.0),
                obj.get("rectify", "clamp"),
            )
        raise UsageError(f"unknown schedule kind {kind!r}")


def sample_sigma_var(schedule: NoiseSchedule, stream: RngStream) -> float:
    """Draw the per-image noise level sigma_var for one presentation.

    Fixed schedules return sigma_train exactly (no randomness consumed in a
    way that matters; theta=0 variance-aware schedules reduce to the same
    value bit for bit).
    """
    if schedule.kind == "fixed":
        return schedule.sigma_train
    if schedule.kind == "vant":
        mu = schedule.alpha * schedule.sigma_train
        value = mu + schedule.theta * normal_draw(stream)
        if schedule.rectify == "clamp":
            return max(0.0, value)
        if schedule.rectify == "abs":
            return abs(value)
        # resample: redraw at successive counters until non-negative
        j = 1
        while value < 0.0:
            value = mu + schedule.theta * float(stream.normals(1, offset=j)[0])
            j += 1
            if j > 10_000:
                raise UsageError(
                    "sigma_var resampling failed to produce a non-negative draw"
                )
        return value
    raise UsageError("sample_sigma_var requires a fixed or variance-aware schedule")


def sample_activation_noise(
    shape: Sequence[int], sigma: float, stream: RngStream
) -> np.ndarray:
    """I.i.d. N(0, sigma) tensor of the given shape; sigma=0 gives exact zeros."""
    if sigma < 0:
        raise UsageError("sigma must be >= 0")
    n = int(np.prod(shape)) if len(shape) else 1
    if sigma == 0.0:
        return np.zeros(shape, dtype=np.float32)
    z = stream.normals(n)
    return (z * sigma).astype(np.float32).reshape(shape)


class NoiseContext:
    """Per-forward-pass noise state: one sigma_var per batch element.

    The sigma vector is drawn once per presentation and shared by every
    injection point in that forward pass.  ``trace``, when set to a list,
    records (layer_index, sigma_vector, noise_array) per injection for
    introspection in tests.
    """

    def __init__(
        self,
        per_sample_sigma: np.ndarray,
        stream: RngStream,
        mode: str = "eval",
        trace: Optional[list] = None,
    ):
        sigmas = np.asarray(per_sample_sigma, dtype=np.float64)
        if sigmas.ndim != 1:
            raise UsageError("per_sample_sigma must be a 1-D vector")
        if np.any(sigmas < 0):
            raise UsageError("per_sample_sigma values must be >= 0")
        if mode not in ("train", "eval"):
            raise UsageError("mode must be 'train' or 'eval'")
        self.per_sample_sigma = sigmas
        self.stream = stream
        self.mode = mode
        self.trace = trace

    @staticmethod
    def for_batch(
        schedule: NoiseSchedule,
        stream: RngStream,
        batch_size: int,
        mode: str = "train",
        trace: Optional[list] = None,
    ) -> Optional["NoiseContext"]:
        """Build the context for one batch, drawing sigma_var per image.

        Returns None for a "none" schedule (clean forward).  The per-image
        draws use ``stream.child("sigma", slot)``; activation noise later
        uses ``stream.child(slot, layer)``, so the two never collide.
        """
        if schedule.kind == "none":
            return None
        sigmas = np.empty(batch_size, dtype=np.float64)
        for slot in range(batch_size):
            sigmas[slot] = sample_sigma_var(schedule, stream.child("sigma", slot))
        return NoiseContext(sigmas, stream, mode=mode, trace=trace)

    @staticmethod
    def fixed(
        sigma: float,
        stream: RngStream,
        batch_size: int,
        trace: Optional[list] = None,
    ) -> "NoiseContext":
        """Evaluation context: every image sees the same sigma."""
        if sigma < 0:
            raise UsageError("sigma must be >= 0")
        return NoiseContext(
            np.full(batch_size, float(sigma)), stream, mode="eval", trace=trace
        )

    @property
    def all_zero(self) -> bool:
        return bool(np.all(self.per_sample_sigma == 0.0))

    def noise_for_layer(self, layer_index: int, activation_shape: tuple) -> np.ndarray:
        """Sample the additive noise for one injection point.

        ``activation_shape`` is (batch, ...); element j of sample s is drawn
        at path (..., s, layer_index) counter j, matching
        :func:`sample_activation_noise` on the per-sample stream.
        """
        batch = activation_shape[0]
        if batch != len(self.per_sample_sigma):
            raise UsageError(
                f"activation batch {batch} != sigma vector length "
                f"{len(self.per_sample_sigma)}"
            )
        per_sample = int(np.prod(activation_shape[1:]))
        keys = np.fromiter(
            (self.stream.child(s, layer_index).key for s in range(batch)),
            dtype=np.uint64,
            count=batch,
        )
        table = _normals_table(keys, per_sample)
        noise = (table * self.per_sample_sigma[:, None]).astype(np.float32)
        noise = noise.reshape(activation_shape)
        if self.trace is not None:
            self.trace.append(
                (layer_index, self.per_sample_sigma.copy(), noise.copy())
            )
        return noise
