"""Timing features, keystroke dynamics images (KDI) and sequences (KDS).

A KDI is a ``5 x 42 x 42`` tensor.  Channels 0-3 hold the mean UD, DD, DU
and UU times of every ordered key pair seen in a window; channel 4 holds the
mean hold duration of each key on its diagonal.  A KDS is an ``L x W`` matrix
with one row per keystroke: the key encoding followed by six timing columns.
All timings are clamped to +-``clip_ms`` and divided by ``clip_ms``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .ingest import N_KEYS, Keystroke, UserStream

KDI_CHANNELS = ("ud", "dd", "du", "uu", "duration")
KDS_TIMING_COLUMNS = ("duration", "dd", "ud", "uu", "du", "prev_duration")


@dataclass(frozen=True)
class NormalizationConfig:
    clip_ms: float = 5000.0

    def apply(self, values):
        return np.clip(values, -self.clip_ms, self.clip_ms) / self.clip_ms

    def to_dict(self):
        return {"kind": "clip_scale", "clip_ms": self.clip_ms}


DEFAULT_NORM = NormalizationConfig()


@dataclass
class Subsequence:
    user_id: str
    keystrokes: list[Keystroke]

    def __len__(self):
        return len(self.keystrokes)

    def arrays(self):
        """(keys, press, release) as int64 arrays."""
        ks = self.keystrokes
        keys = np.fromiter((k.key_index for k in ks), dtype=np.int64, count=len(ks))
        press = np.fromiter((k.press_ms for k in ks), dtype=np.int64, count=len(ks))
        release = np.fromiter((k.release_ms for k in ks), dtype=np.int64, count=len(ks))
        return keys, press, release


@dataclass(frozen=True)
class TimingPair:
    duration_a: int
    duration_b: int
    dd: int
    ud: int
    uu: int
    du: int


def window(stream: UserStream, length: int) -> list[Subsequence]:
    """Split a stream into consecutive non-overlapping windows of ``length``.

    The trailing remainder is dropped, so pairs never straddle two windows.
    """
    if length < 2:
        raise ValueError(f"window length must be >= 2, got {length}")
    ks = stream.keystrokes
    n = len(ks) // length
    return [Subsequence(stream.user_id, ks[i * length:(i + 1) * length]) for i in range(n)]


def timing_features(a: Keystroke, b: Keystroke) -> TimingPair:
    return TimingPair(
        duration_a=a.release_ms - a.press_ms,
        duration_b=b.release_ms - b.press_ms,
        dd=b.press_ms - a.press_ms,
        ud=b.press_ms - a.release_ms,
        uu=b.release_ms - a.release_ms,
        du=b.release_ms - a.press_ms,
    )


def _pair_timings(press, release):
    """UD, DD, DU, UU for each consecutive pair, in KDI channel order."""
    p0, p1 = press[:-1], press[1:]
    r0, r1 = release[:-1], release[1:]
    return np.stack([p1 - r0, p1 - p0, r1 - p0, r1 - r0]).astype(np.float64)


def build_kdi(sub: Subsequence, norm: NormalizationConfig = DEFAULT_NORM) -> np.ndarray:
    keys, press, release = sub.arrays()
    return kdi_from_arrays(keys, press, release, norm)


def kdi_from_arrays(keys, press, release, norm: NormalizationConfig = DEFAULT_NORM) -> np.ndarray:
    n2 = N_KEYS * N_KEYS
    out = np.zeros((5, N_KEYS, N_KEYS), dtype=np.float64)

    pair_id = keys[:-1] * N_KEYS + keys[1:]
    counts = np.bincount(pair_id, minlength=n2)
    seen = counts > 0
    timings = _pair_timings(press, release)
    for c in range(4):
        sums = np.bincount(pair_id, weights=timings[c], minlength=n2)
        ch = out[c].reshape(-1)
        ch[seen] = sums[seen] / counts[seen]

    key_counts = np.bincount(keys, minlength=N_KEYS)
    dur_sums = np.bincount(keys, weights=(release - press).astype(np.float64), minlength=N_KEYS)
    typed = np.flatnonzero(key_counts)
    out[4, typed, typed] = dur_sums[typed] / key_counts[typed]
    return norm.apply(out)


class Encoding(str, Enum):
    INDEX = "index"
    ONEHOT = "onehot"


def kds_width(encoding: Encoding | str) -> int:
    return (N_KEYS if Encoding(encoding) is Encoding.ONEHOT else 1) + len(KDS_TIMING_COLUMNS)


def build_kds(
    sub: Subsequence,
    encoding: Encoding | str = Encoding.ONEHOT,
    norm: NormalizationConfig = DEFAULT_NORM,
) -> np.ndarray:
    """Per-keystroke rows ``[key code | duration, dd, ud, uu, du, prev_duration]``.

    The pair columns of row ``i`` describe the transition from keystroke
    ``i - 1``; they are zero in row 0.  Index encoding stores
    ``key_index / 41`` in one column.
    """
    encoding = Encoding(encoding)
    keys, press, release = sub.arrays()
    n = len(keys)
    if encoding is Encoding.ONEHOT:
        code = np.zeros((n, N_KEYS))
        code[np.arange(n), keys] = 1.0
    else:
        code = (keys / (N_KEYS - 1)).reshape(n, 1).astype(np.float64)

    timing = np.zeros((n, len(KDS_TIMING_COLUMNS)))
    dur = (release - press).astype(np.float64)
    timing[:, 0] = dur
    ud, dd, du, uu = _pair_timings(press, release)
    timing[1:, 1] = dd
    timing[1:, 2] = ud
    timing[1:, 3] = uu
    timing[1:, 4] = du
    timing[1:, 5] = dur[:-1]
    return np.hstack([code, norm.apply(timing)])


# ---------------------------------------------------------------- cutout


@dataclass
class CutoutSpec:
    enabled: bool = True
    kdi_size: int = 8
    kds_span: int = 10
    probability: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if not 1 <= self.kdi_size <= N_KEYS:
            raise ValueError(f"kdi_size must lie in [1, {N_KEYS}]")
        if self.kds_span < 1:
            raise ValueError("kds_span must be >= 1")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must lie in [0, 1]")


def apply_cutout(x: np.ndarray, spec: CutoutSpec, rng: np.random.Generator | None = None, at=None):
    """Zero one square patch of a KDI (all channels) or a span of KDS rows.

    ``x`` with three dimensions is treated as a KDI ``(C, H, W)``, with two as
    a KDS ``(L, W)``.  Placement is uniform over the positions where the patch
    fits.  Passing ``at`` (``(row, col)`` for a KDI, a start row for a KDS)
    forces the patch there regardless of ``probability``.  Without ``rng`` a
    generator seeded from ``spec.rng_seed`` is used.  Returns a new array.
    """
    out = np.array(x, copy=True)
    if x.ndim == 3:
        _, h, w = x.shape
        size = spec.kdi_size
        if size > h or size > w:
            raise ValueError("cutout square larger than the image")
    elif x.ndim == 2:
        h = x.shape[0]
        size = spec.kds_span
        if size > h:
            raise ValueError(f"cutout span {size} longer than sequence {h}")
    else:
        raise ValueError(f"cannot cut out a {x.ndim}-d array")

    if at is None:
        if not spec.enabled:
            return out
        if rng is None:
            rng = np.random.default_rng(spec.rng_seed)
        if rng.random() >= spec.probability:
            return out
        if x.ndim == 3:
            at = (int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1)))
        else:
            at = int(rng.integers(0, h - size + 1))

    if x.ndim == 3:
        r, c = at
        if not (0 <= r <= h - size and 0 <= c <= w - size):
            raise ValueError(f"cutout at {at} does not fit")
        out[:, r:r + size, c:c + size] = 0
    else:
        if not 0 <= at <= h - size:
            raise ValueError(f"cutout at {at} does not fit")
        out[at:at + size, :] = 0
    return out


def cutout_batch(batch: np.ndarray, spec: CutoutSpec, rng: np.random.Generator) -> np.ndarray:
    """Independent cutout per sample of a batch (leading axis)."""
    if not spec.enabled or spec.probability == 0:
        return batch
    return np.stack([apply_cutout(x, spec, rng) for x in batch])


# ---------------------------------------------------------------- bulk


@dataclass
class FeatureSet:
    """Stacked features of many subsequences plus the owner of each row."""

    data: np.ndarray
    user_ids: list[str]
    layout: str
    channel_order: list[str] = field(default_factory=list)
    normalization: dict = field(default_factory=DEFAULT_NORM.to_dict)
    labels: list[int] | None = None

    def by_user(self) -> dict[str, np.ndarray]:
        ids = np.asarray(self.user_ids)
        return {u: self.data[ids == u] for u in dict.fromkeys(self.user_ids)}


def kds_channel_order(encoding: Encoding | str) -> list[str]:
    if Encoding(encoding) is Encoding.ONEHOT:
        code = [f"key_{i}" for i in range(N_KEYS)]
    else:
        code = ["key_index"]
    return code + list(KDS_TIMING_COLUMNS)


def featurize(
    streams: Sequence[UserStream],
    mode: str = "kdi",
    length: int = 100,
    encoding: Encoding | str = Encoding.ONEHOT,
    norm: NormalizationConfig = DEFAULT_NORM,
) -> FeatureSet:
    if mode not in ("kdi", "kds"):
        raise ValueError(f"unknown feature mode {mode!r}")
    rows, owners = [], []
    for stream in streams:
        for sub in window(stream, length):
            rows.append(build_kdi(sub, norm) if mode == "kdi" else build_kds(sub, encoding, norm))
            owners.append(stream.user_id)
    if mode == "kdi":
        shape = (5, N_KEYS, N_KEYS)
        order = list(KDI_CHANNELS)
    else:
        shape = (length, kds_width(encoding))
        order = kds_channel_order(encoding)
    data = np.stack(rows).astype(np.float32) if rows else np.zeros((0,) + shape, np.float32)
    return FeatureSet(data, owners, mode, order, norm.to_dict())
