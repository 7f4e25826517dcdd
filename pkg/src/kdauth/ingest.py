"""Keystroke event parsing, press/release pairing and synthetic typists.

The canonical on-disk event form is a CSV with one event per line::

    user_id,key,action,timestamp_ms

where ``action`` is ``D`` (key down) or ``U`` (key up).  Dataset specific
layouts are handled by :class:`AdapterConfig` column maps.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

N_KEYS = 42


class IngestError(Exception):
    """Base class for ingest failures."""


class FormatMismatchError(IngestError):
    """Raised when most lines of an input do not fit the configured format."""

    def __init__(self, message, first_bad_line=None):
        super().__init__(message)
        self.first_bad_line = first_bad_line


class Action(str, Enum):
    DOWN = "D"
    UP = "U"


@dataclass(frozen=True)
class KeyEvent:
    user_id: str
    key_label: str
    action: Action
    timestamp_ms: int

    def __post_init__(self):
        if self.timestamp_ms < 0:
            raise ValueError(f"negative timestamp {self.timestamp_ms}")


@dataclass(frozen=True)
class Keystroke:
    key_index: int
    press_ms: int
    release_ms: int

    def __post_init__(self):
        if not 0 <= self.key_index < N_KEYS:
            raise ValueError(f"key index {self.key_index} outside [0, {N_KEYS - 1}]")
        if self.release_ms < self.press_ms:
            raise ValueError("release precedes press")

    @property
    def duration(self) -> int:
        return self.release_ms - self.press_ms


@dataclass
class UserStream:
    user_id: str
    keystrokes: list[Keystroke] = field(default_factory=list)

    def __len__(self):
        return len(self.keystrokes)


# ---------------------------------------------------------------- alphabet

# canonical label per index; used when writing events back out
CANONICAL_LABELS: tuple[str, ...] = (
    tuple("abcdefghijklmnopqrstuvwxyz")
    + tuple("0123456789")
    + ("space", "backspace", "lshift", "rshift", "tab", "capslock")
)

SPACE, BACKSPACE, LSHIFT, RSHIFT, TAB, CAPSLOCK = range(36, 42)

_META_ALIASES = {
    SPACE: ["space", " ", "spacebar", "key.space", "<space>"],
    BACKSPACE: ["backspace", "back", "bksp", "key.backspace", "<backspace>", "bs"],
    LSHIFT: ["lshift", "lshiftkey", "shift", "leftshift", "left-shift", "left shift",
             "shift_l", "shiftleft", "key.shift", "key.shift_l", "<shift>"],
    RSHIFT: ["rshift", "rshiftkey", "rightshift", "right-shift", "right shift",
             "shift_r", "shiftright", "key.shift_r"],
    TAB: ["tab", "key.tab", "<tab>", "\t"],
    CAPSLOCK: ["capslock", "capital", "caps", "caps_lock", "caps lock",
               "key.caps_lock", "<capslock>"],
}

# US-layout shifted digits fold onto their base key; shift itself is a separate keystroke
_SHIFTED_DIGITS = dict(zip(")!@#$%^&*(", "0123456789"))


class KeyAlphabet:
    """Bijection between the 42 tracked keys and indices 0..41, plus aliases."""

    def __init__(self, extra_aliases: Mapping[str, int] | None = None):
        self._lookup: dict[str, int] = {}
        for i, label in enumerate(CANONICAL_LABELS):
            self._lookup[label] = i
        for i in range(26):
            ch = CANONICAL_LABELS[i]
            self._lookup["key" + ch] = i          # KeyA (DOM code)
            self._lookup["vk_" + ch] = i
        for d in range(10):
            i = 26 + d
            for alias in (f"d{d}", f"digit{d}", f"key{d}", f"vk_{d}"):
                self._lookup[alias] = i
        for sym, base in _SHIFTED_DIGITS.items():
            self._lookup[sym] = 26 + int(base)
        for idx, aliases in _META_ALIASES.items():
            for a in aliases:
                self._lookup[a] = idx
        for a, idx in (extra_aliases or {}).items():
            if not 0 <= idx < N_KEYS:
                raise ValueError(f"alias {a!r} maps outside the alphabet")
            self._lookup[a.casefold()] = idx

    def __len__(self):
        return N_KEYS

    def index(self, key_label: str) -> int | None:
        if key_label in self._lookup:  # " " and "\t" must not be stripped away
            return self._lookup[key_label]
        label = key_label.strip().strip("'\"").casefold()
        return self._lookup.get(label)

    def label(self, index: int) -> str:
        return CANONICAL_LABELS[index]


DEFAULT_ALPHABET = KeyAlphabet()


def normalize_key(key_label: str, alphabet: KeyAlphabet = DEFAULT_ALPHABET) -> int | None:
    """Index of ``key_label`` in the 42-key alphabet, or None if untracked.

    >>> normalize_key("A"), normalize_key("7"), normalize_key("F5")
    (0, 33, None)
    """
    return alphabet.index(key_label)


# ---------------------------------------------------------------- parsing


class InputFormat(str, Enum):
    CANONICAL = "canonical"
    BUFFALO = "buffalo"
    CLARKSON = "clarkson"


@dataclass
class AdapterConfig:
    """Column map for a delimited event log.

    ``columns`` gives the field index of ``user``, ``key``, ``action`` and
    ``timestamp``; ``user`` may be None for per-user files, in which case the
    caller supplies the user id.  ``time_scale`` multiplies raw timestamps
    into milliseconds.
    """

    delimiter: str = ","
    columns: dict = field(default_factory=lambda: {"user": 0, "key": 1, "action": 2, "timestamp": 3})
    action_tokens: dict = field(default_factory=lambda: {"down": ["D"], "up": ["U"]})
    time_scale: float = 1.0

    @classmethod
    def from_json(cls, text: str | bytes) -> "AdapterConfig":
        raw = json.loads(text)
        unknown = set(raw) - {"delimiter", "columns", "action_tokens", "time_scale"}
        if unknown:
            raise ValueError(f"unknown adapter keys: {sorted(unknown)}")
        cfg = cls(**raw)
        missing = {"key", "action", "timestamp"} - set(cfg.columns)
        if missing:
            raise ValueError(f"adapter columns missing {sorted(missing)}")
        cfg.columns.setdefault("user", None)
        if set(cfg.action_tokens) != {"down", "up"}:
            raise ValueError("action_tokens needs exactly 'down' and 'up' lists")
        return cfg

    @classmethod
    def preset(cls, fmt: InputFormat | str) -> "AdapterConfig":
        fmt = InputFormat(fmt)
        if fmt is InputFormat.CANONICAL:
            return cls()
        if fmt is InputFormat.BUFFALO:
            # per-subject text files: "<key> KeyDown|KeyUp <timestamp>"
            return cls(
                delimiter=" ",
                columns={"user": None, "key": 0, "action": 1, "timestamp": 2},
                action_tokens={"down": ["KeyDown"], "up": ["KeyUp"]},
            )
        # per-subject tab separated "<timestamp>\t<key>\t<action>"
        return cls(
            delimiter="\t",
            columns={"user": None, "key": 1, "action": 2, "timestamp": 0},
            action_tokens={"down": ["KeyDown", "down", "D", "P"], "up": ["KeyUp", "up", "U", "R"]},
        )


@dataclass
class ParseResult:
    events: list[KeyEvent]
    malformed_count: int = 0
    first_malformed_line: int | None = None


def _round_ms(text: str, scale: float) -> int:
    value = Decimal(text.strip())
    if scale != 1.0:
        value = value * Decimal(repr(scale))
    if not value.is_finite():
        raise InvalidOperation
    return int(value.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def parse_events(
    source: bytes | str | Iterable[str] | io.IOBase,
    fmt: InputFormat | str = InputFormat.CANONICAL,
    column_map: AdapterConfig | None = None,
    user_id: str | None = None,
) -> ParseResult:
    """Parse an event log into :class:`KeyEvent` records, in file order.

    Malformed lines are counted rather than raised, unless they make up more
    than half of the non-blank lines.  A leading header is recognised by a
    non-numeric timestamp field and skipped.
    """
    cfg = column_map or AdapterConfig.preset(fmt)
    if isinstance(source, bytes):
        text = source.decode("utf-8")
        lines = text.splitlines()
    elif isinstance(source, str):
        lines = source.splitlines()
    elif isinstance(source, io.IOBase) and not isinstance(source, io.TextIOBase):
        lines = source.read().decode("utf-8").splitlines()
    else:
        lines = [ln.rstrip("\r\n") for ln in source]

    cols = cfg.columns
    user_col = cols.get("user")
    if user_col is None and user_id is None:
        raise ValueError("format has no user column; pass user_id")
    down = set(cfg.action_tokens["down"])
    up = set(cfg.action_tokens["up"])
    delim = cfg.delimiter

    if delim in (" ", "\t"):
        rows = (ln.split() if ln.strip() else [] for ln in lines)
    else:
        rows = csv.reader(lines, delimiter=delim)

    events = []
    malformed = 0
    first_bad = None
    seen = 0
    for lineno, row in enumerate(rows, start=1):
        if not row or all(not f.strip() for f in row):
            continue
        seen += 1
        try:
            ts_raw = row[cols["timestamp"]]
            try:
                ts = _round_ms(ts_raw, cfg.time_scale)
            except InvalidOperation:
                if seen == 1:  # header line
                    seen = 0
                    continue
                raise
            act_raw = row[cols["action"]].strip()
            if act_raw in down:
                action = Action.DOWN
            elif act_raw in up:
                action = Action.UP
            else:
                raise ValueError(act_raw)
            key = row[cols["key"]]
            uid = row[user_col].strip() if user_col is not None else user_id
            if not uid:
                raise ValueError("empty user")
            events.append(KeyEvent(uid, key, action, ts))
        except (IndexError, ValueError, InvalidOperation):
            malformed += 1
            if first_bad is None:
                first_bad = lineno

    if seen and malformed * 2 > seen:
        raise FormatMismatchError(
            f"{malformed} of {seen} lines malformed for format {InputFormat(fmt).value}; "
            f"first offending line is {first_bad}",
            first_bad,
        )
    if malformed:
        log.info("skipped %d malformed lines (first at line %d)", malformed, first_bad)
    return ParseResult(events, malformed, first_bad)


def read_events(path: str | Path, fmt="canonical", column_map=None, user_id=None) -> ParseResult:
    path = Path(path)
    data = path.read_bytes()
    if user_id is None and (column_map or AdapterConfig.preset(fmt)).columns.get("user") is None:
        user_id = path.stem
    return parse_events(data, fmt, column_map, user_id)


# ---------------------------------------------------------------- pairing


@dataclass
class PairReport:
    streams: dict[str, UserStream]
    dropped_downs: int = 0
    orphan_ups: int = 0
    untracked: int = 0

    @property
    def dropped(self) -> int:
        return self.dropped_downs + self.orphan_ups


def pair_events(
    events: Sequence[KeyEvent], alphabet: KeyAlphabet = DEFAULT_ALPHABET
) -> PairReport:
    """Match each Down with the earliest later Up of the same key.

    Events on untracked keys are skipped.  Auto-repeat Downs arriving while
    the key is already held are dropped, as are Ups with no open Down and
    Downs that never see an Up.  Events with equal timestamps keep their
    input order.
    """
    per_user = defaultdict(list)
    untracked = 0
    for pos, ev in enumerate(events):
        idx = alphabet.index(ev.key_label)
        if idx is None:
            untracked += 1
            continue
        per_user[ev.user_id].append((ev.timestamp_ms, pos, idx, ev.action))

    streams = {}
    dropped_downs = orphan_ups = 0
    for uid, evs in per_user.items():
        evs.sort(key=lambda e: (e[0], e[1]))
        open_downs: dict[int, tuple[int, int]] = {}
        strokes = []  # (press, order, key, release)
        for ts, pos, idx, action in evs:
            if action is Action.DOWN:
                if idx in open_downs:
                    dropped_downs += 1
                else:
                    open_downs[idx] = (ts, pos)
            else:
                opened = open_downs.pop(idx, None)
                if opened is None:
                    orphan_ups += 1
                else:
                    strokes.append((opened[0], opened[1], idx, ts))
        dropped_downs += len(open_downs)
        strokes.sort()
        streams[uid] = UserStream(uid, [Keystroke(k, p, r) for p, _, k, r in strokes])
    return PairReport(streams, dropped_downs, orphan_ups, untracked)


# ---------------------------------------------------------------- writing


def stream_events(stream: UserStream, alphabet: KeyAlphabet = DEFAULT_ALPHABET) -> list[KeyEvent]:
    """Down/Up events of a stream, ordered by time with Downs first on ties."""
    tagged = []
    for order, ks in enumerate(stream.keystrokes):
        label = alphabet.label(ks.key_index)
        tagged.append(((ks.press_ms, 0, order), KeyEvent(stream.user_id, label, Action.DOWN, ks.press_ms)))
        tagged.append(((ks.release_ms, 1, order), KeyEvent(stream.user_id, label, Action.UP, ks.release_ms)))
    tagged.sort(key=lambda t: t[0])
    return [ev for _, ev in tagged]


def format_events(events: Iterable[KeyEvent], header: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(["user_id", "key", "action", "timestamp_ms"])
    for ev in events:
        writer.writerow([ev.user_id, ev.key_label, ev.action.value, ev.timestamp_ms])
    return buf.getvalue()


# ---------------------------------------------------------------- synthesis

# rough English keystroke frequencies over the alphabet (letters, digits, meta keys)
_KEY_WEIGHTS = np.array(
    [8.2, 1.5, 2.8, 4.3, 12.7, 2.2, 2.0, 6.1, 7.0, 0.15, 0.8, 4.0, 2.4,
     6.7, 7.5, 1.9, 0.1, 6.0, 6.3, 9.1, 2.8, 1.0, 2.4, 0.15, 2.0, 0.07]
    + [0.4] * 10
    + [18.0, 3.0, 2.0, 0.6, 0.3, 0.05]
)
_KEY_P = _KEY_WEIGHTS / _KEY_WEIGHTS.sum()
KEY_HABIT_SIGMA = 0.3


def synthesize(profile_seed: int, n_users: int, n_keystrokes: int) -> list[KeyEvent]:
    """Seeded synthetic typists emitted as canonical Down/Up events.

    Every user draws, once, a per-key hold-time profile (mean, std) and a
    per-digraph press-to-press gap profile (mean, std), plus a personal tilt
    of the shared key-frequency distribution; keystrokes are then sampled
    from the tilted distribution and the user's own timing profiles.
    All event timestamps of a user are strictly increasing.
    """
    if n_users < 1:
        raise ValueError("n_users must be >= 1")
    if n_keystrokes < 2:
        raise ValueError("n_keystrokes must be >= 2")
    rng = np.random.default_rng(profile_seed)
    out = []
    for u in range(n_users):
        uid = f"user{u:03d}"
        base_hold = rng.uniform(70.0, 140.0)
        hold_mu = np.clip(base_hold + rng.normal(0.0, 20.0, N_KEYS), 25.0, None)
        hold_sd = rng.uniform(0.08, 0.2, N_KEYS) * hold_mu
        base_gap = rng.uniform(120.0, 260.0)
        gap_mu = np.clip(base_gap + rng.normal(0.0, 45.0, (N_KEYS, N_KEYS)), 40.0, None)
        gap_sd = rng.uniform(0.1, 0.25, (N_KEYS, N_KEYS)) * gap_mu

        # personal key-usage habits (shift side, corrections, vocabulary) tilt the shared distribution
        key_p = _KEY_P * rng.lognormal(0.0, KEY_HABIT_SIGMA, N_KEYS)
        keys = rng.choice(N_KEYS, size=n_keystrokes, p=key_p / key_p.sum())
        holds = rng.normal(hold_mu[keys], hold_sd[keys])
        gaps = rng.normal(gap_mu[keys[:-1], keys[1:]], gap_sd[keys[:-1], keys[1:]])
        # presses on even and releases on odd milliseconds, so a press never
        # shares a timestamp with a release
        holds = 2 * np.maximum(0, np.rint(holds / 2)).astype(np.int64) + 1
        gaps = 2 * np.maximum(1, np.rint(gaps / 2)).astype(np.int64)
        press = np.empty(n_keystrokes, dtype=np.int64)
        release = np.empty(n_keystrokes, dtype=np.int64)
        last_release = {}
        used = set()
        t = 2 * int(rng.integers(0, 500))
        for i in range(n_keystrokes):
            if i:
                t += int(gaps[i - 1])
            k = int(keys[i])
            prev = last_release.get(k)
            if prev is not None and t <= prev:
                t = prev + 1  # same key cannot go down again while held
            r = t + int(holds[i])
            while r in used:
                r += 2
            used.add(r)
            press[i], release[i] = t, r
            last_release[k] = r
        label = [CANONICAL_LABELS[k] for k in keys]
        evs = [(int(press[i]), KeyEvent(uid, label[i], Action.DOWN, int(press[i]))) for i in range(n_keystrokes)]
        evs += [(int(release[i]), KeyEvent(uid, label[i], Action.UP, int(release[i]))) for i in range(n_keystrokes)]
        evs.sort(key=lambda t: t[0])
        out.extend(ev for _, ev in evs)
    return out
