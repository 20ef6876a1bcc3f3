"""Seeded synthetic feature sequences, the dataset text format, and ingestion.

Frame ``i`` of a ``T``-frame sequence sits at normalized location
``i / (T - 1)``. Ground-truth intervals are reported in that coordinate, so an
event covering frames ``a..b`` inclusive is ``(a / (T - 1), b / (T - 1))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "FrameSequence",
    "GroundTruthInstance",
    "Example",
    "Dataset",
    "SynthConfig",
    "DatasetFormatError",
    "class_signature",
    "generate_sequence",
    "generate_dataset",
    "write_split",
    "read_split",
    "write_dataset",
    "read_dataset",
    "ingest_features",
    "stream_of",
    "SPLITS",
]

SPLITS = ("train", "val", "test")
_FORMAT_TAG = "GLIMPSE-DATA-1"


class DatasetFormatError(ValueError):
    """Malformed dataset file; the message carries the line number."""


@dataclass(frozen=True)
class GroundTruthInstance:
    s: float
    e: float

    def __post_init__(self):
        if not (0.0 <= self.s < self.e <= 1.0):
            raise ValueError(f"ground truth ({self.s}, {self.e}) violates 0 <= s < e <= 1")

    @property
    def duration(self) -> float:
        return self.e - self.s


@dataclass
class FrameSequence:
    sequence_id: str
    features: np.ndarray
    origin_offset: int = 0

    def __post_init__(self):
        if not self.sequence_id or any(ch.isspace() for ch in self.sequence_id):
            raise ValueError(f"sequence_id {self.sequence_id!r} must be non-empty without whitespace")
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 2:
            raise ValueError(f"{self.sequence_id}: need a T x d feature matrix with T >= 2")
        if not np.isfinite(self.features).all():
            raise ValueError(f"{self.sequence_id}: non-finite features")
        if self.origin_offset < 0:
            raise ValueError(f"{self.sequence_id}: negative origin_offset")

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def frame_index(self, location: float) -> int:
        """Nearest frame to a normalized location (halves round up)."""
        return int(math.floor(location * (self.T - 1) + 0.5))


@dataclass
class Example:
    sequence: FrameSequence
    ground_truths: list[GroundTruthInstance] = field(default_factory=list)

    @property
    def positive(self) -> bool:
        return bool(self.ground_truths)

    def frame_labels(self) -> np.ndarray:
        """0/1 occupancy per frame."""
        T = self.sequence.T
        labels = np.zeros(T)
        for g in self.ground_truths:
            lo = int(round(g.s * (T - 1)))
            hi = int(round(g.e * (T - 1)))
            labels[lo:hi + 1] = 1.0
        return labels


@dataclass
class Dataset:
    train: list[Example] = field(default_factory=list)
    val: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)
    signature: np.ndarray | None = None

    def split(self, name: str) -> list[Example]:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def positive_indices(self, name: str = "train") -> list[int]:
        return [i for i, ex in enumerate(self.split(name)) if ex.positive]

    def negative_indices(self, name: str = "train") -> list[int]:
        return [i for i, ex in enumerate(self.split(name)) if not ex.positive]

    def find(self, sequence_id: str) -> Example:
        for name in SPLITS:
            for ex in self.split(name):
                if ex.sequence.sequence_id == sequence_id:
                    return ex
        raise KeyError(f"unknown sequence_id {sequence_id!r}")


@dataclass
class SynthConfig:
    T: int = 50
    d: int = 16
    # Benchmark defaults: a projected SNR of 5 makes any single observed frame
    # easy to classify, so the difficulty lies in where to look.
    noise: float = 0.3
    amplitude: float = 1.5
    count_probs: tuple[float, ...] = (0.5, 0.5)
    duration_range: tuple[float, float] = (0.1, 0.3)
    envelope: str = "rectangular"
    seed: int = 0

    def validate(self) -> None:
        if self.T < 2:
            raise ValueError("T must be at least 2")
        if self.d < 1:
            raise ValueError("d must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        lo, hi = self.duration_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"duration_range {self.duration_range} must satisfy 0 < lo <= hi <= 1")
        probs = np.asarray(self.count_probs, dtype=float)
        if probs.size == 0 or (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"count_probs {self.count_probs} must be non-negative and sum to 1")
        if self.envelope not in ("rectangular", "ramped"):
            raise ValueError(f"envelope must be 'rectangular' or 'ramped', got {self.envelope!r}")
        lmin, _ = self._frame_lengths()
        kmax = max(k for k, p in enumerate(self.count_probs) if p > 0)
        if kmax and kmax * lmin + (kmax - 1) > self.T:
            raise ValueError(f"duration_range {self.duration_range}: {kmax} events of >= {lmin} frames "
                             f"cannot fit in T={self.T}")

    def _frame_lengths(self) -> tuple[int, int]:
        lo, hi = self.duration_range
        lmin = max(2, math.ceil(lo * self.T))
        lmax = max(lmin, min(self.T, math.floor(hi * self.T)))
        return lmin, lmax


def class_signature(cfg: SynthConfig) -> np.ndarray:
    """The fixed unit direction the event class adds to its frames."""
    v = np.random.default_rng([cfg.seed, 0x5EED]).standard_normal(cfg.d)
    return v / np.linalg.norm(v)


def _envelope(length: int, shape: str) -> np.ndarray:
    if shape == "rectangular" or length <= 2:
        return np.ones(length)
    # trapezoid rising over the first and last quarter of the event
    ramp = max(1, length // 4)
    env = np.ones(length)
    rise = np.arange(1, ramp + 1) / (ramp + 1)
    env[:ramp] = rise
    env[-ramp:] = rise[::-1]
    return env


def _place_events(rng: np.random.Generator, T: int, lengths: list[int]) -> list[int]:
    """Start frames for non-touching events of the given lengths, in order."""
    k = len(lengths)
    free = T - sum(lengths) - (k - 1)
    cuts = np.sort(rng.integers(0, free + 1, size=k))
    starts, used = [], 0
    for j, cut in enumerate(cuts):
        starts.append(int(cut) + used + j)
        used += lengths[j]
    return starts


def generate_sequence(cfg: SynthConfig, seed: int, sequence_id: str | None = None,
                      signature: np.ndarray | None = None) -> tuple[FrameSequence, list[GroundTruthInstance]]:
    cfg.validate()
    if signature is None:
        signature = class_signature(cfg)
    rng = np.random.default_rng(seed)
    T = cfg.T
    count = int(rng.choice(len(cfg.count_probs), p=np.asarray(cfg.count_probs, dtype=float)))
    lmin, lmax = cfg._frame_lengths()
    lengths = [int(x) for x in rng.integers(lmin, lmax + 1, size=count)]
    while count and sum(lengths) + count - 1 > T:
        lengths = [int(x) for x in rng.integers(lmin, lmax + 1, size=count)]
    starts = _place_events(rng, T, lengths) if count else []

    features = cfg.noise * rng.standard_normal((T, cfg.d))
    gts = []
    for a, length in zip(starts, lengths):
        env = _envelope(length, cfg.envelope)
        features[a:a + length] += cfg.amplitude * env[:, None] * signature[None, :]
        gts.append(GroundTruthInstance(a / (T - 1), (a + length - 1) / (T - 1)))
    seq = FrameSequence(sequence_id or f"syn-{seed}", features, 0)
    return seq, gts


def generate_dataset(cfg: SynthConfig, count: int, seed: int,
                     split: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> Dataset:
    """``count`` sequences seeded ``seed + index``; the first ones go to train."""
    if count < 1:
        raise ValueError("count must be at least 1")
    cfg.validate()
    signature = class_signature(cfg)
    n_val = int(math.floor(split[1] * count))
    n_test = int(math.floor(split[2] * count))
    n_train = count - n_val - n_test
    ds = Dataset(signature=signature)
    for index in range(count):
        seq, gts = generate_sequence(cfg, seed + index, f"syn-{index:05d}", signature)
        target = ds.train if index < n_train else ds.val if index < n_train + n_val else ds.test
        target.append(Example(seq, gts))
    return ds


def _fmt(x: float) -> str:
    return "%.17g" % x


def write_split(path: str | Path, examples: list[Example], signature: np.ndarray | None = None) -> None:
    lines = [_FORMAT_TAG]
    if signature is None:
        lines.append("SIGNATURE 0")
    else:
        lines.append(f"SIGNATURE {len(signature)} " + " ".join(_fmt(v) for v in signature))
    lines.append(f"COUNT {len(examples)}")
    for ex in examples:
        s = ex.sequence
        lines.append(f"SEQ {s.sequence_id} {s.T} {s.d} {s.origin_offset}")
        lines.extend(" ".join(_fmt(v) for v in row) for row in s.features)
        lines.append(f"GT {len(ex.ground_truths)}")
        lines.extend(f"{_fmt(g.s)} {_fmt(g.e)}" for g in ex.ground_truths)
    Path(path).write_text("\n".join(lines) + "\n")


def read_split(path: str | Path) -> tuple[list[Example], np.ndarray | None]:
    text = Path(path).read_text().split("\n")
    if text and text[-1] == "":
        text.pop()
    pos = 0

    def next_line() -> tuple[int, list[str]]:
        nonlocal pos
        if pos >= len(text):
            raise DatasetFormatError(f"{path}: truncated at line {pos + 1}")
        pos += 1
        return pos, text[pos - 1].split()

    def reals(lineno: int, tokens: list[str], n: int) -> list[float]:
        if len(tokens) != n:
            raise DatasetFormatError(f"{path}:{lineno}: expected {n} values, found {len(tokens)}")
        try:
            return [float(t) for t in tokens]
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None

    lineno, tok = next_line()
    if tok != [_FORMAT_TAG]:
        raise DatasetFormatError(f"{path}:{lineno}: missing {_FORMAT_TAG} header")
    lineno, tok = next_line()
    if len(tok) < 2 or tok[0] != "SIGNATURE":
        raise DatasetFormatError(f"{path}:{lineno}: expected SIGNATURE line")
    nsig = int(tok[1])
    signature = np.array(reals(lineno, tok[2:], nsig)) if nsig else None
    lineno, tok = next_line()
    if len(tok) != 2 or tok[0] != "COUNT":
        raise DatasetFormatError(f"{path}:{lineno}: expected COUNT line")
    count = int(tok[1])

    examples = []
    for record in range(count):
        lineno, tok = next_line()
        if len(tok) != 5 or tok[0] != "SEQ":
            raise DatasetFormatError(f"{path}:{lineno}: record {record}: malformed SEQ header")
        try:
            seq_id, T, d, offset = tok[1], int(tok[2]), int(tok[3]), int(tok[4])
        except ValueError:
            raise DatasetFormatError(f"{path}:{lineno}: record {record}: malformed SEQ header") from None
        rows = []
        for _ in range(T):
            lineno, tok = next_line()
            rows.append(reals(lineno, tok, d))
        lineno, tok = next_line()
        if len(tok) != 2 or tok[0] != "GT":
            raise DatasetFormatError(f"{path}:{lineno}: record {record}: expected GT line")
        gts = []
        for _ in range(int(tok[1])):
            lineno, tok = next_line()
            s, e = reals(lineno, tok, 2)
            try:
                gts.append(GroundTruthInstance(s, e))
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: record {record}: {exc}") from None
        try:
            seq = FrameSequence(seq_id, np.array(rows, dtype=np.float64).reshape(T, d), offset)
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: record {record}: {exc}") from None
        examples.append(Example(seq, gts))
    if pos != len(text):
        raise DatasetFormatError(f"{path}:{pos + 1}: trailing content after {count} records")
    return examples, signature


def write_dataset(directory: str | Path, ds: Dataset) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in SPLITS:
        path = directory / f"{name}.txt"
        write_split(path, ds.split(name), ds.signature)
        paths.append(path)
    return paths


def read_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    ds = Dataset()
    for name in SPLITS:
        path = directory / f"{name}.txt"
        if path.exists():
            examples, signature = read_split(path)
            setattr(ds, name, examples)
            if signature is not None:
                ds.signature = signature
    return ds


def stream_of(sequence_id: str) -> str:
    """Stream key: chunks cut from one stream share the id prefix before '#'."""
    return sequence_id.split("#", 1)[0]


def ingest_features(path: str | Path, chunk_length: int, annotations: list[tuple[float, float]],
                    stream_id: str | None = None, split: str = "test") -> Dataset:
    """Cut one long feature stream into chunks and localize absolute annotations.

    ``annotations`` are inclusive absolute frame intervals ``(start, end)``.
    Pieces of an annotation that cover a single frame of a chunk have zero
    normalized length and are dropped, as is a final remainder under 2 frames.
    """
    if chunk_length < 2:
        raise ValueError("chunk_length must be at least 2")
    path = Path(path)
    stream_id = stream_id or path.stem
    rows, width = [], None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if width is None:
            width = len(tokens)
        elif len(tokens) != width:
            raise DatasetFormatError(f"{path}:{lineno}: {len(tokens)} features, expected {width}")
        try:
            rows.append([float(t) for t in tokens])
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DatasetFormatError(f"{path}: no feature rows")
    stream = np.array(rows, dtype=np.float64)
    for start, end in annotations:
        if not 0 <= start < end:
            raise ValueError(f"annotation ({start}, {end}) must satisfy 0 <= start < end")

    examples = []
    for k, offset in enumerate(range(0, len(stream), chunk_length)):
        feats = stream[offset:offset + chunk_length]
        T = len(feats)
        if T < 2:
            break
        last = offset + T - 1
        gts = []
        for start, end in annotations:
            lo, hi = max(start, offset), min(end, last)
            if hi > lo:
                gts.append(GroundTruthInstance((lo - offset) / (T - 1), (hi - offset) / (T - 1)))
        seq = FrameSequence(f"{stream_id}#{k:04d}", feats, offset)
        examples.append(Example(seq, sorted(gts, key=lambda g: g.s)))
    ds = Dataset()
    setattr(ds, split, examples)
    return ds
