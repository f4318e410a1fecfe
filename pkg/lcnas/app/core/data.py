"""Desk-scale streaming datasets: synthetic generator, feature files, splits and batching."""
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from ..models.config import DeltaMode, SyntheticTaskConfig

logger = logging.getLogger(__name__)

MAGIC = b"LCNF"
FORMAT_VERSION = 1
FRAME_ALIGN = 4
IGNORE_INDEX = -100

_HEADER = struct.Struct("<4sIIII")  # magic, version, utterances, freq bins, classes
_U32 = struct.Struct("<I")


class FeatureFormatError(ValueError):
    """Feature file is malformed; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"byte {offset}: {message}")
        self.offset = offset


@dataclass(frozen=True)
class Utterance:
    id: str
    features: np.ndarray  # (3, T, F) float32: static, delta, delta-delta
    labels: np.ndarray    # (T,) int64 at the input frame rate
    valid_frames: int     # frames before alignment padding

    @property
    def frames(self) -> int:
        return self.features.shape[1]

    @property
    def static(self) -> np.ndarray:
        return self.features[0]


@dataclass
class Dataset:
    utterances: List[Utterance]
    classes: int
    freq_bins: int = 40
    delta_mode: DeltaMode = DeltaMode.CAUSAL
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    @property
    def feature_lookahead_frames(self) -> int:
        return 2 if self.delta_mode == DeltaMode.SYMMETRIC else 0

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.utterances[i] for i in indices], self.classes, self.freq_bins,
                       self.delta_mode, dict(self.metadata))

    def merged(self, other: "Dataset") -> "Dataset":
        return Dataset(self.utterances + other.utterances, self.classes, self.freq_bins,
                       self.delta_mode, dict(self.metadata))

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for utt in self.utterances:
            digest.update(utt.id.encode("utf-8"))
            digest.update(np.ascontiguousarray(utt.static, dtype="<f4").tobytes())
            digest.update(np.ascontiguousarray(utt.labels, dtype="<i4").tobytes())
        return digest.hexdigest()


# -- features ----------------------------------------------------------------------

def _shift(x: np.ndarray, n: int) -> np.ndarray:
    """x shifted along time by n frames (positive = towards the past), edges replicated."""
    T = x.shape[0]
    idx = np.clip(np.arange(T) - n, 0, T - 1)
    return x[idx]


def compute_deltas(static: np.ndarray, mode: DeltaMode = DeltaMode.CAUSAL
                   ) -> Tuple[np.ndarray, np.ndarray]:
    """First and second temporal differences of a (T, F) array.

    Causal mode uses backward differences. Symmetric mode uses the +-2 frame
    regression for delta and the 5-point quadratic fit for delta-delta, which
    read two future frames.
    """
    x = static.astype(np.float64)
    if mode == DeltaMode.CAUSAL:
        d = x - _shift(x, 1)
        dd = x - 2 * _shift(x, 1) + _shift(x, 2)
    else:
        d = ((_shift(x, -1) - _shift(x, 1)) + 2 * (_shift(x, -2) - _shift(x, 2))) / 10.0
        dd = (2 * _shift(x, 2) - _shift(x, 1) - 2 * x - _shift(x, -1) + 2 * _shift(x, -2)) / 7.0
    return d.astype(np.float32), dd.astype(np.float32)


def align_frames(static: np.ndarray, labels: np.ndarray, multiple: int = FRAME_ALIGN
                 ) -> Tuple[np.ndarray, np.ndarray]:
    """Pad to a multiple of ``multiple`` frames by repeating the last frame and label."""
    T = static.shape[0]
    extra = (-T) % multiple
    if not extra:
        return static, labels
    static = np.concatenate([static, np.repeat(static[-1:], extra, axis=0)])
    labels = np.concatenate([labels, np.repeat(labels[-1:], extra)])
    return static, labels


def make_utterance(utt_id: str, static: np.ndarray, labels: np.ndarray,
                   mode: DeltaMode = DeltaMode.CAUSAL) -> Utterance:
    if static.shape[0] != labels.shape[0]:
        raise ValueError(f"{utt_id}: {static.shape[0]} frames but {labels.shape[0]} labels")
    valid = static.shape[0]
    static, labels = align_frames(static.astype(np.float32), labels.astype(np.int64))
    d, dd = compute_deltas(static, mode)
    return Utterance(id=utt_id, features=np.stack([static, d, dd]), labels=labels,
                     valid_frames=valid)


# -- synthetic task ----------------------------------------------------------------

def window_statistic(static: np.ndarray, past: int, future: int) -> np.ndarray:
    """Mean over frames [t - past, t + future] (clipped) of the per-frame freq mean."""
    s = static.astype(np.float64).mean(axis=1)
    T = s.shape[0]
    # per-frame slices keep the arithmetic identical to window_label
    return np.array([s[max(0, t - past):min(T, t + future + 1)].mean() for t in range(T)])


def window_label(static: np.ndarray, t: int, past: int, future: int,
                 thresholds: Sequence[float]) -> int:
    """The labelling rule for frame ``t``, computed from frames [t - past, t + future] only."""
    T = static.shape[0]
    lo, hi = max(0, t - past), min(T, t + future + 1)
    stat = static[lo:hi].astype(np.float64).mean(axis=1).mean()
    return int(np.searchsorted(np.asarray(thresholds), stat, side="right"))


def gen_synthetic(config: SyntheticTaskConfig, mode: DeltaMode = DeltaMode.CAUSAL) -> Dataset:
    """Deterministic per ``config.seed``.

    Each utterance is a moving-average-smoothed Gaussian process spread over
    the freq bins with per-bin gains plus white noise. The label of frame t is
    the quantile bucket of the window statistic over [t - W, t + F]; bucket
    thresholds are the dataset-wide quantiles, so classes are near uniform.
    """
    rng = np.random.default_rng(config.seed)
    gains = 1.0 + 0.1 * rng.standard_normal(config.freq_bins)
    kernel = np.ones(config.smoothing) / config.smoothing
    statics = []
    for _ in range(config.utterances):
        T = int(rng.integers(config.min_frames, config.max_frames + 1))
        T = max(FRAME_ALIGN, T - T % FRAME_ALIGN)
        z = np.convolve(rng.standard_normal(T + config.smoothing - 1), kernel, mode="valid")
        x = z[:, None] * gains[None, :] + config.noise * rng.standard_normal((T, config.freq_bins))
        statics.append(x.astype(np.float32))

    stats = [window_statistic(x, config.past_window, config.future_window) for x in statics]
    pooled = np.concatenate(stats)
    thresholds = np.quantile(pooled, np.arange(1, config.classes) / config.classes)
    utterances = []
    width = len(str(config.utterances))
    for i, (x, stat) in enumerate(zip(statics, stats)):
        labels = np.searchsorted(thresholds, stat, side="right")
        utterances.append(make_utterance(f"syn-{i:0{width}d}", x, labels, mode))

    logger.info("Generated %d synthetic utterances (W=%d, F=%d, %d classes)",
                len(utterances), config.past_window, config.future_window, config.classes)
    return Dataset(utterances, config.classes, config.freq_bins, mode, metadata={
        "generator": "synthetic",
        "config": config.model_dump(),
        "thresholds": [float(t) for t in thresholds],
    })


# -- splits and batches ------------------------------------------------------------

def split_for_search(dataset: Dataset, seed: int, holdout: float = 0.1
                     ) -> Tuple[Dataset, Dataset, Dataset]:
    """(weight set, alpha set, validation set), disjoint, shuffled by ``seed``."""
    n = len(dataset)
    if n < 4:
        raise ValueError(f"need at least 4 utterances to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(holdout * n))
    val, rest = order[:n_val], order[n_val:]
    half = (len(rest) + 1) // 2
    return (dataset.subset(sorted(rest[:half].tolist())),
            dataset.subset(sorted(rest[half:].tolist())),
            dataset.subset(sorted(val.tolist())))


@dataclass
class Batch:
    features: torch.Tensor  # (B, 3, T, F)
    labels: torch.Tensor    # (B, T // 4), IGNORE_INDEX on padding

    def __len__(self):
        return self.features.shape[0]


def collate(utterances: Sequence[Utterance]) -> Batch:
    """Pad to the longest utterance by edge replication; labels read at frames 4j + 3."""
    T = max(u.frames for u in utterances)
    feats = np.zeros((len(utterances), 3, T, utterances[0].features.shape[2]), dtype=np.float32)
    labels = np.full((len(utterances), T // FRAME_ALIGN), IGNORE_INDEX, dtype=np.int64)
    for i, u in enumerate(utterances):
        feats[i, :, :u.frames] = u.features
        feats[i, :, u.frames:] = u.features[:, -1:]
        frames = np.arange(FRAME_ALIGN - 1, u.valid_frames, FRAME_ALIGN)
        labels[i, :len(frames)] = u.labels[frames]
    return Batch(torch.from_numpy(feats), torch.from_numpy(labels))


def iterate_batches(dataset: Union[Dataset, Sequence[Utterance]], batch_size: int,
                    seed: Optional[int] = None) -> Iterator[Batch]:
    """Yield batches; shuffled when ``seed`` is given, in order otherwise."""
    utts = list(dataset)
    order = np.arange(len(utts))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(utts))
    for start in range(0, len(utts), batch_size):
        yield collate([utts[i] for i in order[start:start + batch_size]])


# -- feature files -----------------------------------------------------------------

def write_features(dataset: Dataset, path: Union[str, Path]) -> Path:
    """Write static features and labels; deltas are recomputed on load."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(dataset), dataset.freq_bins,
                             dataset.classes))
        for utt in dataset:
            name = utt.id.encode("utf-8")
            f.write(_U32.pack(len(name)))
            f.write(name)
            T = utt.valid_frames
            f.write(_U32.pack(T))
            f.write(np.ascontiguousarray(utt.static[:T], dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(utt.labels[:T], dtype="<i4").tobytes())
    return path


def _read(buf: memoryview, offset: int, size: int, what: str) -> memoryview:
    if offset + size > len(buf):
        raise FeatureFormatError(f"truncated {what}: need {size} bytes, "
                                 f"{len(buf) - offset} left", offset)
    return buf[offset:offset + size]


def load_features(path: Union[str, Path], mode: DeltaMode = DeltaMode.CAUSAL,
                  max_length: int = 1024) -> Dataset:
    """Read a feature file; utterances longer than ``max_length`` frames are skipped."""
    data = memoryview(Path(path).read_bytes())
    magic, version, count, freq, classes = _HEADER.unpack(_read(data, 0, _HEADER.size, "header"))
    if magic != MAGIC:
        raise FeatureFormatError(f"bad magic {bytes(magic)!r}", 0)
    if version != FORMAT_VERSION:
        raise FeatureFormatError(f"unsupported version {version}", 4)
    if freq == 0 or classes < 2:
        raise FeatureFormatError(f"bad dims: {freq} freq bins, {classes} classes", 12)

    offset = _HEADER.size
    utterances = []
    skipped = 0
    for _ in range(count):
        (n,) = _U32.unpack(_read(data, offset, 4, "id length"))
        offset += 4
        try:
            utt_id = bytes(_read(data, offset, n, "id")).decode("utf-8")
        except UnicodeDecodeError:
            raise FeatureFormatError("id is not UTF-8", offset) from None
        offset += n
        (T,) = _U32.unpack(_read(data, offset, 4, "frame count"))
        if T == 0:
            raise FeatureFormatError(f"{utt_id}: zero frames", offset)
        offset += 4
        static = np.frombuffer(_read(data, offset, 4 * T * freq, "features"), dtype="<f4")
        offset += 4 * T * freq
        labels = np.frombuffer(_read(data, offset, 4 * T, "labels"), dtype="<i4")
        if labels.min() < 0 or labels.max() >= classes:
            raise FeatureFormatError(f"{utt_id}: label outside [0, {classes})", offset)
        offset += 4 * T
        if T > max_length:
            skipped += 1
            continue
        utterances.append(make_utterance(utt_id, static.reshape(T, freq).copy(),
                                         labels.astype(np.int64), mode))
    if offset != len(data):
        raise FeatureFormatError(f"{len(data) - offset} trailing bytes", offset)
    if skipped:
        logger.info("Skipped %d utterances longer than %d frames", skipped, max_length)
    return Dataset(utterances, classes, freq, mode, metadata={"source": str(path)})
