"""Motion/attribute/text data model, the on-disk corpus container, and the
preprocessing utilities (mirroring, temporal Gaussian denoising, jitter
filtering, normalization).

Corpus directory layout::

    manifest.json   structured metadata (see ``write_corpus``)
    data.bin        float32, little-endian, row-major records concatenated;
                    record i occupies ``length * channels * 4`` bytes starting
                    at ``records[i]["offset"]`` (a byte offset)
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import (
    ConfigError,
    CorpusOffsetError,
    CorpusTruncatedError,
    CorpusVersionError,
    CorpusIOError,
    ParameterError,
    ShapeError,
)
from .schema import DEFAULT_SCHEMA, AttributeSchema

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
DEFAULT_SPLIT_RATIOS = (0.80, 0.05, 0.15)
STD_FLOOR = 1e-8


@dataclass
class MotionSequence:
    values: np.ndarray
    frame_rate_hz: float = 20.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ShapeError(f"motion must be a non-empty L x C array, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ShapeError("motion contains NaN or Inf")
        if self.frame_rate_hz <= 0:
            raise ParameterError("frame_rate_hz must be positive")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MirrorMap:
    """Output channel ``i`` is ``signs[i] * input[:, perm[i]]``."""

    perm: tuple[int, ...]
    signs: tuple[int, ...]

    def __post_init__(self):
        if len(self.perm) != len(self.signs):
            raise ShapeError("mirror map perm/signs length mismatch")
        if sorted(self.perm) != list(range(len(self.perm))):
            raise ConfigError("mirror map perm is not a permutation")
        if any(s not in (-1, 1) for s in self.signs):
            raise ConfigError("mirror map signs must be +1 or -1")

    @classmethod
    def identity(cls, channels: int) -> "MirrorMap":
        return cls(tuple(range(channels)), (1,) * channels)

    def is_involution(self) -> bool:
        return all(
            self.perm[self.perm[i]] == i and self.signs[i] * self.signs[self.perm[i]] == 1
            for i in range(len(self.perm))
        )

    def to_dict(self) -> dict:
        return {"perm": list(self.perm), "signs": list(self.signs)}

    @classmethod
    def from_dict(cls, d: dict) -> "MirrorMap":
        return cls(tuple(int(p) for p in d["perm"]), tuple(int(s) for s in d["signs"]))


@dataclass
class Record:
    id: str
    length: int
    channels: int
    age_group: int
    gender: int
    text: str
    split: str
    offset: int = 0
    action_class: int | None = None

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "length": self.length,
            "channels": self.channels,
            "age_group": self.age_group,
            "gender": self.gender,
            "text": self.text,
            "split": self.split,
            "offset": self.offset,
        }
        if self.action_class is not None:
            d["action_class"] = self.action_class
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Record":
        return cls(
            id=str(d["id"]),
            length=int(d["length"]),
            channels=int(d["channels"]),
            age_group=int(d["age_group"]),
            gender=int(d["gender"]),
            text=str(d["text"]),
            split=str(d["split"]),
            offset=int(d["offset"]),
            action_class=None if d.get("action_class") is None else int(d["action_class"]),
        )


@dataclass
class Corpus:
    """Manifest plus in-memory record data (one float32 L x C array per record)."""

    records: list[Record]
    data: list[np.ndarray]
    channels: int
    mirror_map: MirrorMap
    channel_stats: dict | None = None
    schema: AttributeSchema = DEFAULT_SCHEMA
    frame_rate_hz: float = 20.0
    split_ratios: tuple[float, float, float] = DEFAULT_SPLIT_RATIOS
    seed: int = 0
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if len(self.records) != len(self.data):
            raise ShapeError("records and data differ in length")
        for r, x in zip(self.records, self.data):
            if x.shape != (r.length, r.channels) or r.channels != self.channels:
                raise ShapeError(f"record {r.id}: data shape {x.shape} != ({r.length}, {r.channels})")

    def __len__(self) -> int:
        return len(self.records)

    def indices(self, split: str | None = None) -> list[int]:
        return [i for i, r in enumerate(self.records) if split is None or r.split == split]

    def motion(self, i: int) -> MotionSequence:
        return MotionSequence(self.data[i], self.frame_rate_hz)

    def arrays(self, split: str | None = None):
        """Stack a split into ``(X[N, L, C], labels[N, 2], texts, classes)``.

        All records of the split must share one length.
        """
        idx = self.indices(split)
        if not idx:
            return (
                np.zeros((0, 0, self.channels), np.float32),
                np.zeros((0, 2), np.int64),
                [],
                np.zeros(0, np.int64),
            )
        lengths = {self.records[i].length for i in idx}
        if len(lengths) != 1:
            raise ShapeError(f"split {split!r} has mixed record lengths {sorted(lengths)}")
        x = np.stack([self.data[i] for i in idx]).astype(np.float32)
        labels = np.array([[self.records[i].age_group, self.records[i].gender] for i in idx], np.int64)
        texts = [self.records[i].text for i in idx]
        classes = np.array(
            [-1 if self.records[i].action_class is None else self.records[i].action_class for i in idx],
            np.int64,
        )
        return x, labels, texts, classes

    def copy(self) -> "Corpus":
        return copy.deepcopy(self)


# -- splits -----------------------------------------------------------------


def assign_splits(n: int, ratios=DEFAULT_SPLIT_RATIOS, seed: int = 0) -> list[str]:
    """Deterministic shuffled split; each split size is within one record of ``ratio * n``."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios < 0) or not np.isclose(ratios.sum(), 1.0):
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    order = np.random.default_rng(seed).permutation(n)
    out = ["test"] * n
    for rank, i in enumerate(order):
        out[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return out


# -- normalization ----------------------------------------------------------


def channel_statistics(corpus: Corpus) -> dict:
    idx = corpus.indices("train")
    if not idx:
        raise ConfigError("cannot normalize: training split is empty")
    frames = np.concatenate([corpus.data[i] for i in idx], axis=0).astype(np.float64)
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    std = np.where(std < STD_FLOOR, 1.0, std)
    return {"mean": [float(v) for v in mean], "std": [float(v) for v in std]}


def normalize_corpus(corpus: Corpus) -> tuple[Corpus, dict]:
    """Standardize every split with train-split statistics.

    Channels whose train std falls below 1e-8 get std 1 (shift only).
    """
    stats = channel_statistics(corpus)
    out = corpus.copy()
    out.data = [normalize_values(x, stats) for x in corpus.data]
    out.channel_stats = stats
    return out, stats


def normalize_values(x: np.ndarray, stats: dict) -> np.ndarray:
    mean = np.asarray(stats["mean"], np.float64)
    std = np.asarray(stats["std"], np.float64)
    return ((np.asarray(x, np.float64) - mean) / std).astype(np.float32)


def denormalize_values(x: np.ndarray, stats: dict) -> np.ndarray:
    mean = np.asarray(stats["mean"], np.float64)
    std = np.asarray(stats["std"], np.float64)
    return (np.asarray(x, np.float64) * std + mean).astype(np.float32)


# -- preprocessing ----------------------------------------------------------


def mirror_motion(m: MotionSequence, mirror_map: MirrorMap) -> MotionSequence:
    if len(mirror_map.perm) != m.channels:
        raise ShapeError(f"mirror map covers {len(mirror_map.perm)} channels, motion has {m.channels}")
    perm = np.asarray(mirror_map.perm)
    signs = np.asarray(mirror_map.signs, dtype=np.float32)
    return MotionSequence(m.values[:, perm] * signs, m.frame_rate_hz)


def gaussian_denoise(m: MotionSequence, sigma: float) -> MotionSequence:
    """Per-channel temporal Gaussian smoothing (kernel truncated at 4 sigma, reflect padding)."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    out = gaussian_filter1d(m.values.astype(np.float64), sigma=sigma, axis=0, mode="reflect", truncate=4.0)
    return MotionSequence(out.astype(np.float32), m.frame_rate_hz)


@dataclass
class JitterReport:
    keep: bool
    max_step: float
    step_frame: int
    step_channel: int
    max_abs: float
    abs_frame: int
    abs_channel: int
    reason: str = ""


def jitter_filter(m: MotionSequence, vel_threshold: float, outlier_threshold: float) -> JitterReport:
    """Discard motions whose frame-to-frame step or absolute value exceeds its threshold.

    ``step_frame`` is the later frame of the offending pair.
    """
    if not (vel_threshold > 0 and outlier_threshold > 0):
        raise ParameterError("thresholds must be positive")
    x = m.values.astype(np.float64)
    if x.shape[0] > 1:
        steps = np.abs(np.diff(x, axis=0))
        sf, sc = np.unravel_index(int(np.argmax(steps)), steps.shape)
        max_step, step_frame = float(steps[sf, sc]), int(sf) + 1
    else:
        max_step, step_frame, sc = 0.0, 0, 0
    absx = np.abs(x)
    af, ac = np.unravel_index(int(np.argmax(absx)), absx.shape)
    max_abs = float(absx[af, ac])
    reasons = []
    if max_step > vel_threshold:
        reasons.append(f"step {max_step:.4g} > {vel_threshold:.4g} at frame {step_frame}, channel {sc}")
    if max_abs > outlier_threshold:
        reasons.append(f"|value| {max_abs:.4g} > {outlier_threshold:.4g} at frame {af}, channel {ac}")
    return JitterReport(
        keep=not reasons,
        max_step=max_step,
        step_frame=step_frame,
        step_channel=int(sc),
        max_abs=max_abs,
        abs_frame=int(af),
        abs_channel=int(ac),
        reason="; ".join(reasons),
    )


def preprocess_corpus(
    corpus: Corpus,
    *,
    vel_threshold: float | None = None,
    outlier_threshold: float | None = None,
    denoise_sigma: float | None = None,
    mirror: bool = False,
    normalize: bool = True,
) -> tuple[Corpus, dict]:
    """Filter, denoise, mirror-augment (train split only) and normalize a raw corpus."""
    out_records, out_data = [], []
    n_discarded = 0
    for rec, x in zip(corpus.records, corpus.data):
        m = MotionSequence(x, corpus.frame_rate_hz)
        if vel_threshold is not None and outlier_threshold is not None:
            if not jitter_filter(m, vel_threshold, outlier_threshold).keep:
                n_discarded += 1
                continue
        if denoise_sigma:
            m = gaussian_denoise(m, denoise_sigma)
        out_records.append(copy.copy(rec))
        out_data.append(m.values)
        if mirror and rec.split == "train":
            mm = mirror_motion(m, corpus.mirror_map)
            mrec = copy.copy(rec)
            mrec.id = f"M_{rec.id}"
            out_records.append(mrec)
            out_data.append(mm.values)
    out = corpus.copy()
    out.records, out.data = out_records, out_data
    info = {"discarded": n_discarded, "kept": len(out_records)}
    if normalize:
        out, stats = normalize_corpus(out)
        info["channel_stats"] = stats
    return out, info


# -- container I/O ----------------------------------------------------------


def write_corpus(corpus: Corpus, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    offset = 0
    records = []
    with open(path / "data.bin", "wb") as fh:
        for rec, x in zip(corpus.records, corpus.data):
            blob = np.ascontiguousarray(x, dtype="<f4").tobytes()
            rec = copy.copy(rec)
            rec.offset = offset
            records.append(rec.to_dict())
            fh.write(blob)
            offset += len(blob)
    manifest = {
        "format_version": corpus.format_version,
        "schema": corpus.schema.to_dict(),
        "channels": corpus.channels,
        "frame_rate_hz": corpus.frame_rate_hz,
        "split_ratios": list(corpus.split_ratios),
        "seed": corpus.seed,
        "channel_stats": corpus.channel_stats,
        "mirror_map": corpus.mirror_map.to_dict(),
        "meta": corpus.meta,
        "data_file": "data.bin",
        "data_nbytes": offset,
        "records": records,
    }
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=_json_scalar))
    os.replace(tmp, path / "manifest.json")


def _json_scalar(v):
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def read_corpus(path) -> Corpus:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise CorpusIOError(f"no manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CorpusVersionError(f"corpus format_version {version}, expected {FORMAT_VERSION}")
    dpath = path / manifest.get("data_file", "data.bin")
    raw = dpath.read_bytes() if dpath.exists() else b""
    if len(raw) < manifest["data_nbytes"]:
        raise CorpusTruncatedError(f"{dpath} has {len(raw)} bytes, manifest declares {manifest['data_nbytes']}")
    records, data = [], []
    for d in manifest["records"]:
        rec = Record.from_dict(d)
        nbytes = rec.length * rec.channels * 4
        if rec.offset < 0 or rec.offset + nbytes > len(raw) or rec.offset % 4:
            raise CorpusOffsetError(f"record {rec.id}: region [{rec.offset}, {rec.offset + nbytes}) outside data file")
        arr = np.frombuffer(raw, dtype="<f4", count=rec.length * rec.channels, offset=rec.offset)
        data.append(arr.reshape(rec.length, rec.channels).astype(np.float32))
        records.append(rec)
    mirror = MirrorMap.from_dict(manifest["mirror_map"])
    if not mirror.is_involution():
        raise CorpusIOError("manifest mirror_map is not an involution")
    return Corpus(
        records=records,
        data=data,
        channels=int(manifest["channels"]),
        mirror_map=mirror,
        channel_stats=manifest.get("channel_stats"),
        schema=AttributeSchema.from_dict(manifest["schema"]),
        frame_rate_hz=float(manifest["frame_rate_hz"]),
        split_ratios=tuple(manifest["split_ratios"]),
        seed=int(manifest["seed"]),
        meta=manifest.get("meta", {}),
        format_version=version,
    )


def corpora_equal(a: Corpus, b: Corpus) -> bool:
    """Structural equality, comparing record data bit-for-bit."""
    if len(a) != len(b):
        return False
    same_meta = (
        a.channels == b.channels
        and a.mirror_map == b.mirror_map
        and a.channel_stats == b.channel_stats
        and a.schema == b.schema
        and a.frame_rate_hz == b.frame_rate_hz
        and tuple(a.split_ratios) == tuple(b.split_ratios)
        and a.seed == b.seed
        and a.meta == b.meta
    )
    if not same_meta:
        return False
    for ra, rb, xa, xb in zip(a.records, b.records, a.data, b.data):
        da, db = ra.to_dict(), rb.to_dict()
        da.pop("offset"), db.pop("offset")
        if da != db or xa.tobytes() != xb.tobytes():
            return False
    return True
