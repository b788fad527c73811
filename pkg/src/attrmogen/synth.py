"""Synthetic attribute-conditioned motion corpus with an analytic inverse.

Every clip is a per-class multichannel sinusoid. Age scales the amplitude and
the playback speed, gender adds ``(-1)**gender * gender_offset`` to the offset
channels, and i.i.d. Gaussian noise is added last. Each channel's pattern is
made zero-mean and unit-RMS over the clip before scaling, so amplitude and
offset are recoverable exactly from noise-free data.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .motion_data import DEFAULT_SPLIT_RATIOS, Corpus, MirrorMap, MotionSequence, Record, assign_splits
from .schema import DEFAULT_SCHEMA, AttributeLabel

DEFAULT_TEMPLATES = (
    ("a person walks slowly forward", "someone is walking forward", "a person takes steps forward"),
    ("a person runs in place", "someone is jogging on the spot", "a person is running"),
    ("a person jumps up and down", "someone hops repeatedly", "a person is jumping"),
    ("a person waves with the right hand", "someone waves hello", "a person is waving an arm"),
    ("a person kicks with the left leg", "someone kicks forward", "a person does a kick"),
    ("a person squats down and stands up", "someone performs squats", "a person bends the knees"),
    ("a person turns around in a circle", "someone spins around", "a person rotates the body"),
    ("a person throws a ball overhand", "someone throws something", "a person makes a throwing motion"),
)


@dataclass
class SynthSpec:
    n_classes: int = 8
    n_channels: int = 16
    frames: int = 64
    age_amplitude: tuple[float, ...] = (1.0, 0.9, 0.75, 0.55)
    age_speed: tuple[float, ...] = (1.1, 1.0, 0.9, 0.7)
    gender_offset: float = 0.3
    noise_std: float = 0.05
    seed: int = 0
    n_offset_channels: int = 2
    n_phases: int = 4
    templates: tuple[tuple[str, ...], ...] = DEFAULT_TEMPLATES
    frame_rate_hz: float = 20.0

    def __post_init__(self):
        self.age_amplitude = tuple(float(v) for v in self.age_amplitude)
        self.age_speed = tuple(float(v) for v in self.age_speed)
        self.templates = tuple(tuple(t) for t in self.templates)

    @property
    def pattern_channels(self) -> np.ndarray:
        return np.arange(self.n_channels - self.n_offset_channels)

    @property
    def offset_channels(self) -> np.ndarray:
        return np.arange(self.n_channels - self.n_offset_channels, self.n_channels)

    def validate(self) -> None:
        amp = np.asarray(self.age_amplitude)
        if len(amp) != 4 or len(self.age_speed) != 4:
            raise ConfigError("age_amplitude and age_speed need one entry per age group (4)")
        if np.any(amp <= 0) or np.any(np.diff(amp) >= 0):
            raise ConfigError("age_amplitude must be positive and strictly decreasing")
        if any(s <= 0 for s in self.age_speed):
            raise ConfigError("age_speed must be positive")
        if not 0 < self.n_offset_channels < self.n_channels:
            raise ConfigError("need at least one offset channel and one pattern channel")
        if self.n_classes < 1 or self.frames < 4 or self.n_phases < 1 or self.noise_std < 0:
            raise ConfigError("invalid class/frame/phase/noise settings")
        if len(self.templates) < self.n_classes or any(len(t) == 0 for t in self.templates[: self.n_classes]):
            raise ConfigError("every class needs at least one text template")
        threshold = 10 * self.noise_std * np.sqrt(self.frames * self.n_channels)
        gap = min_prototype_distance(self)
        if gap <= threshold:
            raise ConfigError(f"class prototypes too close: min distance {gap:.3f} <= {threshold:.3f}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["age_amplitude"] = list(self.age_amplitude)
        d["age_speed"] = list(self.age_speed)
        d["templates"] = [list(t) for t in self.templates]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)


def _class_params(spec: SynthSpec):
    """Base frequency (cycles per clip), channel weights and phases per class."""
    rng = np.random.default_rng([spec.seed, 7919])
    freqs = 1.0 + 0.5 * np.arange(spec.n_classes)
    weights = rng.uniform(0.5, 1.5, size=(spec.n_classes, spec.n_channels))
    weights /= np.sqrt(np.mean(weights[:, spec.pattern_channels] ** 2, axis=1, keepdims=True))
    phases = rng.uniform(0, 2 * np.pi, size=(spec.n_classes, spec.n_channels))
    harmonic = rng.uniform(0.2, 0.6, size=(spec.n_classes, spec.n_channels))
    return freqs, weights, phases, harmonic


def prototype(spec: SynthSpec, action_class: int, age_group: int, gender: int, phase_index: int = 0) -> np.ndarray:
    """Noise-free clip, float64 array of shape (frames, n_channels)."""
    freqs, weights, phases, harmonic = _class_params(spec)
    t = np.arange(spec.frames)[:, None] / spec.frames
    arg = (
        2 * np.pi * freqs[action_class] * spec.age_speed[age_group] * t
        + phases[action_class][None, :]
        + 2 * np.pi * phase_index / spec.n_phases
    )
    pattern = np.sin(arg) + harmonic[action_class][None, :] * np.sin(2 * arg)
    pattern = pattern - pattern.mean(axis=0, keepdims=True)
    pattern = pattern / np.sqrt(np.mean(pattern**2, axis=0, keepdims=True))
    x = spec.age_amplitude[age_group] * weights[action_class][None, :] * pattern
    x[:, spec.offset_channels] += (-1) ** gender * spec.gender_offset
    return x


def min_prototype_distance(spec: SynthSpec) -> float:
    """Smallest L2 distance between two classes' prototypes over all fixed attribute cells."""
    best = np.inf
    for age in range(4):
        for gender in range(2):
            protos = [prototype(spec, k, age, gender) for k in range(spec.n_classes)]
            for i in range(len(protos)):
                for j in range(i + 1, len(protos)):
                    best = min(best, float(np.linalg.norm(protos[i] - protos[j])))
    return best


def generate_corpus(spec: SynthSpec, n_per_cell: int, split_ratios=DEFAULT_SPLIT_RATIOS) -> Corpus:
    if n_per_cell < 1:
        raise ConfigError("n_per_cell must be >= 1")
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    records, data = [], []
    for k in range(spec.n_classes):
        templates = spec.templates[k]
        for age in range(4):
            for gender in range(2):
                for j in range(n_per_cell):
                    x = prototype(spec, k, age, gender, j % spec.n_phases)
                    x = x + spec.noise_std * rng.standard_normal(x.shape)
                    records.append(
                        Record(
                            id=f"c{k}_a{age}_g{gender}_{j:04d}",
                            length=spec.frames,
                            channels=spec.n_channels,
                            age_group=age,
                            gender=gender,
                            text=templates[j % len(templates)],
                            split="train",
                            action_class=k,
                        )
                    )
                    data.append(x.astype(np.float32))
    for rec, split in zip(records, assign_splits(len(records), split_ratios, spec.seed)):
        rec.split = split
    return Corpus(
        records=records,
        data=data,
        channels=spec.n_channels,
        mirror_map=synth_mirror_map(spec),
        schema=DEFAULT_SCHEMA,
        frame_rate_hz=spec.frame_rate_hz,
        split_ratios=tuple(split_ratios),
        seed=spec.seed,
        meta={"synth_spec": spec.to_dict(), "n_per_cell": n_per_cell},
    )


def synth_mirror_map(spec: SynthSpec) -> MirrorMap:
    """Swap adjacent pattern channels (a left/right pairing); offset channels stay put."""
    perm = list(range(spec.n_channels))
    pat = list(spec.pattern_channels)
    for a, b in zip(pat[0::2], pat[1::2]):
        perm[a], perm[b] = b, a
    return MirrorMap(tuple(perm), (1,) * spec.n_channels)


@dataclass
class OracleResult:
    label: AttributeLabel
    confidence: float
    amplitude: float
    frequency: float
    offset_mean: float
    age_distances: list = field(default_factory=list)


def oracle_attributes(m: MotionSequence | np.ndarray, spec: SynthSpec) -> OracleResult:
    """Recover (age_group, gender) from a raw-unit synthetic motion.

    Age is the amplitude-table entry nearest to the noise-corrected RMS of the
    pattern channels; gender is male (0) when the mean of the offset channels is
    >= 0. ``confidence`` is the gap between the best and second-best age
    distance. ``frequency`` (cycles per clip) is reported for diagnostics only.
    """
    x = np.asarray(m.values if isinstance(m, MotionSequence) else m, dtype=np.float64)
    pat = x[:, spec.pattern_channels]
    centered = pat - pat.mean(axis=0, keepdims=True)
    ms = float(np.mean(centered**2))
    amplitude = float(np.sqrt(max(ms - spec.noise_std**2, 0.0)))
    dists = np.abs(np.asarray(spec.age_amplitude) - amplitude)
    age = int(np.argmin(dists))
    second = np.partition(dists, 1)[1] if len(dists) > 1 else np.inf
    offset_mean = float(x[:, spec.offset_channels].mean())
    gender = 0 if offset_mean >= 0 else 1
    n_fft = 8 * x.shape[0]
    power = np.sum(np.abs(np.fft.rfft(centered, n=n_fft, axis=0)) ** 2, axis=1)
    power[0] = 0.0
    frequency = float(np.argmax(power) * x.shape[0] / n_fft)
    return OracleResult(
        label=AttributeLabel(age, gender),
        confidence=float(second - dists[age]),
        amplitude=amplitude,
        frequency=frequency,
        offset_mean=offset_mean,
        age_distances=[float(d) for d in dists],
    )


def nearest_prototype_class(x: np.ndarray, spec: SynthSpec, age_group: int, gender: int) -> int:
    """Class whose noise-free prototype (best phase) at the given attributes is closest in L2."""
    x = np.asarray(x, dtype=np.float64)
    best, best_k = np.inf, -1
    for k in range(spec.n_classes):
        for j in range(spec.n_phases):
            d = np.linalg.norm(x - prototype(spec, k, age_group, gender, j))
            if d < best:
                best, best_k = d, k
    return best_k
