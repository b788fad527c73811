"""Evaluation metrics and protocols.

Contrastive text/motion feature extractor, FID, R-Precision, MM-Dist,
Diversity, MultiModality, repetition statistics, the true/shuffled attribute
control protocol, and feature export in the corpus container format.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn

from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericalError, ParameterError, SchemaError, ShapeError
from .motion_data import Corpus, MirrorMap, Record, write_corpus
from .nets import ConvTrunk
from .schema import DEFAULT_SCHEMA, AttributeSchema
from .transformer import StubTextEncoder, TextVocab


@dataclass
class EvalConfig:
    feat_dim: int = 64
    width: int = 64
    text_dim: int = 64
    downsample: int = 4
    margin: float = 0.5
    steps: int = 1500
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    r_precision_batch: int = 32
    diversity_pairs: int = 300
    repetitions: int = 20
    mm_reps: int = 10
    mm_texts: int = 16
    classifier_iterations: int = 1500
    classifier_width: int = 64

    def to_dict(self) -> dict:
        return asdict(self)


# -- feature extractor ------------------------------------------------------


class FeatureExtractor(nn.Module):
    """Motion and text encoders into one feature space."""

    def __init__(self, cfg: EvalConfig, channels: int, vocab: TextVocab):
        super().__init__()
        self.cfg = cfg
        self.channels = channels
        self.motion_trunk = ConvTrunk(channels, cfg.width, cfg.downsample, 1)
        self.motion_head = nn.Linear(cfg.width, cfg.feat_dim)
        self.text_encoder = StubTextEncoder(vocab, cfg.text_dim)
        self.text_head = nn.Sequential(nn.Linear(cfg.text_dim, cfg.width), nn.ReLU(), nn.Linear(cfg.width, cfg.feat_dim))

    def motion_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.motion_head(self.motion_trunk(x).mean(dim=1))

    def text_features(self, texts: list[str]) -> torch.Tensor:
        return self.text_head(self.text_encoder(texts))


def build_feature_extractor(cfg: EvalConfig, channels: int, vocab: TextVocab) -> FeatureExtractor:
    torch.manual_seed(cfg.seed)
    return FeatureExtractor(cfg, channels, vocab)


def contrastive_loss(m: torch.Tensor, t: torch.Tensor, groups: np.ndarray, margin: float, shift: int):
    """Pull matched pairs together; push pairs from different groups at least ``margin`` apart."""
    d_pos = (m - t).norm(dim=1)
    t_neg = torch.roll(t, shifts=shift, dims=0)
    g = torch.as_tensor(groups)
    neg = (g != torch.roll(g, shifts=shift, dims=0)).float()
    d_neg = (m - t_neg).norm(dim=1)
    hinge = torch.clamp(margin - d_neg, min=0) ** 2
    return (d_pos**2).mean() + (neg * hinge).sum() / neg.sum().clamp_min(1)


def train_feature_extractor(cfg: EvalConfig, x: np.ndarray, texts: list[str], groups: np.ndarray | None = None,
                            vocab: TextVocab | None = None) -> FeatureExtractor:
    """Margin-based contrastive training; ``groups`` marks semantically equivalent texts
    (action class when known, otherwise the text itself)."""
    if len(x) < 2:
        raise ParameterError("feature extractor needs at least 2 records")
    if groups is None or np.any(np.asarray(groups) < 0):
        uniq = {t: i for i, t in enumerate(sorted(set(texts)))}
        groups = np.array([uniq[t] for t in texts])
    model = build_feature_extractor(cfg, x.shape[-1], vocab or TextVocab.build(texts))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 21])
    xt = torch.as_tensor(x, dtype=torch.float32)
    model.train()
    for _ in range(cfg.steps):
        idx = rng.choice(len(xt), size=min(cfg.batch_size, len(xt)), replace=False)
        shift = int(rng.integers(1, len(idx))) if len(idx) > 1 else 0
        loss = contrastive_loss(model.motion_features(xt[idx]), model.text_features([texts[i] for i in idx]),
                                np.asarray(groups)[idx], cfg.margin, shift)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    model.eval()
    return model


@torch.no_grad()
def motion_features(fx: FeatureExtractor, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    fx.eval()
    out = [fx.motion_features(torch.as_tensor(x[i : i + batch_size], dtype=torch.float32)).numpy()
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out).astype(np.float64) if out else np.zeros((0, fx.cfg.feat_dim))


@torch.no_grad()
def text_features(fx: FeatureExtractor, texts: list[str]) -> np.ndarray:
    fx.eval()
    return fx.text_features(list(texts)).numpy().astype(np.float64)


def save_feature_extractor(path, fx: FeatureExtractor, extra_meta: dict | None = None) -> None:
    cfg = fx.cfg.to_dict()
    meta = {"kind": "feature_extractor", "config": cfg, "config_hash": config_hash(cfg), "channels": fx.channels,
            "vocab": fx.text_encoder.vocab.words, **(extra_meta or {})}
    save_checkpoint(path, fx.state_dict(), meta)


def load_feature_extractor(path) -> tuple[FeatureExtractor, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "feature_extractor":
        raise SchemaError(f"{path} is not a feature-extractor checkpoint")
    fx = build_feature_extractor(EvalConfig(**meta["config"]), meta["channels"], TextVocab(meta["vocab"]))
    fx.load_state_dict(tensors)
    fx.eval()
    return fx, meta


# -- metrics ----------------------------------------------------------------


def _check_features(f: np.ndarray, name: str) -> np.ndarray:
    f = np.asarray(f, np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.ndim != 2:
        raise ShapeError(f"{name} must be (N, F)")
    if not np.isfinite(f).all():
        raise NumericalError(f"{name} contains non-finite values")
    return f


def _sqrt_psd(m: np.ndarray, tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.min(initial=0.0) < -tol:
        raise NumericalError(f"matrix has eigenvalue {w.min():.3g} below -{tol}")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T, w


def fid(features_a, features_b) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ``Tr((S_a S_b)^{1/2})`` is evaluated as the trace of the square root of the
    symmetric matrix ``S_a^{1/2} S_b S_a^{1/2}``, which has the same spectrum.
    """
    a = _check_features(features_a, "features_a")
    b = _check_features(features_b, "features_b")
    if len(a) < 2 or len(b) < 2:
        raise ParameterError("FID needs at least 2 samples per set")
    if a.shape[1] != b.shape[1]:
        raise ShapeError("feature widths differ")
    if len(a) <= a.shape[1] or len(b) <= b.shape[1]:
        warnings.warn("FID with fewer samples than feature dimensions: covariance is singular", stacklevel=2)
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False, ddof=1))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False, ddof=1))
    root_a, _ = _sqrt_psd(cov_a)
    _, w = _sqrt_psd(root_a @ cov_b @ root_a)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2 * np.sum(np.sqrt(w)))
    return max(value, 0.0)


def r_precision(text_feats, motion_feats, batch_size: int = 32, top_k: int = 3) -> np.ndarray:
    """Motion-to-text retrieval accuracy at k = 1..top_k within batches of ``batch_size``.

    The remainder that does not fill a batch is dropped; ties are broken by
    position in the batch.
    """
    t = _check_features(text_feats, "text features")
    m = _check_features(motion_feats, "motion features")
    if t.shape != m.shape:
        raise ShapeError("text and motion features must be aligned pairs")
    if len(t) < batch_size:
        raise ParameterError(f"R-Precision needs at least {batch_size} pairs")
    hits = np.zeros(top_k)
    n = 0
    for start in range(0, len(t) - batch_size + 1, batch_size):
        tb, mb = t[start : start + batch_size], m[start : start + batch_size]
        d = np.linalg.norm(mb[:, None, :] - tb[None, :, :], axis=-1)
        order = np.argsort(d, axis=1, kind="stable")
        rank = np.argmax(order == np.arange(batch_size)[:, None], axis=1)
        for k in range(top_k):
            hits[k] += np.sum(rank <= k)
        n += batch_size
    return hits / n


def mm_dist(text_feats, motion_feats) -> float:
    t = _check_features(text_feats, "text features")
    m = _check_features(motion_feats, "motion features")
    if t.shape != m.shape:
        raise ShapeError("text and motion features must be aligned pairs")
    return float(np.mean(np.linalg.norm(t - m, axis=1)))


def diversity(features, n_pairs: int = 300, rng: np.random.Generator | None = None) -> float:
    """Mean distance over random pairs; disjoint pairs when ``N >= 2 * n_pairs``,
    otherwise each pair is two distinct rows drawn independently."""
    f = _check_features(features, "features")
    if len(f) < 2:
        raise ParameterError("diversity needs at least 2 features")
    rng = rng or np.random.default_rng(0)
    if len(f) >= 2 * n_pairs:
        perm = rng.permutation(len(f))
        i, j = perm[:n_pairs], perm[n_pairs : 2 * n_pairs]
    else:
        pairs = np.array([rng.choice(len(f), 2, replace=False) for _ in range(n_pairs)])
        i, j = pairs[:, 0], pairs[:, 1]
    return float(np.mean(np.linalg.norm(f[i] - f[j], axis=1)))


def multimodality(generate: Callable[[str, int], np.ndarray], texts: list[str], reps: int = 10,
                  seed: int = 0) -> float:
    """Mean within-text pairwise feature distance over ``reps`` generations per text.

    ``generate(text, stream_seed)`` returns one feature vector.
    """
    if reps < 2:
        raise ParameterError("multimodality needs reps >= 2")
    per_text = []
    for ti, text in enumerate(texts):
        feats = np.stack([np.asarray(generate(text, seed * 1_000_003 + ti * reps + r), np.float64) for r in range(reps)])
        d = np.linalg.norm(feats[:, None] - feats[None], axis=-1)
        per_text.append(d[np.triu_indices(reps, 1)].mean())
    return float(np.mean(per_text))


# -- repetition statistics --------------------------------------------------


def confidence_interval(values) -> tuple[float, float]:
    """Mean and 95% half-width ``1.96 * std / sqrt(R)`` (population std)."""
    v = np.asarray(values, np.float64)
    return float(v.mean()), float(1.96 * v.std() / np.sqrt(len(v)))


@dataclass
class MetricReport:
    metrics: dict = field(default_factory=dict)
    config_hash: str = ""
    seeds: list = field(default_factory=list)

    def add(self, name: str, values) -> None:
        mean, ci = confidence_interval(values)
        self.metrics[name] = {"mean": mean, "ci95": ci, "values": [float(v) for v in values]}

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "seeds": list(self.seeds), "metrics": self.metrics}

    def lines(self) -> list[str]:
        return [f"{k:>14s}  {v['mean']:.4f} +/- {v['ci95']:.4f}" for k, v in self.metrics.items()]


def evaluate_generation(fx: FeatureExtractor, real_x: np.ndarray, texts: list[str],
                        generate: Callable[[int], np.ndarray], cfg: EvalConfig, seeds, config_hash_: str = "",
                        mm_generate: Callable[[str, int], np.ndarray] | None = None) -> MetricReport:
    """Repeat the metric suite once per seed; ``generate(seed)`` returns normalized motions aligned with ``texts``."""
    report = MetricReport(config_hash=config_hash_, seeds=list(seeds))
    real_f = motion_features(fx, real_x)
    text_f = text_features(fx, texts)
    cols: dict[str, list] = {k: [] for k in ("fid", "top1", "top2", "top3", "mm_dist", "diversity", "real_top1", "real_diversity")}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(texts))
        gen_f = motion_features(fx, generate(seed))
        cols["fid"].append(fid(real_f, gen_f))
        rp = r_precision(text_f[perm], gen_f[perm], cfg.r_precision_batch)
        for k in range(3):
            cols[f"top{k + 1}"].append(rp[k])
        cols["mm_dist"].append(mm_dist(text_f, gen_f))
        n_pairs = min(cfg.diversity_pairs, len(gen_f) // 2)
        cols["diversity"].append(diversity(gen_f, n_pairs, np.random.default_rng(seed + 1)))
        cols["real_top1"].append(r_precision(text_f[perm], real_f[perm], cfg.r_precision_batch)[0])
        cols["real_diversity"].append(diversity(real_f, n_pairs, np.random.default_rng(seed + 1)))
    for k, v in cols.items():
        report.add(k, v)
    if mm_generate is not None:
        uniq = sorted(set(texts))[: cfg.mm_texts]
        vals = [multimodality(mm_generate, uniq, cfg.mm_reps, seed) for seed in seeds]
        report.add("multimodality", vals)
    return report


# -- attribute control ------------------------------------------------------


def attribute_control_protocol(generate: Callable[[np.ndarray], np.ndarray], true_labels: np.ndarray,
                               classify: Callable[[np.ndarray], np.ndarray], mode: str,
                               rng: np.random.Generator, schema: AttributeSchema = DEFAULT_SCHEMA) -> dict:
    """Generate with true or uniformly re-drawn attributes and score classifier agreement
    with the control input.

    ``generate(target_labels)`` returns one motion per row of ``true_labels``;
    ``classify(motions)`` returns predicted ``(N, n_heads)`` labels. The result
    holds, per head, the accuracy within each target group and over all rows.
    """
    true_labels = np.asarray(true_labels, np.int64)
    if mode == "true":
        targets = true_labels.copy()
    elif mode == "shuffled":
        targets = np.stack([rng.integers(0, card, size=len(true_labels)) for card in schema.cardinalities], axis=1)
    else:
        raise ConfigError(f"unknown protocol mode {mode!r}")
    pred = np.asarray(classify(generate(targets)), np.int64)
    if pred.shape != targets.shape:
        raise SchemaError(f"classifier returned shape {pred.shape}, expected {targets.shape}")
    table = {"mode": mode, "n": int(len(targets))}
    for j, (name, card) in enumerate(schema.heads):
        correct = pred[:, j] == targets[:, j]
        groups = {}
        for g in range(card):
            sel = targets[:, j] == g
            groups[str(g)] = float(correct[sel].mean()) if sel.any() else float("nan")
        table[name] = {"groups": groups, "avg": float(correct.mean())}
    return table


# -- feature export ---------------------------------------------------------


def export_features(path, features: np.ndarray, labels: np.ndarray, texts: list[str], splits: list[str] | None = None,
                    ids: list[str] | None = None, schema: AttributeSchema = DEFAULT_SCHEMA, meta: dict | None = None) -> Corpus:
    """Write ``(N, F)`` features as single-frame records of a corpus container."""
    f = np.asarray(features, np.float32)
    if f.ndim != 2 or len(f) != len(labels) or len(f) != len(texts):
        raise ShapeError("features, labels and texts must align")
    width = f.shape[1]
    records = [
        Record(
            id=ids[i] if ids else f"f{i:06d}",
            length=1,
            channels=width,
            age_group=int(labels[i][0]),
            gender=int(labels[i][1]),
            text=texts[i],
            split=splits[i] if splits else "test",
        )
        for i in range(len(f))
    ]
    corpus = Corpus(records=records, data=[f[i : i + 1].copy() for i in range(len(f))], channels=width,
                    mirror_map=MirrorMap.identity(width), schema=schema, meta={"kind": "features", **(meta or {})})
    write_corpus(corpus, path)
    return corpus
