"""Text-conditioned masked token transformer and iterative parallel decoding.

Training masks a fraction ``cos(pi * u / 2)`` (``u ~ U(0, 1)``) of each token
sequence and predicts the masked tokens from the rest plus a text vector that
is prepended as an extra sequence element. Inference starts fully masked and
over ``T_dec`` rounds keeps the most confident predictions, re-masking
``round(cos(pi/2 * t/T_dec) * length)`` positions after round ``t``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .errors import ConfigError, CorpusError, ParameterError, SchemaError, ShapeError
from .schema import attribute_phrase

UNK = "<unk>"


def mask_schedule(u):
    """Fraction of positions left masked at progress ``u`` in [0, 1]."""
    return np.cos(np.pi * np.asarray(u, np.float64) / 2)


def tokenize_text(text: str) -> list[str]:
    words = text.lower().split()
    if not words:
        raise ParameterError("empty text prompt")
    return words


def with_attributes(text: str, age_group: int, gender: int) -> str:
    return f"{attribute_phrase(age_group, gender)} {text}"


def prompt_for(text: str, age_group: int, gender: int, mode: str, phase: str) -> str:
    """Apply the attributes-in-text baseline: ``mode`` in off/train/test/both, ``phase`` train/test."""
    if mode not in ("off", "train", "test", "both"):
        raise ConfigError(f"unknown attr-in-text mode {mode!r}")
    if mode == "both" or mode == phase:
        return with_attributes(text, age_group, gender)
    return text


@dataclass
class TextVocab:
    words: list[str]

    @classmethod
    def build(cls, texts) -> "TextVocab":
        return cls(sorted({w for t in texts for w in tokenize_text(t)}))

    def __post_init__(self):
        self._index = {w: i + 1 for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words) + 1

    def ids(self, text: str) -> list[int]:
        return [self._index.get(w, 0) for w in tokenize_text(text)]


class StubTextEncoder(nn.Module):
    """Bag-of-words text encoder: mean of per-word embeddings, shared UNK row 0."""

    def __init__(self, vocab: TextVocab, dim: int = 64):
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        self.embedding = nn.Embedding(len(vocab), dim)

    def forward(self, texts: list[str]) -> torch.Tensor:
        rows = [self.embedding(torch.tensor(self.vocab.ids(t))).mean(0) for t in texts]
        return torch.stack(rows) if rows else torch.zeros(0, self.dim)


@dataclass
class MaskedTransformerConfig:
    layers: int = 2
    heads: int = 4
    width: int = 128
    text_dim: int = 64
    max_len: int = 16
    decode_iters: int = 10
    dropout: float = 0.1
    lr: float = 2e-4
    batch_size: int = 64
    steps: int = 3000
    seed: int = 0
    sample: bool = False
    temperature: float = 1.0
    attr_in_text: str = "off"

    def validate(self) -> None:
        if self.decode_iters < 1:
            raise ConfigError("decode_iters must be >= 1")
        if self.width % self.heads:
            raise ConfigError("width must be divisible by heads")
        if self.attr_in_text not in ("off", "train", "test", "both"):
            raise ConfigError(f"unknown attr_in_text {self.attr_in_text!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class MaskedTokenTransformer(nn.Module):
    def __init__(self, cfg: MaskedTransformerConfig, n_codes: int):
        super().__init__()
        self.cfg = cfg
        self.n_codes = n_codes
        self.mask_id = n_codes
        self.text_proj = nn.Linear(cfg.text_dim, cfg.width)
        self.tok_emb = nn.Embedding(n_codes + 1, cfg.width)
        self.pos_emb = nn.Embedding(cfg.max_len + 1, cfg.width)
        layer = nn.TransformerEncoderLayer(
            cfg.width, cfg.heads, 4 * cfg.width, cfg.dropout, batch_first=True, norm_first=True
        )
        self.body = nn.TransformerEncoder(layer, cfg.layers, enable_nested_tensor=False)
        self.head = nn.Sequential(nn.LayerNorm(cfg.width), nn.Linear(cfg.width, n_codes))
        # BERT-style small init: near-uniform predictions before training.
        nn.init.normal_(self.head[1].weight, std=0.02)
        nn.init.zeros_(self.head[1].bias)

    def forward(self, text_vec: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """Logits over the codebook for every token position, ``(B, T, n_codes)``."""
        b, t = tokens.shape
        if t > self.cfg.max_len:
            raise ShapeError(f"sequence length {t} exceeds max_len {self.cfg.max_len}")
        seq = torch.cat([self.text_proj(text_vec)[:, None], self.tok_emb(tokens)], dim=1)
        seq = seq + self.pos_emb(torch.arange(t + 1))[None]
        return self.head(self.body(seq)[:, 1:])


def apply_mask(tokens: torch.Tensor, ratios, mask_id: int, gen: torch.Generator | None = None):
    """Mask ``ceil(ratio * T)`` random positions per row; returns (inputs, mask)."""
    b, t = tokens.shape
    ratios = torch.as_tensor(np.asarray(ratios, np.float64)).reshape(b)
    n_mask = torch.ceil(ratios * t - 1e-9).clamp(0, t).long()
    order = torch.rand(b, t, generator=gen).argsort(dim=1)
    rank = order.argsort(dim=1)
    mask = rank < n_mask[:, None]
    return torch.where(mask, torch.full_like(tokens, mask_id), tokens), mask


def masked_loss(model: MaskedTokenTransformer, text_vec, tokens, ratios, gen=None):
    """Cross-entropy on masked positions only; ``(0, 0)`` when nothing is masked."""
    inputs, mask = apply_mask(tokens, ratios, model.mask_id, gen)
    n = int(mask.sum())
    if n == 0:
        return torch.zeros((), requires_grad=False), 0, mask
    logits = model(text_vec, inputs)
    return F.cross_entropy(logits[mask], tokens[mask]), n, mask


@dataclass
class TransformerRun:
    model: MaskedTokenTransformer
    text_encoder: StubTextEncoder
    history: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def build_transformer(cfg: MaskedTransformerConfig, vocab: TextVocab, n_codes: int):
    torch.manual_seed(cfg.seed)
    text_encoder = StubTextEncoder(vocab, cfg.text_dim)
    model = MaskedTokenTransformer(cfg, n_codes)
    return model, text_encoder


def train_transformer(cfg: MaskedTransformerConfig, tokens: np.ndarray, texts: list[str], n_codes: int,
                      vocab: TextVocab | None = None) -> TransformerRun:
    """Masked-token training on precomputed ``tokens`` (N, T) with one prompt per row."""
    cfg.validate()
    tokens = np.asarray(tokens, np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= n_codes):
        raise CorpusError(f"token ids must lie in [0, {n_codes})")
    if len(tokens) != len(texts):
        raise ShapeError("one text per token sequence required")
    vocab = vocab or TextVocab.build(texts)
    model, text_encoder = build_transformer(cfg, vocab, n_codes)
    params = list(model.parameters()) + list(text_encoder.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=0.01)
    rng = np.random.default_rng([cfg.seed, 11])
    gen = torch.Generator().manual_seed(cfg.seed)
    tok = torch.as_tensor(tokens)
    history = []
    for step in range(cfg.steps):
        model.train()
        idx = rng.choice(len(tok), size=min(cfg.batch_size, len(tok)), replace=False)
        ratios = mask_schedule(rng.random(len(idx)))
        loss, n, _ = masked_loss(model, text_encoder([texts[i] for i in idx]), tok[idx], ratios, gen)
        if n:
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        history.append({"step": step, "loss": float(loss.detach()), "masked": n})
    model.eval()
    return TransformerRun(model, text_encoder, history, {"n_codes": n_codes})


@torch.no_grad()
def generate_tokens(run: TransformerRun, text_vec: torch.Tensor, length: int, decode_iters: int | None = None,
                    gen: torch.Generator | None = None, sample: bool | None = None,
                    temperature: float | None = None, trace: list | None = None) -> torch.Tensor:
    """Iterative confidence-based decoding for a batch of text vectors ``(B, text_dim)``."""
    model = run.model
    cfg = model.cfg
    decode_iters = cfg.decode_iters if decode_iters is None else decode_iters
    sample = cfg.sample if sample is None else sample
    temperature = cfg.temperature if temperature is None else temperature
    if decode_iters < 1:
        raise ConfigError("decode_iters must be >= 1")
    if length > cfg.max_len:
        raise ShapeError(f"length {length} exceeds max_len {cfg.max_len}")
    model.eval()
    b = text_vec.shape[0]
    ids = torch.full((b, length), model.mask_id, dtype=torch.long)
    is_mask = torch.ones(b, length, dtype=torch.bool)
    for t in range(1, decode_iters + 1):
        probs = torch.softmax(model(text_vec, ids) / temperature, dim=-1)
        if sample:
            pred = torch.multinomial(probs.reshape(-1, probs.shape[-1]), 1, generator=gen).reshape(b, length)
        else:
            pred = probs.argmax(-1)
        ids = torch.where(is_mask, pred, ids)
        conf = probs.gather(-1, ids[..., None])[..., 0]
        n_mask = int(round(float(mask_schedule(t / decode_iters)) * length))
        if t == decode_iters:
            n_mask = 0
        is_mask = torch.zeros_like(is_mask)
        if n_mask:
            lowest = conf.argsort(dim=1)[:, :n_mask]
            is_mask.scatter_(1, lowest, True)
            ids = torch.where(is_mask, torch.full_like(ids, model.mask_id), ids)
        if trace is not None:
            trace.append(1.0 - n_mask / length)
    return ids


def encode_texts(run: TransformerRun, texts: list[str]) -> torch.Tensor:
    with torch.no_grad():
        return run.text_encoder(texts)


@torch.no_grad()
def masked_accuracy(run: TransformerRun, tokens: np.ndarray, texts: list[str], seed: int = 0) -> float:
    """Top-1 accuracy on masked positions under the training mask distribution."""
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    tok = torch.as_tensor(np.asarray(tokens, np.int64))
    inputs, mask = apply_mask(tok, mask_schedule(rng.random(len(tok))), run.model.mask_id, gen)
    logits = run.model(encode_texts(run, texts), inputs)
    return float((logits.argmax(-1)[mask] == tok[mask]).float().mean())


@torch.no_grad()
def masked_ce(run: TransformerRun, tokens: np.ndarray, texts: list[str], seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    loss, _, _ = masked_loss(run.model, encode_texts(run, texts), torch.as_tensor(tokens), mask_schedule(rng.random(len(tokens))), gen)
    return float(loss)


def generate_motion(texts: list[str], labels: np.ndarray, vqvae, transformer: TransformerRun,
                    channel_stats: dict | None, gen: torch.Generator | None = None, length: int | None = None,
                    **decode_kw) -> np.ndarray:
    """Text -> tokens -> codebook lookup -> attribute-conditioned decode, in raw (denormalized) units.

    Returns ``(B, length * d, C)`` float32.
    """
    from .motion_data import denormalize_values

    vq_hash = config_hash(vqvae.cfg.to_dict())
    expected = transformer.meta.get("vqvae_hash")
    if expected is not None and expected != vq_hash:
        raise SchemaError(f"transformer was trained on VQVAE {expected}, got {vq_hash}")
    if transformer.model.n_codes != vqvae.cfg.n_codes:
        raise SchemaError("transformer vocabulary does not match the VQVAE codebook")
    length = length or transformer.meta.get("token_length") or transformer.model.cfg.max_len
    tokens = generate_tokens(transformer, encode_texts(transformer, texts), length, gen=gen, **decode_kw)
    with torch.no_grad():
        x = vqvae.decode_tokens(tokens, np.asarray(labels)).numpy()
    if channel_stats is not None:
        x = denormalize_values(x, channel_stats)
    return x.astype(np.float32)


# -- checkpoint I/O ---------------------------------------------------------


def save_transformer(path, run: TransformerRun, extra_meta: dict | None = None) -> None:
    tensors = {f"transformer.{k}": v for k, v in run.model.state_dict().items()}
    tensors.update({f"text.{k}": v for k, v in run.text_encoder.state_dict().items()})
    cfg = run.model.cfg.to_dict()
    meta = {
        "kind": "semantics_transformer",
        "config": cfg,
        "config_hash": config_hash(cfg),
        "vocab": run.text_encoder.vocab.words,
        "history": run.history,
        **run.meta,
        **(extra_meta or {}),
    }
    save_checkpoint(path, tensors, meta)


def load_transformer(path) -> TransformerRun:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "semantics_transformer":
        raise SchemaError(f"{path} is not a transformer checkpoint")
    cfg = MaskedTransformerConfig(**meta["config"])
    model, text_encoder = build_transformer(cfg, TextVocab(meta["vocab"]), meta["n_codes"])
    model.load_state_dict({k[12:]: v for k, v in tensors.items() if k.startswith("transformer.")})
    text_encoder.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("text.")})
    model.eval()
    extra = {k: v for k, v in meta.items() if k not in ("kind", "config", "config_hash", "vocab", "history", "format_version")}
    return TransformerRun(model, text_encoder, meta.get("history", []), extra)


def token_length(frames: int, downsample: int) -> int:
    return math.ceil(frames / downsample)
