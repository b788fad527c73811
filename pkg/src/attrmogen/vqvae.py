"""Semantic-attribute decoupling VQVAE.

Encoder ``f`` maps a motion to a semantic embedding ``S`` (``T = ceil(L/d)``
steps of ``code_dim`` features), the quantizer maps ``S`` to codebook tokens,
and the decoder ``g(S, A)`` reconstructs the motion from the quantized
embedding concatenated with an attribute embedding. Training alternates an
encoder/decoder/codebook step on

    L_overall = (L_rec + L_embed + L_commit) + alpha * L_entropy + lambda * L_bottleneck

with a cross-entropy step for the proxy attribute classifier.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import config_hash, load_checkpoint, save_checkpoint, torch_rng_state
from .classifier import AttrClassifier, frozen_probs
from .errors import ConfigError, NumericalError, PolicyError, SchemaError, ShapeError
from .nets import ConvTrunk, UpTrunk
from .schema import DEFAULT_SCHEMA, AttributeSchema

log = logging.getLogger(__name__)

LOSS_TERMS = ("rec", "embed", "commit", "entropy", "bottleneck")
POSITION_PERIOD = 32.0  # tokens


@dataclass
class DecoupVqvaeConfig:
    alpha: float = 0.01
    lam: float = 0.5
    beta_commit: float = 0.25
    n_codes: int = 512
    code_dim: int = 128
    width: int = 128
    depth: int = 1
    attr_dim: int = 32
    downsample_factor: int = 4
    residual_levels: int = 1
    use_attributes: bool = True
    classifier_width: int = 64
    classifier_downsample: int = 1
    lr: float = 2e-4
    lr_schedule: str = "constant"
    classifier_lr: float = 2e-4
    batch_size: int = 64
    iterations: int = 2000
    seed: int = 0
    counterfactual_policy: str = "exclude"
    dead_code_patience: int = 256
    embed_norm: str = "rms"
    decoder_positions: int = 0
    plain: bool = False

    def validate(self) -> None:
        if self.alpha < 0 or self.lam < 0 or self.beta_commit < 0:
            raise ConfigError("alpha, lambda and beta_commit must be >= 0")
        if self.n_codes < 1:
            raise ConfigError("codebook must have at least one code")
        if self.residual_levels != 1:
            raise ConfigError("only residual_levels = 1 (single codebook) is supported")
        if self.counterfactual_policy not in ("exclude", "uniform"):
            raise ConfigError(f"unknown counterfactual policy {self.counterfactual_policy!r}")
        if self.plain and (self.alpha or self.lam):
            raise ConfigError("plain mode requires alpha = lambda = 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.embed_norm not in ("layernorm", "rms", "none"):
            raise ConfigError(f"unknown embed_norm {self.embed_norm!r}")
        if self.decoder_positions < 0:
            raise ConfigError("decoder_positions must be >= 0")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# -- losses -----------------------------------------------------------------


def quantize(s: torch.Tensor, codebook: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest code per row under L2, lowest index on ties.

    ``s`` is ``(..., D)``; returns integer tokens ``(...)`` and the quantized
    rows ``(..., D)`` (no straight-through; see ``straight_through``).
    """
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise ConfigError("empty codebook")
    if s.shape[-1] != codebook.shape[1]:
        raise ShapeError(f"embedding width {s.shape[-1]} != code width {codebook.shape[1]}")
    flat = s.reshape(-1, s.shape[-1])
    with torch.no_grad():
        d = torch.cat([((flat[i : i + 256, None, :] - codebook[None]) ** 2).sum(-1)
                       for i in range(0, len(flat), 256)]) if len(flat) else flat.new_zeros(0, len(codebook))
        tokens = d.argmin(dim=1)
    return tokens.reshape(s.shape[:-1]), codebook[tokens].reshape(s.shape)


def straight_through(s: torch.Tensor, s_q: torch.Tensor) -> torch.Tensor:
    """Forward value ``s_q``; backward is the identity onto ``s``."""
    return s + (s_q - s).detach()


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return torch.mean((x - x_hat) ** 2)


def embed_loss(s: torch.Tensor, s_q: torch.Tensor) -> torch.Tensor:
    return torch.mean((s.detach() - s_q) ** 2)


def commit_loss(s: torch.Tensor, s_q: torch.Tensor, beta: float) -> torch.Tensor:
    return beta * torch.mean((s - s_q.detach()) ** 2)


def loss_vqvae(x, x_hat, s, s_q, beta: float = 0.25) -> dict[str, torch.Tensor]:
    if s.shape != s_q.shape:
        raise ShapeError("embedding and quantized embedding shapes differ")
    rec = reconstruction_loss(x, x_hat)
    emb = embed_loss(s, s_q)
    com = commit_loss(s, s_q, beta)
    return {"rec": rec, "embed": emb, "commit": com, "vqvae": rec + emb + com}


def attribute_entropy_loss(probs: torch.Tensor, tol: float = 1e-6) -> torch.Tensor:
    """``sum_i sum_a p(a|s_i) log p(a|s_i)`` (natural log, ``0 log 0 = 0``); always <= 0."""
    if probs.ndim != 2:
        raise ShapeError("probabilities must be (B, |A|)")
    if torch.any(torch.abs(probs.sum(-1) - 1) > tol) or torch.any(probs < 0):
        raise NumericalError("classifier output is not a probability vector")
    return torch.special.xlogy(probs, probs).sum()


def bottleneck_loss(s: torch.Tensor, s_minus: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """``||D - I||_F^2`` with ``D_ij = cos(s[:, i], s_minus[:, j])`` over the row axis.

    Columns with norm <= eps have cosine 0 with everything.
    """
    if s.shape != s_minus.shape or s.ndim != 2:
        raise ShapeError("bottleneck inputs must be equal-shape (rows, D) matrices")
    rows, dim = s.shape
    if dim > rows:
        warnings.warn(f"bottleneck similarity is rank-deficient: D={dim} > rows={rows}", stacklevel=2)
    na = s.norm(dim=0)
    nb = s_minus.norm(dim=0)
    ua = torch.where(na > eps, s / na.clamp_min(eps), torch.zeros_like(s))
    ub = torch.where(nb > eps, s_minus / nb.clamp_min(eps), torch.zeros_like(s_minus))
    sim = ua.T @ ub
    return ((sim - torch.eye(dim, dtype=s.dtype)) ** 2).sum()


def combine_losses(terms: dict[str, torch.Tensor], alpha: float, lam: float) -> torch.Tensor:
    """Overall objective; ``alpha = 0`` or ``lam = 0`` drops the term entirely."""
    total = terms["rec"] + terms["embed"] + terms["commit"]
    if alpha:
        total = total + alpha * terms["entropy"]
    if lam:
        total = total + lam * terms["bottleneck"]
    return total


def counterfactual_attributes(joint: np.ndarray, n_joint: int, rng: np.random.Generator,
                              policy: str = "exclude") -> np.ndarray:
    """Randomized joint attribute classes; ``exclude`` never returns the original class."""
    joint = np.asarray(joint, np.int64)
    if policy == "uniform":
        return rng.integers(0, n_joint, size=joint.shape)
    if policy != "exclude":
        raise PolicyError(f"unknown policy {policy!r}")
    if n_joint < 2:
        raise PolicyError("attribute space of size 1 has no counterfactual")
    r = rng.integers(0, n_joint - 1, size=joint.shape)
    return r + (r >= joint)


# -- model ------------------------------------------------------------------


class DecoupVQVAE(nn.Module):
    def __init__(self, cfg: DecoupVqvaeConfig, channels: int, schema: AttributeSchema = DEFAULT_SCHEMA):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.channels = channels
        self.schema = schema
        d = cfg.downsample_factor
        self.encoder = nn.Sequential(ConvTrunk(channels, cfg.width, d, cfg.depth), _Pointwise(cfg.width, cfg.code_dim))
        self.embed_norm = {
            "layernorm": lambda: nn.LayerNorm(cfg.code_dim, elementwise_affine=False),
            # No centering, so columns of S can still be mutually orthogonal.
            "rms": lambda: nn.RMSNorm(cfg.code_dim, elementwise_affine=False),
            "none": nn.Identity,
        }[cfg.embed_norm]()
        self.codebook = nn.Parameter(torch.empty(cfg.n_codes, cfg.code_dim).uniform_(-1 / cfg.n_codes, 1 / cfg.n_codes))
        dec_in = cfg.code_dim
        if cfg.use_attributes:
            self.attr_embedder = nn.Sequential(
                nn.Linear(schema.onehot_width, cfg.attr_dim), nn.ReLU(), nn.Linear(cfg.attr_dim, cfg.attr_dim)
            )
            dec_in += cfg.attr_dim
        else:
            self.attr_embedder = None
        dec_in += 2 * cfg.decoder_positions
        self.decoder = UpTrunk(dec_in, cfg.width, channels, d, cfg.depth)

    # Attribute labels are (B, n_heads) integer arrays/tensors.
    def attribute_embedding(self, labels) -> torch.Tensor:
        labels = np.asarray(labels.cpu() if isinstance(labels, torch.Tensor) else labels, np.int64)
        labels = labels.reshape(-1, len(self.schema.heads))
        try:
            onehot = self.schema.onehot(labels)
            for j, card in enumerate(self.schema.cardinalities):
                if labels.size and (labels[:, j].min() < 0 or labels[:, j].max() >= card):
                    raise IndexError
        except IndexError:
            raise SchemaError(f"labels outside schema {self.schema.schema_id}") from None
        return self.attr_embedder(torch.from_numpy(onehot))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[-1] != self.channels:
            raise ShapeError(f"encoder expects (B, L, {self.channels}), got {tuple(x.shape)}")
        d = self.cfg.downsample_factor
        pad = (-x.shape[1]) % d
        if pad:
            x = torch.cat([x, x[:, -1:].expand(-1, pad, -1)], dim=1)
        return self.embed_norm(self.encoder(x))

    def quantize(self, s: torch.Tensor):
        return quantize(s, self.codebook)

    def decode(self, s_q: torch.Tensor, labels=None) -> torch.Tensor:
        if s_q.ndim != 3 or s_q.shape[-1] != self.cfg.code_dim:
            raise ShapeError(f"decoder expects (B, T, {self.cfg.code_dim}), got {tuple(s_q.shape)}")
        z = s_q
        if self.attr_embedder is not None:
            if labels is None:
                raise SchemaError("attribute-conditioned decoder needs labels")
            a = self.attribute_embedding(labels)
            if a.shape[0] != s_q.shape[0]:
                raise ShapeError("one attribute label per sequence required")
            z = torch.cat([s_q, a[:, None, :].expand(-1, s_q.shape[1], -1)], dim=-1)
        if self.cfg.decoder_positions:
            z = torch.cat([z, self.position_features(s_q.shape[1]).expand(s_q.shape[0], -1, -1)], dim=-1)
        return self.decoder(z)

    def position_features(self, n_tokens: int) -> torch.Tensor:
        """(1, T, 2K) fixed sinusoids of the token index with periods POSITION_PERIOD / k."""
        t = torch.arange(n_tokens, dtype=torch.float32)[:, None]
        k = torch.arange(1, self.cfg.decoder_positions + 1, dtype=torch.float32)[None, :]
        arg = 2 * math.pi * k * t / POSITION_PERIOD
        return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)[None]

    def decode_tokens(self, tokens: torch.Tensor, labels=None) -> torch.Tensor:
        return self.decode(self.codebook[tokens], labels)

    def forward(self, x, labels):
        s = self.encode(x)
        tokens, s_q = self.quantize(s)
        return self.decode(straight_through(s, s_q), labels), s, s_q, tokens


class _Pointwise(nn.Module):
    def __init__(self, width: int, out: int):
        super().__init__()
        self.act = nn.ReLU()
        self.proj = nn.Conv1d(width, out, 3, padding=1)

    def forward(self, x):
        return self.proj(self.act(x).transpose(1, 2)).transpose(1, 2)


def counterfactual_motion(model: DecoupVQVAE, s_q: torch.Tensor, labels_minus) -> torch.Tensor:
    return model.decode(s_q, labels_minus)


# -- training ---------------------------------------------------------------


@dataclass
class VqvaeRun:
    model: DecoupVQVAE
    classifier: AttrClassifier | None
    history: list[dict] = field(default_factory=list)
    rng_state: dict = field(default_factory=dict)


def build_models(cfg: DecoupVqvaeConfig, channels: int, schema: AttributeSchema = DEFAULT_SCHEMA):
    torch.manual_seed(cfg.seed)
    model = DecoupVQVAE(cfg, channels, schema)
    h = None if cfg.plain else AttrClassifier(cfg.code_dim, schema.n_joint, cfg.classifier_width,
                                              cfg.classifier_downsample, cfg.depth, schema.schema_id)
    return model, h


def train_decoup_vqvae(cfg: DecoupVqvaeConfig, x: np.ndarray, labels: np.ndarray,
                       schema: AttributeSchema = DEFAULT_SCHEMA, log_every: int = 0) -> VqvaeRun:
    """Alternating optimization on a normalized training array ``x`` of shape (N, L, C)."""
    cfg.validate()
    if len(x) == 0:
        raise ConfigError("empty training set")
    model, h = build_models(cfg, x.shape[-1], schema)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    opt_h = torch.optim.Adam(h.parameters(), lr=cfg.classifier_lr) if h is not None else None
    # Both players decay together so the encoder/classifier game settles.
    scheds = [torch.optim.lr_scheduler.CosineAnnealingLR(o, max(cfg.iterations, 1))
              for o in (opt, opt_h) if o is not None and cfg.lr_schedule == "cosine"]
    batch_rng = np.random.default_rng([cfg.seed, 1])
    cf_rng = np.random.default_rng([cfg.seed, 2])
    reseed_rng = np.random.default_rng([cfg.seed, 3])
    xt = torch.as_tensor(x, dtype=torch.float32)
    labels = np.asarray(labels, np.int64)
    joint_all = schema.joint_indices(labels)
    last_used = np.zeros(cfg.n_codes, np.int64)
    if cfg.iterations:
        _init_codebook(model, xt, batch_rng, reseed_rng, cfg.batch_size)
    history = []
    for it in range(cfg.iterations):
        idx = batch_rng.choice(len(xt), size=min(cfg.batch_size, len(xt)), replace=False)
        xb, lb, jb = xt[idx], labels[idx], joint_all[idx]
        model.train()
        s = model.encode(xb)
        tokens, s_q = model.quantize(s)
        s_st = straight_through(s, s_q)
        x_hat = model.decode(s_st, lb)
        terms = loss_vqvae(xb, x_hat, s, s_q, cfg.beta_commit)
        terms["entropy"] = attribute_entropy_loss(frozen_probs(h, s)) if cfg.alpha else torch.zeros(())
        if cfg.lam:
            j_minus = counterfactual_attributes(jb, schema.n_joint, cf_rng, cfg.counterfactual_policy)
            x_minus = counterfactual_motion(model, s_st, schema.labels_from_joint(j_minus))
            s_minus = model.encode(x_minus)
            terms["bottleneck"] = bottleneck_loss(s.reshape(-1, s.shape[-1]), s_minus.reshape(-1, s.shape[-1]))
        else:
            terms["bottleneck"] = torch.zeros(())
        total = combine_losses(terms, cfg.alpha, cfg.lam)
        for name in (*LOSS_TERMS, "overall"):
            value = total if name == "overall" else terms[name]
            if not torch.isfinite(value):
                raise NumericalError(f"non-finite {name} loss at iteration {it}")
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        ce = float("nan")
        if h is not None:
            logits = h(s.detach())
            ce_t = F.cross_entropy(logits, torch.as_tensor(jb))
            opt_h.zero_grad(set_to_none=True)
            ce_t.backward()
            opt_h.step()
            ce = float(ce_t.detach())
        for sc in scheds:
            sc.step()
        used = np.unique(tokens.numpy())
        last_used[used] = it
        n_reseeded = _reseed_dead_codes(model, s.detach(), it, last_used, cfg.dead_code_patience, reseed_rng)
        row = {k: float(terms[k].detach()) for k in LOSS_TERMS}
        row.update(iteration=it, overall=float(total.detach()), ce=ce, codes_used=int(len(used)), reseeded=n_reseeded)
        history.append(row)
        if log_every and it % log_every == 0:
            log.info("it %d rec %.4f ent %.3f bot %.3f ce %.3f codes %d", it, row["rec"], row["entropy"],
                     row["bottleneck"], ce, row["codes_used"])
    model.eval()
    rng_state = {
        "batch": batch_rng.bit_generator.state,
        "counterfactual": cf_rng.bit_generator.state,
        "reseed": reseed_rng.bit_generator.state,
        "torch": torch_rng_state(),
    }
    return VqvaeRun(model, h, history, rng_state)


@torch.no_grad()
def _init_codebook(model, xt, batch_rng, reseed_rng, batch_size) -> None:
    """Data-dependent init: codes start at random encoder outputs of one batch."""
    idx = batch_rng.choice(len(xt), size=min(batch_size, len(xt)), replace=False)
    flat = model.encode(xt[idx]).reshape(-1, model.cfg.code_dim)
    pick = reseed_rng.choice(len(flat), size=model.cfg.n_codes, replace=len(flat) < model.cfg.n_codes)
    model.codebook.copy_(flat[torch.as_tensor(pick)])


@torch.no_grad()
def _reseed_dead_codes(model, s, it, last_used, patience, rng) -> int:
    dead = np.flatnonzero(it - last_used >= patience)
    if not len(dead):
        return 0
    flat = s.reshape(-1, s.shape[-1])
    pick = rng.integers(0, len(flat), size=len(dead))
    model.codebook[torch.as_tensor(dead)] = flat[torch.as_tensor(pick)]
    last_used[dead] = it
    return int(len(dead))


# -- inference helpers ------------------------------------------------------


@torch.no_grad()
def encode_array(model: DecoupVQVAE, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = [model.encode(torch.as_tensor(x[i : i + batch_size], dtype=torch.float32)).numpy()
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, 0, model.cfg.code_dim), np.float32)


@torch.no_grad()
def tokenize_array(model: DecoupVQVAE, x: np.ndarray) -> np.ndarray:
    s = torch.as_tensor(encode_array(model, x))
    return model.quantize(s)[0].numpy()


@torch.no_grad()
def reconstruct_array(model: DecoupVQVAE, x: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(x), batch_size):
        xb = torch.as_tensor(x[i : i + batch_size], dtype=torch.float32)
        out.append(model(xb, labels[i : i + batch_size])[0][:, : xb.shape[1]].numpy())
    return np.concatenate(out)


def relative_mse(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Reconstruction MSE relative to the data's mean square (variance for normalized data)."""
    return float(np.mean((x - x_hat) ** 2) / np.mean(x**2))


# -- checkpoint I/O ---------------------------------------------------------


def save_vqvae(path, run: VqvaeRun, extra_meta: dict | None = None) -> None:
    tensors = {f"vqvae.{k}": v for k, v in run.model.state_dict().items()}
    if run.classifier is not None:
        tensors.update({f"proxy.{k}": v for k, v in run.classifier.state_dict().items()})
    cfg = run.model.cfg.to_dict()
    meta = {
        "kind": "decoup_vqvae",
        "config": cfg,
        "config_hash": config_hash(cfg),
        "channels": run.model.channels,
        "schema": run.model.schema.to_dict(),
        "schema_hash": run.model.schema.hash(),
        "rng_state": run.rng_state,
        "history": run.history,
        **(extra_meta or {}),
    }
    save_checkpoint(path, tensors, meta)


def load_vqvae(path) -> tuple[VqvaeRun, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "decoup_vqvae":
        raise SchemaError(f"{path} is not a VQVAE checkpoint")
    cfg = DecoupVqvaeConfig(**meta["config"])
    schema = AttributeSchema.from_dict(meta["schema"])
    model, h = build_models(cfg, meta["channels"], schema)
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("vqvae.")})
    if h is not None:
        h.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("proxy.")})
    model.eval()
    return VqvaeRun(model, h, meta.get("history", []), meta.get("rng_state", {})), meta

