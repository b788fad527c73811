"""Proxy attribute classifier ``h(A|S)``, its supervised update, and the linear probe."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler
from torch import nn
from torch.func import functional_call

from .errors import ParameterError, SchemaError, ShapeError
from .nets import ConvTrunk


class AttrClassifier(nn.Module):
    """Conv trunk + temporal mean pooling + linear head over the joint attribute classes.

    With ``downsample=1`` it reads semantic embeddings ``(B, T, D_c)``; with the
    VQVAE's downsample factor and ``in_ch = C`` it reads raw motions.
    """

    def __init__(self, in_ch: int, n_classes: int, width: int = 64, downsample: int = 1, depth: int = 1,
                 schema_id: str = "age4-gender2"):
        super().__init__()
        self.in_ch = in_ch
        self.n_classes = n_classes
        self.schema_id = schema_id
        self.trunk = ConvTrunk(in_ch, width, downsample, depth)
        self.head = nn.Linear(width, n_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[-1] != self.in_ch:
            raise ShapeError(f"classifier expects (B, T, {self.in_ch}), got {tuple(x.shape)}")
        return self.trunk(x).mean(dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def classify(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self(x), dim=-1)


def frozen_probs(h: AttrClassifier, s: torch.Tensor) -> torch.Tensor:
    """``h(s)`` as probabilities, differentiable w.r.t. ``s`` only."""
    params = {k: v.detach() for k, v in h.named_parameters()}
    buffers = dict(h.named_buffers())
    return torch.softmax(functional_call(h, {**params, **buffers}, (s,)), dim=-1)


def update_classifier(h: AttrClassifier, optimizer: torch.optim.Optimizer, s_batch: torch.Tensor,
                      joint_labels: torch.Tensor) -> float:
    """One optimizer step on mean cross-entropy; ``s_batch`` is detached first."""
    joint_labels = torch.as_tensor(joint_labels, dtype=torch.long)
    if joint_labels.numel() and (joint_labels.min() < 0 or joint_labels.max() >= h.n_classes):
        raise SchemaError(f"labels outside [0, {h.n_classes})")
    logits = h(s_batch.detach())
    ce = F.cross_entropy(logits, joint_labels)
    optimizer.zero_grad(set_to_none=True)
    ce.backward()
    optimizer.step()
    return float(ce.detach())


def train_classifier(h: AttrClassifier, x: np.ndarray, joint: np.ndarray, *, iterations: int, batch_size: int,
                     lr: float, seed: int) -> list[float]:
    """Plain supervised training loop, used for the motion-level attribute classifier."""
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(h.parameters(), lr=lr)
    xt = torch.as_tensor(x, dtype=torch.float32)
    yt = torch.as_tensor(joint, dtype=torch.long)
    history = []
    for _ in range(iterations):
        idx = rng.choice(len(xt), size=min(batch_size, len(xt)), replace=False)
        history.append(update_classifier(h, opt, xt[idx], yt[idx]))
    return history


@torch.no_grad()
def predict_joint(h: AttrClassifier, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    h.eval()
    out = []
    for i in range(0, len(x), batch_size):
        out.append(h(torch.as_tensor(x[i : i + batch_size], dtype=torch.float32)).argmax(-1).numpy())
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def linear_probe(embeddings: np.ndarray, labels: np.ndarray, is_train: np.ndarray, seed: int = 0,
                 heads=(("gender", 1), ("age", 0))) -> dict[str, float]:
    """Held-out accuracy of a fresh multinomial logistic regression per attribute.

    ``labels`` is ``(N, 2)`` with columns (age_group, gender); ``heads`` maps a
    report name to its label column.
    """
    emb = np.asarray(embeddings, np.float64)
    labels = np.asarray(labels)
    is_train = np.asarray(is_train, bool)
    if emb.ndim != 2 or len(emb) != len(labels) or len(is_train) != len(emb):
        raise ShapeError("embeddings, labels and split mask must align")
    if is_train.all() or not is_train.any():
        raise ParameterError("linear probe needs both train and held-out rows")
    scaler = StandardScaler().fit(emb[is_train])
    xtr, xte = scaler.transform(emb[is_train]), scaler.transform(emb[~is_train])
    out = {}
    for name, col in heads:
        ytr, yte = labels[is_train, col], labels[~is_train, col]
        if len(np.unique(ytr)) < 2:
            raise ParameterError(f"probe for {name}: training split holds a single class")
        clf = LogisticRegression(max_iter=2000, random_state=seed).fit(xtr, ytr)
        out[name] = float(np.mean(clf.predict(xte) == yte))
    return out
