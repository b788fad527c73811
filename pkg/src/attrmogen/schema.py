"""Discrete attribute schema: named heads with fixed cardinalities.

The joint class index is the mixed-radix number formed by the heads in
declaration order, so under the default schema ``joint = age * 2 + gender``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import SchemaError

AGE_RANGES = ("5-18", "19-35", "36-59", "60-88")
GENDER_NAMES = ("male", "female")


@dataclass(frozen=True)
class AttributeSchema:
    schema_id: str = "age4-gender2"
    heads: tuple[tuple[str, int], ...] = (("age_group", 4), ("gender", 2))

    def __post_init__(self):
        if not self.heads:
            raise SchemaError("schema needs at least one head")
        for name, card in self.heads:
            if card < 1:
                raise SchemaError(f"head {name!r} has cardinality {card}")

    @property
    def head_names(self) -> tuple[str, ...]:
        return tuple(h for h, _ in self.heads)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(c for _, c in self.heads)

    @property
    def n_joint(self) -> int:
        return int(np.prod(self.cardinalities))

    @property
    def onehot_width(self) -> int:
        return int(sum(self.cardinalities))

    def validate(self, values) -> None:
        values = tuple(int(v) for v in values)
        if len(values) != len(self.heads):
            raise SchemaError(f"expected {len(self.heads)} attribute values, got {len(values)}")
        for (name, card), v in zip(self.heads, values):
            if not 0 <= v < card:
                raise SchemaError(f"{name}={v} outside [0, {card})")

    def joint_index(self, values) -> int:
        self.validate(values)
        idx = 0
        for (_, card), v in zip(self.heads, values):
            idx = idx * card + int(v)
        return idx

    def from_joint(self, joint: int) -> tuple[int, ...]:
        if not 0 <= joint < self.n_joint:
            raise SchemaError(f"joint class {joint} outside [0, {self.n_joint})")
        out = []
        for _, card in reversed(self.heads):
            out.append(joint % card)
            joint //= card
        return tuple(reversed(out))

    def joint_indices(self, labels: np.ndarray) -> np.ndarray:
        """Vectorized ``joint_index`` for an (N, n_heads) integer array."""
        labels = np.asarray(labels, dtype=np.int64)
        idx = np.zeros(labels.shape[0], dtype=np.int64)
        for j, card in enumerate(self.cardinalities):
            if labels.size and (labels[:, j].min() < 0 or labels[:, j].max() >= card):
                raise SchemaError(f"head {self.heads[j][0]} out of range")
            idx = idx * card + labels[:, j]
        return idx

    def labels_from_joint(self, joint: np.ndarray) -> np.ndarray:
        joint = np.asarray(joint, dtype=np.int64).copy()
        cols = []
        for card in reversed(self.cardinalities):
            cols.append(joint % card)
            joint //= card
        return np.stack(cols[::-1], axis=1)

    def onehot(self, labels: np.ndarray) -> np.ndarray:
        """Concatenated per-head one-hot encodings, shape (N, onehot_width)."""
        labels = np.asarray(labels, dtype=np.int64).reshape(-1, len(self.heads))
        parts = [np.eye(card, dtype=np.float32)[labels[:, j]] for j, card in enumerate(self.cardinalities)]
        return np.concatenate(parts, axis=1)

    def to_dict(self) -> dict:
        return {"schema_id": self.schema_id, "heads": [[n, c] for n, c in self.heads]}

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeSchema":
        return cls(schema_id=d["schema_id"], heads=tuple((str(n), int(c)) for n, c in d["heads"]))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


DEFAULT_SCHEMA = AttributeSchema()


@dataclass(frozen=True)
class AttributeLabel:
    age_group: int
    gender: int
    schema_id: str = DEFAULT_SCHEMA.schema_id

    def __post_init__(self):
        if self.schema_id == DEFAULT_SCHEMA.schema_id:
            DEFAULT_SCHEMA.validate((self.age_group, self.gender))

    @property
    def joint(self) -> int:
        return self.age_group * 2 + self.gender

    def as_tuple(self) -> tuple[int, int]:
        return (self.age_group, self.gender)


def attribute_phrase(age_group: int, gender: int) -> str:
    """Canonical phrase used by the attributes-in-text baselines."""
    return f"a {AGE_RANGES[age_group]}-year-old {GENDER_NAMES[gender]}"

