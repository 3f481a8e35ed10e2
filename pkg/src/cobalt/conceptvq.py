"""Concept dictionary: soft/hard code assignment, EMA code updates and the distillation loss."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor


@dataclass
class ConceptDictionary:
    codes: np.ndarray  # (K, d)
    alpha: float = 0.9
    usage: np.ndarray = field(default=None)

    def __post_init__(self):
        self.codes = np.array(self.codes, dtype=np.float64)
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise ValueError(f"codebook must be a nonempty K x d matrix, got shape {self.codes.shape}")
        if not np.all(np.isfinite(self.codes)):
            raise ValueError("codebook has non-finite entries")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"codebook EMA rate must lie in [0, 1], got {self.alpha}")
        if self.usage is None:
            self.usage = np.zeros(self.codes.shape[0], dtype=np.int64)

    @classmethod
    def init(cls, n_codes: int, dim: int, alpha: float = 0.9, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(rng.normal(0.0, 1.0 / np.sqrt(dim), (n_codes, dim)), alpha)

    @property
    def K(self) -> int:
        return self.codes.shape[0]

    @property
    def d(self) -> int:
        return self.codes.shape[1]

    def to_json(self) -> dict:
        return {
            "K": self.K,
            "d": self.d,
            "alpha_c": self.alpha,
            "codes": self.codes.tolist(),
            "usage": [int(u) for u in self.usage],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ConceptDictionary":
        codes = np.array(doc["codes"], dtype=np.float64).reshape(doc["K"], doc["d"])
        return cls(codes, float(doc["alpha_c"]), np.array(doc["usage"], dtype=np.int64))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ConceptDictionary":
        return cls.from_json(json.loads(Path(path).read_text()))


def squared_distances(codes, slots_bar) -> Tensor:
    """``||C_i - z_j||^2`` as a (..., K, N) tensor."""
    c = tc.as_tensor(codes)
    z = tc.as_tensor(slots_bar)
    c2 = tc.sum(tc.square(c), axis=-1, keepdims=True)  # (K, 1)
    z2 = tc.swapaxes(tc.sum(tc.square(z), axis=-1, keepdims=True), -1, -2)  # (..., 1, N)
    cross = c @ tc.swapaxes(z, -1, -2)  # (..., K, N)
    return c2 + z2 - 2.0 * cross


def assign_student(z_s, codes, tau: float) -> Tensor:
    """Soft assignment p_s (..., K, N): softmax over codes of ``-||C_i - zbar_j||^2 / tau``.

    Slots are unit-normalized, codes are used as stored.
    """
    if not tau > 0:
        raise ValueError(f"assignment temperature must be positive, got {tau}")
    z_bar = tc.l2_normalize(z_s, axis=-1, what="slot")
    return tc.softmax(-squared_distances(codes, z_bar), tau, axis=-2)


def assign_teacher(z_t, codes) -> np.ndarray:
    """Index of the nearest code to each unit-normalized slot; ties go to the lowest index."""
    with tc.no_grad():
        z_bar = tc.l2_normalize(z_t, axis=-1, what="slot")
        d2 = squared_distances(np.asarray(codes), z_bar).values
    return np.argmin(d2, axis=-2)


def update_codebook(
    dictionary: ConceptDictionary,
    z_t: np.ndarray,
    p_t: np.ndarray,
    active: np.ndarray | None = None,
) -> ConceptDictionary:
    """EMA step ``C_j <- a * C_j + (1 - a) * mean of slots assigned to j``, in place.

    ``z_t``, ``p_t`` and ``active`` may carry any leading batch shape; they are
    flattened over slots. Codes without an assigned active slot keep their
    exact bits. Usage counters grow by the assignment counts.
    """
    z = np.asarray(z_t, dtype=np.float64).reshape(-1, dictionary.d)
    idx = np.asarray(p_t).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= dictionary.K):
        raise IndexError(f"assignment outside 0..{dictionary.K - 1}")
    if active is not None:
        keep = np.asarray(active, dtype=bool).reshape(-1)
        z, idx = z[keep], idx[keep]
    counts = np.bincount(idx, minlength=dictionary.K)
    sums = np.zeros_like(dictionary.codes)
    np.add.at(sums, idx, z)
    hit = counts > 0
    a = dictionary.alpha
    dictionary.codes[hit] = a * dictionary.codes[hit] + (1.0 - a) * (sums[hit] / counts[hit, None])
    dictionary.usage = dictionary.usage + counts
    return dictionary


def vq_loss(p_s, p_t: np.ndarray, indicator: np.ndarray) -> Tensor:
    """``-sum_{i: I_i} log p_s[p_t(i), i]``, averaged over any leading batch axis."""
    p = tc.as_tensor(p_s)
    idx = np.asarray(p_t, dtype=np.int64)
    gate = np.asarray(indicator, dtype=np.float64)
    if idx.shape != p.shape[:-2] + p.shape[-1:] or gate.shape != idx.shape:
        raise ValueError(f"p_s {p.shape}, p_t {idx.shape} and indicator {gate.shape} disagree")
    picked = tc.take(p, idx[..., None, :], axis=-2)  # (..., 1, N)
    per_slot = tc.reshape(tc.log(picked), idx.shape)
    total = -tc.sum(per_slot * gate)
    batch = int(np.prod(idx.shape[:-1])) if idx.ndim > 1 else 1
    return total * (1.0 / batch)


def codes_in_use(p_t: np.ndarray, active: np.ndarray | None = None) -> int:
    idx = np.asarray(p_t).reshape(-1)
    if active is not None:
        idx = idx[np.asarray(active, dtype=bool).reshape(-1)]
    return int(np.unique(idx).size)
