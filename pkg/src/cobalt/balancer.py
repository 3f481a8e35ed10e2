"""Concept cluster table, concept-balanced batch sampling, silhouette-guided lambda, inferred groups."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from sklearn.metrics import silhouette_samples


@dataclass
class AssignmentRecord:
    sample_id: int
    y: int
    concepts: list[int]
    mass: list[float]

    def __post_init__(self):
        if len(self.concepts) != len(self.mass):
            raise ValueError(f"sample {self.sample_id}: {len(self.concepts)} concepts but {len(self.mass)} masses")
        if len(set(self.concepts)) != len(self.concepts):
            raise ValueError(f"sample {self.sample_id}: repeated concept index")
        if any(m < 0 or m > 1 + 1e-12 for m in self.mass):
            raise ValueError(f"sample {self.sample_id}: attention mass outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(
            {"sample_id": int(self.sample_id), "y": int(self.y), "concepts": [int(c) for c in self.concepts],
             "mass": [float(m) for m in self.mass]}
        )

    @classmethod
    def from_dict(cls, doc: dict) -> "AssignmentRecord":
        return cls(int(doc["sample_id"]), int(doc["y"]), [int(c) for c in doc["concepts"]],
                   [float(m) for m in doc["mass"]])


def write_records(path: str | Path, records: Iterable[AssignmentRecord]) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records))


def read_records(path: str | Path) -> list[AssignmentRecord]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(AssignmentRecord.from_dict(json.loads(line)))
        except (ValueError, KeyError, TypeError) as err:
            raise ValueError(f"{path}:{lineno}: bad assignment record ({err})") from err
    return out


@dataclass
class ClusterTable:
    """Per-concept, per-class sample sets ``T[c][y]`` (sample ids, ascending)."""

    members: dict[int, dict[int, np.ndarray]]
    active: list[int] = field(default_factory=list)

    def counts(self, c: int) -> dict[int, int]:
        return {y: len(ids) for y, ids in self.members[c].items()}

    def class_probs(self, c: int, lam: float) -> dict[int, float]:
        return class_sampling_probs(self, c, lam)

    def summary(self, lam: float) -> dict:
        return {
            "lambda": lam,
            "clusters": [
                {
                    "concept": c,
                    "counts": {str(y): n for y, n in sorted(self.counts(c).items())},
                    "probs": {str(y): p for y, p in sorted(self.class_probs(c, lam).items())},
                }
                for c in self.active
            ],
        }


def build_cluster_table(records: list[AssignmentRecord]) -> ClusterTable:
    """Place every sample in the cluster of each of its concepts, under its class."""
    if not records:
        raise ValueError("cannot build a cluster table from zero records")
    cells: dict[int, dict[int, list[int]]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        for c in r.concepts:
            cells[c][r.y].append(r.sample_id)
    members = {
        c: {y: np.array(sorted(ids), dtype=np.int64) for y, ids in sorted(by_class.items())}
        for c, by_class in sorted(cells.items())
    }
    return ClusterTable(members, sorted(members))


def class_sampling_probs(table: ClusterTable, c: int, lam: float) -> dict[int, float]:
    """``p_{c,y} = w^lam / sum w^lam`` with ``w_{c,y} = 1 / |T_{c,y}|``, over classes present in ``c``."""
    if c not in table.members:
        raise KeyError(f"concept {c} is not an active cluster")
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    classes = sorted(table.members[c])
    sizes = np.array([len(table.members[c][y]) for y in classes], dtype=np.float64)
    # w^lam / sum w^lam computed in log space so large lambda cannot underflow.
    logw = -lam * np.log(sizes)
    logw -= logw.max()
    p = np.exp(logw)
    p /= p.sum()
    return dict(zip(classes, p.tolist()))


class ConceptBalancedSampler:
    """Draws batches by: uniform active cluster, then class by cluster probabilities, then uniform member."""

    def __init__(self, table: ClusterTable, lam: float):
        self.table = table
        self.lam = lam
        self._classes = []
        self._probs = []
        for c in table.active:
            probs = class_sampling_probs(table, c, lam)
            self._classes.append(list(probs))
            self._probs.append(np.cumsum(list(probs.values())))

    def draw(self, n: int, rng: np.random.Generator, with_cells: bool = False):
        if n < 0:
            raise ValueError("batch size must be nonnegative")
        out = np.empty(n, dtype=np.int64)
        cells = np.empty((n, 2), dtype=np.int64)
        n_clusters = len(self.table.active)
        picks = rng.integers(0, n_clusters, n)
        u = rng.random(n)
        v = rng.random(n)
        for i in range(n):
            k = picks[i]
            cdf = self._probs[k]
            j = min(int(np.searchsorted(cdf, u[i] * cdf[-1], side="right")), len(cdf) - 1)
            c, y = self.table.active[k], self._classes[k][j]
            pool = self.table.members[c][y]
            out[i] = pool[min(int(v[i] * len(pool)), len(pool) - 1)]
            cells[i] = c, y
        return (out, cells) if with_cells else out


def draw_batch(table: ClusterTable, n: int, lam: float, rng: np.random.Generator) -> np.ndarray:
    return ConceptBalancedSampler(table, lam).draw(n, rng)


def silhouette(points, cluster_ids) -> float:
    """Mean Euclidean silhouette; points in singleton clusters score 0."""
    x = np.asarray(points, dtype=np.float64)
    labels = np.asarray(cluster_ids)
    if x.ndim == 1:
        x = x[:, None]
    n_clusters = np.unique(labels).size
    if n_clusters < 2:
        raise ValueError("silhouette needs at least two clusters")
    if n_clusters == len(labels):
        return 0.0
    return float(np.mean(silhouette_samples(x, labels, metric="euclidean")))


def select_lambda(mean_silhouette: float) -> int:
    return 2 if mean_silhouette <= 0.8 else 1


def infer_groups(records: list[AssignmentRecord]) -> dict[int, set[tuple[int, int]]]:
    """(class, concept) groups per sample, one per concept the sample carries."""
    if not records:
        raise ValueError("cannot infer groups from zero records")
    return {r.sample_id: {(r.y, c) for c in r.concepts} for r in records}


def group_members(groups: dict[int, Iterable]) -> dict:
    members = defaultdict(list)
    for sid in sorted(groups):
        for g in groups[sid]:
            members[g].append(sid)
    return dict(members)


def worst_group_accuracy(
    predictions: dict[int, int],
    labels: dict[int, int],
    groups: dict[int, Iterable],
    min_group_size: int = 10,
) -> tuple[float, dict]:
    """Minimum per-group accuracy over groups with at least ``min_group_size`` members.

    ``groups`` maps sample id to the group ids it belongs to; a sample counts
    in each of its groups. Returns ``(worst, table)`` where ``table`` maps
    each group to ``{"n": members, "acc": accuracy}`` for all groups.
    """
    table = {}
    for g, ids in group_members(groups).items():
        correct = sum(int(predictions[i] == labels[i]) for i in ids)
        table[g] = {"n": len(ids), "acc": correct / len(ids)}
    considered = [v["acc"] for v in table.values() if v["n"] >= min_group_size]
    if not considered:
        largest = max((v["n"] for v in table.values()), default=0)
        raise ValueError(
            f"no group has at least {min_group_size} members (largest has {largest}); "
            "pass a smaller min_group_size"
        )
    return min(considered), table


def concept_features(
    slots_bar: np.ndarray, concepts: np.ndarray, mass: np.ndarray, active: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample silhouette features and cluster ids.

    The feature is the mass-weighted mean of the sample's active unit slot
    vectors; the id is the concept of the slot holding the largest mass.
    ``slots_bar`` is (n, N, d); ``concepts``, ``mass`` and ``active`` are (n, N).
    """
    w = np.where(active, mass, 0.0)
    total = w.sum(axis=1, keepdims=True)
    feats = (w[..., None] * slots_bar).sum(axis=1) / np.maximum(total, 1e-12)
    top = np.argmax(w, axis=1)
    return feats, concepts[np.arange(len(concepts)), top]
