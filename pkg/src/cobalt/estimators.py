"""Estimator front-ends: unsupervised concept discovery and a concept-balanced classifier."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import balancer, conceptvq, objectives, slotnet, synthgen
from . import tensorcore as tc
from .tensorcore import Tensor

log = logging.getLogger(__name__)


class CollapseError(RuntimeError):
    """Stage-1 training kept its teacher slots on fewer than two codes."""


def check_images(X, patch_size: int | None = None) -> np.ndarray:
    """Validate an (n, H, W, C) image stack of finite float values."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError(f"expected an (n, H, W, C) image array, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("need at least one image")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    if patch_size is not None and (X.shape[1] % patch_size or X.shape[2] % patch_size):
        raise ValueError(f"images of size {X.shape[1]}x{X.shape[2]} do not split into {patch_size}-pixel patches")
    return X


class ConceptDiscovery(TransformerMixin, BaseEstimator):
    """Learn slot representations and a concept dictionary from unlabeled images.

    A student branch is trained by gradient descent on attention distillation,
    slot contrast and concept distillation; the teacher branch follows it by
    EMA and its hard code assignments move the dictionary. After ``fit``,
    :meth:`transform` returns the per-concept attention mass of each image
    (an ``(n, n_codes)`` matrix) and :meth:`assign` emits assignment records.

    ``teacher_period=None`` picks 20 steps without augmentation and 5 with it.
    ``normalize_codes`` rescales every code to unit length after each
    dictionary update, so codes stay comparable with the unit slots they are
    matched against.
    """

    def __init__(
        self,
        n_slots: int = 4,
        n_codes: int = 8,
        dim: int = 16,
        hidden: int = 32,
        proj_hidden: int = 64,
        patch_size: int = 8,
        tau_s: float = 0.1,
        tau_t: float = 0.07,
        tau_c: float = 0.1,
        alpha_c: float = 0.9,
        alpha_t: float = 0.99,
        teacher_period: int | None = None,
        center_momentum: float = 0.9,
        augment: bool = True,
        epochs: int = 20,
        batch_size: int = 32,
        lr: float = 2e-4,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
        collapse_patience: int = 3,
        normalize_codes: bool = True,
        contrast_negatives: str = "batch",
        optimizer: str = "adam",
        random_state: int = 0,
    ):
        self.n_slots = n_slots
        self.n_codes = n_codes
        self.dim = dim
        self.hidden = hidden
        self.proj_hidden = proj_hidden
        self.patch_size = patch_size
        self.tau_s = tau_s
        self.tau_t = tau_t
        self.tau_c = tau_c
        self.alpha_c = alpha_c
        self.alpha_t = alpha_t
        self.teacher_period = teacher_period
        self.center_momentum = center_momentum
        self.augment = augment
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.collapse_patience = collapse_patience
        self.normalize_codes = normalize_codes
        self.contrast_negatives = contrast_negatives
        self.optimizer = optimizer
        self.random_state = random_state

    def _validate_params(self) -> None:
        for name in ("tau_s", "tau_t", "tau_c"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("alpha_c", "alpha_t", "center_momentum"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("n_slots", "n_codes", "dim", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lr", "weight_decay"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.contrast_negatives not in ("sample", "batch"):
            raise ValueError("contrast_negatives must be 'sample' or 'batch'")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")

    @property
    def teacher_period_(self) -> int:
        if self.teacher_period is not None:
            return self.teacher_period
        return 5 if self.augment else 20

    def _init_state(self, patch_dim: int) -> np.random.Generator:
        rng = np.random.default_rng(self.random_state)
        self.student_ = slotnet.BranchParams.init(
            patch_dim, self.n_slots, self.dim, self.hidden, self.proj_hidden, rng
        )
        self.teacher_ = self.student_.copy(requires_grad=False)
        self.predictor_ = objectives.PredictorParams.init(self.dim, rng)
        self.codebook_ = conceptvq.ConceptDictionary.init(self.n_codes, self.dim, self.alpha_c, rng)
        self.center_ = np.zeros(self.n_slots)
        self.embedding_center_s_ = None
        self.embedding_center_t_ = None
        return rng

    def fit(self, X, y=None):
        self._validate_params()
        X = check_images(X, self.patch_size)
        patch_dim = self.patch_size * self.patch_size * X.shape[-1]
        rng = self._init_state(patch_dim)
        schedule = slotnet.EmaSchedule(self.alpha_t, self.teacher_period_)
        aug = synthgen.AugConfig(enabled=self.augment)
        params = self.student_.parameters() + self.predictor_.parameters()
        if self.optimizer == "adam":
            opt = tc.Adam(params, self.lr, weight_decay=self.weight_decay)
        else:
            opt = tc.SGD(params, self.lr, self.momentum, self.weight_decay)
        self.history_ = []
        step = 0
        low_streak = 0
        n = len(X)
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            sums = np.zeros(4)
            used = np.zeros(self.n_codes, dtype=bool)
            n_batches = 0
            empty = 0
            active_slots = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                views_s, views_t, overlaps = self._views(X[idx], aug, rng)
                if self.embedding_center_s_ is None:
                    self._init_embedding_centers(views_s, views_t)
                opt.zero_grad()
                with tc.Tape() as tape:
                    out = objectives.stage1_objective(
                        self.student_, self.teacher_, self.predictor_, self.codebook_,
                        views_s, views_t, overlaps, self.patch_size,
                        self.tau_s, self.tau_t, self.tau_c, self.center_,
                        (self.embedding_center_s_, self.embedding_center_t_), self.contrast_negatives,
                    )
                tape.backward(out.loss)
                opt.step()
                step += 1
                slotnet.ema_update_teacher(self.student_, self.teacher_, schedule, step)
                z_bar = _unit_rows(out.teacher.pooled.values)
                conceptvq.update_codebook(self.codebook_, z_bar, out.p_t, out.teacher.mask)
                if self.normalize_codes:
                    self.codebook_.codes = _unit_rows(self.codebook_.codes)
                m = self.center_momentum
                self.center_ = m * self.center_ + (1.0 - m) * out.teacher_logit_mean
                self.embedding_center_s_ = m * self.embedding_center_s_ + (1.0 - m) * (
                    _feature_mean(out.student.patches.values) + self.embedding_center_s_
                )
                self.embedding_center_t_ = m * self.embedding_center_t_ + (1.0 - m) * (
                    _feature_mean(out.teacher.patches.values) + self.embedding_center_t_
                )
                used[np.unique(out.p_t[out.teacher.mask])] = True
                sums += (float(out.loss.values), out.l_dis, out.l_con, out.l_vq)
                empty += out.n_empty
                active_slots += float(out.teacher.mask.sum(axis=-1).mean())
                n_batches += 1
            means = sums / max(n_batches, 1)
            record = {
                "epoch": epoch + 1,
                "loss": float(means[0]),
                "L_dis": float(means[1]),
                "L_con": float(means[2]),
                "L_vq": float(means[3]),
                "codes_in_use": int(used.sum()),
                "empty_contrast": int(empty),
                "active_slots": active_slots / max(n_batches, 1),
            }
            self.history_.append(record)
            log.info("stage1 epoch %d: %s", epoch + 1, record)
            low_streak = low_streak + 1 if record["codes_in_use"] < 2 else 0
            if low_streak >= self.collapse_patience:
                raise CollapseError(
                    f"representation collapse: fewer than 2 codes in use for {low_streak} consecutive epochs "
                    f"(epoch {epoch + 1})"
                )
        return self

    def _init_embedding_centers(self, views_s: np.ndarray, views_t: np.ndarray) -> None:
        with tc.no_grad():
            self.embedding_center_s_ = _feature_mean(slotnet.encode_project(views_s, self.student_, self.patch_size).values)
            self.embedding_center_t_ = _feature_mean(slotnet.encode_project(views_t, self.teacher_, self.patch_size).values)

    def _views(self, images: np.ndarray, aug: synthgen.AugConfig, rng: np.random.Generator):
        if not aug.enabled:
            return images, images, None
        seeds = rng.integers(0, 2**63 - 1, len(images))
        return synthgen.make_view_batch(images, aug, seeds, self.patch_size)

    def encode(self, X, batch_size: int = 256) -> dict[str, np.ndarray]:
        """Teacher-branch pass without augmentation.

        Returns unit slot vectors ``slots`` (n, N, d), code index ``concept``
        (n, N), fraction of patches won ``mass`` (n, N) and ``active`` (n, N).
        """
        check_is_fitted(self, "codebook_")
        X = check_images(X, self.patch_size)
        parts = {"slots": [], "concept": [], "mass": [], "active": []}
        with tc.no_grad():
            for start in range(0, len(X), batch_size):
                fwd = slotnet.forward_branch(
                    X[start : start + batch_size], self.teacher_, self.tau_t, self.patch_size,
                    self.center_, self.embedding_center_t_,
                )
                a = fwd.attention.values
                n_patches = a.shape[-1]
                winners = np.argmax(a, axis=-2)
                mass = (winners[:, None, :] == np.arange(self.n_slots)[None, :, None]).sum(-1) / n_patches
                parts["slots"].append(_unit_rows(fwd.pooled.values))
                parts["concept"].append(conceptvq.assign_teacher(fwd.pooled.values, self.codebook_.codes))
                parts["mass"].append(mass)
                parts["active"].append(fwd.mask)
        return {k: np.concatenate(v) for k, v in parts.items()}

    def transform(self, X) -> np.ndarray:
        enc = self.encode(X)
        out = np.zeros((len(enc["concept"]), self.n_codes))
        rows = np.repeat(np.arange(len(out)), self.n_slots)
        np.add.at(out, (rows, enc["concept"].reshape(-1)), np.where(enc["active"], enc["mass"], 0.0).reshape(-1))
        return out

    def assign(self, X, y, sample_ids=None) -> list[balancer.AssignmentRecord]:
        masses = self.transform(X)
        y = np.asarray(y)
        ids = np.arange(len(y)) if sample_ids is None else np.asarray(sample_ids)
        records = []
        for sid, label, row in zip(ids, y, masses):
            concepts = np.flatnonzero(row > 0)
            records.append(balancer.AssignmentRecord(int(sid), int(label), concepts.tolist(), row[concepts].tolist()))
        return records


def _feature_mean(y: np.ndarray) -> np.ndarray:
    return y.reshape(-1, y.shape[-1]).mean(axis=0)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), tc.EPS_NORM)


@dataclass
class EvalSet:
    """Held-out images with labels and one or more groupings (sample id -> group ids)."""

    X: np.ndarray
    y: np.ndarray
    sample_ids: np.ndarray
    groupings: dict[str, dict[int, set]] = field(default_factory=dict)


class BalancedClassifier(ClassifierMixin, BaseEstimator):
    """Two-layer perceptron on raw pixels trained with iid or concept-balanced batches.

    ``sampler="cobalt"`` needs a :class:`~cobalt.balancer.ClusterTable` at fit
    time and draws every batch from it with exponent ``lam``; ``"iid"`` is
    plain shuffled minibatching. When an ``eval_set`` is given, the epoch
    maximizing ``early_stop`` is kept: ``"hg"`` and ``"ig"`` use the worst
    group accuracy under the eval set's ``"hg"``/``"ig"`` grouping, ``"avg"``
    the plain validation accuracy.
    """

    def __init__(
        self,
        hidden: int = 128,
        epochs: int = 20,
        batch_size: int = 32,
        lr: float = 1e-3,
        momentum: float = 0.9,
        weight_decay: float = 1e-4,
        sampler: str = "cobalt",
        lam: float = 1.0,
        early_stop: str = "avg",
        min_group_size: int = 10,
        random_state: int = 0,
    ):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.sampler = sampler
        self.lam = lam
        self.early_stop = early_stop
        self.min_group_size = min_group_size
        self.random_state = random_state

    def _flatten(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        X = X.reshape(len(X), -1)
        if not np.all(np.isfinite(X)):
            raise ValueError("inputs contain non-finite values")
        return X

    def fit(self, X, y, sample_ids=None, cluster_table: balancer.ClusterTable | None = None,
            eval_set: EvalSet | None = None):
        if self.sampler not in ("cobalt", "iid"):
            raise ValueError(f"sampler must be 'cobalt' or 'iid', got {self.sampler!r}")
        if self.early_stop not in ("hg", "ig", "avg"):
            raise ValueError(f"early_stop must be 'hg', 'ig' or 'avg', got {self.early_stop!r}")
        if self.sampler == "cobalt" and cluster_table is None:
            raise ValueError("the cobalt sampler needs a cluster table")
        X = self._flatten(X)
        y = np.asarray(y, dtype=np.int64)
        if len(X) != len(y):
            raise ValueError(f"{len(X)} inputs but {len(y)} labels")
        ids = np.arange(len(y)) if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
        row_of = {int(s): k for k, s in enumerate(ids)}
        self.classes_ = np.unique(y)
        n_out = int(y.max()) + 1
        rng = np.random.default_rng(self.random_state)
        d_in = X.shape[1]
        self.params_ = {
            "fc1.W": Tensor(rng.normal(0.0, np.sqrt(2.0 / d_in), (d_in, self.hidden)), True, "fc1.W"),
            "fc1.b": Tensor(np.zeros(self.hidden), True, "fc1.b"),
            "fc2.W": Tensor(rng.normal(0.0, np.sqrt(1.0 / self.hidden), (self.hidden, n_out)), True, "fc2.W"),
            "fc2.b": Tensor(np.zeros(n_out), True, "fc2.b"),
        }
        opt = tc.SGD(tc.parameters_of(self.params_), self.lr, self.momentum, self.weight_decay)
        sampler = balancer.ConceptBalancedSampler(cluster_table, self.lam) if self.sampler == "cobalt" else None
        steps = int(np.ceil(len(y) / self.batch_size))
        self.history_ = []
        best_score, best = -np.inf, None
        for epoch in range(self.epochs):
            if sampler is None:
                order = rng.permutation(len(y))
                batches = [order[k : k + self.batch_size] for k in range(0, len(y), self.batch_size)]
            else:
                batches = [np.array([row_of[int(s)] for s in sampler.draw(self.batch_size, rng)])
                           for _ in range(steps)]
            total = 0.0
            for rows in batches:
                opt.zero_grad()
                with tc.Tape() as tape:
                    loss = tc.softmax_cross_entropy(self._logits(X[rows]), y[rows])
                tape.backward(loss)
                opt.step()
                total += float(loss.values)
            record = {"epoch": epoch + 1, "train_loss": total / len(batches)}
            if eval_set is not None:
                record.update(self._validate(eval_set))
                score = record[{"hg": "val_worst_hg", "ig": "val_worst_ig", "avg": "val_avg"}[self.early_stop]]
                score = -np.inf if score is None else score
                if score > best_score:
                    best_score = score
                    best = {k: t.values.copy() for k, t in self.params_.items()}
                    self.best_epoch_ = epoch + 1
            self.history_.append(record)
            log.info("stage2 epoch %d: %s", epoch + 1, record)
        if eval_set is None:
            self.best_epoch_ = self.epochs
        elif best is not None:
            for k, v in best.items():
                self.params_[k].values = v
        return self

    def _validate(self, ev: EvalSet) -> dict:
        pred = self.predict(ev.X)
        out = {"val_avg": float(np.mean(pred == ev.y))}
        by_id = dict(zip(ev.sample_ids.tolist(), pred.tolist()))
        labels = dict(zip(ev.sample_ids.tolist(), ev.y.tolist()))
        for name in ("hg", "ig"):
            groups = ev.groupings.get(name)
            worst = None
            if groups is not None:
                try:
                    worst, _ = balancer.worst_group_accuracy(by_id, labels, groups, self.min_group_size)
                except ValueError:
                    worst = None
            out[f"val_worst_{name}"] = worst
        return out

    def _logits(self, X: np.ndarray) -> Tensor:
        p = self.params_
        h = tc.relu(tc.as_tensor(X) @ p["fc1.W"] + p["fc1.b"])
        return h @ p["fc2.W"] + p["fc2.b"]

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = self._flatten(X)
        with tc.no_grad():
            return np.concatenate([self._logits(X[k : k + 1024]).values for k in range(0, len(X), 1024)])

    def predict_proba(self, X) -> np.ndarray:
        with tc.no_grad():
            return tc.softmax(self.decision_function(X), 1.0, axis=-1).values

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)
