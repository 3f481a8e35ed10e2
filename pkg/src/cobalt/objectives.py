"""Stage-1 losses: attention distillation, slot contrast, and their sum with the VQ term."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import conceptvq, slotnet
from . import tensorcore as tc
from .tensorcore import Tensor

@dataclass
class PredictorParams:
    tensors: dict[str, Tensor]

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator | None = None) -> "PredictorParams":
        rng = np.random.default_rng(0) if rng is None else rng
        hidden = 2 * dim
        return cls(
            {
                "pred1.W": Tensor(rng.normal(0.0, np.sqrt(2.0 / dim), (dim, hidden)), True, "pred1.W"),
                "pred1.b": Tensor(np.zeros(hidden), True, "pred1.b"),
                "pred2.W": Tensor(rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, dim)), True, "pred2.W"),
                "pred2.b": Tensor(np.zeros(dim), True, "pred2.b"),
            }
        )

    def __call__(self, x) -> Tensor:
        t = self.tensors
        h = tc.relu(tc.as_tensor(x) @ t["pred1.W"] + t["pred1.b"])
        return h @ t["pred2.W"] + t["pred2.b"]

    def parameters(self) -> list[Tensor]:
        return tc.parameters_of(self.tensors)


def align_teacher_attention(a_t: np.ndarray, overlap: dict[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Re-index teacher attention columns into student patch order.

    Returns the aligned (N, P) attention and the (N, P) overlap mask, which
    is one on student patches that have a teacher counterpart.
    """
    a_t = np.asarray(a_t)
    aligned = np.zeros_like(a_t)
    mask = np.zeros_like(a_t)
    for t_idx, s_idx in overlap.items():
        aligned[..., :, s_idx] = a_t[..., :, t_idx]
        mask[..., :, s_idx] = 1.0
    return aligned, mask


def _batch_size(shape: tuple[int, ...], item_rank: int) -> int:
    lead = shape[: len(shape) - item_rank]
    return int(np.prod(lead)) if lead else 1


def distill_loss(a_t_aligned: np.ndarray, a_s, mask: np.ndarray) -> Tensor:
    """``-sum M * A_t * log A_s`` over slots and patches; the teacher side is constant."""
    a_s = tc.as_tensor(a_s)
    a_t = np.asarray(a_t_aligned, dtype=np.float64)
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), a_t.shape)
    if a_t.shape != a_s.shape:
        raise ValueError(f"teacher attention {a_t.shape} and student attention {a_s.shape} differ")
    return -tc.sum(tc.log(a_s) * (m * a_t)) * (1.0 / _batch_size(a_s.shape, 2))


def contrast_loss(
    z_s, z_t: np.ndarray, indicator: np.ndarray, predictor: PredictorParams, tau: float, negatives: str = "batch"
):
    """InfoNCE between predicted student slots and teacher slots over the common active set.

    Every common active student slot is a query and its own teacher slot is
    the positive. With ``negatives="sample"`` the other common active slots of
    the same sample are the negatives; each sample scores
    ``(1/N_active) * sum_i -log softmax_i`` and the batch loss is the mean over
    samples, an empty sample counting as 0. With ``negatives="batch"`` every
    common active slot in the batch is a negative and the loss is the mean
    over queries. The two agree on a single sample. Returns
    ``(loss, n_empty)`` where ``n_empty`` counts samples without any common
    active slot.
    """
    if not tau > 0:
        raise ValueError(f"contrast temperature must be positive, got {tau}")
    if negatives not in ("sample", "batch"):
        raise ValueError(f"negatives must be 'sample' or 'batch', got {negatives!r}")
    z_s = tc.as_tensor(z_s)
    gate = np.asarray(indicator, dtype=bool)
    d = z_s.shape[-1]
    n_empty = int((~gate.reshape(-1, gate.shape[-1]).any(axis=-1)).sum())
    flat_gate = gate.reshape(-1)
    n_active = int(flat_gate.sum())
    if n_active == 0:
        return tc.sum(z_s) * 0.0, n_empty
    with tc.no_grad():
        k = tc.l2_normalize(np.asarray(z_t).reshape(-1, d)[flat_gate], what="teacher slot").values
    rows = np.flatnonzero(flat_gate)
    q_in = tc.take(tc.reshape(z_s, (-1, d)), np.repeat(rows[:, None], d, axis=1), axis=0)
    q = tc.l2_normalize(predictor(tc.l2_normalize(q_in, what="student slot")), what="prediction")
    logits = q @ k.T * (1.0 / tau)
    if negatives == "batch":
        weight = np.full(n_active, 1.0 / n_active)
    else:
        owner = rows // gate.shape[-1]
        logits = logits + np.where(owner[:, None] == owner[None, :], 0.0, -1e9)
        per_sample = np.bincount(owner)[owner]
        weight = 1.0 / (per_sample * (flat_gate.size // gate.shape[-1]))
    diag = tc.take(tc.log_softmax(logits, axis=-1), np.arange(n_active)[:, None], axis=-1)
    return -tc.sum(diag * weight[:, None]), n_empty


def total_loss(l_dis, l_con, l_vq) -> Tensor:
    """Unweighted sum of the three stage-1 terms."""
    for name, term in (("L_dis", l_dis), ("L_con", l_con), ("L_vq", l_vq)):
        value = term.values if isinstance(term, Tensor) else np.asarray(term)
        if not np.all(np.isfinite(value)):
            raise ValueError(f"{name} is not finite ({float(value)})")
    return tc.as_tensor(l_dis) + l_con + l_vq


@dataclass
class Stage1Step:
    """Everything one stage-1 step produces, for logging and the codebook update."""

    loss: Tensor
    l_dis: float
    l_con: float
    l_vq: float
    n_empty: int
    teacher: slotnet.SlotForward
    student: slotnet.SlotForward
    p_t: np.ndarray
    indicator: np.ndarray
    teacher_logit_mean: np.ndarray


def stage1_objective(
    student: slotnet.BranchParams,
    teacher: slotnet.BranchParams,
    predictor: PredictorParams,
    codebook: conceptvq.ConceptDictionary,
    views_s: np.ndarray,
    views_t: np.ndarray,
    overlaps: list[dict[int, int]] | None,
    patch: int,
    tau_s: float = 0.1,
    tau_t: float = 0.07,
    tau_c: float = 0.1,
    center: np.ndarray | None = None,
    embedding_centers: tuple[np.ndarray, np.ndarray] | None = None,
    negatives: str = "batch",
) -> Stage1Step:
    """Forward both branches on a batch of views and assemble the total loss.

    ``overlaps`` holds one teacher-to-student patch map per sample; ``None``
    means the two views share geometry (identity map, full mask). Teacher
    computations are done without recording, so no gradient reaches teacher
    tensors or the codebook.
    """
    emb_s, emb_t = embedding_centers if embedding_centers is not None else (None, None)
    with tc.no_grad():
        fwd_t = slotnet.forward_branch(views_t, teacher, tau_t, patch, center, emb_t)
    fwd_s = slotnet.forward_branch(views_s, student, tau_s, patch, embedding_center=emb_s)
    a_t = fwd_t.attention.values
    if overlaps is None:
        aligned, mask = a_t, np.ones_like(a_t)
    else:
        aligned = np.zeros_like(a_t)
        mask = np.zeros_like(a_t)
        for b, overlap in enumerate(overlaps):
            aligned[b], mask[b] = align_teacher_attention(a_t[b], overlap)
    indicator = slotnet.common_slot_indicator(fwd_s.mask, fwd_t.mask)
    z_t = fwd_t.pooled.values
    p_t = conceptvq.assign_teacher(z_t, codebook.codes)
    p_s = conceptvq.assign_student(fwd_s.pooled, codebook.codes, tau_s)

    l_dis = distill_loss(aligned, fwd_s.attention, mask)
    l_con, n_empty = contrast_loss(fwd_s.pooled, z_t, indicator, predictor, tau_c, negatives)
    l_vq = conceptvq.vq_loss(p_s, p_t, indicator)
    loss = total_loss(l_dis, l_con, l_vq)
    raw = fwd_t.logits
    return Stage1Step(
        loss,
        float(l_dis.values),
        float(l_con.values),
        float(l_vq.values),
        n_empty,
        fwd_t,
        fwd_s,
        p_t,
        indicator,
        raw.mean(axis=tuple(i for i in range(raw.ndim) if i != raw.ndim - 2)),
    )
