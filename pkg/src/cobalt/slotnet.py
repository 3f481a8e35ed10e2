"""Student/teacher branches: patch encoder, projector and single-pass slot attention."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

CHECKPOINT_MAGIC = b"CBSN"
CHECKPOINT_VERSION = 1

# Layers applied to every patch, in order. Each entry is (weight, bias, relu after).
ENCODER_LAYERS = (
    ("embed.W", "embed.b", False),
    ("enc1.W", "enc1.b", True),
    ("enc2.W", "enc2.b", False),
    ("proj1.W", "proj1.b", True),
    ("proj2.W", "proj2.b", False),
)


@dataclass
class BranchParams:
    tensors: dict[str, Tensor]

    @classmethod
    def init(
        cls,
        patch_dim: int,
        n_slots: int,
        dim: int,
        hidden: int = 32,
        proj_hidden: int = 64,
        rng: np.random.Generator | None = None,
    ) -> "BranchParams":
        rng = np.random.default_rng(0) if rng is None else rng
        sizes = [patch_dim, hidden, hidden, hidden, proj_hidden, dim]
        tensors = {}
        for (w, b, _), fan_in, fan_out in zip(ENCODER_LAYERS, sizes[:-1], sizes[1:]):
            tensors[w] = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)), True, w)
            tensors[b] = Tensor(np.zeros(fan_out), True, b)
        tensors["slots"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(dim), (n_slots, dim)), True, "slots")
        return cls(tensors)

    @property
    def slots(self) -> Tensor:
        return self.tensors["slots"]

    @property
    def n_slots(self) -> int:
        return self.slots.shape[0]

    @property
    def dim(self) -> int:
        return self.slots.shape[1]

    @property
    def patch_dim(self) -> int:
        return self.tensors["embed.W"].shape[0]

    def parameters(self) -> list[Tensor]:
        return tc.parameters_of(self.tensors)

    def copy(self, requires_grad: bool | None = None) -> "BranchParams":
        return BranchParams(
            {
                k: Tensor(t.values.copy(), t.requires_grad if requires_grad is None else requires_grad, k)
                for k, t in self.tensors.items()
            }
        )

    def validate(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t.values)):
                raise ValueError(f"branch tensor {name!r} has non-finite entries")


@dataclass
class SlotForward:
    patches: Tensor  # y, (..., P, d)
    attention: Tensor  # A, (..., N, P)
    pooled: Tensor  # z, (..., N, d)
    mask: np.ndarray  # m, (..., N)
    logits: np.ndarray  # cosine similarities before temperature, (..., N, P)


@dataclass
class EmaSchedule:
    alpha: float = 0.99
    period: int = 1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"EMA rate must lie in [0, 1], got {self.alpha}")
        if self.period < 1:
            raise ValueError(f"EMA period must be >= 1, got {self.period}")


def patchify(views: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W, C) images to (..., P, patch*patch*C) row-major patch vectors."""
    *lead, h, w, c = views.shape
    if h % patch or w % patch:
        raise ValueError(f"view of size {h}x{w} does not split into {patch}x{patch} patches")
    gh, gw = h // patch, w // patch
    x = views.reshape(*lead, gh, patch, gw, patch, c)
    x = np.moveaxis(x, -4, -3)  # (..., gh, gw, patch, patch, c)
    return x.reshape(*lead, gh * gw, patch * patch * c)


def embed_patches(patches, params: BranchParams) -> Tensor:
    """Encoder then projector, applied to each patch vector independently."""
    x = tc.as_tensor(patches)
    if x.shape[-1] != params.patch_dim:
        raise ValueError(f"patch vectors have {x.shape[-1]} entries, encoder expects {params.patch_dim}")
    for w, b, act in ENCODER_LAYERS:
        x = x @ params.tensors[w] + params.tensors[b]
        if act:
            x = tc.relu(x)
    return x


def encode_project(
    view: np.ndarray, params: BranchParams, patch: int, embedding_center: np.ndarray | None = None
) -> Tensor:
    """Patch embeddings ``y`` (..., P, d).

    ``embedding_center`` is a running mean of past embeddings, subtracted as a
    constant so the unit-normalized patches are not dominated by a shared
    direction.
    """
    y = embed_patches(patchify(np.asarray(view, dtype=np.float64), patch), params)
    if embedding_center is not None:
        y = y - np.asarray(embedding_center)
    return y


def slot_attention(slots, patches, tau: float, center: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Softmax over the slot axis of cosine similarity between slots and patches.

    Returns the (..., N, P) attention and the raw cosine logits. ``center``
    (length N) is subtracted from the logits before the temperature softmax.
    """
    s_bar = tc.l2_normalize(slots, axis=-1, what="slot")
    y_bar = tc.l2_normalize(patches, axis=-1, what="patch")
    logits = s_bar @ tc.swapaxes(y_bar, -1, -2)
    raw = logits.values
    if center is not None:
        logits = logits - np.asarray(center)[:, None]
    return tc.softmax(logits, tau, axis=-2), raw


def pool_concepts(attention, patches) -> Tensor:
    a, y = tc.as_tensor(attention), tc.as_tensor(patches)
    if a.shape[-1] != y.shape[-2]:
        raise ValueError(f"attention has {a.shape[-1]} patch columns but there are {y.shape[-2]} patches")
    return a @ y


def active_slot_mask(attention) -> np.ndarray:
    """True for slots that win the argmax of at least one patch column (ties go to the lowest index)."""
    a = attention.values if isinstance(attention, Tensor) else np.asarray(attention)
    n = a.shape[-2]
    winners = np.argmax(a, axis=-2)  # (..., P)
    one_hot = winners[..., None, :] == np.arange(n)[:, None]
    return one_hot.any(axis=-1)


def common_slot_indicator(m_s: np.ndarray, m_t: np.ndarray) -> np.ndarray:
    m_s, m_t = np.asarray(m_s, dtype=bool), np.asarray(m_t, dtype=bool)
    if m_s.shape != m_t.shape:
        raise ValueError(f"mask shapes differ: {m_s.shape} vs {m_t.shape}")
    return m_s & m_t


def forward_branch(
    views: np.ndarray,
    params: BranchParams,
    tau: float,
    patch: int,
    center: np.ndarray | None = None,
    embedding_center: np.ndarray | None = None,
) -> SlotForward:
    y = encode_project(views, params, patch, embedding_center)
    attention, logits = slot_attention(params.slots, y, tau, center)
    z = pool_concepts(attention, y)
    return SlotForward(y, attention, z, active_slot_mask(attention), logits)


def ema_update_teacher(student: BranchParams, teacher: BranchParams, schedule: EmaSchedule, step: int) -> bool:
    """In-place ``teacher <- alpha * teacher + (1 - alpha) * student`` on scheduled steps.

    Returns whether an update happened.
    """
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if set(student.tensors) != set(teacher.tensors):
        raise ValueError("student and teacher carry different tensors")
    for name, s in student.tensors.items():
        if s.shape != teacher.tensors[name].shape:
            raise ValueError(f"shape mismatch for {name!r}: {s.shape} vs {teacher.tensors[name].shape}")
    if step % schedule.period:
        return False
    a = schedule.alpha
    for name, s in student.tensors.items():
        t = teacher.tensors[name]
        t.values = a * t.values + (1.0 - a) * s.values
    return True


# checkpoints


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], magic: bytes = CHECKPOINT_MAGIC) -> None:
    """Named-tensor container: magic, u16 version, u32 count, then per record
    u16 name length, name bytes, u8 rank, u32 dims, float64 values."""
    chunks = [magic, struct.pack("<HI", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        values = np.ascontiguousarray(tensors[name], dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", values.ndim) + struct.pack(f"<{values.ndim}I", *values.shape))
        chunks.append(values.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: str | Path, magic: bytes = CHECKPOINT_MAGIC) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    out = {}
    for _ in range(count):
        (length,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + length].decode("utf-8")
        pos += length
        (rank,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(dims).copy()
        pos += 8 * size
    return out


def save_branch(path: str | Path, params: BranchParams, extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = {k: t.values for k, t in params.tensors.items()}
    tensors.update(extra or {})
    save_tensors(path, tensors)


def load_branch(path: str | Path) -> tuple[BranchParams, dict[str, np.ndarray]]:
    raw = load_tensors(path)
    names = {w for w, _, _ in ENCODER_LAYERS} | {b for _, b, _ in ENCODER_LAYERS} | {"slots"}
    missing = names - set(raw)
    if missing:
        raise ValueError(f"{path}: checkpoint lacks {sorted(missing)}")
    params = BranchParams({k: Tensor(raw[k], False, k) for k in names})
    return params, {k: v for k, v in raw.items() if k not in names}
