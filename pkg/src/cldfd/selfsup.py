"""Self-supervised objectives: the SimCLR contrastive loss and the BYOL loss."""
from __future__ import annotations

import numpy as np

from .errors import ShapeError, SnapshotError
from .model import Module
from .numerics import nn as F
from .numerics import ops
from .numerics.tensor import Tensor


def simclr_loss(embeddings: Tensor, temperature: float = 0.1) -> Tensor:
    """Contrastive loss over ``2B`` embeddings where rows ``2k`` and ``2k+1`` are views of image ``k``.

    For every ordered positive pair ``(m, n)`` the term is
    ``-log(exp(sim(z_m, z_n)/t) / sum_{q != m} exp(sim(z_m, z_q)/t))``; the
    denominator keeps the positive. The ``2B`` terms are summed and divided
    by ``B``.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if embeddings.ndim != 2 or embeddings.shape[0] % 2:
        raise ShapeError(f"need an even number of embedding rows, got {embeddings.shape}")
    n2 = embeddings.shape[0]
    batch = n2 // 2
    zn = F.l2_normalize(embeddings)
    sim = ops.mul(ops.matmul(zn, ops.transpose(zn)), 1.0 / temperature)
    rows = np.arange(n2)
    partner = rows ^ 1
    not_self = ~np.eye(n2, dtype=bool)
    lse = ops.logsumexp(sim, axis=1, mask=not_self)
    pos = ops.getitem(sim, (rows, partner))
    return ops.mul(ops.sum(ops.sub(lse, pos)), 1.0 / batch)


def byol_loss(online_pred: Tensor, target_emb, reduction: str = "mean") -> Tensor:
    """``2 - 2 cos(p(z), z')`` per sample; no gradient reaches ``target_emb``.

    ``reduction="sum"`` gives the plain batch sum.
    """
    target = Tensor(target_emb.data if isinstance(target_emb, Tensor) else target_emb)
    per = ops.sub(2.0, ops.mul(2.0, F.cosine_rows(online_pred, target)))
    if reduction == "sum":
        return ops.sum(per)
    if reduction == "mean":
        return ops.mean(per)
    raise ValueError(f"unknown reduction {reduction!r}")


def byol_target_update(target: Module, online: Module, momentum: float = 0.99) -> None:
    """``target <- m * target + (1 - m) * online`` for every parameter, in place."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    tp, op = target.named_params(), online.named_params()
    if [(k, v.shape) for k, v in tp.items()] != [(k, v.shape) for k, v in op.items()]:
        raise SnapshotError("target and online networks differ in architecture")
    for k, t in tp.items():
        dt = t.data.dtype.type
        t.data = (dt(momentum) * t.data + dt(1.0 - momentum) * op[k].data).astype(t.data.dtype)
