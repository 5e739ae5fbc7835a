"""Contrastive, row-eliminated contrastive and masked-keyword losses."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .alignment import BatchEliminationMask
from .tensorlab import ops
from .tensorlab.tensor import Tensor, as_tensor

log = logging.getLogger(__name__)


class ObjectiveError(ValueError):
    pass


@dataclass
class LossConfig:
    temperature: float = 0.07
    mlm_weight: float = 0.5
    drop_epoch: int = 4


@dataclass
class LossBreakdown:
    info_global: float
    info_local: float
    mlm: float
    total: float
    r_global: int = 0
    r_local: int = 0

    def as_log(self) -> dict:
        return {"info_g": self.info_global, "info_l": self.info_local, "mlm": self.mlm,
                "total": self.total, "R_g": self.r_global, "R_l": self.r_local}


def _nce(sim, temp, rows: np.ndarray) -> Tensor:
    sim = as_tensor(sim)
    b = sim.shape[0]
    logits = ops.div(sim, temp) if isinstance(temp, Tensor) else ops.scale(sim, 1.0 / float(temp))
    i2t = ops.log_softmax(logits, axis=1)[rows, rows]
    t2i = ops.log_softmax(logits, axis=0)[rows, rows]
    return ops.scale(ops.add(i2t.sum(), t2i.sum()), -1.0 / b)


def _check_square(sim) -> int:
    shape = as_tensor(sim).shape
    if len(shape) != 2 or shape[0] != shape[1]:
        raise ObjectiveError(f"similarity matrix must be square, got {shape}")
    if shape[0] < 2:
        raise ObjectiveError("contrastive loss needs a batch of at least 2")
    return shape[0]


def info_nce(sim, temp) -> Tensor:
    """Symmetric InfoNCE: mean over pairs of the image->text plus text->image NLL.

    ``temp`` may be a float or a (learnable) scalar tensor.
    """
    b = _check_square(sim)
    return _nce(sim, temp, np.arange(b))


def info_nce_eliminated(sim, keep, temp) -> tuple[Tensor, int]:
    """InfoNCE with flagged rows removed from both directions.

    A dropped pair loses its positive term and its own softmax row/column,
    but stays a negative for every surviving pair.  The 1/B prefactor uses
    the full batch size.
    """
    b = _check_square(sim)
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != (b,):
        raise ObjectiveError(f"keep mask shape {keep.shape} != ({b},)")
    if not keep.any():
        raise ObjectiveError("every row was eliminated")
    return _nce(sim, temp, np.flatnonzero(keep)), int(b - keep.sum())


def mlm_loss(logits, targets) -> Tensor:
    """Mean cross-entropy over masked slots; zero when nothing is masked."""
    return ops.cross_entropy(logits, targets)


def total_loss(sim_g, sim_l, temp, epoch: int, cfg: LossConfig, logits=None, targets=None,
               mask: BatchEliminationMask | None = None) -> tuple[Tensor, LossBreakdown]:
    """Scheduled objective: plain InfoNCE before ``drop_epoch``, eliminated after.

    The MLM term is always weighted by ``cfg.mlm_weight``; pass ``logits=None``
    to skip the keyword head entirely.
    """
    if epoch < 0:
        raise ObjectiveError("epoch must be >= 0")
    if mask is not None and epoch < cfg.drop_epoch:
        if mask.r_global or mask.r_local:
            log.warning("elimination mask supplied at epoch %d < drop epoch %d; ignored", epoch, cfg.drop_epoch)
        mask = None
    if mask is None:
        lg, lloc = info_nce(sim_g, temp), info_nce(sim_l, temp)
        rg = rl = 0
    else:
        lg, rg = info_nce_eliminated(sim_g, mask.keep_global, temp)
        lloc, rl = info_nce_eliminated(sim_l, mask.keep_local, temp)
    total = ops.add(lg, lloc)
    mlm_val = 0.0
    if logits is not None:
        lm = mlm_loss(logits, targets)
        mlm_val = float(lm.data)
        total = ops.add(total, ops.scale(lm, cfg.mlm_weight))
    parts = LossBreakdown(float(lg.data), float(lloc.data), mlm_val, float(total.data), rg, rl)
    if not all(math.isfinite(v) for v in (parts.info_global, parts.info_local, parts.mlm, parts.total)):
        raise FloatingPointError(f"non-finite loss at epoch {epoch}: {parts}")
    return total, parts
