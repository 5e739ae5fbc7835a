"""Global/local similarity, per-epoch similarity banks and pre-alignment elimination.

Elimination works off thresholds derived from the *previous* epoch's banks:
the lowest ``drop_ratio`` fraction of matched-pair similarities defines a
cut-off, and in-batch pairs at or below it are dropped from the
contrastive loss.  ``split`` keeps separate banks/thresholds for the
global and local channels; ``joint`` combines them into one score.
"""

from __future__ import annotations

import enum
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorlab import ops
from .tensorlab.tensor import Tensor

log = logging.getLogger(__name__)


class Scheme(str, enum.Enum):
    NONE = "none"
    JOINT = "joint"
    SPLIT = "split"


class BankKind(enum.IntEnum):
    GLOBAL = 0
    LOCAL = 1
    JOINT = 2


class AlignmentError(ValueError):
    pass


# similarities ---------------------------------------------------------------

def global_similarity(fv_g, ft_g) -> Tensor:
    """(B, d) x (B, d) -> (B, B) cosine matrix; diagonal holds matched pairs."""
    return ops.cosine_rows(fv_g, ft_g)


def local_similarity(fv_loc, ft_loc) -> float:
    """Frobenius norm of the (N, W) cosine block between two local feature sets."""
    block = ops.cosine_rows(fv_loc, ft_loc).data
    return float(np.sqrt(np.sum(block * block)))


def local_similarity_matrix(fv_loc, ft_loc, text_mask) -> Tensor:
    """All-pairs local similarity for a batch.

    ``fv_loc`` is (B_i, N, d), ``ft_loc`` is (B_t, S, d) and ``text_mask``
    (B_t, S) marks the positions that count as text locals.  Uses
    ||A B^T||_F^2 = <A^T A, B^T B>_F so the (N, S) blocks are never built.
    """
    vn = ops.normalize(fv_loc, axis=-1)
    tn = ops.mul(ops.normalize(ft_loc, axis=-1), np.asarray(text_mask, dtype=np.float64)[..., None])
    gv = ops.einsum("ind,ine->ide", vn, vn)
    gt = ops.einsum("jwd,jwe->jde", tn, tn)
    sq = ops.einsum("ide,jde->ij", gv, gt)
    if np.any(sq.data <= 0):
        raise AlignmentError("zero local similarity (all-orthogonal locals or empty text)")
    return ops.sqrt(sq)


@dataclass
class SimilarityPair:
    global_: float
    local: float


def combine(sim, alpha: float = 0.6, beta: float = 0.4):
    """alpha * global + beta * local; accepts a SimilarityPair or a (global, local) tuple of arrays."""
    if isinstance(sim, SimilarityPair):
        return alpha * sim.global_ + beta * sim.local
    g, l = sim
    return alpha * g + beta * l


# banks ----------------------------------------------------------------------

BANK_MAGIC = b"EBKB1"


class SimilarityBank:
    """One matched-pair score per training pair, written exactly once per epoch."""

    def __init__(self, size: int, kind: BankKind = BankKind.GLOBAL, epoch: int = 0):
        self.epoch = epoch
        self.kind = BankKind(kind)
        self.scores = np.full(size, np.nan)
        self._written = np.zeros(size, dtype=bool)

    def __len__(self) -> int:
        return self.scores.size

    @property
    def complete(self) -> bool:
        return bool(self._written.all())

    @property
    def filled(self) -> int:
        return int(self._written.sum())

    def record(self, pair_index: int, score: float) -> None:
        if not 0 <= pair_index < self.scores.size:
            raise IndexError(f"pair index {pair_index} outside bank of size {self.scores.size}")
        if self._written[pair_index]:
            raise AlignmentError(f"pair {pair_index} already recorded in epoch {self.epoch}")
        self.scores[pair_index] = score
        self._written[pair_index] = True

    def record_batch(self, indices, scores) -> None:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.scores.size):
            raise IndexError("pair index outside bank")
        if np.unique(idx).size != idx.size or self._written[idx].any():
            raise AlignmentError(f"duplicate write in epoch {self.epoch}")
        self.scores[idx] = np.asarray(scores, dtype=np.float64)
        self._written[idx] = True

    def dumps(self) -> bytes:
        if not self.complete:
            raise AlignmentError("refusing to dump an incomplete bank")
        return (BANK_MAGIC + struct.pack("<QQB", self.epoch, self.scores.size, int(self.kind))
                + np.ascontiguousarray(self.scores, dtype="<f8").tobytes())

    def save(self, path) -> None:
        Path(path).write_bytes(self.dumps())

    @classmethod
    def loads(cls, buf: bytes) -> "SimilarityBank":
        if buf[:5] != BANK_MAGIC:
            raise AlignmentError("not an EBKB1 bank file")
        epoch, size, kind = struct.unpack_from("<QQB", buf, 5)
        body = buf[5 + 17:]
        if len(body) != 8 * size:
            raise AlignmentError("bank file truncated")
        bank = cls(size, BankKind(kind), epoch)
        bank.record_batch(np.arange(size), np.frombuffer(body, dtype="<f8"))
        return bank

    @classmethod
    def load(cls, path) -> "SimilarityBank":
        return cls.loads(Path(path).read_bytes())


def derive_threshold(bank: SimilarityBank, drop_ratio: float) -> float:
    """Score at or below which a pair is eliminated next epoch.

    Sorted descending, the threshold is the k-th value from the end with
    k = max(1, floor(drop_ratio * L)); drop_ratio = 0 gives -inf.
    """
    if not bank.complete:
        raise AlignmentError(f"bank for epoch {bank.epoch} is incomplete ({bank.filled}/{len(bank)})")
    if not 0.0 <= drop_ratio < 1.0:
        raise AlignmentError("drop_ratio must lie in [0, 1)")
    if drop_ratio == 0.0:
        return -math.inf
    n = len(bank)
    k = max(1, int(math.floor(drop_ratio * n)))
    desc = np.sort(bank.scores)[::-1]
    return float(desc[n - k])


@dataclass
class Thresholds:
    scheme: Scheme = Scheme.SPLIT
    th_global: float = -math.inf
    th_local: float = -math.inf
    th_joint: float = -math.inf
    drop_ratio: float = 0.0
    source_epoch: int = -1


@dataclass
class BatchEliminationMask:
    keep_global: np.ndarray
    keep_local: np.ndarray

    @property
    def r_global(self) -> int:
        return int(self.keep_global.size - self.keep_global.sum())

    @property
    def r_local(self) -> int:
        return int(self.keep_local.size - self.keep_local.sum())

    @classmethod
    def keep_all(cls, n: int) -> "BatchEliminationMask":
        return cls(np.ones(n, dtype=bool), np.ones(n, dtype=bool))


def eliminate(scores_g, scores_l, th: Thresholds, scheme: Scheme | str,
              alpha: float = 0.6, beta: float = 0.4) -> BatchEliminationMask:
    """Keep flags for each in-batch matched pair (strictly above threshold survives)."""
    scheme = Scheme(scheme)
    g = np.asarray(scores_g, dtype=np.float64)
    l = np.asarray(scores_l, dtype=np.float64)
    if g.shape != l.shape:
        raise AlignmentError("global and local score vectors differ in length")
    if scheme is Scheme.NONE:
        return BatchEliminationMask.keep_all(g.size)
    if th.scheme is not scheme:
        raise AlignmentError(f"{scheme.value} elimination given {th.scheme.value} thresholds")
    if scheme is Scheme.SPLIT:
        return BatchEliminationMask(g > th.th_global, l > th.th_local)
    keep = combine((g, l), alpha, beta) > th.th_joint
    return BatchEliminationMask(keep, keep.copy())


class EliminationSchedule:
    """Bank bookkeeping across epochs plus the mask for each batch.

    Banks are always filled (also for ``Scheme.NONE``, for diagnostics);
    masks only bite from ``drop_epoch`` on, using thresholds derived at the
    end of the previous epoch.
    """

    def __init__(self, n_pairs: int, scheme: Scheme | str = Scheme.SPLIT, drop_ratio: float = 0.01,
                 drop_epoch: int = 4, alpha: float = 0.6, beta: float = 0.4):
        self.n_pairs = n_pairs
        self.scheme = Scheme(scheme)
        self.drop_ratio = drop_ratio
        self.drop_epoch = drop_epoch
        self.alpha, self.beta = alpha, beta
        self.epoch = -1
        self.banks: dict[BankKind, SimilarityBank] = {}
        self.thresholds = Thresholds(Scheme.JOINT if self.scheme is Scheme.JOINT else Scheme.SPLIT)
        self.history: list[Thresholds] = []

    def begin_epoch(self, epoch: int) -> Thresholds:
        self.epoch = epoch
        kinds = [BankKind.GLOBAL, BankKind.LOCAL] + ([BankKind.JOINT] if self.scheme is Scheme.JOINT else [])
        self.banks = {k: SimilarityBank(self.n_pairs, k, epoch) for k in kinds}
        return self.active_thresholds()

    def active_thresholds(self) -> Thresholds:
        if self.scheme is Scheme.NONE or self.epoch < self.drop_epoch:
            return Thresholds(self.thresholds.scheme, drop_ratio=self.drop_ratio)
        return self.thresholds

    def record(self, pair_indices, scores_g, scores_l) -> None:
        self.banks[BankKind.GLOBAL].record_batch(pair_indices, scores_g)
        self.banks[BankKind.LOCAL].record_batch(pair_indices, scores_l)
        if BankKind.JOINT in self.banks:
            self.banks[BankKind.JOINT].record_batch(pair_indices,
                                                    combine((scores_g, scores_l), self.alpha, self.beta))

    def mask(self, scores_g, scores_l) -> BatchEliminationMask:
        if self.scheme is Scheme.NONE or self.epoch < self.drop_epoch:
            return BatchEliminationMask.keep_all(np.size(scores_g))
        return eliminate(scores_g, scores_l, self.thresholds, self.scheme, self.alpha, self.beta)

    def end_epoch(self) -> Thresholds:
        """Derive the thresholds the next epoch will use."""
        th = Thresholds(self.thresholds.scheme, drop_ratio=self.drop_ratio, source_epoch=self.epoch)
        if self.scheme is Scheme.JOINT:
            th.th_joint = derive_threshold(self.banks[BankKind.JOINT], self.drop_ratio)
        elif self.scheme is Scheme.SPLIT:
            th.th_global = derive_threshold(self.banks[BankKind.GLOBAL], self.drop_ratio)
            th.th_local = derive_threshold(self.banks[BankKind.LOCAL], self.drop_ratio)
        else:
            for bank in self.banks.values():
                if not bank.complete:
                    raise AlignmentError("incomplete bank at epoch end")
        self.thresholds = th
        self.history.append(th)
        log.debug("epoch %d thresholds: %s", self.epoch, th)
        return th
