"""Offline reranking by mutual retrievability.

For each query the top-k targets get a rank-decay score; each candidate
then retrieves back over all queries and, if the original query is among
its top-l, contributes a reverse rank-decay score and a confirmation
score (the query's share of the candidate's top-l cosine mass).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class RerankError(ValueError):
    pass


@dataclass
class SarConfig:
    tau: float = 0.05
    k: int = 10
    l: int = 10
    mu1: float = 0.5
    mu2: float = 1.25
    alpha: float = 0.6
    beta: float = 0.4
    outside: str = "zero"

    def validate(self) -> None:
        if self.tau <= 0:
            raise RerankError("tau must be positive")
        if self.k < 1 or self.l < 1:
            raise RerankError("k and l must be >= 1")
        if self.outside not in ("zero", "raw"):
            raise RerankError("outside must be 'zero' or 'raw'")


@dataclass
class RerankedMatrix:
    forward: np.ndarray
    reverse: np.ndarray
    confirm: np.ndarray
    in_topk: np.ndarray
    raw: np.ndarray = field(repr=False)
    direction: str = "i2t"
    outside: str = "zero"

    def optimized(self, mu1: float, mu2: float) -> np.ndarray:
        s = self.forward + mu1 * self.reverse + mu2 * self.confirm
        if self.outside == "raw":
            s = np.where(self.in_topk, s, self.raw)
        return s

    @property
    def shape(self) -> tuple[int, int]:
        return self.forward.shape


def rank_decay(position, tau: float):
    """exp(-tau * (position + 1)) for 0-based ranks."""
    return np.exp(-tau * (np.asarray(position, dtype=np.float64) + 1.0))


def confirmation(sim_row, target_index: int) -> float:
    """Share of the reverse candidates' cosine mass held by ``target_index``."""
    row = np.asarray(sim_row, dtype=np.float64)
    denom = row.sum()
    if denom == 0.0:
        raise RerankError("confirmation denominator is zero")
    return float(row[target_index] / denom)


def ranking(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    """Indices sorted by descending score; equal scores keep the lower index first."""
    return np.argsort(-scores, axis=axis, kind="stable")


def sar_rerank(sim, cfg: SarConfig | None = None, direction: str = "i2t") -> RerankedMatrix:
    """Rerank one channel's (Q, T) similarity matrix."""
    cfg = cfg or SarConfig()
    cfg.validate()
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or 0 in sim.shape:
        raise RerankError(f"need a non-empty (Q, T) matrix, got {sim.shape}")
    q, t = sim.shape
    k, l = cfg.k, cfg.l
    if k > t:
        log.warning("k=%d exceeds %d targets; clamped", k, t)
        k = t
    if l > q:
        log.warning("l=%d exceeds %d queries; clamped", l, q)
        l = q

    fwd_order = ranking(sim, axis=1)[:, :k]
    rev_order = ranking(sim, axis=0)[:l, :]

    # rev_pos[qi, tj] = position of query qi in target tj's reverse top-l, or -1
    rev_pos = np.full((q, t), -1, dtype=np.int64)
    cols = np.broadcast_to(np.arange(t), (l, t))
    rev_pos[rev_order, cols] = np.arange(l)[:, None]
    rev_mass = np.take_along_axis(sim, rev_order, axis=0).sum(axis=0)

    forward = np.zeros((q, t))
    reverse = np.zeros((q, t))
    confirm = np.zeros((q, t))
    in_topk = np.zeros((q, t), dtype=bool)
    rows = np.repeat(np.arange(q), k)
    tgt = fwd_order.reshape(-1)
    in_topk[rows, tgt] = True
    forward[rows, tgt] = np.tile(rank_decay(np.arange(k), cfg.tau), q)
    pos = rev_pos[rows, tgt]
    hit = pos >= 0
    reverse[rows[hit], tgt[hit]] = rank_decay(pos[hit], cfg.tau)
    denom = rev_mass[tgt[hit]]
    if np.any(denom == 0.0):
        raise RerankError("confirmation denominator is zero")
    confirm[rows[hit], tgt[hit]] = sim[rows[hit], tgt[hit]] / denom
    return RerankedMatrix(forward, reverse, confirm, in_topk, sim, direction, cfg.outside)


def fuse(global_rr: RerankedMatrix, local_rr: RerankedMatrix, alpha: float = 0.6, beta: float = 0.4,
         mu1: float = 0.5, mu2: float = 1.25) -> np.ndarray:
    """alpha * (global optimised score) + beta * (local optimised score)."""
    if global_rr.shape != local_rr.shape:
        raise RerankError(f"shape mismatch {global_rr.shape} vs {local_rr.shape}")
    return alpha * global_rr.optimized(mu1, mu2) + beta * local_rr.optimized(mu1, mu2)


def audit(rr: RerankedMatrix, mu1: float, mu2: float, limit: int | None = None) -> list[dict]:
    """Per-pair components for every (query, target) inside the forward top-k."""
    out = []
    opt = rr.optimized(mu1, mu2)
    for qi, tj in zip(*np.nonzero(rr.in_topk)):
        out.append({"query": int(qi), "target": int(tj), "raw": float(rr.raw[qi, tj]),
                    "s_fwd": float(rr.forward[qi, tj]), "s_rev": float(rr.reverse[qi, tj]),
                    "s_d": float(rr.confirm[qi, tj]), "score": float(opt[qi, tj])})
        if limit is not None and len(out) >= limit:
            break
    return out


# similarity-matrix files ----------------------------------------------------

MATRIX_MAGIC = b"EBKM1"


def save_matrix(path, m: np.ndarray) -> None:
    m = np.ascontiguousarray(m, dtype="<f8")
    if m.ndim != 2:
        raise RerankError("matrix files hold 2-D arrays")
    Path(path).write_bytes(MATRIX_MAGIC + struct.pack("<QQ", *m.shape) + m.tobytes())


def load_matrix(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:5] != MATRIX_MAGIC:
        raise RerankError(f"{path}: not an EBKM1 matrix file")
    q, t = struct.unpack_from("<QQ", buf, 5)
    if len(buf) != 21 + 8 * q * t:
        raise RerankError(f"{path}: size does not match {q}x{t}")
    return np.frombuffer(buf, dtype="<f8", offset=21).reshape(q, t).astype(np.float64)

