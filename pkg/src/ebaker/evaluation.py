"""Recall@k / mean recall and the retrieval evaluation harness."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .alignment import local_similarity_matrix
from .corpus import Corpus, Vocabulary, tokenize
from .model import EbakerModel
from .rerank import SarConfig, fuse, ranking, sar_rerank
from .tensorlab import ops
from .tensorlab.tensor import no_grad

SCHEMA_VERSION = 1
KS = (1, 5, 10)


class EvaluationError(ValueError):
    pass


def recall_at_k(sim, ground_truth: Sequence[Sequence[int]], k: int) -> float:
    """Percentage of queries with a correct target among their top ``k``.

    Rankings break ties toward the lower target index.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.shape[0] != len(ground_truth):
        raise EvaluationError(f"{len(ground_truth)} truth sets for {sim.shape[0]} queries")
    if sim.shape[0] == 0:
        raise EvaluationError("no queries")
    order = ranking(sim, axis=1)[:, :k]
    hits = 0
    for q, truth in enumerate(ground_truth):
        truth = set(int(t) for t in truth)
        if not truth:
            raise EvaluationError(f"query {q} has no correct target")
        hits += bool(truth.intersection(order[q].tolist()))
    return 100.0 * hits / sim.shape[0]


def first_hit_ranks(sim, ground_truth: Sequence[Sequence[int]]) -> np.ndarray:
    """0-based rank of the best-ranked correct target for every query."""
    sim = np.asarray(sim, dtype=np.float64)
    order = ranking(sim, axis=1)
    pos = np.empty_like(order)
    np.put_along_axis(pos, order, np.arange(sim.shape[1])[None, :].repeat(sim.shape[0], 0), axis=1)
    return np.array([min(pos[q, list(t)]) for q, t in enumerate(ground_truth)])


@dataclass
class RetrievalReport:
    caption_retrieval: dict[str, float]
    image_retrieval: dict[str, float]
    mR: float
    config_hash: str = ""
    checkpoint: str = ""
    seed: int | None = None
    wall_time: float = 0.0
    sar: bool = False
    alpha: float = 0.6
    beta: float = 0.4
    schema_version: int = SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_recalls(cls, i2t: dict[str, float], t2i: dict[str, float], **meta) -> "RetrievalReport":
        six = [i2t[f"r{k}"] for k in KS] + [t2i[f"r{k}"] for k in KS]
        return cls(dict(i2t), dict(t2i), float(np.mean(six)), **meta)

    def recalls(self) -> list[float]:
        return [self.caption_retrieval[f"r{k}"] for k in KS] + [self.image_retrieval[f"r{k}"] for k in KS]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def summary(self) -> str:
        cr = " ".join(f"R@{k}={self.caption_retrieval[f'r{k}']:.1f}" for k in KS)
        ir = " ".join(f"R@{k}={self.image_retrieval[f'r{k}']:.1f}" for k in KS)
        return f"i2t {cr} | t2i {ir} | mR={self.mR:.2f}"


REPORT_KEYS = frozenset(RetrievalReport.__dataclass_fields__)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EncodedSplit:
    img_global: np.ndarray
    img_local: np.ndarray
    txt_global: np.ndarray
    txt_all: np.ndarray
    txt_mask: np.ndarray
    caption_owner: np.ndarray

    @property
    def i2t_truth(self) -> list[list[int]]:
        truth: list[list[int]] = [[] for _ in range(self.img_global.shape[0])]
        for c, owner in enumerate(self.caption_owner):
            truth[owner].append(c)
        return truth

    @property
    def t2i_truth(self) -> list[list[int]]:
        return [[int(o)] for o in self.caption_owner]


def encode_split(model: EbakerModel, corpus: Corpus, vocab: Vocabulary, max_len: int | None = None,
                 batch_size: int = 256) -> EncodedSplit:
    max_len = max_len or model.cfg.max_len
    if len(corpus) == 0:
        raise EvaluationError("empty split")
    patches = corpus.patches()
    owners, ids = [], []
    for i, s in enumerate(corpus.samples):
        for c in s.captions:
            owners.append(i)
            ids.append(tokenize(c, vocab, max_len, pad=True))
    ids = np.stack(ids)
    ids = ids[:, : max(1, int((ids != vocab.pad_id).sum(axis=1).max()))]
    ig, il, tg, ta = [], [], [], []
    with no_grad():
        for s in range(0, len(patches), batch_size):
            g, full = model.encode_images(patches[s:s + batch_size])
            ig.append(g.data)
            il.append(full.data[:, 1:])
        masks = []
        for s in range(0, len(ids), batch_size):
            g, full, m = model.encode_texts(ids[s:s + batch_size], vocab.pad_id, vocab.eos_id)
            tg.append(g.data)
            ta.append(full.data)
            masks.append(m)
    return EncodedSplit(np.concatenate(ig), np.concatenate(il), np.concatenate(tg), np.concatenate(ta),
                        np.concatenate(masks), np.asarray(owners))


def similarity_matrices(enc: EncodedSplit) -> tuple[np.ndarray, np.ndarray]:
    """(images x captions) global and local similarity matrices."""
    with no_grad():
        sim_g = ops.cosine_rows(enc.img_global, enc.txt_global).data
        sim_l = local_similarity_matrix(enc.img_local, enc.txt_all, enc.txt_mask).data
    return sim_g, sim_l


def score_matrices(sim_g: np.ndarray, sim_l: np.ndarray, alpha: float, beta: float,
                   sar: SarConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Fused i2t (images x captions) and t2i (captions x images) score matrices."""
    if sar is None:
        fused = alpha * sim_g + beta * sim_l
        return fused, fused.T
    i2t = fuse(sar_rerank(sim_g, sar, "i2t"), sar_rerank(sim_l, sar, "i2t"), alpha, beta, sar.mu1, sar.mu2)
    t2i = fuse(sar_rerank(sim_g.T, sar, "t2i"), sar_rerank(sim_l.T, sar, "t2i"), alpha, beta, sar.mu1, sar.mu2)
    return i2t, t2i


def report_from_matrices(i2t: np.ndarray, t2i: np.ndarray, enc: EncodedSplit, **meta) -> RetrievalReport:
    cap = {f"r{k}": recall_at_k(i2t, enc.i2t_truth, k) for k in KS}
    img = {f"r{k}": recall_at_k(t2i, enc.t2i_truth, k) for k in KS}
    return RetrievalReport.from_recalls(cap, img, **meta)


def evaluate(model: EbakerModel, corpus: Corpus, vocab: Vocabulary, alpha: float = 0.6, beta: float = 0.4,
             sar: SarConfig | None = None, **meta) -> RetrievalReport:
    """Encode the split once, fuse global/local similarities (optionally via SAR) and score."""
    t0 = time.perf_counter()
    enc = encode_split(model, corpus, vocab)
    sim_g, sim_l = similarity_matrices(enc)
    i2t, t2i = score_matrices(sim_g, sim_l, alpha, beta, sar)
    rep = report_from_matrices(i2t, t2i, enc, alpha=alpha, beta=beta, sar=sar is not None, **meta)
    rep.wall_time = time.perf_counter() - t0
    return rep
