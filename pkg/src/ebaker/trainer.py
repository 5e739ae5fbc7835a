"""Optimisation loop: AdamW, warmup + cosine LR, clipping, EMA, banks, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .alignment import EliminationSchedule, Scheme, global_similarity, local_similarity_matrix
from .corpus import Corpus, KeywordList, Vocabulary, keyword_ids, mask_keywords, tokenize
from .model import EbakerModel, ModelConfig
from .objective import LossBreakdown, LossConfig, total_loss
from .rerank import SarConfig
from .tensorlab.tensor import NonFiniteError, Tensor, check_finite

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 100
    lr: float = 1.5e-5
    weight_decay: float = 0.7
    warmup_iters: int = 200
    max_grad_norm: float = 50.0
    ema_decay: float = 0.99
    seed: int = 0
    scheme: str = "split"
    drop_ratio: float = 0.01
    alpha: float = 0.6
    beta: float = 0.4
    eval_with_ema: bool = True
    max_len: int = 32


@dataclass
class RunConfig:
    """Everything a ``train`` run needs besides the data."""

    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sar: SarConfig = field(default_factory=SarConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"train", "loss", "model", "sar", "synth"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(TrainConfig(**d.get("train", {})), LossConfig(**d.get("loss", {})),
                   ModelConfig(**d.get("model", {})), SarConfig(**d.get("sar", {})))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# optimiser pieces -------------------------------------------------------------

def lr_at(it: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear warmup to ``base_lr`` over ``warmup`` iterations, then cosine decay to 0 at ``total``."""
    if warmup > 0 and it < warmup:
        return base_lr * (it + 1) / warmup
    span = max(total - warmup, 1)
    progress = min(max(it - warmup, 0) / span, 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if not math.isfinite(norm):
        raise NonFiniteError("non-finite gradient norm")
    if norm > max_norm:
        coef = max_norm / norm
        grads = [g * coef for g in grads]
    return grads, norm


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: list[Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 decay_mask: list[bool] | None = None):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.decay_mask = decay_mask or [True] * len(params)

    def step(self, grads: list[np.ndarray], lr: float, weight_decay: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {i}")
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            new = p.data - lr * update
            if weight_decay and self.decay_mask[i]:
                new = new - lr * weight_decay * p.data
            p.data = new


@dataclass
class EmaState:
    shadow: dict[str, np.ndarray]
    decay: float

    @classmethod
    def from_params(cls, named: Iterable[tuple[str, Tensor]], decay: float) -> "EmaState":
        if not 0.0 <= decay < 1.0:
            raise ValueError("ema decay must lie in [0, 1)")
        return cls({k: p.data.copy() for k, p in named}, decay)


def ema_update(ema: EmaState, named: Iterable[tuple[str, Tensor | np.ndarray]]) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * param, in place."""
    lam = ema.decay
    for k, p in named:
        arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
        if k not in ema.shadow or ema.shadow[k].shape != arr.shape:
            raise ValueError(f"EMA shape mismatch for {k}")
        ema.shadow[k] = lam * ema.shadow[k] + (1.0 - lam) * arr
    return ema


# training ---------------------------------------------------------------------

@dataclass
class EpochReport:
    epoch: int
    steps: int
    mean: dict[str, float]
    r_global: int
    r_local: int
    eliminated_global: list[int]
    eliminated_local: list[int]
    thresholds_used: dict
    thresholds_next: dict
    banks_complete: bool
    seconds: float

    @property
    def eliminated(self) -> list[int]:
        return sorted(set(self.eliminated_global) | set(self.eliminated_local))


class Trainer:
    """Trains an :class:`EbakerModel` on one corpus split.

    Pair index ``i`` (the bank slot) is the i-th (sample, caption) pair of
    ``corpus.pairs()`` and stays fixed across epochs.
    """

    def __init__(self, corpus: Corpus, vocab: Vocabulary, keywords: KeywordList | None, cfg: RunConfig,
                 out_dir: str | Path | None = None):
        self.corpus = corpus
        self.vocab = vocab
        self.keywords = keywords
        self.cfg = cfg
        tc = cfg.train
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

        patches = corpus.patches()
        mc = cfg.model
        mc.d_in, mc.n_patches = patches.shape[2], patches.shape[1]
        mc.vocab_size, mc.max_len = len(vocab), tc.max_len
        mc.temperature = cfg.loss.temperature
        self.model = EbakerModel(mc)

        self.pairs = corpus.pairs()
        self.patches = patches
        ids = np.stack([tokenize(corpus.samples[s].captions[c], vocab, tc.max_len, pad=True) for s, c in self.pairs])
        self.ids = ids
        kw = keyword_ids(keywords, vocab) - vocab.special_ids if keywords is not None else frozenset()
        masked = [mask_keywords(row, (), vocab, kw_ids=kw) for row in ids]
        self.masked_ids = np.stack([m.ids for m in masked])
        self.masked_pos = [m.masked_positions for m in masked]
        self.masked_tgt = [m.masked_targets for m in masked]

        named = list(self.model.named_parameters())
        self.param_names = [k for k, _ in named]
        self.params = [p for _, p in named]
        # no decay on gains, biases, embeddings-as-vectors and the temperature
        decay_mask = [p.ndim >= 2 for p in self.params]
        self.opt = AdamW(self.params, decay_mask=decay_mask)
        self.ema = EmaState.from_params(named, tc.ema_decay)
        self.schedule = EliminationSchedule(len(self.pairs), Scheme(tc.scheme), tc.drop_ratio,
                                            cfg.loss.drop_epoch, tc.alpha, tc.beta)
        self.steps_per_epoch = math.ceil(len(self.pairs) / tc.batch_size)
        self.total_iters = self.steps_per_epoch * tc.epochs
        self.iteration = 0
        self.reports: list[EpochReport] = []
        self.log_lines: list[str] = []

    # batches ---------------------------------------------------------------
    def batches(self, epoch: int) -> list[np.ndarray]:
        rng = np.random.default_rng([self.cfg.train.seed, epoch])
        perm = rng.permutation(len(self.pairs))
        bs = self.cfg.train.batch_size
        out = [perm[i:i + bs] for i in range(0, len(perm), bs)]
        if len(out) > 1 and len(out[-1]) < 2:
            out[-2] = np.concatenate([out[-2], out.pop()])
        return out

    def _trim(self, ids: np.ndarray) -> np.ndarray:
        width = int((ids != self.vocab.pad_id).sum(axis=1).max())
        return ids[:, :width]

    def train_step(self, idx: np.ndarray, epoch: int) -> LossBreakdown:
        model, tc = self.model, self.cfg.train
        sample_idx = np.array([self.pairs[i][0] for i in idx])
        ids = self._trim(self.ids[idx])

        img_g, img_full = model.encode_images(self.patches[sample_idx])
        txt_g, txt_all, txt_mask = model.encode_texts(ids, self.vocab.pad_id, self.vocab.eos_id)
        sim_g = global_similarity(img_g, txt_g)
        sim_l = local_similarity_matrix(img_full[:, 1:], txt_all, txt_mask)

        diag_g, diag_l = np.diag(sim_g.data).copy(), np.diag(sim_l.data).copy()
        self.schedule.record(idx, diag_g, diag_l)
        mask = self.schedule.mask(diag_g, diag_l)
        self._eliminated_g.extend(int(i) for i in idx[~mask.keep_global])
        self._eliminated_l.extend(int(i) for i in idx[~mask.keep_local])

        logits = targets = None
        if self.cfg.loss.mlm_weight > 0 and self.keywords is not None:
            mids = self.masked_ids[idx][:, : ids.shape[1]]
            rows = np.concatenate([np.full(self.masked_pos[i].size, b) for b, i in enumerate(idx)]).astype(np.int64)
            cols = np.concatenate([self.masked_pos[i] for i in idx]).astype(np.int64)
            targets = np.concatenate([self.masked_tgt[i] for i in idx]).astype(np.int64)
            _, m_all, _ = model.encode_texts(mids, self.vocab.pad_id, self.vocab.eos_id)
            logits = model.ker(m_all, img_full, mids == self.vocab.pad_id, (rows, cols))

        loss, parts = total_loss(sim_g, sim_l, model.temperature(), epoch, self.cfg.loss, logits, targets,
                                 mask if epoch >= self.cfg.loss.drop_epoch else None)
        model.zero_grad()
        loss.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        grads, _ = clip_grad_norm(grads, tc.max_grad_norm)
        lr = lr_at(self.iteration, tc.lr, tc.warmup_iters, self.total_iters)
        self.opt.step(grads, lr, tc.weight_decay)
        ema_update(self.ema, zip(self.param_names, self.params))
        self.iteration += 1
        return parts

    def run_epoch(self, epoch: int) -> EpochReport:
        t0 = time.perf_counter()
        used = self.schedule.begin_epoch(epoch)
        self._eliminated_g, self._eliminated_l = [], []
        totals: dict[str, float] = {}
        rg = rl = 0
        steps = 0
        for step, idx in enumerate(self.batches(epoch)):
            parts = self.train_step(idx, epoch)
            rec = {"epoch": epoch, "step": step, **parts.as_log()}
            self.log_lines.append(json.dumps(rec, sort_keys=True))
            for k in ("info_g", "info_l", "mlm", "total"):
                totals[k] = totals.get(k, 0.0) + rec[k]
            rg += parts.r_global
            rl += parts.r_local
            steps += 1
        check_finite(*self.params, where=f"after epoch {epoch}")
        complete = all(b.complete for b in self.schedule.banks.values())
        nxt = self.schedule.end_epoch()
        report = EpochReport(epoch, steps, {k: v / steps for k, v in totals.items()}, rg, rl,
                             sorted(self._eliminated_g), sorted(self._eliminated_l),
                             _th_dict(used), _th_dict(nxt), complete, time.perf_counter() - t0)
        self.reports.append(report)
        if self.out_dir:
            self._write_epoch_artifacts(epoch)
        log.info("epoch %d: %s R_g=%d R_l=%d (%.1fs)", epoch, report.mean, rg, rl, report.seconds)
        return report

    def fit(self) -> list[EpochReport]:
        for epoch in range(self.cfg.train.epochs):
            self.run_epoch(epoch)
        return self.reports

    # weights ---------------------------------------------------------------
    def ema_model(self) -> EbakerModel:
        m = EbakerModel(self.model.cfg)
        m.load_state_dict(self.ema.shadow)
        return m

    def eval_model(self) -> EbakerModel:
        return self.ema_model() if self.cfg.train.eval_with_ema else self.model

    def _write_epoch_artifacts(self, epoch: int) -> None:
        out = self.out_dir
        for kind, bank in self.schedule.banks.items():
            bank.save(out / f"bank_e{epoch:02d}_{kind.name.lower()}.ebkb")
        meta = {"run": self.cfg.to_dict(), "vocab": self.vocab.words(), "epoch": epoch}
        self.model.save(out / "live.ebkt", meta)
        ema = self.ema_model()
        ema.save(out / "ema.ebkt", meta)
        (out / "train_log.jsonl").write_text("\n".join(self.log_lines) + "\n", encoding="utf-8")
        # wall-clock seconds stay out so reruns produce identical files
        reports = [{k: v for k, v in asdict(r).items() if k != "seconds"} for r in self.reports]
        (out / "epochs.json").write_text(json.dumps(reports, indent=1) + "\n", encoding="utf-8")


def _th_dict(th) -> dict:
    d = asdict(th)
    d["scheme"] = th.scheme.value
    return {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in d.items()}

