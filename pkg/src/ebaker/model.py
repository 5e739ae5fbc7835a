"""Twin-tower toy encoders and the keyword reasoning head.

The vision tower consumes pre-extracted patch vectors instead of pixels;
the text tower consumes token ids from :mod:`ebaker.corpus`.  Both emit a
global vector plus per-position local vectors in a shared ``d_out`` space.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .tensorlab import ops
from .tensorlab.io import load_tensors, save_tensors
from .tensorlab.nn import (CrossAttentionBlock, LayerNorm, Linear, Module, Parameter, TransformerBlock,
                           trunc_normal)
from .tensorlab.tensor import ShapeError, Tensor


@dataclass
class ModelConfig:
    d_in: int = 16
    n_patches: int = 16
    vocab_size: int = 64
    max_len: int = 32
    d_model: int = 64
    d_out: int = 32
    n_layers: int = 2
    n_heads: int = 4
    ker_blocks: int = 4
    ker_heads: int = 4
    causal_text: bool = True
    temperature: float = 0.07
    init_std: float = 0.02
    seed: int = 0


@dataclass
class FeaturePack:
    """One sample's global vector and its local vectors (as tensors)."""

    global_: Tensor
    locals_: Tensor


class VisionEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.n_patches = cfg.n_patches
        std = cfg.init_std
        self.patch_proj = Linear(cfg.d_in, cfg.d_model, rng, std=std)
        self.cls = Parameter(trunc_normal(rng, (cfg.d_model,), std))
        self.pos = Parameter(trunc_normal(rng, (cfg.n_patches + 1, cfg.d_model), std))
        self.ln_pre = LayerNorm(cfg.d_model)
        self.blocks = [TransformerBlock(cfg.d_model, cfg.n_heads, rng, std=std) for _ in range(cfg.n_layers)]
        self.ln_post = LayerNorm(cfg.d_model)
        self.proj = Linear(cfg.d_model, cfg.d_out, rng, bias=False, std=std)

    def __call__(self, patches) -> Tensor:
        """(B, N, d_in) patches -> (B, N+1, d_out); row 0 is the [CLS] (global) output."""
        x = patches if isinstance(patches, Tensor) else Tensor(patches)
        if x.ndim != 3 or x.shape[1] != self.n_patches:
            raise ShapeError(f"expected (B, {self.n_patches}, d_in) patches, got {x.shape}")
        b = x.shape[0]
        tokens = self.patch_proj(x)
        cls = ops.add(ops.reshape(self.cls, (1, 1, -1)), np.zeros((b, 1, self.cls.shape[0])))
        h = ops.concat([cls, tokens], axis=1) + self.pos
        h = self.ln_pre(h)
        for blk in self.blocks:
            h = blk(h)
        return self.proj(self.ln_post(h))


class TextEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.max_len = cfg.max_len
        self.causal = cfg.causal_text
        std = cfg.init_std
        self.tok_emb = Parameter(trunc_normal(rng, (cfg.vocab_size, cfg.d_model), std))
        self.pos = Parameter(trunc_normal(rng, (cfg.max_len, cfg.d_model), std))
        self.blocks = [TransformerBlock(cfg.d_model, cfg.n_heads, rng, std=std) for _ in range(cfg.n_layers)]
        self.ln_final = LayerNorm(cfg.d_model)
        self.proj = Linear(cfg.d_model, cfg.d_out, rng, bias=False, std=std)

    def __call__(self, ids: np.ndarray, pad_id: int) -> Tensor:
        """(B, S) padded ids -> (B, S, d_out) per-position features."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] > self.max_len:
            raise ShapeError(f"expected (B, S<={self.max_len}) ids, got {ids.shape}")
        s = ids.shape[1]
        pad = ids == pad_id
        h = ops.embedding_lookup(self.tok_emb, ids) + self.pos[:s]
        for blk in self.blocks:
            h = blk(h, key_padding_mask=pad, causal=self.causal)
        return self.proj(self.ln_final(h))


class MLMHead(Module):
    """linear -> QuickGELU -> LayerNorm -> linear to vocabulary logits."""

    def __init__(self, d: int, vocab_size: int, rng: np.random.Generator, std: float = 0.02):
        self.l1 = Linear(d, d, rng, std=std)
        self.ln = LayerNorm(d)
        self.l2 = Linear(d, vocab_size, rng, std=std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.l2(self.ln(ops.quick_gelu(self.l1(x))))


class KerHead(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        std = cfg.init_std
        self.cross = CrossAttentionBlock(cfg.d_out, cfg.ker_heads, rng, std)
        self.blocks = [TransformerBlock(cfg.d_out, cfg.ker_heads, rng, std=std) for _ in range(cfg.ker_blocks)]
        self.mlm = MLMHead(cfg.d_out, cfg.vocab_size, rng, std)

    def __call__(self, text_locals: Tensor, vision: Tensor, text_pad: np.ndarray,
                 masked: tuple[np.ndarray, np.ndarray]) -> Tensor:
        """Logits (M, V) at the masked slots.

        ``text_locals`` (B, S, d) come from the masked caption, ``vision``
        (B, N+1, d) is the image's global+local features, ``masked`` holds
        the (batch, position) indices of every [MASK] slot.
        """
        rows, cols = masked
        if rows.size == 0:
            return ops.matmul(Tensor(np.zeros((0, text_locals.shape[-1]))), self.mlm.l2.weight)
        h = self.cross(text_locals, vision)
        pad = np.asarray(text_pad, dtype=bool)
        for blk in self.blocks:
            h = blk(h, key_padding_mask=pad)
        return self.mlm(h[rows, cols])


class EbakerModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.vision = VisionEncoder(cfg, rng)
        self.text = TextEncoder(cfg, rng)
        self.ker = KerHead(cfg, rng)
        self.log_temp = Parameter(np.array(np.log(cfg.temperature)))

    def temperature(self) -> Tensor:
        return ops.exp(self.log_temp)

    def encode_images(self, patches) -> tuple[Tensor, Tensor]:
        """Batched: (B, N, d_in) -> global (B, d) and the full (B, N+1, d) output ([CLS] first)."""
        out = self.vision(patches)
        return out[:, 0, :], out

    def encode_texts(self, ids: np.ndarray, pad_id: int, eos_id: int) -> tuple[Tensor, Tensor, np.ndarray]:
        """Batched: returns global (B, d), all positions (B, S, d) and the local-position mask (B, S)."""
        ids = np.asarray(ids, dtype=np.int64)
        is_eos = ids == eos_id
        if not np.all(is_eos.any(axis=1)):
            raise ValueError("every sequence needs an [EOS] token")
        eos_pos = is_eos.argmax(axis=1)
        out = self.text(ids, pad_id)
        glob = out[np.arange(ids.shape[0]), eos_pos]
        local_mask = (ids != pad_id) & ~is_eos
        return glob, out, local_mask

    def save(self, path, extra: dict | None = None) -> None:
        path = Path(path)
        save_tensors(path, self.state_dict())
        meta = {"model": asdict(self.cfg), **(extra or {})}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> tuple["EbakerModel", dict]:
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        model = cls(ModelConfig(**meta["model"]))
        model.load_state_dict(load_tensors(path))
        return model, meta


# single-sample views ----------------------------------------------------------

def encode_image(patches, model: EbakerModel) -> FeaturePack:
    """(N, d_in) patches -> global (d_out,), locals (N, d_out)."""
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    if x.ndim != 2:
        raise ShapeError(f"expected (N, d_in), got {x.shape}")
    out = model.vision(ops.reshape(x, (1,) + x.shape))
    return FeaturePack(out[0, 0], out[0, 1:])


def encode_text(tokens, model: EbakerModel, pad_id: int, eos_id: int) -> FeaturePack:
    """Token ids with [SOS]/[EOS] -> global from [EOS], locals from the other non-pad positions."""
    ids = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    glob, out, local_mask = model.encode_texts(ids, pad_id, eos_id)
    return FeaturePack(glob[0], out[0][np.flatnonzero(local_mask[0])])


def ker_forward(masked_text_locals: Tensor, vision_features: Tensor, model: EbakerModel,
                masked_positions) -> Tensor:
    """Single-sample KER logits, shape (M, V)."""
    pos = np.asarray(masked_positions, dtype=np.int64)
    w = masked_text_locals.shape[0]
    if pos.size and (pos.min() < 0 or pos.max() >= w):
        raise IndexError("masked position outside the sequence")
    t = ops.reshape(masked_text_locals, (1,) + masked_text_locals.shape)
    v = ops.reshape(vision_features, (1,) + vision_features.shape)
    return model.ker(t, v, np.zeros((1, w), dtype=bool), (np.zeros_like(pos), pos))
