"""Captioned corpora, tokenisation, keyword statistics and keyword masking.

Also hosts the synthetic benchmark generator: class prototypes plus
attribute prototypes rendered into noisy patch vectors, captions built
from the same class/attribute words, and a controlled fraction of
training captions swapped to a different class.
"""

from __future__ import annotations

import json
import re
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, SOS, EOS, MASK, UNK = "[PAD]", "[SOS]", "[EOS]", "[MASK]", "[UNK]"
SPECIALS = (PAD, SOS, EOS, MASK, UNK)

DEFAULT_STOPLIST = frozenset("""
a an the of in on at to and or is are was were be there this that these those with
by for from as it its some many near
""".split())

_PUNCT = re.compile(r"[^\w\s]|_")


class CorpusError(ValueError):
    pass


def normalize_text(text: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


# vocabulary ------------------------------------------------------------------

class Vocabulary:
    """Dense token ids; the five special tokens always occupy ids 0..4."""

    def __init__(self, words: Iterable[str] = ()):
        self.token_to_id: dict[str, int] = {tok: i for i, tok in enumerate(SPECIALS)}
        for w in words:
            if w not in self.token_to_id:
                self.token_to_id[w] = len(self.token_to_id)
        self.id_to_token = [None] * len(self.token_to_id)
        for tok, i in self.token_to_id.items():
            self.id_to_token[i] = tok

    @classmethod
    def from_mapping(cls, mapping: dict[str, int]) -> "Vocabulary":
        """Build from explicit ids (e.g. ``{"red": 5, "roof": 6}``); ids must be dense."""
        ordered = sorted(mapping.items(), key=lambda kv: kv[1])
        expected = list(range(len(SPECIALS), len(SPECIALS) + len(ordered)))
        if [i for _, i in ordered] != expected:
            raise CorpusError("word ids must be dense and start after the special tokens")
        return cls(w for w, _ in ordered)

    @classmethod
    def build(cls, captions: Iterable[str], min_count: int = 1) -> "Vocabulary":
        counts = Counter(w for c in captions for w in normalize_text(c))
        words = sorted(w for w, n in counts.items() if n >= min_count)
        return cls(words)

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __contains__(self, word: str) -> bool:
        return word in self.token_to_id

    def __getitem__(self, word: str) -> int:
        return self.token_to_id.get(word, self.unk_id)

    pad_id = property(lambda self: self.token_to_id[PAD])
    sos_id = property(lambda self: self.token_to_id[SOS])
    eos_id = property(lambda self: self.token_to_id[EOS])
    mask_id = property(lambda self: self.token_to_id[MASK])
    unk_id = property(lambda self: self.token_to_id[UNK])

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.token_to_id[t] for t in SPECIALS)

    def words(self) -> list[str]:
        return self.id_to_token[len(SPECIALS):]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.words(), indent=0) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))


def tokenize(text: str, vocab: Vocabulary, max_len: int = 32, pad: bool = False) -> np.ndarray:
    """Map a caption to ``[SOS] w1 .. wn [EOS]`` ids, truncated to ``max_len``.

    With ``pad=True`` the result is right-padded with [PAD] to ``max_len``.
    """
    words = normalize_text(text)
    if not words:
        raise CorpusError("caption is empty after normalisation")
    if max_len < 3:
        raise CorpusError("max_len must leave room for [SOS], one word and [EOS]")
    body = [vocab[w] for w in words[: max_len - 2]]
    ids = [vocab.sos_id, *body, vocab.eos_id]
    if pad:
        ids += [vocab.pad_id] * (max_len - len(ids))
    return np.asarray(ids, dtype=np.int64)


# keywords --------------------------------------------------------------------

@dataclass
class KeywordList:
    keywords: list[str]
    source_counts: list[dict[str, int]] = field(default_factory=list)
    provenance: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.keywords)

    def __contains__(self, word: str) -> bool:
        return word in self._set

    def __iter__(self):
        return iter(self.keywords)

    @property
    def _set(self) -> frozenset[str]:
        return frozenset(self.keywords)

    def save(self, path) -> None:
        lines = [f"# {p}" for p in self.provenance] + self.keywords
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "KeywordList":
        keywords, provenance = [], []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                provenance.append(line[1:].strip())
            else:
                keywords.append(line)
        return cls(keywords, provenance=provenance)


def top_k_frequency(captions: Iterable[str], k: int, stoplist: Iterable[str] = DEFAULT_STOPLIST) -> tuple[list[str], Counter]:
    """Top-k non-stopword tokens by count; ties resolved alphabetically."""
    stop = set(stoplist)
    counts = Counter(w for c in captions for w in normalize_text(c) if w not in stop)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [w for w, _ in ranked[:k]], counts


def compute_keywords(corpora: Sequence[Sequence[str]], k: int, stoplist: Iterable[str] = DEFAULT_STOPLIST,
                     names: Sequence[str] | None = None) -> KeywordList:
    """Per-corpus top-k keywords, merged in first-seen order without duplicates."""
    if k < 1:
        raise CorpusError("k must be >= 1")
    if not corpora:
        raise CorpusError("no corpora given")
    stop = frozenset(stoplist)
    names = list(names) if names is not None else [f"corpus{i}" for i in range(len(corpora))]
    merged: list[str] = []
    seen: set[str] = set()
    source_counts = []
    provenance = [f"k={k} stoplist_size={len(stop)}"]
    for name, captions in zip(names, corpora):
        captions = list(captions)
        if not captions:
            raise CorpusError(f"corpus {name!r} is empty")
        top, counts = top_k_frequency(captions, k, stop)
        source_counts.append({w: counts[w] for w in top})
        provenance.append(f"{name}: {len(captions)} captions, {len(counts)} distinct, took {len(top)}")
        for w in top:
            if w not in seen:
                seen.add(w)
                merged.append(w)
    provenance.append(f"merged: {len(merged)} keywords")
    return KeywordList(merged, source_counts, provenance)


def load_stoplist(path) -> frozenset[str]:
    words = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.extend(normalize_text(line))
    return frozenset(words)


# masking ---------------------------------------------------------------------

@dataclass
class MaskedSequence:
    ids: np.ndarray
    masked_positions: np.ndarray
    masked_targets: np.ndarray

    @property
    def n_masked(self) -> int:
        return int(self.masked_positions.size)

    def unmask(self) -> np.ndarray:
        out = self.ids.copy()
        out[self.masked_positions] = self.masked_targets
        return out


def keyword_ids(keywords: KeywordList, vocab: Vocabulary) -> frozenset[int]:
    return frozenset(vocab.token_to_id[w] for w in keywords if w in vocab)


def mask_keywords(tokens: np.ndarray, keywords: KeywordList | Iterable[str], vocab: Vocabulary,
                  kw_ids: frozenset[int] | None = None) -> MaskedSequence:
    """Replace every keyword token with [MASK], recording the originals."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if kw_ids is None:
        kw_ids = frozenset(vocab.token_to_id[w] for w in keywords if w in vocab) - vocab.special_ids
    hit = np.fromiter((int(t) in kw_ids for t in tokens), dtype=bool, count=tokens.size)
    positions = np.flatnonzero(hit)
    ids = tokens.copy()
    ids[positions] = vocab.mask_id
    return MaskedSequence(ids, positions.astype(np.int64), tokens[positions].copy())


# corpora ---------------------------------------------------------------------

FEATURE_MAGIC = b"EBKF1"
_U64 = struct.Struct("<Q")


def write_features(path, patches: np.ndarray) -> None:
    arr = np.ascontiguousarray(patches, dtype="<f8")
    if arr.ndim != 2:
        raise CorpusError("patch features must be (N, d)")
    Path(path).write_bytes(FEATURE_MAGIC + _U64.pack(arr.shape[0]) + _U64.pack(arr.shape[1]) + arr.tobytes())


def read_features(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:5] != FEATURE_MAGIC:
        raise CorpusError(f"{path}: not an EBKF1 feature file")
    n, d = _U64.unpack_from(buf, 5)[0], _U64.unpack_from(buf, 13)[0]
    if len(buf) != 21 + 8 * n * d:
        raise CorpusError(f"{path}: size does not match N={n}, d={d}")
    return np.frombuffer(buf, dtype="<f8", offset=21).reshape(n, d).astype(np.float64)


@dataclass
class CaptionedSample:
    sample_id: str
    image_source: str
    captions: list[str]
    class_label: str | None = None
    features: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.captions:
            raise CorpusError(f"{self.sample_id}: needs at least one caption")
        if any(not c.strip() for c in self.captions):
            raise CorpusError(f"{self.sample_id}: empty caption")


@dataclass
class Corpus:
    samples: list[CaptionedSample]
    name: str = "corpus"

    def __post_init__(self):
        ids = [s.sample_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise CorpusError("duplicate sample_id")

    def __len__(self) -> int:
        return len(self.samples)

    def captions(self) -> list[str]:
        return [c for s in self.samples for c in s.captions]

    def pairs(self) -> list[tuple[int, int]]:
        """(sample index, caption index) for every image-caption pair, in a stable order."""
        return [(i, j) for i, s in enumerate(self.samples) for j in range(len(s.captions))]

    def patches(self) -> np.ndarray:
        return np.stack([s.features for s in self.samples])

    def save(self, directory, split: str) -> Path:
        directory = Path(directory)
        (directory / "features").mkdir(parents=True, exist_ok=True)
        lines = []
        for s in self.samples:
            rel = f"features/{s.sample_id}.ebkf"
            write_features(directory / rel, s.features)
            rec = {"sample_id": s.sample_id, "captions": s.captions, "features": rel}
            if s.class_label is not None:
                rec["class"] = s.class_label
            lines.append(json.dumps(rec, sort_keys=True))
        path = directory / f"{split}.jsonl"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, directory, split: str) -> "Corpus":
        directory = Path(directory)
        path = directory / f"{split}.jsonl"
        if not path.exists():
            raise CorpusError(f"no split file {path}")
        samples = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            samples.append(CaptionedSample(rec["sample_id"], rec["features"], list(rec["captions"]),
                                           rec.get("class"), read_features(directory / rec["features"])))
        if not samples:
            raise CorpusError(f"split {split!r} is empty")
        return cls(samples, name=f"{directory.name}/{split}")


# synthetic benchmark ---------------------------------------------------------

CLASS_WORDS = ("airport", "beach", "bridge", "desert", "farmland", "forest", "harbor", "meadow",
               "mountain", "parking", "playground", "pond", "railway", "river", "stadium", "viaduct")
ATTRIBUTE_WORDS = (
    ("red", "green", "white", "gray", "brown", "yellow"),
    ("dense", "sparse", "curved", "straight", "large", "small"),
    ("northern", "southern", "eastern", "western", "central", "coastal"),
)
FILLER_WORDS = ("a", "the", "of", "in", "with", "there", "is", "are", "some", "many", "near")


@dataclass
class SynthConfig:
    n_classes: int = 8
    train_per_class: int = 64
    test_per_class: int = 16
    n_patches: int = 16
    feature_dim: int = 16
    n_attribute_slots: int = 2
    values_per_slot: int = 4
    patches_per_attribute: int = 4
    class_scale: float = 1.0
    attribute_scale: float = 1.0
    patch_noise: float = 0.3
    corruption_rate: float = 0.1
    captions_per_sample: int = 1
    test_captions_per_sample: int = 1
    filler_words: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise CorpusError("need at least two classes")
        if self.n_classes > len(CLASS_WORDS):
            raise CorpusError(f"at most {len(CLASS_WORDS)} classes supported")
        if not 0.0 <= self.corruption_rate < 1.0:
            raise CorpusError("corruption_rate must lie in [0, 1)")
        if not 0 <= self.n_attribute_slots <= len(ATTRIBUTE_WORDS):
            raise CorpusError(f"n_attribute_slots must lie in [0, {len(ATTRIBUTE_WORDS)}]")
        if not 1 <= self.values_per_slot <= len(ATTRIBUTE_WORDS[0]):
            raise CorpusError("values_per_slot out of range")
        if self.n_attribute_slots * self.patches_per_attribute > self.n_patches:
            raise CorpusError("attribute patches exceed n_patches")


@dataclass
class SyntheticCorpus:
    train: Corpus
    test: Corpus
    manifest: dict

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.train.save(directory, "train")
        self.test.save(directory, "test")
        (directory / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n",
                                                 encoding="utf-8")


def _caption(rng: np.random.Generator, cls: int, attrs: Sequence[int], cfg: SynthConfig) -> str:
    words = [CLASS_WORDS[cls]] + [ATTRIBUTE_WORDS[s][v] for s, v in enumerate(attrs)]
    content = [words[0]] + list(rng.permutation(words[1:])) if len(words) > 1 else words
    filler = list(rng.choice(FILLER_WORDS, size=cfg.filler_words))
    out = []
    for w in content:
        if filler and rng.random() < 0.5:
            out.append(filler.pop())
        out.append(w)
    return " ".join(out + filler)


def generate_synthetic(cfg: SynthConfig) -> SyntheticCorpus:
    """Build train/test splits; only the train split carries corrupted pairs."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d = cfg.feature_dim
    class_protos = rng.normal(size=(cfg.n_classes, d)) * cfg.class_scale / np.sqrt(d) * 2.0
    attr_protos = rng.normal(size=(cfg.n_attribute_slots, cfg.values_per_slot, d)) * cfg.attribute_scale / np.sqrt(d) * 2.0

    def make_split(per_class: int, n_caps: int, prefix: str):
        samples, meta = [], []
        for c in range(cfg.n_classes):
            for k in range(per_class):
                attrs = [int(rng.integers(cfg.values_per_slot)) for _ in range(cfg.n_attribute_slots)]
                patches = np.tile(class_protos[c], (cfg.n_patches, 1))
                slots = rng.permutation(cfg.n_patches)
                for s, v in enumerate(attrs):
                    idx = slots[s * cfg.patches_per_attribute:(s + 1) * cfg.patches_per_attribute]
                    patches[idx] += attr_protos[s, v]
                patches += rng.normal(scale=cfg.patch_noise, size=patches.shape)
                caps = [_caption(rng, c, attrs, cfg) for _ in range(n_caps)]
                sid = f"{prefix}{c:02d}{k:04d}"
                samples.append(CaptionedSample(sid, f"synthetic:class={c};attrs={','.join(map(str, attrs))}",
                                               caps, CLASS_WORDS[c], patches))
                meta.append((c, attrs))
        return samples, meta

    train_samples, train_meta = make_split(cfg.train_per_class, cfg.captions_per_sample, "tr")
    test_samples, _ = make_split(cfg.test_per_class, cfg.test_captions_per_sample, "te")

    n_corrupt = int(round(cfg.corruption_rate * len(train_samples)))
    chosen = sorted(int(i) for i in rng.choice(len(train_samples), size=n_corrupt, replace=False))
    corrupted = []
    for i in chosen:
        img_cls = train_meta[i][0]
        cap_cls = int((img_cls + rng.integers(1, cfg.n_classes)) % cfg.n_classes)
        cap_attrs = [int(rng.integers(cfg.values_per_slot)) for _ in range(cfg.n_attribute_slots)]
        s = train_samples[i]
        s.captions = [_caption(rng, cap_cls, cap_attrs, cfg) for _ in s.captions]
        corrupted.append({"sample_id": s.sample_id, "image_class": CLASS_WORDS[img_cls],
                          "caption_class": CLASS_WORDS[cap_cls]})

    manifest = {
        "config": asdict(cfg),
        "n_train": len(train_samples),
        "n_test": len(test_samples),
        "corrupted_count": len(corrupted),
        "corrupted": corrupted,
    }
    return SyntheticCorpus(Corpus(train_samples, "synthetic/train"), Corpus(test_samples, "synthetic/test"), manifest)


def caption_class(caption: str) -> str | None:
    """The synthetic class word a caption names, if any."""
    words = set(normalize_text(caption))
    hits = [w for w in CLASS_WORDS if w in words]
    return hits[0] if hits else None
