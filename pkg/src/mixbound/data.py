"""Mixed-text records, word-level tokenization, synthetic corpora and statistics.

Boundary convention: ``k`` is the number of leading human-written words, i.e.
the 0-based index of the first machine word.  Label 0 = human, 1 = machine.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, GLOBAL = "<pad>", "<unk>", "<global>"
RESERVED = (PAD, UNK, GLOBAL)

_WS = re.compile(r"\s+")


class DataError(ValueError):
    """Base class for data validation failures."""


class ValidationError(DataError):
    pass


class SchemaError(DataError):
    pass


class ParseError(DataError):
    pass


class ConfigError(DataError):
    pass


def split_words(text: str) -> list[str]:
    """Split on runs of whitespace, dropping empty pieces."""
    return [w for w in _WS.split(text) if w]


@dataclass(frozen=True)
class MixedTextRecord:
    id: str
    text: str
    k: int

    @property
    def words(self) -> list[str]:
        return split_words(self.text)

    @property
    def word_count(self) -> int:
        return len(self.words)

    def validate(self, strict: bool = True) -> None:
        n = self.word_count
        if strict:
            if n < 2:
                raise ValidationError(f"record {self.id!r}: strict mode needs >= 2 words, got {n}")
            if not 1 <= self.k <= n - 1:
                raise ValidationError(
                    f"record {self.id!r}: boundary {self.k} outside [1, {n - 1}] (strict mode)"
                )
        elif not 0 <= self.k <= n:
            raise ValidationError(f"record {self.id!r}: boundary {self.k} outside [0, {n}]")


@dataclass(frozen=True)
class LabeledDoc:
    """A single-author document for classification pretraining (0 human, 1 machine)."""

    id: str
    text: str
    label: int


@dataclass
class TokenizedExample:
    token_ids: np.ndarray
    token_to_word: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    id: str = ""

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def n_words(self) -> int:
        m = self.token_to_word[self.mask.astype(bool)]
        return int(m.max()) + 1 if m.size else 0

    def padded(self, length: int, pad_id: int = 0) -> TokenizedExample:
        extra = length - len(self)
        if extra < 0:
            raise ValueError(f"cannot pad length {len(self)} down to {length}")
        last = self.token_to_word[-1] if len(self) else 0

        def ext(a, v):
            return np.concatenate([a, np.full(extra, v, dtype=a.dtype)])

        return TokenizedExample(
            ext(self.token_ids, pad_id),
            ext(self.token_to_word, last),
            ext(self.labels, 1),
            ext(self.mask, 0),
            self.id,
        )


class Vocab:
    """Dense token ids with PAD=0, UNK=1, GLOBAL=2 reserved."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token in self.stoi:
            return self.stoi[token]
        self.stoi[token] = len(self.itos)
        self.itos.append(token)
        return self.stoi[token]

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def global_id(self) -> int:
        return 2

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, words: Sequence[str]) -> np.ndarray:
        unk = self.unk_id
        return np.array([self.stoi.get(w, unk) if w not in RESERVED else unk for w in words], dtype=np.int64)

    @classmethod
    def build(cls, texts: Iterable[str], min_freq: int = 1) -> Vocab:
        counts: Counter[str] = Counter()
        order: list[str] = []
        for text in texts:
            for w in split_words(text):
                if w not in counts:
                    order.append(w)
                counts[w] += 1
        return cls(w for w in sorted(order) if counts[w] >= min_freq and w not in RESERVED)

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> Vocab:
        if tuple(itos[: len(RESERVED)]) != RESERVED:
            raise SchemaError("vocab must start with the reserved tokens")
        return cls(itos[len(RESERVED):])


def label_tokens(record: MixedTextRecord, vocab: Vocab, strict: bool = True) -> TokenizedExample:
    """One token per word; ``labels[i] = 0`` iff token ``i`` lies before the boundary."""
    record.validate(strict)
    words = record.words
    n = len(words)
    t2w = np.arange(n, dtype=np.int64)
    return TokenizedExample(
        token_ids=vocab.encode(words),
        token_to_word=t2w,
        labels=(t2w >= record.k).astype(np.int64),
        mask=np.ones(n, dtype=np.int64),
        id=record.id,
    )


def tokenize_text(rid: str, text: str, vocab: Vocab) -> TokenizedExample:
    """Unlabeled tokenization for inference; every label is 0."""
    words = split_words(text)
    n = len(words)
    return TokenizedExample(
        vocab.encode(words), np.arange(n, dtype=np.int64), np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64), rid
    )


def load_texts_jsonl(path: str | Path) -> list[tuple[str, str]]:
    """``(id, text)`` pairs; a ``label`` field, if present, is ignored."""
    out = []
    for lineno, obj in _read_jsonl(path):
        if "id" not in obj or "text" not in obj:
            raise SchemaError(f"{path}:{lineno}: missing field(s) id/text")
        out.append((str(obj["id"]), str(obj["text"])))
    return out


def tokenize_doc(doc: LabeledDoc, vocab: Vocab) -> TokenizedExample:
    words = split_words(doc.text)
    n = len(words)
    return TokenizedExample(
        token_ids=vocab.encode(words),
        token_to_word=np.arange(n, dtype=np.int64),
        labels=np.full(n, doc.label, dtype=np.int64),
        mask=np.ones(n, dtype=np.int64),
        id=doc.id,
    )


# ---------------------------------------------------------------------------
# JSONL


def _read_jsonl(path: str | Path):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise ParseError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def _fields(obj: dict, path, lineno: int) -> tuple[str, str, int]:
    missing = [k for k in ("id", "text", "label") if k not in obj]
    if missing:
        raise SchemaError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
    label = obj["label"]
    if isinstance(label, bool) or not isinstance(label, int):
        raise SchemaError(f"{path}:{lineno}: label must be an integer, got {label!r}")
    if not isinstance(obj["text"], str):
        raise SchemaError(f"{path}:{lineno}: text must be a string")
    return str(obj["id"]), obj["text"], label


def load_jsonl(path: str | Path, strict: bool = True, label_offset: int = 0) -> list[MixedTextRecord]:
    """Read boundary records ``{"id", "text", "label"}``.

    ``label_offset`` is added to every stored label, for datasets whose index
    convention differs from ``k = number of human words``.
    """
    out = []
    for lineno, obj in _read_jsonl(path):
        rid, text, label = _fields(obj, path, lineno)
        rec = MixedTextRecord(rid, text, label + label_offset)
        try:
            rec.validate(strict)
        except ValidationError as e:
            raise ValidationError(f"{path}:{lineno}: {e}") from None
        out.append(rec)
    return out


def save_jsonl(corpus: Iterable[MixedTextRecord | LabeledDoc], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in corpus:
            label = r.k if isinstance(r, MixedTextRecord) else r.label
            f.write(json.dumps({"id": r.id, "text": r.text, "label": label}, ensure_ascii=False) + "\n")


def load_docs_jsonl(path: str | Path) -> list[LabeledDoc]:
    out = []
    for lineno, obj in _read_jsonl(path):
        rid, text, label = _fields(obj, path, lineno)
        if label not in (0, 1):
            raise SchemaError(f"{path}:{lineno}: classification label must be 0 or 1, got {label}")
        out.append(LabeledDoc(rid, text, label))
    return out


# ---------------------------------------------------------------------------
# synthetic authors


@dataclass
class SynthConfig:
    """Two bigram Markov "authors"; the ground-truth switch is exact by construction.

    ``overlap`` is the fraction of the machine vocabulary that is shared with
    the human vocabulary.  Boundary bounds are fractions of the record length,
    always clipped into ``[1, n - 1]``.
    """

    human_vocab: int = 60
    machine_vocab: int = 60
    overlap: float = 0.5
    human_temperature: float = 0.5
    machine_temperature: float = 0.5
    min_length: int = 20
    max_length: int = 60
    boundary_min_frac: float = 0.1
    boundary_max_frac: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError(f"overlap must lie in [0, 1], got {self.overlap}")
        if self.min_length < 2:
            raise ConfigError(f"min_length must be >= 2, got {self.min_length}")
        if self.max_length < self.min_length:
            raise ConfigError("max_length must be >= min_length")
        if self.human_vocab < 1 or self.machine_vocab < 1:
            raise ConfigError("vocabulary sizes must be positive")
        if self.human_temperature <= 0 or self.machine_temperature <= 0:
            raise ConfigError("temperatures must be positive")
        if not 0.0 <= self.boundary_min_frac <= self.boundary_max_frac <= 1.0:
            raise ConfigError("need 0 <= boundary_min_frac <= boundary_max_frac <= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BigramAuthor:
    words: list[str]
    start: np.ndarray
    trans: np.ndarray

    @classmethod
    def random(cls, words: list[str], temperature: float, rng: np.random.Generator) -> BigramAuthor:
        v = len(words)
        logits = rng.standard_normal((v + 1, v)) / temperature
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        return cls(words, p[0], p[1:])

    def sample(self, n: int, rng: np.random.Generator) -> list[str]:
        out = []
        cur = rng.choice(len(self.words), p=self.start)
        for _ in range(n):
            out.append(self.words[cur])
            cur = rng.choice(len(self.words), p=self.trans[cur])
        return out


@dataclass
class SynthAuthors:
    human: BigramAuthor
    machine: BigramAuthor
    cfg: SynthConfig = field(repr=False)

    @classmethod
    def from_config(cls, cfg: SynthConfig) -> SynthAuthors:
        cfg.validate()
        rng = np.random.default_rng([cfg.seed, 0])
        shared = min(int(round(cfg.overlap * cfg.machine_vocab)), cfg.human_vocab)
        human_words = [f"h{i}" for i in range(cfg.human_vocab)]
        machine_words = human_words[:shared] + [f"m{i}" for i in range(cfg.machine_vocab - shared)]
        return cls(
            BigramAuthor.random(human_words, cfg.human_temperature, rng),
            BigramAuthor.random(machine_words, cfg.machine_temperature, rng),
            cfg,
        )


def _rng(cfg: SynthConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stream])


def synth_generate(cfg: SynthConfig, n_records: int, stream: int = 1, prefix: str = "s") -> list[MixedTextRecord]:
    """Mixed records: human bigram prefix followed by a machine bigram suffix.

    ``stream`` separates independent draws (train/dev) from one config.
    """
    authors = SynthAuthors.from_config(cfg)
    rng = _rng(cfg, stream)
    out = []
    for i in range(n_records):
        n = int(rng.integers(cfg.min_length, cfg.max_length + 1))
        lo = max(1, math.floor(cfg.boundary_min_frac * n))
        hi = min(n - 1, math.ceil(cfg.boundary_max_frac * n))
        lo = min(lo, hi)
        k = int(rng.integers(lo, hi + 1))
        words = authors.human.sample(k, rng) + authors.machine.sample(n - k, rng)
        out.append(MixedTextRecord(f"{prefix}{i}", " ".join(words), k))
    return out


def synth_documents(cfg: SynthConfig, n_docs: int, stream: int = 3, prefix: str = "d") -> list[LabeledDoc]:
    """Single-author documents, alternating human/machine then shuffled."""
    authors = SynthAuthors.from_config(cfg)
    rng = _rng(cfg, stream)
    docs = []
    for i in range(n_docs):
        label = i % 2
        n = int(rng.integers(max(1, cfg.min_length // 2), max(2, cfg.max_length // 2) + 1))
        author = authors.machine if label else authors.human
        docs.append(LabeledDoc(f"{prefix}{i}", " ".join(author.sample(n, rng)), label))
    order = rng.permutation(len(docs))
    return [docs[j] for j in order]


# ---------------------------------------------------------------------------
# pretraining corpora


def build_pretrain1(
    human_docs: Sequence[str], machine_docs: Sequence[str], seed: int, prefix: str = "p"
) -> list[MixedTextRecord]:
    """Concatenate one human and one machine document per record.

    Pairing is a seeded random matching; when the pools differ in size each
    output uses a distinct document from the smaller pool.
    """
    if not human_docs or not machine_docs:
        raise ConfigError("build_pretrain1 needs non-empty human and machine pools")
    rng = np.random.default_rng(seed)
    m = min(len(human_docs), len(machine_docs))
    hi = rng.permutation(len(human_docs))[:m]
    mi = rng.permutation(len(machine_docs))[:m]
    out = []
    for j, (a, b) in enumerate(zip(hi, mi)):
        hw, mw = split_words(human_docs[a]), split_words(machine_docs[b])
        if not hw or not mw:
            raise ConfigError("build_pretrain1: empty document in pool")
        out.append(MixedTextRecord(f"{prefix}{j}", " ".join(hw) + " " + " ".join(mw), len(hw)))
    return out


_LABELS = {0: 0, 1: 1, "human": 0, "machine": 1}


def build_pretrain2(docs: Iterable[LabeledDoc | tuple[str, str, object]], vocab: Vocab) -> list[TokenizedExample]:
    """Tokenize documents with one document-level label each (0 human, 1 machine)."""
    out = []
    for d in docs:
        rid, text, lab = (d.id, d.text, d.label) if isinstance(d, LabeledDoc) else d
        if isinstance(lab, bool) or lab not in _LABELS:
            raise SchemaError(f"document {rid!r}: unknown label {lab!r}")
        out.append(tokenize_doc(LabeledDoc(str(rid), text, _LABELS[lab]), vocab))
    return out


def author_pools(docs: Sequence[LabeledDoc]) -> tuple[list[str], list[str]]:
    """Split labeled documents into (human texts, machine texts)."""
    return [d.text for d in docs if d.label == 0], [d.text for d in docs if d.label == 1]


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class CorpusStats:
    count: int
    average_length: float
    max_length: int
    average_index: float

    def table(self) -> str:
        rows = [
            ("Number", str(self.count)),
            ("Average Length", f"{round(self.average_length)}"),
            ("Max Length", str(self.max_length)),
            ("Average Index", f"{round(self.average_index)}"),
        ]
        w = max(len(r[0]) for r in rows)
        return "\n".join(f"{a:<{w}}  {b}" for a, b in rows)


def stats(corpus: Sequence[MixedTextRecord]) -> CorpusStats:
    if not corpus:
        raise ValueError("stats: empty corpus")
    lengths = [r.word_count for r in corpus]
    return CorpusStats(
        count=len(corpus),
        average_length=sum(lengths) / len(lengths),
        max_length=max(lengths),
        average_index=sum(r.k for r in corpus) / len(corpus),
    )
