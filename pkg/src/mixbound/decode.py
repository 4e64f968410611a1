"""Turn per-token machine probabilities into a boundary word index, and ensemble logits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CLAMP = 1e-7
# Scores within this (relative) distance of the best are treated as ties,
# so that the prefix-sum path and a direct recomputation agree on ties.
TIE_TOL = 1e-9

STRATEGIES = ("map", "first-switch")


class EnsembleError(ValueError):
    pass


@dataclass
class BoundaryPrediction:
    id: str
    probs: np.ndarray = field(repr=False)
    token_index: int
    k: int
    strategy: str


def decode_first_switch(probs: Sequence[float]) -> int:
    """Smallest ``i`` with ``p_i > 0.5``, or ``n`` if there is none."""
    p = np.asarray(probs, dtype=np.float64)
    hits = np.flatnonzero(p > 0.5)
    return int(hits[0]) if hits.size else int(p.size)


def allowed_range(n: int, strict: bool) -> tuple[int, int]:
    if strict and n >= 2:
        return 1, n - 1
    return 0, n


def changepoint_scores(probs: Sequence[float]) -> np.ndarray:
    """Score of every split ``k = 0..n`` relative to ``k = 0``.

    score(k) = sum_{i<k} log(1-p_i) + sum_{i>=k} log p_i, minus the all-machine
    score, which is the running sum of log((1-p_i)/p_i).
    """
    p = np.clip(np.asarray(probs, dtype=np.float64), CLAMP, 1.0 - CLAMP)
    ratio = np.log1p(-p) - np.log(p)
    return np.concatenate([[0.0], np.cumsum(ratio)])


def argmax_smallest(scores: np.ndarray, lo: int, hi: int) -> int:
    """Smallest index in ``[lo, hi]`` whose score ties the maximum (within TIE_TOL)."""
    window = scores[lo:hi + 1]
    best = window.max()
    tol = TIE_TOL * max(1.0, abs(best))
    return lo + int(np.flatnonzero(window >= best - tol)[0])


def decode_map_changepoint(probs: Sequence[float], strict: bool = False) -> int:
    """Most likely single 0->1 switch under independent per-token probabilities."""
    p = np.asarray(probs, dtype=np.float64)
    lo, hi = allowed_range(p.size, strict)
    return argmax_smallest(changepoint_scores(p), lo, hi)


def token_to_word_boundary(token_index: int, token_to_word: Sequence[int], strict: bool = True) -> int:
    """Word index of the boundary token; an index past the end maps to the word count."""
    t2w = np.asarray(token_to_word, dtype=np.int64)
    n_words = int(t2w.max()) + 1 if t2w.size else 0
    k = int(t2w[token_index]) if token_index < t2w.size else n_words
    if strict and n_words >= 2:
        k = min(max(k, 1), n_words - 1)
    return k


def decode(probs: Sequence[float], token_to_word: Sequence[int], strategy: str = "map", strict: bool = True) -> tuple[int, int]:
    """Return ``(token index, word index)`` for one record."""
    if strategy == "map":
        t = decode_map_changepoint(probs, strict=strict)
    elif strategy == "first-switch":
        t = decode_first_switch(probs)
    else:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    return t, token_to_word_boundary(t, token_to_word, strict)


def ensemble_logits(members: Sequence[np.ndarray], ids: Sequence[str] | None = None, average: str = "logits") -> np.ndarray:
    """Mean of member ``n x 2`` logits (or of their softmax rows with ``average="probs"``).

    ``ids`` optionally carries the record id each member scored; all must match.
    """
    if not members:
        raise EnsembleError("ensemble needs at least one member")
    ref = np.asarray(members[0])
    for j, m in enumerate(members):
        if np.shape(m) != ref.shape:
            raise EnsembleError(f"member {j} has shape {np.shape(m)}, expected {ref.shape}")
        if ids is not None and ids[j] != ids[0]:
            raise EnsembleError(f"member {j} scored record {ids[j]!r}, expected {ids[0]!r}")
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in members])
    if average == "logits":
        return stack.mean(axis=0)
    if average == "probs":
        z = stack - stack.max(axis=2, keepdims=True)
        e = np.exp(z)
        return np.log((e / e.sum(axis=2, keepdims=True)).mean(axis=0))
    raise EnsembleError(f"unknown average mode {average!r}")


def write_predictions(preds: Iterable[BoundaryPrediction], path: str | Path, meta: dict | None = None) -> None:
    """JSONL ``{"id", "label"}`` lines; ``meta`` goes to a ``<path>.meta.json`` sidecar."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        for p in preds:
            f.write(json.dumps({"id": p.id, "label": int(p.k)}) + "\n")
    if meta is not None:
        with open(str(path) + ".meta.json", "w", encoding="utf-8") as f:
            json.dump(meta, f, sort_keys=True, indent=2)
            f.write("\n")


def read_predictions(path: str | Path) -> dict[str, int]:
    out: dict[str, int] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rid, label = str(obj["id"]), obj["label"]
            except (json.JSONDecodeError, KeyError, TypeError):
                raise ValueError(f"{path}:{lineno}: expected {{\"id\", \"label\"}}") from None
            if rid in out:
                raise ValueError(f"{path}:{lineno}: duplicate id {rid!r}")
            out[rid] = int(label)
    return out
