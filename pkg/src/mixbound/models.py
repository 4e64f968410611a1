"""Toy long-context encoder, recurrent heads, a two-label linear-chain CRF and a pooled head.

The encoder follows the sliding-window + global-token attention pattern:
``n_global`` global positions are prepended; ordinary tokens attend to
neighbours within ``window`` on each side and to all global positions, while
global positions attend to (and are attended by) everything.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .data import TokenizedExample
from .tensor import Tensor

HEADS = ("linear", "lstm", "bilstm", "crf")


class ModelError(ValueError):
    pass


class TruncationError(ModelError):
    """Input longer than the encoder's positional capacity."""


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    window: int = 8
    n_global: int = 1
    max_len: int = 128
    dropout: float = 0.1
    ffn_dim: int = 128

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.window < 1 or self.n_global < 1:
            raise ModelError("window and n_global must be >= 1")
        if self.vocab_size < 3 or self.max_len < 1 or self.n_layers < 0:
            raise ModelError("invalid vocab_size / max_len / n_layers")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def _param(rng: np.random.Generator, shape, scale: float | None = None) -> Tensor:
    if scale is None:
        scale = 1.0 / math.sqrt(shape[0])
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def attention_mask(n: int, n_global: int, window: int, key_mask: np.ndarray | None = None) -> np.ndarray:
    """Boolean ``(g+n) x (g+n)`` admissibility matrix; padded keys are excluded everywhere."""
    size = n_global + n
    pos = np.arange(size)
    allowed = np.abs(pos[:, None] - pos[None, :]) <= window
    allowed[:n_global, :] = True
    allowed[:, :n_global] = True
    if key_mask is not None:
        keep = np.concatenate([np.ones(n_global, dtype=bool), np.asarray(key_mask, dtype=bool)])
        allowed &= keep[None, :]
    return allowed


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n, d = x.shape
    col = T.constant(np.full((d, 1), 1.0 / d))
    row = T.constant(np.ones((1, d)))
    mu = T.matmul(T.matmul(x, col), row)
    xc = x - mu
    var = T.matmul(xc * xc, col)
    inv = T.matmul(T.pow_(var + eps, -0.5), row)
    return xc * inv * T.broadcast_rows(gain, n) + T.broadcast_rows(bias, n)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.matmul(x, w) + T.broadcast_rows(b, x.shape[0])


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * T.constant(keep)


class Encoder:
    """Parameters live in ``self.params`` keyed ``encoder.*`` (insertion order is stable)."""

    def __init__(self, cfg: EncoderConfig, params: dict[str, Tensor]):
        cfg.validate()
        self.cfg = cfg
        self.params = params
        self.trace: list[np.ndarray] | None = None  # set to [] to collect attention maps

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator) -> Encoder:
        cfg.validate()
        d, f = cfg.d_model, cfg.ffn_dim
        p: dict[str, Tensor] = {
            "encoder.tok_emb": _param(rng, (cfg.vocab_size, d), 0.1),
            "encoder.pos_emb": _param(rng, (cfg.max_len + cfg.n_global, d), 0.1),
        }
        for i in range(cfg.n_layers):
            pre = f"encoder.layers.{i}."
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + name] = _param(rng, (d, d))
            p[pre + "ln1.g"] = _ones((1, d))
            p[pre + "ln1.b"] = _zeros((1, d))
            p[pre + "ffn.w1"] = _param(rng, (d, f))
            p[pre + "ffn.b1"] = _zeros((1, f))
            p[pre + "ffn.w2"] = _param(rng, (f, d))
            p[pre + "ffn.b2"] = _zeros((1, d))
            p[pre + "ln2.g"] = _ones((1, d))
            p[pre + "ln2.b"] = _zeros((1, d))
        return cls(cfg, p)

    def forward(
        self,
        token_ids: np.ndarray,
        key_mask: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Return ``(token states n x d, global states g x d)``.

        ``rng`` enables dropout (training); pass ``None`` for a deterministic pass.
        """
        cfg = self.cfg
        p = self.params
        n, g = len(token_ids), cfg.n_global
        if n > cfg.max_len:
            raise TruncationError(f"sequence of {n} tokens exceeds max_len {cfg.max_len}")
        ids = np.concatenate([np.full(g, 2, dtype=np.int64), np.asarray(token_ids, dtype=np.int64)])
        x = T.gather_rows(p["encoder.tok_emb"], ids) + T.gather_rows(p["encoder.pos_emb"], np.arange(g + n))
        x = _dropout(x, cfg.dropout, rng)
        allowed = attention_mask(n, g, cfg.window, key_mask)
        for i in range(cfg.n_layers):
            x = self._layer(x, f"encoder.layers.{i}.", allowed)
            x = _dropout(x, cfg.dropout, rng)
        return T.slice_rows(x, g, g + n), T.slice_rows(x, 0, g)

    def _layer(self, x: Tensor, pre: str, allowed: np.ndarray) -> Tensor:
        p = self.params
        d, h = self.cfg.d_model, self.cfg.n_heads
        dh = d // h
        q = T.matmul(x, p[pre + "wq"]) * (1.0 / math.sqrt(dh))
        k = T.matmul(x, p[pre + "wk"])
        v = T.matmul(x, p[pre + "wv"])
        heads = []
        for j in range(h):
            a, b = j * dh, (j + 1) * dh
            scores = T.matmul(T.slice_cols(q, a, b), T.transpose(T.slice_cols(k, a, b)))
            probs = T.row_softmax(scores, allowed)
            if self.trace is not None:
                self.trace.append(probs.data)
            heads.append(T.matmul(probs, T.slice_cols(v, a, b)))
        att = T.matmul(T.concat_cols(heads) if h > 1 else heads[0], p[pre + "wo"])
        x = layer_norm(x + att, p[pre + "ln1.g"], p[pre + "ln1.b"])
        ff = affine(T.relu(affine(x, p[pre + "ffn.w1"], p[pre + "ffn.b1"])), p[pre + "ffn.w2"], p[pre + "ffn.b2"])
        return layer_norm(x + ff, p[pre + "ln2.g"], p[pre + "ln2.b"])

    def encode(self, example: TokenizedExample) -> Tensor:
        return self.forward(example.token_ids, example.mask)[0]


# ---------------------------------------------------------------------------
# recurrent heads


def init_lstm(prefix: str, d_in: int, d_h: int, rng: np.random.Generator) -> dict[str, Tensor]:
    b = np.zeros((1, 4 * d_h))
    b[0, d_h:2 * d_h] = 1.0  # forget gate starts open
    return {
        prefix + "wx": _param(rng, (d_in, 4 * d_h)),
        prefix + "wh": _param(rng, (d_h, 4 * d_h)),
        prefix + "b": Tensor(b, requires_grad=True),
    }


def lstm_run(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """Gate order (input, forget, candidate, output); zero initial state."""
    n = x.shape[0]
    d_h = wh.shape[0]
    xw = affine(x, wx, b)
    c: Tensor | None = None
    h: Tensor | None = None
    outs: list[Tensor] = [None] * n  # type: ignore[list-item]
    steps = range(n - 1, -1, -1) if reverse else range(n)
    for t in steps:
        z = T.slice_rows(xw, t, t + 1)
        if h is not None:
            z = z + T.matmul(h, wh)
        sg = T.sigmoid(z)
        i_g = T.slice_cols(sg, 0, d_h)
        o_g = T.slice_cols(sg, 3 * d_h, 4 * d_h)
        cand = T.tanh(T.slice_cols(z, 2 * d_h, 3 * d_h))
        c = i_g * cand if c is None else T.slice_cols(sg, d_h, 2 * d_h) * c + i_g * cand
        h = o_g * T.tanh(c)
        outs[t] = h
    return T.concat_rows(outs)


def lstm_head(hidden: Tensor, params: dict[str, Tensor], prefix: str = "head.lstm.") -> Tensor:
    return lstm_run(hidden, params[prefix + "wx"], params[prefix + "wh"], params[prefix + "b"])


def bilstm_head(hidden: Tensor, params: dict[str, Tensor]) -> Tensor:
    fw = lstm_run(hidden, params["head.lstm_f.wx"], params["head.lstm_f.wh"], params["head.lstm_f.b"])
    bw = lstm_run(hidden, params["head.lstm_b.wx"], params["head.lstm_b.wh"], params["head.lstm_b.b"], reverse=True)
    return T.concat_cols([fw, bw])


def token_logits(features: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map to (human, machine) scores per token."""
    return affine(features, w, b)


# ---------------------------------------------------------------------------
# CRF


@dataclass
class CrfParams:
    transitions: np.ndarray  # [from, to]
    start: np.ndarray
    end: np.ndarray

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64).reshape(2, 2)
        self.start = np.asarray(self.start, dtype=np.float64).reshape(2)
        self.end = np.asarray(self.end, dtype=np.float64).reshape(2)
        if not all(np.all(np.isfinite(a)) for a in (self.transitions, self.start, self.end)):
            raise ModelError("CRF parameters must be finite")


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.exp(a - m).sum(axis=axis))


def crf_forward_backward(em: np.ndarray, trans: np.ndarray, start: np.ndarray, end: np.ndarray):
    """Log-space alpha/beta recursions; returns (logZ, alpha, beta)."""
    n, L = em.shape
    alpha = np.empty((n, L))
    beta = np.empty((n, L))
    alpha[0] = start + em[0]
    for t in range(1, n):
        alpha[t] = _lse(alpha[t - 1][:, None] + trans, 0) + em[t]
    beta[n - 1] = end
    for t in range(n - 2, -1, -1):
        beta[t] = _lse(trans + (em[t + 1] + beta[t + 1])[None, :], 1)
    log_z = float(_lse(alpha[n - 1] + end, 0))
    return log_z, alpha, beta


def crf_log_partition(emissions: Tensor, trans: Tensor, start: Tensor, end: Tensor) -> Tensor:
    """logZ via the forward algorithm; the backward rule uses exact marginals."""
    em = emissions.data
    tr = trans.data
    st = start.data.reshape(-1)
    en = end.data.reshape(-1)
    if em.ndim != 2 or em.shape[0] < 1:
        raise ModelError(f"CRF emissions must be n x L with n >= 1, got {em.shape}")
    log_z, alpha, beta = crf_forward_backward(em, tr, st, en)

    def bw(g):
        g = float(g)
        unary = np.exp(alpha + beta - log_z)
        pair = np.zeros_like(tr)
        for t in range(1, em.shape[0]):
            pair += np.exp(alpha[t - 1][:, None] + tr + (em[t] + beta[t])[None, :] - log_z)
        return (
            g * unary,
            g * pair,
            (g * unary[0]).reshape(start.shape),
            (g * unary[-1]).reshape(end.shape),
        )

    return T.make_op(np.asarray(log_z), (emissions, trans, start, end), bw, "crf_log_partition")


def crf_path_score(emissions: Tensor, labels: np.ndarray, trans: Tensor, start: Tensor, end: Tensor) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    n, L = emissions.shape
    onehot = np.zeros((n, L))
    onehot[np.arange(n), labels] = 1.0
    counts = np.zeros((L, L))
    np.add.at(counts, (labels[:-1], labels[1:]), 1.0)
    s0 = np.zeros(start.shape)
    s0.reshape(-1)[labels[0]] = 1.0
    e0 = np.zeros(end.shape)
    e0.reshape(-1)[labels[-1]] = 1.0
    return (
        T.sum_(emissions * T.constant(onehot))
        + T.sum_(trans * T.constant(counts))
        + T.sum_(start * T.constant(s0))
        + T.sum_(end * T.constant(e0))
    )


def crf_log_likelihood(
    emissions: Tensor, labels: np.ndarray, trans: Tensor, start: Tensor, end: Tensor
) -> Tensor:
    """log p(labels | emissions) = score(labels) - logZ."""
    return crf_path_score(emissions, labels, trans, start, end) - crf_log_partition(emissions, trans, start, end)


def crf_viterbi(emissions: np.ndarray, params: CrfParams) -> np.ndarray:
    """Best-scoring label path; every tie goes to the lower label (human)."""
    em = np.asarray(emissions, dtype=np.float64)
    n, L = em.shape
    score = params.start + em[0]
    back = np.zeros((n, L), dtype=np.int64)
    for t in range(1, n):
        cand = score[:, None] + params.transitions
        back[t] = np.argmax(cand, axis=0)
        score = cand[back[t], np.arange(L)] + em[t]
    path = np.empty(n, dtype=np.int64)
    path[-1] = int(np.argmax(score + params.end))
    for t in range(n - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def crf_marginals(emissions: np.ndarray, params: CrfParams) -> np.ndarray:
    log_z, alpha, beta = crf_forward_backward(np.asarray(emissions, dtype=np.float64), params.transitions, params.start, params.end)
    return np.exp(alpha + beta - log_z)


# ---------------------------------------------------------------------------
# full models


def init_head(head: str, d: int, d_h: int, rng: np.random.Generator) -> dict[str, Tensor]:
    if head not in HEADS:
        raise ModelError(f"unknown head variant {head!r}; expected one of {HEADS}")
    p: dict[str, Tensor] = {}
    if head == "lstm":
        p.update(init_lstm("head.lstm.", d, d_h, rng))
        width = d_h
    elif head == "bilstm":
        p.update(init_lstm("head.lstm_f.", d, d_h, rng))
        p.update(init_lstm("head.lstm_b.", d, d_h, rng))
        width = 2 * d_h
    else:
        width = d
    p["head.out.w"] = _param(rng, (width, 2))
    p["head.out.b"] = _zeros((1, 2))
    if head == "crf":
        p["head.crf.trans"] = _zeros((2, 2))
        p["head.crf.start"] = _zeros((1, 2))
        p["head.crf.end"] = _zeros((1, 2))
    return p


def pooled_logit(globals_: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map of the first global position to one document logit."""
    return T.reshape(affine(T.slice_rows(globals_, 0, 1), w, b), ())


def _valid_length(mask: np.ndarray) -> int:
    m = np.asarray(mask, dtype=bool)
    L = int(m.sum())
    if not m[:L].all():
        raise ModelError("mask must be a suffix padding (ones then zeros)")
    return L


class TokenClassifier:
    """Encoder + one of the head variants ``linear | lstm | bilstm | crf``."""

    def __init__(self, encoder: Encoder, head: str, head_params: dict[str, Tensor], lstm_dim: int = 32):
        if head not in HEADS:
            raise ModelError(f"unknown head variant {head!r}; expected one of {HEADS}")
        self.encoder = encoder
        self.head = head
        self.head_params = head_params
        self.lstm_dim = lstm_dim

    @classmethod
    def init(cls, cfg: EncoderConfig, head: str = "linear", lstm_dim: int = 32, seed: int = 0) -> TokenClassifier:
        rng = np.random.default_rng([seed, 11])
        enc = Encoder.init(cfg, rng)
        return cls(enc, head, init_head(head, cfg.d_model, lstm_dim, np.random.default_rng([seed, 12])), lstm_dim)

    @property
    def cfg(self) -> EncoderConfig:
        return self.encoder.cfg

    def parameters(self) -> dict[str, Tensor]:
        return {**self.encoder.params, **self.head_params}

    @property
    def crf(self) -> CrfParams:
        p = self.head_params
        return CrfParams(p["head.crf.trans"].data, p["head.crf.start"].data, p["head.crf.end"].data)

    def features(self, hidden: Tensor) -> Tensor:
        if self.head == "lstm":
            return lstm_head(hidden, self.head_params)
        if self.head == "bilstm":
            return bilstm_head(hidden, self.head_params)
        return hidden

    def logits(self, example: TokenizedExample, rng: np.random.Generator | None = None) -> Tensor:
        """Per-token ``L x 2`` scores over the unpadded prefix of length L."""
        L = _valid_length(example.mask)
        hidden, _ = self.encoder.forward(example.token_ids, example.mask, rng)
        if L < len(example):
            hidden = T.slice_rows(hidden, 0, L)
        return token_logits(self.features(hidden), self.head_params["head.out.w"], self.head_params["head.out.b"])

    def crf_nll(self, logits: Tensor, labels: np.ndarray) -> Tensor:
        p = self.head_params
        return -crf_log_likelihood(logits, labels, p["head.crf.trans"], p["head.crf.start"], p["head.crf.end"])

    def machine_probs(self, logits: np.ndarray) -> np.ndarray:
        """Per-token machine probability; CRF heads use posterior marginals."""
        if self.head == "crf":
            return crf_marginals(logits, self.crf)[:, 1]
        z = logits[:, 1] - logits[:, 0]
        return 0.5 * (1.0 + np.tanh(0.5 * z))

    def predict_logits(self, example: TokenizedExample) -> np.ndarray:
        with T.no_grad():
            return self.logits(example).data


class DocumentClassifier:
    """Encoder + pooled head for document-level human/machine pretraining."""

    def __init__(self, encoder: Encoder, w: Tensor, b: Tensor):
        self.encoder = encoder
        self.w = w
        self.b = b

    @classmethod
    def init(cls, cfg: EncoderConfig, seed: int = 0) -> DocumentClassifier:
        enc = Encoder.init(cfg, np.random.default_rng([seed, 11]))
        rng = np.random.default_rng([seed, 13])
        return cls(enc, _param(rng, (cfg.d_model, 1)), _zeros((1, 1)))

    def parameters(self) -> dict[str, Tensor]:
        return {**self.encoder.params, "pooled.w": self.w, "pooled.b": self.b}

    def logit(self, example: TokenizedExample, rng: np.random.Generator | None = None) -> Tensor:
        _, glob = self.encoder.forward(example.token_ids, example.mask, rng)
        return pooled_logit(glob, self.w, self.b)


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


def encoder_from(params: dict[str, Tensor], cfg: EncoderConfig) -> Encoder:
    return Encoder(cfg, clone_params({k: v for k, v in params.items() if k.startswith("encoder.")}))


def count_params(params: Iterable[Tensor]) -> int:
    return sum(p.size for p in params)
