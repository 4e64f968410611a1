"""Adam training loop, pretrain/fine-tune schemes, prediction and MAE evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointFormatError
from .data import (
    LabeledDoc,
    MixedTextRecord,
    TokenizedExample,
    Vocab,
    author_pools,
    build_pretrain1,
    build_pretrain2,
    label_tokens,
    tokenize_text,
)
from .decode import BoundaryPrediction, decode, ensemble_logits, EnsembleError
from .losses import LossConfig, compute_loss, machine_probability, masked
from .models import (
    DocumentClassifier,
    EncoderConfig,
    Encoder,
    TokenClassifier,
    encoder_from,
    init_head,
)
from .tensor import Tensor

log = logging.getLogger(__name__)

FORMAT_KIND = "token_classifier"


class TrainingError(RuntimeError):
    """Divergence or a non-finite gradient."""


class EvaluationError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 16
    clip_norm: float | None = 1.0
    seed: int = 0
    patience: int = 3
    pretrain_epochs: int | None = None
    head: str = "linear"
    lstm_dim: int = 32
    strategy: str = "map"
    strict: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    encoder: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and patience >= 1 required")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or null")
        self.loss.validate()

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(vocab_size=vocab_size, **self.encoder)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        loss = LossConfig(**d.pop("loss", {}))
        return cls(loss=loss, **d)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and math.isfinite(max_norm) and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def adam_step(
    weights: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, in place on ``weights``."""
    for name, g in grads.items():
        if g.shape != weights[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, weight has {weights[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name} at step {state.step + 1}")
    grads = dict(grads)
    clip_by_global_norm(grads, cfg.clip_norm)
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        weights[name] -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return weights


# ---------------------------------------------------------------------------
# losses per record


def token_loss(model: TokenClassifier, ex: TokenizedExample, loss_cfg: LossConfig, rng=None) -> Tensor:
    logits = model.logits(ex, rng)
    L = logits.shape[0]
    labels = ex.labels[:L]
    if model.head == "crf":
        return model.crf_nll(logits, labels) * (1.0 / L)
    p, y = masked(machine_probability(logits), labels, ex.mask[:L])
    return compute_loss(p, y, loss_cfg)


def document_loss(model: DocumentClassifier, ex: TokenizedExample, rng=None) -> Tensor:
    from .losses import bce

    p = T.sigmoid(model.logit(ex, rng))
    return bce(T.reshape(p, (1,)), [float(ex.labels[0])])


# ---------------------------------------------------------------------------
# prediction and evaluation


@dataclass
class EvalReport:
    mae: float
    errors: dict[str, int]
    count: int

    def summary(self) -> str:
        return f"MAE {self.mae:.4f} over {self.count} records"


def evaluate_mae(predictions: dict[str, int], gold: Sequence[MixedTextRecord]) -> EvalReport:
    gold_ids = [r.id for r in gold]
    if len(set(gold_ids)) != len(gold_ids):
        raise EvaluationError("duplicate ids in gold corpus")
    missing = sorted(set(gold_ids) - set(predictions))
    extra = sorted(set(predictions) - set(gold_ids))
    if missing or extra:
        raise EvaluationError(f"id mismatch: missing predictions {missing}, unknown ids {extra}")
    if not gold:
        raise EvaluationError("empty gold corpus")
    errors = {r.id: abs(int(predictions[r.id]) - r.k) for r in gold}
    return EvalReport(sum(errors.values()) / len(errors), errors, len(errors))


def _member_logits(model: TokenClassifier, ex: TokenizedExample) -> np.ndarray:
    z = model.predict_logits(ex)
    if model.head == "crf":
        m = np.clip(model.machine_probs(z), 1e-300, 1.0)
        return np.log(np.stack([np.clip(1.0 - m, 1e-300, 1.0), m], axis=1))
    return z


def _probs_from_logits(z: np.ndarray) -> np.ndarray:
    d = z[:, 1] - z[:, 0]
    return 0.5 * (1.0 + np.tanh(0.5 * d))


def predict_examples(
    model: TokenClassifier, examples: Sequence[TokenizedExample], strategy: str = "map", strict: bool = True
) -> list[BoundaryPrediction]:
    out = []
    for ex in examples:
        probs = model.machine_probs(model.predict_logits(ex))
        t, k = decode(probs, ex.token_to_word, strategy, strict)
        out.append(BoundaryPrediction(ex.id, probs, t, k, strategy))
    return out


def predict_ensemble(
    models: Sequence[TokenClassifier],
    examples: Sequence[TokenizedExample],
    strategy: str = "map",
    strict: bool = True,
    average: str = "logits",
) -> list[BoundaryPrediction]:
    if not models:
        raise EnsembleError("ensemble needs at least one model")
    if len(models) == 1 and models[0].head != "crf":
        return predict_examples(models[0], examples, strategy, strict)
    out = []
    for ex in examples:
        z = ensemble_logits([_member_logits(m, ex) for m in models], average=average)
        probs = _probs_from_logits(z)
        t, k = decode(probs, ex.token_to_word, strategy, strict)
        out.append(BoundaryPrediction(ex.id, probs, t, k, strategy))
    return out


def dev_mae(model: TokenClassifier, examples, gold, strategy: str, strict: bool) -> float:
    preds = predict_examples(model, examples, strategy, strict)
    return evaluate_mae({p.id: p.k for p in preds}, gold).mae


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: TokenClassifier
    vocab: Vocab
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def checkpoint(self) -> Checkpoint:
        return to_checkpoint(self.model, self.vocab, self.extra)

    def history_csv(self) -> str:
        return history_to_csv(self.history)


def history_to_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["phase", "epoch", "train_loss", "dev_mae"])
    for row in history:
        dm = row.get("dev_mae")
        w.writerow([row.get("phase", "train"), row["epoch"], repr(row["train_loss"]), "" if dm is None else repr(dm)])
    return buf.getvalue()


def build_vocab(*corpora: Sequence) -> Vocab:
    return Vocab.build(r.text for corpus in corpora for r in corpus)


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, v in snap.items():
        params[k].data = v.copy()


def _run_epochs(
    params: dict[str, Tensor],
    examples: Sequence,
    loss_fn: Callable,
    cfg: TrainConfig,
    epochs: int,
    phase: str,
    seed_stream: int,
    evaluate: Callable[[], float] | None = None,
    history: list[dict] | None = None,
) -> tuple[list[dict], int]:
    """Mini-batch Adam over ``examples``; keeps the best weights by ``evaluate()`` if given."""
    history = [] if history is None else history
    state = AdamState()
    order_rng = np.random.default_rng([cfg.seed, seed_stream, 1])
    drop_rng = np.random.default_rng([cfg.seed, seed_stream, 2])
    weights = {k: v.data for k, v in params.items()}
    best, best_epoch, stale, best_snap = math.inf, 0, 0, None
    for epoch in range(1, epochs + 1):
        order = order_rng.permutation(len(examples))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            losses = [loss_fn(examples[i], drop_rng) for i in batch]
            vals = [lv.item() for lv in losses]
            if not all(math.isfinite(v) for v in vals):
                raise TrainingError(
                    f"{phase}: loss diverged at epoch {epoch}, step {state.step + 1} "
                    f"(record {examples[batch[0]].id!r}, losses {vals[:4]})"
                )
            total += sum(vals)
            root = losses[0]
            for lv in losses[1:]:
                root = root + lv
            root = root * (1.0 / len(batch))
            T.backward(root)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
            for p in params.values():
                p.grad = None
            adam_step(weights, grads, state, cfg)
        row = {"phase": phase, "epoch": epoch, "train_loss": total / len(examples), "dev_mae": None}
        if evaluate is not None:
            score = evaluate()
            row["dev_mae"] = score
            if score < best:
                best, best_epoch, stale, best_snap = score, epoch, 0, _snapshot(params)
            else:
                stale += 1
        history.append(row)
        log.info("%s epoch %d loss %.5f dev %s", phase, epoch, row["train_loss"], row["dev_mae"])
        if evaluate is not None and stale >= cfg.patience:
            break
    if best_snap is not None:
        _restore(params, best_snap)
    return history, best_epoch


def finetune(
    model: TokenClassifier,
    vocab: Vocab,
    train_corpus: Sequence[MixedTextRecord],
    dev_corpus: Sequence[MixedTextRecord] | None,
    cfg: TrainConfig,
    phase: str = "train",
    epochs: int | None = None,
    strict: bool | None = None,
    history: list[dict] | None = None,
    seed_stream: int = 1,
) -> tuple[list[dict], int]:
    strict = cfg.strict if strict is None else strict
    examples = [label_tokens(r, vocab, strict) for r in train_corpus]
    evaluate = None
    if dev_corpus:
        dev_ex = [label_tokens(r, vocab, cfg.strict) for r in dev_corpus]

        def evaluate():
            return dev_mae(model, dev_ex, dev_corpus, cfg.strategy, cfg.strict)

    def loss_fn(ex, rng):
        return token_loss(model, ex, cfg.loss, rng)

    return _run_epochs(
        model.parameters(), examples, loss_fn, cfg, cfg.epochs if epochs is None else epochs,
        phase, seed_stream, evaluate, history,
    )


def _check_lengths(cfg: EncoderConfig, *corpora) -> None:
    longest = max((r.word_count for c in corpora for r in c), default=0)
    if longest > cfg.max_len:
        raise ValueError(f"longest record has {longest} words, encoder max_len is {cfg.max_len}")


def _initial_mae(model, vocab, dev_corpus, cfg: TrainConfig) -> float | None:
    # dev MAE of the weights that phase 2 starts from
    if not dev_corpus:
        return None
    ex = [label_tokens(r, vocab, cfg.strict) for r in dev_corpus]
    return dev_mae(model, ex, dev_corpus, cfg.strategy, cfg.strict)


def train(
    train_corpus: Sequence[MixedTextRecord],
    dev_corpus: Sequence[MixedTextRecord] | None,
    cfg: TrainConfig,
    vocab: Vocab | None = None,
) -> TrainResult:
    """Fine-tune a freshly initialised token classifier on a boundary corpus."""
    cfg.validate()
    if not train_corpus:
        raise ValueError("train: empty corpus")
    vocab = vocab or build_vocab(train_corpus)
    enc_cfg = cfg.encoder_config(len(vocab))
    _check_lengths(enc_cfg, train_corpus, dev_corpus or [])
    model = TokenClassifier.init(enc_cfg, cfg.head, cfg.lstm_dim, cfg.seed)
    extra = {"scheme": "none", "train": cfg.to_dict(), "initial_dev_mae": _initial_mae(model, vocab, dev_corpus, cfg)}
    history, best = finetune(model, vocab, train_corpus, dev_corpus, cfg)
    return TrainResult(model, vocab, history, best, extra)


def pretrain1_then_finetune(
    pretrain_corpus: Sequence[MixedTextRecord] | None,
    train_corpus: Sequence[MixedTextRecord],
    dev_corpus: Sequence[MixedTextRecord] | None,
    cfg: TrainConfig,
) -> TrainResult:
    """Phase 1 on a concatenation-built corpus, then phase 2 on the boundary corpus.

    Weights carry over; optimizer state starts fresh in phase 2.
    """
    if not pretrain_corpus:
        return train(train_corpus, dev_corpus, cfg)
    cfg.validate()
    vocab = build_vocab(pretrain_corpus, train_corpus)
    enc_cfg = cfg.encoder_config(len(vocab))
    _check_lengths(enc_cfg, pretrain_corpus, train_corpus, dev_corpus or [])
    model = TokenClassifier.init(enc_cfg, cfg.head, cfg.lstm_dim, cfg.seed)
    history: list[dict] = []
    p_epochs = cfg.epochs if cfg.pretrain_epochs is None else cfg.pretrain_epochs
    finetune(model, vocab, pretrain_corpus, None, cfg, "pretrain1", p_epochs, strict=False, history=history, seed_stream=2)
    extra = {"scheme": "pretrain1", "train": cfg.to_dict(), "initial_dev_mae": _initial_mae(model, vocab, dev_corpus, cfg)}
    _, best = finetune(model, vocab, train_corpus, dev_corpus, cfg, "finetune", history=history)
    return TrainResult(model, vocab, history, best, extra)


def pretrain_documents(
    docs: Sequence[LabeledDoc], vocab: Vocab, cfg: TrainConfig, history: list[dict] | None = None
) -> DocumentClassifier:
    """Train encoder + pooled head with document-level BCE."""
    enc_cfg = cfg.encoder_config(len(vocab))
    model = DocumentClassifier.init(enc_cfg, cfg.seed)
    examples = build_pretrain2(docs, vocab)

    def loss_fn(ex, rng):
        return document_loss(model, ex, rng)

    p_epochs = cfg.epochs if cfg.pretrain_epochs is None else cfg.pretrain_epochs
    _run_epochs(model.parameters(), examples, loss_fn, cfg, p_epochs, "pretrain2", 3, None, history)
    return model


def transfer_encoder(doc_model: DocumentClassifier, head: str, lstm_dim: int, seed: int) -> TokenClassifier:
    """Copy encoder weights verbatim; the pooled head is dropped, a fresh token head is drawn."""
    enc = encoder_from(doc_model.encoder.params, doc_model.encoder.cfg)
    head_params = init_head(head, enc.cfg.d_model, lstm_dim, np.random.default_rng([seed, 12]))
    return TokenClassifier(enc, head, head_params, lstm_dim)


def pretrain2_then_finetune(
    docs: Sequence[LabeledDoc],
    train_corpus: Sequence[MixedTextRecord],
    dev_corpus: Sequence[MixedTextRecord] | None,
    cfg: TrainConfig,
) -> TrainResult:
    cfg.validate()
    vocab = build_vocab(docs, train_corpus)
    enc_cfg = cfg.encoder_config(len(vocab))
    _check_lengths(enc_cfg, [MixedTextRecord(d.id, d.text, 0) for d in docs], train_corpus, dev_corpus or [])
    history: list[dict] = []
    doc_model = pretrain_documents(docs, vocab, cfg, history)
    model = transfer_encoder(doc_model, cfg.head, cfg.lstm_dim, cfg.seed)
    _, best = finetune(model, vocab, train_corpus, dev_corpus, cfg, "finetune", history=history)
    return TrainResult(model, vocab, history, best, {"scheme": "pretrain2", "train": cfg.to_dict()})


def pretrain1_corpus_from_docs(docs: Sequence[LabeledDoc], seed: int) -> list[MixedTextRecord]:
    human, machine = author_pools(docs)
    return build_pretrain1(human, machine, seed)


# ---------------------------------------------------------------------------
# checkpoints


def to_checkpoint(model: TokenClassifier, vocab: Vocab, extra: dict | None = None) -> Checkpoint:
    config = {
        "kind": FORMAT_KIND,
        "encoder": model.cfg.to_dict(),
        "head": model.head,
        "lstm_dim": model.lstm_dim,
        "vocab": vocab.to_list(),
        "meta": extra or {},
    }
    return Checkpoint(config, {k: v.data.copy() for k, v in model.parameters().items()})


def from_checkpoint(ckpt: Checkpoint) -> tuple[TokenClassifier, Vocab]:
    c = ckpt.config
    if c.get("kind") != FORMAT_KIND:
        raise CheckpointFormatError(f"checkpoint kind {c.get('kind')!r} is not {FORMAT_KIND!r}")
    enc_cfg = EncoderConfig(**c["encoder"])
    vocab = Vocab.from_list(c["vocab"])
    enc_params = {k: Tensor(v.copy(), requires_grad=True) for k, v in ckpt.tensors.items() if k.startswith("encoder.")}
    head_params = {k: Tensor(v.copy(), requires_grad=True) for k, v in ckpt.tensors.items() if k.startswith("head.")}
    expected = Encoder.init(enc_cfg, np.random.default_rng(0)).params.keys()
    if set(expected) != set(enc_params):
        raise CheckpointFormatError("encoder tensor names do not match the stored config")
    return TokenClassifier(Encoder(enc_cfg, enc_params), c["head"], head_params, c["lstm_dim"]), vocab


def tokenize_for(vocab: Vocab, items: Sequence[tuple[str, str]]) -> list[TokenizedExample]:
    return [tokenize_text(rid, text, vocab) for rid, text in items]


__all__ = [
    "TrainConfig",
    "TrainResult",
    "TrainingError",
    "EvaluationError",
    "EvalReport",
    "AdamState",
    "adam_step",
    "clip_by_global_norm",
    "train",
    "finetune",
    "pretrain1_then_finetune",
    "pretrain2_then_finetune",
    "pretrain_documents",
    "transfer_encoder",
    "evaluate_mae",
    "predict_examples",
    "predict_ensemble",
    "to_checkpoint",
    "from_checkpoint",
    "history_to_csv",
]
