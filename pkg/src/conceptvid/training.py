"""Training of the dual encoders with the hardest-negative ranking loss."""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import (EmbeddingTable, EmptySequenceError, EncoderParams, FeatureSequence,
                       TokenSequence, encode_texts, encode_videos)

logger = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


class NumericalError(FloatingPointError):
    """Loss became non-finite; ``batch`` is the offending batch index."""

    def __init__(self, message: str, batch: int):
        super().__init__(message)
        self.batch = batch


@dataclass(frozen=True)
class CaptionPair:
    shot_id: str
    caption: str

    def __post_init__(self):
        if not self.caption.strip():
            raise TrainingError(f"empty caption for shot {self.shot_id!r}")


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.2
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    precision: str = "float64"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.margin <= 0:
            raise TrainingError("margin must be positive")
        if self.batch_size < 2:
            raise TrainingError("batch size must be at least 2")
        if self.learning_rate < 0:
            raise TrainingError("learning rate must be non-negative")
        if self.epochs < 1:
            raise TrainingError("need at least one epoch")
        if self.precision not in ("float32", "float64"):
            raise TrainingError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)


class Adam:
    """Adaptive moment estimation with bias correction; updates arrays in place."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# loss


def similarity_matrix(videos, texts):
    """Cosine similarities, entry (i, j) = sim(video_i, text_j).

    Tensors in, tensor out (differentiable); arrays in, array out.
    """
    as_array = not isinstance(videos, Tensor) and not isinstance(texts, Tensor)
    v, t = ad.as_tensor(videos), ad.as_tensor(texts)
    if v.ndim != 2 or t.ndim != 2 or v.shape != t.shape:
        raise ad.ShapeError(f"similarity_matrix needs equal B x d blocks, got {v.shape}, {t.shape}")
    S = ad.matmul(ad.l2_normalize(v), ad.transpose(ad.l2_normalize(t)))
    return S.data if as_array else S


def ranking_loss(S, margin: float = 0.2, exclude: np.ndarray | None = None):
    """Sum over the batch of the hardest-negative hinge in both directions.

    loss = sum_i max_{j!=i}[m + S(i,j) - S(i,i)]_+ + max_{j!=i}[m + S(j,i) - S(i,i)]_+

    ``exclude`` optionally marks extra off-diagonal entries (e.g. two captions
    of the same shot) that must not act as negatives. Returns a float for
    array input, a scalar tensor for tensor input.
    """
    as_array = not isinstance(S, Tensor)
    S = ad.as_tensor(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ad.ShapeError(f"ranking_loss needs a square matrix, got {S.shape}")
    B = S.shape[0]
    if B < 2:
        raise TrainingError("ranking loss needs a batch of at least 2")
    diag = ad.diagonal(S)
    total = None
    for axis in (1, 0):
        weights = None
        if exclude is not None and np.any(exclude):
            blocked = np.asarray(exclude, dtype=bool).copy()
            np.fill_diagonal(blocked, True)
            # rows (axis=1) or columns (axis=0) without any admissible negative
            alive = ~np.all(blocked, axis=axis)
            hard = _masked_hardest(S, blocked, axis)
            weights = alive.astype(S.dtype)
        else:
            hard = ad.offdiag_max(S, axis=axis)
        term = ad.hinge(ad.add(ad.sub(hard, diag), margin))
        if weights is not None:
            term = ad.mul(term, weights)
        part = ad.sum(term)
        total = part if total is None else ad.add(total, part)
    return total.item() if as_array else total


def _masked_hardest(S: Tensor, blocked: np.ndarray, axis: int) -> Tensor:
    # lowest-index maximum over admissible entries; fully blocked lines pick the
    # diagonal, whose contribution the caller zeroes out
    n = S.shape[0]
    vals = np.where(blocked, -np.inf, S.data)
    idx = np.argmax(vals, axis=axis)
    dead = np.all(blocked, axis=axis)
    lines = np.arange(n)
    idx = np.where(dead, lines, idx)
    rows, cols = (lines, idx) if axis == 1 else (idx, lines)
    return S[rows, cols]


# ---------------------------------------------------------------------------
# epochs


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    batches: int
    skipped_captions: int = 0


def _tokenize_pairs(pairs: Sequence[CaptionPair], table: EmbeddingTable):
    kept, tokens, skipped = [], [], 0
    for p in pairs:
        try:
            tokens.append(table.to_tokens(p.caption))
            kept.append(p)
        except EmptySequenceError:
            skipped += 1
    return kept, tokens, skipped


def make_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded shuffle cut into batches; a final batch of fewer than 2 is dropped."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


def batch_loss(shots: Sequence[FeatureSequence], sentences: Sequence[TokenSequence],
               table: EmbeddingTable, leaves: Mapping[str, Tensor], params: EncoderParams,
               margin: float, shot_ids: Sequence[str] | None = None) -> Tensor:
    """Differentiable loss of one aligned batch (shot i matches sentence i)."""
    v = encode_videos(shots, leaves, params.config)
    t = encode_texts(sentences, table, leaves, params.config)
    S = similarity_matrix(v, t)
    exclude = None
    if shot_ids is not None:
        ids = np.asarray(shot_ids, dtype=object)
        exclude = ids[:, None] == ids[None, :]
        np.fill_diagonal(exclude, False)
    return ranking_loss(S, margin, exclude)


def train_epoch(pairs: Sequence[CaptionPair], features: Mapping[str, FeatureSequence],
                table: EmbeddingTable, params: EncoderParams, config: TrainConfig,
                optimizer: Adam | None = None, epoch: int = 0) -> tuple[EncoderParams, EpochStats]:
    """One pass of mini-batch updates; ``params`` is updated in place and returned."""
    if not pairs:
        raise TrainingError("empty training set")
    for p in pairs:
        if p.shot_id not in features:
            raise TrainingError(f"caption references unknown shot {p.shot_id!r}")
    if optimizer is None:
        optimizer = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    kept, tokens, skipped = _tokenize_pairs(pairs, table)
    batches = make_batches(len(kept), config.batch_size, config.seed, epoch)
    if not batches:
        raise TrainingError("not enough encodable captions to form a batch of 2")
    losses = []
    for b, idx in enumerate(batches):
        leaves = params.leaves(requires_grad=True)
        ids = [kept[i].shot_id for i in idx]
        loss = batch_loss([features[s] for s in ids], [tokens[i] for i in idx], table,
                          leaves, params, config.margin, shot_ids=ids)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss in batch {b} of epoch {epoch}", batch=b)
        ad.backward(loss)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for k, t in leaves.items()}
        optimizer.step(params.arrays, grads)
        losses.append(value)
    return params, EpochStats(epoch, float(np.mean(losses)), len(batches), skipped)


# ---------------------------------------------------------------------------
# validation


def caption_ranks(pairs: Sequence[CaptionPair], features: Mapping[str, FeatureSequence],
                  table: EmbeddingTable, params: EncoderParams) -> np.ndarray:
    """1-based rank of each caption's own shot among all shots of ``pairs``.

    Equal scores are broken by ascending shot id. Captions without any
    in-vocabulary word are ranked last.
    """
    if not pairs:
        raise TrainingError("empty validation set")
    shot_ids = sorted({p.shot_id for p in pairs})
    pos = {s: i for i, s in enumerate(shot_ids)}
    kept, tokens, _ = _tokenize_pairs(pairs, table)
    with ad.no_grad():
        leaves = params.leaves()
        V = encode_videos([features[s] for s in shot_ids], leaves, params.config).data
        T = encode_texts(tokens, table, leaves, params.config).data if tokens else None
    rank_of: dict[int, int] = {}
    if tokens:
        scores = T @ V.T
        for row, p in zip(scores, kept):
            j = pos[p.shot_id]
            s = row[j]
            rank_of[id(p)] = 1 + int(np.sum(row > s)) + int(np.sum(row[:j] == s))
    ranks = np.array([rank_of.get(id(p), len(shot_ids)) for p in pairs], dtype=np.int64)
    return ranks


def validation_recall(pairs: Sequence[CaptionPair], features: Mapping[str, FeatureSequence],
                      table: EmbeddingTable, params: EncoderParams, k: int = 1) -> tuple[float, float]:
    """Recall@k and median rank of the matching shot."""
    if k < 1:
        raise TrainingError("K must be at least 1")
    ranks = caption_ranks(pairs, features, table, params)
    return float(np.mean(ranks <= k)), float(np.median(ranks))


# ---------------------------------------------------------------------------
# full loop


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    recall1: float = float("nan")
    recall5: float = float("nan")
    median_rank: float = float("nan")

    def log_line(self) -> str:
        return (f"{self.epoch} {self.mean_loss:.6f} {self.recall1:.4f} "
                f"{self.recall5:.4f} {self.median_rank:g}")


@dataclass
class TrainResult:
    params: EncoderParams
    best_params: EncoderParams
    best_epoch: int
    history: list[EpochRecord] = field(default_factory=list)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def train(pairs: Sequence[CaptionPair], features: Mapping[str, FeatureSequence],
          table: EmbeddingTable, params: EncoderParams, config: TrainConfig,
          val_pairs: Sequence[CaptionPair] | None = None,
          checkpoint_dir: str | os.PathLike | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train for ``config.epochs`` epochs, keeping the best validation recall@1.

    ``params`` is not modified. Without validation pairs the last epoch is
    the best one.
    """
    params = params.astype(config.dtype)
    optimizer = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    history: list[EpochRecord] = []
    best, best_epoch, best_r1 = params.copy(), 0, -1.0
    for epoch in range(1, config.epochs + 1):
        _, stats = train_epoch(pairs, features, table, params, config, optimizer, epoch)
        rec = EpochRecord(epoch, stats.mean_loss)
        if val_pairs:
            ranks = caption_ranks(val_pairs, features, table, params)
            rec.recall1 = float(np.mean(ranks <= 1))
            rec.recall5 = float(np.mean(ranks <= 5))
            rec.median_rank = float(np.median(ranks))
        history.append(rec)
        logger.info("epoch %s", rec.log_line())
        if ckpt is not None:
            _atomic_write(ckpt / f"epoch_{epoch:03d}.denc", params.to_bytes())
        score = rec.recall1 if val_pairs else float(epoch)
        if score > best_r1:
            best, best_epoch, best_r1 = params.copy(), epoch, score
            if ckpt is not None:
                _atomic_write(ckpt / "best.denc", best.to_bytes())
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(params, best, best_epoch, history)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)


# ---------------------------------------------------------------------------
# gradient self-check


def end_to_end_gradcheck(seed: int = 0, n: int = 4, m: int = 5, D: int = 8, E: int = 6,
                         h: int = 5, d: int = 7, B: int = 3, vocab: int = 12,
                         margin: float = 0.2, step: float = 1e-6) -> float:
    """Max relative error of the batch-loss gradient against central differences.

    Covers every parameter of both branches on a random float64 batch of
    ``B`` shots (``n`` frames of dimension ``D``) and ``B`` sentences of ``m``
    tokens.
    """
    from .encoders import EncoderConfig, init_params

    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(feature_dim=D, embed_dim=E, vocab_size=vocab, hidden=h, common_dim=d,
                        widths=(2, 3, 4), filters=(2, 2, 2), max_frames=max(n, 1))
    params = init_params(cfg, seed=seed)
    # larger than default weights so that no gate saturates and hinges are active
    for arr in params.arrays.values():
        arr += 0.1 * rng.normal(size=arr.shape)
    table = EmbeddingTable(tuple(f"w{i}" for i in range(vocab)), rng.normal(size=(vocab, E)))
    shots = [FeatureSequence(f"s{i}", rng.normal(size=(n, D))) for i in range(B)]
    sentences = [TokenSequence(tuple(int(t) for t in rng.integers(vocab, size=m))) for _ in range(B)]

    def loss(leaves):
        return batch_loss(shots, sentences, table, leaves, params, margin)

    value = loss(params.leaves()).item()
    if value == 0.0:
        raise TrainingError("all hinges inactive; the check would be vacuous")
    return ad.grad_check(loss, params.copy().arrays, step=step)
