"""Attention-based dual encoders for video shots and sentences.

Both branches share the same three-level layout:

1. mean pooling of the raw inputs (keyframe features, or one-hot word vectors
   for text, i.e. a bag-of-words histogram),
2. a bidirectional GRU whose states go through self-attention and are then
   mean pooled,
3. multi-width 1-d convolutions over the attended states with max-over-time
   pooling.

The three levels are concatenated, projected by a fully connected layer into
the common space and L2-normalized.
"""
from __future__ import annotations

import re
import string
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class EncodingError(ValueError):
    """Raised for inputs the encoders cannot consume."""


class EmptySequenceError(EncodingError):
    """Every token of a sentence was out of vocabulary."""


_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def tokenize(text: str) -> list[str]:
    """Lowercase, replace punctuation by blanks, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class FeatureSequence:
    """One video shot: ``n`` keyframe feature vectors of dimension ``D``."""

    shot_id: str
    frames: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise EncodingError(f"shot {self.shot_id!r}: frames must be a non-empty n x D array")
        object.__setattr__(self, "frames", frames)

    @property
    def n(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    text: str = ""

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise EmptySequenceError(f"empty token sequence for {self.text!r}")


@dataclass
class EmbeddingTable:
    """Word vectors indexed by a dense vocabulary.

    The vocabulary doubles as the bag-of-words vocabulary of the first text
    level.
    """

    words: list[str]
    vectors: np.ndarray
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.words):
            raise EncodingError("embedding table needs one vector per word")
        self.index = {}
        for i, w in enumerate(self.words):
            if w in self.index:
                raise EncodingError(f"duplicate word {w!r} in embedding table")
            self.index[w] = i

    def __len__(self) -> int:
        return len(self.words)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def concat(self, other: "EmbeddingTable") -> "EmbeddingTable":
        """Append ``other``'s vector to each word; words missing there get zeros."""
        extra = np.zeros((len(self), other.dim), dtype=self.vectors.dtype)
        for i, w in enumerate(self.words):
            j = other.index.get(w)
            if j is not None:
                extra[i] = other.vectors[j]
        return EmbeddingTable(list(self.words), np.concatenate([self.vectors, extra], axis=1))

    def to_tokens(self, text: str) -> TokenSequence:
        """Tokenize ``text`` and drop out-of-vocabulary words."""
        ids = tuple(self.index[w] for w in tokenize(text) if w in self.index)
        if not ids:
            raise EmptySequenceError(f"no in-vocabulary words in {text!r}")
        return TokenSequence(ids, text)


@dataclass(frozen=True)
class EncoderConfig:
    feature_dim: int = 32
    embed_dim: int = 16
    vocab_size: int = 1000
    hidden: int = 32
    common_dim: int = 64
    widths: tuple[int, ...] = (2, 3, 4)
    filters: tuple[int, ...] = (16, 16, 16)
    max_frames: int = 64

    def __post_init__(self):
        if len(self.widths) != len(self.filters):
            raise ValueError("one filter count per convolution width")
        for name in ("feature_dim", "embed_dim", "vocab_size", "hidden", "common_dim", "max_frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def level_dims(self, branch: str) -> tuple[int, int, int]:
        first = self.feature_dim if branch == "video" else self.vocab_size
        return first, 2 * self.hidden, int(np.sum(self.filters))


@dataclass
class EncoderParams:
    """Trainable weights of both branches, keyed by dotted names."""

    config: EncoderConfig
    arrays: dict[str, np.ndarray]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def leaves(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def to_bytes(self) -> bytes:
        return ad.dump_checkpoint(self.arrays)

    @classmethod
    def from_bytes(cls, blob: bytes, dtype=np.float64, max_frames: int = 64) -> "EncoderParams":
        arrays = {k: v.astype(dtype) for k, v in ad.parse_checkpoint(blob).items()}
        return cls(infer_config(arrays, max_frames=max_frames), arrays)


@dataclass(frozen=True)
class LevelEncodings:
    phi1: np.ndarray
    phi2: np.ndarray
    phi3: np.ndarray


def infer_config(arrays: Mapping[str, np.ndarray], max_frames: int = 64) -> EncoderConfig:
    """Recover the layer dimensions from checkpoint tensor shapes."""
    try:
        hidden = arrays["video.gru_fw.Uh"].shape[0]
        banks = sorted((int(m.group(1)), arrays[m.group(0)].shape[1])
                       for m in (re.fullmatch(r"video\.conv(\d+)\.W", k) for k in arrays) if m)
        widths = [w for w, _ in banks]
        filters = [f for _, f in banks]
        common = arrays["video.fc.W"].shape[1]
        vocab = arrays["text.fc.W"].shape[0] - 2 * hidden - sum(filters)
        cfg = EncoderConfig(
            feature_dim=arrays["video.gru_fw.W"].shape[0],
            embed_dim=arrays["text.gru_fw.W"].shape[0],
            vocab_size=vocab, hidden=hidden, common_dim=common,
            widths=tuple(widths), filters=tuple(filters), max_frames=max_frames)
    except KeyError as exc:
        raise EncodingError(f"checkpoint lacks tensor {exc}") from None
    expected = init_params(cfg, seed=0).arrays
    for k, v in expected.items():
        if k not in arrays or arrays[k].shape != v.shape:
            raise EncodingError(f"checkpoint tensor {k} missing or misshapen")
    return cfg


def init_params(config: EncoderConfig, seed: int = 0, dtype=np.float64) -> EncoderParams:
    """Seeded initialization: uniform GRU weights, Xavier elsewhere, zero biases."""
    rng = np.random.default_rng(seed)
    h = config.hidden
    arrays: dict[str, np.ndarray] = {}

    def uniform(shape, bound):
        return rng.uniform(-bound, bound, size=shape)

    def xavier(fan_in, fan_out):
        return uniform((fan_in, fan_out), np.sqrt(6.0 / (fan_in + fan_out)))

    for branch, in_dim in (("video", config.feature_dim), ("text", config.embed_dim)):
        for direction in ("fw", "bw"):
            p = f"{branch}.gru_{direction}."
            bound = 1.0 / np.sqrt(h)
            arrays[p + "W"] = uniform((in_dim, 3 * h), bound)
            arrays[p + "Urz"] = uniform((h, 2 * h), bound)
            arrays[p + "Uh"] = uniform((h, h), bound)
            arrays[p + "b"] = np.zeros(3 * h)
        arrays[f"{branch}.att.Wq"] = xavier(2 * h, 2 * h)
        arrays[f"{branch}.att.Wk"] = xavier(2 * h, 2 * h)
        for w, f in zip(config.widths, config.filters):
            fan_in = w * 2 * h
            arrays[f"{branch}.conv{w}.W"] = uniform((fan_in, f), 1.0 / np.sqrt(fan_in))
            arrays[f"{branch}.conv{w}.b"] = np.zeros(f)
        total = sum(config.level_dims(branch))
        arrays[f"{branch}.fc.W"] = xavier(total, config.common_dim)
        arrays[f"{branch}.fc.b"] = np.zeros(config.common_dim)
    return EncoderParams(config, {k: v.astype(dtype) for k, v in arrays.items()})


# ---------------------------------------------------------------------------
# building blocks on batched tensors (B x n x .)


def gru(x: Tensor, P: Mapping[str, Tensor], prefix: str, reverse: bool = False) -> Tensor:
    """Run a GRU over axis 1 of ``x`` (B x n x in) and return all states (B x n x h).

    z = sigma(x Wz + h Uz + bz), r = sigma(x Wr + h Ur + br),
    c = tanh(x Wc + (r * h) Uc + bc), h' = c + z * (h - c).
    """
    W, Urz, Uh, b = (P[prefix + k] for k in ("W", "Urz", "Uh", "b"))
    hid = Uh.shape[0]
    B, n = x.shape[0], x.shape[1]
    xp = ad.add(ad.matmul(x, W), b)
    state = Tensor(np.zeros((B, hid), dtype=x.dtype))
    steps = range(n - 1, -1, -1) if reverse else range(n)
    states: list[Tensor] = [None] * n
    for t in steps:
        xt = xp[:, t, :]
        rz = ad.sigmoid(ad.add(xt[:, :2 * hid], ad.matmul(state, Urz)))
        r, z = rz[:, :hid], rz[:, hid:]
        cand = ad.tanh(ad.add(xt[:, 2 * hid:], ad.matmul(ad.mul(r, state), Uh)))
        state = ad.add(cand, ad.mul(z, ad.sub(state, cand)))
        states[t] = state
    return ad.stack(states, axis=1)


def bigru(x: Tensor, P: Mapping[str, Tensor], branch: str) -> Tensor:
    fw = gru(x, P, f"{branch}.gru_fw.")
    bw = gru(x, P, f"{branch}.gru_bw.", reverse=True)
    return ad.concat([fw, bw], axis=-1)


def attention_weights(H: Tensor, Wq: Tensor, Wk: Tensor) -> Tensor:
    """Row-stochastic n x n weights: softmax((H Wq)(H Wk)^T / sqrt(k))."""
    q = ad.matmul(H, Wq)
    k = ad.matmul(H, Wk)
    logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(Wk.shape[1]))
    return ad.softmax(logits)


def self_attention(H, params: Mapping[str, np.ndarray] | EncoderParams, branch: str = "video"):
    """Attend over the rows of a single n x 2h state matrix.

    Returns ``(H_bar, A)`` as numpy arrays with ``H_bar = A @ H``.
    """
    arrays = params.arrays if isinstance(params, EncoderParams) else params
    H = np.asarray(H)
    if H.ndim != 2 or H.shape[0] < 1:
        raise ad.ShapeError(f"self_attention expects an n x 2h matrix, got {H.shape}")
    with ad.no_grad():
        Ht = Tensor(H[None])
        A = attention_weights(Ht, Tensor(arrays[f"{branch}.att.Wq"]), Tensor(arrays[f"{branch}.att.Wk"]))
        Hbar = ad.matmul(A, Ht)
    return Hbar.data[0], A.data[0]


def conv_levels(Hbar: Tensor, P: Mapping[str, Tensor], branch: str,
                widths: Sequence[int]) -> Tensor:
    """Multi-width 1-d convolution + ReLU + max-over-time, concatenated."""
    B, L = Hbar.shape[0], Hbar.shape[1]
    banks = []
    for w in widths:
        Wc, bc = P[f"{branch}.conv{w}.W"], P[f"{branch}.conv{w}.b"]
        if w > L:
            banks.append(Tensor(np.zeros((B, Wc.shape[1]), dtype=Hbar.dtype)))
            continue
        span = L - w + 1
        windows = ad.concat([Hbar[:, i:i + span, :] for i in range(w)], axis=-1)
        act = ad.relu(ad.add(ad.matmul(windows, Wc), bc))
        banks.append(ad.max(act, axis=1))
    return ad.concat(banks, axis=-1)


def _branch(first: Tensor, seq: Tensor, P: Mapping[str, Tensor], branch: str,
            config: EncoderConfig) -> tuple[tuple[Tensor, Tensor, Tensor], Tensor]:
    H = bigru(seq, P, branch)
    A = attention_weights(H, P[f"{branch}.att.Wq"], P[f"{branch}.att.Wk"])
    Hbar = ad.matmul(A, H)
    phi2 = ad.mean(Hbar, axis=1)
    phi3 = conv_levels(Hbar, P, branch, config.widths)
    joint = ad.concat([first, phi2, phi3], axis=-1)
    out = ad.add(ad.matmul(joint, P[f"{branch}.fc.W"]), P[f"{branch}.fc.b"])
    return (first, phi2, phi3), ad.l2_normalize(out)


def subsample_frames(frames: np.ndarray, max_frames: int) -> np.ndarray:
    """Uniformly keep ``max_frames`` rows when there are more; otherwise return as is."""
    n = frames.shape[0]
    if n <= max_frames:
        return frames
    keep = (np.arange(max_frames) * n) // max_frames
    return frames[keep]


def video_batch(frames: np.ndarray, P: Mapping[str, Tensor], config: EncoderConfig):
    """Encode a B x n x D block of equal-length shots."""
    x = Tensor(frames)
    return _branch(ad.mean(x, axis=1), x, P, "video", config)


def text_batch(tokens: np.ndarray, table: EmbeddingTable, P: Mapping[str, Tensor],
               config: EncoderConfig):
    """Encode a B x m block of equal-length token index rows."""
    dtype = P["text.fc.W"].dtype
    B, m = tokens.shape
    bow = np.zeros((B, config.vocab_size), dtype=dtype)
    for i in range(B):
        np.add.at(bow[i], tokens[i], 1.0)
    bow /= m
    emb = Tensor(table.vectors[tokens].astype(dtype))
    return _branch(Tensor(bow), emb, P, "text", config)


def _grouped(lengths: Sequence[int]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, n in enumerate(lengths):
        groups.setdefault(n, []).append(i)
    return groups


def _regroup(outputs: list[Tensor], order: list[int]) -> Tensor:
    if len(outputs) == 1 and order == sorted(order):
        return outputs[0]
    stacked = ad.concat(outputs, axis=0)
    inverse = np.empty(len(order), dtype=np.intp)
    inverse[np.asarray(order)] = np.arange(len(order))
    return stacked[inverse]


def encode_videos(shots: Sequence[FeatureSequence], P: Mapping[str, Tensor],
                  config: EncoderConfig) -> Tensor:
    """Common-space vectors (B x d) for shots of possibly different lengths."""
    dtype = P["video.fc.W"].dtype
    frames = [subsample_frames(s.frames, config.max_frames) for s in shots]
    for s, f in zip(shots, frames):
        if f.shape[1] != config.feature_dim:
            raise EncodingError(f"shot {s.shot_id!r} has frame dimension {f.shape[1]}, "
                                f"expected {config.feature_dim}")
    outputs, order = [], []
    for _, idx in sorted(_grouped([f.shape[0] for f in frames]).items()):
        block = np.stack([frames[i] for i in idx]).astype(dtype)
        outputs.append(video_batch(block, P, config)[1])
        order.extend(idx)
    return _regroup(outputs, order)


def encode_texts(sentences: Sequence[TokenSequence], table: EmbeddingTable,
                 P: Mapping[str, Tensor], config: EncoderConfig) -> Tensor:
    _check_table(table, config)
    outputs, order = [], []
    for _, idx in sorted(_grouped([len(s.tokens) for s in sentences]).items()):
        block = np.array([sentences[i].tokens for i in idx], dtype=np.intp)
        outputs.append(text_batch(block, table, P, config)[1])
        order.extend(idx)
    return _regroup(outputs, order)


def _check_table(table: EmbeddingTable, config: EncoderConfig) -> None:
    if len(table) != config.vocab_size or table.dim != config.embed_dim:
        raise EncodingError(
            f"embedding table is {len(table)} x {table.dim}, encoder expects "
            f"{config.vocab_size} x {config.embed_dim}")


# ---------------------------------------------------------------------------
# single-item inference


def encode_video(shot: FeatureSequence, params: EncoderParams) -> tuple[LevelEncodings, np.ndarray]:
    cfg = params.config
    frames = subsample_frames(shot.frames, cfg.max_frames)
    if frames.shape[1] != cfg.feature_dim:
        raise EncodingError(f"shot {shot.shot_id!r} has frame dimension {frames.shape[1]}, "
                            f"expected {cfg.feature_dim}")
    with ad.no_grad():
        levels, vec = video_batch(frames.astype(params.dtype)[None], params.leaves(), cfg)
    return LevelEncodings(*(lv.data[0] for lv in levels)), vec.data[0]


def encode_text(sentence: TokenSequence | str, table: EmbeddingTable,
                params: EncoderParams) -> tuple[LevelEncodings, np.ndarray]:
    if isinstance(sentence, str):
        sentence = table.to_tokens(sentence)
    cfg = params.config
    _check_table(table, cfg)
    if max(sentence.tokens) >= cfg.vocab_size or min(sentence.tokens) < 0:
        raise EncodingError("token index outside the vocabulary")
    with ad.no_grad():
        levels, vec = text_batch(np.array([sentence.tokens], dtype=np.intp), table,
                                 params.leaves(), cfg)
    return LevelEncodings(*(lv.data[0] for lv in levels)), vec.data[0]


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; 0 when either vector is zero."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise EncodingError(f"dimension mismatch {a.shape} vs {b.shape}")
    denom = np.sqrt(np.sum(a * a)) * np.sqrt(np.sum(b * b))
    if denom == 0:
        return 0.0
    return float(np.sum(a * b) / denom)


def with_max_frames(params: EncoderParams, max_frames: int) -> EncoderParams:
    return EncoderParams(replace(params.config, max_frames=max_frames), params.arrays)
