"""Tokenization, vocabulary, and LSTM encoding of referring expressions."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DatasetError
from .tensor import Tensor, affine, concat, narrow, reshape, sigmoid, take_rows, tanh

PAD_ID = 0
UNK_ID = 1
RESERVED = {"<pad>": PAD_ID, "<unk>": UNK_ID}

# gate order is part of the checkpoint contract
GATES = ("i", "f", "g", "o")

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class Vocab:
    """Token-to-id map with reserved pad=0 and unk=1."""

    token_to_id: dict[str, int]

    def __post_init__(self):
        for tok, i in RESERVED.items():
            if self.token_to_id.get(tok) != i:
                raise ContractError(f"vocab must reserve {tok!r} -> {i}")
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise ContractError("vocab ids must be dense in [0, size)")

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)


def split_words(expression: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation."""
    return _TOKEN_RE.findall(expression.lower())


def tokenize(expression: str, vocab: Vocab, max_len: int = 20) -> list[int]:
    """Map an expression to token ids, truncated to ``max_len``; never pads."""
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    words = split_words(expression)
    if not words:
        raise ContractError(f"expression has no tokens: {expression!r}")
    return [vocab.lookup(w) for w in words[:max_len]]


def build_vocab(corpus: list[str], min_count: int = 1) -> Vocab:
    """Deterministic vocab: frequency-then-lexicographic order after reserved ids."""
    if not corpus:
        raise ContractError("corpus must be non-empty")
    counts = Counter()
    for expr in corpus:
        counts.update(split_words(expr))
    kept = sorted((tok for tok, c in counts.items() if c >= min_count),
                  key=lambda tok: (-counts[tok], tok))
    mapping = dict(RESERVED)
    for tok in kept:
        mapping[tok] = len(mapping)
    return Vocab(mapping)


def read_embedding_file(path) -> dict[str, np.ndarray]:
    """Parse a plain-text embedding file: one token then its floats per line."""
    table: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(" ")
            if len(parts) < 2:
                raise DatasetError(f"{path}:{lineno}: embedding line has no values")
            try:
                vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise DatasetError(
                    f"{path}:{lineno}: expected {dim} values, got {vec.size}")
            table[parts[0]] = vec
    return table


@dataclass
class LstmParams:
    """Embedding plus per-gate LSTM weights, gate order (i, f, g, o)."""

    embedding: Tensor
    w: dict[str, Tensor] = field(default_factory=dict)  # input weights (Hd, E)
    u: dict[str, Tensor] = field(default_factory=dict)  # recurrent weights (Hd, Hd)
    b: dict[str, Tensor] = field(default_factory=dict)  # biases (Hd,)

    @property
    def hidden_dim(self) -> int:
        return self.w["i"].shape[0]

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    def named(self) -> list[tuple[str, Tensor]]:
        out = [("embedding", self.embedding)]
        for g in GATES:
            out.append((f"lstm.w_{g}", self.w[g]))
        for g in GATES:
            out.append((f"lstm.u_{g}", self.u[g]))
        for g in GATES:
            out.append((f"lstm.b_{g}", self.b[g]))
        return out


def init_lstm_params(vocab_size: int, embed_dim: int, hidden_dim: int,
                     rng: np.random.Generator, dtype=np.float64) -> LstmParams:
    """Uniform +-1/sqrt(Hd) init; forget-gate bias starts at 1.0."""
    bound = 1.0 / np.sqrt(hidden_dim)

    def uni(shape):
        return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)

    params = LstmParams(embedding=uni((vocab_size, embed_dim)))
    for g in GATES:
        params.w[g] = uni((hidden_dim, embed_dim))
        params.u[g] = uni((hidden_dim, hidden_dim))
        bias = np.full(hidden_dim, 1.0 if g == "f" else 0.0, dtype=dtype)
        params.b[g] = Tensor(bias, requires_grad=True)
    return params


def apply_embedding_file(params: LstmParams, vocab: Vocab, path) -> int:
    """Overwrite embedding rows for vocab tokens found in the file.

    Returns the number of rows replaced.
    """
    table = read_embedding_file(path)
    dim = params.embedding.shape[1]
    hits = 0
    for tok, idx in vocab.token_to_id.items():
        vec = table.get(tok)
        if vec is None:
            continue
        if vec.size != dim:
            raise DatasetError(
                f"embedding file dim {vec.size} does not match model dim {dim}")
        params.embedding.data[idx] = vec.astype(params.embedding.dtype)
        hits += 1
    return hits


def lstm_encode_batch(ids: np.ndarray, lengths: np.ndarray, params: LstmParams) -> Tensor:
    """Encode a padded id batch (B,T) to final hidden states (B,Hd).

    Rows are padded with PAD_ID beyond their length; each sequence's output
    is its hidden state at its own last real token.
    """
    ids = np.asarray(ids, dtype=np.intp)
    lengths = np.asarray(lengths, dtype=np.intp)
    if ids.ndim != 2:
        raise ContractError(f"ids must be rank 2 (B,T), got shape {ids.shape}")
    bsz, tmax = ids.shape
    if tmax == 0 or (lengths < 1).any():
        raise ContractError("every sequence must have at least one token")
    if (lengths > tmax).any():
        raise ContractError("length exceeds padded width")
    if ids.max() >= params.vocab_size or ids.min() < 0:
        raise ContractError(
            f"token id out of vocabulary range [0, {params.vocab_size})")

    hd = params.hidden_dim
    dtype = params.embedding.dtype
    w_all = concat([params.w[g] for g in GATES], axis=0)
    u_all = concat([params.u[g] for g in GATES], axis=0)
    b_all = concat([params.b[g] for g in GATES], axis=0)

    h = Tensor(np.zeros((bsz, hd), dtype=dtype))
    c = Tensor(np.zeros((bsz, hd), dtype=dtype))
    min_len = int(lengths.min())
    for t in range(int(lengths.max())):
        x_t = take_rows(params.embedding, ids[:, t])
        gates = affine(x_t, w_all, b_all) + affine(h, u_all)
        i_g = sigmoid(narrow(gates, 1, 0, hd))
        f_g = sigmoid(narrow(gates, 1, hd, hd))
        g_g = tanh(narrow(gates, 1, 2 * hd, hd))
        o_g = sigmoid(narrow(gates, 1, 3 * hd, hd))
        c_new = f_g * c + i_g * g_g
        h_new = o_g * tanh(c_new)
        if t < min_len:
            h, c = h_new, c_new
        else:
            alive = Tensor((lengths > t).astype(dtype).reshape(bsz, 1))
            h = h_new * alive + h * (1.0 - alive)
            c = c_new * alive + c * (1.0 - alive)
    return h


def lstm_encode(ids: list[int], params: LstmParams) -> Tensor:
    """Encode a single id sequence to its final hidden state r (Hd,)."""
    if not ids:
        raise ContractError("cannot encode an empty token sequence")
    arr = np.asarray(ids, dtype=np.intp).reshape(1, -1)
    h = lstm_encode_batch(arr, np.array([len(ids)]), params)
    return reshape(h, (params.hidden_dim,))
