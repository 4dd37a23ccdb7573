"""Tiny pre-norm decoder-only transformer with attention and embedding taps."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, PreconditionError, Tensor

CHECKPOINT_VERSION = 1


class LengthError(ValueError):
    """Input is longer than the model's ``max_seq``."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    vocab_size: int = 512
    max_seq: int = 1024
    position_scheme: str = "learned"
    init_seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "vocab_size", "max_seq"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.position_scheme not in ("learned", "sinusoidal"):
            raise ValueError(f"unknown position_scheme {self.position_scheme!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Parameters:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "Parameters":
        return Parameters(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def init_params(config: ModelConfig) -> Parameters:
    """Weights ~ N(0, 0.02), norm gains 1, biases 0, all from ``init_seed``."""
    rng = np.random.default_rng(config.init_seed)
    d, v = config.d_model, config.vocab_size
    normal = lambda *shape: rng.normal(0.0, 0.02, size=shape)  # noqa: E731
    t: dict[str, np.ndarray] = {"tok_emb": normal(v, d)}
    if config.position_scheme == "learned":
        t["pos_emb"] = normal(config.max_seq, d)
    for l in range(config.n_layers):
        p = f"layer{l}."
        t[p + "ln1.g"] = np.ones(d)
        t[p + "ln1.b"] = np.zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            t[p + w] = normal(d, d)
        t[p + "ln2.g"] = np.ones(d)
        t[p + "ln2.b"] = np.zeros(d)
        t[p + "ff.w1"] = normal(d, 4 * d)
        t[p + "ff.b1"] = np.zeros(4 * d)
        t[p + "ff.w2"] = normal(4 * d, d)
        t[p + "ff.b2"] = np.zeros(d)
    t["lnf.g"] = np.ones(d)
    t["lnf.b"] = np.zeros(d)
    t["w_out"] = normal(d, v)
    return Parameters(config, t)


@dataclass
class ForwardTrace:
    """Graph handles of one forward pass.

    ``attention[l]`` is the (batch, heads, n, n) probability tensor of
    layer ``l``; ``embeddings`` is the layer-0 input (batch, n, d).
    """

    embeddings: Tensor
    attention: list[Tensor]
    logits: Tensor
    params: dict[str, Tensor] = field(default_factory=dict)

    def attention_matrix(self, layer: int, head: int, b: int = 0) -> np.ndarray:
        return self.attention[layer].data[b, head]

    def attention_map(self, b: int = 0) -> dict[tuple[int, int], np.ndarray]:
        return {
            (l, h): a.data[b, h]
            for l, a in enumerate(self.attention)
            for h in range(a.shape[1])
        }


def base_embeddings(params: Parameters, tokens: np.ndarray) -> np.ndarray:
    """Token lookup plus positional term, without building a graph."""
    tokens = np.atleast_2d(tokens)
    x = params["tok_emb"][tokens]
    return x + _positions(params, tokens.shape[1])


def _positions(params: Parameters, n: int) -> np.ndarray:
    cfg = params.config
    if cfg.position_scheme == "learned":
        return params["pos_emb"][:n]
    return sinusoidal_positions(n, cfg.d_model)


def forward(
    params: Parameters,
    tokens,
    taps: Iterable[str] = (),
    embedding_override: np.ndarray | None = None,
    frozen: bool = False,
    logit_positions: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[Tensor, ForwardTrace]:
    """Run the model on ``tokens`` of shape (n,) or (batch, n).

    ``taps`` may contain ``"attention"`` and/or ``"embeddings"``.  With
    ``frozen`` the weights enter as constants; any requested tap then makes
    the layer-0 input the only differentiable leaf.  ``embedding_override``
    replaces the layer-0 input values; gradient still reaches the embedding
    tables as if the input were unmodified.

    ``logit_positions`` = (rows, cols) restricts the output projection to
    those positions, giving (k, vocab) logits instead of (batch, n, vocab).

    Must be called inside a :class:`~cdtlab.diffcore.Tape` for the taps and
    parameter gradients to be recorded.
    """
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    tokens = np.atleast_2d(tokens)
    b, n = tokens.shape
    if n > cfg.max_seq:
        raise LengthError(f"input length {n} exceeds max_seq {cfg.max_seq}")
    taps = set(taps)
    if taps - {"attention", "embeddings"}:
        raise ValueError(f"unknown taps {sorted(taps - {'attention', 'embeddings'})}")
    if embedding_override is not None:
        embedding_override = np.asarray(embedding_override, dtype=dc.DTYPE)
        if single and embedding_override.ndim == 2:
            embedding_override = embedding_override[None]
        if embedding_override.shape != (b, n, cfg.d_model):
            raise DimensionError(
                f"override shape {embedding_override.shape} does not match {(b, n, cfg.d_model)}"
            )

    if frozen:
        P = {k: dc.constant(v) for k, v in params.tensors.items()}
    else:
        P = {k: dc.leaf(v, name=k) for k, v in params.tensors.items()}

    if frozen:
        x0 = embedding_override if embedding_override is not None else base_embeddings(params, tokens)
        x = dc.leaf(x0, name="embeddings") if taps else dc.constant(x0)
    else:
        x = dc.embedding(P["tok_emb"], tokens)
        if cfg.position_scheme == "learned":
            x = x + dc.reshape(_slice_rows(P["pos_emb"], n), (1, n, cfg.d_model))
        else:
            x = x + dc.constant(sinusoidal_positions(n, cfg.d_model)[None])
        if embedding_override is not None:
            x = dc.stop_gradient_shift(x, embedding_override)
    embeddings = x

    attention = []
    for l in range(cfg.n_layers):
        p = f"layer{l}."
        h = dc.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
        att, probs = dc.attention_block(
            h, P[p + "wq"], P[p + "wk"], P[p + "wv"], P[p + "wo"], cfg.n_heads, causal=True
        )
        attention.append(probs)
        x = x + att
        h = dc.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        h = dc.gelu(dc.matmul(h, P[p + "ff.w1"]) + P[p + "ff.b1"])
        x = x + (dc.matmul(h, P[p + "ff.w2"]) + P[p + "ff.b2"])
    if logit_positions is not None:
        x = dc.take_positions(x, *logit_positions)
    h = dc.layer_norm(x, P["lnf.g"], P["lnf.b"])
    logits = dc.matmul(h, P["w_out"])
    trace = ForwardTrace(embeddings, attention, logits, P)
    return logits, trace


def _slice_rows(t: Tensor, n: int) -> Tensor:
    """First ``n`` rows, differentiable (gather of a range)."""
    return dc.embedding(t, np.arange(n))


def loss_weights(
    tokens: np.ndarray,
    mode: str,
    answer_spans=None,
    lengths=None,
    per_sample: bool = False,
) -> np.ndarray:
    """Per-position weights for next-token CE on a (batch, n) token array.

    Position ``p`` is scored against ``tokens[:, p + 1]``.  ``all_positions``
    selects ``p < length - 1``; ``answer_only`` selects positions whose
    target lies inside the answer span.  Weights average over all selected
    positions, or within each sample and then sum when ``per_sample``.
    """
    tokens = np.atleast_2d(tokens)
    b, n = tokens.shape
    lengths = np.full(b, n) if lengths is None else np.asarray(lengths)
    mask = np.zeros((b, n))
    for i in range(b):
        if mode == "all_positions":
            mask[i, : max(lengths[i] - 1, 0)] = 1.0
        elif mode == "answer_only":
            if answer_spans is None:
                raise PreconditionError("answer_only needs answer spans")
            start, stop = answer_spans[i]
            if stop <= start:
                raise PreconditionError("answer_only needs a nonempty answer span")
            mask[i, start - 1 : stop - 1] = 1.0
        else:
            raise ValueError(f"unknown loss mask mode {mode!r}")
    counts = mask.sum(axis=1)
    if counts.sum() == 0 or (per_sample and (counts == 0).any()):
        raise PreconditionError("loss mask selects no positions")
    if per_sample:
        return mask / counts[:, None]
    return mask / counts.sum()


def lm_loss(logits: Tensor, tokens, mode: str = "answer_only", answer_spans=None, lengths=None, per_sample=False) -> Tensor:
    """Next-token cross-entropy over positions selected by ``mode``."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    b, n = tokens.shape
    w = loss_weights(tokens, mode, answer_spans, lengths, per_sample)
    targets = np.zeros((b, n), dtype=np.int64)
    targets[:, :-1] = tokens[:, 1:]
    flat = dc.reshape(logits, (b * n, logits.shape[-1]))
    return dc.weighted_nll(flat, targets.reshape(-1), w.reshape(-1))


def scored_positions(tokens, mode: str, answer_spans=None, lengths=None, per_sample: bool = False):
    """(rows, cols, targets, weights) of the positions ``lm_loss`` scores."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    w = loss_weights(tokens, mode, answer_spans, lengths, per_sample)
    rows, cols = np.nonzero(w)
    return rows, cols, tokens[rows, cols + 1], w[rows, cols]


def lm_loss_at(logits: Tensor, targets, weights) -> Tensor:
    """CE on logits computed only at scored positions (see ``scored_positions``)."""
    return dc.weighted_nll(logits, targets, weights)


# checkpoints


def save_checkpoint(params: Parameters, path: str | Path, extra: dict | None = None) -> None:
    """One JSON header line, then little-endian float32 tensors in manifest order."""
    manifest, offset = [], 0
    for name, arr in params.tensors.items():
        nbytes = arr.size * 4
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "tensors": manifest,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for arr in params.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[Parameters, dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        blob = fh.read()
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    config = ModelConfig.from_dict(header["config"])
    tensors = {}
    for entry in header["tensors"]:
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(entry["shape"])
    return Parameters(config, tensors), header.get("extra", {})


def param_count(params: Parameters) -> int:
    return int(sum(v.size for v in params.tensors.values()))


