"""Attention and gradient attribution: FR, IG and embedding-gradient scores.

Conventions used throughout:

* ``A[j, i]`` is the attention of query position ``j`` onto key ``i``.
* ``IG[i, j] = A[j, i] * |dL/dA[j, i]|`` -- rows index context tokens,
  columns index query positions.
* *answer positions* are the query rows whose logits score answer tokens,
  i.e. one position before each answer token.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from . import diffcore as dc
from . import model as M
from .diffcore import DimensionError
from .taskgen import CONTEXT_CLASSES, LabeledSample

Head = tuple[int, int]


class UndefinedClassError(ValueError):
    """A class token set is empty, so its score is undefined."""


class MissingEvidenceError(ValueError):
    """Required gradient evidence was not collected."""


@dataclass
class AttentionEvidence:
    """Per-head attention matrices and loss gradients for one sample."""

    attention: dict[Head, np.ndarray]
    grads: dict[Head, np.ndarray]
    embedding_grad: np.ndarray | None = None
    loss: float = float("nan")

    def __post_init__(self):
        if set(self.attention) != set(self.grads):
            raise DimensionError("attention and gradient heads differ")
        for h, a in self.attention.items():
            if a.shape != self.grads[h].shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
                raise DimensionError(f"head {h}: attention {a.shape} vs grad {self.grads[h].shape}")

    @property
    def heads(self) -> list[Head]:
        return sorted(self.attention)

    @property
    def n(self) -> int:
        return next(iter(self.attention.values())).shape[0]


@dataclass
class ClassScores:
    scores: dict[str, float]
    aggregation: str = "mean"
    heads: list[Head] = field(default_factory=list)
    clamped: bool = False

    def ordering(self) -> tuple[str, ...]:
        """Classes sorted by descending score (name breaks ties)."""
        return tuple(sorted(self.scores, key=lambda r: (-self.scores[r], r)))


def answer_positions(sample: LabeledSample) -> np.ndarray:
    start, stop = sample.answer_span
    return np.arange(start - 1, stop - 1)


def class_sets(sample: LabeledSample, classes: Iterable[str] = CONTEXT_CLASSES) -> dict[str, np.ndarray]:
    return {r: sample.class_positions(r) for r in classes}


def collect_evidence(params: M.Parameters, sample: LabeledSample, loss_mask_mode: str = "answer_only") -> AttentionEvidence:
    """Forward with frozen weights, taps on every attention matrix and the layer-0 input."""
    tokens = np.asarray(sample.tokens)[None]
    with dc.Tape():
        logits, trace = M.forward(params, tokens, taps=("attention", "embeddings"), frozen=True)
        loss = M.lm_loss(logits, tokens, loss_mask_mode, [sample.answer_span], [len(sample)])
        taps = [trace.embeddings, *trace.attention]
        g = dc.backward(loss, taps)
    attention, grads = {}, {}
    for l, a in enumerate(trace.attention):
        ga = g[a]
        for h in range(a.shape[1]):
            attention[(l, h)] = a.data[0, h]
            grads[(l, h)] = ga[0, h]
    return AttentionEvidence(attention, grads, g[trace.embeddings][0], loss.item())


def ig_matrix(A: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Saliency ``(A * |grad|)`` transposed so ``IG[i, j]`` is flow from token i to query j."""
    A, grad = np.asarray(A), np.asarray(grad)
    if A.shape != grad.shape:
        raise DimensionError(f"ig_matrix: attention {A.shape} vs gradient {grad.shape}")
    return (A * np.abs(grad)).T


def _select_heads(evidence: AttentionEvidence, answer_pos, crit: np.ndarray | None, head_mode: str, top_heads: int) -> list[Head]:
    heads = evidence.heads
    if head_mode == "all":
        return heads
    if head_mode != "top_k_heads":
        raise ValueError(f"unknown head_mode {head_mode!r}")
    if crit is None or crit.size == 0:
        raise UndefinedClassError("top_k_heads needs a nonempty critical token set")
    # retrieval strength: attention mass from answer rows onto critical tokens
    strength = {h: evidence.attention[h][np.ix_(answer_pos, crit)].sum() for h in heads}
    ranked = sorted(heads, key=lambda h: (-strength[h], h))
    return sorted(ranked[: min(top_heads, len(heads))])


def ig_class_score(
    evidence: AttentionEvidence,
    class_sets: Mapping[str, Sequence[int]],
    answer_pos: Sequence[int],
    head_mode: str = "all",
    top_heads: int = 30,
) -> ClassScores:
    """Per-class IG, averaged over the selected heads.

    For each head the class score is the sum of ``IG[i, j]`` over tokens
    ``i`` in the class and answer positions ``j``, divided by the class size.
    """
    answer_pos = np.asarray(answer_pos, dtype=np.int64)
    sets = {r: np.asarray(v, dtype=np.int64) for r, v in class_sets.items()}
    for r, v in sets.items():
        if v.size == 0:
            raise UndefinedClassError(f"class {r!r} has no tokens")
    crit = np.concatenate([sets[r] for r in ("sup", "inter") if r in sets] or [np.zeros(0, np.int64)])
    heads = _select_heads(evidence, answer_pos, crit, head_mode, top_heads)
    scores = {}
    for r, idx in sets.items():
        per_head = [
            ig_matrix(evidence.attention[h], evidence.grads[h])[np.ix_(idx, answer_pos)].sum() / idx.size
            for h in heads
        ]
        scores[r] = float(np.mean(per_head))
    return ClassScores(scores, aggregation=head_mode, heads=heads)


def ig_token_scores(evidence: AttentionEvidence, answer_pos: Sequence[int]) -> np.ndarray:
    """``ig_token_score`` for every position at once."""
    answer_pos = np.asarray(answer_pos, dtype=np.int64)
    total = np.zeros(evidence.n)
    for h in evidence.heads:
        total += ig_matrix(evidence.attention[h], evidence.grads[h])[:, answer_pos].sum(axis=1)
    return total / len(evidence.heads)


def ig_token_score(evidence: AttentionEvidence, i: int, answer_pos: Sequence[int]) -> float:
    if not 0 <= i < evidence.n:
        raise IndexError(f"token index {i} outside [0, {evidence.n})")
    return float(ig_token_scores(evidence, answer_pos)[i])


def fr_score(
    attention: Mapping[Head, np.ndarray],
    answer_pos: Sequence[int],
    k: int,
    class_sets: Mapping[str, Sequence[int]],
    heads: Sequence[Head] | None = None,
    per_step: bool = False,
) -> ClassScores | list[ClassScores]:
    """Fraction of each class covered by the top-k attended positions.

    Scores are averaged over answer steps, then over heads.  With
    ``per_step`` one :class:`ClassScores` per step is returned instead.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    answer_pos = np.asarray(answer_pos, dtype=np.int64)
    if answer_pos.size == 0:
        raise ValueError("answer positions must be nonempty")
    heads = sorted(attention) if heads is None else list(heads)
    n = next(iter(attention.values())).shape[0]
    clamped = k > n
    if clamped:
        warnings.warn(f"top-k {k} exceeds sequence length {n}; clamped", stacklevel=2)
        k = n
    sets = {r: np.asarray(v, dtype=np.int64) for r, v in class_sets.items()}
    table = np.zeros((len(answer_pos), len(heads), len(sets)))
    for hi, h in enumerate(heads):
        A = attention[h]
        for si, j in enumerate(answer_pos):
            top = np.argsort(-A[j], kind="stable")[:k]
            for ri, idx in enumerate(sets.values()):
                if idx.size:
                    table[si, hi, ri] = np.isin(idx, top).sum() / idx.size
    names = list(sets)
    if per_step:
        return [
            ClassScores(dict(zip(names, table[si].mean(axis=0).tolist())), "per_step", heads, clamped)
            for si in range(len(answer_pos))
        ]
    return ClassScores(dict(zip(names, table.mean(axis=(0, 1)).tolist())), "mean", heads, clamped)


def embgrad_norms(embedding_grad: np.ndarray | None) -> np.ndarray:
    """L2 norm of each token's layer-0 input gradient."""
    if embedding_grad is None:
        raise MissingEvidenceError("no embedding gradient: run the detection pass with the embedding tap")
    return np.linalg.norm(np.asarray(embedding_grad), axis=-1)


def attention_onto(
    attention: Mapping[Head, np.ndarray], answer_pos: Sequence[int], layers: Sequence[int] | None = None
) -> np.ndarray:
    """Mean attention from answer rows onto each key, averaged over heads.

    ``layers`` restricts the average to heads of those layers.
    """
    answer_pos = np.asarray(answer_pos, dtype=np.int64)
    mats = [a[answer_pos].mean(axis=0) for (l, _), a in attention.items() if layers is None or l in layers]
    return np.mean(mats, axis=0)


def class_attention_mass(
    attention: Mapping[Head, np.ndarray],
    answer_pos,
    class_sets: Mapping[str, Sequence[int]],
    layers: Sequence[int] | None = None,
) -> dict[str, float]:
    """Total attention (head- and step-averaged) from answer rows onto each class."""
    onto = attention_onto(attention, answer_pos, layers)
    return {r: float(onto[np.asarray(idx, dtype=np.int64)].sum()) for r, idx in class_sets.items()}


def spearman(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Rank correlation, or ``None`` when either input is constant."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(stats.spearmanr(x, y).statistic)


def proportionality_report(
    ig_scores: Sequence[float],
    norms: Sequence[float],
    context: Sequence[int],
    classes: Sequence[str] | None = None,
) -> dict:
    """Rank agreement between per-token IG and embedding-gradient norms.

    ``classes`` (one label per position) adds per-class mean pairs.
    """
    ig_scores, norms = np.asarray(ig_scores), np.asarray(norms)
    if ig_scores.shape != norms.shape:
        raise DimensionError(f"ig scores {ig_scores.shape} vs norms {norms.shape}")
    context = np.asarray(context, dtype=np.int64)
    rho = spearman(ig_scores[context], norms[context])
    report = {
        "spearman": rho,
        "defined": rho is not None,
        "n_tokens": int(context.size),
        "class_means": {},
    }
    if classes is not None:
        for r in CONTEXT_CLASSES:
            idx = [i for i in context if classes[i] == r]
            if idx:
                report["class_means"][r] = {
                    "ig": float(ig_scores[idx].mean()),
                    "grad_norm": float(norms[idx].mean()),
                }
    return report


def minmax(values: Mapping[str, float]) -> tuple[dict[str, float], tuple[float, float]]:
    """Min-max normalised copy plus the (min, max) constants used."""
    lo, hi = min(values.values()), max(values.values())
    span = hi - lo
    return {r: (v - lo) / span if span > 0 else 0.0 for r, v in values.items()}, (lo, hi)


def probe_sample(params: M.Parameters, sample: LabeledSample, k: int = 30, loss_mask_mode: str = "answer_only") -> dict:
    """Full attribution record for one sample: FR, IG, grad norms, proportionality."""
    ev = collect_evidence(params, sample, loss_mask_mode)
    ans = answer_positions(sample)
    sets = {r: v for r, v in class_sets(sample).items() if v.size}
    ig_tok = ig_token_scores(ev, ans)
    norms = embgrad_norms(ev.embedding_grad)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fr = fr_score(ev.attention, ans, k, sets)
    ig = ig_class_score(ev, sets, ans)
    ctx = sample.context_positions[1:]  # skip <bos>
    return {
        "seed": sample.seed,
        "loss": ev.loss,
        "fr": fr.scores,
        "fr_clamped": fr.clamped,
        "ig": ig.scores,
        "ig_top_heads": ig_class_score(ev, sets, ans, head_mode="top_k_heads", top_heads=k).scores
        if "sup" in sets and "inter" in sets
        else None,
        "attention_mass": class_attention_mass(ev.attention, ans, sets),
        "token_ig": ig_tok.tolist(),
        "grad_norm": norms.tolist(),
        "proportionality": proportionality_report(ig_tok, norms, ctx, sample.classes),
    }
