"""Gradient-based noise identification and input-embedding denoising."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import attribution as attr
from . import model as M
from .diffcore import DimensionError
from .taskgen import LabeledSample


class AnalysisUnavailableError(ValueError):
    """Attribution signal is degenerate (all zero), so noise cannot be ranked."""


@dataclass
class NoiseMask:
    """``indicator[i] = 1`` marks token ``i`` as noise.

    Only ``positions`` are scored; every other index is 0 (kept).
    """

    indicator: np.ndarray
    threshold: float
    basis: str = "grad_norm"
    positions: np.ndarray | None = None

    @property
    def density(self) -> float:
        scored = self.indicator if self.positions is None else self.indicator[self.positions]
        return float(scored.mean()) if scored.size else 0.0

    @property
    def critical(self) -> np.ndarray:
        """Scored positions the mask keeps (I = 0)."""
        pos = np.arange(self.indicator.size) if self.positions is None else self.positions
        return pos[self.indicator[pos] == 0]


@dataclass(frozen=True)
class DenoiseConfig:
    lr: float
    beta: float
    protect: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.beta < 0 or self.lr < 0:
            raise ValueError("lr and beta must be non-negative")

    @property
    def strength(self) -> float:
        return self.lr * self.beta


def detect_noise(
    scores: Sequence[float],
    positions: Iterable[int] | None = None,
    basis: str = "grad_norm",
    threshold: float | None = None,
) -> NoiseMask:
    """Flag tokens whose score is strictly below the mean score.

    With ``positions`` the mean and the flags cover those indices only.
    Ties with the threshold count as critical.
    """
    scores = np.asarray(scores, dtype=float)
    pos = np.arange(scores.size) if positions is None else np.asarray(list(positions), dtype=np.int64)
    indicator = np.zeros(scores.size, dtype=np.int8)
    if pos.size == 0:
        return NoiseMask(indicator, float("nan"), basis, pos)
    t = float(scores[pos].mean()) if threshold is None else float(threshold)
    indicator[pos] = scores[pos] < t
    return NoiseMask(indicator, t, basis, pos)


def denoise_embeddings(E: np.ndarray, grads: np.ndarray, mask: NoiseMask, config: DenoiseConfig) -> np.ndarray:
    """``E'_i = E_i - I_i * grad_i * lr * beta`` on noise rows outside ``protect``.

    All other rows are returned bit-identical.  The result is a plain
    array, so the perturbation carries no derivative downstream.
    """
    E, grads = np.asarray(E), np.asarray(grads)
    if E.shape != grads.shape or E.ndim != 2 or mask.indicator.shape != (E.shape[0],):
        raise DimensionError(f"denoise: E {E.shape}, grads {grads.shape}, mask {mask.indicator.shape}")
    rows = np.flatnonzero(mask.indicator)
    if config.protect:
        rows = rows[~np.isin(rows, list(config.protect))]
    out = E.copy()
    if rows.size and config.beta != 0:
        out[rows] = E[rows] - grads[rows] * config.lr * config.beta
    return out


def default_protect(sample: LabeledSample) -> frozenset[int]:
    """The <bos> token, the question span and the answer tokens."""
    q0 = sample.question_span[0]
    return frozenset([0, *range(q0, len(sample))])


def manual_denoise_analysis(
    params: M.Parameters,
    sample: LabeledSample,
    strengths: Sequence[float],
    threshold_mode: str | float = "mean",
    loss_mask_mode: str = "answer_only",
) -> dict:
    """Detect noise by per-token IG, perturb it at each strength, re-measure attention.

    ``threshold_mode`` is ``"mean"`` or a percentile in [0, 100] of the
    context IG scores.  Each strength ``s`` applies
    ``denoise_embeddings`` with ``lr = s, beta = 1``.
    """
    ev = attr.collect_evidence(params, sample, loss_mask_mode)
    ans = attr.answer_positions(sample)
    ctx = sample.context_positions[1:]
    ig = attr.ig_token_scores(ev, ans)
    if not np.any(ig[ctx] > 0):
        raise AnalysisUnavailableError("per-token IG is zero on every context token")
    threshold = None if threshold_mode == "mean" else float(np.percentile(ig[ctx], float(threshold_mode)))
    mask = detect_noise(ig, ctx, basis="ig_token", threshold=threshold)
    sets = {r: v for r, v in attr.class_sets(sample).items() if v.size}
    tokens = np.asarray(sample.tokens)
    E = M.base_embeddings(params, tokens)[0]
    protect = default_protect(sample)
    n_layers = params.config.n_layers

    def measure(override):
        logits, trace = M.forward(params, tokens, embedding_override=override)
        amap = trace.attention_map()
        mass = attr.class_attention_mass(amap, ans, sets)
        per_layer = []
        for layer in range(n_layers):
            m = attr.class_attention_mass(amap, ans, sets, layers=[layer])
            per_layer.append(m.get("sup", 0.0) + m.get("inter", 0.0))
        loss = M.lm_loss(logits, tokens, loss_mask_mode, [sample.answer_span], [len(sample)]).item()
        return mass, per_layer, loss

    before, before_layers, before_loss = measure(None)
    before_crit = before.get("sup", 0.0) + before.get("inter", 0.0)
    rows = []
    for s in strengths:
        E2 = denoise_embeddings(E, ev.embedding_grad, mask, DenoiseConfig(lr=float(s), beta=1.0, protect=protect))
        mass, per_layer, loss = measure(E2)
        crit = mass.get("sup", 0.0) + mass.get("inter", 0.0)
        rows.append({
            "strength": float(s),
            "mass": mass,
            "critical": crit,
            "critical_by_layer": per_layer,
            "critical_last": per_layer[-1],
            "ratio": crit / before_crit if before_crit > 0 else float("nan"),
            "ratio_last": per_layer[-1] / before_layers[-1] if before_layers[-1] > 0 else float("nan"),
            "loss": loss,
        })
    labels = np.isin(ctx, np.concatenate([sets.get("sup", []), sets.get("inter", [])]))
    flagged = mask.indicator[ctx] == 1
    return {
        "seed": sample.seed,
        "threshold": mask.threshold,
        "threshold_mode": threshold_mode,
        "mask_density": mask.density,
        "noise_flagged_critical": int((flagged & labels).sum()),
        "noise_flagged_irrelevant": int((flagged & ~labels).sum()),
        "before": before,
        "before_by_layer": before_layers,
        "before_loss": before_loss,
        "sweep": rows,
    }
