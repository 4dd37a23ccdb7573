"""CE baseline, two-pass CDT steps, evaluation and the logged training loop."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attribution as attr
from . import diffcore as dc
from . import model as M
from .denoise import DenoiseConfig, default_protect, denoise_embeddings, detect_noise
from .diffcore import DimensionError
from .taskgen import LabeledSample

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; a diagnostic checkpoint was written."""


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "CE"
    lr: float = 3e-4
    beta: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    steps: int = 1000
    batch_size: int = 16
    seed: int = 0
    loss_mask_mode: str = "answer_only"
    eval_interval: int = 100
    head_mode: str = "all"
    grad_clip: float = 1.0
    checkpoint_interval: int = 0
    warmup_skip: int = 0
    top_k: int = 30
    eval_samples: int = 200
    probe_samples: int = 16

    def __post_init__(self):
        if self.objective not in ("CE", "CDT"):
            raise ValueError(f"objective must be CE or CDT, got {self.objective!r}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.lr <= 0 or self.steps < 0 or self.batch_size < 1:
            raise ValueError("lr must be > 0, steps >= 0, batch_size >= 1")
        if self.loss_mask_mode not in ("answer_only", "all_positions"):
            raise ValueError(f"unknown loss_mask_mode {self.loss_mask_mode!r}")
        if self.head_mode not in ("all", "top_k_heads"):
            raise ValueError(f"unknown head_mode {self.head_mode!r}")

    @property
    def strength(self) -> float:
        return self.lr * self.beta

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


# optimizer


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: M.Parameters) -> "AdamState":
        return cls(
            0,
            {k: np.zeros_like(a) for k, a in params.tensors.items()},
            {k: np.zeros_like(a) for k, a in params.tensors.items()},
        )


def adam_update(
    params: M.Parameters,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.95),
    eps: float = 1e-8,
) -> tuple[M.Parameters, AdamState]:
    """Bias-corrected Adam; returns new parameters and state."""
    b1, b2 = betas
    t = state.step + 1
    new_t, new_m, new_v = {}, {}, {}
    for name, p in params.tensors.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise DimensionError(f"adam: {name} param {p.shape}, grad {g.shape}, state {state.m[name].shape}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_t[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return M.Parameters(params.config, new_t), AdamState(t, new_m, new_v)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


# batches


@dataclass
class Batch:
    tokens: np.ndarray  # (b, n), right-padded
    lengths: np.ndarray
    answer_spans: list[tuple[int, int]]
    samples: list[LabeledSample]

    @classmethod
    def collate(cls, samples: Sequence[LabeledSample], pad_id: int = 0) -> "Batch":
        n = max(len(s) for s in samples)
        tokens = np.full((len(samples), n), pad_id, dtype=np.int64)
        for i, s in enumerate(samples):
            tokens[i, : len(s)] = s.tokens
        return cls(tokens, np.array([len(s) for s in samples]), [s.answer_span for s in samples], list(samples))


def _scored(batch: Batch, mode: str, per_sample: bool = False):
    return M.scored_positions(batch.tokens, mode, batch.answer_spans, batch.lengths, per_sample)


def _loss_and_grads(params: M.Parameters, batch: Batch, mode: str, override: np.ndarray | None = None):
    rows, cols, targets, weights = _scored(batch, mode)
    with dc.Tape():
        logits, trace = M.forward(params, batch.tokens, embedding_override=override, logit_positions=(rows, cols))
        loss = M.lm_loss_at(logits, targets, weights)
        g = dc.backward(loss)
    grads = {k: g[t] for k, t in trace.params.items()}
    return loss.item(), grads


def _apply(params, state, grads, config: TrainConfig):
    grads, norm = clip_by_global_norm(grads, config.grad_clip)
    params, state = adam_update(
        params, grads, state, config.lr, (config.adam_beta1, config.adam_beta2), config.adam_eps
    )
    return params, state, norm


def ce_step(params: M.Parameters, state: AdamState, batch: Batch, config: TrainConfig):
    """One forward, one backward over all parameters, one Adam update."""
    t0 = time.perf_counter()
    loss, grads = _loss_and_grads(params, batch, config.loss_mask_mode)
    t1 = time.perf_counter()
    params, state, norm = _apply(params, state, grads, config)
    t2 = time.perf_counter()
    stats = {
        "loss": loss,
        "loss_detect": float("nan"),
        "grad_norm": norm,
        "mask_density": float("nan"),
        "t_detect": float("nan"),  # CE has no detection phase
        "t_emphasize": t1 - t0,
        "t_optimizer": t2 - t1,
    }
    return params, state, stats


def detection_pass(params: M.Parameters, batch: Batch, mode: str):
    """Frozen-weight pass with only the layer-0 input tapped.

    Each sample's gradient is that of its own loss.  Returns the layer-0
    inputs, their gradients and the batch-mean loss value.
    """
    rows, cols, targets, weights = _scored(batch, mode, per_sample=True)
    with dc.Tape():
        logits, trace = M.forward(
            params, batch.tokens, taps=("embeddings",), frozen=True, logit_positions=(rows, cols)
        )
        loss = M.lm_loss_at(logits, targets, weights)
        g = dc.backward(loss, [trace.embeddings])
    # same reduction as the emphasizing pass, for comparison
    _, _, _, mean_w = _scored(batch, mode)
    logp = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    mean_loss = float(-(mean_w * logp[np.arange(len(targets)), targets]).sum())
    return trace.embeddings.data, g[trace.embeddings], mean_loss


def detect_batch(batch: Batch, grads: np.ndarray) -> list:
    masks = []
    for i, s in enumerate(batch.samples):
        norms = attr.embgrad_norms(grads[i, : len(s)])
        masks.append(detect_noise(norms, s.context_positions[1:]))
    return masks


def cdt_step(params: M.Parameters, state: AdamState, batch: Batch, config: TrainConfig, denoise: bool = True):
    """Detect noise with a frozen pass, perturb it, then train on the denoised input.

    With ``denoise=False`` (warm-up skip) the step is a plain CE step.
    """
    if config.objective != "CDT":
        raise ValueError("cdt_step requires objective CDT")
    if not denoise:
        return ce_step(params, state, batch, config)
    t0 = time.perf_counter()
    E, G, loss_a = detection_pass(params, batch, config.loss_mask_mode)
    masks = detect_batch(batch, G)
    E2 = E.copy()
    for i, (s, mask) in enumerate(zip(batch.samples, masks)):
        n = len(s)
        cfg = DenoiseConfig(config.lr, config.beta, default_protect(s))
        indicator = np.zeros(E.shape[1], dtype=np.int8)
        indicator[:n] = mask.indicator
        full = type(mask)(indicator, mask.threshold, mask.basis, mask.positions)
        E2[i] = denoise_embeddings(E[i], G[i], full, cfg)
    t1 = time.perf_counter()
    loss_c, grads = _loss_and_grads(params, batch, config.loss_mask_mode, override=E2)
    t2 = time.perf_counter()
    params, state, norm = _apply(params, state, grads, config)
    t3 = time.perf_counter()
    stats = {
        "loss": loss_c,
        "loss_detect": loss_a,
        "grad_norm": norm,
        "mask_density": float(np.mean([m.density for m in masks])),
        "t_detect": t1 - t0,
        "t_emphasize": t2 - t1,
        "t_optimizer": t3 - t2,
    }
    return params, state, stats


# evaluation


def predict(params: M.Parameters, samples: Sequence[LabeledSample], batch_size: int = 64) -> np.ndarray:
    """Per-sample exact match of teacher-forced argmax over the answer span.

    Equivalent to greedy decoding: a sample counts only if every answer
    token is the argmax given the correct prefix.
    """
    verdicts = []
    for i in range(0, len(samples), batch_size):
        batch = Batch.collate(samples[i : i + batch_size])
        rows, cols, targets, _ = _scored(batch, "answer_only")
        logits, _ = M.forward(params, batch.tokens, logit_positions=(rows, cols))
        hit = logits.data.argmax(axis=-1) == targets
        ok = np.ones(len(batch.samples), dtype=bool)
        np.logical_and.at(ok, rows, hit)
        verdicts.append(ok)
    return np.concatenate(verdicts) if verdicts else np.zeros(0, dtype=bool)


def _topk(scores: np.ndarray, positions: np.ndarray, k: int) -> np.ndarray:
    k = min(k, positions.size)
    order = np.argsort(-scores[positions], kind="stable")[:k]
    return positions[order]


def detection_counts(sample: LabeledSample, ev: attr.AttentionEvidence, k: int = 30) -> dict:
    """Top-k detection by gradient norm and by attention, scored against labels."""
    ctx = sample.context_positions[1:]
    crit = np.isin(ctx, np.concatenate([sample.class_positions("sup"), sample.class_positions("inter")]))
    crit_set = set(ctx[crit].tolist())
    ans = attr.answer_positions(sample)
    out = {}
    for name, scores in (
        ("grad", attr.embgrad_norms(ev.embedding_grad)),
        ("attention", attr.attention_onto(ev.attention, ans)),
    ):
        top = _topk(scores, ctx, k)
        hits = sum(int(i in crit_set) for i in top)
        out[name] = {"selected": len(top), "hits": hits, "critical": len(crit_set), "irrelevant": len(top) - hits}
    return out


def _ratio(a: float, b: float) -> float:
    return a / b if b else float("nan")


def precision_recall(selected, critical) -> tuple[float, float]:
    """Precision and recall of a selected position set against labelled critical positions."""
    selected, critical = set(np.asarray(selected).tolist()), set(np.asarray(critical).tolist())
    hits = len(selected & critical)
    return _ratio(hits, len(selected)), _ratio(hits, len(critical))


def evaluate(
    params: M.Parameters,
    samples: Sequence[LabeledSample],
    k: int = 30,
    probe_samples: int | None = None,
    head_mode: str = "all",
    loss_mask_mode: str = "answer_only",
) -> dict:
    """Exact match plus detection, IG and FR statistics.

    Attribution statistics use the first ``probe_samples`` samples (all by
    default); exact match always uses every sample.
    """
    verdicts = predict(params, samples)
    probe = list(samples if probe_samples is None else samples[:probe_samples])
    det = {name: {"selected": 0, "hits": 0, "critical": 0, "irrelevant": 0} for name in ("grad", "attention")}
    mask_tp = mask_sel = mask_crit = 0
    ig_rows, fr_rows, mass_rows = [], [], []
    for s in probe:
        ev = attr.collect_evidence(params, s, loss_mask_mode)
        for name, c in detection_counts(s, ev, k).items():
            for key in c:
                det[name][key] += c[key]
        ctx = s.context_positions[1:]
        mask = detect_noise(attr.embgrad_norms(ev.embedding_grad), ctx)
        crit_true = set(np.concatenate([s.class_positions("sup"), s.class_positions("inter")]).tolist())
        kept = set(mask.critical.tolist())
        mask_tp += len(kept & crit_true)
        mask_sel += len(kept)
        mask_crit += len(crit_true)
        sets = {r: v for r, v in attr.class_sets(s).items() if v.size}
        ans = attr.answer_positions(s)
        ig_rows.append(attr.ig_class_score(ev, sets, ans, head_mode=head_mode, top_heads=k).scores)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fr_rows.append(attr.fr_score(ev.attention, ans, k, sets).scores)
        mass_rows.append(attr.class_attention_mass(ev.attention, ans, sets))

    def class_means(rows):
        keys = sorted({r for row in rows for r in row})
        return {r: float(np.mean([row[r] for row in rows if r in row])) for r in keys}

    detection = {
        name: {
            "precision": _ratio(c["hits"], c["selected"]),
            "recall": _ratio(c["hits"], c["critical"]),
            "irrelevant_fp": c["irrelevant"],
            **c,
        }
        for name, c in det.items()
    }
    mass = class_means(mass_rows)
    return {
        "exact_match": float(verdicts.mean()) if verdicts.size else float("nan"),
        "verdicts": verdicts.tolist(),
        "detection": detection,
        "mask_precision": _ratio(mask_tp, mask_sel),
        "mask_recall": _ratio(mask_tp, mask_crit),
        "ig": class_means(ig_rows),
        "fr": class_means(fr_rows),
        "attention_mass": mass,
        "critical_mass": mass.get("sup", 0.0) + mass.get("inter", 0.0),
    }


# run log

RUNLOG_COLUMNS = (
    "step",
    "train_loss",
    "detect_loss",
    "eval_exact_match",
    "ig_sup",
    "ig_inter",
    "ig_irr",
    "ig_low",
    "critical_attention_mass",
    "det_precision",
    "det_recall",
    "mask_density",
    "grad_norm",
    "t_detect",
    "t_emphasize",
    "t_optimizer",
)
TIMING_COLUMNS = ("t_detect", "t_emphasize", "t_optimizer")


@dataclass
class RunLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict):
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("RunLog steps must increase")
        self.rows.append({c: row.get(c, float("nan")) for c in RUNLOG_COLUMNS})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, timing: bool = True) -> str:
        cols = [c for c in RUNLOG_COLUMNS if timing or c not in TIMING_COLUMNS]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in cols])
        return buf.getvalue()

    def digest(self) -> str:
        """SHA-256 of the CSV without wall-clock columns."""
        return hashlib.sha256(self.to_csv(timing=False).encode()).hexdigest()

    def write(self, path: str | Path):
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path: str | Path) -> "RunLog":
        out = cls()
        with open(path) as fh:
            for rec in csv.DictReader(fh):
                row = {k: (int(v) if k == "step" else (float(v) if v != "" else float("nan"))) for k, v in rec.items()}
                out.rows.append(row)
        return out


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if np.isnan(v) else repr(v)


# training loop


def split_by_parity(samples: Sequence[LabeledSample]) -> tuple[list[LabeledSample], list[LabeledSample]]:
    """Train on even sample seeds, hold out odd ones."""
    train = [s for s in samples if s.seed % 2 == 0]
    held = [s for s in samples if s.seed % 2 == 1]
    return train, held


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> np.ndarray:
    """Indices for 1-based ``step``: consecutive slices of per-epoch permutations."""
    start = (step - 1) * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        take = min(batch_size - len(out), n - offset)
        out.extend(perm[offset : offset + take].tolist())
    return np.array(out)


def save_state(path: Path, params: M.Parameters, state: AdamState, log_rows: int, pending: list[dict] | None = None):
    arrays = {f"p/{k}": v for k, v in params.tensors.items()}
    arrays.update({f"m/{k}": v for k, v in state.m.items()})
    arrays.update({f"v/{k}": v for k, v in state.v.items()})
    meta = json.dumps(
        {"step": state.step, "log_rows": log_rows, "pending": pending or [], "config": asdict(params.config)}
    )
    np.savez(path, __meta__=np.frombuffer(meta.encode(), dtype=np.uint8), **arrays)


def load_state(path: Path) -> tuple[M.Parameters, AdamState, int, list[dict]]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        config = M.ModelConfig.from_dict(meta["config"])
        names = [k[2:] for k in z.files if k.startswith("p/")]
        params = M.Parameters(config, {k: z[f"p/{k}"].copy() for k in names})
        state = AdamState(meta["step"], {k: z[f"m/{k}"].copy() for k in names}, {k: z[f"v/{k}"].copy() for k in names})
    return params, state, meta["log_rows"], meta.get("pending", [])


def latest_state(run_dir: Path) -> Path | None:
    states = sorted(run_dir.glob("state_step*.npz"), key=lambda p: int(p.stem.removeprefix("state_step")))
    return states[-1] if states else None


def train(
    config: TrainConfig,
    dataset: Sequence[LabeledSample],
    model_config: M.ModelConfig,
    run_dir: str | Path | None = None,
    eval_set: Sequence[LabeledSample] | None = None,
    resume: bool = True,
    stop_after: int | None = None,
    on_step=None,
) -> tuple[M.Parameters, RunLog, list[Path]]:
    """Train for ``config.steps`` steps and log every ``eval_interval``.

    Without ``eval_set`` the dataset is split by sample-seed parity.  With
    ``run_dir`` the loop writes ``runlog.csv``, model checkpoints and
    optimizer state; an existing state file is resumed from.
    ``stop_after`` ends the loop early (used to emulate interruption).
    ``on_step(step, stats)`` is called after every optimizer step.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if eval_set is None:
        train_set, eval_set = split_by_parity(dataset)
    else:
        train_set = list(dataset)
    if not train_set:
        raise ValueError("no training samples")
    eval_set = list(eval_set)[: config.eval_samples]
    run_dir = Path(run_dir) if run_dir is not None else None
    checkpoints: list[Path] = []

    params = M.init_params(model_config)
    state = AdamState.zeros(params)
    runlog = RunLog()
    acc = _Accumulator()
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        found = latest_state(run_dir) if resume else None
        if found is not None:
            params, state, n_rows, acc.rows = load_state(found)
            if (run_dir / "runlog.csv").exists():
                runlog.rows = RunLog.read(run_dir / "runlog.csv").rows[:n_rows]
            log.info("resumed from %s at step %d", found.name, state.step)

    step_fn = cdt_step if config.objective == "CDT" else ce_step
    while state.step < config.steps:
        step = state.step + 1
        idx = batch_indices(step, len(train_set), config.batch_size, config.seed)
        batch = Batch.collate([train_set[i] for i in idx])
        if config.objective == "CDT":
            params_new, state_new, stats = cdt_step(params, state, batch, config, denoise=step > config.warmup_skip)
        else:
            params_new, state_new, stats = step_fn(params, state, batch, config)
        if not np.isfinite(stats["loss"]) or not params_new.all_finite():
            if run_dir is not None:
                M.save_checkpoint(params, run_dir / f"diverged_step{step}.bin", {"step": step - 1})
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        params, state = params_new, state_new
        acc.add(stats)
        if on_step is not None:
            on_step(step, stats)
        if step % config.eval_interval == 0 or step == config.steps:
            runlog.append(_log_row(step, params, eval_set, acc.flush(), config))
            if run_dir is not None:
                runlog.write(run_dir / "runlog.csv")
        if run_dir is not None and (
            (config.checkpoint_interval and step % config.checkpoint_interval == 0) or step == config.steps
        ):
            checkpoints.append(_checkpoint(run_dir, params, state, len(runlog.rows), acc.rows))
        if stop_after is not None and step >= stop_after:
            break
    return params, runlog, checkpoints


class _Accumulator:
    def __init__(self):
        self.rows: list[dict] = []

    def add(self, stats: dict):
        self.rows.append(stats)

    def flush(self) -> dict:
        rows, self.rows = self.rows, []
        if not rows:
            return {}
        out = {k: float(np.nanmean([r[k] for r in rows])) if any(np.isfinite(r[k]) for r in rows) else float("nan") for k in rows[0]}
        for k in TIMING_COLUMNS:
            vals = [r[k] for r in rows if np.isfinite(r[k])]
            out[k] = float(sum(vals)) if vals else float("nan")
        return out


def _log_row(step: int, params: M.Parameters, eval_set, stats: dict, config: TrainConfig) -> dict:
    ev = evaluate(params, eval_set, config.top_k, config.probe_samples, config.head_mode, config.loss_mask_mode)
    return {
        "step": step,
        "train_loss": stats.get("loss", float("nan")),
        "detect_loss": stats.get("loss_detect", float("nan")),
        "eval_exact_match": ev["exact_match"],
        "ig_sup": ev["ig"].get("sup", float("nan")),
        "ig_inter": ev["ig"].get("inter", float("nan")),
        "ig_irr": ev["ig"].get("irr", float("nan")),
        "ig_low": ev["ig"].get("low", float("nan")),
        "critical_attention_mass": ev["critical_mass"],
        "det_precision": ev["mask_precision"],
        "det_recall": ev["mask_recall"],
        "mask_density": stats.get("mask_density", float("nan")),
        "grad_norm": stats.get("grad_norm", float("nan")),
        **{k: stats.get(k, float("nan")) for k in TIMING_COLUMNS},
    }


def _checkpoint(run_dir: Path, params: M.Parameters, state: AdamState, log_rows: int, pending: list[dict]) -> Path:
    path = run_dir / f"ckpt_step{state.step}.bin"
    M.save_checkpoint(params, path, {"step": state.step})
    save_state(run_dir / f"state_step{state.step}.npz", params, state, log_rows, pending)
    return path
