"""Command-line entry point: gen-data, train, probe, denoise-analyze, report.

Config files are JSON.  Unknown keys are rejected.  A training config has
two optional sections::

    {"model": {<ModelConfig fields>}, "train": {<TrainConfig fields>}}

Exit codes: 0 ok, 1 internal error, 2 config/parse error, 3 input
integrity error (digest mismatch, locked run dir), 4 empty input.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import attribution as attr
from . import denoise as D
from . import model as M
from . import taskgen as T
from . import trainer as TR

log = logging.getLogger("cdtlab")

RUN_ROOT_ENV = "CDTLAB_RUN_ROOT"
EXIT_OK, EXIT_INTERNAL, EXIT_PARSE, EXIT_INTEGRITY, EXIT_EMPTY = 0, 1, 2, 3, 4
EMPTY = "NA"  # explicit marker for a value a run did not record


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# config


def load_json(path: str | Path) -> dict:
    """Parse a JSON object; syntax errors become exit 2 with line:column."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CLIError(EXIT_PARSE, f"{path}: cannot read: {e.strerror}") from e
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise CLIError(EXIT_PARSE, f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(obj, dict):
        raise CLIError(EXIT_PARSE, f"{path}:1:1: expected a JSON object")
    return obj


def _build(cls, d: dict, where: str):
    try:
        return cls.from_dict(d)
    except (TypeError, ValueError) as e:
        raise CLIError(EXIT_PARSE, f"{where}: {e}") from e


def parse_train_config(d: dict, where: str = "config") -> tuple[M.ModelConfig, TR.TrainConfig]:
    unknown = set(d) - {"model", "train"}
    if unknown:
        raise CLIError(EXIT_PARSE, f"{where}: unknown top-level keys {sorted(unknown)}")
    mc = _build(M.ModelConfig, d.get("model", {}), f"{where}.model")
    tc = _build(TR.TrainConfig, d.get("train", {}), f"{where}.train")
    return mc, tc


# run directories


@dataclass
class RunManifest:
    config: dict
    dataset_digest: str
    code_version: str = __version__
    files: list[str] = field(default_factory=list)
    status: str = "running"
    overrides: dict = field(default_factory=dict)

    def write(self, run_dir: Path):
        (run_dir / "manifest.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def read(cls, run_dir: Path) -> "RunManifest":
        return cls(**json.loads((run_dir / "manifest.json").read_text()))

    def missing_files(self, run_dir: Path) -> list[str]:
        return [f for f in self.files if not (run_dir / f).exists()]


class RunLock:
    """Exclusive ownership of a run directory via an O_EXCL lock file."""

    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as e:
            raise CLIError(EXIT_INTEGRITY, f"{self.path.parent}: run directory is locked by another command") from e
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def manifest_path(dataset: Path) -> Path:
    return dataset.with_name(dataset.name + ".manifest.json")


def read_checked_dataset(dataset: Path) -> tuple[list[T.LabeledSample], str]:
    """Load a dataset and confirm its bytes match the gen-data manifest."""
    mpath = manifest_path(dataset)
    if not dataset.exists():
        raise CLIError(EXIT_INTEGRITY, f"{dataset}: dataset not found")
    if not mpath.exists():
        raise CLIError(EXIT_INTEGRITY, f"{mpath}: dataset manifest not found")
    manifest = load_json(mpath)
    digest = T.file_digest(dataset)
    if manifest.get("file_digest") != digest:
        raise CLIError(EXIT_INTEGRITY, f"{dataset}: digest {digest[:12]} does not match manifest {str(manifest.get('file_digest'))[:12]}")
    samples = read_samples(dataset)
    return samples, digest


def read_samples(dataset: Path) -> list[T.LabeledSample]:
    try:
        samples = T.read_dataset(dataset)
    except OSError as e:
        raise CLIError(EXIT_INTEGRITY, f"{dataset}: cannot read: {e.strerror}") from e
    except (ValueError, KeyError) as e:
        raise CLIError(EXIT_PARSE, f"{dataset}: malformed sample line: {e}") from e
    if not samples:
        raise CLIError(EXIT_EMPTY, f"{dataset}: dataset is empty")
    return samples


def resolve_checkpoint(args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    if args.run_dir:
        ckpts = sorted(Path(args.run_dir).glob("ckpt_step*.bin"), key=lambda p: int(p.stem[len("ckpt_step"):]))
        if ckpts:
            return ckpts[-1]
        raise CLIError(EXIT_INTEGRITY, f"{args.run_dir}: no checkpoint found")
    raise CLIError(EXIT_PARSE, "give --checkpoint or --run-dir")


def _out(path: str | None, text: str):
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _fmt(v) -> str:
    if v is None:
        return EMPTY
    if isinstance(v, float):
        return EMPTY if not np.isfinite(v) else f"{v:.6g}"
    return str(v)


def csv_table(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


# commands


def cmd_gen_data(args) -> int:
    if not args.config:
        raise CLIError(EXIT_PARSE, "gen-data needs --config <spec.json>")
    if not args.dataset:
        raise CLIError(EXIT_PARSE, "gen-data needs --dataset <output.jsonl>")
    spec = _build(T.GenSpec, load_json(args.config), str(args.config))
    if args.seed is not None:
        spec = T.GenSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    samples, manifest = T.gen_dataset(spec)
    out = Path(args.dataset)
    out.parent.mkdir(parents=True, exist_ok=True)
    T.write_dataset(samples, out)
    record = json.loads(manifest.to_json())
    record["file_digest"] = T.file_digest(out)
    record["sample_count"] = len(samples)
    manifest_path(out).write_text(json.dumps(record, indent=2, sort_keys=True))
    audit = manifest.audit
    print(f"wrote {len(samples)} samples to {out}; audit {audit['passed']}/{audit['checked']}; digest {manifest.corpus_digest[:16]}")
    if audit["failures"]:
        for idx, problems in sorted(audit["failures"].items(), key=lambda kv: int(kv[0])):
            print(f"audit failure sample {idx}: {'; '.join(problems)}", file=sys.stderr)
        return EXIT_INTEGRITY
    return EXIT_OK


def cmd_train(args) -> int:
    if not args.dataset:
        raise CLIError(EXIT_PARSE, "train needs --dataset")
    raw = load_json(args.config) if args.config else {}
    mc, tc = parse_train_config(raw, str(args.config or "config"))
    overrides = {k: getattr(args, k) for k in ("objective", "lr", "beta", "seed", "head_mode", "top_k") if getattr(args, k) is not None}
    if overrides:
        tc = _build(TR.TrainConfig, {**asdict(tc), **overrides}, "flags")
    samples, digest = read_checked_dataset(Path(args.dataset))
    longest = max(len(s) for s in samples)
    if longest > mc.max_seq:
        raise CLIError(EXIT_PARSE, f"model.max_seq {mc.max_seq} is shorter than the longest sample ({longest})")
    if mc.vocab_size < len(T.DEFAULT_VOCAB):
        raise CLIError(EXIT_PARSE, f"model.vocab_size {mc.vocab_size} < task vocabulary {len(T.DEFAULT_VOCAB)}")
    run_dir = Path(args.run_dir) if args.run_dir else Path(os.environ.get(RUN_ROOT_ENV, "runs")) / f"{tc.objective.lower()}_seed{tc.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    with RunLock(run_dir):
        config_echo = {"model": asdict(mc), "train": asdict(tc)}
        if (run_dir / "manifest.json").exists():
            prev = RunManifest.read(run_dir)
            if prev.dataset_digest != digest:
                raise CLIError(EXIT_INTEGRITY, f"{run_dir}: existing run used dataset {prev.dataset_digest[:12]}, got {digest[:12]}")
            if prev.config != config_echo:
                raise CLIError(EXIT_INTEGRITY, f"{run_dir}: existing run has a different config; use a fresh --run-dir")
        manifest = RunManifest(config=config_echo, dataset_digest=digest, overrides=overrides)
        manifest.write(run_dir)
        _, runlog, ckpts = TR.train(tc, samples, mc, run_dir=run_dir)
        files = sorted({p.name for p in run_dir.glob("ckpt_step*.bin")} | {"runlog.csv"})
        manifest.files = files
        manifest.status = "complete"
        manifest.write(run_dir)
    last = runlog.rows[-1] if runlog.rows else {}
    print(f"{run_dir}: {tc.objective} {tc.steps} steps; final exact match {_fmt(last.get('eval_exact_match'))}; log digest {runlog.digest()[:16]}")
    return EXIT_OK


def cmd_probe(args) -> int:
    if not args.dataset:
        raise CLIError(EXIT_PARSE, "probe needs --dataset")
    samples = read_samples(Path(args.dataset))
    params, _ = M.load_checkpoint(resolve_checkpoint(args))
    k = args.top_k or 30
    verdicts = TR.predict(params, samples)
    records = []
    for s, ok in zip(samples, verdicts):
        rec = attr.probe_sample(params, s, k=k)
        rec["correct"] = bool(ok)
        records.append(rec)
    _out(args.out, probe_report(records))
    return EXIT_OK


def probe_report(records: list[dict]) -> str:
    classes = list(T.CONTEXT_CLASSES)
    header = ["seed", "correct", "loss", "spearman"]
    header += [f"ig_{c}" for c in classes] + [f"fr_{c}" for c in classes] + [f"gradnorm_{c}" for c in classes]
    rows = []
    pooled_ig, pooled_norm = [], []
    for r in records:
        cm = r["proportionality"]["class_means"]
        rows.append(
            [r["seed"], int(r["correct"]), r["loss"], r["proportionality"]["spearman"]]
            + [r["ig"].get(c) for c in classes]
            + [r["fr"].get(c) for c in classes]
            + [cm.get(c, {}).get("grad_norm") for c in classes]
        )
    for r in records:
        ctx_ig, ctx_norm = np.asarray(r["token_ig"]), np.asarray(r["grad_norm"])
        # per-sample min-max keeps samples with different loss scales commensurable
        pooled_ig.append(_unit(ctx_ig[1:]))
        pooled_norm.append(_unit(ctx_norm[1:]))
    text = "# per-sample attribution\n" + csv_table(header, rows)
    text += "\n# class means split by prediction\n"
    agg = []
    for label, keep in (("correct", True), ("wrong", False), ("all", None)):
        sel = [r for r in records if keep is None or r["correct"] == keep]
        for metric in ("ig", "fr"):
            agg.append([label, metric, len(sel)] + [_mean([r[metric].get(c) for r in sel]) for c in classes])
    text += csv_table(["split", "metric", "n"] + classes, agg)
    rhos = [r["proportionality"]["spearman"] for r in records if r["proportionality"]["spearman"] is not None]
    pooled = attr.spearman(np.concatenate(pooled_ig), np.concatenate(pooled_norm)) if records else None
    text += "\n# proportionality\n" + csv_table(
        ["per_sample_mean", "per_sample_n", "pooled"], [[_mean(rhos), len(rhos), pooled]]
    )
    return text


def _total(col: np.ndarray) -> float | None:
    finite = col[np.isfinite(col)]
    return float(finite.sum()) if finite.size else None


def _unit(x: np.ndarray) -> np.ndarray:
    span = np.ptp(x) if x.size else 0.0
    return (x - x.min()) / span if span > 0 else np.zeros_like(x)


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def parse_sweep(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise CLIError(EXIT_PARSE, f"--sweep: {e}") from e
    if not vals:
        raise CLIError(EXIT_EMPTY, "--sweep is empty")
    if any(v < 0 for v in vals):
        raise CLIError(EXIT_PARSE, "--sweep strengths must be non-negative")
    return vals


def cmd_denoise_analyze(args) -> int:
    if not args.dataset:
        raise CLIError(EXIT_PARSE, "denoise-analyze needs --dataset")
    sweep_text = args.sweep or "0,0.3,1,3,10"
    strengths = parse_sweep(sweep_text)
    samples = read_samples(Path(args.dataset))
    params, _ = M.load_checkpoint(resolve_checkpoint(args))
    results = []
    for s in samples:
        try:
            results.append(D.manual_denoise_analysis(params, s, strengths))
        except D.AnalysisUnavailableError as e:
            log.warning("sample %d skipped: %s", s.seed, e)
    _out(args.out, denoise_report(sweep_text, strengths, results))
    return EXIT_OK


def denoise_report(sweep_text: str, strengths: list[float], results: list[dict]) -> str:
    text = f"# sweep: {sweep_text}\n# samples: {len(results)}\n"
    classes = list(T.CONTEXT_CLASSES)
    rows = []
    for i, s in enumerate(strengths):
        sweep = [r["sweep"][i] for r in results]
        rows.append(
            [s, _mean([w["critical"] for w in sweep]), _mean([w["critical_last"] for w in sweep]), _mean([w["ratio"] for w in sweep]), _mean([w["loss"] for w in sweep])]
            + [_mean([w["mass"].get(c) for w in sweep]) for c in classes]
        )
    text += "\n# strength -> attention mass\n"
    text += csv_table(["strength", "critical_mass", "critical_mass_last_layer", "ratio", "loss"] + [f"mass_{c}" for c in classes], rows)
    before = [_mean([r["before"].get(c) for r in results]) for c in classes]
    after = [_mean([r["sweep"][-1]["mass"].get(c) for r in results]) for c in classes]
    text += f"\n# class mass before / after strength {strengths[-1]:g}\n"
    text += csv_table(["when"] + classes, [["before"] + before, ["after"] + after])
    text += "\n# mask\n" + csv_table(
        ["density", "flagged_critical", "flagged_irrelevant"],
        [[_mean([r["mask_density"] for r in results]), sum(r["noise_flagged_critical"] for r in results), sum(r["noise_flagged_irrelevant"] for r in results)]],
    )
    return text


def cmd_report(args) -> int:
    if not args.run_dir:
        raise CLIError(EXIT_PARSE, "report needs at least one --run-dir")
    runs = []
    for d in args.run_dir:
        d = Path(d)
        status, label = "complete", d.name
        if not (d / "runlog.csv").exists():
            print(f"warning: {d} has no runlog.csv", file=sys.stderr)
            runs.append((label, "missing", None, {}))
            continue
        objective = EMPTY
        if (d / "manifest.json").exists():
            m = RunManifest.read(d)
            objective = m.config.get("train", {}).get("objective", EMPTY)
            if m.status != "complete" or m.missing_files(d):
                status = "incomplete"
        else:
            status = "incomplete"
        if status != "complete":
            print(f"warning: {d} is incomplete", file=sys.stderr)
        runs.append((label, status, TR.RunLog.read(d / "runlog.csv"), {"objective": objective}))
    if not any(r[2] is not None for r in runs):
        raise CLIError(EXIT_EMPTY, "no run logs found")
    _out(args.out, comparison_report(runs))
    return EXIT_OK


def comparison_report(runs: list[tuple]) -> str:
    text = "# runs\n" + csv_table(
        ["run", "objective", "status", "rows", "final_step", "final_exact_match"],
        [
            [label, meta.get("objective", EMPTY), status, len(rl.rows) if rl else 0,
             rl.rows[-1].get("step") if rl and rl.rows else None,
             rl.rows[-1].get("eval_exact_match") if rl and rl.rows else None]
            for label, status, rl, meta in runs
        ],
    )
    logged = [(label, rl) for label, _, rl, _ in runs if rl is not None]
    steps = sorted({int(r["step"]) for _, rl in logged for r in rl.rows})

    def side_by_side(column: str) -> str:
        by_run = [{int(r["step"]): r.get(column) for r in rl.rows} for _, rl in logged]
        return csv_table(["step"] + [label for label, _ in logged], [[s] + [b.get(s) for b in by_run] for s in steps])

    text += "\n# eval exact match\n" + side_by_side("eval_exact_match")
    text += "\n# train loss\n" + side_by_side("train_loss")
    text += "\n# detection-pass loss\n" + side_by_side("detect_loss")
    text += "\n# ig_sup\n" + side_by_side("ig_sup")
    text += "\n# critical attention mass\n" + side_by_side("critical_attention_mass")
    text += "\n# detection precision\n" + side_by_side("det_precision")
    text += "\n# detection recall\n" + side_by_side("det_recall")
    timing_rows = []
    for label, rl in logged:
        tot = [_total(rl.column(c)) for c in TR.TIMING_COLUMNS] if rl.rows else [None] * 3
        timing_rows.append([label] + tot)
    text += "\n# wall-clock seconds per phase\n" + csv_table(["run", *TR.TIMING_COLUMNS], timing_rows)
    return text


# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdtlab", description="Context denoising training lab")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, run_dir_multi=False):
        sp.add_argument("--config")
        sp.add_argument("--dataset")
        if run_dir_multi:
            sp.add_argument("--run-dir", nargs="+")
        else:
            sp.add_argument("--run-dir")
        sp.add_argument("--objective", choices=["CE", "CDT"])
        sp.add_argument("--lr", type=float)
        sp.add_argument("--beta", type=float)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--sweep")
        sp.add_argument("--top-k", type=int)
        sp.add_argument("--head-mode", choices=["all", "top_k_heads"])
        sp.add_argument("--checkpoint")
        sp.add_argument("--out")

    for name in ("gen-data", "train", "probe", "denoise-analyze"):
        common(sub.add_parser(name))
    common(sub.add_parser("report"), run_dir_multi=True)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "probe": cmd_probe,
    "denoise-analyze": cmd_denoise_analyze,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_PARSE if e.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except Exception as e:  # noqa: BLE001
        log.exception("internal error: %s", e)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
