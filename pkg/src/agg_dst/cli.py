"""Command-line surface: corpus synthesis, training, evaluation, attention
inspection, and the data-efficiency sweep.

Every command that writes files records a manifest first (command, config
snapshot, seeds, absolute paths, version, timestamps), so a run can be
reproduced from the manifest alone. Exit codes: 0 success, 1 training
divergence or failed internal check, 2 usage or I/O errors.
"""

from __future__ import annotations

import copy
import json
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from . import __version__
from . import corpus as corpus_mod
from . import evaluation
from . import synth
from . import training
from .model import DstModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainingDiverged

DEFAULT_CONFIG = {
    # model: encoder/decoder sizes are desk-scale; dropout is the published 0.2
    "model": {
        "d_word": 32,
        "d_char": 8,
        "hidden": 64,
        "combine": "sum",
        "variant": "agg",
        "init_attention": "bilinear",
        "dropout": 0.2,
        "max_decode_len": 8,
        "dtype": "f64",
    },
    # train: lr / teacher forcing / dropout / 5 seeds follow the published
    # setup; batch size, epoch cap, and patience are desk-scale choices
    "train": {
        "epochs": 100,
        "batch_size": 16,
        "lr": 0.001,
        "teacher_forcing": 0.5,
        "dropout": 0.2,
        "seeds": [11, 12, 13, 14, 15],
        "regime": "full",
        "patience": 6,
        "clip_norm": 10.0,
        "min_count": 1,
        "holdout_fraction": 0.1,
    },
    "gen": {
        "n_dialogues": 100,
        "domains_per_dialogue": [1, 3],
        "turns_per_domain": [2, 3],
        "chitchat_prob": 0.2,
        "revision_prob": 0.15,
        "seed": 0,
    },
}


def _merge_config(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in out:
            raise click.UsageError(f"unknown config key: {where}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise click.UsageError(f"config key {where} must be an object")
            out[key] = _merge_config(out[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        with open(path, encoding="utf-8") as fh:
            user = json.load(fh)
    except FileNotFoundError:
        raise click.UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise click.UsageError(f"config file {path} is not valid JSON: {exc}")
    return _merge_config(DEFAULT_CONFIG, user)


def model_config_from(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def train_config_from(cfg: dict) -> TrainConfig:
    raw = dict(cfg["train"])
    raw["seeds"] = tuple(raw["seeds"])
    return TrainConfig(**raw)


def gen_config_from(cfg: dict) -> synth.GenConfig:
    raw = dict(cfg["gen"])
    raw["domains_per_dialogue"] = tuple(raw["domains_per_dialogue"])
    raw["turns_per_domain"] = tuple(raw["turns_per_domain"])
    return synth.GenConfig(**raw)


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"agg-dst-{__version__}+{out.stdout.strip()}"
    except OSError:
        pass
    return f"agg-dst-{__version__}"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_manifest(path: Path, manifest: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def job_cap() -> int:
    raw = os.environ.get("AGG_DST_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _guard_overwrite(path: Path, force: bool):
    if path.exists() and not force:
        raise click.UsageError(f"{path} exists; pass --force to overwrite")


def _parse_seeds(seeds: str | None, cfg_train: TrainConfig) -> tuple[int, ...]:
    if seeds is None:
        return tuple(cfg_train.seeds)
    try:
        return tuple(int(s) for s in seeds.split(",") if s.strip())
    except ValueError:
        raise click.UsageError(f"bad --seeds value: {seeds!r}")


@click.group()
@click.version_option(version=__version__, prog_name="agg-dst")
def main():
    """Dialogue-state tracking with full or sparse supervision."""


# ---------------------------------------------------------------------------
# synth


@main.command("synth")
@click.option("--schema", "schema_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Schema JSON; bundled default when omitted.")
@click.option("--config", "config_path", default=None, help="Config JSON (gen section).")
@click.option("--n", "n_dialogues", type=int, default=None, help="Dialogue count.")
@click.option("--seed", type=int, default=None)
@click.option("--seen-services", default=None,
              help="Comma-separated services marked as seen in the header.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--force", is_flag=True)
def cmd_synth(schema_path, config_path, n_dialogues, seed, seen_services, out, force):
    """Generate a synthetic corpus file."""
    out = Path(out)
    _guard_overwrite(out, force)
    cfg = load_config(config_path)
    gen_cfg = gen_config_from(cfg)
    if n_dialogues is not None:
        gen_cfg.n_dialogues = n_dialogues
    if seed is not None:
        gen_cfg.seed = seed
    schema = synth.load_schema(schema_path) if schema_path else synth.default_schema()
    manifest = {
        "command": "synth",
        "version": version_string(),
        "started_at": utc_now(),
        "config": {"gen": asdict(gen_cfg)},
        "inputs": {"schema": str(Path(schema_path).resolve()) if schema_path else None},
        "outputs": {"corpus": str(out.resolve())},
        "seeds": [gen_cfg.seed],
    }
    manifest_path = out.with_suffix(out.suffix + ".manifest.json")
    write_manifest(manifest_path, manifest)
    corpus = synth.generate_corpus(schema, gen_cfg)
    if seen_services:
        corpus.seen_services = [s.strip() for s in seen_services.split(",") if s.strip()]
    corpus_mod.save_corpus(corpus, out)
    manifest["completed_at"] = utc_now()
    write_manifest(manifest_path, manifest)
    click.echo(f"wrote {len(corpus.dialogues)} dialogues to {out}", err=True)


# ---------------------------------------------------------------------------
# train


def _train_seed_job(args: dict) -> dict:
    """Worker for one seed; file-based so it can run in a separate process."""
    corpus = corpus_mod.load_corpus(args["corpus"])
    dev = corpus_mod.load_corpus(args["dev"]) if args["dev"] else None
    model_cfg = ModelConfig(**args["model_cfg"])
    train_cfg = TrainConfig(**{**args["train_cfg"],
                               "seeds": tuple(args["train_cfg"]["seeds"])})
    model, metrics = training.train_single(
        corpus, model_cfg, train_cfg, args["seed"], dev_corpus=dev,
        progress=args["progress"])
    seed_dir = Path(args["out"]) / f"seed_{args['seed']}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, seed_dir / "checkpoint.ckpt")
    with open(seed_dir / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics.to_json(), fh, indent=2)
        fh.write("\n")
    return metrics.to_json()


def _run_seed_jobs(jobs: list[dict]) -> list[dict]:
    cap = min(job_cap(), len(jobs))
    if cap <= 1:
        return [_train_seed_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=cap) as pool:
        return list(pool.map(_train_seed_job, jobs))


def _summarize_runs(per_seed: list[dict]) -> dict:
    flat = []
    for m in per_seed:
        flat.append({
            "best_dev_joint_ga": m["best_dev_joint_ga"],
            "best_epoch": float(m["best_epoch"]),
            "epochs_run": float(len(m["epoch_losses"])),
            "mean_epoch_time": (float(np.mean(m["epoch_times"]))
                                if m["epoch_times"] else 0.0),
            "total_time": m["total_time"],
            "n_examples": float(m["n_examples"]),
        })
    return training.seed_average(flat)


@main.command("train")
@click.option("--corpus", "corpus_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--dev", "dev_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Dev corpus; a held-out split is carved "
              "from --corpus when omitted.")
@click.option("--config", "config_path", default=None)
@click.option("--regime", type=click.Choice(corpus_mod.REGIMES), default=None)
@click.option("--variant", type=click.Choice(["trade", "agg"]), default=None)
@click.option("--seeds", default=None, help="Comma-separated seed list.")
@click.option("--precision", type=click.Choice(["f32", "f64"]), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--force", is_flag=True)
@click.option("--quiet", is_flag=True, help="Suppress per-epoch progress lines.")
def cmd_train(corpus_path, dev_path, config_path, regime, variant, seeds,
              precision, out_dir, force, quiet):
    """Train one model per seed and write checkpoints plus reports."""
    out = Path(out_dir)
    _guard_overwrite(out / "manifest.json", force)
    cfg = load_config(config_path)
    if regime:
        cfg["train"]["regime"] = regime
    if variant:
        cfg["model"]["variant"] = variant
    if precision:
        cfg["model"]["dtype"] = precision
    model_cfg = model_config_from(cfg)
    train_cfg = train_config_from(cfg)
    seed_list = _parse_seeds(seeds, train_cfg)
    cfg["train"]["seeds"] = list(seed_list)
    train_cfg.seeds = seed_list
    try:
        model_cfg.validate()
        train_cfg.validate()
    except ValueError as exc:
        raise click.UsageError(str(exc))

    manifest = {
        "command": "train",
        "version": version_string(),
        "started_at": utc_now(),
        "config": cfg,
        "seeds": list(seed_list),
        "inputs": {
            "corpus": str(Path(corpus_path).resolve()),
            "dev": str(Path(dev_path).resolve()) if dev_path else None,
        },
        "outputs": {"dir": str(out.resolve())},
    }
    write_manifest(out / "manifest.json", manifest)

    jobs = [{
        "corpus": str(Path(corpus_path).resolve()),
        "dev": str(Path(dev_path).resolve()) if dev_path else None,
        "model_cfg": asdict(model_cfg),
        "train_cfg": {**asdict(train_cfg), "seeds": list(seed_list)},
        "seed": s,
        "out": str(out.resolve()),
        "progress": not quiet,
    } for s in seed_list]
    try:
        per_seed = _run_seed_jobs(jobs)
    except TrainingDiverged as exc:
        click.echo(f"training diverged: {exc}", err=True)
        sys.exit(1)

    report = {
        "seeds": list(seed_list),
        "regime": train_cfg.regime,
        "variant": model_cfg.variant,
        "summary": _summarize_runs(per_seed),
        "per_seed": per_seed,
    }
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    manifest["completed_at"] = utc_now()
    write_manifest(out / "manifest.json", manifest)
    click.echo(f"trained {len(seed_list)} seed(s); reports in {out}", err=True)


# ---------------------------------------------------------------------------
# eval


def _load_checkpoint_or_exit(path: str) -> DstModel:
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        click.echo(f"cannot read checkpoint {path}: {exc}", err=True)
        sys.exit(2)


@main.command("eval")
@click.argument("checkpoint", type=click.Path(dir_okay=False))
@click.option("--corpus", "corpus_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--domain", default=None,
              help="Restrict the test set to dialogues tagged with this domain.")
@click.option("--active-only", is_flag=True,
              help="Joint GA over active services only (dynamic slot set).")
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="Also write the report JSON here.")
def cmd_eval(checkpoint, corpus_path, domain, active_only, out_path):
    """Evaluate a checkpoint at every turn; report JSON goes to stdout."""
    model = _load_checkpoint_or_exit(checkpoint)
    corpus = corpus_mod.load_corpus(corpus_path)
    try:
        report = evaluation.evaluate(model, corpus, domain=domain,
                                     active_only=active_only)
    except ValueError as exc:
        click.echo(str(exc), err=True)
        sys.exit(2)
    payload = json.dumps(report.to_json(), indent=2)
    click.echo(payload)
    if out_path:
        Path(out_path).write_text(payload + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# attn


@main.command("attn")
@click.argument("checkpoint", type=click.Path(dir_okay=False))
@click.option("--corpus", "corpus_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--dialogue", "dialogue_id", required=True)
@click.option("--turn", type=int, required=True)
@click.option("--slots", default=None, help="Comma-separated slot ids; all by default.")
@click.option("--format", "fmt", type=click.Choice(["jsonl", "tsv"]), default="jsonl")
def cmd_attn(checkpoint, corpus_path, dialogue_id, turn, slots, fmt):
    """Dump slot-attention weights over one turn's history."""
    model = _load_checkpoint_or_exit(checkpoint)
    corpus = corpus_mod.load_corpus(corpus_path)
    match = [d for d in corpus.dialogues if d.id == dialogue_id]
    if not match:
        click.echo(f"dialogue {dialogue_id!r} not in corpus", err=True)
        sys.exit(2)
    d = match[0]
    if not 1 <= turn <= d.n_turns:
        click.echo(f"turn {turn} out of range (dialogue has {d.n_turns})", err=True)
        sys.exit(2)
    sids = [s.strip() for s in slots.split(",")] if slots else None
    try:
        dumps = evaluation.dump_attention(model, d, turn, sids)
    except (evaluation.UnsupportedVariantError, KeyError) as exc:
        click.echo(str(exc), err=True)
        sys.exit(2)
    if fmt == "jsonl":
        evaluation.write_attention_jsonl(dumps, sys.stdout)
    else:
        evaluation.write_attention_tsv(dumps, sys.stdout)


# ---------------------------------------------------------------------------
# sweep


def _sweep_eval_job(args: dict) -> dict:
    model = load_checkpoint(args["checkpoint"])
    corpus = corpus_mod.load_corpus(args["test"])
    report = evaluation.evaluate(model, corpus)
    return report.to_json()


@main.command("sweep")
@click.option("--corpus", "corpus_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--dev", "dev_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--test", "test_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Test corpus for the sweep table; dev corpus when omitted.")
@click.option("--config", "config_path", default=None)
@click.option("--rates", default="0.2,0.4,0.6,0.8,1.0")
@click.option("--seeds", default=None)
@click.option("--subsample-seed", type=int, default=0)
@click.option("--baseline-variant", type=click.Choice(["trade", "agg"]),
              default="trade", help="Variant for the full-supervision curve.")
@click.option("--precision", type=click.Choice(["f32", "f64"]), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--force", is_flag=True)
@click.option("--quiet", is_flag=True)
def cmd_sweep(corpus_path, dev_path, test_path, config_path, rates, seeds,
              subsample_seed, baseline_variant, precision, out_dir, force, quiet):
    """Data-efficiency sweep: the full-supervision baseline at each subsample
    rate, plus weak-supervision references for both variants at rate 1.0."""
    out = Path(out_dir)
    _guard_overwrite(out / "manifest.json", force)
    try:
        rate_list = [float(r) for r in rates.split(",") if r.strip()]
    except ValueError:
        raise click.UsageError(f"bad --rates value: {rates!r}")
    for rate in rate_list:
        if not 0.0 < rate <= 1.0:
            raise click.UsageError(f"sweep rate {rate} outside (0, 1]")
    cfg = load_config(config_path)
    if precision:
        cfg["model"]["dtype"] = precision
    model_cfg = model_config_from(cfg)
    train_cfg = train_config_from(cfg)
    seed_list = _parse_seeds(seeds, train_cfg)
    test_path = test_path or dev_path

    manifest = {
        "command": "sweep",
        "version": version_string(),
        "started_at": utc_now(),
        "config": cfg,
        "seeds": list(seed_list),
        "rates": rate_list,
        "subsample_seed": subsample_seed,
        "baseline_variant": baseline_variant,
        "inputs": {
            "corpus": str(Path(corpus_path).resolve()),
            "dev": str(Path(dev_path).resolve()),
            "test": str(Path(test_path).resolve()),
        },
        "outputs": {"dir": str(out.resolve())},
    }
    write_manifest(out / "manifest.json", manifest)

    full_corpus = corpus_mod.load_corpus(corpus_path)

    runs = []  # (kind, variant, rate, regime, corpus file)
    for rate in rate_list:
        if rate == 1.0:
            sub_path = Path(corpus_path)
        else:
            sub = corpus_mod.subsample(full_corpus, rate, subsample_seed)
            sub_path = out / f"subsample_{rate:g}.jsonl"
            out.mkdir(parents=True, exist_ok=True)
            corpus_mod.save_corpus(sub, sub_path)
        runs.append(("full", baseline_variant, rate, "full", sub_path))
    for variant in ("agg", "trade"):
        runs.append(("weak", variant, 1.0, "weak-final", Path(corpus_path)))

    rows = []
    for kind, variant, rate, regime, sub_path in runs:
        run_dir = out / f"{kind}_{variant}_rate{rate:g}"
        jobs = [{
            "corpus": str(sub_path.resolve()),
            "dev": str(Path(dev_path).resolve()),
            "model_cfg": {**asdict(model_cfg), "variant": variant},
            "train_cfg": {**asdict(train_cfg), "seeds": list(seed_list),
                          "regime": regime},
            "seed": s,
            "out": str(run_dir.resolve()),
            "progress": not quiet,
        } for s in seed_list]
        try:
            _run_seed_jobs(jobs)
        except TrainingDiverged as exc:
            click.echo(f"training diverged: {exc}", err=True)
            sys.exit(1)
        eval_jobs = [{
            "checkpoint": str(run_dir / f"seed_{s}" / "checkpoint.ckpt"),
            "test": str(Path(test_path).resolve()),
        } for s in seed_list]
        cap = min(job_cap(), len(eval_jobs))
        if cap <= 1:
            test_reports = [_sweep_eval_job(j) for j in eval_jobs]
        else:
            with ProcessPoolExecutor(max_workers=cap) as pool:
                test_reports = list(pool.map(_sweep_eval_job, eval_jobs))
        flat = [{"joint_goal_accuracy": r["joint_goal_accuracy"],
                 "slot_accuracy": r["slot_accuracy"]} for r in test_reports]
        avg = training.seed_average(flat)
        row = {
            "kind": kind,
            "variant": variant,
            "rate": rate,
            "regime": regime,
            "joint_ga_mean": avg["mean"]["joint_goal_accuracy"],
            "joint_ga_stdev": avg["stdev"]["joint_goal_accuracy"],
            "slot_accuracy_mean": avg["mean"]["slot_accuracy"],
            "seeds": list(seed_list),
        }
        rows.append(row)
        click.echo(f"[sweep] {kind}/{variant} rate={rate:g}: "
                   f"joint GA {row['joint_ga_mean']:.4f}", err=True)

    table = {"rows": rows, "rates": rate_list, "baseline_variant": baseline_variant}
    with open(out / "sweep.json", "w", encoding="utf-8") as fh:
        json.dump(table, fh, indent=2)
        fh.write("\n")
    manifest["completed_at"] = utc_now()
    write_manifest(out / "manifest.json", manifest)
    click.echo(json.dumps(table, indent=2))


if __name__ == "__main__":
    main()
