"""``qdtlab`` command-line front end.

Every command works inside a run directory (``--run-dir``, default
``$QDTLAB_RUN_ROOT/default``) and appends an entry to its ``manifest.json``.
Exit codes: 0 success, 1 verification failure, 2 usage or I/O error,
3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import uuid
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, datagen, reports, verify
from .config import ConfigError, RunConfig, load_file, parse_assignments, resolve
from .datagen import DatasetFormatError, Tier
from .evalharness import evaluate_params, generalization_test
from .model import VARIANT_KEYS, CheckpointError, load_checkpoint, param_count
from .trainer import TrainingAborted, read_epoch_log, train

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
TIERS = [t.value for t in Tier]


class UsageError(Exception):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def default_run_dir() -> Path:
    return Path(os.environ.get("QDTLAB_RUN_ROOT", "runs")) / "default"


# --- manifest ------------------------------------------------------------

class Manifest:
    """One manifest.json per run directory, merged across commands."""

    def __init__(self, run_dir: Path):
        self.path = run_dir / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"run_id": uuid.uuid4().hex[:12], "tool_version": __version__,
                         "created": _now(), "commands": []}

    def record(self, command: str, argv, started: str, cfg: RunConfig | None, seeds: dict,
               artifacts: dict, exit_code: int):
        self.data["tool_version"] = __version__
        self.data["commands"].append({
            "command": command,
            "argv": list(argv),
            "started": started,
            "finished": _now(),
            "exit_code": exit_code,
            "config": cfg.snapshot() if cfg else None,
            "seeds": seeds,
            "artifacts": {k: str(v) for k, v in artifacts.items()},
        })
        self.data["updated"] = self.data["commands"][-1]["finished"]
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2) + "\n")


# --- helpers -------------------------------------------------------------

def _config(args, extra: dict | None = None) -> RunConfig:
    file_values = load_file(args.config) if args.config else {}
    overrides = parse_assignments(args.set)
    overrides.update({k: v for k, v in (extra or {}).items() if v is not None})
    return resolve(file_values, overrides, args.profile)


def _load_dataset(path):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"dataset not found: {path}")
    return datagen.load(path)


def _load_ckpt(path):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _print_config(cfg: RunConfig, prefixes=("train.",), out=None):
    out = out or sys.stdout
    for k, v in cfg.snapshot().items():
        if k.startswith(prefixes):
            print(f"  {k} = {v}", file=out)


def _eval_overrides(args) -> dict:
    ov = {}
    if getattr(args, "targets", None):
        ov["eval.targets"] = args.targets
    if getattr(args, "episodes", None) is not None:
        ov["eval.episodes_per_target"] = args.episodes
    if getattr(args, "eval_seed", None) is not None:
        ov["eval.eval_seed"] = args.eval_seed
    return ov


# --- commands ------------------------------------------------------------

def cmd_gen_data(args, run_dir: Path):
    cfg = _config(args, {"data.seed": args.seed, "data.n_trajectories": args.n_trajectories})
    spec = cfg.data.tier_spec(args.tier)
    out = Path(args.out) if args.out else run_dir / "data" / f"{args.tier}.jsonl"
    ds = datagen.collect(spec, cfg.env, seed=cfg.data.seed, gamma=cfg.data.gamma)
    try:
        datagen.save(ds, out)
    except OSError as e:
        raise UsageError(f"cannot write dataset {out}: {e.strerror or e}") from None
    print(f"tier {args.tier}: {len(ds.trajectories)} trajectories, {ds.total_steps} steps, "
          f"mean return {ds.mean_return():.4f}, return scale {ds.return_scale:.4f}")
    print(f"  state mean {[round(x, 4) for x in ds.state_mean.tolist()]}")
    print(f"  state std  {[round(x, 4) for x in ds.state_std.tolist()]}")
    print(f"wrote {out}")
    arts = {f"dataset_{args.tier}": out, f"dataset_{args.tier}_checksum": datagen.checksum_path(out)}
    return cfg, {"data.seed": cfg.data.seed}, arts


def _train_one(args, run_dir: Path, cfg: RunConfig, variant: str, ds, dataset_path):
    model_cfg = cfg.model.with_variant(variant)
    ckpt = run_dir / "checkpoints" / f"{variant}.ckpt"
    log = run_dir / "logs" / f"train_{variant}.jsonl"
    curve = run_dir / "logs" / f"loss_{variant}.csv"
    print(f"training {variant} ({model_cfg.variant.display_name}) on {dataset_path}")
    _print_config(cfg)
    print(f"  parameters = {param_count(model_cfg)}")

    def progress(epoch, step, loss):
        if getattr(args, "verbose", False):
            print(f"  step {step} epoch {epoch + 1} loss {loss:.6f}", file=sys.stderr)

    _, hist = train(model_cfg, ds, cfg.train, checkpoint_path=ckpt, log_path=log,
                    max_steps=getattr(args, "max_steps", None), progress=progress)
    curve.write_text(reports.csv_text(["epoch", "mean_loss"],
                                      [(i + 1, v) for i, v in enumerate(hist.epoch_loss)]))
    for i, (loss, secs) in enumerate(zip(hist.epoch_loss, hist.epoch_seconds)):
        print(f"  epoch {i + 1}: loss {loss:.6f} ({secs:.1f}s)")
    print(f"wrote {ckpt}")
    return {f"checkpoint_{variant}": ckpt, f"train_log_{variant}": log, f"loss_curve_{variant}": curve}


def cmd_train(args, run_dir: Path):
    extra = {"train.epochs": args.epochs, "train.learning_rate": args.lr,
             "train.batch_size": args.batch_size, "train.seed": args.seed,
             "train.steps_per_epoch": args.steps_per_epoch}
    cfg = _config(args, extra)
    dataset_path = Path(args.dataset) if args.dataset else run_dir / "data" / "medium.jsonl"
    ds = _load_dataset(dataset_path)
    arts = _train_one(args, run_dir, cfg, args.variant, ds, dataset_path)
    return cfg, {"train.seed": cfg.train.seed}, arts


def cmd_eval(args, run_dir: Path):
    cfg = _config(args, _eval_overrides(args))
    params, model_cfg, extra = _load_ckpt(args.checkpoint)
    dataset_path = Path(args.dataset) if args.dataset else run_dir / "data" / "medium.jsonl"
    ds = _load_dataset(dataset_path)
    rep = evaluate_params(params, model_cfg, cfg.eval, ds.stats, extra.get("final_loss"))
    paths = reports.write_eval(rep, run_dir / "reports")
    print(f"{model_cfg.variant.display_name}: avg return {rep.grand_mean:.4f}, avg std {rep.grand_std:.4f} "
          f"over {rep.n_episodes} episodes")
    for tg, m, s in zip(rep.targets, rep.per_target_mean, rep.per_target_std):
        print(f"  target {tg:g}: {m:.4f} +/- {s:.4f}")
    return cfg, {"eval.eval_seed": cfg.eval.eval_seed}, {p.name: p for p in paths}


def _checkpoint_paths(args, run_dir: Path) -> dict:
    if args.checkpoints:
        out = {}
        for p in args.checkpoints:
            _, mc, _ = _load_ckpt(p)
            out[mc.variant.key] = Path(p)
        return out
    return {k: run_dir / "checkpoints" / f"{k}.ckpt" for k in VARIANT_KEYS}


def cmd_ablate(args, run_dir: Path):
    cfg = _config(args, _eval_overrides(args))
    dataset_path = Path(args.dataset) if args.dataset else run_dir / "data" / "medium.jsonl"
    ds = _load_dataset(dataset_path)
    evals, losses, seconds = {}, {}, {}
    for key, path in _checkpoint_paths(args, run_dir).items():
        params, model_cfg, extra = _load_ckpt(path)
        evals[key] = evaluate_params(params, model_cfg, cfg.eval, ds.stats, extra.get("final_loss"))
        losses[key] = extra.get("epoch_loss", [])
        log = run_dir / "logs" / f"train_{key}.jsonl"
        if log.exists():
            seconds[key] = sum(r["wall_clock_s"] for r in read_epoch_log(log))
        print(f"evaluated {key}: avg return {evals[key].grand_mean:.4f}")
    meta = {k: {"parameters": r.param_count, "final_loss": r.final_loss} for k, r in evals.items()}
    records = {k: [(tg, i, ret) for tg, i, ret in reports.episode_records(r)] for k, r in evals.items()}
    table = reports.reports_from_records(records, meta)
    out = run_dir / "reports"
    paths = reports.write_ablation(table, losses, out)
    if seconds:
        paths.append(reports.write_cost(seconds, out))
    print(f"{'model':<20}{'avg_return':>14}{'avg_std':>12}{'parameters':>12}{'final_loss':>12}")
    for row in reports.table_rows(table):
        fl = row["final_loss"]
        print(f"{row['model']:<20}{row['avg_return']:>14.4f}{row['avg_std']:>12.4f}{row['parameters']:>12}"
              f"{fl if fl is None else format(fl, '.6f'):>12}")
    if "quantum_over_standard" in (cost := reports.cost_report(seconds)):
        print(f"training time ratio quantum/standard: {cost['quantum_over_standard']:.2f} "
              f"(reference {cost['reference_ratio']})")
    return cfg, {"eval.eval_seed": cfg.eval.eval_seed}, {p.name: p for p in paths}


def _tier_datasets(items, run_dir: Path) -> dict:
    if not items:
        items = [f"{t}={run_dir / 'data' / f'{t}.jsonl'}" for t in ("expert", "random")]
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--tier-dataset expects tier=path, got {item!r}")
        tier, path = item.split("=", 1)
        if tier not in TIERS:
            raise UsageError(f"unknown tier {tier!r}; expected one of {', '.join(TIERS)}")
        out[tier] = _load_dataset(path)
    return out


def cmd_generalize(args, run_dir: Path):
    cfg = _config(args, _eval_overrides(args))
    ckpt = Path(args.checkpoint) if args.checkpoint else run_dir / "checkpoints" / "quantum.ckpt"
    params, model_cfg, _ = _load_ckpt(ckpt)
    train_path = Path(args.train_dataset) if args.train_dataset else run_dir / "data" / "medium.jsonl"
    train_ds = _load_dataset(train_path)
    tiers = _tier_datasets(args.tier_dataset, run_dir)
    rep = generalization_test(params, model_cfg, train_ds.stats, tiers, cfg.eval)
    paths = reports.write_generalization(rep, run_dir / "reports")
    for row in reports.generalization_rows(rep):
        _, tier, kind, mse, n, avg, std = row
        if kind == "offline_mse":
            print(f"{tier}: offline action MSE {mse:.6f} over {n} steps")
        else:
            print(f"{tier}: rollout with tier statistics, avg return {avg:.4f} +/- {std:.4f}")
    return cfg, {"eval.eval_seed": cfg.eval.eval_seed}, {p.name: p for p in paths}


def cmd_verify(args, run_dir: Path):
    faults = {}
    for item in args.inject_fault or []:
        name, _, value = item.partition("=")
        if name != "standard-alpha":
            raise UsageError(f"unknown fault {name!r}; known: standard-alpha=<value>")
        try:
            faults["standard_alpha"] = float(value or 0.3)
        except ValueError:
            raise UsageError(f"fault value must be a number, got {value!r}") from None
    ok = verify.run(faults)
    return None, {}, {}, (EXIT_OK if ok else EXIT_VERIFY)


def cmd_report(args, run_dir: Path):
    d = run_dir / "reports"
    if not (d / "episodes.csv").exists() or not (d / "variants.json").exists():
        raise UsageError(f"no ablation records under {d}; run ablate first")
    if args.check:
        bad = reports.check_regenerated(d)
        if bad:
            print(f"regenerated reports differ: {', '.join(bad)}")
            return None, {}, {}, EXIT_VERIFY
        print("regenerated reports are identical")
        return None, {}, {}
    files = reports.regenerate(d)
    paths = {}
    for name, text in files.items():
        (d / name).write_text(text)
        paths[name] = d / name
    print(f"rewrote {len(files)} report files in {d}")
    return None, {}, paths


def cmd_pipeline(args, run_dir: Path):
    """gen-data (all tiers), train x4, ablate, generalize; no interactive input."""
    base = dict(config=args.config, profile=args.profile, set=args.set, verbose=args.verbose)
    cfg = _config(args)
    arts = {}
    for tier in TIERS:
        ns = argparse.Namespace(**base, tier=tier, seed=None, n_trajectories=None, out=None)
        arts.update(cmd_gen_data(ns, run_dir)[2])
    medium = run_dir / "data" / "medium.jsonl"
    ds = _load_dataset(medium)
    for v in VARIANT_KEYS:
        arts.update(_train_one(argparse.Namespace(**base), run_dir, cfg, v, ds, medium))
    ns = argparse.Namespace(**base, dataset=None, checkpoints=None, targets=None, episodes=None, eval_seed=None)
    arts.update(cmd_ablate(ns, run_dir)[2])
    ns = argparse.Namespace(**base, checkpoint=None, train_dataset=None, tier_dataset=None,
                            targets=None, episodes=None, eval_seed=None)
    arts.update(cmd_generalize(ns, run_dir)[2])
    seeds = {"data.seed": cfg.data.seed, "train.seed": cfg.train.seed, "eval.eval_seed": cfg.eval.eval_seed}
    return cfg, seeds, arts


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
    "generalize": cmd_generalize, "verify": cmd_verify, "report": cmd_report, "pipeline": cmd_pipeline,
}


def _targets(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"targets must be comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flat <section>.<field> keys")
    common.add_argument("--profile", choices=["full", "ci"], help="preset overrides (default full)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--run-dir", type=Path, help="run directory (default $QDTLAB_RUN_ROOT/default)")
    common.add_argument("-v", "--verbose", action="store_true", help="per-step training progress on stderr")

    p = argparse.ArgumentParser(prog="qdtlab", description="Offline decision-transformer experiments.")
    p.add_argument("--version", action="version", version=f"qdtlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate an offline dataset")
    g.add_argument("--tier", required=True, choices=TIERS)
    g.add_argument("--seed", type=int)
    g.add_argument("--n-trajectories", type=int)
    g.add_argument("--out", help="dataset path (default <run-dir>/data/<tier>.jsonl)")

    t = sub.add_parser("train", parents=[common], help="train one model variant")
    t.add_argument("--variant", required=True, choices=list(VARIANT_KEYS))
    t.add_argument("--dataset")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps-per-epoch", type=int)
    t.add_argument("--max-steps", type=int, help="stop after this many updates in total")

    for name, helptext in (("eval", "evaluate one checkpoint"), ("ablate", "evaluate all four variants"),
                           ("generalize", "evaluate on other dataset tiers")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--targets", type=_targets, help="comma-separated target returns")
        e.add_argument("--episodes", type=int, help="episodes per target")
        e.add_argument("--eval-seed", type=int)
        if name == "eval":
            e.add_argument("--checkpoint", required=True)
            e.add_argument("--dataset", help="training dataset supplying normalisation statistics")
        elif name == "ablate":
            e.add_argument("--checkpoints", nargs="+")
            e.add_argument("--dataset")
        else:
            e.add_argument("--checkpoint")
            e.add_argument("--train-dataset")
            e.add_argument("--tier-dataset", action="append", metavar="TIER=PATH")

    v = sub.add_parser("verify", parents=[common], help="run the property and oracle checks")
    v.add_argument("--inject-fault", action="append", metavar="NAME=VALUE",
                   help="deliberately break a component (standard-alpha=0.3)")

    r = sub.add_parser("report", parents=[common], help="rebuild reports from stored episode records")
    r.add_argument("--check", action="store_true", help="compare instead of rewriting")

    sub.add_parser("pipeline", parents=[common], help="gen-data, train x4, ablate, generalize")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    run_dir = Path(args.run_dir) if args.run_dir else default_run_dir()
    started = _now()
    code = EXIT_OK
    try:
        result = COMMANDS[args.command](args, run_dir)
    except (UsageError, ConfigError, DatasetFormatError, CheckpointError) as e:
        print(f"qdtlab {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"qdtlab {args.command}: {e.strerror}: {e.filename}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as e:
        print(f"qdtlab {args.command}: training aborted: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    cfg, seeds, arts = result[:3]
    if len(result) > 3:
        code = result[3]
    if args.command != "verify":
        Manifest(run_dir).record(args.command, argv, started, cfg, seeds, arts, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
