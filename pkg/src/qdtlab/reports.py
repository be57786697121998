"""Report files: structured JSON summaries and flat CSV series for plotting.

Floats are written with ``repr`` so every value round-trips exactly, which
lets ``regenerate`` rebuild the summaries from stored episode rows and
compare bytes.  Wall-clock timings only ever go to ``cost.json``.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .evalharness import (
    EvalReport,
    GeneralizationReport,
    cost_report,
    episode_records,
    summarize,
    synergy_summary,
    table_rows,
)
from .model import DISPLAY_NAMES, VARIANT_KEYS

SUMMARY_COLUMNS = ["variant", "model", "avg_return", "avg_std", "parameters", "final_loss",
                   "improvement_pct", "return_per_million_params"]
# the four-variant comparison table and nothing else
RESULTS_COLUMNS = ["model", "avg_return", "avg_std", "parameters", "final_loss"]


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


# --- single evaluation ---------------------------------------------------

def episode_rows(report: EvalReport) -> list:
    return [(report.variant, tg, i, r) for tg, i, r in episode_records(report)]


def per_target_rows(report: EvalReport) -> list:
    return [(report.variant, tg, m, s, len(rs)) for tg, m, s, rs in
            zip(report.targets, report.per_target_mean, report.per_target_std, report.episode_returns)]


def write_eval(report: EvalReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    v = report.variant
    return [
        _write(out / f"eval_{v}.json", json_text(report.to_dict())),
        _write(out / f"episodes_{v}.csv",
               csv_text(["variant", "target", "episode", "return"], episode_rows(report))),
        _write(out / f"per_target_{v}.csv",
               csv_text(["variant", "target", "mean_return", "std_return", "episodes"], per_target_rows(report))),
    ]


# --- ablation ------------------------------------------------------------

def reports_from_records(records: dict, meta: dict) -> dict:
    """Rebuild per-variant EvalReports from (target, episode, return) rows.

    ``meta`` maps variant -> {"parameters", "final_loss"}.  The standard
    variant is the improvement baseline when present.
    """
    reports = {}
    base = None
    if "standard" in records:
        m = meta.get("standard", {})
        reports["standard"] = summarize("standard", records["standard"], m.get("parameters"),
                                        m.get("final_loss"))
        reports["standard"].improvement_pct = 0.0
        base = reports["standard"].grand_mean
    for key in VARIANT_KEYS:
        if key == "standard" or key not in records:
            continue
        m = meta.get(key, {})
        reports[key] = summarize(key, records[key], m.get("parameters"), m.get("final_loss"), base)
    return {k: reports[k] for k in VARIANT_KEYS if k in reports}


def ablation_files(reports: dict, epoch_losses: dict) -> dict[str, str]:
    """File name -> contents for the full ablation report set."""
    rows = table_rows(reports)
    files = {
        "summary.csv": csv_text(SUMMARY_COLUMNS, [[r[c] for c in SUMMARY_COLUMNS] for r in rows]),
        "results_table.csv": csv_text(RESULTS_COLUMNS, [[r[c] for c in RESULTS_COLUMNS] for r in rows]),
        "summary.json": json_text({"rows": rows}),
        "per_target.csv": csv_text(["variant", "target", "mean_return", "std_return", "episodes"],
                                   [row for r in reports.values() for row in per_target_rows(r)]),
        "improvement.csv": csv_text(["variant", "model", "avg_return", "baseline_avg_return", "improvement_pct"],
                                    [(k, DISPLAY_NAMES[k], r.grand_mean,
                                      reports["standard"].grand_mean if "standard" in reports else None,
                                      r.improvement_pct) for k, r in reports.items()]),
        "ablation_bars.csv": csv_text(["variant", "model", "attention", "feedforward", "avg_return", "avg_std"],
                                      [(k, DISPLAY_NAMES[k],
                                        "quantum" if k in ("quantum", "q-attn") else "standard",
                                        "quantum" if k in ("quantum", "q-ff") else "standard",
                                        r.grand_mean, r.grand_std) for k, r in reports.items()]),
        "episodes.csv": csv_text(["variant", "target", "episode", "return"],
                                 [row for r in reports.values() for row in episode_rows(r)]),
        "loss_curves.csv": csv_text(["variant", "epoch", "mean_loss"],
                                    [(k, i + 1, float(v)) for k in VARIANT_KEYS if k in epoch_losses
                                     for i, v in enumerate(epoch_losses[k])]),
        "variants.json": json_text({k: {"parameters": r.param_count, "final_loss": r.final_loss}
                                    for k, r in reports.items()}),
    }
    if len(reports) == 4:
        files["synergy.json"] = json_text(synergy_summary(reports))
    return files


def write_ablation(reports: dict, epoch_losses: dict, out_dir) -> list[Path]:
    out = Path(out_dir)
    return [_write(out / name, text) for name, text in ablation_files(reports, epoch_losses).items()]


def read_episode_rows(path) -> dict:
    records: dict = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            records.setdefault(row["variant"], []).append(
                (float(row["target"]), int(row["episode"]), float(row["return"])))
    return records


def read_loss_curves(path) -> dict:
    curves: dict = {}
    path = Path(path)
    if not path.exists():
        return curves
    with path.open(newline="") as f:
        for row in csv.DictReader(f):
            curves.setdefault(row["variant"], []).append(float(row["mean_loss"]))
    return curves


def regenerate(reports_dir) -> dict[str, str]:
    """Rebuild the ablation report set from episodes.csv, variants.json and loss_curves.csv."""
    d = Path(reports_dir)
    records = read_episode_rows(d / "episodes.csv")
    meta = json.loads((d / "variants.json").read_text())
    reports = reports_from_records(records, meta)
    return ablation_files(reports, read_loss_curves(d / "loss_curves.csv"))


def check_regenerated(reports_dir) -> list[str]:
    """Names of report files whose regenerated bytes differ from what is on disk."""
    d = Path(reports_dir)
    bad = []
    for name, text in regenerate(d).items():
        p = d / name
        if not p.exists() or p.read_text() != text:
            bad.append(name)
    return bad


# --- cost and generalisation ----------------------------------------------

def write_cost(train_seconds: dict, out_dir) -> Path:
    return _write(Path(out_dir) / "cost.json", json_text(cost_report(train_seconds)))


def generalization_rows(rep: GeneralizationReport) -> list:
    rows = []
    for b in rep.blocks:
        if b["measurement"] == "offline_mse":
            rows.append((rep.variant, b["tier"], b["measurement"], b["mse"], b["n_steps"], None, None))
        else:
            r = b["report"]
            rows.append((rep.variant, b["tier"], b["measurement"], None, None, r["grand_mean"], r["grand_std"]))
    return rows


def write_generalization(reps, out_dir) -> list[Path]:
    out = Path(out_dir)
    if isinstance(reps, GeneralizationReport):
        reps = [reps]
    paths = [_write(out / f"generalization_{r.variant}.json", json_text(r.to_dict())) for r in reps]
    paths.append(_write(out / "generalization.csv", csv_text(
        ["variant", "tier", "measurement", "mse", "n_steps", "avg_return", "avg_std"],
        [row for r in reps for row in generalization_rows(r)])))
    return paths
