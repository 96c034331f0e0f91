"""Run-directory bookkeeping and table-shaped CSV reports.

Every run directory holds the resolved config, a history CSV, a metrics
JSON, and (for training runs) the final checkpoint. Reports aggregate run
directories back into comparison tables without re-running anything.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .config import ExperimentConfig, write_resolved


def write_csv(path, header: list[str], rows: list[dict]) -> None:
    """Comma-separated, header row, '.' decimals, LF line endings."""
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=header, lineterminator="\n",
                                extrasaction="ignore", restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


class RunDir:
    """One experiment's output directory: timestamp-free, seed-named."""

    def __init__(self, root, name: str, config: ExperimentConfig):
        self.path = Path(root) / name
        self.path.mkdir(parents=True, exist_ok=True)
        self.config = config
        write_resolved(config, self.path / "config.resolved")

    def write_history(self, history: list[dict]) -> None:
        if not history:
            return
        header = list(dict.fromkeys(k for row in history for k in row))
        rows = [{**row, "config_hash": self.config.hash()} for row in history]
        write_csv(self.path / "history.csv", header + ["config_hash"], rows)

    def write_metrics(self, metrics: dict) -> None:
        payload = dict(metrics)
        payload["config_hash"] = self.config.hash()
        (self.path / "metrics.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n"
        )

    def checkpoint_path(self, name: str = "model.ckpt") -> Path:
        return self.path / name


def load_run(run_dir) -> dict:
    run_dir = Path(run_dir)
    metrics_file = run_dir / "metrics.json"
    if not metrics_file.exists():
        raise FileNotFoundError(f"{run_dir} has no metrics.json")
    info = json.loads(metrics_file.read_text())
    info["run"] = run_dir.name
    return info


def scan_runs(root, prefix: str = "") -> list[dict]:
    root = Path(root)
    runs = []
    for child in sorted(root.iterdir()) if root.exists() else []:
        if child.is_dir() and child.name.startswith(prefix) and (child / "metrics.json").exists():
            runs.append(load_run(child))
    return runs


def _mean(values: list[float]) -> float:
    return sum(values) / len(values) if values else float("nan")


def report_attack_summary(root) -> list[dict]:
    """Per (architecture, block) attack accuracy/BDR means across seeds."""
    groups: dict[tuple, dict] = {}
    for info in scan_runs(root, prefix="attack-"):
        key = (info.get("arch"), info.get("block"), info.get("fraction"))
        bucket = groups.setdefault(key, {"acc": [], "bdr": [], "original_acc": []})
        bucket["acc"].append(float(info["acc"]))
        bucket["bdr"].append(float(info.get("bdr_mean", "nan")))
        if info.get("authorized_acc") is not None:
            bucket["original_acc"].append(float(info["authorized_acc"]))
    rows = []
    for (arch, block, fraction), bucket in sorted(groups.items(), key=lambda kv: str(kv[0])):
        rows.append({
            "arch": arch,
            "block": block,
            "fraction": fraction,
            "original_acc": round(_mean(bucket["original_acc"]), 4),
            "acc": round(_mean(bucket["acc"]), 4),
            "bdr": round(_mean(bucket["bdr"]), 4),
            "runs": len(bucket["acc"]),
        })
    return rows


def report_fraction_sweep(root) -> list[dict]:
    """Data-budget rows vs block-kind columns (mean accuracy across seeds)."""
    cells: dict[float, dict[str, list[float]]] = {}
    sizes: dict[float, int] = {}
    for info in scan_runs(root, prefix="attack-"):
        fraction = float(info["fraction"])
        block = info["block"]
        cells.setdefault(fraction, {}).setdefault(block, []).append(float(info["acc"]))
        if info.get("datasize") is not None:
            sizes[fraction] = int(info["datasize"])
    rows = []
    for fraction in sorted(cells, reverse=True):
        row = {"fraction": fraction, "datasize": sizes.get(fraction, "")}
        for block in ("plain", "cerb", "ierb"):
            values = cells[fraction].get(block, [])
            row[block] = round(_mean(values), 4) if values else ""
        rows.append(row)
    return rows


REPORT_RECIPES = {
    "table1": (report_attack_summary,
               ["arch", "block", "fraction", "original_acc", "acc", "bdr", "runs"]),
    "table2": (report_fraction_sweep,
               ["fraction", "datasize", "plain", "cerb", "ierb"]),
}
