"""Compression run reports: accuracy, rates, bit widths, trace refs.

Each report carries the echoed run configuration and accuracy relative
to the run's own uncompressed baseline. Emitted as a human-readable
table plus machine-readable CSV records.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field


@dataclass
class StepRecord:
    method: str                      # progressive | one-shot | baseline name
    mode: str                        # prune | quantize | prune-quant
    step: int
    accuracy: float
    overall_rate: float | None = None
    per_layer_rates: dict[str, float] = field(default_factory=dict)
    bit_widths: dict[str, int] = field(default_factory=dict)
    accuracy_loss_vs_baseline: float | None = None
    converged: bool | None = None
    trace_path: str | None = None
    checkpoint_path: str | None = None


@dataclass
class CompressionReport:
    model: str
    seed: int
    baseline_accuracy: float | None = None
    config: dict = field(default_factory=dict)
    records: list[StepRecord] = field(default_factory=list)

    def add(self, rec: StepRecord):
        if rec.accuracy_loss_vs_baseline is None and self.baseline_accuracy is not None:
            rec.accuracy_loss_vs_baseline = self.baseline_accuracy - rec.accuracy
        self.records.append(rec)

    def final_accuracy(self) -> float | None:
        return self.records[-1].accuracy if self.records else self.baseline_accuracy


_COLUMNS = ["method", "mode", "step", "accuracy", "rel_acc_loss",
            "overall_rate", "bits", "converged"]


def _table_rows(report: CompressionReport):
    rows = []
    if report.baseline_accuracy is not None:
        rows.append(["baseline", "-", "-", f"{report.baseline_accuracy:.4f}",
                     "0.0000", "1.0x", "-", "-"])
    for r in report.records:
        bits = ",".join(str(b) for b in sorted(set(r.bit_widths.values()))) \
            if r.bit_widths else "-"
        loss = "-" if r.accuracy_loss_vs_baseline is None \
            else f"{r.accuracy_loss_vs_baseline:+.4f}"
        rate = "-" if r.overall_rate is None else f"{r.overall_rate:.1f}x"
        conv = "-" if r.converged is None else str(r.converged)
        rows.append([r.method, r.mode, str(r.step), f"{r.accuracy:.4f}",
                     loss, rate, bits, conv])
    return rows


def format_table(report: CompressionReport) -> str:
    rows = [_COLUMNS] + _table_rows(report)
    widths = [max(len(row[i]) for row in rows) for i in range(len(_COLUMNS))]
    lines = []
    for j, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def emit_report(report: CompressionReport, out_dir) -> dict[str, str]:
    """Write report.txt (table + config echo), report.csv, report.json.

    Returns the paths written.
    """
    os.makedirs(out_dir, exist_ok=True)
    txt = os.path.join(out_dir, "report.txt")
    with open(txt, "w") as f:
        f.write(f"model: {report.model}   seed: {report.seed}\n\n")
        f.write(format_table(report))
        f.write("\nconfig:\n")
        for k, v in sorted(report.config.items()):
            f.write(f"  {k} = {v}\n")
    csv_path = os.path.join(out_dir, "report.csv")
    with open(csv_path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["method", "mode", "step", "accuracy", "rel_acc_loss",
                     "overall_rate", "per_layer_rates", "bit_widths",
                     "trace", "checkpoint"])
        for r in report.records:
            wr.writerow([r.method, r.mode, r.step, f"{r.accuracy:.6f}",
                         "" if r.accuracy_loss_vs_baseline is None
                         else f"{r.accuracy_loss_vs_baseline:.6f}",
                         "" if r.overall_rate is None else f"{r.overall_rate:.4f}",
                         json.dumps({k: round(v, 4) for k, v in r.per_layer_rates.items()}),
                         json.dumps(r.bit_widths),
                         r.trace_path or "", r.checkpoint_path or ""])
    json_path = os.path.join(out_dir, "report.json")
    with open(json_path, "w") as f:
        json.dump(asdict(report), f, indent=2, default=str)
    return {"txt": txt, "csv": csv_path, "json": json_path}
