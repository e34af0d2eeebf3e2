"""Per-run CSV metric log.

Columns: step, lr, total_loss, mcp, align, grad_norm, z_std, wall_ms. The
``wall_ms`` column stays 0 unless wall-clock logging is enabled, so reruns
produce identical files; measured timings always go to ``timing.log``.
"""

import csv
import math
import time
from pathlib import Path
from typing import Dict, Optional, Sequence

COLUMNS = ("step", "lr", "total_loss", "mcp", "align", "grad_norm", "z_std", "wall_ms")


def format_value(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    value = float(value)
    if math.isnan(value):
        return "nan"
    return f"{value:.10g}"


class MetricWriter:
    """CSV writer for one run.

    A fresh run (``resume_step=None``) truncates the file. A resumed run keeps
    the rows with step <= ``resume_step`` and appends after them.
    """

    def __init__(self, path, columns: Sequence[str] = COLUMNS, wall_time: bool = False, config_hash: str = "",
                 resume_step: Optional[int] = None):
        self.path = Path(path)
        self.columns = tuple(columns)
        self.wall_time = wall_time
        self.timing_path = self.path.parent / "timing.log"
        self.path.parent.mkdir(parents=True, exist_ok=True)
        kept = []
        if resume_step is not None and self.path.exists():
            with open(self.path, newline="") as f:
                reader = csv.reader(f)
                next(reader, None)
                kept = [row for row in reader if row and int(row[0]) <= resume_step]
        with open(self.path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(self.columns)
            writer.writerows(kept)
        if config_hash:
            (self.path.parent / f"{self.path.stem}.config_hash").write_text(config_hash + "\n")
        self._last = time.perf_counter()

    def write(self, row: Dict[str, object]):
        now = time.perf_counter()
        elapsed_ms = (now - self._last) * 1000.0
        self._last = now
        with open(self.timing_path, "a") as f:
            f.write(f"{self.path.name} step={row.get('step', '')} wall_ms={elapsed_ms:.3f}\n")
        row = dict(row)
        if "wall_ms" in self.columns:
            row["wall_ms"] = elapsed_ms if self.wall_time else 0
        with open(self.path, "a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow([format_value(row.get(c, float("nan"))) for c in self.columns])


def read_metrics(path) -> list:
    with open(path, newline="") as f:
        return [
            {k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(f)
        ]
