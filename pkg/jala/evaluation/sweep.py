"""Wild-fraction scaling sweep.

For each fraction of wild_train used in pretraining (labeled lab data fixed),
pretrain one model per seed, evaluate motion generation on wild_eval and
report the per-metric median over seeds.
"""

import csv
import logging
import statistics
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from jala.config import JalaConfig, apply_overrides, config_hash
from jala.evaluation.motion_eval import METRICS, MetricReport, eval_motion_generation, model_decoder
from jala.numeric.backend import Rng
from jala.train.checkpoint import load_checkpoint
from jala.train.pretrain import run_pretraining
from jala.world.synthetic import make_splits

logger = logging.getLogger(__name__)


def fraction_label(fraction: float) -> str:
    return f"wild_{fraction:.2f}"


def run_sweep(config: JalaConfig, tokenizer, out_dir, fractions: Optional[Sequence[float]] = None,
              seeds: Optional[int] = None, steps: Optional[int] = None,
              tokenizer_hash: str = "") -> List[Tuple[float, MetricReport]]:
    out_dir = Path(out_dir)
    fractions = list(config.eval.sweep_fractions if fractions is None else fractions)
    seeds = config.eval.sweep_seeds if seeds is None else seeds
    splits = make_splits(config.world)
    results = []
    for fraction in fractions:
        per_seed = []
        for s in range(seeds):
            run_config = apply_overrides(config, [f"pretrain.wild_fraction={fraction}",
                                                  f"runtime.seed={config.runtime.seed + s}"])
            run_dir = out_dir / fraction_label(fraction) / f"seed_{s}"
            logger.info("sweep: wild fraction %.2f, seed %d", fraction, s)
            summary = run_pretraining(run_config, tokenizer, run_dir, steps=steps, splits=splits,
                                      tokenizer_hash=tokenizer_hash)
            state = load_checkpoint(summary["checkpoint"], run_config)
            decoder = model_decoder(state, run_config, Rng(run_config.runtime.seed, "eval"))
            per_seed.append(eval_motion_generation(splits["wild_eval"], tokenizer, run_config, decoder,
                                                   "wild_eval", config_hash(run_config), summary["checkpoint"]))
        means = {m: statistics.median(r.means[m] for r in per_seed) for m in METRICS}
        report = MetricReport("wild_eval", means, per_seed[0].count, per_seed[0].skipped, config_hash(config),
                              f"median of {seeds} seeds")
        report.write(out_dir, fraction_label(fraction))
        results.append((fraction, report))
    write_sweep_summary(results, out_dir / "sweep_summary.csv")
    return results


def write_sweep_summary(results, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["wild_fraction", *METRICS])
        for fraction, report in results:
            writer.writerow([f"{fraction:.4g}", *(f"{report.means[m]:.10g}" for m in METRICS)])
    return path
