#!/usr/bin/env python3
"""jala: desk-scale latent-action pretraining pipeline."""

import argparse
import logging
import sys
from pathlib import Path

from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from jala import __version__
from jala.errors import CheckpointError, ConfigError, JalaError

console = Console()
err_console = Console(stderr=True)

logger = logging.getLogger("jala")


def _setup_logging(quiet: bool):
    logging.basicConfig(
        level=logging.WARNING if quiet else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


def _resolve_config_path(path):
    from jala.config import bundled_config

    if path is None:
        return None
    if Path(path).exists():
        return Path(path)
    bundled = bundled_config(path)
    if bundled.exists():
        return bundled
    raise ConfigError(f"config file not found: {path}")


def _setup(args):
    """Load config, apply --seed/--set, prepare the output dir and the torch runtime."""
    import torch

    from jala.config import JALA_OUT, load_config, save_resolved
    from jala.numeric.backend import resolve_dtype

    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"runtime.seed={args.seed}")
    config = load_config(_resolve_config_path(args.config), overrides)
    out_dir = Path(args.out) if args.out else JALA_OUT
    digest = save_resolved(config, out_dir)
    torch.set_num_threads(config.runtime.threads)
    torch.set_default_dtype(resolve_dtype(config.runtime.dtype))
    logger.info("config %s, output %s", digest[:12], out_dir)
    return config, out_dir, digest


def _load_tokenizer(path, config):
    from jala.motion.tokenizer import load_tokenizer

    tok = load_tokenizer(path)
    if tok.config != config.tokenizer or tok.finger_dims != config.world.finger_dims:
        raise CheckpointError(f"tokenizer {path} was trained with different settings")
    return tok


def _tokenizer_path(args, out_dir):
    return Path(args.tokenizer) if getattr(args, "tokenizer", None) else out_dir / "tokenizer.tok"


def _load_model(path, config):
    from jala.train.checkpoint import load_checkpoint, model_hash

    state = load_checkpoint(path)
    if model_hash(state.config) != model_hash(config):
        raise CheckpointError(f"checkpoint {path} does not match the model settings of the current config")
    return state


def _summary(title: str, rows):
    table = Table(title=title, border_style="cyan")
    table.add_column("", style="bold")
    table.add_column("", justify="right")
    for key, value in rows:
        table.add_row(key, f"{value:.5g}" if isinstance(value, float) else str(value))
    console.print(table)


def cmd_gen_data(args):
    """Generate every split and write record streams plus the manifest."""
    config, out_dir, digest = _setup(args)
    from jala.world.records import write_manifest, write_records
    from jala.world.synthetic import make_splits

    splits = make_splits(config.world)
    files = {}
    for name, split in splits.items():
        path = out_dir / "data" / f"{name}.eps"
        write_records(split, path)
        files[name] = path.name
    write_manifest(out_dir / "data" / "manifest.json", splits, digest, files)
    _summary("Generated splits", [(name, f"{len(s)} episodes, {s.labeled_count} labeled") for name, s in splits.items()])


def cmd_train_tokenizer(args):
    """Train the motion tokenizer on lab_train chunks."""
    config, out_dir, digest = _setup(args)
    from jala.motion.pose import chunk_sequence
    from jala.motion.tokenizer import save_tokenizer, train_tokenizer
    from jala.numeric.backend import Rng
    from jala.world.synthetic import make_splits

    splits = make_splits(config.world)
    chunks = [c for e in splits["lab_train"] for c in chunk_sequence(e.poses, config.tokenizer.chunk_length, e.hand_side)]
    tok, report = train_tokenizer(chunks, config.tokenizer, config.world.finger_dims,
                                  Rng(config.runtime.seed, "tokenizer"))
    path = _tokenizer_path(args, out_dir)
    save_tokenizer(tok, path, digest)
    utilization = {
        part: sum(1 for level in counts[0] for c in level if c > 0) / sum(len(level) for level in counts[0])
        for part, counts in report.utilization.items()
    }
    _summary("Tokenizer", [
        ("chunks", len(chunks)),
        ("final val MSE", report.val_mse[-1]),
        ("val MPJPE", report.val_mpjpe),
        *[(f"{part} utilization (group 0)", u) for part, u in utilization.items()],
        ("saved", str(path)),
    ])


def cmd_pretrain(args):
    """Hybrid MCP + alignment pretraining."""
    config, out_dir, digest = _setup(args)
    from jala.train.checkpoint import load_checkpoint
    from jala.train.pretrain import run_pretraining

    tok_path = _tokenizer_path(args, out_dir)
    tok = _load_tokenizer(tok_path, config)
    state = load_checkpoint(args.resume, config) if args.resume else None
    summary = run_pretraining(config, tok, out_dir, steps=args.steps, state=state, tokenizer_hash=_file_hash(tok_path))
    _summary("Pretraining", list(summary.items()))


def cmd_posttrain(args):
    """Flow-matching post-training on robot episodes."""
    config, out_dir, digest = _setup(args)
    from jala.train.posttrain import run_posttraining

    pretrained = None
    if config.posttrain.init == "pretrained":
        pretrained = Path(args.pretrained) if args.pretrained else out_dir / "pretrain.ckpt"
    summary = run_posttraining(config, out_dir, pretrained=pretrained, steps=args.steps)
    _summary("Post-training", list(summary.items()))


def cmd_eval(args):
    """Motion generation metrics on lab_eval / wild_eval."""
    config, out_dir, digest = _setup(args)
    from jala.evaluation.motion_eval import METRICS, eval_motion_generation, model_decoder, oracle_decoder
    from jala.numeric.backend import Rng
    from jala.world.synthetic import make_splits

    tok = _load_tokenizer(_tokenizer_path(args, out_dir), config)
    checkpoint = Path(args.checkpoint) if args.checkpoint else out_dir / "pretrain.ckpt"
    if args.oracle:
        decoder, checkpoint_id = oracle_decoder(tok, config), "oracle"
    else:
        state = _load_model(checkpoint, config)
        decoder, checkpoint_id = model_decoder(state, config, Rng(config.runtime.seed, "eval")), str(checkpoint)
    splits = make_splits(config.world)
    table = Table(title="Motion generation", border_style="cyan")
    table.add_column("split", style="bold")
    for m in METRICS:
        table.add_column(m, justify="right")
    table.add_column("count", justify="right")
    for name in args.split or ["lab_eval", "wild_eval"]:
        report = eval_motion_generation(splits[name], tok, config, decoder, name, digest, checkpoint_id)
        report.write(out_dir / "eval", name)
        table.add_row(name, *(f"{report.means[m]:.4f}" for m in METRICS), str(report.count))
    console.print(table)


def cmd_sweep(args):
    """Wild-fraction scaling sweep (pretrain + wild_eval per fraction and seed)."""
    config, out_dir, digest = _setup(args)
    from jala.evaluation.motion_eval import METRICS
    from jala.evaluation.sweep import run_sweep

    tok_path = _tokenizer_path(args, out_dir)
    tok = _load_tokenizer(tok_path, config)
    results = run_sweep(config, tok, out_dir / "sweep", steps=args.steps, tokenizer_hash=_file_hash(tok_path))
    table = Table(title="Wild-fraction sweep (median over seeds)", border_style="cyan")
    table.add_column("wild fraction", style="bold")
    for m in METRICS:
        table.add_column(m, justify="right")
    for fraction, report in results:
        table.add_row(f"{fraction:.2f}", *(f"{report.means[m]:.4f}" for m in METRICS))
    console.print(table)


def cmd_project(args):
    """2-D projection of predictive embeddings and latent actions."""
    config, out_dir, digest = _setup(args)
    import torch

    from jala.evaluation.projection import collect_embeddings, project_embeddings, write_projection_csv
    from jala.world.synthetic import make_splits

    checkpoint = Path(args.checkpoint) if args.checkpoint else out_dir / "pretrain.ckpt"
    state = _load_model(checkpoint, config)
    splits = make_splits(config.world)
    hs, zs, labels = [], [], []
    for name, split in (("lab", splits["lab_eval"]), ("wild", splits["wild_eval"])):
        h, z, lab = collect_embeddings(state, list(split)[:args.episodes], config, name)
        hs.append(h)
        zs.append(z)
        labels += lab
    projection = project_embeddings(torch.cat(hs), torch.cat(zs), labels + labels)
    path = write_projection_csv(projection, out_dir / "projection.csv")
    _summary("Projection", [
        ("rows", len(projection)),
        ("explained variance", ", ".join(f"{v:.3f}" for v in projection.explained_variance)),
        ("mean |h - z|", projection.mean_l1),
        ("rank deficient", projection.rank_deficient),
        ("saved", str(path)),
    ])


def cmd_selftest(args):
    """Run the invariant suite."""
    _setup(args)
    from jala.selftest import run_selftest

    results = run_selftest()
    table = Table(title="Self-test", border_style="cyan")
    table.add_column("check", style="bold")
    table.add_column("result")
    table.add_column("detail", style="dim")
    for r in results:
        table.add_row(r.name, "[green]pass[/]" if r.passed else "[red]FAIL[/]", r.detail)
    console.print(table)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"error: selftest: {len(failed)} checks failed: {', '.join(failed)}", file=sys.stderr)
        sys.exit(1)
    console.print(Panel.fit(f"[bold green]All {len(results)} checks passed[/]", border_style="green"))


def _file_hash(path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", default=None, help="JSON/YAML config file or bundled config name (e.g. desk)")
    common.add_argument("--out", "-o", default=None, help="Output directory (default: $JALA_OUT or ./runs)")
    common.add_argument("--seed", type=int, default=None, help="Run seed (unsigned 64-bit)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config field (repeatable)")
    common.add_argument("--quiet", "-q", action="store_true", help="Only log warnings and errors")

    parser = argparse.ArgumentParser(
        prog="jala",
        description="Desk-scale latent-action pretraining: data, tokenizer, pretraining, post-training, evaluation.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"jala-desk {__version__}")
    sub = parser.add_subparsers(dest="command")

    sub.add_parser("gen-data", parents=[common], help="Generate synthetic splits")

    p = sub.add_parser("train-tokenizer", parents=[common], help="Train the motion tokenizer")
    p.add_argument("--tokenizer", help="Output path (default: OUT/tokenizer.tok)")

    p = sub.add_parser("pretrain", parents=[common], help="Pretrain backbone and perceivers")
    p.add_argument("--tokenizer", help="Tokenizer file (default: OUT/tokenizer.tok)")
    p.add_argument("--steps", type=int, default=None, help="Stop at this step (default: pretrain.total_steps)")
    p.add_argument("--resume", help="Checkpoint to resume from")

    p = sub.add_parser("posttrain", parents=[common], help="Train the flow-matching action head")
    p.add_argument("--pretrained", help="Pretraining checkpoint (default: OUT/pretrain.ckpt)")
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("eval", parents=[common], help="Evaluate motion generation")
    p.add_argument("--tokenizer", help="Tokenizer file (default: OUT/tokenizer.tok)")
    p.add_argument("--checkpoint", help="Pretraining checkpoint (default: OUT/pretrain.ckpt)")
    p.add_argument("--split", action="append", choices=["lab_eval", "wild_eval"])
    p.add_argument("--oracle", action="store_true", help="Decode ground-truth tokens (tokenizer floor)")

    p = sub.add_parser("sweep", parents=[common], help="Wild-fraction scaling sweep")
    p.add_argument("--tokenizer", help="Tokenizer file (default: OUT/tokenizer.tok)")
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("project", parents=[common], help="Project h and z to 2-D")
    p.add_argument("--checkpoint", help="Pretraining checkpoint (default: OUT/pretrain.ckpt)")
    p.add_argument("--episodes", type=int, default=16, help="Episodes per split")

    sub.add_parser("selftest", parents=[common], help="Run the invariant suite")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data, "train-tokenizer": cmd_train_tokenizer, "pretrain": cmd_pretrain,
    "posttrain": cmd_posttrain, "eval": cmd_eval, "sweep": cmd_sweep, "project": cmd_project,
    "selftest": cmd_selftest,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 2

    _setup_logging(args.quiet)
    try:
        COMMANDS[args.command](args)
    except JalaError as e:
        message = str(e).replace("\n", " ")
        print(f"error: {e.kind}: {message}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.debug("unexpected failure", exc_info=True)
        message = str(e).replace("\n", " ")
        print(f"error: internal: {type(e).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
