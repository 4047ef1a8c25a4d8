"""
Command-line interface for diffusion-coupler.

  coupler pretrain   --data x.csv --out x.ckpt
  coupler couple     --x-data x.csv --y-data y.csv --x-anchor x.ckpt --y-anchor y.ckpt --out-dir run/
  coupler translate  --ckpt run/phi.ckpt --input x.csv --direction x2y --out y_hat.csv
  coupler evaluate   --metric foscttm --source y_hat.csv --target y.csv
  coupler synth      --generator gmm_rotate --out-dir data/
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, apply_overrides, describe_keys, load_config
from .data import (
    Normalizer,
    SyntheticSpec,
    TabularDataset,
    fit_normalizer,
    load_csv,
    split_dataset,
    synth_coupled,
    write_csv,
)
from .denoiser import init_params
from .diffusion import (
    DiffusionModel,
    SampleConfig,
    evaluation_loss,
    load_model,
    sample,
    save_model,
    train_unconditional,
)
from .errors import CouplerError, DataError, ShapeError, UsageError
from .mec import CouplingPair, StepDiagnostics, mec_training_loop
from .metrics import (
    MetricResult,
    PairedEval,
    estimate_coupling_entropy,
    foscttm,
    label_transfer_accuracy,
    mapping_purity,
    majority_vote,
    marginal_drift,
    nearest_indices,
    neighborhood_type_accuracy,
    nn_project,
    oracle_gap,
)


logger = logging.getLogger("coupler")

METRICS = ("foscttm", "label_transfer", "celltype", "entropy", "oracle_gap", "purity")
DIAGNOSTIC_FIELDS = [
    "step", "phase", "reward_mean", "reward_stderr", "baseline", "surrogate", "kl",
    "consistency_loss", "grad_norm", "clip_fraction", "buffer_size",
]


# =============================================================================
# COLORS (ANSI escape codes)
# =============================================================================

class Colors:
    RED = "\033[0;31m"
    GREEN = "\033[0;32m"
    YELLOW = "\033[1;33m"
    BLUE = "\033[0;34m"
    CYAN = "\033[0;36m"
    PURPLE = "\033[0;35m"
    NC = "\033[0m"  # No Color

    @classmethod
    def disable(cls):
        """Disable colors (for non-TTY output)."""
        cls.RED = ""
        cls.GREEN = ""
        cls.YELLOW = ""
        cls.BLUE = ""
        cls.CYAN = ""
        cls.PURPLE = ""
        cls.NC = ""


def print_status(color: str, message: str) -> None:
    """Print a colored status message."""
    print(f"{color}{message}{Colors.NC}")


def print_verbose(message: str, verbose: bool) -> None:
    """Print a verbose message if verbose mode is enabled."""
    if verbose:
        print(f"{Colors.CYAN}  [VERBOSE] {message}{Colors.NC}", file=sys.stderr)


# =============================================================================
# CLI ARGUMENT PARSING
# =============================================================================

class _Parser(argparse.ArgumentParser):
    """Report bad arguments as usage errors (exit 1) instead of exiting with 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(parser: argparse.ArgumentParser, seed: bool = True) -> None:
    parser.add_argument("--config", metavar="FILE", help="Config file of 'key = value' lines")
    parser.add_argument(
        "--set", metavar="KEY=VALUE", action="append", default=[],
        help="Override one config key (repeatable)",
    )
    if seed:
        parser.add_argument("--seed", type=int, help="Random seed (overrides 'seed')")
    parser.add_argument("--verbose", action="store_true", help="Show detailed progress information")
    parser.add_argument("--quiet", action="store_true", help="Hide progress bars")


def create_parser() -> argparse.ArgumentParser:
    """Create the argument parser with all subcommands."""
    keys = f"Config keys (defaults):\n{describe_keys()}"
    parser = _Parser(
        prog="coupler",
        description="Minimum-entropy coupling of two datasets with cooperating diffusion models",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s pretrain --data x.csv --out x.ckpt --steps 5000
  %(prog)s couple --x-data x.csv --y-data y.csv --x-anchor x.ckpt --y-anchor y.ckpt --out-dir run
  %(prog)s translate --ckpt run/phi.ckpt --input x.csv --direction x2y --out y_hat.csv
  %(prog)s evaluate --metric foscttm --source y_hat.csv --target y.csv
""",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser(
        "pretrain", help="Train an unconditional anchor model",
        formatter_class=argparse.RawDescriptionHelpFormatter, epilog=keys,
    )
    p.add_argument("--data", required=True, metavar="CSV", help="Training data")
    p.add_argument("--out", required=True, metavar="CKPT", help="Checkpoint to write")
    p.add_argument("--steps", type=int, help="Training steps (overrides train.steps)")
    p.add_argument("--losses", metavar="CSV", help="Loss curve (default: <out>.losses.csv)")
    _common(p)

    p = sub.add_parser(
        "couple", help="Fine-tune both conditional models from their anchors",
        formatter_class=argparse.RawDescriptionHelpFormatter, epilog=keys,
    )
    p.add_argument("--x-data", required=True, metavar="CSV")
    p.add_argument("--y-data", required=True, metavar="CSV")
    p.add_argument("--x-anchor", required=True, metavar="CKPT", help="Unconditional model of X")
    p.add_argument("--y-anchor", required=True, metavar="CKPT", help="Unconditional model of Y")
    p.add_argument("--out-dir", required=True, metavar="DIR", help="Receives theta.ckpt, phi.ckpt, diagnostics.csv")
    p.add_argument("--steps", type=int, help="Loop iterations (overrides rl.total_steps)")
    _common(p)

    p = sub.add_parser(
        "translate", help="Sample the other modality for every input row",
        formatter_class=argparse.RawDescriptionHelpFormatter, epilog=keys,
    )
    p.add_argument("--ckpt", required=True, metavar="CKPT")
    p.add_argument("--input", required=True, metavar="CSV", help="Conditioning rows")
    p.add_argument("--direction", required=True, choices=("x2y", "y2x"))
    p.add_argument("--out", required=True, metavar="CSV")
    p.add_argument("--guidance", type=float, help="Guidance scale (overrides sample.guidance)")
    p.add_argument("--ddim-steps", type=int, help="Sampling steps (overrides sample.n_steps)")
    p.add_argument("--project", metavar="CSV", help="Snap every output row to its nearest row of this dataset")
    _common(p)

    p = sub.add_parser(
        "evaluate", help="Compute one metric and print it as CSV",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Inputs per metric:
  foscttm         --source, --target (row i of one matches row i of the other)
  label_transfer  --source, --target (both labeled), --k
  celltype        --generated (labels = true labels), --reference (labeled), --k, --sublabels
  purity          --generated (labels = source clusters), --reference (labeled), --k
  entropy         --theta, --phi, --x-anchor, --y-anchor, --cond-data, --direction, --k-mc
  oracle_gap      --source, --target (paired rows), --bins, --axis
                  each side is binned on the quantiles of the single column --axis
""",
    )
    p.add_argument("--metric", required=True, choices=METRICS)
    p.add_argument("--source", metavar="CSV")
    p.add_argument("--target", metavar="CSV")
    p.add_argument("--generated", metavar="CSV")
    p.add_argument("--reference", metavar="CSV")
    p.add_argument("--k", type=int, default=5, help="Neighbours for k-NN metrics (default: 5)")
    p.add_argument("--sublabels", action="store_true", help="celltype: vote on sublabels")
    p.add_argument("--theta", metavar="CKPT")
    p.add_argument("--phi", metavar="CKPT")
    p.add_argument("--x-anchor", metavar="CKPT")
    p.add_argument("--y-anchor", metavar="CKPT")
    p.add_argument("--cond-data", metavar="CSV")
    p.add_argument("--direction", choices=("theta", "phi"), default="theta")
    p.add_argument("--k-mc", type=int, default=100, help="entropy: Monte-Carlo draws per point")
    p.add_argument("--bins", type=int, default=4, help="oracle_gap: grid size per side")
    p.add_argument("--axis", type=int, default=0,
                   help="oracle_gap: the one column binned on each side; other columns are ignored (default: 0)")
    p.add_argument("--out", metavar="CSV", help="Also write the rows to this file")
    _common(p)

    p = sub.add_parser("synth", help="Write a synthetic coupled pair of datasets")
    p.add_argument("--generator", default="gmm_rotate", choices=("gmm_rotate", "linear_map", "checkerboard"))
    p.add_argument("--n-samples", type=int, default=5000)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--components", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--angle", type=float, default=90.0)
    p.add_argument("--out-dir", required=True, metavar="DIR")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--quiet", action="store_true")

    return parser


def build_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then --set, then dedicated flags."""
    config = load_config(args.config)
    apply_overrides(config, args.set)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    flags = {
        "steps": "train.steps" if args.command == "pretrain" else "rl.total_steps",
        "guidance": "sample.guidance",
        "ddim_steps": "sample.n_steps",
    }
    for attr, key in flags.items():
        value = getattr(args, attr, None)
        if value is not None:
            config.set(key, str(value), where=f"--{attr.replace('_', '-')}")
    return config


# =============================================================================
# HELPERS
# =============================================================================

def _progress(args) -> bool:
    return not args.quiet and sys.stderr.isatty()


def _normalize(points: np.ndarray, normalizer: Normalizer | None) -> np.ndarray:
    return points if normalizer is None else normalizer.apply(points)


def _denormalize(points: np.ndarray, normalizer: Normalizer | None) -> np.ndarray:
    return points if normalizer is None else normalizer.invert(points)


def _held_out_split(dataset: TabularDataset, config: RunConfig) -> tuple[TabularDataset, TabularDataset | None]:
    """The train/held-out split shared by pretrain and couple; no split below ten rows."""
    if config.data.test_fraction > 0 and dataset.n >= 10:
        return split_dataset(dataset, config.data.test_fraction, config.seed)
    return dataset, None


def _write_rows(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _require(args, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"metric '{args.metric}' needs {', '.join(missing)}")


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_pretrain(args, config: RunConfig) -> int:
    data_path = Path(args.data)
    out = Path(args.out)
    dataset = load_csv(data_path)
    if dataset.n == 0:
        raise DataError(f"{data_path}: no data rows to train on")

    train, held_out = _held_out_split(dataset, config)
    normalizer = fit_normalizer(train, config.data.clip_sigmas) if config.data.normalize else None
    points = _normalize(train.points, normalizer)

    rng = np.random.default_rng(config.seed)
    model = DiffusionModel(
        params=init_params(config.model.denoiser(dataset.dim), rng),
        schedule=config.schedule.build(),
        ema_decay=config.train.ema_decay,
        normalizer=normalizer,
    )
    model.enable_ema()

    print_status(Colors.BLUE, "=== Pretraining unconditional model ===")
    print_status(Colors.BLUE, f"Data: {data_path} ({train.n} rows, {dataset.dim} features)")
    print_status(Colors.BLUE, f"Steps: {config.train.steps}, parameters: {model.params.count()}")

    losses = train_unconditional(
        model, points, config.train.steps, config.train.batch_size, rng,
        lr=config.train.lr, grad_clip=config.train.grad_clip,
        on_step=lambda step, loss: print_verbose(f"step {step}: loss {loss:.6f}", args.verbose),
        progress=_progress(args),
    )

    save_model(out, model)
    loss_path = Path(args.losses) if args.losses else out.with_name(out.name + ".losses.csv")
    _write_rows(loss_path, ["step", "loss"], [{"step": i, "loss": repr(float(v))} for i, v in enumerate(losses)])

    print()
    print_status(Colors.BLUE, "=== Summary ===")
    if losses:
        print_status(Colors.GREEN, f"Loss: {losses[0]:.4f} -> {losses[-1]:.4f}")
    if held_out is not None and held_out.n:
        value = evaluation_loss(model, _normalize(held_out.points, normalizer), seed=config.seed, use_ema=True)
        print_status(Colors.GREEN, f"Held-out denoising loss (EMA): {value:.4f}")
    print_status(Colors.GREEN, f"Checkpoint: {out}")
    print_status(Colors.GREEN, f"Loss curve: {loss_path}")
    return 0


def cmd_couple(args, config: RunConfig) -> int:
    x = load_csv(args.x_data)
    y = load_csv(args.y_data)
    theta_anchor = load_model(args.x_anchor)
    phi_anchor = load_model(args.y_anchor)
    for name, model, dataset in (("x", theta_anchor, x), ("y", phi_anchor, y)):
        if model.conditional:
            raise UsageError(f"--{name}-anchor must be an unconditional checkpoint")
        if model.data_dim != dataset.dim:
            raise ShapeError(f"--{name}-anchor models {model.data_dim} features, --{name}-data has {dataset.dim}")

    pair = CouplingPair.from_anchors(theta_anchor, phi_anchor)
    x_train, x_held_out = _held_out_split(x, config)
    y_train, _ = _held_out_split(y, config)
    x_points = _normalize(x_train.points, theta_anchor.normalizer)
    y_points = _normalize(y_train.points, phi_anchor.normalizer)
    drift_points = x_points if x_held_out is None else _normalize(x_held_out.points, theta_anchor.normalizer)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    print_status(Colors.BLUE, "=== Coupling ===")
    print_status(Colors.BLUE, f"X: {args.x_data} ({x.n} x {x.dim}), Y: {args.y_data} ({y.n} x {y.dim})")
    print_status(Colors.BLUE, f"Iterations: {config.rl.total_steps}, batch {config.rl.batch_size}")

    rows: list[dict] = []

    def on_step(record: StepDiagnostics) -> None:
        rows.append(record.to_row())
        print_verbose(
            f"step {record.step} {record.phase}: reward {record.reward_mean:.4f} "
            f"kl {record.kl:.3g} consistency {record.consistency_loss:.4f}",
            args.verbose,
        )

    result = mec_training_loop(
        pair, x_points, y_points, config.rl, np.random.default_rng(config.seed),
        on_step=on_step, progress=_progress(args),
    )

    save_model(out_dir / "theta.ckpt", result.pair.theta)
    save_model(out_dir / "phi.ckpt", result.pair.phi)
    _write_rows(out_dir / "diagnostics.csv", DIAGNOSTIC_FIELDS, rows)

    print()
    print_status(Colors.BLUE, "=== Summary ===")
    if result.log:
        first, last = result.log[0], result.log[-2]
        print_status(Colors.GREEN, f"Theta reward: {first.reward_mean:.4f} -> {last.reward_mean:.4f}")
        drift = marginal_drift(result.pair.theta, theta_anchor, drift_points[:1000], seed=config.seed)
        color = Colors.GREEN if drift <= 2.0 else Colors.YELLOW
        print_status(color, f"Marginal drift (theta / anchor loss): {drift:.3f}")
    print_status(Colors.GREEN, f"Checkpoints: {out_dir / 'theta.ckpt'}, {out_dir / 'phi.ckpt'}")
    print_status(Colors.GREEN, f"Diagnostics: {out_dir / 'diagnostics.csv'} ({len(rows)} rows)")
    return 0


# theta models X given Y, so it translates y2x; phi translates x2y.
ROLE_DIRECTION = {"theta": "y2x", "phi": "x2y"}


def cmd_translate(args, config: RunConfig) -> int:
    model = load_model(args.ckpt)
    expected = ROLE_DIRECTION.get(model.role)
    if expected is not None and expected != args.direction:
        raise UsageError(f"{args.ckpt} is the {model.role} model and translates {expected}, not {args.direction}")
    source = load_csv(args.input)
    if model.conditional and source.dim != model.cond_dim:
        raise ShapeError(f"model conditions on {model.cond_dim} features, --input has {source.dim}")
    projection = load_csv(args.project) if args.project else None
    if projection is not None and projection.dim != model.data_dim:
        raise ShapeError(f"--project data has {projection.dim} features, model generates {model.data_dim}")

    cond = _normalize(source.points, model.cond_normalizer)
    sample_config = SampleConfig(
        n_steps=config.sample.n_steps,
        guidance=config.sample.guidance,
        eta=config.sample.eta,
        seed=config.seed,
        use_ema=config.sample.use_ema,
    )
    generated = sample(model, cond, sample_config).samples
    generated = _denormalize(generated, model.normalizer)
    columns = None
    if projection is not None:
        generated = nn_project(generated, projection.points)
        columns = projection.columns
    write_csv(args.out, TabularDataset(generated, labels=source.labels, sublabels=source.sublabels, columns=columns))

    print_status(Colors.GREEN, f"Translated {source.n} rows ({args.direction}) -> {args.out}")
    print_verbose(f"guidance {sample_config.guidance}, {sample_config.n_steps} steps, seed {config.seed}", args.verbose)
    return 0


def _evaluate(args, config: RunConfig) -> list[MetricResult]:
    metric = args.metric
    if metric == "foscttm":
        _require(args, "source", "target")
        a, b = load_csv(args.source), load_csv(args.target)
        if a.n != b.n:
            raise ShapeError(f"--source has {a.n} rows, --target has {b.n}")
        return [foscttm(PairedEval(a.points, b.points, np.arange(a.n)))]
    if metric == "label_transfer":
        _require(args, "source", "target")
        return [label_transfer_accuracy(load_csv(args.source), load_csv(args.target), args.k)]
    if metric == "celltype":
        _require(args, "generated", "reference")
        generated = load_csv(args.generated)
        truth = generated.sublabels if args.sublabels else generated.labels
        if truth is None:
            raise DataError(f"{args.generated} carries no true labels")
        return [neighborhood_type_accuracy(generated.points, load_csv(args.reference), truth, args.k, args.sublabels)]
    if metric == "purity":
        _require(args, "generated", "reference")
        generated, reference = load_csv(args.generated), load_csv(args.reference)
        if generated.labels is None or reference.labels is None:
            raise DataError("purity needs labels in both --generated and --reference")
        mapped = majority_vote(reference.labels[nearest_indices(generated.points, reference.points, args.k)])
        return [mapping_purity(generated.labels, mapped)]
    if metric == "entropy":
        _require(args, "theta", "phi", "x_anchor", "y_anchor", "cond_data")
        pair = CouplingPair(load_model(args.theta), load_model(args.phi), load_model(args.x_anchor), load_model(args.y_anchor))
        cond_model = pair.theta if args.direction == "theta" else pair.phi
        cond = _normalize(load_csv(args.cond_data).points, cond_model.cond_normalizer)
        sample_config = SampleConfig(
            n_steps=config.sample.n_steps, guidance=config.sample.guidance, eta=config.sample.eta,
            use_ema=config.sample.use_ema,
        )
        est = estimate_coupling_entropy(pair, cond, args.k_mc, np.random.default_rng(config.seed), sample_config, args.direction)
        print_verbose(est.caveat, args.verbose)
        return [
            MetricResult("conditional_entropy", est.conditional, est.conditional_stderr, est.n),
            MetricResult("joint_entropy", est.joint, est.conditional_stderr, est.n),
            MetricResult("mutual_information", est.mutual_information, est.mi_stderr, est.n),
            MetricResult("cond_marginal_entropy", est.cond_marginal, 0.0, est.n),
        ]
    _require(args, "source", "target")
    a, b = load_csv(args.source), load_csv(args.target)
    if a.n != b.n:
        raise ShapeError(f"--source has {a.n} rows, --target has {b.n}")
    gap = oracle_gap(a.points, b.points, args.bins, args.axis)
    return [
        MetricResult("learned_entropy", gap.learned, 0.0, a.n),
        MetricResult("oracle_entropy", gap.oracle, 0.0, a.n),
        MetricResult("greedy_entropy", gap.greedy, 0.0, a.n),
        MetricResult("oracle_gap", gap.gap, 0.0, a.n),
    ]


def cmd_evaluate(args, config: RunConfig) -> int:
    results = _evaluate(args, config)
    fieldnames = ["metric", "value", "stderr", "n"]
    rows = [{"metric": r.name, "value": repr(float(r.value)), "stderr": repr(float(r.stderr)), "n": r.n} for r in results]
    writer = csv.DictWriter(sys.stdout, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        _write_rows(Path(args.out), fieldnames, rows)
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        generator=args.generator,
        n_samples=args.n_samples,
        dim=args.dim,
        components=args.components,
        noise=args.noise,
        angle_deg=args.angle,
        seed=args.seed,
    )
    pair = synth_coupled(spec)
    out_dir = Path(args.out_dir)
    write_csv(out_dir / "x.csv", pair.x)
    write_csv(out_dir / "y.csv", pair.y)
    # Row-aligned copy of Y for metrics that need the true match.
    write_csv(out_dir / "y_matched.csv", pair.y.subset(pair.correspondence))
    print_status(Colors.GREEN, f"Wrote {spec.n_samples} rows per side to {out_dir}")
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "couple": cmd_couple,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
}


# =============================================================================
# MAIN ENTRY POINT
# =============================================================================

def main(argv: list[str] | None = None) -> int:
    """
    Main entry point for the CLI.

    Args:
        argv: Command-line arguments (defaults to sys.argv[1:])

    Returns:
        Exit code: 0 success, 1 usage error, 2 data error, 3 numerical failure
    """
    # Disable colors if not a TTY
    if not sys.stdout.isatty():
        Colors.disable()

    try:
        args = create_parser().parse_args(argv)
        logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
        logger.setLevel(logging.DEBUG if args.verbose else logging.WARNING)
        if args.command == "synth":
            return cmd_synth(args)
        config = build_config(args)
        return COMMANDS[args.command](args, config)
    except CouplerError as e:
        print_status(Colors.RED, f"Error: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
