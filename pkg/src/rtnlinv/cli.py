"""Command-line interface for rtnlinv."""

import sys
import argparse
import logging
from pathlib import Path
from typing import Dict, List, Optional

# Handle both direct script execution and module import
if __name__ == "__main__" and __package__ is None:
    src_path = Path(__file__).resolve().parent.parent
    if str(src_path) not in sys.path:
        sys.path.insert(0, str(src_path))
    __package__ = "rtnlinv"

from .autotune import (
    ProtocolKey,
    TuningDatabase,
    TuningRecord,
    learn_step,
    select,
    steady_state_runtime,
    tune_report,
)
from .config import (
    AutotuneMode,
    ImagingMode,
    ReportFormat,
    RunConfig,
    configure_logging,
    load_config_sections,
)
from .errors import ConfigurationError, RtnlinvError, UsageError
from .ingest import DatasetHeader, ImageWriter, KSpaceReader, KSpaceWriter
from .pipeline import run_pipeline
from .planner import GAMMA_MAX, ReconPlan, benchmark_fft, grid_interval, load_or_benchmark
from .preproc import PsfCache
from .report import PerfReport
from .seqsim import simulate_frame, specs_from_config

logger = logging.getLogger(__name__)

# Desk-scale defaults; larger acquisitions are selectable by flag
DESK_IMAGE_SIZE = 64
DESK_SPOKES = 11
DESK_TURNS = 5
DESK_CHANNELS = 4

_PLAN_KEYS = {
    "newton_steps": int,
    "alpha0": float,
    "alpha_reduction": float,
    "alpha_min": float,
    "cg_tol": float,
    "cg_max_iter": int,
    "coil_grid": int,
    "data_scale": float,
    "gradient_delay": float,
}


def create_parser() -> argparse.ArgumentParser:
    """Create argument parser for CLI."""
    parser = argparse.ArgumentParser(
        prog="rtnlinv",
        description="rtnlinv - parallel nonlinear inverse reconstruction for real-time MRI",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Generate a small synthetic dataset
  rtnlinv phantom -o cine.rtk --frames 30

  # Reconstruct it with two threads of two workers each
  rtnlinv reconstruct cine.rtk -o cine.rti --threads 2 --workers 2

  # Let the autotuning database pick (T, A), or explore new configurations
  rtnlinv reconstruct cine.rtk -o cine.rti --autotune
  rtnlinv reconstruct cine.rtk -o cine.rti --autotune learn

  # Measure FFT runtimes for grid sizes 32..128
  rtnlinv bench-fft --lo 32 --hi 128 -o fft.tsv

Exit codes:
  0  success
  2  usage or configuration error
  3  data error
  4  solver divergence or decomposition fault
        """,
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Show INFO messages")
    parser.add_argument("--version", action="version", version="%(prog)s 0.1.0")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    ph = sub.add_parser("phantom", help="Generate a synthetic k-space dataset")
    ph.add_argument("-o", "--output", type=Path, required=True, help="Output .rtk file")
    ph.add_argument("--config", type=Path, help="key=value config file")
    ph.add_argument("--size", type=int, default=DESK_IMAGE_SIZE, help="Image side N (default: 64)")
    ph.add_argument("--frames", type=int, default=30, help="Frames to simulate (default: 30)")
    ph.add_argument("--spokes", type=int, help=f"Spokes per frame K (default: {DESK_SPOKES})")
    ph.add_argument("--turns", type=int, help=f"Turns U (default: {DESK_TURNS})")
    ph.add_argument("--coils", type=int, help=f"Physical channels (default: {DESK_CHANNELS})")
    ph.add_argument("--slices", type=int, default=1, help="Slices in multi_slice mode")
    ph.add_argument(
        "--mode",
        choices=[m.value for m in ImagingMode],
        default=ImagingMode.SINGLE_SLICE.value,
        help="Imaging mode (default: single_slice)",
    )
    ph.add_argument("--noise", type=float, help="Complex Gaussian noise level")
    ph.add_argument("--seed", type=int, default=0, help="Noise seed (default: 0)")

    rec = sub.add_parser("reconstruct", help="Reconstruct a dataset through the pipeline")
    rec.add_argument("input", type=Path, help="Input .rtk file")
    rec.add_argument("-o", "--output", type=Path, required=True, help="Output .rti file")
    rec.add_argument("--config", type=Path, help="key=value config file with a [plan] section")
    rec.add_argument("--gamma", type=float, help="Fixed grid oversampling (default: 1.5)")
    rec.add_argument("--gamma-min", type=float, default=1.4, help="Lower bound for --fft-table")
    rec.add_argument("--fft-table", type=Path, help="FFT lookup table used to pick the grid")
    rec.add_argument("--newton-steps", type=int, help="Gauss-Newton steps M (default: 6)")
    rec.add_argument("--alpha0", type=float, help="Initial regularisation (default: 1)")
    rec.add_argument("--alpha-reduction", type=float, help="Reduction factor q (default: 0.5)")
    rec.add_argument("--cg-tol", type=float, help="Relative CG tolerance (default: 1e-3)")
    rec.add_argument("--virtual-channels", type=int, help="Compress to this many channels")
    rec.add_argument("--threads", "-T", type=int, help="Reconstruction threads T")
    rec.add_argument("--workers", "-A", type=int, help="Compute workers per thread A")
    rec.add_argument(
        "--autotune",
        nargs="?",
        const=AutotuneMode.SELECT.value,
        choices=[m.value for m in AutotuneMode],
        help="Pick (T, A) from the tuning database; 'learn' explores untried configurations",
    )
    rec.add_argument("--tune-db", type=Path, default=Path("tune.tsv"), help="Tuning database")
    rec.add_argument("--total-workers", type=int, default=8, help="Workers available (default: 8)")
    rec.add_argument("--queue-capacity", type=int, default=4, help="Stage mailbox size")
    rec.add_argument("--median-filter", action="store_true", help="Temporal median-of-3")
    rec.add_argument("--psf-cache", type=Path, help="Persistent .npz PSF cache")
    rec.add_argument(
        "--report",
        choices=[f.value for f in ReportFormat],
        default=ReportFormat.TEXT.value,
        help="Report format (default: text)",
    )
    rec.add_argument("--baseline-ms", type=float, help="Baseline ms/frame for speedup")

    bench = sub.add_parser("bench-fft", help="Benchmark 2D FFT sizes")
    bench.add_argument("--lo", type=int, required=True, help="Smallest size")
    bench.add_argument("--hi", type=int, required=True, help="Largest size")
    bench.add_argument("--trials", type=int, default=5, help="Timed trials per size")
    bench.add_argument("-o", "--output", type=Path, default=Path("fft.tsv"), help="Table file")

    tune = sub.add_parser("tune-report", help="Print the tuning database per protocol")
    tune.add_argument("--tune-db", type=Path, default=Path("tune.tsv"), help="Tuning database")

    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """Map parsed arguments onto a validated RunConfig."""
    get = lambda name, default=None: getattr(args, name, default)  # noqa: E731
    return RunConfig(
        subcommand=args.subcommand,
        input_path=get("input"),
        output_path=get("output"),
        config_path=get("config"),
        fft_table_path=get("fft_table"),
        tune_db_path=get("tune_db", Path("tune.tsv")),
        psf_cache_path=get("psf_cache"),
        image_size=get("size"),
        gamma_min=get("gamma_min", 1.4),
        gamma=get("gamma"),
        newton_steps=get("newton_steps"),
        alpha0=get("alpha0"),
        alpha_reduction=get("alpha_reduction"),
        cg_tol=get("cg_tol"),
        virtual_channels=get("virtual_channels"),
        threads=get("threads"),
        workers=get("workers"),
        autotune=AutotuneMode(args.autotune) if get("autotune") else None,
        total_workers=get("total_workers", 8),
        queue_capacity=get("queue_capacity", 4),
        median_filter=get("median_filter", False),
        frames=get("frames", 30),
        spokes=get("spokes"),
        turns=get("turns"),
        channels=get("coils"),
        slices=get("slices", 1),
        mode=ImagingMode(get("mode", ImagingMode.SINGLE_SLICE.value)),
        noise=get("noise"),
        seed=get("seed", 0),
        report=ReportFormat(get("report", ReportFormat.TEXT.value)),
        baseline_ms=get("baseline_ms"),
    )


def _sections(config: RunConfig) -> Dict[str, Dict[str, str]]:
    return load_config_sections(config.config_path) if config.config_path else {}


def cmd_phantom(config: RunConfig) -> int:
    """Simulate a dataset and write it as ``.rtk``."""
    sections = _sections(config)
    N = config.image_size or DESK_IMAGE_SIZE
    # flags override the file, the file overrides desk defaults
    traj = sections.setdefault("trajectory", {})
    traj.setdefault("spokes", str(DESK_SPOKES))
    traj.setdefault("turns", str(DESK_TURNS))
    if config.spokes is not None:
        traj["spokes"] = str(config.spokes)
    if config.turns is not None:
        traj["turns"] = str(config.turns)
    coils = sections.setdefault("coils", {})
    coils.setdefault("count", str(DESK_CHANNELS))
    if config.channels is not None:
        coils["count"] = str(config.channels)
    phantom_section = sections.setdefault("phantom", {})
    phantom_section["seed"] = str(config.seed)
    if config.noise is not None:
        phantom_section["noise"] = str(config.noise)
    if config.mode is ImagingMode.FLOW:
        phantom_section.setdefault("flow_phase", "0.7")
    spec, phantom = specs_from_config(sections, N)
    delay = float(traj.get("gradient_delay", 0.0))

    header = DatasetHeader(
        image_size=N,
        channels=phantom.coil_count,
        spokes=spec.spokes,
        turns=spec.turns,
        frames=config.frames,
        slices=config.slices,
        mode=config.mode,
        samples_per_spoke=spec.samples_per_spoke,
        base_angle=spec.base_angle,
    )
    with KSpaceWriter(config.output_path, header) as writer:  # type: ignore[arg-type]
        for n in range(config.frames):
            for s in range(config.slices):
                writer.write_frame(simulate_frame(phantom, spec, n, s, config.mode, delay))
    logger.info(
        f"wrote {config.frames} frames x {config.slices} slices "
        f"(N={N}, J={header.channels}, K={spec.spokes}, U={spec.turns}) to {config.output_path}"
    )
    return 0


def build_plan(config: RunConfig, N: int, sections: Dict[str, Dict[str, str]]) -> ReconPlan:
    """Plan from the [plan] section, CLI overrides and the grid choice."""
    solver = {}
    for key, value in sections.get("plan", {}).items():
        if key not in _PLAN_KEYS:
            if key not in ("gamma", "gamma_min"):
                raise ConfigurationError(f"unknown [plan] key {key!r}")
            continue
        try:
            solver[key] = _PLAN_KEYS[key](value)
        except ValueError as exc:
            raise ConfigurationError(f"[plan] {key}: {exc}") from exc
    overrides = {
        "newton_steps": config.newton_steps,
        "alpha0": config.alpha0,
        "alpha_reduction": config.alpha_reduction,
        "cg_tol": config.cg_tol,
    }
    solver.update({k: v for k, v in overrides.items() if v is not None})

    if config.fft_table_path is not None:
        lo, hi = grid_interval(N, config.gamma_min, GAMMA_MAX)
        table = load_or_benchmark(config.fft_table_path, lo, hi)
        plan = ReconPlan.from_table(N, table, config.gamma_min, GAMMA_MAX, **solver)
    else:
        gamma = config.gamma or float(sections.get("plan", {}).get("gamma", 1.5))
        plan = ReconPlan.from_gamma(N, gamma, **solver)
    logger.debug(
        f"plan: N={N} G={plan.grid_size} gamma={plan.gamma:.5f} G_c={plan.coil_grid} "
        f"M={plan.newton_steps}"
    )
    return plan


def _choose_parallelism(
    config: RunConfig, header: DatasetHeader, channels: int, db: Optional[TuningDatabase]
) -> tuple:
    if config.autotune is None or db is None:
        return config.parallelism
    key = ProtocolKey.for_run(header.mode, header.image_size, header.frames, channels)
    if config.autotune is AutotuneMode.LEARN:
        T, A = learn_step(key, db, config.total_workers)
    else:
        T, A = select(key, db, config.total_workers)
    logger.info(f"autotune ({config.autotune.value}): {key} -> T={T}, A={A}")
    return T, A


def cmd_reconstruct(config: RunConfig) -> int:
    """Run the full pipeline and print a PerfReport."""
    sections = _sections(config)
    db = TuningDatabase(config.tune_db_path) if config.autotune is not None else None
    cache = PsfCache()
    if config.psf_cache_path is not None and config.psf_cache_path.exists():
        logger.debug(f"loaded {cache.load(config.psf_cache_path)} PSF kernels")

    with KSpaceReader(config.input_path) as reader:  # type: ignore[arg-type]
        header = reader.header
        plan = build_plan(config, header.image_size, sections)
        channels = config.virtual_channels or header.channels
        if channels > header.channels:
            raise ConfigurationError(
                f"--virtual-channels {channels} exceeds {header.channels} physical channels"
            )
        T, A = _choose_parallelism(config, header, channels, db)
        with ImageWriter(config.output_path, header.image_size) as writer:  # type: ignore[arg-type]
            summary = run_pipeline(
                reader,
                writer,
                plan,
                threads=T,
                workers=A,
                queue_capacity=config.queue_capacity,
                median_filter=config.median_filter,
                virtual_channels=config.virtual_channels,
                cache=cache,
            )

    runtime_ms = steady_state_runtime(summary.sink_times, summary.prologue_ticks)
    if runtime_ms is None and summary.frames:
        runtime_ms = summary.seconds * 1e3 / summary.frames
    if db is not None and runtime_ms:
        key = ProtocolKey.for_run(header.mode, header.image_size, header.frames, channels)
        db.append(TuningRecord(key, T, A, runtime_ms))
    if config.psf_cache_path is not None:
        cache.save(config.psf_cache_path)

    report = PerfReport.from_summary(summary, T, A, runtime_ms, config.baseline_ms)
    if config.report is ReportFormat.JSON:
        print(report.to_json())
    else:
        print(report.to_text())
    return 0


def cmd_bench_fft(config: RunConfig, lo: int, hi: int, trials: int) -> int:
    table = benchmark_fft(lo, hi, trials)
    table.save(config.output_path)  # type: ignore[arg-type]
    print(f"{len(table.entries)} sizes written to {config.output_path}")
    return 0


def cmd_tune_report(config: RunConfig) -> int:
    if not config.tune_db_path.exists():
        raise UsageError(f"tuning database {config.tune_db_path} does not exist")
    print(tune_report(TuningDatabase(config.tune_db_path)))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for CLI."""
    parser = create_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)

    try:
        config = config_from_args(args)
        if args.subcommand == "phantom":
            return cmd_phantom(config)
        if args.subcommand == "reconstruct":
            return cmd_reconstruct(config)
        if args.subcommand == "bench-fft":
            return cmd_bench_fft(config, args.lo, args.hi, args.trials)
        return cmd_tune_report(config)
    except KeyboardInterrupt:
        print("\n\nStopping rtnlinv...", file=sys.stderr)
        return 130
    except RtnlinvError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
