"""Command-line front end: synth, run, embed, eval, mine.

Experiments are reproducible from a single seed: the split stream is derived
as hash(seed, "split") and mixed with the trial index inside a counter-based
generator. `run` writes cmc.csv, report.json (config echo, per-trial curves,
model checksums, resolved bandwidths), trace.jsonl for self-training modes,
and the final model. Config files are flat `section.key = value` lines;
command-line flags override file values; unknown keys are rejected.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (
    FeatureTable,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    load_feature_table,
    save_feature_table,
    table_format_for,
)
from .errors import (
    ConfigError,
    DataFormatError,
    DataValidationError,
    DegenerateDataError,
    EmptyModelError,
    InsufficientSamplesError,
    NumericalError,
    ProtocolError,
    SelfTrainingError,
    UndefinedFisherValueError,
    ZeroDistanceError,
)
from .evaluation import cmc, rank_gallery, run_protocol
from .kmmc import KernelSpec
from .mining import build_anchor_context, export_pseudo_classes_csv, mine_pseudo_classes
from .nk3ml import embed, fit_nk3ml, load_model, save_model
from .selftrain import LoopConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

_DATA_ERRORS = (
    DataFormatError,
    DataValidationError,
    ProtocolError,
    DegenerateDataError,
    InsufficientSamplesError,
    ZeroDistanceError,
    FileNotFoundError,
)
_NUMERICAL_ERRORS = (
    EmptyModelError,
    NumericalError,
    UndefinedFisherValueError,
    np.linalg.LinAlgError,
)


def derive_seed(master: int, label: str) -> int:
    """Stable 64-bit stream seed for one named consumer of the master seed."""
    digest = hashlib.blake2b(f"{master}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


# ---------------------------------------------------------------------------
# Run configuration: defaults, config file, flag overrides
# ---------------------------------------------------------------------------

_CONFIG_DEFAULTS = {
    "run.input": None,
    "run.output": None,
    "run.mode": "semi_supervised",
    "run.seed": 0,
    "run.threads": None,
    "run.ranks": "1,5,10,20",
    "split.labeled_fraction": "1/3",
    "split.trials": 10,
    "loop.k": 1,
    "loop.quantile": 0.25,
    "loop.max_iterations": 20,
    "loop.min_new_classes": 1,
    "kernel.kind": "rbf",
    "kernel.bandwidth": "auto",
}


def _parse_config_file(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


@dataclass
class RunConfig:
    input: Path
    output: Path
    mode: str
    seed: int
    threads: int
    ranks: tuple[int, ...]
    split: SplitSpec
    loop: LoopConfig

    def echo(self) -> dict:
        return {
            "version": __version__,
            "run.input": str(self.input),
            "run.output": str(self.output),
            "run.mode": self.mode,
            "run.seed": self.seed,
            "run.threads": self.threads,
            "run.ranks": list(self.ranks),
            "split.seed_derived": self.split.seed,
            "split.labeled_fraction": str(self.split.labeled_fraction),
            "split.trials": self.split.trials,
            "loop.k": self.loop.k,
            "loop.quantile": self.loop.quantile,
            "loop.max_iterations": self.loop.max_iterations,
            "loop.min_new_classes": self.loop.min_new_classes,
            "loop.seed_derived": self.loop.seed,
            "kernel.kind": self.loop.kernel.kind,
            "kernel.bandwidth": str(self.loop.kernel.bandwidth),
        }


def _coerce(key: str, value):
    try:
        if key in ("run.seed", "split.trials", "loop.k", "loop.max_iterations",
                   "loop.min_new_classes", "run.threads"):
            return int(value)
        if key == "loop.quantile":
            return float(value)
        if key == "split.labeled_fraction":
            return Fraction(str(value))
        if key == "kernel.bandwidth":
            return "auto" if str(value) == "auto" else float(value)
        return value
    except (ValueError, ZeroDivisionError) as err:
        raise ConfigError(f"bad value for {key}: {value!r} ({err})") from err


def _resolve_run_config(args) -> RunConfig:
    values = dict(_CONFIG_DEFAULTS)
    if args.config is not None:
        values.update(_parse_config_file(Path(args.config)))
    overrides = {
        "run.input": args.input,
        "run.output": args.output,
        "run.mode": args.mode,
        "run.seed": args.seed,
        "run.threads": args.threads,
        "run.ranks": args.ranks,
        "split.labeled_fraction": args.labeled_fraction,
        "split.trials": args.trials,
        "loop.k": args.k,
        "loop.quantile": args.quantile,
        "loop.max_iterations": args.max_iterations,
        "loop.min_new_classes": args.min_new_classes,
        "kernel.kind": args.kernel,
        "kernel.bandwidth": args.bandwidth,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    if values["run.input"] is None:
        raise ConfigError("no input dataset given (flag --input or config run.input)")
    if values["run.output"] is None:
        raise ConfigError("no output directory given (flag --output or config run.output)")
    mode = str(values["run.mode"])
    if mode not in ("labeled_only", "semi_supervised", "both"):
        raise ConfigError(f"run.mode must be labeled_only, semi_supervised or both, got {mode!r}")
    if values["run.threads"] is None:
        values["run.threads"] = os.environ.get("NULLMARGIN_THREADS", "1")
    try:
        ranks = tuple(int(part) for part in str(values["run.ranks"]).replace(" ", "").split(","))
    except ValueError as err:
        raise ConfigError(f"bad run.ranks value {values['run.ranks']!r}") from err
    if not ranks or any(n < 1 for n in ranks):
        raise ConfigError("run.ranks must be positive integers")

    seed = _coerce("run.seed", values["run.seed"])
    threads = _coerce("run.threads", values["run.threads"])
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    kernel = KernelSpec(
        kind=str(values["kernel.kind"]),
        bandwidth=_coerce("kernel.bandwidth", values["kernel.bandwidth"]),
    )
    try:
        split = SplitSpec(
            seed=derive_seed(seed, "split"),
            labeled_fraction=_coerce("split.labeled_fraction", values["split.labeled_fraction"]),
            trials=_coerce("split.trials", values["split.trials"]),
        )
        loop = LoopConfig(
            k=_coerce("loop.k", values["loop.k"]),
            quantile=_coerce("loop.quantile", values["loop.quantile"]),
            max_iterations=_coerce("loop.max_iterations", values["loop.max_iterations"]),
            min_new_classes=_coerce("loop.min_new_classes", values["loop.min_new_classes"]),
            kernel=kernel,
            seed=derive_seed(seed, "loop"),
        )
    except DataValidationError as err:
        raise ConfigError(str(err)) from err
    return RunConfig(
        input=Path(values["run.input"]),
        output=Path(values["run.output"]),
        mode=mode,
        seed=seed,
        threads=threads,
        ranks=ranks,
        split=split,
        loop=loop,
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _load_table(path) -> FeatureTable:
    return load_feature_table(path, table_format_for(path))


def _write_cmc_csv(curve, path: Path) -> None:
    lines = ["N,accuracy"] + [f"{n},{repr(acc)}" for n, acc in curve.ranks]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_synth(args) -> int:
    try:
        spec = SyntheticSpec(
            identities=args.identities,
            cameras=args.cameras,
            dim=args.dim,
            per_camera_transform_strength=args.transform_strength,
            noise_sigma=args.noise_sigma,
            seed=args.seed,
        )
    except DataValidationError as err:
        raise ConfigError(str(err)) from err
    table = generate_synthetic(spec)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_feature_table(table, out, table_format_for(out))
    digest = hashlib.sha256(out.read_bytes()).hexdigest()
    print(f"{digest}  {out}")
    return EXIT_OK


def _mode_result_entry(result) -> dict:
    return {
        "cmc": {str(n): acc for n, acc in result.curve.ranks},
        "trials": result.curve.trials_averaged,
        "per_trial": [
            {
                "trial": t,
                "cmc": {str(n): acc for n, acc in curve.ranks},
                "model_checksum": result.model_checksums[t],
                "primary_bandwidth": result.bandwidths[t],
            }
            for t, curve in enumerate(result.per_trial)
        ],
    }


def cmd_run(args) -> int:
    cfg = _resolve_run_config(args)
    table = _load_table(cfg.input)
    cfg.output.mkdir(parents=True, exist_ok=True)
    modes = ("labeled_only", "semi_supervised") if cfg.mode == "both" else (cfg.mode,)

    report = {"config": cfg.echo(), "results": {}}
    for mode in modes:
        result = run_protocol(
            table, cfg.split, cfg.loop, mode, ns=cfg.ranks, threads=cfg.threads
        )
        report["results"][mode] = _mode_result_entry(result)
        suffix = f"_{mode}" if cfg.mode == "both" else ""
        _write_cmc_csv(result.curve, cfg.output / f"cmc{suffix}.csv")
        save_model(result.final_model, cfg.output / f"model{suffix}.nk3m")
        if mode == "semi_supervised" and result.final_trace is not None:
            result.final_trace.write_jsonl(cfg.output / "trace.jsonl")
    (cfg.output / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for mode in modes:
        print(f"{mode}: rank-1 = {report['results'][mode]['cmc']['1']:.2f}")
    return EXIT_OK


def cmd_embed(args) -> int:
    model = load_model(args.model)
    table = _load_table(args.data)
    header = "sample_id," + ",".join(f"e{j}" for j in range(model.output_dim))
    lines = [header]
    if table.n:
        vectors = embed(model, table.features)
        for i in range(table.n):
            lines.append(table.sample_ids[i] + "," + ",".join(repr(float(v)) for v in vectors[i]))
    Path(args.output).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.model)
    probe = _load_table(args.probe)
    gallery = _load_table(args.gallery)
    try:
        ranks = tuple(int(part) for part in args.ranks.replace(" ", "").split(","))
    except ValueError as err:
        raise ConfigError(f"bad --ranks value {args.ranks!r}") from err
    rankings = rank_gallery(model, probe, gallery)
    curve = cmc(rankings, probe.identities, gallery.identities, ranks)
    _write_cmc_csv(curve, Path(args.output))
    for n, acc in curve.ranks:
        print(f"rank-{n}: {acc:.2f}")
    return EXIT_OK


def cmd_mine(args) -> int:
    labeled = _load_table(args.labeled)
    unlabeled = _load_table(args.unlabeled)
    try:
        kernel = KernelSpec(
            kind=args.kernel,
            bandwidth="auto" if args.bandwidth in (None, "auto") else float(args.bandwidth),
        )
    except (ValueError, DataValidationError) as err:
        raise ConfigError(f"bad kernel flags: {err}") from err
    model = fit_nk3ml(labeled.labeled_subset(), kernel)
    ctx = build_anchor_context(unlabeled, model, kernel)
    pairs = mine_pseudo_classes(ctx, unlabeled, model, k=args.k)
    export_pseudo_classes_csv(pairs, args.output)
    print(f"anchor camera {ctx.anchor_camera}: {len(pairs)} pseudo-classes")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nullmargin",
        description="Cross-view metric learning experiments (null space + kernel max margin)",
    )
    parser.add_argument("--version", action="version", version=f"nullmargin {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic cross-view dataset")
    p_synth.add_argument("--identities", type=int, required=True)
    p_synth.add_argument("--cameras", type=int, default=2)
    p_synth.add_argument("--dim", type=int, required=True)
    p_synth.add_argument("--transform-strength", type=float, default=0.0)
    p_synth.add_argument("--noise-sigma", type=float, default=0.0)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("-o", "--output", required=True, help=".csv or binary path")
    p_synth.set_defaults(func=cmd_synth)

    p_run = sub.add_parser("run", help="run the split/fit/evaluate protocol")
    p_run.add_argument("--config", help="flat 'section.key = value' config file")
    p_run.add_argument("--input", help="dataset file (.csv or binary)")
    p_run.add_argument("-o", "--output", help="output directory")
    p_run.add_argument("--mode", choices=["labeled_only", "semi_supervised", "both"])
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--threads", type=int, help="trial parallelism (env NULLMARGIN_THREADS)")
    p_run.add_argument("--ranks", help="comma-separated CMC ranks, e.g. 1,5,10,20")
    p_run.add_argument("--labeled-fraction", help="e.g. 1/3 or 0.25")
    p_run.add_argument("--trials", type=int)
    p_run.add_argument("--k", type=int, help="reciprocal-neighbor k")
    p_run.add_argument("--quantile", type=float)
    p_run.add_argument("--max-iterations", type=int)
    p_run.add_argument("--min-new-classes", type=int)
    p_run.add_argument("--kernel", choices=["rbf", "linear"])
    p_run.add_argument("--bandwidth", help="'auto' or a positive number")
    p_run.set_defaults(func=cmd_run)

    p_embed = sub.add_parser("embed", help="embed a dataset with a fitted model")
    p_embed.add_argument("--model", required=True)
    p_embed.add_argument("--data", required=True)
    p_embed.add_argument("-o", "--output", required=True, help="embeddings CSV path")
    p_embed.set_defaults(func=cmd_embed)

    p_eval = sub.add_parser("eval", help="CMC of a fitted model on probe/gallery tables")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--probe", required=True)
    p_eval.add_argument("--gallery", required=True)
    p_eval.add_argument("--ranks", default="1,5,10,20")
    p_eval.add_argument("-o", "--output", required=True, help="cmc CSV path")
    p_eval.set_defaults(func=cmd_eval)

    p_mine = sub.add_parser("mine", help="one pseudo-class mining round (debugging)")
    p_mine.add_argument("--labeled", required=True)
    p_mine.add_argument("--unlabeled", required=True)
    p_mine.add_argument("--kernel", choices=["rbf", "linear"], default="rbf")
    p_mine.add_argument("--bandwidth")
    p_mine.add_argument("--k", type=int, default=1)
    p_mine.add_argument("-o", "--output", required=True, help="pseudo-class CSV path")
    p_mine.set_defaults(func=cmd_mine)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: config: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except SelfTrainingError as err:
        print(f"error: numerical: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except _NUMERICAL_ERRORS as err:
        print(f"error: numerical: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except _DATA_ERRORS as err:
        print(f"error: data: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
