"""Command-line front end: reproducible experiments from a single JSON config.

Subcommands: ``pipeline`` (sample, augment, train, predict, evaluate),
``tune`` (random search with cross-validated scoring), ``compare``
(paired significance test between two prediction files), ``smooth``
(standalone spatial smoothing, useful for timing studies) and ``sample``
(emit a labeled-pixel CSV).

Exit codes: 0 ok, 2 config or input error, 3 tuning failure,
4 training divergence, 1 anything else. Seeding is centralized: the
config's ``base_seed`` (or ``--seed``) drives every stage; run r of a
repeated experiment uses base_seed + r.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__, augment, evaluate, net, sampling, tune
from .core import (
    DataError,
    Dataset,
    FormatError,
    ShapeError,
    ValidationError,
    load_cube,
    load_dataset,
    save_labeled_set,
    write_cube,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_TUNING = 3
EXIT_DIVERGENCE = 4

_INPUT_ERRORS = (
    FormatError, ShapeError, DataError, ValidationError, FileNotFoundError,
    augment.EmptyTrainingSet,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment description (defaults already filled in)."""

    cube_path: Path
    gt_path: Path
    sampling: sampling.SamplingSpec
    augment_opts: augment.AugmentOptions
    hyper: net.HyperParams
    search: tune.SearchSpace | None
    variant: str
    setting: str
    runs: int
    base_seed: int
    val_fraction: float
    p_threshold: float
    test_on_smoothed: bool | None
    output_dir: Path
    class_names: tuple[str, ...] | None

    def as_manifest_dict(self) -> dict:
        doc = {
            "cube": str(self.cube_path),
            "gt": str(self.gt_path),
            "sampling": asdict(self.sampling),
            "augment": asdict(self.augment_opts),
            "hyper": asdict(self.hyper),
            "search": asdict(self.search) if self.search else None,
            "variant": self.variant,
            "setting": self.setting,
            "runs": self.runs,
            "base_seed": self.base_seed,
            "val_fraction": self.val_fraction,
            "p_threshold": self.p_threshold,
            "test_on_smoothed": self.test_on_smoothed,
            "output_dir": str(self.output_dir),
            "class_names": list(self.class_names) if self.class_names else None,
        }
        return doc


def _take(block: dict, key: str, default):
    return block[key] if key in block else default


def _check_keys(block: dict, allowed: set[str], where: str) -> None:
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def _parse_sampling(block: dict) -> sampling.SamplingSpec:
    _check_keys(block, {"mode", "fraction", "count", "patch_size"}, "sampling")
    if "mode" not in block:
        raise ConfigError("sampling.mode is required")
    try:
        return sampling.SamplingSpec(
            mode=block["mode"],
            fraction=_take(block, "fraction", None),
            count=_take(block, "count", None),
            patch_size=_take(block, "patch_size", 7),
        )
    except ValidationError as exc:
        raise ConfigError(f"sampling: {exc}") from exc


def _parse_augment(block: dict, setting: str) -> augment.AugmentOptions:
    _check_keys(block, {"beta", "sigma"}, "augment")
    try:
        # trick switches come from the variant string at run time
        return augment.AugmentOptions(
            beta=_take(block, "beta", 0.01),
            sigma=_take(block, "sigma", 3.0),
            use_smoothing=False,
            use_label_aug=False,
            setting=setting,
        )
    except ValidationError as exc:
        raise ConfigError(f"augment: {exc}") from exc


_HYPER_KEYS = {
    "num_kernels", "kernel_size", "stride", "lambda1", "lambda2", "eta",
    "momentum", "batch_size", "max_epochs", "patience",
}


def _parse_hyper(block: dict) -> net.HyperParams:
    _check_keys(block, _HYPER_KEYS, "hyper")
    try:
        return net.HyperParams(**{k: block[k] for k in block})
    except (TypeError, ValidationError) as exc:
        raise ConfigError(f"hyper: {exc}") from exc


_SEARCH_KEYS = {
    "num_kernels_choices", "kernel_size_range", "stride_range",
    "lambda_exponent_range", "eta_exponent_range", "sigma_choices",
    "num_draws", "folds",
}


def _parse_search(block: dict | None) -> tune.SearchSpace | None:
    if block is None:
        return None
    _check_keys(block, _SEARCH_KEYS, "search")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in block.items()}
    try:
        return tune.SearchSpace(**kwargs)
    except (TypeError, ValidationError) as exc:
        raise ConfigError(f"search: {exc}") from exc


_TOP_KEYS = {
    "cube", "gt", "sampling", "augment", "hyper", "search", "variant",
    "setting", "runs", "base_seed", "val_fraction", "p_threshold",
    "test_on_smoothed", "output_dir", "class_names",
}


def load_config(path: str | Path, overrides: argparse.Namespace | None = None) -> ExperimentConfig:
    """Read, default-fill, override, and validate a config before any compute."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    _check_keys(doc, _TOP_KEYS, "config")
    for key in ("cube", "gt"):
        if key not in doc:
            raise ConfigError(f"config key {key!r} is required")
    if "sampling" not in doc:
        raise ConfigError("config key 'sampling' is required")

    setting = _take(doc, "setting", "transductive")
    variant = _take(doc, "variant", "RSL")
    base_seed = int(_take(doc, "base_seed", 0))
    output_dir = Path(_take(doc, "output_dir", "out"))

    if overrides is not None:
        if getattr(overrides, "seed", None) is not None:
            base_seed = overrides.seed
        if getattr(overrides, "variant", None) is not None:
            variant = overrides.variant
        if getattr(overrides, "setting", None) is not None:
            setting = overrides.setting.replace("-", "_")
        if getattr(overrides, "output", None) is not None:
            output_dir = Path(overrides.output)

    if setting not in augment.SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}")
    if not set(variant) <= set(evaluate.VARIANT_FLAGS):
        raise ConfigError(f"variant {variant!r} must be a subset of 'RSL'")
    if "L" in variant and setting == "non_overlapping":
        raise ConfigError("variant includes L, which the non_overlapping setting forbids")

    cube_path = Path(doc["cube"])
    gt_path = Path(doc["gt"])
    for p in (cube_path, gt_path):
        if not p.exists():
            raise ConfigError(f"input file not found: {p}")

    runs = int(_take(doc, "runs", 1))
    if runs < 1:
        raise ConfigError("runs must be >= 1")
    val_fraction = float(_take(doc, "val_fraction", 0.1))
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("val_fraction must be in (0, 1)")
    p_threshold = float(_take(doc, "p_threshold", 0.05))
    if not 0.0 < p_threshold <= 1.0:
        raise ConfigError("p_threshold must be in (0, 1]")
    test_on_smoothed = _take(doc, "test_on_smoothed", None)
    if test_on_smoothed is not None and not isinstance(test_on_smoothed, bool):
        raise ConfigError("test_on_smoothed must be true, false or null")

    class_names = doc.get("class_names")
    return ExperimentConfig(
        cube_path=cube_path,
        gt_path=gt_path,
        sampling=_parse_sampling(doc.get("sampling", {})),
        augment_opts=_parse_augment(doc.get("augment", {}), setting),
        hyper=_parse_hyper(doc.get("hyper", {})),
        search=_parse_search(doc.get("search")),
        variant=variant,
        setting=setting,
        runs=runs,
        base_seed=base_seed,
        val_fraction=val_fraction,
        p_threshold=p_threshold,
        test_on_smoothed=test_on_smoothed,
        output_dir=output_dir,
        class_names=tuple(class_names) if class_names else None,
    )


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(config: ExperimentConfig, command: str, artifacts: list[Path]) -> Path:
    doc = config.as_manifest_dict()
    manifest = {
        "tool": f"hsinet {__version__}",
        "command": command,
        "config": doc,
        "config_sha256": hashlib.sha256(
            json.dumps(doc, sort_keys=True).encode()
        ).hexdigest(),
        "artifacts": {p.name: _sha256(p) for p in sorted(artifacts)},
    }
    path = config.output_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _fail(command: str, stage: str, exc: BaseException) -> int:
    print(f"{command}: {stage}: {exc}", file=sys.stderr)
    if isinstance(exc, net.DivergenceError):
        return EXIT_DIVERGENCE
    if isinstance(exc, tune.TuningError):
        return EXIT_TUNING
    if isinstance(exc, (ConfigError, *_INPUT_ERRORS)):
        return EXIT_CONFIG
    return EXIT_ERROR


def cmd_pipeline(config: ExperimentConfig, threads: int) -> int:
    try:
        dataset = load_dataset(config.cube_path, config.gt_path, config.class_names)
    except Exception as exc:
        return _fail("pipeline", "load", exc)

    try:
        results, summary, models = evaluate.run_experiment(
            dataset,
            config.sampling,
            config.variant,
            config.hyper,
            config.augment_opts,
            n_runs=config.runs,
            base_seed=config.base_seed,
            val_fraction=config.val_fraction,
            threads=threads,
            test_on_smoothed=config.test_on_smoothed,
            keep_models=True,
        )
    except evaluate.ExperimentError as exc:
        return _fail("pipeline", f"run {exc.run}/{exc.stage}", exc.cause)
    except Exception as exc:
        return _fail("pipeline", "experiment", exc)

    try:
        out = config.output_dir
        out.mkdir(parents=True, exist_ok=True)
        artifacts = []
        results_path = out / "results.csv"
        evaluate.write_results_csv(results, summary, results_path)
        artifacts.append(results_path)
        for i, (result, (params, rescale)) in enumerate(zip(results, models)):
            model_path = out / f"model_run{i}.bin"
            net.save_model(params, rescale, model_path)
            pred_path = out / f"predictions_run{i}.csv"
            evaluate.write_predictions_csv(result, pred_path)
            labeled = sampling.sample(
                dataset.gt, replace(config.sampling, seed=result.seed)
            )
            map_path = out / f"map_run{i}.pgm"
            evaluate.export_map(result.predictions, labeled, dataset.gt, map_path)
            artifacts.extend([model_path, pred_path, map_path])
        _write_manifest(config, "pipeline", artifacts)
    except Exception as exc:
        return _fail("pipeline", "export", exc)

    print(
        f"pipeline: {summary.variant or 'baseline'} ({summary.setting}), "
        f"{summary.n_runs} run(s): accuracy {summary.mean:.4f} +/- {summary.std:.4f}"
    )
    return EXIT_OK


def cmd_tune(config: ExperimentConfig, threads: int) -> int:
    if config.search is None:
        return _fail("tune", "config", ConfigError("no search space in config"))
    try:
        dataset = load_dataset(config.cube_path, config.gt_path, config.class_names)
    except Exception as exc:
        return _fail("tune", "load", exc)
    try:
        spec = replace(config.sampling, seed=config.base_seed)
        labeled = sampling.sample(dataset.gt, spec)
        _, opts = evaluate.apply_variant(config.variant, config.hyper, config.augment_opts)
        best_hyper, best_sigma, board = tune.rgs_cv(
            dataset, labeled, config.search, opts,
            seed=config.base_seed, base_hyper=config.hyper, threads=threads,
        )
    except tune.TuningError as exc:
        return _fail("tune", "search", exc)
    except Exception as exc:
        return _fail("tune", "search", exc)

    try:
        out = config.output_dir
        out.mkdir(parents=True, exist_ok=True)
        board_path = out / "leaderboard.csv"
        tune.write_leaderboard_csv(board, board_path)
        best_path = out / "best_config.json"
        best_path.write_text(
            json.dumps(
                {"hyper": asdict(best_hyper), "sigma": best_sigma},
                indent=2, sort_keys=True,
            )
            + "\n"
        )
        _write_manifest(config, "tune", [board_path, best_path])
    except Exception as exc:
        return _fail("tune", "export", exc)
    print(
        f"tune: best of {len(board)} draw(s): mean accuracy "
        f"{board[0].mean_accuracy:.4f}, sigma {best_sigma}"
    )
    return EXIT_OK


def cmd_compare(
    pred_a: Path, pred_b: Path, config: ExperimentConfig, threshold: float, threads: int
) -> int:
    del threads
    try:
        dataset = load_dataset(config.cube_path, config.gt_path, config.class_names)
        rows_a, cols_a, labels_a = evaluate.load_predictions_csv(pred_a)
        rows_b, cols_b, labels_b = evaluate.load_predictions_csv(pred_b)
    except Exception as exc:
        return _fail("compare", "load", exc)
    if len(rows_a) != len(rows_b):
        return _fail(
            "compare", "align",
            ConfigError(f"{pred_a} and {pred_b} cover {len(rows_a)} vs {len(rows_b)} pixels"),
        )
    order_a = np.lexsort((cols_a, rows_a))
    order_b = np.lexsort((cols_b, rows_b))
    if not (
        np.array_equal(rows_a[order_a], rows_b[order_b])
        and np.array_equal(cols_a[order_a], cols_b[order_b])
    ):
        return _fail(
            "compare", "align", ConfigError("prediction files cover different pixel sets")
        )
    truth = dataset.gt.labels[rows_a[order_a], cols_a[order_a]].astype(np.int64)
    comparison = evaluate.binomial_compare(
        labels_a[order_a], labels_b[order_b], truth
    )
    try:
        config.output_dir.mkdir(parents=True, exist_ok=True)
        out_path = config.output_dir / "comparison.csv"
        evaluate.write_comparison_csv(pred_a.stem, pred_b.stem, comparison, out_path)
    except Exception as exc:
        return _fail("compare", "export", exc)
    verdict = "significant" if comparison.p_value < threshold else "not significant"
    print(
        f"compare: n_discordant={comparison.n_discordant} wins_a={comparison.wins_a} "
        f"p={comparison.p_value:.6g} -> {verdict} at threshold {threshold}"
    )
    return EXIT_OK


def cmd_smooth(cube_path: Path, sigma: float, threads: int, output: Path | None) -> int:
    try:
        cube = load_cube(cube_path)
    except Exception as exc:
        return _fail("smooth", "load", exc)
    try:
        started = time.perf_counter()
        smoothed = augment.gaussian_smooth(cube, sigma, threads=threads)
        elapsed = time.perf_counter() - started
        out = output or cube_path.with_name(cube_path.stem + "_smt.npy")
        write_cube(smoothed, out)
    except Exception as exc:
        return _fail("smooth", "smooth", exc)
    n_pixels = cube.height * cube.width
    print(
        f"smooth: {cube.height}x{cube.width}x{cube.bands} cube, sigma={sigma}, "
        f"threads={threads}: {elapsed:.3f}s ({1e3 * elapsed / n_pixels:.4f} ms/pixel) -> {out}"
    )
    return EXIT_OK


def cmd_sample(config: ExperimentConfig, output: Path | None) -> int:
    try:
        dataset = load_dataset(config.cube_path, config.gt_path, config.class_names)
        spec = replace(config.sampling, seed=config.base_seed)
        labeled = sampling.sample(dataset.gt, spec)
    except Exception as exc:
        return _fail("sample", "sample", exc)
    try:
        config.output_dir.mkdir(parents=True, exist_ok=True)
        out = output or config.output_dir / "labeled.csv"
        save_labeled_set(labeled, out)
    except Exception as exc:
        return _fail("sample", "export", exc)
    print(f"sample: wrote {len(labeled)} entries to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsinet",
        description="Spectral-spatial hyperspectral pixel classification experiments",
    )
    parser.add_argument("--version", action="version", version=f"hsinet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_variant=True):
        p.add_argument("--config", required=True, type=Path, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override base_seed")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        p.add_argument("--output", type=Path, default=None, help="override output_dir")
        if with_variant:
            p.add_argument("--variant", type=str, default=None, help="subset of RSL ('' = plain)")
            p.add_argument(
                "--setting", choices=["transductive", "non-overlapping"], default=None
            )

    p_pipe = sub.add_parser("pipeline", help="sample, augment, train, predict, evaluate")
    common(p_pipe)

    p_tune = sub.add_parser("tune", help="random search with cross-validated scoring")
    common(p_tune)

    p_cmp = sub.add_parser("compare", help="binomial significance test of two prediction files")
    p_cmp.add_argument("predictions_a", type=Path)
    p_cmp.add_argument("predictions_b", type=Path)
    common(p_cmp, with_variant=False)
    p_cmp.add_argument("--threshold", type=float, default=None, help="significance level")

    p_smooth = sub.add_parser("smooth", help="spatially smooth a cube and store it")
    p_smooth.add_argument("--cube", required=True, type=Path)
    p_smooth.add_argument("--sigma", required=True, type=float)
    p_smooth.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p_smooth.add_argument("--output", type=Path, default=None)

    p_sample = sub.add_parser("sample", help="emit the sampled labeled set as CSV")
    common(p_sample, with_variant=False)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "smooth":
        return cmd_smooth(args.cube, args.sigma, args.threads, args.output)
    try:
        config = load_config(args.config, overrides=args)
    except ConfigError as exc:
        print(f"{args.command}: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "pipeline":
        return cmd_pipeline(config, args.threads)
    if args.command == "tune":
        return cmd_tune(config, args.threads)
    if args.command == "compare":
        threshold = args.threshold if args.threshold is not None else config.p_threshold
        return cmd_compare(args.predictions_a, args.predictions_b, config, threshold, args.threads)
    if args.command == "sample":
        return cmd_sample(config, args.output)
    raise AssertionError(f"unhandled command {args.command}")


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
