"""Operator command line: train, eval, audit, noise-test and l-sweep.

Configuration is a flat ``key = value`` text file; every key is typed and
validated before any computation, and command-line flags override file keys.
Exit codes are fixed: 0 success, 2 configuration error, 3 data error,
4 training failure.  Runs that consume privacy budget print the sealed ledger;
runs that consume none print "epsilon spent: 0".  The environment variable
``DP_ENERGY_THREADS`` caps BLAS parallelism for reproducible timing.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
from scipy import stats

from . import data_io
from .chebyshev import ApproximatorKind, certify_logistic_truncation, logistic, make_approximator
from .crbm import all_preactivations, init_params, lrn_normalizers
from .errors import BudgetSplitMismatch, DpcdbnError, GeometryMismatch, IndivisibleShape
from .funcmech import (
    LayerGeometry,
    laplace_from_uniform,
    sensitivity_lemma2,
    sensitivity_maximal,
    sensitivity_naive_h,
)
from .network import LayerSpec, NetworkSpec, evaluate, l_sweep, train
from .softmax import softmax_sensitivity

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4

NOISE_TEST_FLOOR = 10_000

_DATA_ERRORS = (
    "BadMagic",
    "TruncatedFile",
    "DimMismatch",
    "SchemaMismatch",
    "ParseError",
    "NegativeFeature",
    "EmptyDataset",
    "EmptyTestSet",
    "EmptyBatch",
    "CorruptContainer",
    "VersionMismatch",
)


class ConfigError(Exception):
    """Invalid or missing configuration; the message names the offending key."""


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_epsilon(text: str) -> float:
    value = float(text)
    if not math.isinf(value) and value <= 0:
        raise ValueError("must be positive or inf")
    return value


# key -> (parser, default); None default means optional with no fallback
_SCHEMA = {
    "train_images": (str, None),
    "train_labels": (str, None),
    "test_images": (str, None),
    "test_labels": (str, None),
    "out": (str, "."),
    "seed": (int, None),
    "epsilon": (_parse_epsilon, math.inf),
    "layer_share": (float, 0.1),
    "visible_side": (int, 28),
    "n_groups": (int, 8),
    "filter_side": (int, 5),
    "pool_ratio": (int, 2),
    "kind": (str, "chebyshev"),
    "degree": (int, 7),
    "feature_head": (str, "energy_grid"),
    "feature_grid": (int, 6),
    "feature_scale": (float, 0.05),
    "feature_zclip": (float, 1.5),
    "n_classes": (int, 2),
    "lr": (float, 1e-3),
    "epochs": (int, 2),
    "softmax_lr": (float, 0.02),
    "softmax_epochs": (int, 4),
    "param_bound": (float, 0.05),
    "init_scale": (float, 0.05),
    "normalized": (_parse_bool, True),
    "normalize_mode": (str, "pixel"),
    "model": (str, None),
    "delta": (float, 2.0),
    "n": (int, 100_000),
    "l_values": (str, None),
}


def load_config(path: str | None, overrides: dict) -> dict:
    """Read the flat key=value file, apply overrides, validate every key."""
    values: dict = {}
    if path is not None:
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc}") from None
        for line_no, line in enumerate(lines, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"config line {line_no}: expected key = value")
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    config = {key: default for key, (_, default) in _SCHEMA.items()}
    for key, raw in values.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown configuration key: {key}")
        parser, _ = _SCHEMA[key]
        try:
            config[key] = raw if not isinstance(raw, str) else parser(raw)
        except ValueError as exc:
            raise ConfigError(f"invalid value for {key}: {exc}") from None
    if config["normalize_mode"] not in ("pixel", "l2"):
        raise ConfigError("invalid value for normalize_mode: expected pixel or l2")
    return config


def _network_spec(config: dict) -> NetworkSpec:
    if config["seed"] is None:
        raise ConfigError("seed is required for this command")
    epsilon = config["epsilon"]
    if math.isinf(epsilon):
        total, split = math.inf, None
    else:
        total = epsilon
        split = (config["layer_share"] * total, (1.0 - config["layer_share"]) * total)
    try:
        return NetworkSpec(
            visible_side=config["visible_side"],
            layers=(
                LayerSpec(
                    config["n_groups"],
                    config["filter_side"],
                    config["pool_ratio"],
                    ApproximatorKind(config["kind"]),
                    config["degree"],
                ),
            ),
            epsilon_total=total,
            epsilon_split=split,
            feature_head=config["feature_head"],
            feature_grid=config["feature_grid"],
            feature_scale=config["feature_scale"],
            feature_zclip=config["feature_zclip"],
            n_classes=config["n_classes"],
            lr=config["lr"],
            epochs=config["epochs"],
            softmax_lr=config["softmax_lr"],
            softmax_epochs=config["softmax_epochs"],
            param_bound=config["param_bound"],
            init_scale=config["init_scale"],
            normalized=config["normalized"],
            seed=config["seed"],
        )
    except (GeometryMismatch, IndivisibleShape, BudgetSplitMismatch, ValueError) as exc:
        raise ConfigError(f"epsilon/geometry configuration rejected: {exc}") from None


def _load_split(config: dict, images_key: str, labels_key: str) -> data_io.NormalizedDataset:
    images, labels = config[images_key], config[labels_key]
    if images is None or labels is None:
        raise FileNotFoundError(f"{images_key}/{labels_key} not configured")
    raw = data_io.load_idx_pair(images, labels)
    return data_io.normalize(raw, mode=config["normalize_mode"])


def _print_ledger(accountant) -> None:
    total = accountant.total
    if math.isinf(total):
        print("epsilon spent: 0")
        return
    for entry in accountant.entries:
        print(f"ledger: stage={entry.stage} delta={entry.delta:.6g} epsilon={entry.epsilon:.6g}")
    print(f"epsilon spent: {total:.6g}")


class _OutputLock:
    """Exclusive lock file guarding concurrent writes to the output directory."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"output directory is locked by {self.path}") from None
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def cmd_train(config: dict) -> int:
    spec = _network_spec(config)
    out_dir = Path(config["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set = _load_split(config, "train_images", "train_labels")
    with _OutputLock(out_dir):
        model = train(spec, train_set)
        model.save(out_dir / "model.bin")
        _write_jsonl(out_dir / "metrics.jsonl", model.metrics)
        if config["test_images"] is not None and config["test_labels"] is not None:
            test_set = _load_split(config, "test_images", "test_labels")
            result = evaluate(model, test_set)
            print(json.dumps(result, sort_keys=True))
    _print_ledger(model.accountant)
    return EXIT_OK


def cmd_eval(config: dict) -> int:
    if config["model"] is None:
        raise ConfigError("model path is required for eval")
    model = data_io.load_model(config["model"])
    test_set = _load_split(config, "test_images", "test_labels")
    result = evaluate(model, test_set)
    print(json.dumps(result, sort_keys=True))
    print("epsilon spent: 0")
    return EXIT_OK


def cmd_audit(config: dict) -> int:
    spec = _network_spec(config)
    out_dir = Path(config["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set = _load_split(config, "train_images", "train_labels")
    instances = train_set.instances
    rows = []
    side = spec.visible_side
    with _OutputLock(out_dir), open(out_dir / "approximator.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "L", "lower_bound", "tail_bound", "sup_error_empirical"])
        for i, layer in enumerate(spec.layers):
            geometry = LayerGeometry(layer.n_groups, layer.filter_side, side)
            init_rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(len(spec.layers) + 1)[i].spawn(2)[0])
            init = init_params(layer.n_groups, layer.filter_side, init_rng, scale=spec.init_scale)
            frozen_z = np.stack(
                [
                    lrn_normalizers(all_preactivations(init, v))
                    if spec.normalized
                    else np.ones((layer.n_groups, geometry.hidden_side, geometry.hidden_side))
                    for v in instances
                ]
            )
            poly = layer.polynomial()
            delta2 = sensitivity_lemma2(instances, poly, geometry, frozen_z)
            h_shape = (len(instances), layer.n_groups, geometry.hidden_side, geometry.hidden_side)
            delta_h0 = sensitivity_naive_h(instances, geometry, np.zeros(h_shape))
            delta_h1 = sensitivity_naive_h(instances, geometry, np.ones(h_shape))
            delta_max = sensitivity_maximal(instances, geometry)
            bounds = certify_logistic_truncation(layer.degree, geometry.hidden_side, layer.n_groups)
            rows.append(
                {
                    "layer": i,
                    "delta_lemma2": delta2,
                    "delta_naive_h0": delta_h0,
                    "delta_naive_h1": delta_h1,
                    "delta_maximal": delta_max,
                    "error_lower": bounds.lower,
                    "error_upper": bounds.upper,
                    "tail_bound": bounds.tail,
                }
            )
            # empirical sup error of the truncated series against the logistic
            grid = np.linspace(-1.0, 1.0, 2001)
            approx = make_approximator(layer.kind, degree=layer.degree)
            sup_err = float(np.max(np.abs(approx(grid) - logistic(grid))))
            writer.writerow([layer.kind.value, layer.degree, bounds.lower, bounds.tail, sup_err])
            side = (side - layer.filter_side + 1) // layer.pool_ratio
        rows.append({"delta_softmax": softmax_sensitivity(spec.feature_l1_bound())})
        _write_jsonl(out_dir / "audit.jsonl", rows)
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    print("epsilon spent: 0")
    return EXIT_OK


def cmd_noise_test(config: dict) -> int:
    n = config["n"]
    if n < NOISE_TEST_FLOOR:
        raise ConfigError(f"n must be at least {NOISE_TEST_FLOOR}")
    epsilon, delta = config["epsilon"], config["delta"]
    if math.isinf(epsilon):
        raise ConfigError("epsilon must be finite for noise-test")
    seed = config["seed"] if config["seed"] is not None else 0
    scale = delta / epsilon
    rng = np.random.default_rng(seed)
    draws = laplace_from_uniform(rng.random(n), scale)
    stat, p_value = stats.kstest(draws, stats.laplace(scale=scale).cdf)
    verdict = "pass" if p_value >= 0.01 else "fail"
    print(
        json.dumps(
            {"ks_statistic": stat, "p_value": p_value, "n": n, "scale": scale, "verdict": verdict},
            sort_keys=True,
        )
    )
    print("epsilon spent: 0")
    return EXIT_OK


def cmd_l_sweep(config: dict, l_values: list[int]) -> int:
    if len(set(l_values)) != len(l_values):
        raise ConfigError("l_values contains duplicates")
    spec = _network_spec(config)
    out_dir = Path(config["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set = _load_split(config, "train_images", "train_labels")
    test_set = _load_split(config, "test_images", "test_labels")
    with _OutputLock(out_dir):
        rows = l_sweep(spec, train_set, test_set, l_values)
        with open(out_dir / "sweep.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["L", "accuracy", "wall_time"])
            for row in rows:
                writer.writerow([row["L"], row["accuracy"], row["wall_time"]])
    for row in rows:
        print(f"L={row['L']} accuracy={row['accuracy']:.4f} wall={row['wall_time']:.2f}s")
    print("epsilon spent: 0" if spec.noiseless else f"epsilon spent per run: {spec.epsilon_total:.6g}")
    return EXIT_OK


def _cap_threads() -> None:
    cap = os.environ.get("DP_ENERGY_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpcdbn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "audit", "noise-test", "l-sweep"):
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", default=None, help="flat key=value configuration file")
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--epsilon", default=None)
        cmd.add_argument("--out", default=None)
        cmd.add_argument("--model", default=None)
        cmd.add_argument("--delta", default=None)
        cmd.add_argument("--n", default=None)
        cmd.add_argument("--l-values", default=None, help="comma separated approximation degrees")
    return parser


def main(argv=None) -> int:
    _cap_threads()
    args = build_parser().parse_args(argv)
    try:
        overrides = {
            "seed": None if args.seed is None else str(args.seed),
            "epsilon": args.epsilon,
            "out": args.out,
            "model": args.model,
            "delta": args.delta,
            "n": args.n,
        }
        config = load_config(args.config, overrides)
        if args.command in ("train", "audit") and config["seed"] is None:
            raise ConfigError("seed is required for train and audit")
        if args.command == "train":
            return cmd_train(config)
        if args.command == "eval":
            return cmd_eval(config)
        if args.command == "audit":
            return cmd_audit(config)
        if args.command == "noise-test":
            return cmd_noise_test(config)
        l_raw = args.l_values if args.l_values is not None else config.get("l_values")
        if not l_raw:
            raise ConfigError("l_values is required for l-sweep")
        try:
            l_values = [int(x) for x in str(l_raw).split(",")]
        except ValueError:
            raise ConfigError("invalid value for l_values: expected comma separated integers") from None
        return cmd_l_sweep(config, l_values)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DpcdbnError as exc:
        if type(exc).__name__ in _DATA_ERRORS:
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except RuntimeError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    raise SystemExit(main())
