"""Command-line harness: gen, train, eval, cost, sweep, quantize.

Every command reads a flat JSON config (``--config``), applies ``--set
key=value`` overrides and then the dedicated flags, and prints a JSON
document on stdout. Exit status: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import benchmark as B
from . import costmodel as C
from . import model as M
from . import simworld as W
from .losses import REGIMES, SupervisionRegime, regime_from_name
from .metrics import evaluate_predictions
from .quantization import dequantize, dequantize_params, quantize_params, requantize_after_finetune
from .trainer import AugmentConfig, TrainConfig, fine_tune

DEFAULTS = {
    "seed": 0,
    "regime": "t_a",
    "dt": 2.0,
    "strategy": "all",
    "lambda_sc": 1.0,
    "n_anchors": 32,
    "anchor_mode": "staged",
    "learning_rate": 1e-2,
    "epochs": 5,
    "batch_size": 32,
    "batches_per_epoch": 16,
    "photometric": True,
    "hflip": True,
    "time_reversal": True,
    "finetune_len": 512,
    "gap": 100,
    "test_len": 256,
    "subject_v_max": 0.8,
    "style": "target",
    "odom_sigma_xy": 0.05,
    "odom_sigma_z": 0.01,
    "odom_sigma_phi": 0.02,
    "cache_dir": ".ondevice_ft_cache",
    "regimes": ["t_a"],
    "dts": [2.0],
    "strategies": ["all", "bn", "bias", "fc"],
    "seeds": 5,
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides=(), **flags) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as e:
            raise DataError(f"cannot read config: {e}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        cfg.update(doc)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"override {item!r} is not key=value")
        cfg[key.strip()] = _parse_value(value)
    cfg.update({k: v for k, v in flags.items() if v is not None})
    unknown = sorted(set(cfg) - set(DEFAULTS))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return cfg


def _regime(cfg, name=None) -> SupervisionRegime:
    try:
        base = regime_from_name(name or cfg["regime"], float(cfg["dt"]))
        return SupervisionRegime(
            **{**base.__dict__, "lambda_sc": float(cfg["lambda_sc"]), "n_anchors": int(cfg["n_anchors"]),
               "anchor_mode": cfg["anchor_mode"]}
        )
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e


def _noise(cfg) -> W.NoiseModel:
    return W.NoiseModel(float(cfg["odom_sigma_xy"]), float(cfg["odom_sigma_z"]), float(cfg["odom_sigma_phi"]))


def _bench(cfg) -> B.BenchmarkConfig:
    return B.BenchmarkConfig(
        finetune_len=int(cfg["finetune_len"]),
        gap=int(cfg["gap"]),
        test_len=int(cfg["test_len"]),
        subject_v_max=float(cfg["subject_v_max"]),
        cache_dir=str(cfg["cache_dir"]),
    )


def _train_config(cfg, regime) -> TrainConfig:
    try:
        return _make_train_config(cfg, regime)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e


def _make_train_config(cfg, regime) -> TrainConfig:
    return TrainConfig(
        learning_rate=float(cfg["learning_rate"]),
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        batches_per_epoch=int(cfg["batches_per_epoch"]),
        strategy=cfg["strategy"],
        regime=regime,
        seed=int(cfg["seed"]),
        augment=AugmentConfig(
            photometric=bool(cfg["photometric"]), hflip=bool(cfg["hflip"]), time_reversal=bool(cfg["time_reversal"])
        ),
    )


def _emit(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out}: {e}") from e
    return out


def load_params(path) -> M.ParamStore:
    """Float32 parameters from a float or int8 checkpoint."""
    try:
        kind = M.checkpoint_kind(path)
    except OSError as e:
        raise DataError(f"cannot read checkpoint: {e}") from e
    if kind == "int8":
        arch, codes, qparams, floats = M.load_int8_checkpoint(path)
        return dequantize_params(arch, codes, qparams, floats)
    return M.load_checkpoint(path)


# -- commands ----------------------------------------------------------------------------------


def cmd_gen(args, cfg) -> dict:
    bench = _bench(cfg)
    regime = _regime(cfg)
    style = {"target": W.TARGET_STYLE, "source": W.SOURCE_STYLE}.get(cfg["style"])
    if style is None:
        raise UsageError(f"unknown style {cfg['style']!r}")
    seed = int(cfg["seed"])
    n = bench.finetune_len + bench.gap + bench.test_len
    traj = W.generate_trajectory(
        W.TrajectoryConfig(n_states=n, subject_v_max=bench.subject_v_max), np.random.default_rng([seed, 7])
    )
    images = W.render_batch(traj.relative, traj.drone[:, 3], style, seed)
    ft = traj.segment(0, bench.finetune_len)
    a = bench.finetune_len + bench.gap
    test = traj.segment(a, a + bench.test_len)
    ds_ft = W.build_dataset(ft, regime, _noise(cfg), style, seed, images=images[: bench.finetune_len])
    ds_test = W.build_dataset(test, REGIMES["t_a"], _noise(cfg), style, seed, images=images[a : a + bench.test_len])
    out = _out_dir(args)
    try:
        W.write_dataset(out / "finetune.ftds", ds_ft)
        W.write_dataset(out / "test.ftds", ds_test)
    except OSError as e:
        raise DataError(f"cannot write datasets: {e}") from e
    return {
        "finetune": {"path": str(out / "finetune.ftds"), "samples": len(ds_ft), "labeled": int(ds_ft.label_valid.sum())},
        "test": {"path": str(out / "test.ftds"), "samples": len(ds_test)},
        "discarded_gap": bench.gap,
        "regime": regime.name,
        "seed": seed,
    }


def _read(path) -> W.Dataset:
    try:
        return W.read_dataset(path)
    except OSError as e:
        raise DataError(f"cannot read dataset: {e}") from e


def cmd_train(args, cfg) -> dict:
    if not args.data:
        raise UsageError("train needs --data")
    regime = _regime(cfg)
    train = _train_config(cfg, regime)
    ds = _read(args.data)
    if args.init and M.checkpoint_kind(args.init) == "int8":
        arch, codes, qparams, floats = M.load_int8_checkpoint(args.init)
        params = dequantize_params(arch, codes, qparams, floats)
    elif args.init:
        params = load_params(args.init)
        qparams = quantize_params(params)[1]
    else:
        baseline = B.pretrained_baseline(_bench(cfg))
        params, qparams = baseline.params, baseline.qparams
    result = fine_tune(params, ds, train)
    out = _out_dir(args)
    M.save_checkpoint(out / "model.ttck", result.params)
    report = requantize_after_finetune(result.params, qparams)
    floats = {n: result.params.tensors[n] for n in result.params.arch.param_shapes() if n not in report.codes}
    M.save_int8_checkpoint(out / "model_int8.ttck", result.params.arch, report.codes, report.qparams, floats)
    with open(out / "trace.jsonl", "w") as fh:
        for rec in result.trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return {
        "trace": result.trace,
        "checkpoint": str(out / "model.ttck"),
        "checkpoint_int8": str(out / "model_int8.ttck"),
        "saturated_tensors": report.saturated_tensors,
        "dropped_pairs": result.dropped_pairs,
        "strategy": cfg["strategy"],
        "regime": regime.name,
    }


def cmd_eval(args, cfg) -> dict:
    if not args.checkpoint or not args.data:
        raise UsageError("eval needs --checkpoint and --data")
    ds = _read(args.data)
    if len(ds) == 0:
        raise DataError("empty test set")
    params = load_params(args.checkpoint)
    pred = B.predict(params, ds.images)
    return {"checkpoint": str(args.checkpoint), **evaluate_predictions(pred, ds.true_relative).to_dict()}


def cmd_cost(args, cfg) -> dict:
    strategies = list(M.Strategy) if args.all or not args.strategy else [M.Strategy(args.strategy)]
    rows = C.cost_table(strategies=strategies)
    tsv = C.table_to_tsv(rows)
    if args.out:
        out = _out_dir(args)
        (out / "cost.tsv").write_text(tsv)
        (out / "cost.json").write_text(C.table_to_json(rows))
    print(tsv, file=sys.stderr)
    return {"rows": [{**asdict(r), "total_kib": r.total_kib} for r in rows]}


def cmd_sweep(args, cfg) -> dict:
    bench = _bench(cfg)
    baseline = B.pretrained_baseline(bench)
    seeds = range(int(cfg["seeds"]))
    flights = {s: B.target_flight(s, bench) for s in seeds}
    cells = []
    for name in cfg["regimes"]:
        for dt in cfg["dts"]:
            for strategy in cfg["strategies"]:
                c = dict(cfg, dt=dt, strategy=strategy)
                regime = _regime(c, name)
                maes, before = [], []
                for s in seeds:
                    train = _train_config(dict(c, seed=s), regime)
                    r = B.run_cell(baseline, flights[s], s, regime, strategy, dt, bench, train, _noise(cfg))
                    maes.append(r.after.mae)
                    before.append(r.before.mae)
                cells.append({
                    "regime": name, "dt": dt, "strategy": strategy, "seeds": list(seeds),
                    "mae": maes, "mae_mean": float(np.mean(maes)), "mae_std": float(np.std(maes, ddof=1)) if len(maes) > 1 else 0.0,
                    "mae_before_mean": float(np.mean(before)),
                })
    return {"cells": cells}


def cmd_quantize(args, cfg) -> dict:
    if not args.checkpoint:
        raise UsageError("quantize needs --checkpoint")
    params = load_params(args.checkpoint)
    codes, qparams = quantize_params(params)
    floats = {n: params.tensors[n] for n in params.arch.param_shapes() if n not in codes}
    out = _out_dir(args)
    path = out / "model_int8.ttck"
    M.save_int8_checkpoint(path, params.arch, codes, qparams, floats)
    errors = {}
    for n, q in qparams.items():
        err = np.abs(params.tensors[n] - dequantize(codes[n], q))
        errors[n] = {"max_abs_error": float(err.max()), "scale": q.scale}
    return {"checkpoint_int8": str(path), "tensors": errors}


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "cost": cmd_cost,
    "sweep": cmd_sweep,
    "quantize": cmd_quantize,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ondevice-ft", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        p.add_argument("--seed", type=int)
        p.add_argument("--strategy", choices=[s.value for s in M.Strategy])
        p.add_argument("--regime", choices=sorted(REGIMES))
        p.add_argument("--dt", type=float)
        p.add_argument("--out", help="output directory")
        if name in ("train", "eval"):
            p.add_argument("--data", help="FTDS dataset file")
        if name in ("eval", "quantize"):
            p.add_argument("--checkpoint")
        if name == "train":
            p.add_argument("--init", help="starting checkpoint (default: the pretrained baseline)")
        if name == "cost":
            p.add_argument("--all", action="store_true", help="every strategy")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(
            args.config, args.set, seed=args.seed, strategy=args.strategy, regime=args.regime, dt=args.dt
        )
        doc = COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, ValueError, M.StaleCacheError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    _emit(doc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
