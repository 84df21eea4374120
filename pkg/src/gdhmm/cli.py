"""Command-line workflows: simulate, fit, predict, evaluate, bench.

Every command writes its outputs atomically next to a JSON manifest and
exits with the category code of :mod:`gdhmm.errors` on failure, after
printing ``{"error": <category>, "message": ...}`` to stderr.  All
randomness comes from ``--seed``.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .core_model import ModelParams
from .discriminative import PenaltyConfig, class_probability_matrix, one_hot
from .em import FitConfig, TRACE_COLUMNS, fit, initialize
from .errors import ConfigError, DataError, GdhmmError, SchemaError
from .evaluation import (
    EVAL_MODES,
    METHODS,
    accuracy,
    default_fit_config,
    fit_labels,
    one_vs_rest_auc,
    panel_hmm,
    run_benchmark,
)
from .hmm_baseline import fit_hmm
from .io import (
    atomic_write_text,
    config_hash,
    csv_text,
    dataclass_keys,
    file_sha256,
    load_config,
    load_model,
    read_cohort,
    read_keyed,
    save_model,
    write_cohort,
    write_manifest,
    write_records,
    write_truth,
)
from .predict import adaptive_viterbi, forecast, forecast_probabilities
from .simulate import SimulationConfig, make_study

MODES = ("posterior", "viterbi", "forecast")

_FIT_KEYS = (dataclass_keys(FitConfig) - {"penalty", "seed"}) | {"penalty", "lambda", "num_states", "t_star"}
_SIM_KEYS = dataclass_keys(SimulationConfig) - {"seed"}
_BENCH_KEYS = _SIM_KEYS | {"methods", "eval_mode", "fit"}
_PREDICT_KEYS = {"forecast_offsets"}


# ---------------------------------------------------------------- helpers


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.suffix == "" else out.with_name(out.name + ".manifest.json")


def _guard_outputs(paths) -> None:
    for p in paths:
        if Path(p).exists():
            raise ConfigError(f"output {p} already exists; outputs are write-once")


def _finish(command, args, cfg, out: Path, outputs, inputs, t0) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": args.seed,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "inputs": {str(p): file_sha256(p) for p in inputs},
        "outputs": {str(p): file_sha256(p) for p in outputs},
        "wall_clock_seconds": round(time.time() - t0, 3),
    }
    write_manifest(_manifest_path(out), manifest)


def _sim_config(raw: dict, seed: int) -> SimulationConfig:
    raw = dict(raw)
    if raw.get("emission") is not None:
        raw["emission"] = tuple(tuple(float(v) for v in row) for row in raw["emission"])
    try:
        return SimulationConfig(**raw, seed=seed)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def fit_config_kwargs(raw: dict) -> dict:
    """FitConfig keyword arguments from a config document.

    ``penalty`` names the penalty kind and ``lambda`` its value when
    cross-validation is off; ``num_states`` and ``t_star`` describe the
    data and are skipped.
    """
    kw = {k: v for k, v in raw.items() if k not in ("num_states", "t_star", "penalty", "lambda")}
    if "penalty" in raw or "lambda" in raw:
        kw["penalty"] = PenaltyConfig(raw.get("penalty", "none"), float(raw.get("lambda", 0.0)))
    if isinstance(kw.get("structure_mask"), list):
        kw["structure_mask"] = np.array(kw["structure_mask"], dtype=bool)
    return kw


def fit_config_from(raw: dict, seed: int) -> FitConfig:
    try:
        return FitConfig(**fit_config_kwargs(raw), seed=seed)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> None:
    t0 = time.time()
    raw = load_config(args.config, _SIM_KEYS)
    sim = _sim_config(raw, args.seed)
    out = Path(args.out)
    files = [out / n for n in ("train.csv", "train_truth.csv", "test.csv", "test_truth.csv", "truth_model.json")]
    _guard_outputs(files + [_manifest_path(out)])
    study = make_study(sim, np.random.default_rng(args.seed))
    write_cohort(files[0], study.train)
    write_truth(files[1], study.train, study.train_states)
    write_cohort(files[2], study.test)
    write_truth(files[3], study.test, study.test_states)
    save_model(files[4], study.truth, "truth")
    cfg = {k: v for k, v in asdict(sim).items()}
    _finish("simulate", args, cfg, out, files, [args.config] if args.config else [], t0)


def _truth_labels(path, data) -> np.ndarray:
    table = read_keyed(path, ["d_true"], int_cols=("d_true",))
    out = []
    for s in data.subjects:
        for t in s.times:
            key = (s.subject_id, float(t))
            if key not in table:
                raise DataError(f"{path}: no latent state for subject {s.subject_id} at time {t}")
            out.append(table[key][0])
    return np.array(out, dtype=np.int64)


def _split_truth(labels, data):
    out, i = [], 0
    for s in data.subjects:
        out.append(labels[i : i + s.num_visits])
        i += s.num_visits
    return out


def _stamp(params, raw, seed):
    return params.replace(metadata=dict(params.metadata, seed=seed, fit_config_hash=config_hash(raw)))


def cmd_fit(args) -> None:
    t0 = time.time()
    raw = load_config(args.config, _FIT_KEYS)
    cfg = fit_config_from(raw, args.seed)
    data = read_cohort(args.data, int(raw.get("num_states", 4)), raw.get("t_star"))
    out = Path(args.out)
    trace_path = out.with_name(out.stem + ".trace.csv")
    outputs = [out]
    if args.method == "proposed":
        outputs.append(trace_path)
    _guard_outputs(outputs + [_manifest_path(out)])
    rng = np.random.default_rng([args.seed, 7])
    S = data.dims.num_states
    if args.method == "proposed":
        res = fit(data, cfg, initialize(data, cfg))
        save_model(out, _stamp(res.params, raw, args.seed), "proposed")
        atomic_write_text(trace_path, csv_text(TRACE_COLUMNS, [[r[c] for c in TRACE_COLUMNS] for r in res.trace]))
    elif args.method == "hmm":
        h = fit_hmm(data, cfg)
        save_model(out, _stamp(h.as_model(data.dims), raw, args.seed), "hmm")
    elif args.method == "dknown":
        if not args.truth:
            raise ConfigError("--method dknown needs --truth with the latent states")
        labels = _truth_labels(args.truth, data)
        disc = fit_labels(data, one_hot(labels, S), cfg, rng)
        init, intensity = panel_hmm(data, _split_truth(labels, data), cfg.mask_for(S), rng)
        save_model(out, _stamp(ModelParams(data.dims, init, intensity, None, disc), raw, args.seed), "dknown")
    else:
        st = data.stacked()
        disc = fit_labels(data, one_hot(st.surrogate, S), cfg, rng)
        save_model(out, _stamp(ModelParams(data.dims, None, None, None, disc), raw, args.seed), "obs")
    inputs = [args.data] + ([args.config] if args.config else []) + ([args.truth] if args.truth else [])
    _finish(f"fit --method {args.method}", args, raw, out, outputs, inputs, t0)


def cmd_predict(args) -> None:
    t0 = time.time()
    raw = load_config(args.config, _PREDICT_KEYS)
    offsets = np.asarray(raw.get("forecast_offsets", [1.0]), dtype=float)
    if offsets.ndim != 1 or len(offsets) == 0 or np.any(offsets <= 0) or np.any(np.diff(offsets) <= 0):
        raise ConfigError("forecast_offsets must be a nonempty increasing list of positive numbers")
    params, method = load_model(args.model)
    if params.discrim is None:
        raise ConfigError(f"a {method or 'surrogate-only'} model has no marker component and cannot predict from markers")
    if args.mode != "posterior" and params.intensity is None:
        raise ConfigError(f"mode {args.mode!r} needs a model with a transition component")
    # surrogate columns are never parsed here
    data = read_cohort(args.data, params.dims.num_states, None, read_z=False)
    if data.dims.num_markers != params.dims.num_markers:
        raise SchemaError(f"model has {params.dims.num_markers} markers but the data has {data.dims.num_markers}")
    out = Path(args.out)
    _guard_outputs([out, _manifest_path(out)])
    S = params.dims.num_states
    rows = []
    for s in data.subjects:
        probs = class_probability_matrix(params.discrim, s.markers, s.times)
        if args.mode == "posterior":
            path = np.argmax(probs, axis=1)
        elif args.mode == "viterbi":
            path = adaptive_viterbi(params, s.times, s.markers).path
        else:
            future = s.times[-1] + offsets
            path = forecast(params, s.times, s.markers, future).path
            probs = np.vstack([probs, forecast_probabilities(params, s.times, s.markers, future)])
        times = s.times if args.mode != "forecast" else np.concatenate([s.times, s.times[-1] + offsets])
        for j, t in enumerate(times):
            rows.append([s.subject_id, float(t), int(path[j])] + [float(v) for v in probs[j]])
    header = ["subject_id", "time", "predicted_state"] + [f"prob_{k}" for k in range(S)]
    atomic_write_text(out, csv_text(header, rows))
    cfg = dict(raw, mode=args.mode)
    _finish(f"predict --mode {args.mode}", args, cfg, out, [out], [args.model, args.data] + ([args.config] if args.config else []), t0)


def cmd_evaluate(args) -> None:
    t0 = time.time()
    pred_path = args.pred or args.data
    if not pred_path or not args.truth:
        raise ConfigError("evaluate needs --pred (or --data) and --truth")
    header = open(pred_path).readline().strip().split(",")
    S = len([h for h in header if h.startswith("prob_")])
    if S < 2:
        raise SchemaError(f"{pred_path}: need prob_0..prob_K columns")
    pred = read_keyed(pred_path, ["predicted_state"] + [f"prob_{k}" for k in range(S)], int_cols=("predicted_state",))
    truth = read_keyed(args.truth, ["d_true"], int_cols=("d_true",))
    keys = [k for k in pred if k in truth]
    if not keys:
        raise DataError("no prediction rows match the truth file")
    p = np.array([pred[k][0] for k in keys])
    probs = np.array([pred[k][1:] for k in keys])
    d = np.array([truth[k][0] for k in keys])
    out = Path(args.out)
    _guard_outputs([out, _manifest_path(out)])
    recs = [{"metric": "accuracy", "class": "all", "value": accuracy(p, d)}]
    recs.append({"metric": "rows", "class": "all", "value": len(keys)})
    for k, a in enumerate(one_vs_rest_auc(probs, d, S)):
        recs.append({"metric": "auc", "class": k, "value": float(a)})
    for k in range(S):
        m = d == k
        recs.append({"metric": "class_accuracy", "class": k, "value": accuracy(p[m], d[m]) if m.any() else float("nan")})
    write_records(out, recs, ["metric", "class", "value"])
    _finish("evaluate", args, {}, out, [out], [pred_path, args.truth], t0)


def cmd_bench(args) -> None:
    t0 = time.time()
    raw = load_config(args.config, _BENCH_KEYS)
    sim_raw = {k: v for k, v in raw.items() if k in _SIM_KEYS}
    sim = _sim_config(sim_raw, args.seed)
    methods = tuple(raw.get("methods", METHODS))
    mode = raw.get("eval_mode", "all_visits")
    if mode not in EVAL_MODES:
        raise ConfigError(f"unknown eval_mode {mode!r}")
    fit_raw = raw.get("fit", {}) or {}
    unknown = set(fit_raw) - _FIT_KEYS
    if unknown:
        raise ConfigError(f"unknown fit config keys {sorted(unknown)}")
    try:
        fc = default_fit_config(sim, **fit_config_kwargs(fit_raw), seed=args.seed)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    files = [out / "replications.csv", out / "summary.csv"]
    _guard_outputs(files + [_manifest_path(out)])
    res = run_benchmark(sim, args.reps, methods, fc, args.seed, args.threads, mode)
    write_records(files[0], res.rows())
    write_records(files[1], res.summary())
    _finish("bench", args, dict(raw, reps=args.reps), out, files, [args.config] if args.config else [], t0)


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gdhmm", description="Latent disease progression from markers and noisy labels.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, need_out=True):
        sp.add_argument("--config", help="JSON config document")
        sp.add_argument("--out", required=need_out, help="output path")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("simulate", help="simulate a train/test study")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="fit a model to a cohort CSV")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--method", choices=METHODS, default="proposed")
    sp.add_argument("--truth", help="latent-state file (dknown only)")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("predict", help="predict latent states from markers")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--mode", choices=MODES, default="posterior")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="score predictions against latent states")
    common(sp)
    sp.add_argument("--pred", help="prediction CSV")
    sp.add_argument("--data", help="alias of --pred")
    sp.add_argument("--truth", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("bench", help="replicated simulation benchmark")
    common(sp)
    sp.add_argument("--reps", type=int, default=10)
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except GdhmmError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        # malformed config values rejected by a constructor
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
