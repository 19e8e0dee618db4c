"""Command-line interface.

Configuration precedence, lowest to highest: dataclass defaults, the
``TASAM_SEED`` environment variable (seed only), a TOML config file or a
previous ``run.json`` given via ``--config``, then explicit flags.

Exit codes: 0 success; 2 usage, configuration, or data errors; 3 numeric
aborts during training; 4 verification failures (gradient check, freeze
check, gate bound).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

import importlib

# the package re-exports the gradcheck *function*; the module itself
# (which carries the corruption hook) has to be fetched explicitly
gradcheck_mod = importlib.import_module("tasam.gradcheck")
from .data import GenConfig, generate, load_dataset, save_dataset
from .encoder import freeze_check
from .errors import (
    ConfigError,
    DataError,
    DatasetError,
    FormatError,
    MetricError,
    NumericError,
    ReproducibilityError,
)
from .metrics import count_flops, count_params, time_model
from .model import build_model, precompute_features, state_from_arrays
from .plots import heatmap_ppm, image_ppm, line_plot_svg
from .tensorio import load_checkpoint, save_tensor
from .train import (
    PROMPT_SWEEP_KS,
    TEMPORAL_SWEEP_TS,
    TrainConfig,
    evaluate,
    run_ablation,
    run_row,
    save_run,
    sweep_prompts,
    sweep_temporal,
    train,
    write_metrics_csv,
)
from .verify import MODULE_GRADCHECKS, end_to_end_gradcheck, gate_bound_check

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4


def _load_config_file(path):
    """Read a TOML config or a previous run.json; returns a flat dict."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    if path.suffix == ".json":
        with open(path) as fh:
            payload = json.load(fh)
        if "config" not in payload:
            raise ConfigError(f"{path} is not a run record (no 'config' key)")
        return dict(payload["config"])
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    flat = {}
    for key, value in doc.items():
        if isinstance(value, dict):  # [train] / [data] / [model] tables
            flat.update(value)
        else:
            flat[key] = value
    return flat


def _env_seed():
    raw = os.environ.get("TASAM_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"TASAM_SEED must be an integer, got {raw!r}") from exc


def _resolve(cls, args, extra=None):
    """Merge defaults < TASAM_SEED < --config file < flags into cls."""
    merged = {}
    env_seed = _env_seed()
    if env_seed is not None:
        merged["seed"] = env_seed
    if getattr(args, "config", None):
        merged.update(_load_config_file(args.config))
    if extra:
        merged.update({k: v for k, v in extra.items() if v is not None})
    for name in cls.__dataclass_fields__:
        flag = getattr(args, name, None)
        if flag is not None:
            merged[name] = flag
    known = {k: v for k, v in merged.items() if k in cls.__dataclass_fields__}
    unknown = set(merged) - set(known)
    if unknown - {"n"}:
        raise ConfigError(f"unknown config keys: {sorted(unknown - {'n'})}")
    return cls(**known)


def _parse_scales(raw):
    if raw is None:
        return None
    try:
        return tuple(float(s) for s in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad scale list {raw!r}") from exc


def _add_train_flags(p):
    p.add_argument("--config", help="TOML config or a previous run.json")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int, help="prompt count")
    p.add_argument("--window", dest="temporal_window", type=int,
                   help="temporal window T")
    p.add_argument("--scales", help="comma-separated scale factors, e.g. 0.5,1.0,2.0")
    p.add_argument("--prompt-strategy", dest="prompt_strategy",
                   choices=("temporal", "learned", "point", "box"))
    p.add_argument("--no-terrain", dest="use_terrain", action="store_false", default=None)
    p.add_argument("--no-temporal", dest="use_temporal", action="store_false", default=None)
    p.add_argument("--no-multiscale", dest="use_multiscale", action="store_false", default=None)


def _train_config(args):
    extra = {"scales": _parse_scales(getattr(args, "scales", None))}
    return _resolve(TrainConfig, args, extra)


def _load_split(args):
    samples, manifest = load_dataset(args.data)
    if getattr(args, "eval_data", None):
        eval_samples, _ = load_dataset(args.eval_data)
        return samples, eval_samples
    holdout = getattr(args, "holdout", None) or max(1, len(samples) // 5)
    if holdout >= len(samples):
        raise ConfigError(
            f"holdout {holdout} leaves no training data (n={len(samples)})"
        )
    return samples[:-holdout], samples[-holdout:]


# ---------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------

def cmd_gen(args):
    merged = {}
    env_seed = _env_seed()
    if env_seed is not None:
        merged["seed"] = env_seed
    if args.config:
        merged.update(_load_config_file(args.config))
    n = args.n if args.n is not None else merged.pop("n", 128)
    for name in ("height", "width", "frames", "seed"):
        if getattr(args, name, None) is not None:
            merged[name] = getattr(args, name)
    merged = {k: v for k, v in merged.items() if k in GenConfig.__dataclass_fields__}
    cfg = GenConfig(**merged)
    samples = generate(cfg, n)
    manifest = save_dataset(samples, args.out, cfg)
    print(f"wrote {manifest['n']} samples ({cfg.height}x{cfg.width}, "
          f"T={cfg.frames}, seed {cfg.seed}) to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _train_config(args)
    train_samples, manifest = load_dataset(args.data)
    eval_samples = None
    if args.eval_data:
        eval_samples, _ = load_dataset(args.eval_data)
    record, state = train(
        cfg, train_samples, eval_samples,
        log=(None if args.quiet else lambda m: print(m, flush=True)),
    )
    if not record.freeze_ok:
        print("error: frozen encoder weights changed during training",
              file=sys.stderr)
        return EXIT_VERIFY
    save_run(record, state, args.out, extra={"data": str(args.data)})
    print(f"miou {record.metrics['miou']:.4f}  f1 {record.metrics['f1']:.4f}  "
          f"({record.wall_time_s:.1f}s); run written to {args.out}")
    return EXIT_OK


def _load_run(run_path):
    run_path = Path(run_path)
    if run_path.is_dir():
        run_path = run_path / "run.json"
    if not run_path.exists():
        raise ConfigError(f"{run_path} does not exist")
    with open(run_path) as fh:
        payload = json.load(fh)
    cfg = TrainConfig.from_dict(payload["config"])
    ckpt = run_path.parent / payload.get("checkpoint", "checkpoint.tsmc")
    return payload, cfg, ckpt


def cmd_eval(args):
    payload, cfg, ckpt = _load_run(args.run)
    arrays = load_checkpoint(ckpt)
    state = state_from_arrays(cfg.model_config(), arrays)
    if not freeze_check(state.params, cfg.model_config().encoder_config):
        print("error: checkpoint frozen weights do not match their seeded "
              "derivation", file=sys.stderr)
        return EXIT_VERIFY
    samples, _ = load_dataset(args.data)
    cm, metrics, preds = evaluate(state, samples)
    if args.dump_pred:
        save_tensor(args.dump_pred, np.stack(preds).astype(np.uint8))
    row = {
        "variant": payload.get("variant", "full"),
        "miou": f"{metrics['miou']:.6f}",
        "f1": f"{metrics['f1']:.6f}",
        "precision": f"{metrics['precision']:.6f}",
        "recall": f"{metrics['recall']:.6f}",
        "params": str(sum(payload.get("param_counts", {}).values())),
        "flops": str(sum(count_flops(cfg.model_config()).values())),
        "ms": "",
    }
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_metrics_csv(Path(args.out) / "metrics.csv", [row])
    for key in ("miou", "f1", "precision", "recall"):
        print(f"{key:10s} {metrics[key]:.6f}")
    return EXIT_OK


def _write_table(out_dir, records, name):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out_dir / "metrics.csv", [run_row(r) for r in records])
    payload = [
        {"variant": r.variant, "config": r.config, "metrics": r.metrics,
         "per_class_iou": r.per_class_iou, "epoch_losses": r.epoch_losses}
        for r in records
    ]
    with open(out_dir / f"{name}.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def cmd_ablate(args):
    cfg = _train_config(args)
    train_samples, eval_samples = _load_split(args)
    log = None if args.quiet else (lambda m: print(m, flush=True))
    records = run_ablation(cfg, train_samples, eval_samples, log=log)
    _write_table(args.out, records, "ablation")
    for r in records:
        print(f"{r.variant:16s} miou {r.metrics['miou']:.4f}")
    return EXIT_OK


def cmd_sweep(args):
    cfg = _train_config(args)
    train_samples, eval_samples = _load_split(args)
    log = None if args.quiet else (lambda m: print(m, flush=True))
    values = None
    if args.values:
        values = tuple(int(v) for v in args.values.split(","))
    if args.kind == "prompts":
        records = sweep_prompts(cfg, train_samples, eval_samples,
                                ks=values or PROMPT_SWEEP_KS, log=log)
    else:
        records = sweep_temporal(cfg, train_samples, eval_samples,
                                 ts=values or TEMPORAL_SWEEP_TS, log=log)
    _write_table(args.out, records, f"sweep_{args.kind}")
    for r in records:
        print(f"{r.variant:8s} miou {r.metrics['miou']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args):
    if args.corrupt:
        gradcheck_mod._CORRUPTION = args.corrupt
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    names = list(MODULE_GRADCHECKS) + ["end_to_end"]
    if args.module != "all":
        names = [args.module]
    ok = True
    for name in names:
        if name == "end_to_end":
            report = end_to_end_gradcheck(seed=seed)
        else:
            report = MODULE_GRADCHECKS[name](seed=seed)
        status = "ok" if report.passed() else "FAIL"
        print(f"{name:12s} worst_rel_err={report.worst:.3e} "
              f"(tol {report.tol:g}) {status}")
        if args.verbose:
            for line in report.lines():
                print("  " + line)
        ok = ok and report.passed()
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_info(args):
    cfg = _train_config(args)
    mcfg = cfg.model_config()
    state = build_model(mcfg)
    params = count_params(state).params
    flops = count_flops(mcfg, image_size=(args.height, args.width))
    ms = {}
    if not args.no_timing:
        sample = generate(GenConfig(height=args.height, width=args.width,
                                    frames=max(cfg.temporal_window, 1),
                                    seed=cfg.seed), 1)[0]
        feats = precompute_features(state, sample)
        ms = time_model(state, sample, feats, runs=max(args.runs, 20))
    groups = ("frozen", "ta_adapter", "tp_prompt", "ms_fusion", "decoder")
    print(f"{'module':12s} {'params':>10s} {'flops':>14s} {'ms/img':>8s}")
    tot_p = tot_f = tot_ms = 0
    for g in groups:
        p = params.get(g, 0)
        f = flops.get(g, 0)
        m = ms.get(g, float("nan"))
        tot_p += p
        tot_f += f
        if g in ms:
            tot_ms += m
        ms_txt = f"{m:8.3f}" if g in ms else f"{'-':>8s}"
        print(f"{g:12s} {p:10d} {f:14d} {ms_txt}")
    ms_txt = f"{tot_ms:8.3f}" if ms else f"{'-':>8s}"
    print(f"{'total':12s} {tot_p:10d} {tot_f:14d} {ms_txt}")
    trainable = tot_p - params.get("frozen", 0)
    print(f"trainable {trainable} ({100.0 * trainable / params['frozen']:.1f}% "
          "of frozen)")
    return EXIT_OK


def cmd_plot(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wrote = []
    run_dir = Path(args.run) if args.run else None
    if run_dir is not None:
        if run_dir.is_file():
            run_dir = run_dir.parent
        run_json = run_dir / "run.json"
        if run_json.exists():
            with open(run_json) as fh:
                payload = json.load(fh)
            p = line_plot_svg(out / "loss.svg",
                              {"train": payload["epoch_losses"]},
                              title="training loss", xlabel="epoch",
                              ylabel="cross-entropy")
            wrote.append(p)
        for kind in ("sweep_prompts", "sweep_temporal", "ablation"):
            table = run_dir / f"{kind}.json"
            if not table.exists():
                continue
            with open(table) as fh:
                rows = json.load(fh)
            if kind.startswith("sweep"):
                xs = [float(r["variant"].split("=")[1]) for r in rows]
                series = {"miou": list(zip(xs, [r["metrics"]["miou"] for r in rows]))}
                xlabel = "prompt count k" if kind.endswith("prompts") else "window T"
                p = line_plot_svg(out / f"{kind}.svg", series,
                                  title=kind.replace("_", " "), xlabel=xlabel,
                                  ylabel="mIoU")
            else:
                series = {r["variant"]: r["epoch_losses"] for r in rows}
                p = line_plot_svg(out / "ablation_loss.svg", series,
                                  title="ablation training loss",
                                  xlabel="epoch", ylabel="cross-entropy")
            wrote.append(p)
    if args.data and args.run:
        payload, cfg, ckpt = _load_run(args.run)
        state = state_from_arrays(cfg.model_config(), load_checkpoint(ckpt))
        samples, _ = load_dataset(args.data)
        if not (0 <= args.sample < len(samples)):
            raise ConfigError(f"sample index {args.sample} out of range")
        sample = samples[args.sample]
        from .model import forward

        collect = {}
        seg = forward(state, sample, collect=collect)
        h, w = sample.labels.shape
        wrote.append(image_ppm(out / "input.ppm", sample.image))
        wrote.append(heatmap_ppm(out / "prediction.ppm",
                                 seg.labels.astype(np.float32)))
        wrote.append(heatmap_ppm(out / "labels.ppm",
                                 sample.labels.astype(np.float32)))
        if "gate" in collect:
            gh, gw = collect["grid"]
            gate_map = collect["gate"].mean(axis=1).reshape(gh, gw)
            wrote.append(heatmap_ppm(out / "gate.ppm", gate_map, out_size=(h, w)))
    if not wrote:
        raise ConfigError("nothing to plot: give --run (and optionally --data)")
    for p in wrote:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_verify(args):
    failures = []
    if args.run:
        payload, cfg, ckpt = _load_run(args.run)
        arrays = load_checkpoint(ckpt)
        state = state_from_arrays(cfg.model_config(), arrays)
        if freeze_check(state.params, cfg.model_config().encoder_config):
            print("freeze     ok (frozen weights match their seeded derivation)")
        else:
            print("freeze     FAIL")
            failures.append("freeze")
    violation, err0, err1 = gate_bound_check(n=args.gate_draws)
    if violation <= 1e-6 and err0 <= 1e-6 and err1 <= 1e-6:
        print(f"gate bound ok (max violation {violation:.2e}, "
              f"saturation errors {err0:.2e}/{err1:.2e})")
    else:
        print(f"gate bound FAIL (violation {violation:.2e}, "
              f"saturation {err0:.2e}/{err1:.2e})")
        failures.append("gate")
    return EXIT_VERIFY if failures else EXIT_OK


# ---------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="tasam",
        description="terrain- and time-aware segmentation adapter toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the adapter stack on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", dest="eval_data")
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a finished run on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True, help="run directory or run.json")
    p.add_argument("--out")
    p.add_argument("--dump-pred", dest="dump_pred",
                   help="write predicted label maps as a tensor file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="baseline / removals / full comparison")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", dest="eval_data")
    p.add_argument("--holdout", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="prompt-count or temporal-window sweep")
    p.add_argument("--kind", choices=("prompts", "temporal"), required=True)
    p.add_argument("--values", help="comma-separated sweep values")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", dest="eval_data")
    p.add_argument("--holdout", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", default="all",
                   choices=("all", "ta_adapter", "tp_prompt", "ms_fusion",
                            "decoder", "end_to_end"))
    p.add_argument("--seed", type=int)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--corrupt", type=float, default=0.0,
                   help="negative control: offset added to analytic gradients")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("info", help="per-module parameter/FLOP/latency table")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--no-timing", dest="no_timing", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("plot", help="loss curves, sweep plots, heatmaps")
    p.add_argument("--run", help="run directory (run.json / tables)")
    p.add_argument("--data", help="dataset for heatmap rendering")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("verify", help="freeze + gate-bound verification")
    p.add_argument("--run", help="run directory or run.json")
    p.add_argument("--gate-draws", dest="gate_draws", type=int, default=1000)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ReproducibilityError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (ConfigError, DataError, DatasetError, FormatError, MetricError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
