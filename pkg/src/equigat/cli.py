"""Command line: train, eval, audit, dump-preds.

Configs are JSON objects with optional ``preset``, ``model``, ``train`` and
``data`` sections; command-line flags override file values.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

from .attention import ConfigError
from .audit import equivariance_audit, forces_audit, gradcheck_audit, model_plans, paths_audit
from .data import Dataset, DatasetStats, load_xyz, make_toy_dataset
from .model import PRESETS, ModelConfig, ParameterStore, build_model
from .training import TrainConfig, metrics_from_predictions, predict, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def _resolve(args) -> tuple[ModelConfig, TrainConfig, dict]:
    raw = _read_config(getattr(args, "config", None))
    preset = getattr(args, "preset", None) or raw.get("preset") or "toy"
    mode = getattr(args, "mode", None)
    if mode == "e3" and f"{preset}-e3" in PRESETS:
        preset = f"{preset}-e3"
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    model_fields = {**PRESETS[preset]["model"], **raw.get("model", {})}
    for flag in ("attn_kind", "message_kind"):
        if getattr(args, flag, None):
            model_fields[flag] = getattr(args, flag)
    model_cfg = ModelConfig.from_dict(model_fields)
    if mode and model_cfg.mode != mode:
        model_cfg = model_cfg.with_mode(mode)
    train_fields = {**PRESETS[preset]["train"], **raw.get("train", {})}
    for flag in ("epochs", "lr", "batch_size", "force_weight"):
        if getattr(args, flag, None) is not None:
            train_fields[flag] = getattr(args, flag)
    if getattr(args, "seed", None) is not None:
        train_fields["seed"] = args.seed
    train_cfg = TrainConfig.from_dict(train_fields)
    data = dict(raw.get("data", {}))
    for flag in ("data", "toy", "frames", "n_train"):
        if getattr(args, flag, None) is not None:
            data[flag if flag != "data" else "path"] = getattr(args, flag)
    data["preset"] = preset
    return model_cfg, train_cfg, data


def _dataset(spec: dict, seed: int) -> Dataset:
    if spec.get("path"):
        return load_xyz(spec["path"])
    kind = spec.get("toy", "pairwise-morse")
    return make_toy_dataset(kind, int(spec.get("frames", 50)), int(spec.get("seed", seed)))


def _emit_csv(rows: list[dict], stream) -> None:
    if not rows:
        return
    keys = list(rows[0])
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    writer = csv.DictWriter(stream, fieldnames=keys, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)


# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    model_cfg, train_cfg, data_spec = _resolve(args)
    dataset = _dataset(data_spec, train_cfg.seed)
    n_train = int(data_spec.get("n_train", len(dataset)))
    train_set, val_set = dataset.split(n_train)
    stats = train_set.stats(model_cfg.cutoff)
    model_cfg.avg_degree = stats.avg_degree
    model_cfg.avg_atom_count = stats.avg_atom_count
    model, params = build_model(model_cfg, train_cfg.seed)
    print(f"# preset={data_spec['preset']} params={params.count()} train={len(train_set)} val={len(val_set)}",
          flush=True)
    header_done = False
    writer = None

    def log(record):
        nonlocal header_done, writer
        if not header_done:
            writer = csv.DictWriter(sys.stdout, fieldnames=list(record), lineterminator="\n", extrasaction="ignore")
            writer.writeheader()
            header_done = True
        writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in record.items()})
        sys.stdout.flush()

    start = time.time()
    params, history = train(model, params, train_set, train_cfg, stats, val_set if len(val_set) else None, log)
    print(f"# wall_seconds={time.time() - start:.1f}")
    if args.log:
        with open(args.log, "w") as fh:
            _emit_csv(history, fh)
    out = args.out or data_spec.get("out") or "params.npz"
    params.save(out, model_cfg, train_cfg.seed, {"stats": stats.to_dict(), "train": train_cfg.to_dict()})
    print(f"# saved {out}")
    return EXIT_OK


def _load_params(path):
    params, cfg, seed, meta = ParameterStore.load(path)
    if "stats" not in meta:
        raise ConfigError(f"{path} carries no normalization statistics")
    return params, cfg, DatasetStats(**meta["stats"])


def cmd_eval(args) -> int:
    params, cfg, stats = _load_params(args.params)
    model, _ = build_model(cfg, 0)
    dataset = load_xyz(args.data)
    metrics = metrics_from_predictions(predict(model, params, dataset, stats))
    for k, v in metrics.items():
        print(f"{k}\t{v:.10g}")
    return EXIT_OK


def cmd_dump_preds(args) -> int:
    params, cfg, stats = _load_params(args.params)
    model, _ = build_model(cfg, 0)
    dataset = load_xyz(args.data)
    pred = predict(model, params, dataset, stats)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "atom", "quantity", "true", "pred"])
        for n in range(len(dataset)):
            w.writerow([n, "", "energy", repr(float(pred.energy_true[n])), repr(float(pred.energy[n]))])
            if pred.forces is not None:
                for a in range(dataset[n].num_atoms):
                    for c, axis in enumerate("xyz"):
                        w.writerow([n, a, f"f{axis}", repr(float(pred.forces_true[n][a, c])),
                                    repr(float(pred.forces[n][a, c]))])
    print(f"# wrote {args.out}")
    return EXIT_OK


def cmd_audit(args) -> int:
    if args.suite == "paths" and args.in1:
        if not args.in2:
            raise ConfigError("--in2 is required with --in1")
        report, text = paths_audit(args.in1, args.in2, args.lmax if args.lmax is not None else 2)
        print(text)
        print(report.text())
        return EXIT_OK if report.passed else EXIT_FAIL
    model_cfg, train_cfg, _ = _resolve(args)
    seed = train_cfg.seed if args.seed is None else args.seed
    variants = [(model_cfg.attn_kind, model_cfg.message_kind)]
    if args.all_variants:
        variants = [(a, m) for a in ("mlp", "dot") for m in ("linear", "nonlinear")]
    ok = True
    for attn_kind, message_kind in variants:
        cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "attn_kind": attn_kind, "message_kind": message_kind})
        if args.suite == "equivariance":
            report = equivariance_audit(cfg, seed, rotations=args.rotations)
        elif args.suite == "gradcheck":
            report = gradcheck_audit(cfg, seed, instances=args.instances, entries=args.entries)
        elif args.suite == "forces":
            report = forces_audit(cfg, seed)
        else:
            model, _ = build_model(cfg, seed)
            lmax = cfg.lmax if args.lmax is None else args.lmax
            report, text = paths_audit(cfg.d_embed, cfg.d_sh, lmax)
            print(text)
            for name, plan in model_plans(model):
                print(f"# {name}: {plan.describe().splitlines()[0]}")
            print(f"# tensor products per block: {model.tensor_products_per_block()}")
        print(report.text(), flush=True)
        ok = ok and report.passed
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="equigat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--preset", choices=sorted(PRESETS))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--attn-kind", dest="attn_kind", choices=("mlp", "dot"))
        sp.add_argument("--message-kind", dest="message_kind", choices=("linear", "nonlinear"))

    t = sub.add_parser("train", help="train on an extended-XYZ file or a toy dataset")
    common(t)
    t.add_argument("--data", help="extended-XYZ training file (default: toy dataset)")
    t.add_argument("--toy", choices=("pairwise-morse", "random-cluster"))
    t.add_argument("--frames", type=int)
    t.add_argument("--n-train", dest="n_train", type=int, help="frames used for training; the rest validate")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--force-weight", dest="force_weight", type=float)
    t.add_argument("--out", help="parameter file to write (.npz)")
    t.add_argument("--log", help="write the per-epoch metrics CSV here too")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="energy/force MAE and EwT of saved parameters")
    e.add_argument("--params", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("dump-preds", help="write per-frame predictions as CSV")
    d.add_argument("--params", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump_preds)

    a = sub.add_parser("audit", help="run an invariant suite; exit code 1 on any failure")
    a.add_argument("suite", choices=("equivariance", "gradcheck", "paths", "forces"))
    common(a)
    a.add_argument("--mode", choices=("se3", "e3"))
    a.add_argument("--all-variants", action="store_true", help="run every attention/message combination")
    a.add_argument("--rotations", type=int, default=20)
    a.add_argument("--instances", type=int, default=3, help="random instances per rule (gradcheck)")
    a.add_argument("--entries", type=int, default=2, help="sampled coordinates per parameter array (gradcheck)")
    a.add_argument("--in1", help="paths: first irreps, e.g. '[(2,0),(2,1)]'")
    a.add_argument("--in2", help="paths: second irreps")
    a.add_argument("--lmax", type=int)
    a.set_defaults(func=cmd_audit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
