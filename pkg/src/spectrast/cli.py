"""Command-line interface: synth, preprocess, augment, train, eval, map,
selfcheck, bench, and pipeline subcommands.

Exit codes: 0 success, 1 user/config error, 2 internal invariant violation
(including failed gradient self-checks).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import core, maps, metrics, model, nn, preprocess, selfcheck, synth
from .errors import ConfigError, InternalError, SpectrastError
from .noisemix import NoiseMixConfig, balanced_epoch
from .train import NearestCentroid, TrainConfig, benchmark_throughput, train


def _parse_sigma(text):
    lo, _, hi = text.partition(":")
    return (float(lo), float(hi or lo))


def _parse_st(text):
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"expected i,j,k, got {text!r}")
    return parts


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, args_ns, seeds, artifacts, wall_s):
    manifest = {
        "command": " ".join(sys.argv),
        "config": {k: v for k, v in sorted(vars(args_ns).items())
                   if not k.startswith("_") and k != "func"},
        "seeds": seeds,
        "artifacts": {str(p): _sha256(p) for p in artifacts},
        "wall_s": wall_s,
    }
    path = Path(out_dir) / "manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1, default=str)
        f.write("\n")
    return path


def _load_dataset_arg(path, registry_path=None, fmt=None):
    fmt = fmt or ("jsonl" if str(path).endswith(".jsonl") else "csv")
    registry = core.load_registry(registry_path) if registry_path else None
    return core.load_dataset(path, fmt, registry=registry)


def _dataset_format(path, fmt=None):
    return fmt or ("jsonl" if str(path).endswith(".jsonl") else "csv")


def _synth_config(args):
    if getattr(args, "signatures", None):
        sigs = synth.load_signatures(args.signatures)
        registry = (
            core.load_registry(args.registry)
            if getattr(args, "registry", None)
            else synth.default_registry()
        )
        return synth.SynthConfig(registry=registry, signatures=sigs,
                                 noise_sigma_range=args.sigma, seed=args.seed)
    return synth.default_synth_config(noise_sigma_range=args.sigma, seed=args.seed)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth_dataset(args):
    cfg = _synth_config(args)
    ds = synth.gen_dataset(cfg, args.per_class)
    core.save_dataset(ds, args.out, _dataset_format(args.out, args.format))
    if not args.quiet:
        print(f"wrote {len(ds)} spectra ({cfg.n_classes} classes) to {args.out}")
    return 0


def cmd_synth_map(args):
    cfg = _synth_config(args)
    planted = cfg.registry.index_of(args.planted_class)
    bg = cfg.registry.index_of(args.background_class) if args.background_class \
        else cfg.registry.background_indices()[0]
    region = synth.half_map_region(args.rows, args.cols, planted, bg)
    hm, region, cov = synth.gen_map(
        cfg, args.rows, args.cols, region, noise_sigma=args.map_sigma,
        edge_decay_cells=args.decay_cells, spacing_um=args.spacing_um,
    )
    core.save_map(hm, args.out)
    if args.plant_out:
        with open(args.plant_out, "w") as f:
            json.dump({"planted": region.tolist(), "coverage": cov.tolist(),
                       "classes": cfg.registry.names}, f)
            f.write("\n")
    if not args.quiet:
        print(f"wrote {args.rows}x{args.cols} map to {args.out}")
    return 0


def cmd_preprocess(args):
    ds = _load_dataset_arg(args.infile, args.registry)
    cfg = preprocess.PreprocessConfig(
        spike_window=args.spike_window,
        spike_threshold_sigma=args.spike_sigma,
        do_slope_removal=not args.no_slope,
        do_normalize=not args.no_normalize,
    )
    out = preprocess.preprocess_dataset(ds, cfg)
    core.save_dataset(out, args.out, _dataset_format(args.out, args.format))
    if not args.quiet:
        print(f"preprocessed {len(out)} spectra to {args.out}")
    return 0


def cmd_augment(args):
    ds = _load_dataset_arg(args.infile, args.registry)
    sources = tuple(
        ds.registry.index_of(name) for name in args.bg_classes.split(",")
    ) if args.bg_classes else ()
    cfg = NoiseMixConfig(alpha_max=args.alpha_max, background_sources=sources,
                         per_epoch_per_class=args.per_class, seed=args.seed)
    rng = np.random.default_rng(cfg.seed)
    epoch = balanced_epoch(ds, cfg, rng)
    core.save_dataset(epoch, args.out, _dataset_format(args.out, args.format))
    if not args.quiet:
        print(f"wrote balanced epoch of {len(epoch)} spectra to {args.out}")
    return 0


def _train_configs(args, registry, axis):
    i, j, k = args.st
    st_cfg = model.STConfig(
        depth_i=i, heads_j=j, mlp_ratio_k=k, d_model=args.d_model,
        use_positional_embedding=not args.no_pe, dropout_p=args.dropout,
        n_classes=len(registry), seq_len=axis.n_points,
    )
    sources = tuple(
        registry.index_of(name) for name in args.bg_classes.split(",")
    ) if getattr(args, "bg_classes", None) else ()
    nm_cfg = NoiseMixConfig(alpha_max=args.alpha_max,
                            background_sources=sources,
                            per_epoch_per_class=args.per_class,
                            seed=args.seed)
    t_cfg = TrainConfig(
        batch_size=args.batch, lr=args.lr, weight_decay=args.weight_decay,
        epochs=args.epochs, seed=args.seed, use_noisemix=not args.no_noisemix,
        noisemix=nm_cfg, selection=args.selection,
        grad_accum_chunk=args.grad_accum_chunk,
        lr_schedule=args.lr_schedule, warmup_steps=args.warmup_steps,
        lr_min=args.lr_min,
    )
    return st_cfg, t_cfg


def cmd_train(args):
    nn.set_default_dtype(args.precision)
    ds_train = _load_dataset_arg(args.train, args.registry)
    ds_val = _load_dataset_arg(args.val, args.registry) if args.val else \
        ds_train.subset([])
    st_cfg, t_cfg = _train_configs(args, ds_train.registry, ds_train.axis)
    log = None if args.quiet else print
    params, report = train(ds_train, ds_val, st_cfg, t_cfg, log=log)
    model.save_checkpoint(params, st_cfg, args.out)
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report.to_dict(), f, indent=1)
            f.write("\n")
    if not args.quiet:
        print(f"saved checkpoint to {args.out}")
    return 0


def cmd_eval(args):
    params, st_cfg = model.load_checkpoint(args.model)
    ds = _load_dataset_arg(args.test, args.registry)
    model.check_compat(st_cfg, ds.registry, ds.axis)
    preds = model.predict(ds.as_matrix(), params, st_cfg)
    cm = metrics.confusion(ds.labels, preds, ds.registry)
    doc = {
        "accuracy": metrics.accuracy(cm),
        "argmax_accuracy": float(np.mean(preds == ds.labels)),
        "density": metrics.density(preds, ds.registry),
        "confusion": cm.counts.tolist(),
        "per_class": metrics.per_class_precision_recall(cm),
    }
    if args.baseline:
        doc["nearest_centroid_accuracy"] = NearestCentroid().fit(ds).accuracy(ds)
    with open(args.out, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
    if not args.quiet:
        print(f"accuracy {doc['accuracy']:.4f} density {doc['density']:.4f}")
    return 0


def cmd_map(args):
    t0 = time.perf_counter()
    params, st_cfg = model.load_checkpoint(args.model)
    registry = core.load_registry(args.registry)
    model.check_compat(st_cfg, registry)
    hm = core.load_map(args.infile)
    pre_cfg = preprocess.PreprocessConfig(
        do_slope_removal=not args.no_slope, do_normalize=True
    )
    pm = maps.classify_map(hm, params, st_cfg, pre_cfg, registry)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []

    pm_path = out_dir / "prediction_map.json"
    maps.export_map(pm, pm_path, "json")
    artifacts.append(pm_path)

    summary = maps.summarize(pm, threshold=args.threshold)
    if args.true_class:
        idx = registry.index_of(args.true_class)
        try:
            summary["map_accuracy"] = metrics.map_accuracy(pm, idx, args.threshold)
        except SpectrastError as e:
            summary["map_accuracy"] = None
            summary["map_accuracy_error"] = str(e)
    summary_path = out_dir / "summary.json"
    with open(summary_path, "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    artifacts.append(summary_path)

    if args.shift is not None:
        mat = maps.intensity_map(hm, args.shift)
        for fmt in ("csv", "pgm"):
            p = out_dir / f"intensity_{args.shift:g}cm1.{fmt}"
            maps.export_map(mat, p, fmt)
            artifacts.append(p)

    _write_manifest(out_dir, args, {"seed": args.seed},
                    artifacts, time.perf_counter() - t0)
    if not args.quiet:
        print(f"wrote map products to {out_dir}")
    return 0


def cmd_selfcheck(args):
    results = selfcheck.run_selfcheck(n_seeds=args.seeds)
    failed = [r for r in results if not r["passed"]]
    for r in results:
        status = "PASS" if r["passed"] else "FAIL"
        print(f"{status} {r['name']}: max rel err {r['max_rel_err']:.3e}")
    if failed:
        print(f"FAILED: {', '.join(r['name'] for r in failed)}", file=sys.stderr)
        return 2
    return 0


def cmd_bench(args):
    i, j, k = args.st
    st_cfg = model.STConfig(depth_i=i, heads_j=j, mlp_ratio_k=k,
                            d_model=args.d_model, n_classes=args.n_classes,
                            seq_len=args.seq_len)
    t_cfg = TrainConfig(batch_size=args.batch, epochs=1,
                        grad_accum_chunk=args.grad_accum_chunk)
    report = benchmark_throughput(st_cfg, t_cfg, n_batches=args.batches,
                                  seed=args.seed)
    text = json.dumps(report, indent=1)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    if not args.quiet:
        print(text)
    return 0


# ---------------------------------------------------------------------------
# Pipeline: synth -> preprocess -> train -> eval -> map, driven by one config


def cmd_pipeline(args):
    t0 = time.perf_counter()
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"pipeline config not found: {path}")
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib

        cfg = tomllib.loads(path.read_text())
    else:
        cfg = json.loads(path.read_text())
    try:
        return _run_pipeline(cfg, args, t0)
    except SpectrastError as e:
        raise ConfigError(f"pipeline stage failed: {e}") from e


def _run_pipeline(cfg, args, t0):
    pl = cfg.get("pipeline", {})
    out_dir = Path(pl.get("out_dir", "run"))
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = int(pl.get("seed", 0))
    nn.set_default_dtype(pl.get("precision", "float64"))
    quiet = args.quiet
    artifacts = []

    def log(msg):
        if not quiet:
            print(msg)

    # synth stage
    sy = cfg["synth"]
    scfg = synth.default_synth_config(seed=seed)
    train_sigma = tuple(sy.get("train_sigma", [0.01, 0.05]))
    test_sigma = tuple(sy.get("test_sigma", [0.01, 0.2]))
    pre_cfg = preprocess.PreprocessConfig()
    log("pipeline: generating synthetic datasets")
    ds_train = preprocess.preprocess_dataset(
        synth.gen_dataset(scfg, int(sy["per_class"]), train_sigma, seed=seed), pre_cfg
    )
    ds_val = preprocess.preprocess_dataset(
        synth.gen_dataset(scfg, int(sy.get("val_per_class", 10)), test_sigma,
                          seed=seed + 1), pre_cfg
    )
    ds_test = preprocess.preprocess_dataset(
        synth.gen_dataset(scfg, int(sy.get("test_per_class", 20)), test_sigma,
                          seed=seed + 2), pre_cfg
    )
    train_path = out_dir / "train.csv"
    core.save_dataset(ds_train, train_path)
    artifacts.append(train_path)

    # train stage
    tr = cfg["train"]
    i, j, k = tr.get("st", [1, 10, 3])
    st_cfg = model.STConfig(
        depth_i=i, heads_j=j, mlp_ratio_k=k,
        d_model=int(tr.get("d_model", 40)),
        n_classes=scfg.n_classes, seq_len=scfg.axis.n_points,
        dropout_p=float(tr.get("dropout", 0.1)),
    )
    nm_cfg = NoiseMixConfig(
        alpha_max=float(tr.get("alpha_max", 0.9)),
        background_sources=tuple(
            scfg.registry.index_of(n) for n in tr.get("bg_classes", [])
        ),
        per_epoch_per_class=int(tr.get("per_epoch_per_class", 100)),
        seed=seed,
    )
    t_cfg = TrainConfig(
        batch_size=int(tr.get("batch_size", 300)),
        lr=float(tr.get("lr", 3e-3)),
        epochs=int(tr.get("epochs", 20)),
        seed=seed,
        use_noisemix=bool(tr.get("noisemix", True)),
        noisemix=nm_cfg,
        lr_schedule=str(tr.get("lr_schedule", "constant")),
        warmup_steps=int(tr.get("warmup_steps", 10)),
        lr_min=float(tr.get("lr_min", 1e-3)),
    )
    log("pipeline: training")
    params, report = train(ds_train, ds_val, st_cfg, t_cfg,
                           log=None if quiet else print)
    ckpt_path = out_dir / "model.ckpt"
    model.save_checkpoint(params, st_cfg, ckpt_path)
    artifacts.append(ckpt_path)
    report_path = out_dir / "report.json"
    with open(report_path, "w") as f:
        json.dump(report.to_dict(), f, indent=1)
        f.write("\n")

    # eval stage
    log("pipeline: evaluating")
    preds = model.predict(ds_test.as_matrix(), params, st_cfg)
    cm = metrics.confusion(ds_test.labels, preds, ds_test.registry)
    doc = {
        "accuracy": metrics.accuracy(cm),
        "argmax_accuracy": float(np.mean(preds == ds_test.labels)),
        "density": metrics.density(preds, ds_test.registry),
        "confusion": cm.counts.tolist(),
        "per_class": metrics.per_class_precision_recall(cm),
        "nearest_centroid_accuracy":
            NearestCentroid().fit(ds_train).accuracy(ds_test),
    }
    metrics_path = out_dir / "metrics.json"
    with open(metrics_path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
    artifacts.append(metrics_path)

    # map stage
    mp = cfg.get("map")
    if mp:
        log("pipeline: classifying synthetic map")
        rows, cols = int(mp.get("rows", 21)), int(mp.get("cols", 21))
        planted = scfg.registry.index_of(mp.get("planted_class", "ecoli_a"))
        bg = scfg.registry.background_indices()[0]
        region = synth.half_map_region(rows, cols, planted, bg)
        hm, region, cov = synth.gen_map(
            scfg, rows, cols, region,
            noise_sigma=float(mp.get("sigma", 0.05)),
            edge_decay_cells=float(mp.get("decay_cells", 3.0)),
            seed=seed + 3,
        )
        pm = maps.classify_map(hm, params, st_cfg, pre_cfg, scfg.registry)
        summary = maps.summarize(pm)
        summary["planted_fraction"] = float(
            np.isin(region, scfg.registry.bacterial_indices()).mean()
        )
        try:
            summary["map_accuracy"] = metrics.map_accuracy(pm, planted)
        except SpectrastError as e:
            summary["map_accuracy"] = None
            summary["map_accuracy_error"] = str(e)
        map_summary_path = out_dir / "map_summary.json"
        with open(map_summary_path, "w") as f:
            json.dump(summary, f, indent=1, sort_keys=True)
            f.write("\n")
        artifacts.append(map_summary_path)
        if mp.get("shift") is not None:
            mat = maps.intensity_map(hm, float(mp["shift"]))
            ipath = out_dir / "intensity.pgm"
            maps.export_map(mat, ipath, "pgm")
            artifacts.append(ipath)

    _write_manifest(out_dir, args, {"seed": seed}, artifacts,
                    time.perf_counter() - t0)
    log(f"pipeline complete; outputs in {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser():
    parser = argparse.ArgumentParser(
        prog="spectrast",
        description="Spectral-transformer pipeline for Raman-like spectra",
    )
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    parser.add_argument("--threads", type=int, default=1,
                        help="reserved; computation is single-threaded")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="generate synthetic data")
    synth_sub = p.add_subparsers(dest="synth_what", required=True)

    pd = synth_sub.add_parser("dataset")
    common(pd)
    pd.add_argument("--per-class", type=int, required=True)
    pd.add_argument("--sigma", type=_parse_sigma, default=(0.01, 0.2),
                    help="noise sigma range lo:hi")
    pd.add_argument("--signatures", help="JSON signature file (default built-in)")
    pd.add_argument("--registry", help="registry JSON for custom signatures")
    pd.add_argument("--format", choices=["csv", "jsonl"])
    pd.add_argument("--out", required=True)
    pd.set_defaults(func=cmd_synth_dataset)

    pm = synth_sub.add_parser("map")
    common(pm)
    pm.add_argument("--rows", type=int, default=51)
    pm.add_argument("--cols", type=int, default=51)
    pm.add_argument("--planted-class", default="ecoli_a")
    pm.add_argument("--background-class")
    pm.add_argument("--sigma", type=_parse_sigma, default=(0.01, 0.2))
    pm.add_argument("--map-sigma", type=float, default=0.05)
    pm.add_argument("--decay-cells", type=float, default=3.0)
    pm.add_argument("--spacing-um", type=float, default=1.0)
    pm.add_argument("--signatures")
    pm.add_argument("--registry")
    pm.add_argument("--plant-out", help="write planted labels/coverage JSON here")
    pm.add_argument("--out", required=True)
    pm.set_defaults(func=cmd_synth_map)

    p = sub.add_parser("preprocess", help="clean spectra")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--registry")
    p.add_argument("--spike-window", type=int, default=5)
    p.add_argument("--spike-sigma", type=float, default=6.0)
    p.add_argument("--no-slope", action="store_true")
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--format", choices=["csv", "jsonl"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("augment", help="emit one NoiseMix-balanced epoch")
    common(p)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--registry")
    p.add_argument("--bg-classes", help="comma-separated background class names")
    p.add_argument("--alpha-max", type=float, default=0.9)
    p.add_argument("--per-class", type=int, default=300)
    p.add_argument("--format", choices=["csv", "jsonl"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train a spectral transformer")
    common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--registry")
    p.add_argument("--st", type=_parse_st, default=[1, 10, 3],
                   help="depth,heads,mlp-ratio")
    p.add_argument("--d-model", type=int, default=40)
    p.add_argument("--no-pe", action="store_true",
                   help="disable the positional embedding")
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=300)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--lr-schedule", choices=["constant", "warmup_cosine"],
                   default="constant")
    p.add_argument("--warmup-steps", type=int, default=10)
    p.add_argument("--lr-min", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--precision", choices=["float32", "float64"],
                   default="float64",
                   help="compute dtype; float32 roughly halves training time")
    p.add_argument("--no-noisemix", action="store_true")
    p.add_argument("--alpha-max", type=float, default=0.9)
    p.add_argument("--bg-classes",
                   help="comma-separated mixing-source class names "
                        "(default: every background class)")
    p.add_argument("--per-class", type=int, default=300,
                   help="NoiseMix examples per class per epoch")
    p.add_argument("--selection", choices=["last", "best_val_accuracy"],
                   default="best_val_accuracy")
    p.add_argument("--grad-accum-chunk", type=int, default=32)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a test dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--registry")
    p.add_argument("--baseline", action="store_true",
                   help="also report the nearest-centroid accuracy")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("map", help="classify a hyperspectral map")
    common(p)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--shift", type=float, help="intensity-map wavenumber shift")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--true-class", help="class name for map accuracy")
    p.add_argument("--no-slope", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("selfcheck", help="gradient checks for all primitives")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_selfcheck)

    p = sub.add_parser("bench", help="forward/backward throughput")
    common(p)
    p.add_argument("--st", type=_parse_st, default=[1, 10, 3])
    p.add_argument("--d-model", type=int, default=40)
    p.add_argument("--n-classes", type=int, default=15)
    p.add_argument("--seq-len", type=int, default=480)
    p.add_argument("--batch", type=int, default=300)
    p.add_argument("--batches", type=int, default=10)
    p.add_argument("--grad-accum-chunk", type=int, default=32)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("pipeline", help="run the full workflow from one config")
    p.add_argument("config", help="TOML or JSON pipeline configuration")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    prev_dtype = nn.get_default_dtype()
    try:
        return args.func(args)
    except SpectrastError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except InternalError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 2
    finally:
        # commands may switch precision; do not leak that into the caller
        nn.set_default_dtype(prev_dtype)


if __name__ == "__main__":
    sys.exit(main())
