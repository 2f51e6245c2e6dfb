"""
Command line entry point ``emu``.

    emu generate|train|infer|evaluate|bench --config <path> [--seed N] [--force]

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
``EMU_THREADS`` caps the worker threads used for Monte-Carlo passes.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import bench as benchmod
from . import synth
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .errors import ConfigError, DataError, DimensionError, TrainingError
from .metrics import RasterPair, conditional_rmse, evaluate_pairs
from .model import build_model, classify_cloud, mc_predict, static_predict, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def workers():
    try:
        return max(1, int(os.environ.get("EMU_THREADS", "1")))
    except ValueError:
        raise ConfigError("EMU_THREADS must be an integer") from None


def write_run_manifest(cfg, command, artifacts):
    lines = [f"command={command}", f"config_hash={cfg.config_hash()}", f"seed={cfg.seed}"]
    if cfg.path is not None:
        lines.append(f"config={cfg.path.resolve()}")
    for p in sorted(artifacts, key=str):
        lines.append(f"artifact\t{Path(p).relative_to(cfg.output_dir.parent)}\t{synth.file_checksum(p)}")
    synth.atomic_write(cfg.output_dir / f"{command}.manifest", "\n".join(lines) + "\n")


def _normalized(tile, stats):
    if tuple(tile.input_names) != tuple(stats.names):
        raise DataError(f"tile {tile.tile_id} channels {tile.input_names} do not match "
                        f"the training channels {stats.names}")
    return synth.normalize(tile.inputs[None], stats)


def _load_stats(cfg):
    path = cfg.output_dir / "norm_stats.json"
    try:
        return synth.NormStats.from_dict(json.loads(path.read_text()))
    except FileNotFoundError:
        raise DataError(f"normalization stats not found: {path}") from None


def _load_model(cfg):
    return load_checkpoint(cfg.output_dir / "model.dcem")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg, force=False):
    root = cfg.data_root
    if root.exists() and any(root.iterdir()):
        if not force:
            raise ConfigError(f"output directory {root} exists; pass --force to overwrite")
        shutil.rmtree(root)
    scfg = synth.SceneConfig(cloud_coverage=cfg.cloud_coverage)
    _, _, manifest = synth.build_dataset(cfg.train_seeds, cfg.test_seeds, root, cfg.height,
                                         cfg.width, scfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    write_run_manifest(cfg, "generate",
                       [root / "manifest.txt"] + [root / e.path for e in manifest.entries])
    return manifest


def _validation_tile(cfg):
    tiles = synth.load_split(cfg.data_root, "test")
    if cfg.validation_tile:
        for t in tiles:
            if t.tile_id == cfg.validation_tile:
                return t
        raise ConfigError(f"validation tile {cfg.validation_tile!r} not in the test split")
    return tiles[0]


def cmd_train(cfg, log_stream=None):
    tiles = synth.load_split(cfg.data_root, "train")
    if not tiles:
        raise DataError("no training tiles in manifest")
    stats = synth.fit_stats(tiles)
    data = synth.stack_patches(tiles, cfg.patch_size, cfg.stride, stats)
    val = _validation_tile(cfg)
    val_x = _normalized(val, stats)
    mcfg = cfg.model
    mcfg.in_channels = data.inputs.shape[-1]
    mcfg.bands = data.target.shape[-1]
    model = build_model(mcfg)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    synth.atomic_write(out / "norm_stats.json", json.dumps(stats.to_dict(), sort_keys=True, indent=1))
    records = []

    def on_epoch(rec, m):
        pred = static_predict(m, val_x)
        pair = RasterPair(val.target, val.clear, pred.yhat[0], pred.variance[0], pred.p_clear[0])
        rec.extra["val_conditional_rmse"] = [conditional_rmse(pair, b) for b in range(mcfg.bands)]
        rec.extra["val_accuracy"] = float(np.mean(classify_cloud(pair.p_clear, cfg.threshold) == val.clear))
        save_checkpoint(m, out / "model.dcem")
        records.append({"epoch": rec.epoch, "loss": rec.loss, "classification": rec.classification,
                        "regression": rec.regression, "kl": rec.kl,
                        "dropout_rates": rec.dropout_rates, **rec.extra})
        synth.atomic_write(out / "train_log.json", json.dumps(records, sort_keys=True, indent=1))
        if log_stream is not None:
            rm = rec.extra["val_conditional_rmse"]
            print(f"epoch {rec.epoch}: loss={rec.loss:.5f} val_rmse="
                  + ",".join(f"{v:.4f}" for v in rm)
                  + f" val_acc={rec.extra['val_accuracy']:.4f}", file=log_stream)

    if cfg.epochs == 0:
        model.set_dataset_size(data.clear.size)
        save_checkpoint(model, out / "model.dcem")
    log = train(model, data, cfg.epochs, cfg.batch_size, cfg.learning_rate, seed=cfg.seed,
                callback=on_epoch)
    write_run_manifest(cfg, "train", [out / "model.dcem", out / "norm_stats.json"]
                       + ([out / "train_log.json"] if records else []))
    return model, log


def prediction_channels(tile_pred, mode, bands=synth.BANDS):
    mean, var, p = tile_pred
    prefix = "mean" if mode == "bayes" else "yhat"
    ch = {f"{prefix}_{b}": mean[..., i] for i, b in enumerate(bands)}
    ch.update({f"var_{b}": var[..., i] for i, b in enumerate(bands)})
    ch["p_clear"] = p
    return ch


def predict_tile(model, stats, tile, mode, samples, seed=0, n_workers=1):
    x = _normalized(tile, stats)
    if x.shape[-1] != model.config.in_channels:
        raise DataError(f"checkpoint expects {model.config.in_channels} input channels, "
                        f"tile {tile.tile_id} has {x.shape[-1]}")
    if mode == "static":
        pred = static_predict(model, x)
        return pred.yhat[0], pred.variance[0], pred.p_clear[0]
    dist = mc_predict(model, x, samples, seed=seed, workers=n_workers)
    return dist.mean[0], dist.variance[0], dist.p_clear[0]


def cmd_infer(cfg, mode=None, samples=None):
    mode = mode or cfg.mode
    samples = samples or cfg.samples
    model = _load_model(cfg)
    stats = _load_stats(cfg)
    tiles = synth.load_split(cfg.data_root, "test")
    out = cfg.output_dir / "predictions"
    written = []
    for i, tile in enumerate(tiles):
        pred = predict_tile(model, stats, tile, mode, samples, seed=cfg.seed * 1000 + i,
                            n_workers=workers())
        path = out / f"{tile.tile_id}.gtil"
        synth.write_raster(path, prediction_channels(pred, mode))
        written.append(path)
    synth.atomic_write(out / "mode.txt", f"mode={mode}\nsamples={samples if mode == 'bayes' else 1}\n")
    write_run_manifest(cfg, "infer", written)
    return written


def read_prediction(path, bands=synth.BANDS):
    ch = synth.read_raster(path)
    prefix = "mean" if f"mean_{bands[0]}" in ch else "yhat"
    try:
        mean = np.stack([ch[f"{prefix}_{b}"] for b in bands], axis=-1)
        var = np.stack([ch[f"var_{b}"] for b in bands], axis=-1)
        p = ch["p_clear"]
    except KeyError as exc:
        raise DataError(f"prediction raster {path} lacks channel {exc}") from None
    return mean, var, p


def make_pair(tile, prediction, threshold):
    mean, var, p = prediction
    if mean.shape[:-1] != tile.clear.shape:
        raise DimensionError(f"prediction grid {mean.shape[:-1]} does not match tile "
                             f"{tile.tile_id} grid {tile.clear.shape}")
    return RasterPair(tile.target, tile.clear, mean, var, p, tile.class_map,
                      classify_cloud(p, threshold))


def cmd_evaluate(cfg):
    tiles = synth.load_split(cfg.data_root, "test")
    pred_dir = cfg.output_dir / "predictions"
    out = cfg.output_dir / "reports"
    pairs, written = [], []
    kw = dict(band_names=synth.BANDS, threshold=cfg.threshold, sweep_levels=cfg.sweep_levels,
              calibration_levels=cfg.calibration_levels, class_floor=cfg.class_floor)
    for tile in tiles:
        pair = make_pair(tile, read_prediction(pred_dir / f"{tile.tile_id}.gtil"), cfg.threshold)
        pairs.append(pair)
        report = evaluate_pairs([pair], **kw)
        report.data["tile"] = tile.tile_id
        path = out / f"{tile.tile_id}.json"
        synth.atomic_write(path, report.to_text())
        written.append(path)
    agg = evaluate_pairs(pairs, **kw)
    agg.data["tiles"] = [t.tile_id for t in tiles]
    synth.atomic_write(out / "aggregate.json", agg.to_text())
    synth.atomic_write(out / "aggregate_curves.csv", agg.curves_csv())
    written += [out / "aggregate.json", out / "aggregate_curves.csv"]
    write_run_manifest(cfg, "evaluate", written)
    return agg


def cmd_bench(cfg):
    model = _load_model(cfg)
    stats = _load_stats(cfg)
    tiles = synth.load_split(cfg.data_root, "test")
    size = 50
    patches = []
    for tile in tiles:
        for _, _, b in synth.extract_patches(tile, size, size):
            patches.append(b.inputs)
    if not patches:
        raise DataError("no test patches to benchmark")
    x = np.concatenate(patches)
    reps = int(np.ceil(cfg.bench_patches / len(x)))
    x = synth.normalize(np.concatenate([x] * reps)[:cfg.bench_patches], stats)
    rows = [benchmod.reference_benchmark(cfg.test_seeds[0], len(x), size, cfg.bench_trials,
                                         cfg.bench_warmup)]
    rows += benchmod.benchmark(model, x, cfg.bench_modes, cfg.bench_samples, cfg.bench_trials,
                               cfg.bench_warmup, seed=cfg.seed, workers=workers())
    out = cfg.output_dir
    synth.atomic_write(out / "bench.csv", benchmod.rows_to_csv(rows))
    written = [out / "bench.csv"]
    if {"static", "bayes"} <= set(cfg.bench_modes):
        synth.atomic_write(out / "bench_ratio.txt", benchmod.ratio_line(rows))
        written.append(out / "bench_ratio.txt")
    write_run_manifest(cfg, "bench", written)
    return rows


COMMANDS = ("generate", "train", "infer", "evaluate", "bench")


def build_parser():
    p = argparse.ArgumentParser(prog="emu", description="Bayesian atmospheric-correction emulator")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--seed", type=int, default=None, help="override [run] seed")
    p.add_argument("--force", action="store_true", help="overwrite existing generated data")
    p.add_argument("--arch", choices=("dcfc", "dccnn", "dcvdsr"), default=None,
                   help="override [model] architecture")
    p.add_argument("--mode", choices=("static", "bayes"), default=None, help="inference mode")
    p.add_argument("--samples", type=int, default=None, help="Monte-Carlo passes T")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed)
        if args.arch:
            cfg.model.architecture = args.arch
        if args.samples is not None:
            if args.samples < 1:
                raise ConfigError("--samples must be >= 1")
            cfg.samples = args.samples
        if args.command == "generate":
            cmd_generate(cfg, force=args.force)
        elif args.command == "train":
            cmd_train(cfg, log_stream=sys.stdout)
        elif args.command == "infer":
            cmd_infer(cfg, mode=args.mode)
        elif args.command == "evaluate":
            cmd_evaluate(cfg)
        elif args.command == "bench":
            rows = cmd_bench(cfg)
            sys.stdout.write(benchmod.rows_to_csv(rows))
    except ConfigError as exc:
        print(f"emu: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"emu: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DimensionError) as exc:
        print(f"emu: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
