"""
Run configuration: an INI-style file of ``key = value`` lines in sections.

Relative paths resolve against the directory holding the config file.
Seed lists accept ``0-7`` ranges and comma lists (``0,2,5-6``).
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import ARCHITECTURES, ModelConfig

DEFAULTS = {
    "run": {"seed": "0", "output_dir": "run"},
    "data": {"root": "data", "train_seeds": "0-7", "test_seeds": "100-101", "height": "100",
             "width": "100", "cloud_coverage": "0.3"},
    "model": {"architecture": "dcfc", "hidden_layers": "3", "hidden_units": "512",
              "tau": "1e-5", "prior_length_scale": "1e-14", "temperature": "0.1",
              "init_dropout": "0.1", "dropout_on_head": "false", "per_band_variance": "true",
              "init_log_variance": "-5.0"},
    "train": {"epochs": "20", "batch_size": "16", "learning_rate": "1e-4", "patch_size": "50",
              "stride": "50", "validation_tile": ""},
    "infer": {"mode": "bayes", "samples": "10"},
    "eval": {"threshold": "0.5", "sweep_levels": "101", "calibration_levels": "11",
             "class_floor": "0"},
    "bench": {"modes": "static,bayes", "samples": "10", "trials": "5", "warmup": "3",
              "patches": "16"},
}


def parse_seeds(text):
    seeds = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        try:
            if sep:
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ConfigError(f"bad seed list entry {part!r}") from None
    return seeds


@dataclass
class RunConfig:
    path: Path | None
    seed: int
    output_dir: Path
    data_root: Path
    train_seeds: list
    test_seeds: list
    height: int
    width: int
    cloud_coverage: float
    model: ModelConfig
    epochs: int
    batch_size: int
    learning_rate: float
    patch_size: int
    stride: int
    validation_tile: str
    mode: str
    samples: int
    threshold: float
    sweep_levels: np.ndarray
    calibration_levels: np.ndarray
    class_floor: int
    bench_modes: list
    bench_samples: int
    bench_trials: int
    bench_warmup: int
    bench_patches: int
    raw_text: str = field(default="", repr=False)

    def config_hash(self):
        return hashlib.sha256(f"{self.raw_text}\nseed={self.seed}".encode()).hexdigest()


def load_config(path=None, text=None, seed=None):
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read_dict(DEFAULTS)
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        base = path.resolve().parent
    text = text or ""
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")

    def get(section, key, conv=str):
        raw = parser[section][key]
        try:
            return conv(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {conv.__name__}") from None

    def boolean(section, key):
        try:
            return parser.getboolean(section, key)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be true or false") from None

    arch = get("model", "architecture").lower()
    if arch not in ARCHITECTURES:
        raise ConfigError(f"--arch/architecture must be one of {', '.join(ARCHITECTURES)}, got {arch!r}")
    run_seed = get("run", "seed", int) if seed is None else int(seed)
    mc = ModelConfig(architecture=arch, hidden_layers=get("model", "hidden_layers", int),
                     hidden_units=get("model", "hidden_units", int), tau=get("model", "tau", float),
                     prior_length_scale=get("model", "prior_length_scale", float),
                     temperature=get("model", "temperature", float),
                     init_dropout=get("model", "init_dropout", float),
                     init_log_variance=get("model", "init_log_variance", float),
                     dropout_on_head=boolean("model", "dropout_on_head"),
                     per_band_variance=boolean("model", "per_band_variance"), seed=run_seed)
    mode = get("infer", "mode").lower()
    if mode not in ("static", "bayes"):
        raise ConfigError(f"[infer] mode must be static or bayes, got {mode!r}")
    samples = get("infer", "samples", int)
    if samples < 1:
        raise ConfigError("[infer] samples must be >= 1")
    threshold = get("eval", "threshold", float)
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError("[eval] threshold must lie in [0, 1]")
    modes = [m.strip() for m in get("bench", "modes").split(",") if m.strip()]
    if any(m not in ("static", "bayes") for m in modes):
        raise ConfigError("[bench] modes must be a list drawn from static, bayes")
    cfg = RunConfig(
        path=path, seed=run_seed,
        output_dir=base / get("run", "output_dir"),
        data_root=base / get("data", "root"),
        train_seeds=parse_seeds(get("data", "train_seeds")),
        test_seeds=parse_seeds(get("data", "test_seeds")),
        height=get("data", "height", int), width=get("data", "width", int),
        cloud_coverage=get("data", "cloud_coverage", float),
        model=mc,
        epochs=get("train", "epochs", int), batch_size=get("train", "batch_size", int),
        learning_rate=get("train", "learning_rate", float),
        patch_size=get("train", "patch_size", int), stride=get("train", "stride", int),
        validation_tile=get("train", "validation_tile"),
        mode=mode, samples=samples, threshold=threshold,
        sweep_levels=np.round(np.linspace(0, 1, get("eval", "sweep_levels", int)), 10),
        calibration_levels=np.round(np.linspace(0, 1, get("eval", "calibration_levels", int)), 10),
        class_floor=get("eval", "class_floor", int),
        bench_modes=modes, bench_samples=get("bench", "samples", int),
        bench_trials=get("bench", "trials", int), bench_warmup=get("bench", "warmup", int),
        bench_patches=get("bench", "patches", int), raw_text=text,
    )
    if not cfg.train_seeds or not cfg.test_seeds:
        raise ConfigError("both train_seeds and test_seeds must be non-empty")
    if cfg.epochs < 0 or cfg.batch_size < 1 or cfg.stride < 1:
        raise ConfigError("epochs must be >= 0, batch_size and stride >= 1")
    if cfg.bench_trials < 5 or cfg.bench_warmup < 3:
        raise ConfigError("[bench] needs trials >= 5 and warmup >= 3")
    return cfg
