"""Throughput of the teacher and of static and Bayesian emulator inference."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from . import synth
from .model import mc_predict, static_predict

CSV_FIELDS = ("model", "mode", "samples", "examples", "trials", "warmup",
              "median_seconds", "examples_per_second")


@dataclass
class BenchRow:
    model: str
    mode: str
    samples: int
    examples: int
    trials: int
    warmup: int
    median_seconds: float

    @property
    def examples_per_second(self):
        return self.examples / self.median_seconds


def _time(fn, trials, warmup):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def benchmark(model, inputs, modes=("static", "bayes"), samples=10, trials=5, warmup=3,
              seed=0, workers=1):
    """Median wall time per mode over ``trials`` runs after ``warmup`` discarded runs.

    ``inputs`` is a ``[N, 50, 50, C]`` stack; one example is one patch.
    """
    n = inputs.shape[0]
    rows = []
    for mode in modes:
        if mode == "static":
            fn = lambda: static_predict(model, inputs)  # noqa: E731
            t = 1
        elif mode == "bayes":
            fn = lambda: mc_predict(model, inputs, samples, seed=seed, workers=workers)  # noqa: E731
            t = samples
        else:
            raise ValueError(f"unknown bench mode {mode!r}")
        rows.append(BenchRow(model.config.architecture, mode, t, n, trials, warmup,
                             _time(fn, trials, warmup)))
    return rows


def reference_benchmark(seed, n_examples, size=50, trials=5, warmup=3):
    """Teacher throughput: TOA for every band over ``n_examples`` patches' worth of pixels."""
    side = max(size, int(np.ceil(np.sqrt(n_examples) * size)))
    scene = synth.generate_scene(seed, side, side)
    examples = (side // size) ** 2

    def run():
        for b in range(len(synth.BANDS)):
            synth.toa_forward(scene, b)

    return BenchRow("teacher", "reference", 1, examples, trials, warmup,
                    _time(run, trials, warmup))


def rows_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow([r.model, r.mode, r.samples, r.examples, r.trials, r.warmup,
                    f"{r.median_seconds:.6g}", f"{r.examples_per_second:.6g}"])
    return buf.getvalue()


def rows_from_csv(text):
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_FIELDS:
        raise ValueError(f"unexpected bench columns {reader.fieldnames}")
    out = []
    for d in reader:
        out.append(BenchRow(d["model"], d["mode"], int(d["samples"]), int(d["examples"]),
                            int(d["trials"]), int(d["warmup"]), float(d["median_seconds"])))
    return out


def speed_ratio(rows, fast="static", slow="bayes"):
    by_mode = {r.mode: r for r in rows}
    return by_mode[fast].examples_per_second / by_mode[slow].examples_per_second


def ratio_line(rows):
    return f"static_over_bayes={speed_ratio(rows):.4f}\n"
