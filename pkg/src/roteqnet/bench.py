"""Single-thread forward-pass timing as a function of the number of orientations."""

from __future__ import annotations

import csv
import dataclasses
import io
import time

import numpy as np
from threadpoolctl import threadpool_limits

from .network import ModelConfig, build_model


def matched_baseline_nf(config: ModelConfig, search: int = 64) -> int:
    """Width multiplier of the standard CNN whose parameter count is closest to ``config``'s."""
    target = build_model(config).parameter_count
    best, best_gap = 1, None
    for nf in range(1, search + 1):
        cfg = dataclasses.replace(config, variant="baseline", nf=nf, mlp_widths=None)
        gap = abs(build_model(cfg).parameter_count - target)
        if best_gap is not None and gap > best_gap:
            break
        best, best_gap = nf, gap
    return best


def _timed(model, x: np.ndarray, n_orientations: int | None) -> float:
    t0 = time.perf_counter()
    model.forward(x, n_orientations=n_orientations)
    return time.perf_counter() - t0


def time_forward(model, x: np.ndarray, repeats: int, n_orientations: int | None = None) -> list[float]:
    model.forward(x, n_orientations=n_orientations)  # warm caches
    return [_timed(model, x, n_orientations) for _ in range(repeats)]


def bench(
    config: ModelConfig, r_list, repeats: int = 5, tile: int = 64, seed: int = 0, include_baseline: bool = True
) -> list[dict]:
    """Median forward time per tile for each R, plus the parameter-matched baseline.

    Repeats are interleaved round-robin over the variants, so slow drift in
    machine speed (frequency scaling, other load) spreads evenly instead of
    biasing whichever R happens to run first.  All BLAS pools are limited to
    one thread while timing.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, config.in_channels, tile, tile)).astype(np.float32)
    model = build_model(dataclasses.replace(config, variant="roteqnet"), seed=seed)
    jobs = [("roteqnet", int(R), model, int(R)) for R in r_list]
    if include_baseline:
        nf = matched_baseline_nf(config)
        base = build_model(dataclasses.replace(config, variant="baseline", nf=nf, mlp_widths=None), seed=seed)
        jobs.append(("baseline", 0, base, None))
    times: list[list[float]] = [[] for _ in jobs]
    with threadpool_limits(limits=1):
        for _, _, m, R in jobs:
            m.forward(x, n_orientations=R)  # warm caches
        for _ in range(repeats):
            for k, (_, _, m, R) in enumerate(jobs):
                times[k].append(_timed(m, x, R))
    return [_row(variant, R, m.parameter_count, t) for (variant, R, m, _), t in zip(jobs, times)]


def _row(variant: str, R: int, params: int, times: list[float]) -> dict:
    return {
        "variant": variant,
        "R": R,
        "params": params,
        "median_s": float(np.median(times)),
        "min_s": float(np.min(times)),
        "max_s": float(np.max(times)),
        "repeats": len(times),
    }


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    fields = ["variant", "R", "params", "median_s", "min_s", "max_s", "repeats"]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{row[k]:.6f}" if k.endswith("_s") else row[k]) for k in fields})
    return buf.getvalue()
