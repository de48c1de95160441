"""Batch-1 inference latency."""
from __future__ import annotations

import statistics
import time

import numpy as np
import torch

from .evaluate import postprocess


def benchmark_latency(model, input_size=(96, 96), warmup: int = 3, iters: int = 20, seed: int = 0,
                      config_hash: str = "") -> dict:
    """Wall-clock forward + post-processing per image, batch size 1, no gradient tracking."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    g = torch.Generator().manual_seed(seed)
    image = torch.rand(1, 3, *input_size, generator=g)
    model.eval()
    times = []
    with torch.inference_mode():
        for i in range(warmup + iters):
            t0 = time.perf_counter()
            out = model(image)
            final = out.predictions[-1]
            postprocess(final.class_logits[0], final.mask_logits[0], out.e3_hw, tuple(input_size))
            dt = (time.perf_counter() - t0) * 1000
            if i >= warmup:
                times.append(dt)
    mean = statistics.fmean(times)
    return {
        "mean_ms": mean,
        "median_ms": statistics.median(times),
        "p95_ms": float(np.percentile(times, 95)),
        "fps": 1000.0 / mean,
        "iters": iters,
        "input_size": list(input_size),
        "config_hash": config_hash,
    }
