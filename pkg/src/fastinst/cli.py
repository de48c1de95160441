"""Command-line entry point.

Exit codes: 0 success, 1 run failure (failed check, aborted training, bad
input data), 2 malformed configuration or arguments, 3 missing checkpoint.

Every subcommand accepts ``--config file.json``, ``--seed N`` and dotted
overrides such as ``--decoder.d 3`` (``--key=value`` also works). Precedence:
built-in defaults < checkpoint config < config file < flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import plotting
from .bench import benchmark_latency
from .config import ConfigError, RunConfig, parse_value
from .evaluate import Detection, evaluate, predict
from .losses import LEVEL_STRIDES
from .model import FastInst
from .scenes import (directory_digest, generate_dataset, load_dataset, quantize, rle_decode, rle_encode,
                     save_dataset, write_pgm, write_ppm)
from .selftest import format_report, run_gradcheck, run_selftest
from .train import TrainingAborted, gt_lists, load_checkpoint, train_loop

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NO_CHECKPOINT = 0, 1, 2, 3

SEED_KEY = {"gen-data": "data.seed", "train": "train.seed"}
PALETTE = np.array([[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
                    [145, 30, 180], [70, 240, 240], [240, 50, 230]], dtype=np.float64) / 255.0
METRIC_KEYS = ("AP", "AP50", "AP75", "APs", "APm", "APl")

log = logging.getLogger("fastinst")


class UsageError(Exception):
    """Bad flags; reported with exit code 2."""


def _split_overrides(extra: list[str]) -> list[tuple[str, object]]:
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigError(key, "missing value")
            i += 1
            raw = extra[i]
        out.append((key, parse_value(raw)))
        i += 1
    return out


def build_config(args, extra: list[str], base: Optional[dict] = None) -> RunConfig:
    rc = RunConfig(base)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(str(path), "config file not found")
        rc.merge_tree(RunConfig.from_file(path).tree)
    if args.seed is not None:
        rc.set(SEED_KEY.get(args.command, "data.seed"), args.seed)
    rc.update(_split_overrides(extra))
    return rc


def _threads() -> Optional[int]:
    raw = os.environ.get("FASTINST_THREADS")
    return int(raw) if raw else None


def _samples(args, rc: RunConfig):
    """Dataset from --data, or regenerated from the data section (8-bit quantized like a saved set)."""
    if getattr(args, "data", None):
        path = Path(args.data)
        if not (path / "manifest.json").is_file() and not path.is_file():
            raise FileNotFoundError(f"no dataset at {path}")
        return load_dataset(path)[0]
    return [quantize(s) for s in generate_dataset(rc.dataset_spec(), _threads())]


def _load_model(args, extra):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(str(ckpt))
    model, _, ckpt_rc, _ = load_checkpoint(ckpt)
    rc = build_config(args, extra, ckpt_rc.tree)
    if rc.model_config() != model.cfg:
        raise ConfigError("decoder/pixel/query", "overrides may not change the architecture of a trained checkpoint")
    model.eval()
    return model, rc


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))


def _table(rows: list[tuple[str, str]]) -> str:
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}} | {v}" for k, v in rows)


def _fmt(v: float) -> str:
    return "   n/a" if v < 0 else f"{v:.3f}"


# -- detections on disk ----------------------------------------------------

def detections_to_json(dets_per_image, image_ids) -> list[dict]:
    out = []
    for image_id, dets in zip(image_ids, dets_per_image):
        out.append({"image_id": image_id, "detections": [
            {"class_id": d.class_id, "score": d.score, "query": d.query,
             "rle": {"size": list(d.mask.shape), "counts": rle_encode(d.mask)}} for d in dets]})
    return out


def detections_from_json(payload, image_ids) -> list[list[Detection]]:
    entries = payload["predictions"] if isinstance(payload, dict) else payload
    by_id = {e["image_id"]: e["detections"] for e in entries}
    out = []
    for image_id in image_ids:
        dets = []
        for i, d in enumerate(by_id.get(image_id, [])):
            h, w = d["rle"]["size"]
            dets.append(Detection(int(d["class_id"]), float(d["score"]), rle_decode(d["rle"]["counts"], h, w),
                                  int(d.get("query", i))))
        out.append(dets)
    return out


def overlay(image: np.ndarray, dets: list[Detection], alpha: float = 0.5) -> np.ndarray:
    out = image.astype(np.float64).copy()
    for i, d in enumerate(reversed(dets)):  # highest score painted last
        color = PALETTE[(len(dets) - 1 - i) % len(PALETTE)]
        out[:, d.mask] = (1 - alpha) * out[:, d.mask] + alpha * color[:, None]
    return out


def dot_points(image: np.ndarray, points_xy: np.ndarray, radius: int = 1) -> np.ndarray:
    out = image.astype(np.float64).copy()
    h, w = out.shape[1:]
    for x, y in np.round(points_xy).astype(int):
        out[:, max(0, y - radius):min(h, y + radius + 1), max(0, x - radius):min(w, x + radius + 1)] = \
            np.array([1.0, 0.0, 0.0])[:, None, None]
    return out


# -- subcommands -----------------------------------------------------------

def cmd_gen_data(args, rc: RunConfig) -> int:
    out = _out_dir(args, "data")
    samples = generate_dataset(rc.dataset_spec(), _threads())
    save_dataset(samples, rc.dataset_spec(), out, {"config": rc.to_dict()})
    n_inst = sum(len(s.instances) for s in samples)
    print(_table([("images", str(len(samples))), ("instances", str(n_inst)),
                  ("digest", directory_digest(out)), ("out", str(out))]))
    return EXIT_OK


def cmd_train(args, rc: RunConfig) -> int:
    out = _out_dir(args, "run")
    samples = _samples(args, rc)
    total = rc.get("train.total_iters")
    every = max(1, total // 20)

    def progress(rec):
        if rec["iter"] % every == 0 or rec["iter"] == total - 1:
            parts = " ".join(f"{k}={v:.4g}" for k, v in sorted(rec.items()) if k.startswith(("loss", "cost")))
            print(f"iter {rec['iter']:>6d} lr={rec['lr']:.2e} {parts}", flush=True)

    try:
        result = train_loop(samples, rc, out, progress=progress)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL
    plotting.loss_curves(result.records, out / "loss_curves.png", meta={"config": rc.to_dict()})
    first = result.records[min(100, len(result.records) - 1)]["loss_total"]
    last = result.records[-1]["loss_total"]
    print(_table([("final_loss", f"{last:.6g}"), ("iter100_loss", f"{first:.6g}"),
                  ("checkpoint", str(result.final_checkpoint)), ("config_digest", rc.digest())]))
    return EXIT_OK


def cmd_eval(args, extra) -> int:
    if args.checkpoint:
        model, rc = _load_model(args, extra)
    else:
        model, rc = None, build_config(args, extra)
    samples = _samples(args, rc)
    ids = [s.image_id for s in samples]
    if args.detections:
        dets = detections_from_json(json.loads(Path(args.detections).read_text()), ids)
    elif model is not None:
        dets = []
        for i in range(0, len(samples), 8):
            chunk = samples[i:i + 8]
            dets.extend(predict(model, torch.from_numpy(np.stack([s.image for s in chunk]))))
    else:
        raise UsageError("eval needs --checkpoint or --detections")
    max_dets = rc.get("eval.max_dets")
    res = evaluate(dets, gt_lists(samples), image_size=max(samples[0].size), max_dets=max_dets, return_curves=True)
    curves = res.pop("curves")
    ar_key = f"AR{max_dets}"
    print(_table([(k, _fmt(res[k])) for k in (*METRIC_KEYS, ar_key)]))
    out = _out_dir(args, "eval")
    _dump(out / "eval.json", {"metrics": res, "config": rc.to_dict()})
    if curves:
        plotting.pr_curves(curves, out / "pr_curves.png", meta={"config": rc.to_dict()})
    return EXIT_OK


def cmd_predict(args, extra) -> int:
    model, rc = _load_model(args, extra)
    samples = _samples(args, rc)
    out = _out_dir(args, "predictions")
    all_dets = []
    for s in samples:
        dets = predict(model, torch.from_numpy(s.image[None]))[0]
        dets = [d for d in dets if d.score >= args.score_threshold]
        all_dets.append(dets)
        write_ppm(out / f"{s.image_id:06d}_overlay.ppm", overlay(s.image, dets))
    ids = [s.image_id for s in samples]
    _dump(out / "detections.json", {"predictions": detections_to_json(all_dets, ids), "config": rc.to_dict()})
    print(_table([("images", str(len(samples))), ("detections", str(sum(map(len, all_dets)))), ("out", str(out))]))
    return EXIT_OK


def _pick(args, samples):
    matches = [s for s in samples if s.image_id == args.index]
    if not matches:
        raise UsageError(f"image {args.index} not in dataset")
    return matches[0]


def cmd_viz_queries(args, extra) -> int:
    model, rc = _load_model(args, extra)
    sample = _pick(args, _samples(args, rc))
    with torch.no_grad():
        res = model(torch.from_numpy(sample.image[None]))
    stride = LEVEL_STRIDES[model.cfg.source_level]
    _, sw = res.source_hw
    idx = res.query_indices[0].numpy()
    pts = np.stack([(idx % sw + 0.5) * stride - 0.5, (idx // sw + 0.5) * stride - 0.5], axis=1)
    out = _out_dir(args, "viz")
    stem = f"{sample.image_id:06d}_queries"
    write_ppm(out / f"{stem}.ppm", dot_points(sample.image, pts))
    plotting.query_points(sample.image, pts, out / f"{stem}.png", f"{len(pts)} IA-guided queries",
                          meta={"config": rc.to_dict()})
    _dump(out / f"{stem}.json", {"points_xy": pts.tolist(), "indices": idx.tolist(), "config": rc.to_dict()})
    print(_table([("queries", str(len(pts))), ("out", str(out / f"{stem}.ppm"))]))
    return EXIT_OK


def cmd_viz_aux_attn(args, extra) -> int:
    model, rc = _load_model(args, extra)
    if model.cfg.layers < 1 or model.cfg.nb < 1:
        raise UsageError("auxiliary attention needs at least one decoder layer and one auxiliary query")
    sample = _pick(args, _samples(args, rc))
    with torch.no_grad():
        res = model(torch.from_numpy(sample.image[None]), record_attention=True)
    weights = model.decoder.layers[-1].last_query_weights[0].mean(0)  # heads averaged: (Na+Nb, L)
    aux = weights[model.cfg.na:].reshape(-1, 1, *res.e3_hw)
    h, w = sample.size
    maps = torch.nn.functional.interpolate(aux, size=(h, w), mode="bilinear", align_corners=False)[:, 0].numpy()
    out = _out_dir(args, "viz")
    for i, m in enumerate(maps):
        write_pgm(out / f"{sample.image_id:06d}_aux{i:02d}.pgm", m / max(m.max(), 1e-12))
    plotting.attention_grid(sample.image, maps, out / f"{sample.image_id:06d}_aux_attn.png",
                            meta={"config": rc.to_dict()})
    _dump(out / f"{sample.image_id:06d}_aux_attn.json", {"aux_queries": len(maps), "config": rc.to_dict()})
    print(_table([("aux_queries", str(len(maps))), ("out", str(out))]))
    return EXIT_OK


def cmd_bench(args, extra) -> int:
    if args.checkpoint:
        model, rc = _load_model(args, extra)
        variants = [("checkpoint", rc, model)]
    else:
        rc = build_config(args, extra)
        variants = []
        values = [parse_value(v) for v in args.sweep_values.split(",")] if args.sweep else [None]
        for v in values:
            vrc = RunConfig(rc.to_dict())
            if args.sweep:
                vrc.set(args.sweep, v)
            torch.manual_seed(vrc.get("train.seed"))
            variants.append((f"{args.sweep}={v}" if args.sweep else "model", vrc, FastInst(vrc.model_config())))
    rows = []
    for label, vrc, model in variants:
        b = vrc.tree["bench"]
        stats = benchmark_latency(model, tuple(b["input_size"]), b["warmup"], b["iters"],
                                  seed=vrc.get("data.seed"), config_hash=vrc.digest())
        rows.append({"label": label, **stats})
    header = "label | mean_ms | median_ms | p95_ms | fps | iters | config_hash"
    print(header)
    for r in rows:
        print(f"{r['label']} | {r['mean_ms']:.3f} | {r['median_ms']:.3f} | {r['p95_ms']:.3f} | {r['fps']:.2f} "
              f"| {r['iters']} | {r['config_hash']}")
    if args.out:
        out = _out_dir(args, "bench")
        _dump(out / "bench.json", {"rows": rows, "config": rc.to_dict()})
        plotting.latency_bars(rows, out / "latency.png", meta={"config": rc.to_dict()})
    return EXIT_OK


def cmd_gradcheck(args, rc: RunConfig) -> int:
    reports = run_gradcheck(args.coords, seed=args.seed or 0)
    for line in format_report(reports):
        print(line)
    ok = all(r.passed for r in reports.values())
    if args.out:
        out = _out_dir(args, "gradcheck")
        _dump(out / "gradcheck.json", {"groups": {g: {"max_relative_error": r.max_relative_error,
                                                      "checked": r.checked, "passed": r.passed}
                                                  for g, r in reports.items()}, "config": rc.to_dict()})
    print("gradcheck " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_selftest(args, rc: RunConfig) -> int:
    results = run_selftest(seed=args.seed or 0)
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<17} {r.seconds:6.2f}s  {r.detail}")
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} suites passed")
    return EXIT_OK if ok else EXIT_FAIL


# -- argument parsing ------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastinst", description=__doc__.splitlines()[0],
                                     epilog="Exit codes: 0 ok, 1 failure, 2 bad config, 3 missing checkpoint.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, allow_abbrev=False)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="seed (data.seed, or train.seed for train)")
        p.add_argument("--out", help="output directory")
        return p

    add("gen-data", "write a synthetic dataset directory")
    p = add("train", "train from scratch")
    p.add_argument("--data", help="dataset directory (default: regenerate from config)")
    p = add("eval", "print the mask AP table")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--detections", help="detections JSON as written by predict")
    p = add("predict", "write mask overlays and detection JSON")
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--score-threshold", type=float, default=0.0)
    for name, text in (("viz-queries", "dot the selected query locations onto an image"),
                       ("viz-aux-attn", "auxiliary-query attention heatmaps of the last layer")):
        p = add(name, text)
        p.add_argument("--data")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--index", type=int, default=0, help="image id")
    p = add("bench", "batch-1 inference latency")
    p.add_argument("--checkpoint")
    p.add_argument("--sweep", help="dotted key to vary, e.g. decoder.d")
    p.add_argument("--sweep-values", default="", help="comma-separated values for --sweep")
    p = add("gradcheck", "finite-difference check of the full objective")
    p.add_argument("--coords", type=int, default=200, help="coordinates per parameter group")
    add("selftest", "run the oracle suites")
    return parser


HANDLERS_WITH_CONFIG = {"gen-data": cmd_gen_data, "train": cmd_train, "gradcheck": cmd_gradcheck,
                        "selftest": cmd_selftest}
HANDLERS_WITH_EXTRA = {"eval": cmd_eval, "predict": cmd_predict, "viz-queries": cmd_viz_queries,
                       "viz-aux-attn": cmd_viz_aux_attn, "bench": cmd_bench}


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    threads = _threads()
    if threads:
        torch.set_num_threads(threads)
    parser = make_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command in HANDLERS_WITH_CONFIG:
            return HANDLERS_WITH_CONFIG[args.command](args, build_config(args, extra))
        if args.command == "bench" and args.sweep and not args.sweep_values:
            raise UsageError("--sweep needs --sweep-values")
        return HANDLERS_WITH_EXTRA[args.command](args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        if getattr(args, "checkpoint", None) and not Path(args.checkpoint).is_file():
            print(f"checkpoint not found: {args.checkpoint}", file=sys.stderr)
            return EXIT_NO_CHECKPOINT
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
