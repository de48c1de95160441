"""AdamW, step schedule, training loop and checkpoint plumbing."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import checkpoint
from .config import RunConfig
from .evaluate import evaluate, predict
from .losses import targets_from_sample, total_loss
from .model import FastInst
from .scenes import SceneSample, augment, rng_for

log = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    weight_decay: float = 0.05
    backbone_lr_mult: float = 0.1
    decay_fractions: tuple[float, ...] = (0.9, 0.95)
    decay_factor: float = 0.1
    batch_size: int = 4
    total_iters: int = 5000
    seed: int = 0

    def __post_init__(self):
        fr = list(self.decay_fractions)
        if any(not 0 < f <= 1 for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
            raise ValueError("decay_fractions must be strictly increasing in (0, 1]")

    @classmethod
    def from_run_config(cls, rc: RunConfig) -> "TrainConfig":
        t = rc.tree["train"]
        return cls(t["base_lr"], t["weight_decay"], t["backbone_lr_mult"], tuple(t["decay_fractions"]),
                   t["decay_factor"], t["batch_size"], t["total_iters"], t["seed"])


def lr_at(it: int, cfg: TrainConfig) -> tuple[float, float]:
    """Piecewise-constant schedule: multiply by ``decay_factor`` at each decay fraction."""
    if not 0 <= it < cfg.total_iters:
        raise ValueError(f"iteration {it} outside [0, {cfg.total_iters})")
    frac = it / cfg.total_iters
    lr = cfg.base_lr * cfg.decay_factor ** sum(frac >= f for f in cfg.decay_fractions)
    return lr, lr * cfg.backbone_lr_mult


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamWState,
               lr: dict[str, float] | float, weight_decay: float,
               betas=BETAS, eps: float = ADAM_EPS) -> None:
    """One decoupled-weight-decay Adam update, in place.

    theta <- theta - lr*wd*theta - lr * m_hat / (sqrt(v_hat) + eps)
    """
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}; step rejected")
    state.step += 1
    b1, b2 = betas
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m = state.exp_avg.setdefault(name, torch.zeros_like(p))
            v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            rate = lr[name] if isinstance(lr, dict) else lr
            update = (m / c1) / ((v / c2).sqrt() + eps)
            p.add_(p * (-rate * weight_decay) - rate * update)


# -- checkpoints -----------------------------------------------------------

def state_tensors(model: FastInst, opt: Optional[AdamWState] = None) -> dict[str, np.ndarray]:
    out = {name: p.detach().cpu().numpy() for name, p in model.named_parameters()}
    if opt is not None:
        for name, t in opt.exp_avg.items():
            out[f"opt/exp_avg/{name}"] = t.cpu().numpy()
        for name, t in opt.exp_avg_sq.items():
            out[f"opt/exp_avg_sq/{name}"] = t.cpu().numpy()
        out["opt/step"] = np.array(float(opt.step))
    return out


def save_checkpoint(path, model: FastInst, opt: Optional[AdamWState], rc: RunConfig, extra: Optional[dict] = None):
    config = {"run": rc.to_dict()}
    if extra:
        config.update(extra)
    return checkpoint.save(path, state_tensors(model, opt), config)


def load_checkpoint(path) -> tuple[FastInst, AdamWState, RunConfig, dict]:
    tensors, config = checkpoint.load(path)
    rc = RunConfig(config["run"])
    model = FastInst(rc.model_config())
    params = dict(model.named_parameters())
    opt = AdamWState()
    with torch.no_grad():
        for name, arr in tensors.items():
            if name.startswith("opt/"):
                _, kind, *rest = name.split("/")
                if kind == "step":
                    opt.step = int(arr)
                else:
                    getattr(opt, kind)["/".join(rest)] = torch.from_numpy(arr.copy())
            elif name in params:
                params[name].copy_(torch.from_numpy(arr))
            else:
                raise checkpoint.CheckpointError(f"unexpected tensor {name}")
    return model, opt, rc, config


# -- training loop ---------------------------------------------------------

class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Optional[Path]):
        super().__init__(f"{message} (last good checkpoint: {last_checkpoint})")
        self.last_checkpoint = last_checkpoint


def batch_indices(it: int, n: int, batch_size: int, seed: int) -> list[int]:
    """Batch composition as a pure function of (seed, iteration): epoch-wise permutations."""
    out = []
    for slot in range(batch_size):
        pos = it * batch_size + slot
        epoch, k = divmod(pos, n)
        out.append(int(rng_for(seed, "order", epoch).permutation(n)[k]))
    return out


def make_batch(samples: Sequence[SceneSample], idx: Sequence[int], it: int, rc: RunConfig, use_augment: bool):
    bs = len(idx)
    seed = rc.get("train.seed")
    chosen = []
    for slot, i in enumerate(idx):
        s = samples[i]
        if use_augment:
            s = augment(s, rng_for(seed, "augment", it * bs + slot), rc.augment_config())
        chosen.append(s)
    images = torch.from_numpy(np.stack([s.image for s in chosen]))
    return images, chosen


def gt_lists(samples: Sequence[SceneSample]):
    return [[(t.class_id, t.mask) for t in s.instances] for s in samples]


@dataclass
class TrainResult:
    model: FastInst
    records: list[dict]
    checkpoints: list[Path]
    final_checkpoint: Optional[Path]


def train_loop(samples: Sequence[SceneSample], rc: RunConfig, out_dir=None,
               eval_samples: Optional[Sequence[SceneSample]] = None, progress=None) -> TrainResult:
    """Train from scratch. Writes ``metrics.jsonl`` and checkpoints when ``out_dir`` is given."""
    cfg = TrainConfig.from_run_config(rc)
    torch.manual_seed(cfg.seed)
    model = FastInst(rc.model_config())
    model.train()
    weights, switches = rc.loss_weights(), rc.loss_switches()
    source = rc.get("query.source_level")
    num_classes = rc.get("data.num_classes")
    use_augment = rc.get("data.augment")
    params = dict(model.named_parameters())
    opt = AdamWState()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(rc.to_dict(), indent=1, sort_keys=True))
        metrics = (out / "metrics.jsonl").open("w")
    records, ckpts = [], []
    last_good = None
    ckpt_every = rc.get("train.checkpoint_every")
    eval_every = rc.get("train.eval_every")
    try:
        for it in range(cfg.total_iters):
            lr, lr_bb = lr_at(it, cfg)
            idx = batch_indices(it, len(samples), cfg.batch_size, cfg.seed)
            images, chosen = make_batch(samples, idx, it, rc, use_augment)
            targets = [targets_from_sample(s, source, num_classes) for s in chosen]
            model.zero_grad(set_to_none=True)
            breakdown = total_loss(model, images, targets, weights, switches)
            if not math.isfinite(breakdown.components["loss_total"]):
                raise TrainingAborted(f"non-finite loss at iteration {it}", last_good)
            breakdown.total.backward()
            rates = {n: (lr_bb if n.startswith("backbone.") else lr) for n in params}
            grads = {n: p.grad for n, p in params.items()}
            try:
                adamw_step(params, grads, opt, rates, cfg.weight_decay)
            except FloatingPointError as exc:
                raise TrainingAborted(str(exc), last_good) from exc
            record = {"iter": it, "lr": lr, "lr_backbone": lr_bb, **breakdown.components}
            done = it + 1
            if eval_every and (done % eval_every == 0 or done == cfg.total_iters):
                record.update(evaluate_model(model, eval_samples or samples))
                model.train()
            records.append(record)
            if out is not None:
                metrics.write(json.dumps(record, sort_keys=True) + "\n")
                if ckpt_every and done % ckpt_every == 0 and done != cfg.total_iters:
                    last_good = save_checkpoint(out / f"ckpt_{done:06d}.finst", model, opt, rc, {"iter": done})
                    ckpts.append(last_good)
            if progress is not None:
                progress(record)
        final = None
        if out is not None:
            final = save_checkpoint(out / "final.finst", model, opt, rc, {"iter": cfg.total_iters})
            ckpts.append(final)
    finally:
        if out is not None:
            metrics.close()
    return TrainResult(model, records, ckpts, final)


def evaluate_model(model: FastInst, samples: Sequence[SceneSample], batch_size: int = 8) -> dict:
    dets = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        dets.extend(predict(model, torch.from_numpy(np.stack([s.image for s in chunk]))))
    size = max(samples[0].size)
    return evaluate(dets, gt_lists(samples), image_size=size)
