"""Dataset preparation, the training loop, evaluation runs and ablation presets."""
from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .captions import Vocab, pairs_for_scenes, read_pairs, write_pairs
from .config import RunConfig, with_seed
from .evaluation import evaluate
from .losses import AlphaSchedule, LossFlags, total_loss
from .model import HistModel
from .scenes import DatasetError, SceneConfig, generate_dataset, read_dataset, write_dataset


class NumericError(FloatingPointError):
    def __init__(self, step: int, component: str, value):
        super().__init__(f"non-finite {component} loss ({value}) at step {step}")
        self.step = step
        self.component = component


LOG_KEYS = ("itc", "itm", "mlm", "phrase", "subject", "composition", "exclusion", "total")

# the four ablation variants, in table order
VARIANTS = {
    "phrase-only": LossFlags(subject=False, composition=False, exclusion=False),
    "+subject": LossFlags(subject=True, composition=False, exclusion=False),
    "+composition": LossFlags(subject=False, composition=True, exclusion=False),
    "+both": LossFlags(subject=True, composition=True, exclusion=False),
}


# ---------------------------------------------------------------------------
# data


def scene_config(cfg: RunConfig) -> SceneConfig:
    return SceneConfig(P=cfg.model.P, n_objects=tuple(cfg.data.n_objects), d_pix=cfg.model.d_pix,
                       noise=cfg.data.noise)


def data_paths(data_dir) -> dict:
    d = Path(data_dir)
    return {"train": d / "train.jsonl", "test": d / "test.jsonl", "pairs": d / "pairs.jsonl",
            "vocab": d / "vocab.txt"}


def generate_data(cfg: RunConfig, log=print) -> dict:
    """Write train/test scenes, training pairs and the vocabulary; return counts."""
    paths = data_paths(cfg.data.dir)
    Path(cfg.data.dir).mkdir(parents=True, exist_ok=True)
    sc = scene_config(cfg)
    vocab = Vocab.default()
    train = generate_dataset(cfg.data.n_train, cfg.seeds.data, sc, prefix="train")
    test = generate_dataset(cfg.data.n_test, cfg.seeds.data + 1_000_003, sc, prefix="test")
    pairs = pairs_for_scenes(train, vocab, cfg.seeds.data)
    if not pairs:
        warnings.warn("no training pairs: no scene has two phrases with distinct subjects", stacklevel=2)
    write_dataset(train, paths["train"])
    write_dataset(test, paths["test"])
    write_pairs(pairs, paths["pairs"])
    vocab.save(paths["vocab"])
    counts = {"train_scenes": len(train), "test_scenes": len(test), "pairs": len(pairs)}
    log(json.dumps(counts))
    return counts


def load_data(data_dir, need_pairs=True):
    paths = data_paths(data_dir)
    for k in (("train", "pairs", "vocab") if need_pairs else ("vocab",)):
        if not paths[k].exists():
            raise DatasetError(f"missing dataset file {paths[k]} (run gen-data first)")
    vocab = Vocab.load(paths["vocab"])
    train = read_dataset(paths["train"]) if need_pairs else []
    pairs = read_pairs(paths["pairs"]) if need_pairs else []
    return vocab, train, pairs


def load_test(data_dir):
    p = data_paths(data_dir)["test"]
    if not p.exists():
        raise DatasetError(f"missing dataset file {p} (run gen-data first)")
    return read_dataset(p)


# ---------------------------------------------------------------------------
# optimisation


class SGD:
    """Plain SGD, optionally with heavy-ball momentum and L2 weight decay."""

    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            if self.momentum:
                v *= self.momentum
                v += g
                g = v
            p.data -= self.lr * g


def make_optimizer(cfg: RunConfig, model) -> SGD:
    o = cfg.optim
    return SGD(model.parameters(), o.lr, o.momentum if o.name == "sgd_momentum" else 0.0, o.weight_decay)


def _check_finite(step, bundle):
    for k in LOG_KEYS:
        v = getattr(bundle, k)
        if v is not None and not np.isfinite(v.data):
            raise NumericError(step, k, float(v.data))


@dataclass
class TrainResult:
    model: HistModel
    records: list
    checkpoint: Path | None


def train(cfg: RunConfig, vocab, scenes, pairs, out_dir=None, log=None) -> TrainResult:
    """Train from scratch; write per-step metrics, per-epoch and final checkpoints.

    ``metrics.jsonl`` holds only seed-determined values (bit-identical across
    reruns); wall-clock times go to ``timing.jsonl``.
    """
    if not pairs:
        raise DatasetError("no training pairs")
    model = HistModel(replace(cfg.model, vocab_size=len(vocab), seed=cfg.seeds.model))
    opt = make_optimizer(cfg, model)
    # separate streams: batch order is identical across loss variants
    order_rng = np.random.default_rng([cfg.seeds.train, 0])
    rng = np.random.default_rng([cfg.seeds.train, 1])
    scene_map = {s.scene_id: s for s in scenes}
    missing = {p.scene_id for p in pairs} - set(scene_map)
    if missing:
        raise DatasetError(f"pairs reference unknown scenes, e.g. {sorted(missing)[:3]}")
    B = cfg.batch_size
    steps_per_epoch = math.ceil(len(pairs) / B)
    schedule = AlphaSchedule(steps_per_epoch, cfg.schedule.epochs_to_one, cfg.schedule.inverted)

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = timing_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w")
        timing_fh = open(out / "timing.jsonl", "w")
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    records = []
    step = 0
    ckpt = None
    try:
        for epoch in range(cfg.epochs):
            order = order_rng.permutation(len(pairs))
            for a in range(0, len(order), B):
                t0 = time.perf_counter()
                alpha = schedule(step)
                batch = [pairs[i] for i in order[a:a + B]]
                with T.Tape() as tape:
                    bundle = total_loss(model, vocab, batch, scene_map, alpha, cfg.flags, cfg.loss, rng)
                _check_finite(step, bundle)
                T.backward(bundle.total, tape)
                opt.step()
                model.zero_grad()
                model.momentum_update(*bundle.extras["enqueue"])
                rec = {"step": step, "epoch": epoch, **bundle.scalars()}
                records.append(rec)
                if metrics_fh:
                    metrics_fh.write(json.dumps(rec) + "\n")
                    timing_fh.write(json.dumps({"step": step, "wall_time": time.perf_counter() - t0}) + "\n")
                if log:
                    log(rec)
                step += 1
            if out is not None:
                model.save(out / f"epoch{epoch}.hckp")
        if out is not None:
            ckpt = out / "model.hckp"
            model.save(ckpt)
    finally:
        if metrics_fh:
            metrics_fh.close()
            timing_fh.close()
    return TrainResult(model, records, ckpt)


def evaluate_both(model, vocab, test, cfg: RunConfig) -> dict:
    single = evaluate(model, vocab, test, "single_phrase", cfg.seeds.eval, cfg.loss)
    comp = evaluate(model, vocab, test, "composite", cfg.seeds.eval, cfg.loss)
    return {"pointing_accuracy": single.pointing_accuracy,
            "multi_object_hit_rate": comp.multi_object_hit_rate,
            "ciou_proxy": comp.ciou_proxy}


# ---------------------------------------------------------------------------
# ablation

METRICS = ("pointing_accuracy", "multi_object_hit_rate", "ciou_proxy")


def run_variant(cfg: RunConfig, flags: LossFlags, seed: int, out_dir=None, data=None) -> dict:
    """Generate (or reuse) the seed's data, train one variant, evaluate it.

    Besides the metrics, reports the median total loss of the first and last
    ten steps as a training-progress check.
    """
    c = replace(with_seed(cfg, seed), flags=flags)
    if data is None:
        sc = scene_config(c)
        vocab = Vocab.default()
        train_scenes = generate_dataset(c.data.n_train, seed, sc, prefix="train")
        test = generate_dataset(c.data.n_test, seed + 1_000_003, sc, prefix="test")
        data = (vocab, train_scenes, pairs_for_scenes(train_scenes, vocab, seed), test)
    vocab, train_scenes, pairs, test = data
    res = train(c, vocab, train_scenes, pairs, out_dir)
    out = evaluate_both(res.model, vocab, test, c)
    totals = [r["total"] for r in res.records]
    out["total_first10"] = float(np.median(totals[:10]))
    out["total_last10"] = float(np.median(totals[-10:]))
    return out


def ablate(cfg: RunConfig, seeds, out_dir=None, variants=None, log=print) -> dict:
    """Train every variant for every seed (identical seeds across variants).

    Returns ``{"per_seed": {variant: [metrics...]}, "median": {variant: metrics}}``.
    """
    variants = variants or VARIANTS
    per_seed = {v: [] for v in variants}
    for s in seeds:
        c = with_seed(cfg, s)
        sc = scene_config(c)
        vocab = Vocab.default()
        train_scenes = generate_dataset(c.data.n_train, s, sc, prefix="train")
        test = generate_dataset(c.data.n_test, s + 1_000_003, sc, prefix="test")
        data = (vocab, train_scenes, pairs_for_scenes(train_scenes, vocab, s), test)
        for name, flags in variants.items():
            sub = None if out_dir is None else Path(out_dir) / f"{name}-seed{s}"
            m = run_variant(cfg, flags, s, sub, data)
            per_seed[name].append(m)
            if log:
                log(json.dumps({"variant": name, "seed": s, **m}))
    median = {v: {k: float(np.median([r[k] for r in rows])) for k in METRICS}
              for v, rows in per_seed.items()}
    result = {"seeds": list(seeds), "per_seed": per_seed, "median": median}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.json").write_text(json.dumps(result, indent=2) + "\n")
        (Path(out_dir) / "ablation.md").write_text(format_table(median) + "\n")
    return result


def format_table(median: dict) -> str:
    lines = ["| variant | pointing_accuracy | multi_object_hit_rate | ciou_proxy |",
             "|---|---|---|---|"]
    for v, m in median.items():
        lines.append(f"| {v} | " + " | ".join(f"{m[k]:.4f}" for k in METRICS) + " |")
    return "\n".join(lines)


def monotonic_violations(median: dict, key: str = "multi_object_hit_rate") -> list[str]:
    """Violated orderings among phrase-only <= +subject and phrase-only <= +composition <= +both."""
    out = []
    for lo, hi in (("phrase-only", "+subject"), ("phrase-only", "+composition"), ("+composition", "+both")):
        if median[lo][key] > median[hi][key]:
            out.append(f"{lo} ({median[lo][key]:.4f}) > {hi} ({median[hi][key]:.4f}) on {key}")
    return out
