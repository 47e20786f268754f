"""Grounding metrics: pointing game, top-k point extraction, multi-object
coverage against ground-truth boxes, and whole-test-set reports."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import jsonschema
import numpy as np

from .captions import scene_phrases, scene_seed
from .localization import localize_batch
from .scenes import compose

MODES = ("single_phrase", "composite")


def _in_box(row, col, box) -> bool:
    r0, c0, r1, c1 = box
    return r0 <= row <= r1 and c0 <= col <= c1


def _check_box(box, P):
    r0, c0, r1, c1 = box
    if not (0 <= r0 <= r1 < P and 0 <= c0 <= c1 < P):
        raise ValueError(f"box {tuple(box)} not inside a {P}x{P} grid")


def _grid(m) -> np.ndarray:
    g = np.asarray(getattr(m, "grid", m), dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ValueError(f"expected a square map, got shape {g.shape}")
    return g


def argmax_cell(m) -> tuple[int, int]:
    """Peak cell; ties go to the first cell in row-major order."""
    g = _grid(m)
    flat = int(np.argmax(g))  # numpy returns the first maximal index
    return divmod(flat, g.shape[1])


def pointing_game(m, gt_box) -> dict:
    """Hit iff the peak cell lies inside the inclusive ``(r0, c0, r1, c1)`` box."""
    g = _grid(m)
    _check_box(gt_box, g.shape[0])
    r, c = argmax_cell(g)
    return {"hit": _in_box(r, c, gt_box), "peak": (r, c)}


@dataclass
class PointPrediction:
    points: list  # (row, col), descending value, ties by (row, col)
    source: str = ""


def top_k_points(m, k: int = 4, source: str = "") -> PointPrediction:
    g = _grid(m)
    P = g.shape[0]
    if not 1 <= k <= P * P:
        raise ValueError(f"k={k} must lie in [1, {P * P}]")
    flat = g.ravel()
    # stable sort on -value keeps row-major order among equal values
    order = np.argsort(-flat, kind="stable")[:k]
    return PointPrediction([divmod(int(i), P) for i in order], source)


def multi_object_metrics(points, gt_boxes, P: int | None = None) -> dict:
    """Fraction of boxes hit by at least one point, and covered share of the box union.

    The predicted region is the union of the hit boxes, so its IoU with the
    union of all boxes equals the covered fraction of that union.
    """
    pts = points.points if isinstance(points, PointPrediction) else list(points)
    boxes = [tuple(b) for b in gt_boxes]
    if not boxes:
        raise ValueError("multi_object_metrics needs at least one ground-truth box")
    hit = [any(_in_box(r, c, b) for r, c in pts) for b in boxes]

    def cells(b):
        r0, c0, r1, c1 = b
        return {(r, c) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)}

    gt = set().union(*(cells(b) for b in boxes))
    pred = set().union(*(cells(b) for b, h in zip(boxes, hit) if h)) if any(hit) else set()
    return {"hit_rate": sum(hit) / len(boxes), "ciou_proxy": len(pred & gt) / len(pred | gt)}


# ---------------------------------------------------------------------------
# reports

REPORT_SCHEMA = {
    "type": "object",
    "required": ["mode", "seed", "n_samples", "pointing_accuracy", "multi_object_hit_rate", "ciou_proxy"],
    "properties": {
        "mode": {"enum": list(MODES)},
        "seed": {"type": "integer"},
        "n_samples": {"type": "integer", "minimum": 0},
        "pointing_accuracy": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "multi_object_hit_rate": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "ciou_proxy": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
    },
    "additionalProperties": False,
}


@dataclass
class EvalReport:
    mode: str
    seed: int
    n_samples: int
    pointing_accuracy: float | None
    multi_object_hit_rate: float | None
    ciou_proxy: float | None
    records: list = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("records")
        return d

    def write(self, report_path, records_path=None) -> None:
        summary = self.summary()
        validate_report(summary)
        with open(report_path, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if records_path is not None:
            with open(records_path, "w") as fh:
                for rec in self.records:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")


def validate_report(summary: dict) -> None:
    jsonschema.validate(summary, REPORT_SCHEMA)


def _subject_boxes(scene):
    return {o.noun: o.box for o in scene.objects}


def single_phrase_samples(scenes, vocab):
    """(scene, phrase, box) for every distinct phrase in every scene."""
    out = []
    for s in scenes:
        boxes = _subject_boxes(s)
        for rec in scene_phrases(s.captions, vocab):
            out.append((s, rec.text, boxes[rec.subject]))
    return out


def composite_samples(scenes, vocab, seed: int = 0):
    """One composite per scene from two distinct-subject phrases, drawn with a per-scene seed."""
    out = []
    for s in scenes:
        boxes = _subject_boxes(s)
        phrases = scene_phrases(s.captions, vocab)
        rng = np.random.default_rng(scene_seed(seed, s.scene_id))
        i = int(rng.integers(0, len(phrases)))
        others = [p for p in phrases if p.subject != phrases[i].subject]
        if not others:
            continue
        j = others[int(rng.integers(0, len(others)))]
        text = compose(phrases[i].text, j.text)
        out.append((s, text, [boxes[phrases[i].subject], boxes[j.subject]]))
    return out


def model_map_fn(model, vocab, settings=None, chunk: int = 64):
    """Map function ``(scenes, phrases) -> [n, P, P]`` backed by GradCAM localization."""
    kw = {}
    if settings is not None:
        kw = dict(layer=settings.layer, head=settings.head, include_cls=settings.include_cls,
                  literal_gradient=settings.literal_gradient)

    def fn(scenes, phrases):
        out = []
        for a in range(0, len(phrases), chunk):
            imgs = np.stack([s.image for s in scenes[a:a + chunk]])
            out.append(localize_batch(model, vocab, imgs, phrases[a:a + chunk], **kw))
        return np.concatenate(out, axis=0)

    return fn


def evaluate(model, vocab, scenes, mode: str = "single_phrase", seed: int = 0, settings=None,
             map_fn=None) -> EvalReport:
    """Score localization maps on test scenes.

    ``map_fn(scenes, phrases)`` may replace the model (e.g. oracle maps);
    ``model`` is then ignored.
    """
    if mode not in MODES:
        raise ValueError(f"unknown eval mode {mode!r}; expected one of {MODES}")
    scenes = list(scenes)
    if not scenes:
        raise ValueError("evaluate needs a non-empty test set")
    map_fn = map_fn or model_map_fn(model, vocab, settings)

    if mode == "single_phrase":
        samples = single_phrase_samples(scenes, vocab)
    else:
        samples = composite_samples(scenes, vocab, seed)
    if not samples:
        return EvalReport(mode, seed, 0, None, None, None, [])
    maps = map_fn([s for s, _, _ in samples], [p for _, p, _ in samples])

    records = []
    for (s, phrase, box), m in zip(samples, maps):
        if mode == "single_phrase":
            r = pointing_game(m, box)
            records.append({"scene_id": s.scene_id, "phrase": phrase, "box": list(box),
                            "peak": list(r["peak"]), "hit": bool(r["hit"])})
        else:
            pts = top_k_points(m, 4)
            r = multi_object_metrics(pts, box)
            records.append({"scene_id": s.scene_id, "phrase": phrase, "boxes": [list(b) for b in box],
                            "points": [list(p) for p in pts.points], **r})
    n = len(records)
    if mode == "single_phrase":
        return EvalReport(mode, seed, n, sum(r["hit"] for r in records) / n, None, None, records)
    return EvalReport(mode, seed, n, None, sum(r["hit_rate"] for r in records) / n,
                      sum(r["ciou_proxy"] for r in records) / n, records)


def compare_reports(baseline: EvalReport, variant: EvalReport) -> dict:
    """Per-metric ``variant - baseline`` (None where either side lacks the metric)."""
    out = {}
    for k in ("pointing_accuracy", "multi_object_hit_rate", "ciou_proxy"):
        a, b = getattr(baseline, k), getattr(variant, k)
        out[k] = None if a is None or b is None else b - a
    return out
