"""Synthetic grounded scenes: patch-grid feature images with boxed objects and captions."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import load_tensor, save_tensor

NOUNS = ("cat", "dog", "car", "ball", "cup", "lamp", "bird", "tree")
COLORS = ("red", "blue", "green", "yellow", "white", "black")
SIZES = ("small", "large")
DETERMINERS = ("the", "a")
CONNECTIVES = ("and", "with", "near", "beside")

# box side length in patches
SIZE_EXTENT = {"small": 1, "large": 2}


class PlacementError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    noun: str
    color: str
    size: str
    box: tuple[int, int, int, int]  # row0, col0, row1, col1 inclusive

    def cells(self):
        r0, c0, r1, c1 = self.box
        return [(r, c) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)]

    def contains(self, row, col) -> bool:
        r0, c0, r1, c1 = self.box
        return r0 <= row <= r1 and c0 <= col <= c1

    def to_json(self):
        return {"noun": self.noun, "color": self.color, "size": self.size, "box": list(self.box)}

    @classmethod
    def from_json(cls, d):
        return cls(d["noun"], d["color"], d["size"], tuple(int(v) for v in d["box"]))


@dataclass
class Scene:
    scene_id: str
    P: int
    image: np.ndarray  # [P, P, D_pix]
    objects: list[ObjectSpec]
    captions: list[str]

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.scene_id == other.scene_id and self.P == other.P
                and self.objects == other.objects and self.captions == other.captions
                and self.image.shape == other.image.shape
                and np.array_equal(self.image, other.image))


@dataclass
class SceneConfig:
    P: int = 8
    n_objects: tuple[int, int] = (2, 2)
    d_pix: int = 16
    noise: float = 0.05
    nouns: tuple[str, ...] = NOUNS
    colors: tuple[str, ...] = COLORS
    codebook_seed: int = 1234
    max_retries: int = 1000
    _codebook: dict = field(default=None, init=False, repr=False, compare=False)

    def codebook(self) -> dict[str, np.ndarray]:
        """Fixed unit vectors per attribute value plus a background vector."""
        if self._codebook is None:
            rng = np.random.default_rng(self.codebook_seed)
            names = ["<bg>"] + list(NOUNS) + list(COLORS) + list(SIZES)
            vecs = rng.standard_normal((len(names), self.d_pix))
            vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
            self._codebook = dict(zip(names, vecs))
        return self._codebook


def phrase_for(obj: ObjectSpec, template: int) -> str:
    if template == 0:
        return f"the {obj.color} {obj.noun}"
    return f"a {obj.size} {obj.color} {obj.noun}"


def compose(a: str, b: str) -> str:
    return f"{a} and {b}"


def _place(rng, P, extent, taken):
    for _ in range(64):
        r0 = int(rng.integers(0, P - extent + 1))
        c0 = int(rng.integers(0, P - extent + 1))
        cells = {(r, c) for r in range(r0, r0 + extent) for c in range(c0, c0 + extent)}
        if not cells & taken:
            return (r0, c0, r0 + extent - 1, c0 + extent - 1), cells
    return None, None


def generate_scene(seed, config: SceneConfig | None = None, scene_id: str | None = None) -> Scene:
    """Build one scene deterministically from ``seed`` (an int or a sequence of ints)."""
    cfg = config or SceneConfig()
    P = cfg.P
    lo, hi = cfg.n_objects
    if P < 4:
        raise ValueError(f"grid size must be >= 4, got {P}")
    if hi > (P // 2) ** 2 or lo < 1 or lo > hi:
        raise ValueError(f"bad object count range {cfg.n_objects} for P={P}")
    if hi > len(cfg.nouns):
        raise ValueError("more objects than distinct nouns")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(lo, hi + 1))
    nouns = rng.choice(len(cfg.nouns), size=n, replace=False)

    for _ in range(cfg.max_retries):
        taken: set = set()
        objects = []
        for k in nouns:
            size = SIZES[int(rng.integers(0, len(SIZES)))]
            color = cfg.colors[int(rng.integers(0, len(cfg.colors)))]
            box, cells = _place(rng, P, SIZE_EXTENT[size], taken)
            if box is None:
                break
            taken |= cells
            objects.append(ObjectSpec(cfg.nouns[int(k)], color, size, box))
        if len(objects) == n:
            break
    else:
        raise PlacementError(f"could not place {n} objects on a {P}x{P} grid")

    book = cfg.codebook()
    image = np.tile(book["<bg>"], (P, P, 1))
    for obj in objects:
        vec = book[obj.color] + book[obj.noun] + book[obj.size]
        for r, c in obj.cells():
            image[r, c] = vec
    image = image + cfg.noise * rng.standard_normal(image.shape)

    phrases = [phrase_for(obj, int(rng.integers(0, 2))) for obj in objects]
    full = phrases[0]
    for p in phrases[1:]:
        full = f"{full} {CONNECTIVES[int(rng.integers(0, len(CONNECTIVES)))]} {p}"
    captions = phrases + ([full] if n > 1 else [])
    if scene_id is None:
        scene_id = f"scene-{seed}" if isinstance(seed, (int, np.integer)) else "scene-" + "-".join(map(str, seed))
    return Scene(scene_id, P, image, objects, captions)


def generate_dataset(n: int, seed: int, config: SceneConfig | None = None, prefix: str = "s") -> list[Scene]:
    return [generate_scene([seed, i], config, scene_id=f"{prefix}{seed}-{i:05d}") for i in range(n)]


def full_caption(scene: Scene) -> str:
    """The caption that mentions every object (the last one for multi-object scenes)."""
    return scene.captions[-1]


def write_dataset(scenes, path) -> None:
    """Write scenes as JSONL with one HTEN image blob per scene next to it."""
    path = Path(path)
    blob_dir = path.parent / (path.stem + "_blobs")
    blob_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in scenes:
        rel = f"{blob_dir.name}/{s.scene_id}.hten"
        save_tensor(s.image, path.parent / rel)
        rec = {"scene_id": s.scene_id, "P": s.P, "image_blob": rel,
               "objects": [o.to_json() for o in s.objects], "captions": list(s.captions)}
        lines.append(json.dumps(rec))
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("".join(line + "\n" for line in lines))
    os.replace(tmp, path)


def read_dataset(path) -> list[Scene]:
    path = Path(path)
    scenes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid, P, rel = rec["scene_id"], int(rec["P"]), rec["image_blob"]
                objects = [ObjectSpec.from_json(o) for o in rec["objects"]]
                captions = [str(c) for c in rec["captions"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record ({exc})") from exc
            try:
                image = load_tensor(path.parent / rel)
            except (OSError, ValueError) as exc:
                raise DatasetError(f"scene {sid}: cannot read image blob {rel}: {exc}") from exc
            if image.ndim != 3 or image.shape[:2] != (P, P):
                raise DatasetError(f"scene {sid}: image shape {image.shape} does not match P={P}")
            scenes.append(Scene(sid, P, image, objects, captions))
    return scenes
