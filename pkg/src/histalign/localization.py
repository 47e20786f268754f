"""Phrase localization maps from cross-attention and its ITM gradient.

A map is built by pooling one layer's text-to-image attention over heads
(mean or one head) and over the phrase's real token rows, pooling the
attention gradient the same way, multiplying the two and applying ReLU.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .captions import tokenize, stack_tokens
from .tensor import Tensor


@dataclass
class LocalizationMap:
    grid: np.ndarray  # [P, P], nonnegative
    phrase: str = ""
    layer: int = 0
    head: object = "mean"
    scene_id: str = ""

    @property
    def P(self):
        return self.grid.shape[0]


def token_weights(K, max_tokens: int, include_cls: bool = False) -> np.ndarray:
    """Row weights ``[N, L]`` that average over each sequence's real token rows.

    Rows are [CLS] plus real tokens; [CLS] is left out unless ``include_cls``
    or the sequence has no other token.
    """
    K = np.atleast_1d(np.asarray(K, dtype=np.int64))
    w = np.zeros((K.shape[0], max_tokens))
    for n, k in enumerate(K):
        if include_cls or k == 1:
            w[n, :k] = 1.0 / k
        else:
            w[n, 1:k] = 1.0 / (k - 1)
    return w


def _check_head(head, n_heads):
    if head == "mean":
        return
    if not isinstance(head, (int, np.integer)) or not 0 <= head < n_heads:
        raise IndexError(f"head {head!r} out of range for {n_heads} heads")


def phrase_attention(attn_stack, layer: int, head="mean", K: int | None = None,
                     include_cls: bool = False) -> np.ndarray:
    """Pool one sample's attention stack into a ``[P, P]`` map.

    ``attn_stack`` is a list over layers of ``[H, L, P*P]`` arrays.
    """
    if not 0 <= layer < len(attn_stack):
        raise IndexError(f"layer {layer} out of range for {len(attn_stack)} layers")
    a = np.asarray(attn_stack[layer].data if isinstance(attn_stack[layer], Tensor) else attn_stack[layer])
    H, L, PP = a.shape
    _check_head(head, H)
    a = a.mean(axis=0) if head == "mean" else a[head]
    w = token_weights(L if K is None else K, L, include_cls)[0]
    P = int(round(np.sqrt(PP)))
    return (w @ a).reshape(P, P)


def pool_attention(attn: Tensor, K, head="mean", include_cls: bool = False) -> Tensor:
    """Differentiable batched pooling: ``[N,H,L,P*P]`` -> ``[N,P*P]``."""
    N, H, L, PP = attn.shape
    _check_head(head, H)
    a = T.mean(attn, axis=1) if head == "mean" else attn[:, head]
    w = Tensor(token_weights(K, L, include_cls)[:, None, :])
    return T.reshape(T.matmul(w, a), (N, PP))


def pool_gradient(attn_grad: np.ndarray, K, head="mean", include_cls: bool = False) -> np.ndarray:
    N, H, L, PP = attn_grad.shape
    g = attn_grad.mean(axis=1) if head == "mean" else attn_grad[:, head]
    w = token_weights(K, L, include_cls)
    return (w[:, None, :] @ g)[:, 0, :]


def gradcam(attn, attn_grad) -> np.ndarray:
    """``ReLU(attn * attn_grad)`` on plain arrays of equal shape."""
    attn = np.asarray(attn, dtype=np.float64)
    attn_grad = np.asarray(attn_grad, dtype=np.float64)
    if attn.shape != attn_grad.shape:
        raise T.ShapeError(f"gradcam shapes differ: {attn.shape} vs {attn_grad.shape}")
    return np.maximum(attn * attn_grad, 0.0)


def gradcam_tensor(pooled_attn: Tensor, pooled_grad: np.ndarray) -> Tensor:
    """GradCAM that backpropagates through the attention only (gradient is a constant)."""
    return T.relu(T.mul(pooled_attn, Tensor(pooled_grad)))


@dataclass
class MatchedForward:
    """What localization needs from a matched-pair ITM forward on a tape."""
    attn: list  # per layer Tensor [N,H,L,P*P]
    itm_pos: Tensor  # summed matched-pair ITM cross-entropy over the N positives
    K: np.ndarray  # real token counts of the N positives
    n_pos: int


def localization_maps(fwd: MatchedForward, layer: int, head="mean", include_cls=False,
                      literal_gradient=False) -> Tensor:
    """Batched GradCAM maps ``[N, P*P]`` for the positives of ``fwd``.

    The gradient factor is taken from the matched-pair ITM cross-entropy.
    By default its sign is flipped (gradient of the match log-likelihood) so
    the map highlights evidence *for* the match; ``literal_gradient`` keeps
    the raw loss gradient.
    """
    a = fwd.attn[layer]
    (g,) = T.grad(fwd.itm_pos, [a])
    rows = slice(0, fwd.n_pos) if a.shape[0] != fwd.n_pos else None
    return maps_from_gradient(a, g, rows, fwd.K, head, include_cls, literal_gradient)


def maps_from_gradient(attn: Tensor, attn_grad: np.ndarray, rows, K, head="mean",
                       include_cls=False, literal_gradient=False) -> Tensor:
    """GradCAM maps ``[n, P*P]`` for the selected rows of one layer's attention.

    ``attn_grad`` is d(matched ITM cross-entropy)/d(attn); ``rows`` is a slice,
    an index array or None (all rows).
    """
    g = attn_grad if literal_gradient else -attn_grad
    if rows is not None:
        attn = attn[rows] if isinstance(rows, slice) else T.take(attn, rows)
        g = g[rows]
    pooled = pool_attention(attn, K, head, include_cls)
    return gradcam_tensor(pooled, pool_gradient(g, K, head, include_cls))


def matched_forward(model, img_emb: Tensor, ids, mask) -> MatchedForward:
    """Fuse matched (image, text) rows and sum their ITM cross-entropy."""
    text_emb = model.encode_text(ids, mask)
    fused, attn = model.fuse(text_emb, mask, img_emb)
    logits = model.itm_logits(fused)
    n = ids.shape[0]
    ce = T.cross_entropy(logits, np.ones(n, dtype=np.int64), reduction="sum")
    return MatchedForward(attn, ce, mask.sum(axis=1), n)


def localize_batch(model, vocab, images, phrases, layer=1, head="mean", include_cls=False,
                   literal_gradient=False) -> np.ndarray:
    """Maps ``[N, P, P]`` for N (image, phrase) pairs. Parameters' ``.grad`` untouched."""
    c = model.config
    images = np.asarray(images, dtype=np.float64)
    ids, mask = stack_tokens([tokenize(p, vocab, c.max_tokens) for p in phrases], trim=True)
    with T.Tape():
        img_emb = model.encode_image(images)
        fwd = matched_forward(model, img_emb, ids, mask)
        maps = localization_maps(fwd, layer, head, include_cls, literal_gradient)
    return maps.data.reshape(len(phrases), c.P, c.P)


def localize(model, vocab, scene, phrase, layer=1, head="mean", include_cls=False,
             literal_gradient=False) -> LocalizationMap:
    grid = localize_batch(model, vocab, scene.image[None], [phrase], layer, head,
                          include_cls, literal_gradient)[0]
    return LocalizationMap(grid, phrase, layer, head, scene.scene_id)


def export_heatmap(lmap, path) -> None:
    """Write the map as an 8-bit binary PGM, min-max scaled; constant maps are all zero."""
    grid = np.asarray(lmap.grid if isinstance(lmap, LocalizationMap) else lmap, dtype=np.float64)
    h, w = grid.shape
    lo, hi = grid.min(), grid.max()
    if hi > lo:
        pix = np.rint((grid - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pix = np.zeros((h, w), dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
