"""Toy ALBEF-style vision-language model built on :mod:`histalign.tensor`.

Image encoder: linear patch projection plus positional embedding.
Text encoder: token + position embedding and one self-attention block.
Fusion encoder: ``n_cross_layers`` blocks of text self-attention, text-to-image
cross-attention and a feed-forward layer. Cross-attention probabilities of
every layer are returned so localization can read them and differentiate
through them.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor

CKPT_MAGIC = b"HCKP"
CKPT_VERSION = 1


class ConfigMismatch(ValueError):
    pass


@dataclass
class ModelConfig:
    P: int = 8
    d_pix: int = 16
    d_v: int = 32
    d_t: int = 32
    n_heads: int = 4
    n_cross_layers: int = 3
    vocab_size: int = 25
    max_tokens: int = 12
    d_ff: int = 64
    embed_dim: int = 32
    temperature: float = 0.07
    queue_size: int = 256
    momentum: float = 0.995
    seed: int = 0

    def validate(self):
        if self.d_t % self.n_heads:
            raise ValueError(f"d_t={self.d_t} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0,1], got {self.momentum}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.P < 1 or self.max_tokens < 2:
            raise ValueError("P and max_tokens must be positive")
        return self

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# parameter groups copied into the momentum encoder
MOMENTUM_PREFIXES = ("img.", "txt.", "itc.")


class HistModel:
    """Parameters, momentum copies and ITC feature queues of the toy VLM."""

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(config.seed))
        self.momentum_params = {k: v.data.copy() for k, v in self.params.items()
                                if k.startswith(MOMENTUM_PREFIXES)}
        self.queue_image = np.zeros((0, config.embed_dim))
        self.queue_text = np.zeros((0, config.embed_dim))

    # -- parameters ---------------------------------------------------------

    def _init_params(self, rng):
        c = self.config
        p = self.params

        def w(name, shape, std=None):
            std = 1.0 / math.sqrt(shape[0]) if std is None else std
            p[name] = Tensor(rng.normal(0.0, std, shape), requires_grad=True)

        def zeros(name, shape):
            p[name] = Tensor(np.zeros(shape), requires_grad=True)

        def ln(name, d):
            p[name + ".g"] = Tensor(np.ones(d), requires_grad=True)
            p[name + ".b"] = Tensor(np.zeros(d), requires_grad=True)

        def attn(prefix, d_q, d_kv):
            w(prefix + ".q", (d_q, c.d_t))
            w(prefix + ".k", (d_kv, c.d_t))
            w(prefix + ".v", (d_kv, c.d_t))
            w(prefix + ".o", (c.d_t, c.d_t))

        def ffn(prefix):
            w(prefix + ".w1", (c.d_t, c.d_ff))
            zeros(prefix + ".b1", c.d_ff)
            w(prefix + ".w2", (c.d_ff, c.d_t))
            zeros(prefix + ".b2", c.d_t)

        w("img.proj.w", (c.d_pix, c.d_v))
        zeros("img.proj.b", c.d_v)
        w("img.pos", (c.P * c.P, c.d_v), std=0.1)

        w("txt.tok", (c.vocab_size, c.d_t), std=1.0)
        w("txt.pos", (c.max_tokens, c.d_t), std=0.1)
        ln("txt.ln0", c.d_t)
        attn("txt.sa", c.d_t, c.d_t)
        ln("txt.ln1", c.d_t)
        ffn("txt.ff")
        ln("txt.ln2", c.d_t)

        for layer in range(c.n_cross_layers):
            pre = f"fus.{layer}"
            attn(pre + ".sa", c.d_t, c.d_t)
            ln(pre + ".ln1", c.d_t)
            attn(pre + ".ca", c.d_t, c.d_v)
            ln(pre + ".ln2", c.d_t)
            ffn(pre + ".ff")
            ln(pre + ".ln3", c.d_t)

        w("itm.w", (c.d_t, 2))
        zeros("itm.b", 2)
        w("mlm.w", (c.d_t, c.vocab_size))
        zeros("mlm.b", c.vocab_size)
        w("itc.vproj", (c.d_v, c.embed_dim))
        w("itc.tproj", (c.d_t, c.embed_dim))

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        T.zero_grad(self.params.values())

    def _p(self, momentum: bool):
        if momentum:
            return {k: Tensor(v) for k, v in self.momentum_params.items()}
        return self.params

    # -- building blocks ----------------------------------------------------

    def _mha(self, p, prefix, xq, xkv, key_mask, kv_index=None):
        """Multi-head attention; returns (output [N,Lq,d_t], probs [N,H,Lq,Lk]).

        With ``kv_index`` the keys/values are projected once per row of
        ``xkv`` and then gathered, so query row n attends to ``xkv[kv_index[n]]``.
        """
        c = self.config
        H, dh = c.n_heads, c.d_t // c.n_heads
        N, Lq = xq.shape[0], xq.shape[1]
        M, Lk = xkv.shape[0], xkv.shape[1]
        q = T.transpose(T.reshape(xq @ p[prefix + ".q"], (N, Lq, H, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(xkv @ p[prefix + ".k"], (M, Lk, H, dh)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(xkv @ p[prefix + ".v"], (M, Lk, H, dh)), (0, 2, 1, 3))
        if kv_index is not None:
            k, v = T.take(k, kv_index), T.take(v, kv_index)
        scores = T.matmul(q, k) * (1.0 / math.sqrt(dh))
        mask = None if key_mask is None else key_mask[:, None, None, :]
        probs = T.softmax(scores, mask=mask)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (N, Lq, c.d_t))
        return ctx @ p[prefix + ".o"], probs

    def _ffn(self, p, prefix, x):
        h = T.relu(x @ p[prefix + ".w1"] + p[prefix + ".b1"])
        return h @ p[prefix + ".w2"] + p[prefix + ".b2"]

    @staticmethod
    def _ln(p, prefix, x):
        return T.layer_norm(x, p[prefix + ".g"], p[prefix + ".b"])

    # -- encoders -----------------------------------------------------------

    def encode_image(self, images, momentum: bool = False) -> Tensor:
        """Patch embeddings ``[N, P*P, d_v]`` (or ``[P*P, d_v]`` for one image)."""
        c = self.config
        data = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        single = data.ndim == 3
        if single:
            data = data[None]
        if data.shape[1:] != (c.P, c.P, c.d_pix):
            raise T.ShapeError(f"image shape {data.shape[1:]} != {(c.P, c.P, c.d_pix)}")
        p = self._p(momentum)
        x = Tensor(data.reshape(data.shape[0], c.P * c.P, c.d_pix))
        emb = x @ p["img.proj.w"] + p["img.proj.b"] + p["img.pos"]
        return emb[0] if single else emb

    def encode_text(self, ids, mask=None, momentum: bool = False) -> Tensor:
        """Contextual token embeddings ``[N, L, d_t]``; [PAD] keys are masked out.

        ``L`` may be shorter than ``max_tokens`` when trailing padding was trimmed.
        A single TokenSequence (no mask) gives ``[max_tokens, d_t]``.
        """
        c = self.config
        if hasattr(ids, "K"):
            seq = ids
            return self.encode_text(np.array([seq.ids]), seq.mask[None], momentum)[0]
        ids = np.asarray(ids, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        if ids.ndim != 2 or not 1 <= ids.shape[1] <= c.max_tokens or mask.shape != ids.shape:
            raise T.ShapeError(f"token ids shape {ids.shape} incompatible with max_tokens={c.max_tokens}")
        p = self._p(momentum)
        pos = p["txt.pos"]
        if ids.shape[1] < c.max_tokens:
            pos = pos[: ids.shape[1]]
        x = T.take(p["txt.tok"], ids) + pos
        x = self._ln(p, "txt.ln0", x)
        a, _ = self._mha(p, "txt.sa", x, x, mask)
        x = self._ln(p, "txt.ln1", x + a)
        x = self._ln(p, "txt.ln2", x + self._ffn(p, "txt.ff", x))
        return x

    def fuse(self, text_emb: Tensor, text_mask, img_emb: Tensor, img_index=None):
        """Run the fusion encoder.

        Returns ``(fused [N,L,d_t], attn)`` where ``attn[l]`` is the
        text-to-image attention of layer ``l`` with shape ``[N,H,L,P*P]``.
        Text row n is paired with image row n, or with ``img_emb[img_index[n]]``
        when an index is given (cheaper when images repeat across rows).
        """
        c = self.config
        if img_index is not None:
            img_index = np.asarray(img_index, dtype=np.int64)
            n_img = img_index.shape[0]
            if img_index.size and (img_index.min() < 0 or img_index.max() >= img_emb.shape[0]):
                raise IndexError("fuse: img_index out of range")
        else:
            n_img = img_emb.shape[0]
        if text_emb.ndim != 3 or img_emb.ndim != 3 or text_emb.shape[0] != n_img:
            raise T.ShapeError(f"fuse: text {text_emb.shape} vs image {img_emb.shape}")
        if img_emb.shape[1:] != (c.P * c.P, c.d_v):
            raise T.ShapeError(f"fuse: image embeddings {img_emb.shape} do not match config")
        p = self.params
        mask = np.asarray(text_mask, dtype=bool)
        x = text_emb
        attn = []
        for layer in range(c.n_cross_layers):
            pre = f"fus.{layer}"
            a, _ = self._mha(p, pre + ".sa", x, x, mask)
            x = self._ln(p, pre + ".ln1", x + a)
            a, probs = self._mha(p, pre + ".ca", x, img_emb, None, img_index)
            attn.append(probs)
            x = self._ln(p, pre + ".ln2", x + a)
            x = self._ln(p, pre + ".ln3", x + self._ffn(p, pre + ".ff", x))
        return x, attn

    def itm_logits(self, fused: Tensor) -> Tensor:
        return fused[:, 0, :] @ self.params["itm.w"] + self.params["itm.b"]

    def mlm_logits(self, fused: Tensor, rows, cols, masked) -> Tensor:
        """Vocabulary logits at (row, col) positions; each must be a masked position."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        masked = np.asarray(masked, dtype=bool)
        if not masked[rows, cols].all():
            raise ValueError("mlm_logits queried at unmasked positions")
        h = fused[rows, cols]
        return h @ self.params["mlm.w"] + self.params["mlm.b"]

    # -- ITC features -------------------------------------------------------

    def image_feature(self, img_emb: Tensor, momentum: bool = False) -> Tensor:
        p = self._p(momentum)
        pooled = T.mean(img_emb, axis=1)
        return T.l2_normalize(pooled @ p["itc.vproj"])

    def text_feature(self, text_emb: Tensor, momentum: bool = False) -> Tensor:
        p = self._p(momentum)
        return T.l2_normalize(text_emb[:, 0, :] @ p["itc.tproj"])

    # -- momentum encoder ---------------------------------------------------

    def momentum_update(self, image_feats=None, text_feats=None):
        """EMA of the momentum parameters, then FIFO-enqueue the given features."""
        m = self.config.momentum
        for k, v in self.momentum_params.items():
            v *= m
            v += (1.0 - m) * self.params[k].data
        if image_feats is not None:
            self.queue_image = self._enqueue(self.queue_image, image_feats)
        if text_feats is not None:
            self.queue_text = self._enqueue(self.queue_text, text_feats)

    def _enqueue(self, queue, feats):
        feats = np.asarray(feats, dtype=np.float64)
        feats = feats / np.linalg.norm(feats, axis=1, keepdims=True)
        return np.concatenate([feats, queue], axis=0)[: self.config.queue_size]

    # -- persistence ----------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param.{k}": v.data for k, v in self.params.items()}
        out.update({f"momentum.{k}": v for k, v in self.momentum_params.items()})
        out["queue.image"] = self.queue_image
        out["queue.text"] = self.queue_text
        return out

    def save(self, path) -> None:
        cfg = json.dumps(asdict(self.config), sort_keys=True).encode()
        parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg)), cfg]
        arrays = self.state_arrays()
        parts.append(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode()
            parts.append(struct.pack("<I", len(raw)) + raw + T.pack_tensor(arr))
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))

    @classmethod
    def load(cls, path, expected: ModelConfig | None = None) -> "HistModel":
        with open(path, "rb") as fh:
            buf = fh.read()
        if buf[:4] != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        version, n = struct.unpack_from("<II", buf, 4)
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        cfg_dict = json.loads(buf[12:12 + n])
        config = ModelConfig.from_dict(cfg_dict)
        if expected is not None and asdict(expected) != asdict(config):
            diff = {k: (v, cfg_dict.get(k)) for k, v in asdict(expected).items() if cfg_dict.get(k) != v}
            raise ConfigMismatch(f"checkpoint config differs from expected: {diff}")
        model = cls(config)
        pos = 12 + n
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4:pos + 4 + ln].decode()
            arr, pos = T.unpack_tensor(buf, pos + 4 + ln)
            kind, _, key = name.partition(".")
            if kind == "param":
                model.params[key].data[...] = arr
            elif kind == "momentum":
                model.momentum_params[key][...] = arr
            elif name == "queue.image":
                model.queue_image = arr.reshape(-1, config.embed_dim)
            elif name == "queue.text":
                model.queue_text = arr.reshape(-1, config.embed_dim)
        return model
