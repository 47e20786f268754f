"""Training objectives: ITC / ITM / MLM, phrase and subject losses, composition and
exclusion losses over GradCAM maps, and the alpha-weighted total."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .captions import scene_phrases, stack_tokens, tokenize
from .localization import MatchedForward, maps_from_gradient
from .scenes import full_caption
from .tensor import Tensor


@dataclass
class LossFlags:
    subject: bool = True
    composition: bool = True
    exclusion: bool = False


@dataclass
class LossSettings:
    lambda_soft: float = 0.4
    p_mask: float = 0.15
    layer: int = 1
    head: object = "mean"
    include_cls: bool = False
    literal_gradient: bool = False


@dataclass
class AlphaSchedule:
    """Per-step linear ramp of alpha from 0 to 1 over ``epochs_to_one`` epochs.

    ``inverted`` swaps the ramp (1 -> 0) for ablations.
    """
    steps_per_epoch: int
    epochs_to_one: int = 2
    inverted: bool = False

    def __call__(self, step: int) -> float:
        ramp = self.epochs_to_one * self.steps_per_epoch
        a = 1.0 if ramp <= 0 else min(1.0, step / ramp)
        return 1.0 - a if self.inverted else a


@dataclass
class LossBundle:
    itc: Tensor
    itm: Tensor
    mlm: Tensor
    phrase: Tensor
    subject: Tensor | None
    composition: Tensor | None
    exclusion: Tensor | None
    total: Tensor
    alpha: float
    vl: Tensor
    hist: Tensor
    extras: dict = field(default_factory=dict)

    def scalars(self) -> dict:
        out = {"alpha": self.alpha}
        for name in ("itc", "itm", "mlm", "phrase", "subject", "composition", "exclusion", "total"):
            v = getattr(self, name)
            out[name] = None if v is None else float(v.data)
        return out


# ---------------------------------------------------------------------------
# batches with cached encodings


class ImageBatch:
    """Images of one step, encoded once by the online and momentum encoders."""

    def __init__(self, model, images, own_texts=None):
        self.images = np.asarray(images, dtype=np.float64)
        self.emb = model.encode_image(self.images)
        self.feat = model.image_feature(self.emb)
        with T.no_grad():
            m = model.encode_image(self.images, momentum=True)
            self.mfeat = model.image_feature(m, momentum=True).data
        n = self.images.shape[0]
        self.own_texts = own_texts if own_texts is not None else [set() for _ in range(n)]

    def __len__(self):
        return self.images.shape[0]


class TextBatch:
    """Texts of one level (caption, phrase, subject...), tokenized and encoded once."""

    def __init__(self, model, vocab, texts):
        self.texts = list(texts)
        seqs = [tokenize(t, vocab, model.config.max_tokens) for t in self.texts]
        self.ids, self.mask = stack_tokens(seqs, trim=True)
        self.emb = model.encode_text(self.ids, self.mask)
        self.feat = model.text_feature(self.emb)
        with T.no_grad():
            m = model.encode_text(self.ids, self.mask, momentum=True)
            self.mfeat = model.text_feature(m, momentum=True).data

    @classmethod
    def from_parts(cls, texts, ids, mask, emb, feat, mfeat):
        self = cls.__new__(cls)
        self.texts, self.ids, self.mask = list(texts), ids, mask
        self.emb, self.feat, self.mfeat = emb, feat, mfeat
        return self

    def __len__(self):
        return len(self.texts)

    @property
    def K(self):
        return self.mask.sum(axis=1)


# ---------------------------------------------------------------------------
# base objectives


def itc_loss(model, imgs: ImageBatch, txts: TextBatch, lambda_soft: float = 0.4) -> Tensor:
    """Symmetric InfoNCE against in-batch and queued negatives with momentum soft labels."""
    tau = model.config.temperature
    B = len(imgs)
    qt, qv = model.queue_text, model.queue_image
    all_t = T.concat([txts.feat, Tensor(qt)], axis=0)
    all_v = T.concat([imgs.feat, Tensor(qv)], axis=0)
    sim_i2t = T.matmul(imgs.feat, T.transpose(all_t)) * (1.0 / tau)
    sim_t2i = T.matmul(txts.feat, T.transpose(all_v)) * (1.0 / tau)

    def soft_targets(q, keys):
        s = q @ np.concatenate([keys[0], keys[1]], axis=0).T / tau
        p = np.exp(T.log_softmax(s))
        onehot = np.zeros_like(p)
        onehot[np.arange(B), np.arange(B)] = 1.0
        return lambda_soft * p + (1.0 - lambda_soft) * onehot

    tgt_i2t = soft_targets(imgs.mfeat, (txts.mfeat, qt))
    tgt_t2i = soft_targets(txts.mfeat, (imgs.mfeat, qv))
    return (T.cross_entropy(sim_i2t, tgt_i2t) + T.cross_entropy(sim_t2i, tgt_t2i)) * 0.5


def sample_negatives(model, imgs: ImageBatch, txts: TextBatch, rng) -> np.ndarray:
    """One hard negative text index per image (-1 when none is valid).

    Candidates are other batch texts not among the image's own caption
    texts, drawn with probability softmax(similarity / tau); uniform if all
    weights underflow.
    """
    B = len(imgs)
    sims = imgs.feat.data @ txts.feat.data.T / model.config.temperature
    neg = np.full(B, -1, dtype=np.int64)
    for b in range(B):
        valid = np.array([j != b and txts.texts[j] not in imgs.own_texts[b] for j in range(len(txts))])
        if not valid.any():
            continue
        z = np.where(valid, sims[b], -np.inf)
        w = np.exp(z - z[valid].max())
        total = w.sum()
        if not np.isfinite(total) or total <= 0:
            w = valid / valid.sum()
        else:
            w = w / total
        neg[b] = int(rng.choice(len(w), p=w))
    return neg


def itm_loss(model, imgs: ImageBatch, txts: TextBatch, rng, negatives=None):
    """Matched/unmatched cross-entropy over positives and sampled hard negatives.

    Returns ``(loss, MatchedForward)``; the latter describes the positive rows
    so localization maps can be read off the same forward.
    """
    B = len(imgs)
    if negatives is None:
        negatives = sample_negatives(model, imgs, txts, rng)
    has = np.flatnonzero(negatives >= 0)
    neg_t = negatives[has]
    if len(has):
        text_emb = T.concat([txts.emb, T.take(txts.emb, neg_t)], axis=0)
        img_emb = T.concat([imgs.emb, T.take(imgs.emb, has)], axis=0)
        mask = np.concatenate([txts.mask, txts.mask[neg_t]], axis=0)
    else:
        text_emb, img_emb, mask = txts.emb, imgs.emb, txts.mask
    fused, attn = model.fuse(text_emb, mask, img_emb)
    logits = model.itm_logits(fused)
    labels = np.concatenate([np.ones(B, dtype=np.int64), np.zeros(len(has), dtype=np.int64)])
    loss = T.cross_entropy(logits, labels)
    pos_ce = T.cross_entropy(logits[:B], labels[:B], reduction="sum")
    return loss, MatchedForward(attn, pos_ce, txts.K, B)


def mask_tokens(ids, mask, rng, p_mask: float, mask_id: int):
    """Mask each real non-[CLS] token with probability ``p_mask``, at least one per row.

    Returns ``(masked_ids, masked_bool)``; rows without maskable tokens are untouched.
    """
    masked = np.zeros(ids.shape, dtype=bool)
    for n in range(ids.shape[0]):
        cand = np.flatnonzero(mask[n])[1:]
        if len(cand) == 0:
            continue
        pick = cand[rng.random(len(cand)) < p_mask]
        if len(pick) == 0:
            pick = cand[[int(rng.integers(0, len(cand)))]]
        masked[n, pick] = True
    out = ids.copy()
    out[masked] = mask_id
    return out, masked


def mlm_loss(model, imgs: ImageBatch, txts: TextBatch, rng, p_mask: float = 0.15,
             mask_id: int = 2, masking=None) -> Tensor:
    """Masked-token cross-entropy conditioned on the image.

    ``masking`` is an optional precomputed ``mask_tokens`` result. When no
    row has a maskable token the loss is a constant 0 (nothing to predict).
    """
    if masking is None:
        masking = mask_tokens(txts.ids, txts.mask, rng, p_mask, mask_id)
    ids, masked = masking
    rows, cols = np.nonzero(masked)
    if len(rows) == 0:
        return Tensor(0.0)
    emb = model.encode_text(ids, txts.mask)
    fused, _ = model.fuse(emb, txts.mask, imgs.emb)
    logits = model.mlm_logits(fused, rows, cols, masked)
    return T.cross_entropy(logits, txts.ids[rows, cols])


def phrase_loss(model, imgs, txts, rng, settings: LossSettings, mask_id=2):
    """ITC + ITM + MLM on (image, phrase). Returns (loss, parts, MatchedForward)."""
    itc = itc_loss(model, imgs, txts, settings.lambda_soft)
    itm, fwd = itm_loss(model, imgs, txts, rng)
    mlm = mlm_loss(model, imgs, txts, rng, settings.p_mask, mask_id)
    return itc + itm + mlm, {"itc": itc, "itm": itm, "mlm": mlm}, fwd


def subject_loss(model, imgs, txts, rng, settings: LossSettings):
    """ITC + ITM on (image, subject word); no MLM term."""
    itc = itc_loss(model, imgs, txts, settings.lambda_soft)
    itm, fwd = itm_loss(model, imgs, txts, rng)
    return itc + itm, {"itc": itc, "itm": itm}, fwd


# ---------------------------------------------------------------------------
# map-level losses


def _check_maps(*maps):
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise T.ShapeError(f"map shapes differ: {[x.shape for x in maps]}")


def composition_loss(g_i, g_j, g_ij) -> Tensor:
    """Sum over cells of ``|G_i + G_j - G_ij|``; leading axes are summed too."""
    g_i, g_j, g_ij = (T.as_tensor(g) for g in (g_i, g_j, g_ij))
    _check_maps(g_i, g_j, g_ij)
    return T.l1_sum(g_i + g_j - g_ij)


def exclusion_loss(g_i, g_j) -> Tensor:
    """Sum over cells of ``G_i * G_j``."""
    g_i, g_j = T.as_tensor(g_i), T.as_tensor(g_j)
    _check_maps(g_i, g_j)
    return T.sum(g_i * g_j)


def combine_total(l_vl, l_hist, alpha: float, simplified: bool = False):
    """Alpha blend of base and HIST objectives; works on Tensors or floats."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0,1], got {alpha}")
    if simplified:
        return l_vl + l_hist * (1.0 - alpha)
    return l_vl * alpha + (l_vl + l_hist) * (1.0 - alpha)


# ---------------------------------------------------------------------------
# full step objective


def scene_texts(scene, vocab) -> set[str]:
    """Every caption, phrase and subject text attached to a scene."""
    out = set(scene.captions)
    for rec in scene_phrases(scene.captions, vocab):
        out.add(rec.text)
        out.add(rec.subject)
    return out


@dataclass
class _Level:
    """One text level of a step: its texts and which objectives it feeds."""
    name: str
    texts: list
    itm: bool = True  # ITC + ITM (with a hard negative per image)
    mlm: bool = False
    batch: TextBatch | None = None
    negatives: np.ndarray | None = None
    masking: tuple | None = None
    rows: dict = field(default_factory=dict)


def _encode_group(model, vocab, levels):
    """Encode the texts of several levels in one pass; attach a TextBatch view to each."""
    seqs = [tokenize(t, vocab, model.config.max_tokens) for lv in levels for t in lv.texts]
    ids, mask = stack_tokens(seqs, trim=True)
    emb = model.encode_text(ids, mask)
    feat = model.text_feature(emb)
    with T.no_grad():
        mfeat = model.text_feature(model.encode_text(ids, mask, momentum=True), momentum=True).data
    start = 0
    for lv in levels:
        sl = slice(start, start + len(lv.texts))
        lv.batch = TextBatch.from_parts(lv.texts, ids[sl], mask[sl], emb[sl], feat[sl], mfeat[sl])
        lv.rows["enc"] = np.arange(sl.start, sl.stop)
        start = sl.stop
    return ids, mask, emb


def _fuse_group(model, imgs, levels, mask, emb, pad_id):
    """One fusion pass over every (image, text) row the levels need.

    Row layout per level: positives, then hard negatives, then (separately
    encoded) masked copies for MLM. Returns (itm logits, fused, attn, masked).
    """
    N = len(imgs)
    pick, img_idx, m_ids, m_img = [], [], [], []
    n_rows = 0
    for lv in levels:
        enc = lv.rows["enc"]
        pos = list(enc)
        neg_img = []
        if lv.itm:
            has = np.flatnonzero(lv.negatives >= 0)
            pos += list(enc[lv.negatives[has]])
            neg_img = list(has)
        lv.rows["itm"] = slice(n_rows, n_rows + len(pos))
        pick += pos
        img_idx += list(range(N)) + neg_img
        n_rows += len(pos)
    text_emb, text_mask = T.take(emb, np.array(pick)), mask[pick]
    masked_levels = [lv for lv in levels if lv.mlm and lv.masking[1].any()]
    masked_full = np.zeros((n_rows, mask.shape[1]), dtype=bool)
    if masked_levels:
        for lv in masked_levels:
            lv.rows["mlm"] = n_rows + len(m_ids) * N
            m_ids.append(lv.masking[0])
            m_img += list(range(N))
        L = mask.shape[1]
        m_ids = np.concatenate([np.pad(a, ((0, 0), (0, L - a.shape[1])), constant_values=pad_id)
                                for a in m_ids])
        m_mask = np.concatenate([np.pad(lv.batch.mask, ((0, 0), (0, L - lv.batch.mask.shape[1])))
                                 for lv in masked_levels])
        m_masked = np.concatenate([np.pad(lv.masking[1], ((0, 0), (0, L - lv.masking[1].shape[1])))
                                   for lv in masked_levels])
        m_emb = model.encode_text(m_ids, m_mask)
        text_emb = T.concat([text_emb, m_emb], axis=0)
        text_mask = np.concatenate([text_mask, m_mask], axis=0)
        masked_full = np.concatenate([masked_full, m_masked], axis=0)
        img_idx += m_img
    fused, attn = model.fuse(text_emb, text_mask, imgs.emb, img_index=np.array(img_idx))
    logits = model.itm_logits(fused)
    return logits, fused, attn, masked_full


def total_loss(model, vocab, tuples, scenes, alpha: float, flags: LossFlags | None = None,
               settings: LossSettings | None = None, rng=None) -> LossBundle:
    """Loss bundle for a batch of data tuples; must run inside an active tape.

    ``scenes`` maps scene_id -> Scene. A single tuple is a batch of one.
    Random draws (hard negatives, then MLM masks) happen level by level in
    the order caption, c_i, c_j, s_i, s_j, so the result equals composing
    ``phrase_loss``/``subject_loss`` per level with the same generator.
    All rows of a step share one text-encoder and one fusion pass per length
    bucket (captions/phrases vs. subject words).
    """
    flags = flags or LossFlags()
    settings = settings or LossSettings()
    rng = rng if rng is not None else np.random.default_rng(0)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0,1], got {alpha}")
    mask_id = vocab.mask_id
    batch = [scenes[t.scene_id] for t in tuples]
    own = [scene_texts(s, vocab) for s in batch]
    imgs = ImageBatch(model, np.stack([s.image for s in batch]), own)
    N = len(tuples)
    want_maps = flags.composition or flags.exclusion

    cap = _Level("caption", [full_caption(s) for s in batch], mlm=True)
    ci = _Level("c_i", [t.c_i.text for t in tuples], mlm=True)
    cj = _Level("c_j", [t.c_j.text for t in tuples], mlm=True)
    long_levels = [cap, ci, cj]
    if want_maps:
        cij = _Level("c_ij", [t.c_ij for t in tuples], itm=False)
        long_levels.append(cij)
    short_levels = []
    if flags.subject:
        short_levels = [_Level("s_i", [t.c_i.subject for t in tuples]),
                        _Level("s_j", [t.c_j.subject for t in tuples])]
    groups = [long_levels] + ([short_levels] if short_levels else [])
    encoded = [_encode_group(model, vocab, g) for g in groups]

    # random draws in canonical level order
    for lv in [cap, ci, cj] + short_levels:
        lv.negatives = sample_negatives(model, imgs, lv.batch, rng)
        if lv.mlm:
            lv.masking = mask_tokens(lv.batch.ids, lv.batch.mask, rng, settings.p_mask, mask_id)

    parts = {}
    fwd = {}
    for g, (_, mask, emb) in zip(groups, encoded):
        logits, fused, attn, masked_full = _fuse_group(model, imgs, g, mask, emb, vocab.pad_id)
        fwd[id(g)] = (logits, attn)
        for lv in g:
            if not lv.itm:
                continue
            itc = itc_loss(model, imgs, lv.batch, settings.lambda_soft)
            n_neg = lv.rows["itm"].stop - lv.rows["itm"].start - N
            labels = np.concatenate([np.ones(N, dtype=np.int64), np.zeros(n_neg, dtype=np.int64)])
            itm = T.cross_entropy(logits[lv.rows["itm"]], labels)
            loss = itc + itm
            parts[lv.name] = {"itc": itc, "itm": itm}
            if lv.mlm:
                if "mlm" in lv.rows:
                    r0 = lv.rows["mlm"]
                    rows, cols = np.nonzero(masked_full[r0:r0 + N])
                    mlm = T.cross_entropy(model.mlm_logits(fused, rows + r0, cols, masked_full),
                                          lv.batch.ids[rows, cols])
                else:
                    mlm = Tensor(0.0)
                parts[lv.name]["mlm"] = mlm
                loss = loss + mlm
            parts[lv.name]["loss"] = loss

    vl = parts["caption"]["loss"]
    phrase = parts["c_i"]["loss"] + parts["c_j"]["loss"]
    hist = phrase
    subject = None
    if flags.subject:
        subject = parts["s_i"]["loss"] + parts["s_j"]["loss"]
        hist = hist + subject

    composition = exclusion = None
    extras = {}
    if want_maps:
        logits, attn = fwd[id(long_levels)]
        map_levels = (ci, cj, cij)
        pos_rows = np.concatenate([np.arange(lv.rows["itm"].start, lv.rows["itm"].start + N)
                                   for lv in map_levels])
        pos_ce = T.cross_entropy(T.take(logits, pos_rows), np.ones(len(pos_rows), dtype=np.int64),
                                 reduction="sum")
        a = attn[settings.layer] if 0 <= settings.layer < len(attn) else None
        if a is None:
            raise IndexError(f"layer {settings.layer} out of range for {len(attn)} layers")
        (grad_a,) = T.grad(pos_ce, [a])
        g_i, g_j, g_ij = (
            maps_from_gradient(a, grad_a, slice(lv.rows["itm"].start, lv.rows["itm"].start + N),
                               lv.batch.mask.sum(axis=1), settings.head, settings.include_cls,
                               settings.literal_gradient)
            for lv in map_levels)
        extras["maps"] = (g_i, g_j, g_ij)
        if flags.composition:
            composition = composition_loss(g_i, g_j, g_ij) * (1.0 / N)
            hist = hist + composition
        if flags.exclusion:
            exclusion = exclusion_loss(g_i, g_j) * (1.0 / N)
            hist = hist + exclusion

    total = combine_total(vl, hist, alpha)
    extras["enqueue"] = (imgs.mfeat, cap.batch.mfeat)
    extras["parts"] = parts
    c = parts["caption"]
    return LossBundle(c["itc"], c["itm"], c["mlm"], phrase, subject,
                      composition, exclusion, total, alpha, vl, hist, extras)
