import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from histalign import tensor as T
from histalign.captions import Vocab
from histalign.localization import maps_from_gradient
from histalign.losses import (AlphaSchedule, ImageBatch, LossFlags, LossSettings, TextBatch, combine_total,
                              composition_loss, exclusion_loss, itc_loss, itm_loss, mlm_loss, phrase_loss,
                              scene_texts, subject_loss, total_loss)
from histalign.model import HistModel
from histalign.scenes import full_caption
from histalign.tensor import Tensor
from conftest import tiny_config
from oracles import central_diff, naive_composition, naive_exclusion, rel_err

VOCAB = Vocab.default()


def batches(model, scenes, texts):
    with T.Tape():
        imgs = ImageBatch(model, np.stack([s.image for s in scenes]),
                          [scene_texts(s, VOCAB) for s in scenes])
        txts = TextBatch(model, VOCAB, texts)
    return imgs, txts


# ---------------------------------------------------------------------------
# ITC / ITM / MLM


def test_itc_single_pair_empty_queue_is_zero(tiny_data):
    scenes, _, _ = tiny_data
    m = HistModel(tiny_config())
    imgs, txts = batches(m, scenes[:1], [scenes[0].captions[0]])
    assert float(itc_loss(m, imgs, txts).data) == 0.0


def test_itc_duplicate_pair_positive(tiny_data):
    scenes, _, _ = tiny_data
    m = HistModel(tiny_config())
    imgs, txts = batches(m, [scenes[0], scenes[0]], [scenes[0].captions[0]] * 2)
    assert float(itc_loss(m, imgs, txts).data) > 0


def test_itc_invariant_to_joint_permutation(tiny_data):
    scenes, _, _ = tiny_data
    m = HistModel(tiny_config())
    m.momentum_update(np.random.default_rng(0).normal(size=(5, 8)), np.random.default_rng(1).normal(size=(5, 8)))
    caps = [full_caption(s) for s in scenes]
    a = float(itc_loss(m, *batches(m, scenes, caps)).data)
    perm = [3, 0, 5, 1, 4, 2]
    b = float(itc_loss(m, *batches(m, [scenes[i] for i in perm], [caps[i] for i in perm])).data)
    assert abs(a - b) < 1e-12


def test_itm_uniform_logits_give_ln2(tiny_data):
    scenes, _, _ = tiny_data
    m = HistModel(tiny_config())
    m.params["itm.w"].data[:] = 0
    m.params["itm.b"].data[:] = 0
    imgs, txts = batches(m, scenes[:3], [full_caption(s) for s in scenes[:3]])
    loss, fwd = itm_loss(m, imgs, txts, np.random.default_rng(0))
    assert abs(float(loss.data) - math.log(2)) < 1e-12
    assert abs(float(fwd.itm_pos.data) - 3 * math.log(2)) < 1e-12


def test_hard_negatives_exclude_own_texts(tiny_data):
    scenes, _, _ = tiny_data
    from histalign.losses import sample_negatives
    m = HistModel(tiny_config())
    # scene 0 twice: each copy's partner text belongs to its own scene and is not a negative
    imgs, txts = batches(m, [scenes[0], scenes[0], scenes[1]], [full_caption(scenes[0])] * 2 + [full_caption(scenes[1])])
    for seed in range(20):
        neg = sample_negatives(m, imgs, txts, np.random.default_rng(seed))
        assert neg[0] == 2 and neg[1] == 2
        assert neg[2] in (0, 1)


def test_mlm_bounded_at_init(tiny_data):
    scenes, _, _ = tiny_data
    m = HistModel(tiny_config())
    imgs, txts = batches(m, scenes, [full_caption(s) for s in scenes])
    with T.Tape():
        loss = mlm_loss(m, imgs, txts, np.random.default_rng(0), mask_id=VOCAB.mask_id)
    assert 0 < float(loss.data) <= math.log(len(VOCAB)) + 1


def test_phrase_loss_is_sum_and_subject_drops_mlm(tiny_data):
    scenes, _, pairs = tiny_data
    m = HistModel(tiny_config())
    imgs, txts = batches(m, scenes[:4], [s.captions[0] for s in scenes[:4]])
    st_ = LossSettings()
    with T.Tape():
        lp, parts, _ = phrase_loss(m, imgs, txts, np.random.default_rng(3), st_, VOCAB.mask_id)
        ls, sparts, _ = subject_loss(m, imgs, txts, np.random.default_rng(3), st_)
    assert abs(float(lp.data) - sum(float(v.data) for v in parts.values())) < 1e-12
    assert abs(float(ls.data) - (float(lp.data) - float(parts["mlm"].data))) < 1e-12
    assert set(sparts) == {"itc", "itm"}


# ---------------------------------------------------------------------------
# composition and exclusion


def test_composition_zero_when_additive():
    rng = np.random.default_rng(0)
    gi, gj = rng.random((4, 4)), rng.random((4, 4))
    assert float(composition_loss(gi, gj, gi + gj).data) == 0.0


def test_composition_hand_example():
    gi = np.array([[1.0, 0], [0, 0]])
    gj = np.array([[0, 0], [0, 2.0]])
    gij = np.array([[0.5, 0], [0, 0]])
    assert float(composition_loss(gi, gj, gij).data) == pytest.approx(2.5)


def test_exclusion_zero_on_disjoint_supports():
    gi = np.zeros((4, 4))
    gj = np.zeros((4, 4))
    gi[:2] = np.random.default_rng(0).random((2, 4))
    gj[2:] = np.random.default_rng(1).random((2, 4))
    assert float(exclusion_loss(gi, gj).data) == 0.0


def test_map_shape_mismatch():
    with pytest.raises(T.ShapeError):
        composition_loss(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((3, 3)))
    with pytest.raises(T.ShapeError):
        exclusion_loss(np.zeros((4, 4)), np.zeros((2, 8)))


def test_map_losses_match_loops_100_instances():
    rng = np.random.default_rng(42)
    for _ in range(100):
        P = int(rng.integers(2, 9))
        gi, gj, gij = (np.maximum(rng.normal(size=(P, P)), 0) for _ in range(3))
        assert abs(float(composition_loss(gi, gj, gij).data) - naive_composition(gi, gj, gij)) < 1e-12
        assert abs(float(exclusion_loss(gi, gj).data) - naive_exclusion(gi, gj)) < 1e-12


def test_composition_gradient_wrt_attention():
    """Gradient through the attention factor of the maps, the gradient factor held fixed."""
    rng = np.random.default_rng(7)
    N, H, L, PP = 3, 2, 5, 16
    logits = rng.normal(size=(3 * N, H, L, PP))
    attn_data = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    grad_factor = rng.normal(size=attn_data.shape)
    K = np.array([4, 3, 5])

    def loss_of(attn):
        g = [maps_from_gradient(attn, grad_factor, slice(k * N, (k + 1) * N), K) for k in range(3)]
        return composition_loss(*g) + exclusion_loss(g[0], g[1])

    attn = Tensor(attn_data.copy(), requires_grad=True)
    with T.Tape() as tape:
        loss = loss_of(attn)
    T.backward(loss, tape)
    with T.no_grad():
        fd = central_diff(lambda: float(loss_of(Tensor(attn_data)).data), attn_data)
    assert rel_err(attn.grad, fd) < 1e-6


# ---------------------------------------------------------------------------
# total objective


def test_total_forms_agree_100_draws():
    rng = np.random.default_rng(0)
    for _ in range(100):
        vl, hist, a = rng.random() * 10, rng.random() * 10, rng.random()
        assert abs(combine_total(vl, hist, a) - combine_total(vl, hist, a, simplified=True)) < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1e3), st.floats(0, 1e3), st.floats(0, 1))
def test_total_forms_agree_property(vl, hist, a):
    assert abs(combine_total(vl, hist, a) - combine_total(vl, hist, a, simplified=True)) <= 1e-9 * max(1, vl + hist)


def test_alpha_endpoints():
    assert combine_total(2.0, 3.0, 1.0) == 2.0
    assert combine_total(2.0, 3.0, 0.0) == 5.0
    with pytest.raises(ValueError):
        combine_total(1.0, 1.0, 1.5)


def test_components_nonnegative_1000_random_inputs():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        P = int(rng.integers(2, 6))
        gi, gj, gij = (np.maximum(rng.normal(size=(P, P)), 0) for _ in range(3))
        comp = float(composition_loss(gi, gj, gij).data)
        excl = float(exclusion_loss(gi, gj).data)
        n, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        ce = float(T.cross_entropy(Tensor(rng.normal(size=(n, k)) * 5), rng.integers(0, k, n)).data)
        vl = ce
        hist = ce + comp + excl
        assert comp >= 0 and excl >= 0 and ce >= 0
        assert combine_total(vl, hist, float(rng.random())) >= 0


def test_alpha_schedule():
    s = AlphaSchedule(steps_per_epoch=10, epochs_to_one=2)
    assert s(0) == 0.0 and s(10) == 0.5 and s(20) == 1.0 and s(50) == 1.0
    assert all(s(i) <= s(i + 1) for i in range(30))
    inv = AlphaSchedule(10, 2, inverted=True)
    assert inv(0) == 1.0 and inv(20) == 0.0


def _bundle(model, tuples, scene_map, flags, seed=5, alpha=0.3, settings=None):
    with T.Tape():
        return total_loss(model, VOCAB, tuples, scene_map, alpha, flags, settings, np.random.default_rng(seed))


def test_total_loss_components_nonnegative(tiny_data):
    _, scene_map, pairs = tiny_data
    m = HistModel(tiny_config())
    for seed in range(3):
        b = _bundle(m, pairs[:4], scene_map, LossFlags(True, True, True), seed)
        for k, v in b.scalars().items():
            assert v is not None and v >= 0, k
        assert abs(float(b.total.data) - (float(b.vl.data) + 0.7 * float(b.hist.data))) < 1e-9
        g_i, g_j, g_ij = b.extras["maps"]
        assert g_i.shape == (4, 16) and np.all(g_ij.data >= 0)


def test_total_loss_flags_off(tiny_data):
    _, scene_map, pairs = tiny_data
    m = HistModel(tiny_config())
    b = _bundle(m, pairs[:3], scene_map, LossFlags(False, False, False))
    assert b.subject is None and b.composition is None and b.exclusion is None
    assert "maps" not in b.extras
    assert abs(float(b.hist.data) - float(b.phrase.data)) < 1e-12


def test_total_loss_deterministic(tiny_data):
    _, scene_map, pairs = tiny_data
    m = HistModel(tiny_config())
    a = _bundle(m, pairs[:4], scene_map, LossFlags()).scalars()
    b = _bundle(m, pairs[:4], scene_map, LossFlags()).scalars()
    assert a == b


def test_total_loss_bad_layer(tiny_data):
    _, scene_map, pairs = tiny_data
    with pytest.raises(IndexError):
        _bundle(HistModel(tiny_config()), pairs[:2], scene_map, LossFlags(), settings=LossSettings(layer=5))


def test_total_loss_rejects_bad_alpha(tiny_data):
    _, scene_map, pairs = tiny_data
    with pytest.raises(ValueError):
        _bundle(HistModel(tiny_config()), pairs[:2], scene_map, LossFlags(), alpha=-0.1)


def test_fused_step_matches_per_level_composition(tiny_data):
    """The batched step equals phrase/subject losses computed level by level with one generator."""
    _, scene_map, pairs = tiny_data
    m = HistModel(tiny_config())
    m.momentum_update(np.random.default_rng(0).normal(size=(6, 8)), np.random.default_rng(1).normal(size=(6, 8)))
    tuples = pairs[:5]
    st_ = LossSettings()
    fused = _bundle(m, tuples, scene_map, LossFlags(True, False, False), seed=11, alpha=0.25)

    scenes = [scene_map[t.scene_id] for t in tuples]
    rng = np.random.default_rng(11)
    with T.Tape():
        imgs = ImageBatch(m, np.stack([s.image for s in scenes]), [scene_texts(s, VOCAB) for s in scenes])
        levels = [[full_caption(s) for s in scenes], [t.c_i.text for t in tuples], [t.c_j.text for t in tuples],
                  [t.c_i.subject for t in tuples], [t.c_j.subject for t in tuples]]
        vals = []
        for k, texts in enumerate(levels):
            txts = TextBatch(m, VOCAB, texts)
            if k < 3:
                vals.append(phrase_loss(m, imgs, txts, rng, st_, VOCAB.mask_id)[0])
            else:
                vals.append(subject_loss(m, imgs, txts, rng, st_)[0])
    vl = float(vals[0].data)
    hist = sum(float(v.data) for v in vals[1:])
    assert abs(float(fused.vl.data) - vl) < 1e-10
    assert abs(float(fused.hist.data) - hist) < 1e-10
    assert abs(float(fused.total.data) - combine_total(vl, hist, 0.25)) < 1e-10
