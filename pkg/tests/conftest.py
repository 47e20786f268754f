import numpy as np
import pytest

from histalign.captions import Vocab, pairs_for_scenes
from histalign.model import HistModel, ModelConfig
from histalign.scenes import SceneConfig, generate_dataset


def tiny_config(**kw) -> ModelConfig:
    """P=4, 2 fusion layers, 2 heads: small enough for finite differences."""
    base = dict(P=4, d_pix=4, d_v=8, d_t=8, n_heads=2, n_cross_layers=2, vocab_size=25, max_tokens=10,
                d_ff=8, embed_dim=8, queue_size=16, momentum=0.9, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_scene_config() -> SceneConfig:
    return SceneConfig(P=4, n_objects=(2, 2), d_pix=4)


@pytest.fixture
def vocab():
    return Vocab.default()


@pytest.fixture
def tiny_model():
    return HistModel(tiny_config())


@pytest.fixture
def tiny_data(vocab):
    scenes = generate_dataset(6, 0, tiny_scene_config())
    pairs = pairs_for_scenes(scenes, vocab, 0)
    return scenes, {s.scene_id: s for s in scenes}, pairs


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance criteria register (name, passed, detail) here; printed after the run
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
