from pathlib import Path

import pytest

from modelcollab.core import GenerationParams, MockBackend, ModelDescriptor, ModelPool
from modelcollab.evalkit import DatasetRecord

DATA = Path(__file__).resolve().parents[1] / "src" / "modelcollab" / "data"
CONFIGS = DATA / "configs"

VOCAB = ["<eos>", "a", "b", "c", "d"]
GREEDY = GenerationParams(max_new_tokens=8, temperature=0.0)


def mock(mid, answers=None, *, description="", vocab_group="default", param_count=0, **script):
    desc = ModelDescriptor(mid, description=description, vocab_group=vocab_group, param_count=param_count)
    return MockBackend(desc, {"answers": answers or {}, **script})


def token_mock(mid, distributions, vocab=VOCAB, group="v", **kw):
    """Mock over a small shared vocabulary with scripted next-token tables."""
    return MockBackend(ModelDescriptor(mid, vocab_group=group),
                       {"vocab": vocab, "eos_id": 0, "distributions": distributions}, **kw)


def pool(*backends):
    return ModelPool(backends)


def mc(rid, prompt, gold, task=None, domain="knowledge"):
    return DatasetRecord(rid, prompt, "multiple_choice", domain, (gold,), task)


def onehot(i, n=len(VOCAB)):
    v = [0.0] * n
    v[i] = 1.0
    return v


@pytest.fixture
def out_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path / "runs"
