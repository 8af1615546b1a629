import copy

import pytest
import torch

from ntprune.datasets import SyntheticPairConfig, generate_synthetic_domain_pair, train_test_split
from ntprune.model import build_model
from ntprune.transferability import train_classifier

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_pair():
    """8x8 glyph pair split into (source_train, source_test, target_train, target_test)."""
    cfg = SyntheticPairConfig(num_classes=4, per_class=60, image_size=(8, 8, 3),
                              shift="background_noise", seed=3)
    src, tgt = generate_synthetic_domain_pair(cfg)
    s_tr, s_te = train_test_split(src, 0.25, seed=0)
    t_tr, t_te = train_test_split(tgt, 0.25, seed=1)
    return s_tr, s_te, t_tr, t_te


@pytest.fixture(scope="session")
def _tiny_pretrained(tiny_pair):
    s_tr = tiny_pair[0]
    model = build_model("micro_cnn", num_classes=4, seed=0)
    train_classifier(model, s_tr, epochs=40, lr=1e-2, batch_size=32, seed=0, scheme="FF",
                     step_size=20, step_gamma=0.3)
    return model


@pytest.fixture
def tiny_pretrained(_tiny_pretrained):
    return copy.deepcopy(_tiny_pretrained)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Record one PASS/FAIL line for an acceptance criterion and assert on it."""
    def record(criterion: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        _VERDICTS.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
