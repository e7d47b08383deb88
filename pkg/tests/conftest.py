"""Shared fixtures: synthetic source/target frame sets and once-per-session source models."""

import pytest

from canids.framing import (DEFAULT_SOURCE_STRIDE, DEFAULT_TARGET_STRIDE, FrameSet, LabelSpace,
                            build_frames, split_train_test)
from canids.traffic_synth import SCENARIOS, generate_scenario
from canids.train import (CE_BASELINE_DEFAULTS, CLASSIFIER_DEFAULTS, SUPCON_DEFAULTS,
                          train_ce_baseline, train_linear_classifier, train_supcon_encoder)

# Desk-scale source budgets (the full recipe is 150 epochs).
SOURCE_EPOCHS = 3
SUPCON_SOURCE = SUPCON_DEFAULTS.replace(epochs=SOURCE_EPOCHS, batch_size=128)
CE_SOURCE = CE_BASELINE_DEFAULTS.replace(epochs=SOURCE_EPOCHS, batch_size=128, lr=0.01)

ACCEPTANCE_RESULTS: list[str] = []


def scenario_frames(name: str, seed: int, stride: int) -> FrameSet:
    space = LabelSpace(SCENARIOS[name].labels)
    caps = generate_scenario(name, seed=seed)
    return FrameSet.concat([build_frames(c.records, stride, space.index(c.class_name), space, c.name)
                            for c in caps])


@pytest.fixture(scope="session")
def source_split():
    return split_train_test(scenario_frames("source", 0, DEFAULT_SOURCE_STRIDE), 0.7, seed=0)


@pytest.fixture(scope="session")
def target_frames():
    return scenario_frames("target", 1, DEFAULT_TARGET_STRIDE)


@pytest.fixture(scope="session")
def supcon_source(source_split):
    train, _ = source_split
    model, trace = train_supcon_encoder(train, SUPCON_SOURCE)
    model, head = train_linear_classifier(model, train, CLASSIFIER_DEFAULTS)
    return model, [trace, head]


@pytest.fixture(scope="session")
def ce_source(source_split):
    train, _ = source_split
    model, trace = train_ce_baseline(train, CE_SOURCE)
    return model, [trace]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
