"""End-to-end training on the routing task (slow: trains the default toy)."""

import pytest

from app.core.adapters import MOCK_ENCODER_NAMES
from app.core.fusor import VisionFusor
from app.core.introspection import forced_gate_matrix, full_mode_report, gate_reports_by_class
from app.core.routing_task import INFORMATIVE_ENCODER
from app.core.training import (
    ToySettings,
    evaluate_accuracy,
    prepare_toy,
    resolve_fusor_config,
    train,
    train_baseline,
)

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def trained():
    settings = ToySettings()
    setup = prepare_toy(settings)
    model = VisionFusor(resolve_fusor_config(settings, setup.encoders))
    result = train(model, setup.train_data, settings.train)
    return setup, result


def test_holdout_accuracy(trained):
    setup, result = trained
    accuracy = evaluate_accuracy(result.model, result.head, setup.holdout_data)
    assert accuracy["overall"] >= 0.90
    assert result.losses[-1] < result.losses[0]


def test_gates_route_to_informative_encoder(trained):
    setup, result = trained
    reports = gate_reports_by_class(result.model, setup.holdout_data)
    routed = [r.layer_argmax(1) == MOCK_ENCODER_NAMES.index(INFORMATIVE_ENCODER[r.label]) for r in reports]
    assert sum(routed) >= 3, reports


def test_full_mode_beats_trained_baseline(trained):
    setup, result = trained
    baseline_result = train_baseline(setup)
    full = full_mode_report(result.model, result.head, setup.holdout_data)
    baseline = full_mode_report(baseline_result.model, baseline_result.head, setup.holdout_data)
    assert full.overall_accuracy >= baseline.overall_accuracy
    assert full.overall_total == baseline.overall_total == len(setup.holdout_data)


def test_forced_gate_matrix_peaks_on_informative_encoder(trained):
    setup, result = trained
    matrix = forced_gate_matrix(result.model, result.head, setup.holdout_data)
    assert set(matrix) == set(setup.holdout_data.class_names)
    peaks = [
        max(range(len(acc)), key=lambda k: acc[k]) == MOCK_ENCODER_NAMES.index(INFORMATIVE_ENCODER[name])
        for name, acc in matrix.items()
    ]
    assert sum(peaks) >= 3, matrix


def test_instructions_change_first_layer_gates(trained):
    setup, result = trained
    reports = gate_reports_by_class(result.model, setup.holdout_data)
    spread = max(
        max(abs(a - b) for a, b in zip(first.layers[0], second.layers[0]))
        for first in reports
        for second in reports
    )
    assert spread >= 0.1
