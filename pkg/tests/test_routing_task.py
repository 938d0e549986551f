"""Tests for the synthetic routing data, its oracle and the view probes."""

import numpy as np
import pytest
import torch

from app.core.adapters import mock_encoders, mock_text_encoder
from app.core.routing_task import (
    CLASS_NAMES,
    INFORMATIVE_ENCODER,
    INSTRUCTION_TEMPLATES,
    RoutingTaskSpec,
    ThresholdOracle,
    encode_dataset,
    generate_task,
    probe_views,
    render_image,
    view_statistic,
)


@pytest.fixture(scope="module")
def encoders():
    return mock_encoders()


@pytest.fixture(scope="module")
def small_task():
    return generate_task(RoutingTaskSpec(samples_per_class=16, seed=5))


def test_generate_task_is_balanced_and_seeded(small_task):
    assert len(small_task) == 64
    assert small_task.class_names == list(CLASS_NAMES)
    for cls in range(4):
        labels = small_task.labels[small_task.class_index == cls]
        assert torch.bincount(labels, minlength=4).tolist() == [4, 4, 4, 4]
    assert small_task.images.min() >= 0 and small_task.images.max() <= 1
    again = generate_task(RoutingTaskSpec(samples_per_class=16, seed=5))
    assert torch.equal(again.images, small_task.images)
    assert again.instructions == small_task.instructions
    other = generate_task(RoutingTaskSpec(samples_per_class=16, seed=6))
    assert not torch.equal(other.images, small_task.images)


def test_labels_match_attribute_levels(small_task):
    for i in range(len(small_task)):
        cls = int(small_task.class_index[i])
        assert small_task.levels[i, cls] == small_task.labels[i]


def test_encode_dataset_shapes(small_task, encoders):
    text = mock_text_encoder(dim=8)
    encoded = encode_dataset(small_task, encoders, text)
    assert [tuple(f.shape[1:]) for f in encoded.features] == [enc.native_shape for enc in encoders]
    assert encoded.text.shape == (64, 8)
    assert len(encoded.take(torch.arange(5))) == 5


@pytest.mark.parametrize("class_name", ["color", "tone", "subject"])
def test_informative_statistic_ignores_other_attributes(encoders, class_name):
    spec = RoutingTaskSpec()
    cls = CLASS_NAMES.index(class_name)
    encoder = encoders[spec.informative_index(class_name)]
    rng = np.random.default_rng(0)
    images = []
    for layout in range(4):
        levels = [int(v) for v in rng.integers(0, 4, size=4)]
        levels[cls] = 2
        images.append(render_image(tuple(levels), layout, 32))
    pooled = encoder.encode_batch(torch.from_numpy(np.stack(images)).float()).mean(dim=(2, 3))
    stats = view_statistic(class_name, pooled)
    assert torch.allclose(stats, stats[0].expand_as(stats), atol=1e-4)


def test_threshold_oracle_recovers_labels(small_task, encoders):
    oracle = ThresholdOracle(RoutingTaskSpec(), encoders)
    for cls, name in enumerate(small_task.class_names):
        mask = small_task.class_index == cls
        predicted = oracle.predict(name, small_task.images[mask])
        accuracy = (predicted == small_task.labels[mask]).double().mean().item()
        assert accuracy >= 0.95, name


def test_probe_finds_color_in_downsample_view(small_task):
    results = probe_views(small_task, mock_encoders(["downsample"]))
    assert results["downsample"]["color"] >= 0.95


def test_only_the_informative_view_predicts_each_class(encoders):
    results = probe_views(generate_task(RoutingTaskSpec()), encoders)
    for class_name in CLASS_NAMES:
        for view, accuracy in results.items():
            if view == INFORMATIVE_ENCODER[class_name]:
                assert accuracy[class_name] >= 0.95, (view, class_name)
            else:
                assert accuracy[class_name] <= 0.60, (view, class_name)


def test_single_class_task():
    task = generate_task(RoutingTaskSpec(num_classes=1, samples_per_class=8, seed=2))
    assert len(task) == 8
    assert task.class_names == ["color"]
    assert torch.equal(task.class_index, torch.zeros(8, dtype=torch.long))
    assert torch.bincount(task.labels, minlength=4).tolist() == [2, 2, 2, 2]
    assert set(task.instructions) == {INSTRUCTION_TEMPLATES["color"][0]}
    encoded = encode_dataset(task, mock_encoders(["downsample"]), mock_text_encoder(dim=8))
    assert encoded.class_names == ["color"]
    assert torch.equal(encoded.text, encoded.text[:1].expand(8, -1))
