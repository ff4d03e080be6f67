"""Tests for the guidance factory."""

import numpy as np
import pytest

from universal_guidance.errors import InvalidRangeError
from universal_guidance.factory import GuidanceFactory, create_guidance
from universal_guidance.guidance import (
    COMPONENT_CLASSIFIER,
    EMBEDDING_MATCH,
    LABEL_FIELD,
    LINEAR_INVERSE,
    NOISY_CLASSIFIER,
)


def test_list_kinds():
    assert GuidanceFactory.list_kinds() == [
        COMPONENT_CLASSIFIER,
        NOISY_CLASSIFIER,
        LINEAR_INVERSE,
        LABEL_FIELD,
        EMBEDDING_MATCH,
    ]


@pytest.mark.parametrize(
    "alias, kind",
    [
        ("classifier", COMPONENT_CLASSIFIER),
        ("Component_Classifier", COMPONENT_CLASSIFIER),
        ("noisy", NOISY_CLASSIFIER),
        ("Noisy_Classifier", NOISY_CLASSIFIER),
        ("inpainting", LINEAR_INVERSE),
        ("segmentation", LABEL_FIELD),
        ("embedding", EMBEDDING_MATCH),
    ],
)
def test_aliases(alias, kind):
    assert GuidanceFactory.canonical_kind(alias) == kind


def test_unknown_kind_lists_available():
    with pytest.raises(InvalidRangeError) as info:
        GuidanceFactory.create_entry("style")
    assert "Unknown guidance kind: style" in str(info.value)
    assert "linear-inverse" in str(info.value)


def test_unknown_kind_is_value_error():
    with pytest.raises(ValueError):
        GuidanceFactory.canonical_kind("nope")


def test_missing_parameter():
    with pytest.raises(InvalidRangeError, match="'y'"):
        GuidanceFactory.create_entry("linear-inverse", A=[[1.0, 0.0]])


def test_classifier_needs_world():
    with pytest.raises(InvalidRangeError):
        GuidanceFactory.create_entry("component-classifier", target=0)


def test_classifier_spec_needs_target(world):
    with pytest.raises(InvalidRangeError):
        GuidanceFactory.create_spec("classifier", gmm=world)


def test_create_spec_settings(world):
    spec = GuidanceFactory.create_spec("classifier", gmm=world, w=3.0, m=0, target=1, name="clf")
    assert spec.kind == COMPONENT_CLASSIFIER
    assert spec.prompt == 1
    assert spec.strength.w == 3.0
    assert spec.backward_steps == 0
    assert spec.name == "clf"


def test_create_guidance_embedding():
    spec = create_guidance("embedding-match", W=np.eye(2), target=[0.0, 1.0], mode="l1", m=2)
    assert spec.kind == EMBEDDING_MATCH
    assert spec.params["mode"] == "l1"
    assert spec.loss_value(np.array([0.0, 1.0])) == pytest.approx(0.0)


def test_noisy_classifier_spec(world):
    spec = create_guidance("noisy-classifier", gmm=world, target=0, w=2.0, m=0)
    assert spec.kind == NOISY_CLASSIFIER
    assert spec.noisy_world is world
    assert spec.prompt == 0
    # the clean classifier stays available for reports and backward steps
    assert spec.loss_value(np.array([-3.0, 0.0])) < spec.loss_value(np.array([3.0, 0.0]))


def test_noisy_classifier_needs_world_and_target(world):
    with pytest.raises(InvalidRangeError, match="world mixture"):
        GuidanceFactory.create_entry("noisy-classifier", target=0)
    with pytest.raises(InvalidRangeError, match="target class"):
        GuidanceFactory.create_spec("noisy", gmm=world)
