"""Tests for the scatter SVG emitter."""

import xml.etree.ElementTree as ET

import numpy as np
import pytest

from universal_guidance.errors import DimensionMismatchError
from universal_guidance.guidance import GuidanceSpec, make_label_field, make_linear_inverse
from universal_guidance.models import GaussianMixture
from universal_guidance.plotting import emit_scatter_svg

SVG = "{http://www.w3.org/2000/svg}"


def _by_class(svg_text):
    root = ET.fromstring(svg_text.encode("utf-8"))
    found = {}
    for element in root.iter():
        cls = element.get("class")
        if cls:
            found.setdefault(cls, []).append(element)
    return root, found


def test_default_world_geometry(world, rng):
    samples = rng.standard_normal((25, 2))
    root, found = _by_class(emit_scatter_svg(samples, world))
    assert root.tag == f"{SVG}svg"
    assert len(found["mean-marker"]) == 2
    assert len(found["ellipse"]) == 4
    assert len(found["sample"]) == 25
    assert all(el.tag == f"{SVG}circle" for el in found["mean-marker"])


def test_deterministic(world, rng):
    samples = rng.standard_normal((10, 2))
    assert emit_scatter_svg(samples, world) == emit_scatter_svg(samples.copy(), world)


def test_empty_samples(world):
    _, found = _by_class(emit_scatter_svg(np.zeros((0, 2)), world))
    assert "sample" not in found
    assert len(found["mean-marker"]) == 2


def test_non_finite_samples_skipped(world):
    samples = np.array([[0.0, 0.0], [np.nan, 1.0]])
    _, found = _by_class(emit_scatter_svg(samples, world))
    assert len(found["sample"]) == 1


def test_overlays(world, rng):
    overlays = [
        GuidanceSpec.from_entry(make_linear_inverse([[1.0, 0.0]], [2.0])),
        GuidanceSpec.from_entry(make_label_field([1, 0])),
    ]
    _, found = _by_class(emit_scatter_svg(rng.standard_normal((5, 2)), world, overlays))
    assert len(found["mask-line"]) == 1
    assert len(found["label-region"]) == 2
    line = found["mask-line"][0]
    assert line.get("x1") == line.get("x2")


def test_rejects_other_dimensions(rng):
    world_3d = GaussianMixture(
        weights=[1.0], means=[[0.0, 0.0, 0.0]], covariances=[[1.0, 1.0, 1.0]]
    )
    with pytest.raises(DimensionMismatchError):
        emit_scatter_svg(rng.standard_normal((4, 3)), world_3d)


def test_rejects_sample_width(world):
    with pytest.raises(DimensionMismatchError):
        emit_scatter_svg(np.zeros((3, 3)), world)


def test_label_regions_shade_labelled_half_planes(world):
    spec = GuidanceSpec.from_entry(make_label_field([1, 0]))
    svg = emit_scatter_svg(np.array([[1.0, -1.0]]), world, [spec])
    _, found = _by_class(svg)
    x_region, y_region = found["label-region"]
    assert x_region.tag == f"{SVG}rect"
    assert "fill-opacity" in x_region.get("style")
    # x > 0 is the right part of the canvas, y < 0 the lower part
    assert float(x_region.get("x")) > 16.0
    assert float(y_region.get("y")) > 16.0
    assert float(y_region.get("width")) == pytest.approx(480.0 - 2 * 16.0)
