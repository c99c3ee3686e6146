from dataclasses import replace

import numpy as np
import pytest
from PIL import Image

from ptinet.domain import PredictionOutput
from ptinet.plotting import (BAR_COLOR, BAR_GAP, BAR_WIDTH, GT_COLOR, INSET_HEIGHT, PRED_COLOR,
                             box_corners, emit_qualitative_plot, inset_geometry, render_qualitative)

from conftest import make_sample


@pytest.fixture
def sample():
    s = make_sample(dims=(24, 42))
    return replace(s, image_dims=(240, 420))


def _outline_mask(img, color):
    arr = np.asarray(img)
    return np.all(arr == np.array(color, np.uint8), axis=-1)


def test_plot_file_decodes(sample, tmp_path):
    pred = PredictionOutput(sample.future_boxes + 3.0, np.linspace(0, 1, 15))
    path = emit_qualitative_plot(sample, pred, str(tmp_path / "p.png"))
    assert (tmp_path / "p.png").stat().st_size > 0
    with Image.open(path) as img:
        assert img.format == "PNG" and img.size == (420, 240)


def test_prediction_equal_to_truth_coincides(sample):
    exact = render_qualitative(sample, PredictionOutput(sample.future_boxes, np.zeros(15)))
    red = _outline_mask(exact, PRED_COLOR)
    # red outline fully covers the white one: no white pixel survives on it
    x0, y0, x1, y1 = box_corners(sample.future_boxes[-1])
    outline = np.zeros_like(red)
    outline[y0:y1 + 1, [x0, x1]] = True
    outline[[y0, y1], x0:x1 + 1] = True
    assert np.array_equal(red & outline, outline)
    assert not (_outline_mask(exact, GT_COLOR) & outline).any()
    # same outline the white box gets when drawn alone
    far = sample.future_boxes + np.array([-60.0, -60.0, 0, 0])
    apart = render_qualitative(sample, PredictionOutput(far, np.zeros(15)))
    white = _outline_mask(apart, GT_COLOR)
    assert np.array_equal(white & outline, outline)


def test_full_probability_bars(sample):
    img = np.asarray(render_qualitative(sample, PredictionOutput(sample.future_boxes, np.ones(15))))
    left, top, right, bottom = inset_geometry(15, sample.image_dims)
    for i in range(15):
        x = left + i * (BAR_WIDTH + BAR_GAP)
        column = np.all(img[top:bottom, x] == np.array(BAR_COLOR, np.uint8), axis=-1)
        assert column.all() and column.size == INSET_HEIGHT


def test_zero_probability_no_bars(sample):
    img = np.asarray(render_qualitative(sample, PredictionOutput(sample.future_boxes, np.zeros(15))))
    left, top, right, bottom = inset_geometry(15, sample.image_dims)
    assert not np.all(img[top:bottom, left:right + 1] == np.array(BAR_COLOR, np.uint8), axis=-1).any()


def test_unwritable_path(sample, tmp_path):
    pred = PredictionOutput(sample.future_boxes, np.zeros(15))
    with pytest.raises(OSError):
        emit_qualitative_plot(sample, pred, str(tmp_path / "missing" / "dir" / "p.png"))
