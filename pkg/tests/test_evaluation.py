from __future__ import annotations

import csv

import numpy as np
import pytest

from app.augment import PerturbRanges, build_regression_samples
from app.evaluation import (
    SweepResult,
    evaluate_occlusion_sweep,
    make_sweep_sequences,
    occluder_box,
    plot_sweep,
    write_csv,
)
from app.models import BoundingBox
from app.regressor import CascadeConfig, train_cascade
from app.synth import SynthConfig, gen_synthetic_dataset

from conftest import SMALL_FACES


class TestOccluderBox:
    def test_area_and_placement(self):
        face = BoundingBox(10.0, 20.0, 40.0, 80.0)
        x0, y0, x1, y1 = occluder_box(face, 0.25)
        assert (x1 - x0, y1 - y0) == (20, 40)
        assert (x0 + x1) / 2 == pytest.approx(30.0, abs=0.5)
        assert (y0 + y1) / 2 == pytest.approx(80.0, abs=0.5)

    def test_zero_coverage_is_empty(self):
        x0, y0, x1, y1 = occluder_box(BoundingBox(0.0, 0.0, 40.0, 40.0), 0.0)
        assert x0 == x1 and y0 == y1

    @pytest.mark.parametrize("coverage", [-0.1, 1.5])
    def test_range(self, coverage):
        with pytest.raises(ValueError):
            occluder_box(BoundingBox(0.0, 0.0, 1.0, 1.0), coverage)


def test_sweep_on_tiny_model(rig, tiny_model, tmp_path):
    sequences = make_sweep_sequences(rig, count=1, frames=3, cfg=SMALL_FACES, seed=1)
    result = evaluate_occlusion_sweep({"masked": (tiny_model, True), "unmasked": (tiny_model, False)}, sequences, rig, coverages=(0.0, 0.3))
    assert result.coverages == [0.0, 0.3]
    assert set(result.errors) == {"masked", "unmasked"}
    assert all(np.isfinite(v) and v >= 0.0 for values in result.errors.values() for v in values)

    write_csv(result, tmp_path / "sweep.csv")
    with open(tmp_path / "sweep.csv", newline="") as handle:
        rows = list(csv.DictReader(handle))
    assert [float(r["coverage"]) for r in rows] == [0.0, 0.3]
    assert float(rows[1]["masked"]) == pytest.approx(result.errors["masked"][1])

    plot_sweep(result, tmp_path / "sweep.png")
    assert (tmp_path / "sweep.png").stat().st_size > 0


def test_sweep_needs_two_frames(rig, tiny_model):
    sequences = make_sweep_sequences(rig, count=1, frames=1, cfg=SMALL_FACES)
    with pytest.raises(ValueError, match="two frames"):
        evaluate_occlusion_sweep({"masked": (tiny_model, True)}, sequences, rig)


def test_rows():
    result = SweepResult(coverages=[0.0, 0.5], errors={"a": [0.1, 0.2]})
    assert result.rows() == [{"coverage": 0.0, "a": 0.1}, {"coverage": 0.5, "a": 0.2}]


@pytest.mark.slow
def test_masked_training_degrades_less_under_occlusion(rig):
    cfg = SynthConfig(image_size=128)
    faces = gen_synthetic_dataset(rig, 300, cfg, np.random.default_rng(0))
    ranges = PerturbRanges(expression_count=3, other_count=1)
    cascade = CascadeConfig(seed=0, workers=4)
    masked = train_cascade(build_regression_samples(faces, rig, ranges, np.random.default_rng(1)), rig, cascade)
    unmasked = train_cascade(
        build_regression_samples(faces, rig, ranges, np.random.default_rng(1), masked=False), rig, cascade
    )
    sequences = make_sweep_sequences(rig, count=3, frames=180, cfg=cfg, seed=3)
    assert [len(seq) for seq in sequences] == [180, 180, 180]
    result = evaluate_occlusion_sweep({"masked": (masked, True), "unmasked": (unmasked, False)}, sequences, rig)
    for coverage, masked_error, unmasked_error in zip(result.coverages, result.errors["masked"], result.errors["unmasked"]):
        if coverage >= 0.2:
            assert masked_error < unmasked_error
    at_40 = result.coverages.index(0.4)
    assert result.errors["masked"][at_40] < 0.5 * result.errors["unmasked"][at_40]
