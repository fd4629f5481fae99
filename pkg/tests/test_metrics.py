"""Pixel metrics, average precision oracle, aggregation and report I/O."""

import csv
import math

import numpy as np
import pytest
import torch

from hetseg.errors import DataError
from hetseg.metrics import (
    MetricsRecord,
    aggregate,
    average_precision,
    emit_plots,
    emit_report,
    evaluate_patients,
    load_report,
    pixel_metrics,
)


def one_hot_from_class1(p1: torch.Tensor) -> torch.Tensor:
    return torch.stack([1.0 - p1, p1])


def brute_force_ap(scores: np.ndarray, truth: np.ndarray) -> float | None:
    """Per-positive rank walk: precision at each positive's tie-group boundary."""
    pos = np.flatnonzero(truth)
    if len(pos) == 0:
        return None
    precisions = []
    for i in pos:
        at_least = scores >= scores[i]
        precisions.append(truth[at_least].sum() / at_least.sum())
    return float(np.mean(precisions))


# ---------------------------------------------------------------------------
# pixel metrics
# ---------------------------------------------------------------------------


def test_perfect_prediction():
    t1 = torch.zeros(4, 4)
    t1[1, 1] = 1.0
    m = pixel_metrics(one_hot_from_class1(t1), one_hot_from_class1(t1))
    assert m == (1.0, 1.0, 1.0)


def test_empty_prediction_nonempty_truth():
    t1 = torch.zeros(4, 4)
    t1[0, 0] = 1.0
    p1 = torch.zeros(4, 4)
    m = pixel_metrics(one_hot_from_class1(p1), one_hot_from_class1(t1))
    assert m == (0.0, 0.0, 0.0)


def test_empty_truth_empty_prediction_convention():
    z = one_hot_from_class1(torch.zeros(4, 4))
    assert pixel_metrics(z, z) == (1.0, 1.0, 1.0)


def test_counts_example():
    # TP=2, FP=1, FN=2 within a 3x3 grid
    t1 = torch.tensor([[1, 1, 1], [1, 0, 0], [0, 0, 0]], dtype=torch.float32)
    p1 = torch.tensor([[1, 1, 0], [0, 0, 1], [0, 0, 0]], dtype=torch.float32)
    recall, precision, dsc = pixel_metrics(one_hot_from_class1(p1), one_hot_from_class1(t1))
    assert recall == pytest.approx(0.5)
    assert precision == pytest.approx(2 / 3)
    assert dsc == pytest.approx(4 / 7)


def test_dsc_harmonic_identity_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p1 = torch.tensor(rng.integers(0, 2, (6, 6)), dtype=torch.float32)
        t1 = torch.tensor(rng.integers(0, 2, (6, 6)), dtype=torch.float32)
        recall, precision, dsc = pixel_metrics(
            one_hot_from_class1(p1), one_hot_from_class1(t1)
        )
        if precision + recall > 0:
            assert dsc == pytest.approx(
                2 * precision * recall / (precision + recall), abs=1e-9
            )
        assert 0.0 <= recall <= 1.0 and 0.0 <= precision <= 1.0 and 0.0 <= dsc <= 1.0


def test_shape_mismatch_rejected():
    with pytest.raises(DataError):
        pixel_metrics(torch.zeros(2, 3, 3), torch.zeros(2, 3, 4))


def test_patient_pooling_invariant_to_slice_order():
    rng = np.random.default_rng(1)
    slices_p = [one_hot_from_class1(torch.tensor(rng.integers(0, 2, (4, 4)),
                                                 dtype=torch.float32)) for _ in range(3)]
    slices_t = [one_hot_from_class1(torch.tensor(rng.integers(0, 2, (4, 4)),
                                                 dtype=torch.float32)) for _ in range(3)]
    a = pixel_metrics(torch.stack(slices_p), torch.stack(slices_t))
    perm = [2, 0, 1]
    b = pixel_metrics(torch.stack([slices_p[i] for i in perm]),
                      torch.stack([slices_t[i] for i in perm]))
    assert a == b


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------


def test_ap_all_positives_ranked_first():
    scores = torch.tensor([0.9, 0.8, 0.3, 0.2])
    truth = torch.tensor([1.0, 1.0, 0.0, 0.0])
    assert average_precision(scores, truth) == pytest.approx(1.0)


def test_ap_scores_equal_truth():
    truth = torch.tensor([1.0, 0.0, 1.0, 0.0, 0.0])
    assert average_precision(truth.clone(), truth) == pytest.approx(1.0)


def test_ap_tie_group_boundary():
    scores = torch.tensor([0.9, 0.9])
    truth = torch.tensor([1.0, 0.0])
    # the tied pair forms one group: precision at its boundary is 1/2
    assert average_precision(scores, truth) == pytest.approx(0.5)


def test_ap_all_ties():
    scores = torch.full((10,), 0.4)
    truth = torch.zeros(10)
    truth[:3] = 1.0
    assert average_precision(scores, truth) == pytest.approx(0.3)


def test_ap_all_positive():
    scores = torch.rand(20)
    truth = torch.ones(20)
    assert average_precision(scores, truth) == pytest.approx(1.0)


def test_ap_no_positives_returns_none():
    assert average_precision(torch.rand(5), torch.zeros(5)) is None


def test_ap_matches_bruteforce_oracle():
    rng = np.random.default_rng(2)
    for trial in range(100):
        n = int(rng.integers(1, 101))
        scores = rng.choice([0.1, 0.25, 0.5, 0.5, 0.9], size=n).astype(np.float64)
        if trial % 3 == 0:
            scores = rng.uniform(size=n)
        truth = (rng.uniform(size=n) < 0.4).astype(np.float64)
        got = average_precision(torch.tensor(scores), torch.tensor(truth))
        want = brute_force_ap(scores, truth)
        if want is None:
            assert got is None
        else:
            assert got == pytest.approx(want, abs=1e-9)


def test_evaluate_patients_logs_undefined_ap(caplog):
    # one patient with a single slice, stacked as [slices, classes, H, W]
    soft = {"p0": torch.stack([one_hot_from_class1(torch.zeros(4, 4))])}
    truth = {"p0": torch.stack([one_hot_from_class1(torch.zeros(4, 4))])}
    import logging

    with caplog.at_level(logging.INFO, logger="hetseg.metrics"):
        out = evaluate_patients(soft, truth)
    assert math.isnan(out["ap"])
    assert any("undefined" in r.message for r in caplog.records)
    assert out["recall"] == 1.0  # empty-empty convention


# ---------------------------------------------------------------------------
# aggregation and reports
# ---------------------------------------------------------------------------


def rec(fold, seed, value):
    return MetricsRecord(fold=fold, seed=seed, recall=value, precision=value,
                         dsc=value, ap=value)


def test_aggregate_single_record_zero_std():
    report = aggregate([rec(0, 0, 0.5)])
    assert report.aggregate["dsc"] == {"mean": 0.5, "std": 0.0}


def test_aggregate_population_std():
    report = aggregate([rec(0, 0, 0.4), rec(1, 0, 0.6)])
    assert report.aggregate["dsc"]["mean"] == pytest.approx(0.5)
    assert report.aggregate["dsc"]["std"] == pytest.approx(0.1)


def test_aggregate_empty_rejected():
    with pytest.raises(DataError):
        aggregate([])


def test_report_round_trip(tmp_path):
    report = aggregate([rec(0, 0, 0.123456789), rec(1, 3, 0.9)])
    json_path, csv_path = emit_report(report, tmp_path)
    restored = load_report(json_path)
    assert restored.records == report.records
    assert restored.aggregate == report.aggregate
    with csv_path.open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["fold"] for r in rows] == ["0", "1"]
    assert float(rows[0]["dsc"]) == report.records[0].dsc
    assert list(rows[0]) == ["fold", "seed", "recall", "precision", "dsc", "ap"]


def test_emit_plots_writes_image(tmp_path):
    series = {"method": [(0.0, 0.5), (1.0, 0.7)], "target-only": [(0.5, 0.3), (1.0, 0.6)]}
    path = emit_plots(series, tmp_path, metric="dsc")
    assert path.exists() and path.stat().st_size > 0


def test_lesion_preservation_score_matches_definition():
    """The score is exactly the mean soft dice of the frozen source segmenter
    on seeded cycle reconstructions."""
    import torch

    from hetseg.data import DomainSpec, SyntheticTaskConfig, generate_synthetic_task
    from hetseg.losses import semantic_cycle_loss
    from hetseg.metrics import lesion_preservation_score
    from hetseg.segmentation import SegmenterConfig, build_segmenter
    from hetseg.seeding import derive_seed, torch_generator
    from hetseg.translation import NetConfig, build_translation_model

    task = SyntheticTaskConfig(
        source_spec=DomainSpec("source", 3, 16, 16),
        target_spec=DomainSpec("target", 4, 16, 16),
        lesion_count_range=(1, 2),
        lesion_radius_range=(2.0, 3.0),
        channel_mixing_seed=9,
        num_patients_source=2,
        num_patients_target=2,
        slices_per_patient=1,
    )
    source, _, _ = generate_synthetic_task(task)
    tm = build_translation_model(
        task.source_spec, task.target_spec,
        NetConfig(base_dim=8, content_channels=32, n_res_encoder=1, n_res_decoder=1,
                  style_dim=4, mlp_hidden=8, disc_base_dim=8, disc_layers=2),
        seed=0,
    )
    seg = build_segmenter(SegmenterConfig(in_channels=3, base_dim=8, norm_groups=4,
                                          num_down=2), seed=0)
    got = lesion_preservation_score(tm, seg, source, seed=5)
    expected = []
    with torch.no_grad():
        for idx, sample in enumerate(source):
            gen = torch_generator(derive_seed(5, "preservation-style", idx))
            cycled = tm.cycle(sample.image, "source", tm.sample_style_prior(gen))
            expected.append(-float(semantic_cycle_loss(seg(cycled), sample.mask)))
    assert got == pytest.approx(float(np.mean(expected)), abs=1e-12)
    assert 0.0 <= got <= 1.0
