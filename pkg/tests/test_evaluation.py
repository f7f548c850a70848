import csv
import math

import numpy as np
import pytest

from nmenc.evaluation import (
    AGG_LABEL,
    ParcelScores,
    UndefinedCorrelationError,
    aggregate,
    export_report,
    pearson,
    score_parcels,
)
from nmenc.io import DataError, read_bold_file


def test_known_value_point_eight():
    pred = [1.0, 2.0, 3.0, 4.0, 5.0]
    actual = [1.0, 2.0, 3.0, 4.0, 10.0]
    manual = np.corrcoef(pred, actual)[0, 1]
    rho = pearson(pred, actual)
    assert rho == pytest.approx(manual, abs=1e-15)
    assert 0.75 < rho < 0.95


def test_perfect_and_anti_correlation():
    x = np.array([0.0, 1.0, 2.0, 5.0])
    assert pearson(x, 3 * x + 2) == pytest.approx(1.0, abs=1e-12)
    assert pearson(x, -0.5 * x + 7) == pytest.approx(-1.0, abs=1e-12)


def test_scale_and_shift_invariance():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=50), rng.normal(size=50)
    base = pearson(a, b)
    assert pearson(2.5 * a + 3, b) == pytest.approx(base, abs=1e-12)
    assert pearson(a, 0.1 * b - 9) == pytest.approx(base, abs=1e-12)
    assert pearson(-a, b) == pytest.approx(-base, abs=1e-12)


def test_symmetry():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=30), rng.normal(size=30)
    assert pearson(a, b) == pearson(b, a)


def test_orthogonal_series():
    assert pearson([1.0, -1.0, 1.0, -1.0],
                   [1.0, 1.0, -1.0, -1.0]) == pytest.approx(0.0, abs=1e-15)


def test_zero_variance_raises():
    with pytest.raises(UndefinedCorrelationError):
        pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(UndefinedCorrelationError):
        pearson([1.0, 2.0, 3.0], [5.0, 5.0, 5.0])


def test_input_validation():
    with pytest.raises(DataError):
        pearson([1.0], [2.0])
    with pytest.raises(DataError):
        pearson([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(DataError):
        pearson([1.0, np.nan], [1.0, 2.0])


def test_score_parcels_matches_scalar_calls():
    rng = np.random.default_rng(2)
    pred = rng.normal(size=(40, 6))
    actual = rng.normal(size=(40, 6))
    scores = score_parcels(pred, actual)
    assert scores.n_samples_used == 40
    for j in range(6):
        assert scores.defined[j]
        assert scores.rho[j] == pytest.approx(
            pearson(pred[:, j], actual[:, j]), abs=1e-14)


def test_score_parcels_flags_undefined_columns():
    rng = np.random.default_rng(3)
    pred = rng.normal(size=(20, 4))
    actual = rng.normal(size=(20, 4))
    pred[:, 2] = 7.0  # constant prediction for one parcel
    scores = score_parcels(pred, actual)
    assert scores.defined.tolist() == [True, True, False, True]
    assert math.isnan(scores.rho[2])
    assert scores.n_defined == 3
    # mean skips the undefined parcel
    expected = np.mean([scores.rho[j] for j in (0, 1, 3)])
    assert scores.parcel_mean == pytest.approx(expected, abs=1e-14)


def test_all_undefined_mean_raises():
    scores = score_parcels(np.ones((5, 2)), np.random.default_rng(4).normal(size=(5, 2)))
    assert scores.n_defined == 0
    with pytest.raises(DataError):
        scores.parcel_mean


def make_entry(mean, subject, source, tag="linear", n=3):
    rho = np.full(n, mean)
    return ParcelScores(rho=rho, defined=np.ones(n, bool), n_samples_used=10,
                        subject_id=subject, source_id=source, model_tag=tag)


def test_aggregate_unweighted_levels():
    # two subjects, two sources; subject s2 saw only one source
    entries = [
        make_entry(0.2, "s1", "epA"),
        make_entry(0.4, "s1", "epB"),
        make_entry(0.6, "s2", "epA"),
    ]
    rep = aggregate(entries)
    assert rep.by_subject[("s1", "linear")] == pytest.approx(0.3)
    assert rep.by_subject[("s2", "linear")] == pytest.approx(0.6)
    assert rep.by_source[("epA", "linear")] == pytest.approx(0.4)
    assert rep.by_source[("epB", "linear")] == pytest.approx(0.4)
    # grand mean averages the per-source rows, not the raw entries
    assert rep.grand["linear"] == pytest.approx(0.4)


def test_aggregate_two_model_tags_stay_separate():
    entries = [
        make_entry(0.2, "s1", "epA", "linear"),
        make_entry(0.8, "s1", "epA", "attention"),
    ]
    rep = aggregate(entries)
    assert rep.grand == {"attention": pytest.approx(0.8),
                         "linear": pytest.approx(0.2)}


def test_aggregate_summary_table_shape():
    # six held-out sources scored for two subjects each, one model
    rng = np.random.default_rng(5)
    sources = [f"ep-{i}" for i in range(6)]
    entries = [make_entry(float(rng.uniform(0.05, 0.25)), subj, src)
               for src in sources for subj in ("s1", "s2")]
    rep = aggregate(entries)
    assert len(rep.by_source) == 6
    manual_rows = {
        src: np.mean([e.parcel_mean for e in entries if e.source_id == src])
        for src in sources
    }
    for src in sources:
        assert rep.by_source[(src, "linear")] == pytest.approx(manual_rows[src])
    assert rep.grand["linear"] == pytest.approx(
        np.mean(list(manual_rows.values())))


def test_aggregate_order_invariance():
    entries = [make_entry(0.1 * i, f"s{i % 2}", f"ep{i % 3}")
               for i in range(6)]
    rng = np.random.default_rng(6)
    shuffled = [entries[i] for i in rng.permutation(6)]
    a, b = aggregate(entries), aggregate(shuffled)
    assert a.by_subject.keys() == b.by_subject.keys()
    assert a.by_source.keys() == b.by_source.keys()
    for k in a.by_subject:
        assert a.by_subject[k] == pytest.approx(b.by_subject[k], abs=1e-14)
    for k in a.by_source:
        assert a.by_source[k] == pytest.approx(b.by_source[k], abs=1e-14)
    for k in a.grand:
        assert a.grand[k] == pytest.approx(b.grand[k], abs=1e-14)


def test_aggregate_errors():
    with pytest.raises(DataError):
        aggregate([])
    with pytest.raises(DataError):
        aggregate([make_entry(0.1, "s", "a", n=3),
                   make_entry(0.1, "s", "b", n=4)])


def test_export_report_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    pred = rng.normal(size=(30, 5))
    actual = pred * 0.5 + rng.normal(size=(30, 5))
    entries = [
        score_parcels(pred, actual, subject_id="s1", source_id="epA",
                      model_tag="linear"),
        score_parcels(actual, pred, subject_id="s1", source_id="epB",
                      model_tag="linear"),
    ]
    rep = aggregate(entries)
    export_report(rep, tmp_path)

    with open(tmp_path / "report.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    per_entry = [r for r in rows if AGG_LABEL not in (r["subject_id"],
                                                      r["source_id"])]
    assert len(per_entry) == 2
    for row, e in zip(per_entry, entries):
        assert row["subject_id"] == e.subject_id
        assert row["source_id"] == e.source_id
        assert int(row["n_parcels_defined"]) == e.n_defined
        assert int(row["n_samples"]) == e.n_samples_used
        # 17 significant digits round-trip the double exactly
        assert float(row["mean_rho"]) == e.parcel_mean
    grand_rows = [r for r in rows if r["subject_id"] == AGG_LABEL
                  and r["source_id"] == AGG_LABEL]
    assert len(grand_rows) == 1
    assert float(grand_rows[0]["mean_rho"]) == rep.grand["linear"]

    # per-entry parcel vectors are valid files with the scores as one row
    for e in entries:
        stem = f"parcels_{e.subject_id}_{e.source_id}_{e.model_tag}.nmeb"
        back = read_bold_file(tmp_path / stem)
        assert back.values.shape == (1, 5)
        np.testing.assert_allclose(back.values[0], e.rho, atol=1e-7)


def test_export_marks_undefined_parcels(tmp_path):
    rng = np.random.default_rng(8)
    pred = rng.normal(size=(10, 3))
    pred[:, 1] = 0.0
    actual = rng.normal(size=(10, 3))
    rep = aggregate([score_parcels(pred, actual, subject_id="s",
                                   source_id="ep", model_tag="m")])
    export_report(rep, tmp_path)
    back = read_bold_file(tmp_path / "parcels_s_ep_m.nmeb")
    assert back.values[0, 1] == 0.0
    sidecar = (tmp_path / "parcels_s_ep_m.undefined.txt").read_text()
    assert sidecar.split() == ["1"]
