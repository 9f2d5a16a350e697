import csv

import numpy as np
import pytest

from paseg.core import ConfigurationError, DatasetSplit, LabelMap, TissueClass as T
from paseg.evalreport import (
    COMBINATIONS, PALETTE, ExperimentReport, QueryError, ScoreRow, aggregate, default_configs,
    format_table, pooled_scores, read_rendered_labels, render_labels, robustness_split,
    run_feasibility, run_robustness, select_cases, summary_table,
)
from paseg.metrics import MetricError, confusion, dice, mean_dice, tpr
from paseg.trainer import TrainConfig

from oracles import confusion_oracle, dice_oracle, tpr_oracle


# --- metrics ---

def test_confusion_examples():
    ref = np.full((2, 2), T.BLOOD)
    c = confusion(ref, np.full((2, 2), T.SKIN))
    assert (c.tp[T.BLOOD], c.fn[T.BLOOD], c.fp[T.SKIN]) == (0, 4, 4)
    same = confusion(ref, ref)
    assert not same.fp.any() and not same.fn.any()
    assert np.all(c.tp + c.fp + c.fn + c.tn == 4)


def test_confusion_shape_mismatch():
    with pytest.raises(MetricError):
        confusion(np.zeros((2, 2), int), np.zeros((2, 3), int))


def test_dice_tpr_examples():
    from paseg.metrics import ConfusionCounts

    def counts(tp, fp, fn):
        return ConfusionCounts(*(np.array([v]) for v in (tp, fp, fn, 0)))

    assert dice(counts(4, 0, 0), 0) == 1.0
    assert dice(counts(2, 2, 2), 0) == 0.5
    assert dice(counts(0, 0, 0), 0) is None
    assert tpr(counts(3, 0, 1), 0) == 0.75
    assert tpr(counts(0, 0, 5), 0) == 0.0
    assert tpr(counts(0, 7, 0), 0) is None


def test_metrics_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(500):
        h, w, k = rng.integers(1, 9), rng.integers(1, 9), rng.integers(3, 8)
        ref, pred = rng.integers(0, k, (h, w)), rng.integers(0, k, (h, w))
        c = confusion(ref, pred)
        for cls, (tp, fp, fn, tn) in enumerate(confusion_oracle(ref.tolist(), pred.tolist(), 7)):
            assert (c.tp[cls], c.fp[cls], c.fn[cls], c.tn[cls]) == (tp, fp, fn, tn)
            assert dice(c, cls) == dice_oracle(tp, fp, fn)
            assert tpr(c, cls) == tpr_oracle(tp, fn)


def test_dice_symmetric_tpr_not():
    ref = np.array([[0, 0], [0, 1]])
    pred = np.array([[0, 1], [1, 1]])
    a, b = confusion(ref, pred), confusion(pred, ref)
    for c in range(7):
        assert dice(a, c) == dice(b, c)
    assert tpr(a, 0) != tpr(b, 0)


def test_all_dice_one_iff_equal():
    rng = np.random.default_rng(1)
    ref = rng.integers(0, 7, (6, 6))
    assert mean_dice(ref, ref) == 1.0
    pred = ref.copy()
    pred[0, 0] = (pred[0, 0] + 1) % 7
    assert any(d is not None and d < 1 for d in (dice(confusion(ref, pred), c) for c in range(7)))


# --- aggregation ---

def _row(sid, cls, d, t=None, arch="unet", mode="PA", volunteer=0, site="forearm", side="left", **kw):
    return ScoreRow(arch, mode, sid, volunteer, site, side, 0, T(cls), d, t, **kw)


def test_aggregate_skips_na():
    rep = ExperimentReport([_row("a", 0, 0.5), _row("a", 1, None), _row("a", 2, 1.0)])
    assert aggregate(rep, ("sample",)) == {("a",): 0.75}
    assert aggregate(rep, ("sample",), all_structures=True) == {("a",): 0.75}
    assert aggregate(rep, ("class",))[(T.SKIN,)] is None


def test_aggregate_identical_samples():
    rep = ExperimentReport([_row("a", 0, 0.3), _row("b", 0, 0.3)])
    assert aggregate(rep, ("class",))[(T.BLOOD,)] == pytest.approx(0.3)


def test_aggregate_within_bounds():
    rng = np.random.default_rng(2)
    vals = rng.random(20)
    rep = ExperimentReport([_row(f"s{i}", 0, float(v)) for i, v in enumerate(vals)])
    m = aggregate(rep, ("architecture",))[("unet",)]
    assert vals.min() <= m <= vals.max()


def test_aggregate_errors():
    with pytest.raises(QueryError):
        aggregate(ExperimentReport(), ("class",))
    with pytest.raises(QueryError):
        aggregate(ExperimentReport([_row("a", 0, 1.0)]), ("colour",))


def test_pooled_scores_from_counts():
    rep = ExperimentReport([_row("a", 0, 1.0, tp=4), _row("b", 0, 0.0, tp=0, fp=2, fn=2)])
    assert pooled_scores(rep)[("unet", "PA", T.BLOOD)] == (8 / 12, 4 / 6)


# --- case selection ---

def test_select_cases_examples():
    rep = ExperimentReport([_row("a", 0, 0.2), _row("b", 0, 0.5), _row("c", 0, 0.9)])
    assert [select_cases(rep, T.BLOOD, s) for s in ("best", "median", "worst")] == ["c", "b", "a"]
    even = ExperimentReport([_row(f"s{i}", 0, v) for i, v in enumerate((0.4, 0.1, 0.3, 0.2))])
    assert select_cases(even, T.BLOOD, "median") == "s3"
    one = ExperimentReport([_row("x", 0, 0.7)])
    assert {select_cases(one, T.BLOOD, s) for s in ("best", "median", "worst")} == {"x"}


def test_select_cases_ties_and_errors():
    rep = ExperimentReport([_row("b", 0, 0.5), _row("a", 0, 0.5), _row("c", 0, None)])
    assert select_cases(rep, T.BLOOD, "best") == "a"
    assert select_cases(rep, T.BLOOD, "worst") == "a"
    with pytest.raises(QueryError):
        select_cases(ExperimentReport([_row("c", 0, None)]), T.BLOOD, "best")
    with pytest.raises(QueryError):
        select_cases(rep, T.BLOOD, "mode")


# --- tables ---

def test_summary_table_layout():
    rows = [_row("a", c, 0.5, arch=a, mode=m) for a, m in COMBINATIONS for c in range(7)]
    header, body = summary_table(ExperimentReport(rows))
    assert header == ["class", "unet_PA", "unet_PAUS", "unet_US", "fcnn_PA", "fcnn_PAUS"]
    assert len(body) == 7 and all(len(r) == 6 for r in body)
    assert "N/A" not in format_table(ExperimentReport(rows))


def test_report_csv_round_trip(tmp_path):
    rep = ExperimentReport([_row("v01_neck_left_0", 6, None, None, volunteer=1, site="neck"),
                            _row("v01_neck_left_0", 0, 0.25, 0.5, volunteer=1, site="neck")])
    rep.write_csv(tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        recs = list(csv.reader(fh))
    assert recs[0] == ["architecture", "input", "volunteer", "site", "side", "location", "class", "dice", "tpr"]
    assert recs[1][-3:] == ["blood", "0.25", "0.5"] and recs[2][-2:] == ["NA", "NA"]
    back = ExperimentReport.read_csv(tmp_path / "r.csv")
    assert [(r.sample_id, r.cls, r.dice, r.tpr) for r in back.rows] == \
        [(r.sample_id, r.cls, r.dice, r.tpr) for r in rep.sorted().rows]


# --- rendering ---

def test_palette_injective():
    assert len({tuple(c) for c in PALETTE}) == 7


def test_render_round_trip(tmp_path):
    lab = LabelMap(np.random.default_rng(3).integers(0, 7, (9, 11)).astype(np.uint8))
    a = render_labels(lab, tmp_path / "a.png")
    b = render_labels(lab, tmp_path / "b.png")
    assert a.read_bytes() == b.read_bytes()
    np.testing.assert_array_equal(read_rendered_labels(a).values, lab.values)


def test_render_uniform_other_tissue(tmp_path):
    from PIL import Image

    path = render_labels(LabelMap(np.full((4, 5), T.OTHER_TISSUE, np.uint8)), tmp_path / "o.png")
    img = np.asarray(Image.open(path))
    assert img.dtype == np.uint8 and img.shape == (4, 5, 3)
    assert np.all(img == PALETTE[5])


# --- experiments ---

def _tiny_configs():
    return default_configs({
        "unet": TrainConfig("unet", "PA", epochs=1, batch_size=2, batches_per_epoch=1, base_channels=2),
        "fcnn": TrainConfig("fcnn", "PA", epochs=1, batches_per_epoch=2),
    })


def test_feasibility_five_columns(small_dataset):
    samples = {s.id: s for s in small_dataset}
    ids = sorted(samples)
    split = DatasetSplit(tuple(ids[:12]), tuple(ids[12:14]), tuple(ids[14:]))
    res = run_feasibility(samples, split, _tiny_configs())
    assert res.report.combinations() == list(COMBINATIONS)
    assert ("fcnn", "US") not in res.runs
    assert len(res.report.rows) == 5 * 7 * len(split.test)
    header, body = summary_table(res.report)
    assert len(header) == 6 and len(body) == 7


def test_robustness_split_and_audit(small_dataset):
    samples = {s.id: s for s in small_dataset}
    ids = sorted(samples)
    split = DatasetSplit(tuple(ids[:12]), tuple(ids[12:14]), tuple(ids[14:]))
    res = run_robustness(samples, split, _tiny_configs())
    assert {samples[i].meta.site for i in res.split.test} == {"neck"}
    for run in res.runs.values():
        drawn = {i for _, _, batch in run.batch_log for i in batch}
        assert all(samples[i].meta.site != "neck" for i in drawn)
    # neck phantoms carry no artefact, so TPR is always N/A and Dice is N/A unless predicted
    for r in res.report.rows:
        if r.cls == T.COUPLING_ARTEFACT:
            assert r.tpr is None and r.tp == r.fn == 0
            assert (r.dice is None) == (r.fp == 0)


def test_robustness_errors(small_dataset):
    samples = {s.id: s for s in small_dataset}
    forearm = tuple(i for i in sorted(samples) if samples[i].meta.site == "forearm")
    neck = tuple(i for i in sorted(samples) if samples[i].meta.site == "neck")
    with pytest.raises(ConfigurationError):
        robustness_split(samples, DatasetSplit(forearm[:2], (), forearm[2:]))
    with pytest.raises(ConfigurationError):
        robustness_split(samples, DatasetSplit(neck[:2], (), neck[2:]))
