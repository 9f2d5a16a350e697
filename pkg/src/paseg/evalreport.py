"""Scoring trained models, aggregating scores, and the feasibility / robustness experiments."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import ConfigurationError, DatasetSplit, LabelMap, PasegError, Sample, TissueClass
from .metrics import ClassScore, ConfusionCounts, confusion, dice, tpr
from .models import Model, predict_labels
from .trainer import TrainConfig, TrainResult, train

__all__ = [
    "COMBINATIONS", "ClassScore", "ConfusionCounts", "ExperimentReport", "ScoreRow",
    "aggregate", "confusion", "dice", "tpr", "evaluate_model", "run_feasibility",
    "run_robustness", "select_cases", "summary_table", "render_labels", "PALETTE",
]

# column order of the result tables
COMBINATIONS = (("unet", "PA"), ("unet", "PAUS"), ("unet", "US"), ("fcnn", "PA"), ("fcnn", "PAUS"))

CLASS_NAMES = {c: c.name.lower() for c in TissueClass}
REPORT_COLUMNS = ("architecture", "input", "volunteer", "site", "side", "location", "class", "dice", "tpr")
GROUP_KEYS = ("architecture", "input", "class", "volunteer", "site", "side", "sample")


class QueryError(PasegError, ValueError):
    pass


@dataclass(frozen=True)
class ScoreRow:
    architecture: str
    input_mode: str
    sample_id: str
    volunteer: int
    site: str
    side: str
    location: int
    cls: TissueClass
    dice: float | None
    tpr: float | None
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def key(self, name: str):
        return {
            "architecture": self.architecture, "input": self.input_mode, "class": self.cls,
            "volunteer": self.volunteer, "site": self.site, "side": self.side,
            "sample": self.sample_id,
        }[name]


def _na(v) -> str:
    return "NA" if v is None else repr(float(v))


def _parse_na(s: str):
    return None if s == "NA" else float(s)


@dataclass
class ExperimentReport:
    rows: list[ScoreRow] = field(default_factory=list)

    def extend(self, rows: Iterable[ScoreRow]) -> None:
        self.rows.extend(rows)

    def sorted(self) -> "ExperimentReport":
        order = {c: i for i, c in enumerate(COMBINATIONS)}
        return ExperimentReport(sorted(
            self.rows,
            key=lambda r: (order.get((r.architecture, r.input_mode), len(order)),
                           r.architecture, r.input_mode, r.sample_id, int(r.cls))))

    def filter(self, **where) -> "ExperimentReport":
        return ExperimentReport([r for r in self.rows if all(r.key(k) == v for k, v in where.items())])

    def combinations(self) -> list[tuple[str, str]]:
        seen = {(r.architecture, r.input_mode) for r in self.rows}
        return [c for c in COMBINATIONS if c in seen] + sorted(seen - set(COMBINATIONS))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(REPORT_COLUMNS)
            for r in self.sorted().rows:
                wr.writerow([r.architecture, r.input_mode, r.volunteer, r.site, r.side, r.location,
                             CLASS_NAMES[r.cls], _na(r.dice), _na(r.tpr)])

    @classmethod
    def read_csv(cls, path) -> "ExperimentReport":
        names = {v: k for k, v in CLASS_NAMES.items()}
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                sid = f"v{int(rec['volunteer']):02d}_{rec['site']}_{rec['side']}_{rec['location']}"
                rows.append(ScoreRow(rec["architecture"], rec["input"], sid, int(rec["volunteer"]),
                                     rec["site"], rec["side"], int(rec["location"]),
                                     names[rec["class"]], _parse_na(rec["dice"]), _parse_na(rec["tpr"])))
        return cls(rows)


def score_rows(architecture: str, input_mode: str, sample: Sample, pred: LabelMap) -> list[ScoreRow]:
    counts = confusion(sample.labels, pred)
    m = sample.meta
    return [ScoreRow(architecture, input_mode, sample.id, m.volunteer_id, m.site, m.side,
                     m.location_index, c, dice(counts, c), tpr(counts, c),
                     int(counts.tp[c]), int(counts.fp[c]), int(counts.fn[c]))
            for c in TissueClass]


def evaluate_model(model: Model, samples: Sequence[Sample], input_mode: str,
                   predictions: dict | None = None) -> ExperimentReport:
    """Score ``model`` on every sample; predicted maps are stored in ``predictions`` if given."""
    report = ExperimentReport()
    for s in samples:
        pred = predict_labels(model, s, input_mode)
        if predictions is not None:
            predictions[s.id] = pred
        report.extend(score_rows(model.architecture, input_mode, s, pred))
    return report


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def image_scores(report: ExperimentReport, metric: str = "dice") -> ExperimentReport:
    """Collapse classes: one row per (architecture, input, sample), class set to None.

    The score is the mean over the classes with a defined score in that image.
    """
    groups = defaultdict(list)
    for r in report.rows:
        groups[(r.architecture, r.input_mode, r.sample_id)].append(r)
    out = []
    for rows in groups.values():
        r = rows[0]
        out.append(ScoreRow(r.architecture, r.input_mode, r.sample_id, r.volunteer, r.site, r.side,
                            r.location, None, _mean(x.dice for x in rows), _mean(x.tpr for x in rows)))
    return ExperimentReport(out)


def aggregate(report: ExperimentReport, group_by: Sequence[str], metric: str = "dice",
              all_structures: bool = False) -> dict[tuple, float | None]:
    """Mean of ``metric`` per group, skipping N/A scores.

    With ``all_structures`` each image is first reduced to its mean over
    classes, as in the per-image "all structures" plots.
    """
    bad = set(group_by) - set(GROUP_KEYS)
    if bad:
        raise QueryError(f"unknown grouping keys {sorted(bad)}")
    if all_structures:
        if "class" in group_by:
            raise QueryError("cannot group by class for all-structure scores")
        report = image_scores(report)
    if not report.rows:
        raise QueryError("nothing to aggregate")
    groups = defaultdict(list)
    for r in report.rows:
        groups[tuple(r.key(k) for k in group_by)].append(getattr(r, metric))
    return {k: _mean(v) for k, v in groups.items()}


def pooled_scores(report: ExperimentReport) -> dict[tuple, tuple[float | None, float | None]]:
    """Dice/TPR from confusion counts pooled over samples, per (architecture, input, class)."""
    sums = defaultdict(lambda: np.zeros(3, dtype=np.int64))
    for r in report.rows:
        sums[(r.architecture, r.input_mode, r.cls)] += (r.tp, r.fp, r.fn)
    out = {}
    for k, (tp, fp, fn) in sums.items():
        d = None if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
        t = None if tp + fn == 0 else tp / (tp + fn)
        out[k] = (d, t)
    return out


def select_cases(report: ExperimentReport, cls, statistic: str, architecture: str | None = None,
                 input_mode: str | None = None, metric: str = "dice") -> str:
    """Sample id with the best, median (lower middle) or worst per-sample score of ``cls``.

    ``cls=None`` ranks the per-image all-structure score. Ties go to the
    lowest sample id.
    """
    where = {}
    if architecture is not None:
        where["architecture"] = architecture
    if input_mode is not None:
        where["input"] = input_mode
    sub = report.filter(**where)
    rows = image_scores(sub).rows if cls is None else [r for r in sub.rows if r.cls == cls]
    scored = sorted((getattr(r, metric), r.sample_id) for r in rows if getattr(r, metric) is not None)
    if not scored:
        raise QueryError(f"no defined {metric} scores for class {cls}")
    if statistic == "best":
        top = scored[-1][0]
        return min(sid for v, sid in scored if v == top)
    if statistic == "worst":
        return scored[0][1]
    if statistic == "median":
        return scored[(len(scored) - 1) // 2][1]
    raise QueryError(f"unknown statistic {statistic!r}")


def summary_table(report: ExperimentReport, metric: str = "dice",
                  pooled: bool = False) -> tuple[list[str], list[list]]:
    """Rows per tissue class, one column per architecture/input combination."""
    combos = report.combinations()
    header = ["class"] + [f"{a}_{i}" for a, i in combos]
    if pooled:
        ps = pooled_scores(report)
        idx = 0 if metric == "dice" else 1
        cell = lambda a, i, c: ps.get((a, i, c), (None, None))[idx]
    else:
        agg = aggregate(report, ("architecture", "input", "class"), metric)
        cell = lambda a, i, c: agg.get((a, i, c))
    rows = [[CLASS_NAMES[c]] + [cell(a, i, c) for a, i in combos] for c in TissueClass]
    return header, rows


def write_summary(report: ExperimentReport, path, metric: str = "dice", pooled: bool = False) -> None:
    header, rows = summary_table(report, metric, pooled)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([row[0]] + ["NA" if v is None else f"{v:.4f}" for v in row[1:]])


def format_table(report: ExperimentReport, metric: str = "dice") -> str:
    header, rows = summary_table(report, metric)
    lines = ["".join(f"{h:>20}" for h in header)]
    for row in rows:
        lines.append(f"{row[0]:>20}" + "".join(f"{'N/A' if v is None else f'{v:.2f}':>20}" for v in row[1:]))
    return "\n".join(lines)


# --- experiments ----------------------------------------------------------------

@dataclass
class ExperimentResult:
    report: ExperimentReport
    runs: dict[tuple[str, str], TrainResult]
    predictions: dict[tuple[str, str], dict[str, LabelMap]]
    split: DatasetSplit


def default_configs(base: Mapping[str, TrainConfig] | None = None) -> dict[tuple[str, str], TrainConfig]:
    """One config per combination, cloned from a per-architecture template."""
    from dataclasses import replace

    base = base or {}
    out = {}
    for arch, mode in COMBINATIONS:
        tmpl = base.get(arch) or TrainConfig(arch, "PA")
        out[(arch, mode)] = replace(tmpl, architecture=arch, input_mode=mode)
    return out


def _run(samples: Mapping[str, Sample], split: DatasetSplit, configs, progress=None) -> ExperimentResult:
    test = [samples[i] for i in split.test]
    report = ExperimentReport()
    runs, predictions = {}, {}
    for combo in COMBINATIONS:
        cfg = configs[combo]
        cb = (lambda e, row, c=combo: progress(c, e, row)) if progress else None
        res = train(samples, split, cfg, progress=cb)
        preds = {}
        report.extend(evaluate_model(res.model, test, cfg.input_mode, preds).rows)
        runs[combo] = res
        predictions[combo] = preds
    return ExperimentResult(report.sorted(), runs, predictions, split)


def run_feasibility(samples: Mapping[str, Sample], split: DatasetSplit,
                    configs: Mapping[tuple[str, str], TrainConfig] | None = None,
                    progress: Callable | None = None) -> ExperimentResult:
    """Train and test the five architecture/input combinations on one split."""
    configs = configs or default_configs()
    missing = [c for c in COMBINATIONS if c not in configs]
    if missing:
        raise ConfigurationError(f"no training config for {missing}")
    if not split.test:
        raise ConfigurationError("split has no test samples")
    return _run(samples, split, configs, progress)


TRAIN_SITES = ("forearm", "calf")
TEST_SITE = "neck"


def robustness_split(samples: Mapping[str, Sample], split: DatasetSplit) -> DatasetSplit:
    keep = lambda ids, sites: tuple(i for i in ids if samples[i].meta.site in sites)
    out = DatasetSplit(keep(split.train, TRAIN_SITES), keep(split.validation, TRAIN_SITES),
                       keep(split.test, (TEST_SITE,)))
    if not out.train:
        raise ConfigurationError("robustness experiment: no forearm or calf training samples")
    if not out.test:
        raise ConfigurationError("robustness experiment: no neck samples in the test set")
    return out


def run_robustness(samples: Mapping[str, Sample], split: DatasetSplit,
                   configs: Mapping[tuple[str, str], TrainConfig] | None = None,
                   progress: Callable | None = None) -> ExperimentResult:
    """Train on forearm and calf scans only, test on the neck scans of the test set."""
    return run_feasibility(samples, robustness_split(samples, split), configs, progress)


# --- rendering -------------------------------------------------------------------

# fixed RGB palette, indexed by class code
PALETTE = np.array([
    [200, 30, 45],    # blood
    [240, 170, 110],  # skin
    [90, 160, 230],   # US gel
    [120, 120, 120],  # membrane
    [30, 60, 140],    # heavy water
    [235, 225, 200],  # other tissue
    [150, 60, 170],   # coupling artefact
], dtype=np.uint8)


def colorize(labels) -> np.ndarray:
    values = labels.values if isinstance(labels, LabelMap) else np.asarray(labels)
    return PALETTE[values]


def decolorize(rgb: np.ndarray) -> LabelMap:
    codes = (rgb.astype(np.int64) @ np.array([1 << 16, 1 << 8, 1]))
    keys = PALETTE.astype(np.int64) @ np.array([1 << 16, 1 << 8, 1])
    lookup = {int(k): i for i, k in enumerate(keys)}
    try:
        return LabelMap(np.vectorize(lookup.__getitem__)(codes).astype(np.uint8))
    except KeyError as exc:
        raise ValueError(f"colour {exc} is not in the palette") from None


def render_labels(labels, path) -> Path:
    """Write an 8-bit RGB PNG using :data:`PALETTE`."""
    from PIL import Image

    path = Path(path)
    Image.fromarray(colorize(labels), mode="RGB").save(path, format="PNG", optimize=False)
    return path


def read_rendered_labels(path) -> LabelMap:
    from PIL import Image

    return decolorize(np.asarray(Image.open(path).convert("RGB")))


SITE_MARKERS = {"forearm": "o", "calf": "s", "neck": "^"}


def plot_scores(report: ExperimentReport, path, cls=None, metric: str = "dice", title: str = "") -> Path:
    """Per-image scores per combination, split by body side, coloured by volunteer, shaped by site.

    ``cls=None`` plots the per-image mean over all structures.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = image_scores(report).rows if cls is None else [r for r in report.rows if r.cls == cls]
    combos = report.combinations()
    volunteers = sorted({r.volunteer for r in rows})
    colours = plt.get_cmap("tab10")
    fig, axes = plt.subplots(1, len(combos), figsize=(2.6 * len(combos), 3.2), sharey=True, squeeze=False)
    rng = np.random.default_rng(0)
    for ax, (arch, mode) in zip(axes[0], combos):
        for r in rows:
            if (r.architecture, r.input_mode) != (arch, mode) or getattr(r, metric) is None:
                continue
            x = (0 if r.side == "left" else 1) + rng.uniform(-0.25, 0.25)
            ax.scatter(x, getattr(r, metric), s=18, marker=SITE_MARKERS[r.site],
                       color=colours(volunteers.index(r.volunteer) % 10))
        ax.axvline(0.5, color="grey", lw=0.8)
        ax.set_xticks([0, 1], ["left", "right"])
        ax.set_title(f"{'U-Net' if arch == 'unet' else 'FCNN'} {mode}", fontsize=9)
        ax.set_ylim(-0.02, 1.02)
    axes[0][0].set_ylabel(f"{metric} ({'all structures' if cls is None else CLASS_NAMES[TissueClass(cls)]})")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)
