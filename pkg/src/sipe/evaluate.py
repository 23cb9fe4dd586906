"""Pseudo labels, mIoU, and the ablation harness."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import train as training
from .backbone import Params
from .data import IGNORE, Dataset
from .seeds import candidate_classes

log = logging.getLogger(__name__)

THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(1, 20))


def _restricted_argmax(maps: np.ndarray, channels: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lower channel
    return channels[np.argmax(maps[channels], axis=0)].astype(np.uint8)


def pseudo_labels(maps: np.ndarray, y) -> np.ndarray:
    """Per-pixel argmax over background and labelled channels of a [K+1,H,W] stack."""
    return _restricted_argmax(np.asarray(maps), candidate_classes(y))


def threshold_labels(maps: np.ndarray, tau: float, y) -> np.ndarray:
    """Background where every labelled foreground channel is below ``tau``."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {tau}")
    maps = np.asarray(maps)
    fg = candidate_classes(y)[1:]
    label = _restricted_argmax(maps, fg)
    label[maps[fg].max(axis=0) < tau] = 0
    return label


def upsample(maps: np.ndarray, height: int, width: int) -> np.ndarray:
    return T.resize_bilinear(T.Tensor(maps), height, width).data


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int):
        self.n = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, pred, gt) -> ConfusionMatrix:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
        keep = gt != IGNORE
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        if g.size and (g.max() >= self.n or p.max() >= self.n or p.min() < 0 or g.min() < 0):
            raise ValueError(f"label values outside 0..{self.n - 1}")
        self.counts += np.bincount(g * self.n + p, minlength=self.n * self.n).reshape(self.n, self.n)
        return self

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        out = ConfusionMatrix(self.n)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def ious(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both prediction and ground truth."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)

    def miou(self) -> float:
        ious = self.ious()
        return float(np.nanmean(ious)) if np.any(~np.isnan(ious)) else float("nan")


# ---------------------------------------------------------------------------
# inference over a dataset
# ---------------------------------------------------------------------------


@dataclass
class Maps:
    """Per-image localization outputs at feature resolution."""

    cam: np.ndarray  # [N,K+1,h,w]
    iscam: np.ndarray | None
    seeds: np.ndarray | None


def infer(params: Params, images: np.ndarray, labels: np.ndarray,
          options: training.ModelOptions = training.ModelOptions(), batch_size: int = 32) -> Maps:
    cams, iscams, seeds = [], [], []
    want_ipe = training.ModelOptions(ipe=True, gsc=False, feature=options.feature, bpm=options.bpm)
    detached = Params(params.config, {k: v.detach() for k, v in params.tensors.items()})
    for start in range(0, len(images), batch_size):
        out = training.run(images[start : start + batch_size], labels[start : start + batch_size], detached, want_ipe)
        cams.append(out.general.maps.data)
        iscams.append(out.specific.maps.data)
        seeds.append(out.seeds)
    return Maps(np.concatenate(cams), np.concatenate(iscams), np.concatenate(seeds))


def score(stacks: np.ndarray, labels: np.ndarray, masks: np.ndarray, labeler) -> ConfusionMatrix:
    """Upsample each stack to mask size, label it with ``labeler(maps, y)`` and accumulate."""
    h, w = masks.shape[-2:]
    cm = ConfusionMatrix(stacks.shape[1])
    for maps, y, gt in zip(stacks, labels, masks):
        cm.add(labeler(upsample(maps, h, w), y), gt)
    return cm


def best_threshold(stacks, labels, masks, taus=THRESHOLDS) -> tuple[float, float, list[float]]:
    curve = [score(stacks, labels, masks, lambda m, y, t=t: threshold_labels(m, t, y)).miou() for t in taus]
    best = int(np.argmax(curve))
    return taus[best], curve[best], curve


def evaluate_maps(maps: Maps, labels: np.ndarray, masks: np.ndarray) -> dict:
    """mIoU of every labelling the ablation reports; ``<key>_ious`` holds per-class IoUs."""
    out = {}

    def put(key, cm):
        out[key] = cm.miou()
        out[f"{key}_ious"] = cm.ious().tolist()

    def thresholded(stacks):
        tau, _, curve = best_threshold(stacks, labels, masks)
        return score(stacks, labels, masks, lambda m, y: threshold_labels(m, tau, y)), curve

    put("cam_est", score(maps.cam, labels, masks, pseudo_labels))
    cm, out["cam_curve"] = thresholded(maps.cam)
    put("cam_thr", cm)
    if maps.iscam is not None:
        put("iscam_est", score(maps.iscam, labels, masks, pseudo_labels))
        put("iscam_thr", thresholded(maps.iscam)[0])
        put("seeds", score(maps.seeds, labels, masks, pseudo_labels))
    return out


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

# (name, options used for training); rows that share training reuse the model
TRAINING_RUNS = {
    "cls-only": training.ModelOptions(ipe=False, gsc=False),
    "semantic/no-bpm": training.ModelOptions(feature="semantic", bpm=False),
    "semantic/bpm": training.ModelOptions(feature="semantic", bpm=True),
    "hierarchical/no-bpm": training.ModelOptions(feature="hierarchical", bpm=False),
    "hierarchical/bpm": training.ModelOptions(feature="hierarchical", bpm=True),
}

TABLE4 = (("CAM", "cls-only", "cam_est"), ("+IPE", "cls-only", "iscam_est"), ("+IPE+GSC", "hierarchical/bpm", "iscam_est"))
TABLE5 = ("semantic/no-bpm", "semantic/bpm", "hierarchical/no-bpm", "hierarchical/bpm")


@dataclass
class RunResult:
    name: str
    seed: int
    metrics: dict
    seconds: float
    params: Params | None = field(default=None, repr=False)


def run_config(name: str, train_set: Dataset, eval_set: Dataset, config: training.TrainConfig,
               keep_params: bool = False) -> RunResult:
    options = TRAINING_RUNS[name]
    t0 = time.process_time()
    params = training.train(train_set.images, train_set.labels, options, config)
    maps = infer(params, eval_set.images, eval_set.labels, options)
    metrics = evaluate_maps(maps, eval_set.labels, eval_set.masks)
    seconds = time.process_time() - t0
    log.info("%s seed %d: %s (%.0fs)", name, config.seed,
             {k: round(v, 4) for k, v in metrics.items() if isinstance(v, float)}, seconds)
    return RunResult(name, config.seed, metrics, seconds, params if keep_params else None)


@dataclass
class ReportRow:
    config: str
    miou: float  # mean over seeds
    ious: list[float]  # per-class IoU, mean over seeds
    per_seed: list[float] = field(default_factory=list)


@dataclass
class AblationReport:
    rows: list[ReportRow]

    def __getitem__(self, config: str) -> ReportRow:
        for row in self.rows:
            if row.config == config:
                return row
        raise KeyError(config)

    def lines(self) -> list[str]:
        """Machine-readable ``config,miou,per-class-ious`` lines; floats round-trip exactly."""
        return [f"{r.config},{r.miou!r},{';'.join(repr(v) for v in r.ious)}" for r in self.rows]

    def table(self) -> str:
        width = max(len(r.config) for r in self.rows)
        out = [f"{'config'.ljust(width)}  mIoU   per-seed"]
        for r in self.rows:
            out.append(f"{r.config.ljust(width)}  {100 * r.miou:5.2f}  " + " ".join(f"{100 * v:5.2f}" for v in r.per_seed))
        return "\n".join(out)

    def text(self) -> str:
        return self.table() + "\n\n" + "\n".join(self.lines()) + "\n"

    @staticmethod
    def parse(lines) -> list[tuple[str, float, list[float]]]:
        rows = []
        for line in lines:
            name, miou, ious = line.strip().split(",")
            rows.append((name, float(miou), [float(v) for v in ious.split(";")] if ious else []))
        return rows


def report_from_runs(results: dict[str, list[RunResult]]) -> AblationReport:
    rows = []

    def add(label, name, key):
        per_seed = [r.metrics[key] for r in results[name]]
        stacked = np.array([r.metrics[f"{key}_ious"] for r in results[name]])
        seen = ~np.isnan(stacked)
        # classes never evaluated in any seed stay NaN
        ious = np.where(seen.any(axis=0), np.where(seen, stacked, 0.0).sum(axis=0) / np.maximum(seen.sum(axis=0), 1), np.nan)
        rows.append(ReportRow(label, float(np.mean(per_seed)), [float(v) for v in ious], per_seed))

    for label, name, key in TABLE4:
        add(f"table4:{label}", name, key)
    for name in TABLE5:
        add(f"table5:{name}:threshold", name, "iscam_thr")
        add(f"table5:{name}:estimated", name, "iscam_est")
    add("fig8:structure-seeds", "hierarchical/bpm", "seeds")
    add("fig8:best-threshold-cam", "hierarchical/bpm", "cam_thr")
    return AblationReport(rows)


def ablation(train_set: Dataset, eval_set: Dataset, seeds, config: training.TrainConfig = training.TrainConfig(),
             names=tuple(TRAINING_RUNS)) -> tuple[AblationReport | None, dict[str, list[RunResult]]]:
    if eval_set.masks is None:
        raise ValueError("evaluation set has no ground-truth masks")
    results: dict[str, list[RunResult]] = {n: [] for n in names}
    for seed in seeds:
        for name in names:
            results[name].append(run_config(name, train_set, eval_set, training.with_seed(config, seed)))
    report = report_from_runs(results) if set(names) == set(TRAINING_RUNS) else None
    return report, results
