"""Per-user datasets, cross validation, grid search and verification metrics."""
from __future__ import annotations

import itertools
import logging
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .features import CutoutSpec, cutout_batch
from .models import build_model
from .nnengine import OptimizerSpec, Plateau, StepLR, TrainConfig, TrainingAborted, fit

log = logging.getLogger(__name__)


class ShortageError(ValueError):
    """Not enough impostor samples to balance the positives."""


class UndefinedMetricError(ValueError):
    """Metric needs both classes present."""


# ---------------------------------------------------------------- datasets


@dataclass
class LabeledSet:
    user_id: str
    x: np.ndarray
    y: np.ndarray
    source: list[str]

    def __len__(self):
        return len(self.y)


def _largest_remainder(total: int, weights: Sequence[int]) -> list[int]:
    w = np.asarray(weights, dtype=np.int64)
    exact = total * w / w.sum()
    base = np.floor(exact).astype(np.int64)
    short = total - int(base.sum())
    # stable sort keeps the earlier user first among equal remainders
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:short]] += 1
    return base.tolist()


def negative_quota(n_positive: int, counts: Mapping[str, int]) -> dict[str, int]:
    """How many negatives to draw from each other user, proportional to their sample counts."""
    users = sorted(counts)
    available = sum(counts[u] for u in users)
    if available < n_positive:
        raise ShortageError(f"need {n_positive} negatives but only {available} available")
    return dict(zip(users, _largest_remainder(n_positive, [counts[u] for u in users])))


def assemble(user: str, all_users: Mapping[str, np.ndarray], seed: int = 0) -> LabeledSet:
    """Label every sample of ``user`` 1 and draw as many 0-labelled impostor samples.

    Impostors come from the other users in proportion to their sample
    counts, uniformly and without replacement within each user.
    """
    if user not in all_users:
        raise KeyError(f"unknown user {user!r}")
    pos = np.asarray(all_users[user])
    if len(pos) < 2:
        raise ValueError(f"user {user!r} has {len(pos)} samples; need at least 2")
    others = {u: len(v) for u, v in all_users.items() if u != user}
    if not others:
        raise ShortageError("no other users to draw negatives from")
    quota = negative_quota(len(pos), others)
    rng = np.random.default_rng(seed)
    neg, source = [], []
    for u, k in quota.items():
        if k == 0:
            continue
        idx = rng.choice(others[u], size=k, replace=False)
        neg.append(np.asarray(all_users[u])[idx])
        source += [u] * k
    x = np.concatenate([pos] + neg)
    y = np.concatenate([np.ones(len(pos), dtype=np.int64), np.zeros(len(source), dtype=np.int64)])
    return LabeledSet(user, x, y, [user] * len(pos) + source)


def stratified_folds(labels, k: int = 5, seed: int = 0) -> np.ndarray:
    """Fold id per sample; each class is shuffled and dealt round-robin."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds = np.empty(len(labels), dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = np.arange(len(idx)) % k
    return folds


# ---------------------------------------------------------------- metrics


@dataclass
class Metrics:
    accuracy: float
    eer: float
    eer_threshold: float
    roc: list[tuple[float, float, float]] = field(default_factory=list)


def _split(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    return s, y


def roc_points(scores, labels):
    """(thresholds, fpr, fnr) over the sweep used for the EER.

    Thresholds are the lowest score, every midpoint between consecutive
    distinct scores, and a value just above the highest score.  A sample is
    accepted when its score is >= the threshold.
    """
    s, y = _split(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("EER needs at least one positive and one negative score")
    distinct = np.unique(s)
    thresholds = np.concatenate([
        distinct[:1], (distinct[:-1] + distinct[1:]) / 2.0, [np.nextafter(distinct[-1], np.inf)]
    ])
    neg_sorted = np.sort(s[~y])
    pos_sorted = np.sort(s[y])
    fpr = (n_neg - np.searchsorted(neg_sorted, thresholds, side="left")) / n_neg
    fnr = np.searchsorted(pos_sorted, thresholds, side="left") / n_pos
    return thresholds, fpr, fnr


def eer(scores, labels) -> tuple[float, float]:
    """Equal error rate and the threshold where it occurs.

    FPR - FNR is non-increasing along the sweep; the crossing is
    interpolated linearly between the two sweep points that bracket it.
    """
    t, fpr, fnr = roc_points(scores, labels)
    d = fpr - fnr
    hit = np.flatnonzero(d == 0)
    if hit.size:
        i = hit[0]
        return float(fpr[i]), float(min(t[i], 1.0))
    k = int(np.flatnonzero(d > 0)[-1])  # d[0] = 1 > 0 and d[-1] = -1 < 0
    alpha = d[k] / (d[k] - d[k + 1])
    rate = fpr[k] + alpha * (fpr[k + 1] - fpr[k])
    thr = t[k] + alpha * (t[k + 1] - t[k])
    return float(rate), float(min(thr, 1.0))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    s, y = _split(scores, labels)
    if len(s) == 0:
        raise ValueError("accuracy of an empty set")
    pred = s >= threshold
    return float(np.mean(pred == y))


def compute_metrics(scores, labels, threshold: float = 0.5) -> Metrics:
    rate, thr = eer(scores, labels)
    t, fpr, fnr = roc_points(scores, labels)
    roc = [(float(a), float(b), float(c)) for a, b, c in zip(fpr, fnr, t)]
    return Metrics(accuracy(scores, labels, threshold), rate, thr, roc)


# ---------------------------------------------------------------- CV


@dataclass
class FoldResult:
    fold: int
    metrics: Metrics
    network: object = None
    history: list = field(default_factory=list)


@dataclass
class CVResult:
    user_id: str
    folds: list[FoldResult]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([f.metrics.accuracy for f in self.folds]))

    @property
    def mean_eer(self) -> float:
        return float(np.mean([f.metrics.eer for f in self.folds]))


class FoldAborted(TrainingAborted):
    def __init__(self, fold, cause):
        super().__init__(f"fold {fold}: {cause}")
        self.fold = fold


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _augmenter(cutout: CutoutSpec | None):
    if cutout is None or not cutout.enabled:
        return None

    def augment(batch, rng):
        return cutout_batch(batch, cutout, rng)

    return augment


def _run_fold(job):
    ls, folds, fold, model_cfg, train_cfg, seed, cutout = job
    test = folds == fold
    fold_seed = derive_seed(seed, fold)
    net = build_model(model_cfg, ls.x.shape[1:], seed=fold_seed)
    try:
        history = fit(net, ls.x[~test], ls.y[~test], train_cfg, seed=derive_seed(fold_seed, 1),
                      augment=_augmenter(cutout))
    except TrainingAborted as exc:
        raise FoldAborted(fold, exc) from exc
    scores = net.predict(ls.x[test]).reshape(-1)
    return FoldResult(fold, compute_metrics(scores, ls.y[test]), net, history)


def cross_validate(
    ls: LabeledSet,
    model_cfg,
    train_cfg: TrainConfig,
    seed: int = 0,
    cutout: CutoutSpec | None = None,
    k: int = 5,
    jobs: int = 1,
) -> CVResult:
    """Stratified k-fold CV; each fold gets a fresh model from a fold-derived seed."""
    counts = np.bincount(ls.y, minlength=2)
    if counts.min() < k:
        raise ValueError(f"need >= {k} samples per class, have {counts.tolist()}")
    folds = stratified_folds(ls.y, k, seed)
    jobs_args = [(ls, folds, f, model_cfg, train_cfg, seed, cutout) for f in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, jobs_args))
    else:
        results = [_run_fold(a) for a in jobs_args]
    for r in results:
        log.info("user %s fold %d: acc %.4f eer %.4f", ls.user_id, r.fold, r.metrics.accuracy, r.metrics.eer)
    return CVResult(ls.user_id, results)


# ---------------------------------------------------------------- grid search

SCHEDULE_PATTERN = re.compile(r"^StepLR\((?P<gamma>[0-9.]+)\)$")


def make_schedule(label: str, epochs: int):
    """``"StepLR(g)"`` decays by g every quarter of the run; ``"Plateau"`` uses factor 0.1, patience 10."""
    if label == "Plateau":
        return Plateau(factor=0.1, patience=10)
    m = SCHEDULE_PATTERN.match(label)
    if not m:
        raise ValueError(f"unknown schedule {label!r}")
    return StepLR(gamma=float(m["gamma"]), step_epochs=max(1, epochs // 4))


@dataclass(frozen=True)
class GridSpec:
    epochs: tuple = (100, 200, 500, 1000)
    lr: tuple = (0.1, 0.01, 0.001, 0.0001)
    optimizer: tuple = ("Adam", "SGD", "SGDMomentum")
    schedule: tuple = ("StepLR(0.1)", "StepLR(0.3)", "StepLR(0.5)", "Plateau")

    def cells(self):
        return list(itertools.product(self.epochs, self.lr, self.optimizer, self.schedule))

    def __len__(self):
        return len(self.epochs) * len(self.lr) * len(self.optimizer) * len(self.schedule)


# "paper" searches epochs x lr x optimizer (48 cells) under the default StepLR(0.1)
# schedule; "paper-full" also crosses the four schedules (192 cells).
FULL_GRID = GridSpec()
PAPER_GRID = GridSpec(schedule=("StepLR(0.1)",))
QUICK_GRID = GridSpec(epochs=(5, 10), lr=(0.01, 0.001), optimizer=("Adam",), schedule=("StepLR(0.1)",))
GRIDS = {"paper": PAPER_GRID, "paper-full": FULL_GRID, "quick": QUICK_GRID}


def default_train_config(model_cfg=None, epochs: int = 200, batch_size: int = 32) -> TrainConfig:
    """200 epochs of Adam with StepLR(0.1); lr 0.001 for a plain-RNN model, else 0.01."""
    lr = 0.001 if getattr(model_cfg, "rnn_kind", None) == "rnn" else 0.01
    return TrainConfig(epochs, batch_size, OptimizerSpec("Adam", lr, schedule=make_schedule("StepLR(0.1)", epochs)))


@dataclass
class GridRow:
    epochs: int
    lr: float
    optimizer: str
    schedule: str
    mean_eer: float
    mean_accuracy: float
    repeats: int
    per_repeat: list = field(default_factory=list)


def grid_search(
    ls: LabeledSet,
    model_cfg,
    grid: GridSpec,
    repeats: int = 1,
    seed: int = 0,
    cutout: CutoutSpec | None = None,
    batch_size: int = 32,
    jobs: int = 1,
) -> list[GridRow]:
    """Cross-validate every grid cell and rank by mean EER, then accuracy, then fewer epochs."""
    if len(grid) == 0:
        raise ValueError("empty grid")
    rows = []
    for epochs, lr, opt, sched in grid.cells():
        cfg = TrainConfig(epochs, batch_size, OptimizerSpec(opt, lr, schedule=make_schedule(sched, epochs)))
        runs = [cross_validate(ls, model_cfg, cfg, seed=seed + r, cutout=cutout, jobs=jobs)
                for r in range(repeats)]
        eers = [r.mean_eer for r in runs]
        accs = [r.mean_accuracy for r in runs]
        rows.append(GridRow(epochs, lr, opt, sched, float(np.mean(eers)), float(np.mean(accs)), repeats,
                            list(zip(eers, accs))))
    rows.sort(key=lambda r: (r.mean_eer, -r.mean_accuracy, r.epochs))
    return rows
