"""Leave-one-out membership-inference auditing.

Two attack surfaces: published synthetic datasets (shadow generators trained
with and without one fixed target record, features extracted from their
outputs) and the protocol's intermediate features (full trainings per world,
the whole dataset pushed through the trained first discriminator parts).
A decision-forest adversary is trained on balanced labeled features over
repeated random train/test splits; the report carries the AUC mean and
standard deviation per feature kind.

Feature maps, fixed as this artifact's convention:

* ``naive`` — per attribute: (mean, median, population variance) for
  numerics, per-category relative frequencies for categoricals.
* ``correlation`` — strict upper triangle, row-major, of the Pearson
  correlation matrix over the schema-driven numeric representation
  (raw numerics + one-hot blocks); zero-variance columns contribute 0.

Shadow trainings are independent jobs on derived streams; they fan out over
worker processes (count from ``VFSYNTH_THREADS``, default the CPU count)
without affecting any reported number.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import fedgan as fg
from .dp import DpConfig
from .forest import predict_scores, train_forest
from .kernels import nearest_neighbor_distances
from .nn import forward as nn_forward
from .rng import RngStream

__all__ = [
    "AuditConfig",
    "FeatureSets",
    "AuditReport",
    "extract_naive",
    "extract_corr",
    "naive_features_matrix",
    "corr_features_matrix",
    "train_shadows_assd",
    "train_shadows_asif",
    "run_attack",
    "auc",
    "find_vulnerable_outlier",
    "find_vulnerable_nn",
]

FEATURE_KINDS = ("naive", "correlation")


def thread_count() -> int:
    raw = os.environ.get("VFSYNTH_THREADS", "").strip()
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class AuditConfig:
    """Shadow-ensemble and attack settings.

    ``train_count``/``test_count`` are per world; when omitted they default
    to a 70/30 split of the shadow count, mirroring the 140/60 protocol at
    one hundred shadows per world.
    """

    shadows: int  # M per world
    repeats: int = 5
    feature_kinds: tuple[str, ...] = FEATURE_KINDS
    train_count: int | None = None
    test_count: int | None = None
    variant: str = fg.VFLGAN
    gan: fg.GanConfig = field(default_factory=fg.GanConfig)
    dp: DpConfig | None = None
    synthetic_rows: int | None = None  # defaults to the dataset size

    def __post_init__(self):
        if self.shadows < 2:
            raise ValueError("need at least 2 shadow models per world")
        if self.repeats < 1:
            raise ValueError("repeats must be positive")
        for kind in self.feature_kinds:
            if kind not in FEATURE_KINDS:
                raise ValueError(f"unknown feature kind {kind!r}")
        tr, te = self.split_counts()
        if tr + te > self.shadows:
            raise ValueError("train+test exceeds the shadow count per world")
        if tr < 1 or te < 1:
            raise ValueError("train and test counts must be positive")

    def split_counts(self) -> tuple[int, int]:
        if self.train_count is not None:
            tr = self.train_count
            te = self.test_count if self.test_count is not None else self.shadows - tr
        else:
            tr = max(1, round(0.7 * self.shadows))
            te = self.shadows - tr
        return tr, te


@dataclass
class FeatureSets:
    """Per feature kind: (2M, dim) matrix plus world labels (1 = target in)."""

    features: dict[str, np.ndarray]
    labels: np.ndarray


@dataclass(frozen=True)
class AuditReport:
    target_index: int
    shadows: int
    dp_enabled: bool
    auc_mean: dict[str, float]
    auc_std: dict[str, float]

    def __post_init__(self):
        for kind, v in self.auc_mean.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"AUC for {kind} outside [0, 1]")


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------

def naive_features_matrix(m: np.ndarray) -> np.ndarray:
    """Per-column (mean, median, population variance), column-major groups."""
    return np.stack(
        [np.mean(m, axis=0), np.median(m, axis=0), np.var(m, axis=0)], axis=1
    ).ravel()


def corr_features_matrix(m: np.ndarray) -> np.ndarray:
    """Strict upper triangle (row-major) of the Pearson correlation matrix.

    Columns with zero variance contribute correlation 0 by convention.
    """
    n, k = m.shape
    centered = m - m.mean(axis=0)
    std = centered.std(axis=0)
    safe = np.where(std == 0.0, 1.0, std)
    unit = centered / safe
    corr = unit.T @ unit / n
    corr[std == 0.0, :] = 0.0
    corr[:, std == 0.0] = 0.0
    iu = np.triu_indices(k, 1)
    return corr[iu]


def _schema_numeric_matrix(ds: D.TabularDataset) -> np.ndarray:
    """Raw numerics + exact one-hot blocks, in schema order (no scaling)."""
    cols = []
    for attr, col in zip(ds.schema.attributes, ds.columns):
        if attr.kind == "categorical":
            block = np.zeros((ds.n_rows, len(attr.categories)))
            block[np.arange(ds.n_rows), col] = 1.0
            cols.append(block)
        else:
            cols.append(col.astype(np.float64)[:, None])
    return np.hstack(cols)


def extract_naive(ds: D.TabularDataset) -> np.ndarray:
    """Per-attribute summaries of a (synthetic) dataset.

    Numerics contribute (mean, median, variance); categoricals contribute
    their per-category relative frequencies.
    """
    if ds.n_rows == 0:
        raise D.DataError("cannot extract features from an empty dataset")
    parts = []
    for attr, col in zip(ds.schema.attributes, ds.columns):
        if attr.kind == "categorical":
            freq = np.bincount(col, minlength=len(attr.categories)) / ds.n_rows
            parts.append(freq)
        else:
            c = col.astype(np.float64)
            parts.append(np.array([np.mean(c), np.median(c), np.var(c)]))
    return np.concatenate(parts)


def extract_corr(ds: D.TabularDataset) -> np.ndarray:
    if ds.n_rows < 2:
        raise D.DataError("correlation features need at least 2 rows")
    return corr_features_matrix(_schema_numeric_matrix(ds))


_EXTRACTORS = {"naive": extract_naive, "correlation": extract_corr}
_MATRIX_EXTRACTORS = {"naive": naive_features_matrix, "correlation": corr_features_matrix}


# ---------------------------------------------------------------------------
# shadow ensembles
# ---------------------------------------------------------------------------

def _world_datasets(ds: D.TabularDataset, target_index: int):
    without = D.leave_one_out(ds, target_index)
    return {0: without, 1: ds}


def _run_jobs(args_list, fn):
    """Map the module-level job function over the args, in worker processes.

    Jobs are pure functions of their (picklable) arguments with their own
    derived streams, so the execution backend cannot affect any number.
    """
    workers = min(thread_count(), len(args_list))
    if workers <= 1:
        return [fn(a) for a in args_list]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, args_list))


def _assd_job(args):
    world_ds, split, cfg, rng, world, m, synth_rows = args
    enc = D.fit_encoder(world_ds)
    parts = fg.partition(D.encode(world_ds, enc), split)
    model = fg.train(
        cfg.variant, parts, cfg.gan, cfg.dp, rng.child("shadow", world, m)
    )
    synth = D.decode(
        fg.generate(model, synth_rows, rng.child("synth", world, m), best=True)
    )
    return {kind: _EXTRACTORS[kind](synth) for kind in cfg.feature_kinds}


def _asif_job(args):
    world_ds, full_ds, split, cfg, rng, world, m = args
    enc = D.fit_encoder(world_ds)
    parts = fg.partition(D.encode(world_ds, enc), split)
    model = fg.train(
        cfg.variant, parts, cfg.gan, cfg.dp, rng.child("shadow", world, m)
    )
    # the FULL dataset, encoded with the world's encoder, through D_i^1
    full = D.encode(full_ds, enc)
    views = [full.matrix[:, cols] for cols in split.column_spans(enc)]
    feats = np.hstack(
        [nn_forward(d1, v)[0] for d1, v in zip(model.d1_parts, views)]
    )
    return {kind: _MATRIX_EXTRACTORS[kind](feats) for kind in cfg.feature_kinds}


def train_shadows_assd(
    ds: D.TabularDataset,
    target_index: int,
    split: D.VerticalSplit,
    cfg: AuditConfig,
    rng: RngStream,
) -> FeatureSets:
    """Shadow generators per world; features of their synthetic outputs."""
    if not 0 <= target_index < ds.n_rows:
        raise D.DataError(f"target index {target_index} out of range")
    worlds = _world_datasets(ds, target_index)
    synth_rows = cfg.synthetic_rows or ds.n_rows
    jobs = [(world, m) for world in (0, 1) for m in range(cfg.shadows)]
    rows = _run_jobs(
        [(worlds[w], split, cfg, rng, w, m, synth_rows) for w, m in jobs],
        _assd_job,
    )
    features = {
        kind: np.vstack([r[kind] for r in rows]) for kind in cfg.feature_kinds
    }
    labels = np.array([world for world, _ in jobs], dtype=np.int64)
    return FeatureSets(features, labels)


def train_shadows_asif(
    ds: D.TabularDataset,
    target_index: int,
    split: D.VerticalSplit,
    cfg: AuditConfig,
    rng: RngStream,
) -> FeatureSets:
    """Full trainings per world; the whole dataset is pushed through each
    trained first discriminator part and the per-record feature matrix is
    summarized with the configured extractors."""
    if cfg.variant not in (fg.VFLGAN, fg.VFLGAN_BASE):
        raise ValueError("intermediate-feature auditing needs a split-critic variant")
    if not 0 <= target_index < ds.n_rows:
        raise D.DataError(f"target index {target_index} out of range")
    worlds = _world_datasets(ds, target_index)
    jobs = [(world, m) for world in (0, 1) for m in range(cfg.shadows)]
    rows = _run_jobs(
        [(worlds[w], ds, split, cfg, rng, w, m) for w, m in jobs],
        _asif_job,
    )
    features = {
        kind: np.vstack([r[kind] for r in rows]) for kind in cfg.feature_kinds
    }
    labels = np.array([world for world, _ in jobs], dtype=np.int64)
    return FeatureSets(features, labels)


# ---------------------------------------------------------------------------
# the attack
# ---------------------------------------------------------------------------

def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC; tied scores contribute one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs both classes present")
    order = np.argsort(np.concatenate([pos, neg]), kind="stable")
    ranks = np.empty(len(order))
    combined = np.concatenate([pos, neg])[order]
    # average ranks over tie groups
    i = 0
    while i < len(combined):
        j = i
        while j + 1 < len(combined) and combined[j + 1] == combined[i]:
            j += 1
        ranks[i : j + 1] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_of = np.empty(len(order))
    rank_of[order] = ranks
    r_pos = rank_of[: len(pos)].sum()
    u = r_pos - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def run_attack(
    sets: FeatureSets, cfg: AuditConfig, rng: RngStream, target_index: int = -1
) -> AuditReport:
    """Decision-forest adversary over repeated balanced train/test splits."""
    n_train, n_test = cfg.split_counts()
    labels = sets.labels
    world0 = np.nonzero(labels == 0)[0]
    world1 = np.nonzero(labels == 1)[0]
    if min(len(world0), len(world1)) < n_train + n_test:
        raise ValueError("not enough shadows per world for the requested split")
    if n_test < 2:
        raise ValueError("need at least 2 test examples per class")
    means, stds = {}, {}
    for kind in cfg.feature_kinds:
        x = sets.features[kind]
        aucs = []
        for r in range(cfg.repeats):
            stream = rng.child("repeat", kind, r)
            picks = []
            for world in (world0, world1):
                perm = stream.permutation(len(world))
                picks.append((world[perm[:n_train]], world[perm[n_train : n_train + n_test]]))
            train_rows = np.concatenate([p[0] for p in picks])
            test_rows = np.concatenate([p[1] for p in picks])
            forest = train_forest(
                x[train_rows], labels[train_rows], 2, trees=100,
                rng=stream.child("forest"),
            )
            scores = predict_scores(forest, x[test_rows], positive=1)
            aucs.append(auc(scores, labels[test_rows]))
        means[kind] = float(np.mean(aucs))
        stds[kind] = float(np.std(aucs))
    return AuditReport(
        target_index=target_index,
        shadows=cfg.shadows,
        dp_enabled=cfg.dp is not None,
        auc_mean=means,
        auc_std=stds,
    )


# ---------------------------------------------------------------------------
# vulnerable-record selection
# ---------------------------------------------------------------------------

def _quantile(sorted_values: np.ndarray, p: float) -> float:
    """Linear-interpolation quantile at index p*(n-1) over sorted data."""
    n = len(sorted_values)
    pos = p * (n - 1)
    lo = int(np.floor(pos))
    hi = int(np.ceil(pos))
    frac = pos - lo
    return float(sorted_values[lo] * (1 - frac) + sorted_values[hi] * frac)


def find_vulnerable_outlier(ds: D.TabularDataset):
    """Record with the most outlier attributes.

    Per numeric attribute, values below Q1 - (Q3 - Q1) or above
    Q3 + (Q3 - Q1) are flagged; the record with the highest flag count wins
    (ties broken by lowest index, all ties reported).
    """
    if ds.n_rows < 4:
        raise D.DataError("need at least 4 rows for quartile thresholds")
    counts = np.zeros(ds.n_rows, dtype=np.int64)
    for attr, col in zip(ds.schema.attributes, ds.columns):
        if not attr.is_numeric:
            continue
        values = col.astype(np.float64)
        s = np.sort(values)
        q1 = _quantile(s, 0.25)
        q3 = _quantile(s, 0.75)
        threshold = q3 - q1
        counts += ((q1 - values > threshold) | (values - q3 > threshold)).astype(
            np.int64
        )
    best = int(np.max(counts))
    ties = np.nonzero(counts == best)[0]
    return int(ties[0]), counts, ties.tolist()


def find_vulnerable_nn(ds: D.TabularDataset) -> int:
    """Record with the maximum nearest-neighbor distance under the mixed
    cosine metric (one-hot categorical block and raw numeric block weighted
    by their attribute counts)."""
    if ds.n_rows < 2:
        raise D.DataError("need at least 2 rows")
    cat_cols, cont_cols = [], []
    n_cat = n_cont = 0
    for attr, col in zip(ds.schema.attributes, ds.columns):
        if attr.kind == "categorical":
            block = np.zeros((ds.n_rows, len(attr.categories)))
            block[np.arange(ds.n_rows), col] = 1.0
            cat_cols.append(block)
            n_cat += 1
        else:
            cont_cols.append(col.astype(np.float64)[:, None])
            n_cont += 1
    total = n_cat + n_cont
    cat = np.hstack(cat_cols) if cat_cols else np.zeros((ds.n_rows, 0))
    cont = np.hstack(cont_cols) if cont_cols else np.zeros((ds.n_rows, 0))
    dists = nearest_neighbor_distances(cat, cont, n_cat / total, n_cont / total)
    return int(np.argmax(dists))
