"""Accuracy, proxy-A-distance, average ranks / Nemenyi CD, and the K sweep."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from dropda import diffcore as dc
from dropda.adapt import TrainConfig, accuracy_of, train
from dropda.data import Dataset
from dropda.errors import DimensionError, ValidationError
from dropda.network import NetworkParams, extract_features


def accuracy(params: NetworkParams, ds: Dataset) -> float:
    if ds.labels is None:
        raise ValidationError("accuracy needs a labeled dataset")
    if len(ds) == 0:
        raise ValidationError("accuracy of an empty dataset is undefined")
    if ds.dim != params.input_dim:
        raise DimensionError(f"dataset has {ds.dim} features, network expects {params.input_dim}")
    return accuracy_of(params, ds)


@dataclass(frozen=True)
class ProxyAResult:
    epsilon: float
    d_a_raw: float
    probe: str = "linear-logistic"

    @property
    def d_a(self) -> float:
        return min(max(self.d_a_raw, 0.0), 2.0)


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 300
    lr: float = 0.5
    momentum: float = 0.9
    seed: int = 0
    scaling: str = "global"  # "global": one scalar RMS; "per-feature": z-score each column


def _split(n, seed):
    perm = dc.make_rng(seed).permutation(n)
    half = n // 2
    return perm[:half], perm[half:]


def proxy_a_distance(features_s, features_t, probe: ProbeConfig = ProbeConfig()) -> ProxyAResult:
    """Train a logistic domain probe on half of each domain and test on the rest.

    The probe is a single dense layer on standardized features, trained with
    full-batch momentum SGD from zero weights for a fixed number of steps.
    Both domains are split with the same seed, so swapping the arguments
    mirrors the split exactly. A linear probe gives a lower estimate than a
    kernel machine would.
    """
    fs = dc.as_matrix(features_s)
    ft = dc.as_matrix(features_t)
    if len(fs) < 2 or len(ft) < 2:
        raise ValidationError("each domain needs at least 2 rows")
    if fs.shape[1] != ft.shape[1]:
        raise ValidationError(f"feature dims differ: {fs.shape[1]} vs {ft.shape[1]}")
    s_tr, s_te = _split(len(fs), probe.seed)
    t_tr, t_te = _split(len(ft), probe.seed)
    x_tr = np.vstack([fs[s_tr], ft[t_tr]])
    y_tr = np.concatenate([np.zeros(len(s_tr)), np.ones(len(t_tr))])
    x_te = np.vstack([fs[s_te], ft[t_te]])
    y_te = np.concatenate([np.zeros(len(s_te)), np.ones(len(t_te))])
    mu = x_tr.mean(axis=0)
    if probe.scaling == "per-feature":
        sd = x_tr.std(axis=0)
        sd[sd == 0] = 1.0
    else:
        sd = np.sqrt(np.mean((x_tr - mu) ** 2)) or 1.0
    x_tr = (x_tr - mu) / sd
    x_te = (x_te - mu) / sd
    layer = dc.DenseLayer(np.zeros((1, x_tr.shape[1])), np.zeros(1))
    state = dc.SgdState(probe.lr, probe.momentum)
    for _ in range(probe.steps):
        _, g = dc.sigmoid_bce(dc.dense_forward(x_tr, layer), y_tr)
        _, gw, gb = dc.dense_backward(g, layer)
        dc.sgd_step(layer.params(), [gw, gb], state)
    pred = dc.dense_forward(x_te, layer)[:, 0] > 0
    eps = float(np.mean(pred != (y_te == 1)))
    return ProxyAResult(eps, 2.0 * (1.0 - 2.0 * eps))


@dataclass
class RankTable:
    methods: list[str]
    scores: np.ndarray  # (N datasets, k methods)
    ranks: np.ndarray
    average: np.ndarray


def average_ranks(scores, higher_is_better: bool = True, methods=None) -> RankTable:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 1 or scores.shape[1] < 2:
        raise ValidationError(f"need an N x k score table with N >= 1, k >= 2, got {scores.shape}")
    if np.isnan(scores).any():
        raise ValidationError("score table contains NaN")
    keyed = -scores if higher_is_better else scores
    ranks = np.vstack([rankdata(row, method="average") for row in keyed])
    if methods is None:
        methods = [f"m{i}" for i in range(scores.shape[1])]
    return RankTable(list(methods), scores, ranks, ranks.mean(axis=0))


# Two-tailed Nemenyi critical values q_alpha for k = 2..10 classifiers
# (studentized range statistic at infinite df divided by sqrt(2)),
# as tabulated in Demsar, JMLR 7 (2006), Table 5(a).
NEMENYI_Q = {
    0.05: [1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164],
    0.10: [1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920],
}


def nemenyi_cd(k: int, n: int, alpha: float = 0.05) -> float:
    if alpha not in NEMENYI_Q:
        raise ValidationError(f"alpha must be one of {sorted(NEMENYI_Q)}, got {alpha}")
    if not 2 <= k <= 10:
        raise ValidationError(f"bundled q table covers 2 <= k <= 10, got k={k}")
    if n < 1:
        raise ValidationError("N must be >= 1")
    q = NEMENYI_Q[alpha][k - 2]
    return q * math.sqrt(k * (k + 1) / (6.0 * n))


# ---------------------------------------------------------------- sweeps

SWEEP_HEADER = ["variant", "k", "seed", "acc_tgt", "acc_src", "d_A"]
SUMMARY_HEADER = ["variant", "k", "n_seeds", "acc_tgt_mean", "acc_tgt_std", "acc_src_mean", "d_A_mean"]


@dataclass
class CellResult:
    variant: str
    k: int  # k_fixed for d3a, k_max for cd3a, 1 for grl, 0 for source_only
    seed: int
    acc_tgt: float
    acc_src: float
    d_a: float

    def row(self):
        return [self.variant, self.k, self.seed, repr(self.acc_tgt), repr(self.acc_src), repr(self.d_a)]

    @classmethod
    def from_row(cls, row):
        return cls(row[0], int(row[1]), int(row[2]), float(row[3]), float(row[4]), float(row[5]))


def feature_distance(params: NetworkParams, source: Dataset, target: Dataset, seed: int = 0) -> ProxyAResult:
    fs = extract_features(source.features, params.extractor)
    ft = extract_features(target.features, params.extractor)
    return proxy_a_distance(fs, ft, ProbeConfig(seed=seed))


def run_cell(variant, k, seed, base_cfg: TrainConfig, source, target_train, target_eval) -> CellResult:
    overrides = {"variant": variant, "seed": seed, "eval_period": 0}
    if variant == "d3a":
        overrides["k_fixed"] = k
    elif variant == "cd3a":
        overrides["k_max"] = k
    cfg = replace(base_cfg, **overrides)
    params, _ = train(source, target_train, cfg)
    dist = feature_distance(params, source, target_eval, seed)
    return CellResult(variant, k, seed, accuracy(params, target_eval), accuracy(params, source), dist.d_a)


def write_cells(path, cells) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for c in cells:
            w.writerow(c.row())


def read_cells(path) -> list[CellResult]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != SWEEP_HEADER:
        raise ValidationError(f"{path}: not a sweep cell file")
    return [CellResult.from_row(r) for r in rows[1:]]


def cached_cell(cell_dir, variant, k, seed, *args) -> CellResult:
    """Run a cell unless its result file already exists in ``cell_dir``."""
    if cell_dir is None:
        return run_cell(variant, k, seed, *args)
    path = Path(cell_dir) / f"{variant}-k{k}-seed{seed}.csv"
    if path.exists():
        return read_cells(path)[0]
    cell = run_cell(variant, k, seed, *args)
    tmp = path.with_suffix(".tmp")
    write_cells(tmp, [cell])
    tmp.replace(path)
    return cell


def summarize(cells) -> list[list]:
    groups: dict[tuple, list[CellResult]] = {}
    for c in cells:
        groups.setdefault((c.variant, c.k), []).append(c)
    out = []
    for (variant, k), cs in groups.items():
        acc = np.array([c.acc_tgt for c in cs])
        out.append([variant, k, len(cs), repr(float(acc.mean())), repr(float(acc.std())),
                    repr(float(np.mean([c.acc_src for c in cs]))),
                    repr(float(np.mean([c.d_a for c in cs])))])
    return out


def sweep_plan(base_cfg: TrainConfig, k_values, seeds, n_classes) -> list[tuple[str, int, int]]:
    k_cur = base_cfg.k_max if base_cfg.k_max is not None else n_classes
    plan = [("d3a", k, s) for k in k_values for s in seeds]
    return plan + [("cd3a", max(k_cur, base_cfg.k_min), s) for s in seeds]


def sweep_k(base_cfg: TrainConfig, k_values, seeds, source, target_train, target_eval, cell_dir=None):
    """D3A once per (K, seed) and CD3A once per seed.

    Returns ``(cells, summary)``: per-run results and one summary row per K
    plus one for the curriculum. With ``cell_dir`` each finished run is
    written to its own file and skipped on the next call.
    """
    if not k_values or not seeds:
        raise ValidationError("k_values and seeds must be non-empty")
    args = (base_cfg, source, target_train, target_eval)
    plan = sweep_plan(base_cfg, k_values, seeds, source.n_classes)
    cells = [cached_cell(cell_dir, v, k, s, *args) for v, k, s in plan]
    return cells, summarize(cells)
