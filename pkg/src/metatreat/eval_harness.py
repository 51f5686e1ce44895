"""Group-holdout cross-validation, metrics, baselines, overfitting-gap
analysis, and randomized grid search over the hyperparameter space.

Every fold holds out one entire treatment group: preprocessing is fitted on
the training rows only, the held-out group's target labels are withheld
from the meta-learner structurally, and the same processed features feed
the baselines so comparisons are like for like. Train-partition scores are
recorded next to test scores for the overfitting-gap analysis, and the
base-learner's pre-meta-training scores are reported alongside the final
meta-learner.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .base_learner import BaseLearnerConfig, init_weights
from .data_model import (
    DatasetTable,
    Manifest,
    PreprocessConfig,
    SplitSpec,
    binarize_labels,
    fit_preprocess,
    group_holdout_split,
    model_inputs,
    task_dataset,
    withhold_targets,
)
from .errors import ConfigError, DataError, NumericError
from .meta_learner import MetaConfig, fine_tune, meta_train, predict_rows
from .rng import child_rng
from .task_selection import SelectionConfig, TaskSpec, select_training_tasks

REGRESSION_BASELINES = ("mean", "median", "knn", "ridge")
CLASSIFICATION_BASELINES = ("knn", "logistic")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve by rank sum (Mann-Whitney) with midranks.

    Equals the probability that a random positive outranks a random
    negative, ties counting one half. Single-class labels make the metric
    undefined and return NaN so callers can exclude the fold with a note.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError("auc expects two equal-length 1-D vectors")
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise DataError("auc labels must be binary (0/1)")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1.0].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mse(pred: np.ndarray, y: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if pred.shape != y.shape or pred.size == 0:
        raise DataError("mse expects two equal-length nonempty vectors")
    return float(np.mean((pred - y) ** 2))


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BaselineConfig:
    """Conventional defaults; the published baselines were grid-tuned but
    their grids were not stated, so these are fixed and documented."""

    knn_k: int = 5
    ridge_alpha: float = 1.0
    logistic_alpha: float = 1e-3
    gd_max_iters: int = 20000
    gd_tol: float = 1e-12


def _gd_minimize(grad_fn, w0: np.ndarray, lr: float, max_iters: int, tol: float) -> np.ndarray:
    w = w0.copy()
    for _ in range(max_iters):
        g = grad_fn(w)
        if np.max(np.abs(g)) < tol:
            break
        w = w - lr * g
    return w


def _fit_ridge(x: np.ndarray, y: np.ndarray, alpha: float, cfg: BaselineConfig) -> np.ndarray:
    """Gradient descent on mean squared error + alpha*||w||^2 (bias free)."""
    n, d = x.shape
    a = np.column_stack([x, np.ones(n)])
    hess = 2.0 * a.T @ a / n
    hess[np.arange(d), np.arange(d)] += 2.0 * alpha
    lip = float(np.linalg.eigvalsh(hess).max())
    if lip == 0.0:
        return np.zeros(d + 1)

    def grad(wb: np.ndarray) -> np.ndarray:
        r = a @ wb - y
        g = 2.0 * a.T @ r / n
        g[:d] += 2.0 * alpha * wb[:d]
        return g

    return _gd_minimize(grad, np.zeros(d + 1), 1.0 / lip, cfg.gd_max_iters, cfg.gd_tol)


def _fit_logistic(x: np.ndarray, y: np.ndarray, alpha: float, cfg: BaselineConfig) -> np.ndarray:
    """Gradient descent on binary cross-entropy + alpha*||w||^2 (bias free)."""
    n, d = x.shape
    a = np.column_stack([x, np.ones(n)])
    lip = float(np.linalg.eigvalsh(a.T @ a).max()) / (4.0 * n) + 2.0 * alpha

    def grad(wb: np.ndarray) -> np.ndarray:
        p = expit(a @ wb)
        g = a.T @ (p - y) / n
        g[:d] += 2.0 * alpha * wb[:d]
        return g

    return _gd_minimize(grad, np.zeros(d + 1), 1.0 / lip, cfg.gd_max_iters, cfg.gd_tol)


def _knn_predict(
    train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, k: int
) -> np.ndarray:
    if k > train_x.shape[0]:
        warnings.warn(
            f"knn k={k} exceeds {train_x.shape[0]} training rows; clipping", stacklevel=2
        )
        k = train_x.shape[0]
    d2 = ((test_x[:, None, :] - train_x[None, :, :]) ** 2).sum(axis=2)
    neighbors = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return train_y[neighbors].mean(axis=1)


def baseline_predict(
    kind: str,
    train: tuple[np.ndarray, np.ndarray],
    test_x: np.ndarray,
    config: BaselineConfig = BaselineConfig(),
) -> np.ndarray:
    """Predictions of one baseline trained on pooled training groups.

    mean/median emit a constant; knn averages the k nearest training rows by
    Euclidean distance on the (already scaled) features; ridge and logistic
    are L2-regularized linear fits obtained by gradient descent on their
    convex objectives.
    """
    train_x, train_y = train
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    if train_y.size == 0:
        raise DataError("baseline needs a nonempty training set")
    if kind == "mean":
        return np.full(test_x.shape[0], float(train_y.mean()))
    if kind == "median":
        return np.full(test_x.shape[0], float(np.median(train_y)))
    if kind == "knn":
        return _knn_predict(train_x, train_y, test_x, config.knn_k)
    if kind == "ridge":
        wb = _fit_ridge(train_x, train_y, config.ridge_alpha, config)
        return test_x @ wb[:-1] + wb[-1]
    if kind == "logistic":
        wb = _fit_logistic(train_x, train_y, config.logistic_alpha, config)
        return expit(test_x @ wb[:-1] + wb[-1])
    raise ConfigError(f"unknown baseline {kind!r}")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricRow:
    group: str
    task: str
    model: str
    metric: str
    value: float
    train_value: float
    n_test: int
    note: str = ""


@dataclass(frozen=True)
class MetricReport:
    rows: tuple[MetricRow, ...]

    def models(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r.model not in seen:
                seen.append(r.model)
        return seen

    def summary(self) -> list[dict]:
        """Mean and standard error (sample sd / sqrt(n)) across fold x task."""
        out = []
        for model in self.models():
            vals = [r.value for r in self.rows if r.model == model and math.isfinite(r.value)]
            if not vals:
                continue
            mean = float(np.mean(vals))
            stderr = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
            out.append(
                {
                    "model": model,
                    "metric": self.rows[0].metric,
                    "mean": mean,
                    "stderr": stderr,
                    "n": len(vals),
                }
            )
        return out

    def to_csv_text(self) -> str:
        lines = ["group,task,model,metric,value,train_value,n_test,note"]
        for r in self.rows:
            lines.append(
                f"{r.group},{r.task},{r.model},{r.metric},{r.value!r},"
                f"{r.train_value!r},{r.n_test},{r.note}"
            )
        return "\n".join(lines) + "\n"


def overfit_gap(report: MetricReport) -> dict[str, dict[str, float]]:
    """Boxplot statistics of (test - train) per model across fold x task."""
    out: dict[str, dict[str, float]] = {}
    for model in report.models():
        gaps = [
            r.value - r.train_value
            for r in report.rows
            if r.model == model and math.isfinite(r.value) and math.isfinite(r.train_value)
        ]
        if not gaps:
            continue
        q = np.percentile(gaps, [0, 25, 50, 75, 100])
        out[model] = {
            "min": float(q[0]),
            "q1": float(q[1]),
            "median": float(q[2]),
            "q3": float(q[3]),
            "max": float(q[4]),
            "n": float(len(gaps)),
        }
    return out


def plot_data_csv(report: MetricReport) -> str:
    """Bar heights (mean), error bars (standard error), and gap boxplot
    statistics, one row per model."""
    gaps = overfit_gap(report)
    lines = ["model,metric,mean,stderr,gap_min,gap_q1,gap_median,gap_q3,gap_max"]
    for entry in report.summary():
        g = gaps.get(entry["model"])
        gap_cells = (
            [repr(g["min"]), repr(g["q1"]), repr(g["median"]), repr(g["q3"]), repr(g["max"])]
            if g
            else ["", "", "", "", ""]
        )
        lines.append(
            f"{entry['model']},{entry['metric']},{entry['mean']!r},{entry['stderr']!r},"
            + ",".join(gap_cells)
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# The cross-validation protocol
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one end-to-end run needs besides the data."""

    task_kind: str = "regression"
    preprocess: PreprocessConfig = PreprocessConfig()
    selection: SelectionConfig = SelectionConfig()
    base: BaseLearnerConfig = BaseLearnerConfig()
    meta: MetaConfig = MetaConfig()
    baselines: BaselineConfig = BaselineConfig()

    def __post_init__(self) -> None:
        if self.task_kind not in ("regression", "classification"):
            raise ConfigError(f"unknown task kind {self.task_kind!r}")

    def to_dict(self) -> dict:
        return {
            "task_kind": self.task_kind,
            "preprocess": dataclasses.asdict(self.preprocess),
            "selection": dataclasses.asdict(self.selection),
            "base": dataclasses.asdict(self.base),
            "meta": dataclasses.asdict(self.meta),
            "baselines": dataclasses.asdict(self.baselines),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = {"task_kind", "preprocess", "selection", "base", "meta", "baselines"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
        sections = {
            "preprocess": PreprocessConfig,
            "selection": SelectionConfig,
            "base": BaseLearnerConfig,
            "meta": MetaConfig,
            "baselines": BaselineConfig,
        }
        kwargs: dict = {"task_kind": doc.get("task_kind", "regression")}
        for name, klass in sections.items():
            sub = doc.get(name, {})
            kwargs[name] = strict_dataclass(klass, sub)
        return cls(**kwargs)


def strict_dataclass(klass, doc: dict):
    """Build a dataclass from a dict, rejecting unknown keys."""
    known = set(klass.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown {klass.__name__} keys: {sorted(unknown)}")
    return klass(**doc)


@dataclass(frozen=True)
class CvConfig:
    excluded_holdout_groups: tuple[str, ...] = ()
    seed: int = 0
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")


def _score(kind: str, preds: np.ndarray, y: np.ndarray) -> tuple[float, str]:
    if kind == "classification":
        value = auc(preds, y)
        note = "undefined: single-class labels" if math.isnan(value) else ""
        return value, note
    return mse(preds, y), ""


def _fold_rows(
    raw_table: DatasetTable,
    manifest: Manifest,
    config: PipelineConfig,
    cv: CvConfig,
    fold_index: int,
    group_name: str,
) -> list[MetricRow]:
    gid = raw_table.resolve_group(group_name)
    train_mask = raw_table.group_ids != gid
    preprocess = config.preprocess
    if preprocess.scaling == "standardize_vs_reference_group" and preprocess.reference_group is None:
        preprocess = replace(preprocess, reference_group=manifest.reference_group)
    plan, processed = fit_preprocess(
        raw_table, train_mask, preprocess, manifest.differential_pairs
    )
    train_table, test_table = group_holdout_split(processed, SplitSpec(group_name))
    masked_test = withhold_targets(test_table)

    target_cols = [c.name for c in processed.columns if c.role == "target"]
    targets = tuple(TaskSpec(col, config.task_kind, "target_task") for col in target_cols)
    tasks = select_training_tasks(train_table, targets, config.selection)

    base_config = replace(
        config.base, head_kind="sigmoid" if config.task_kind == "classification" else "linear"
    )
    n_features = model_inputs(train_table).shape[1]
    theta0 = init_weights(
        base_config,
        n_features,
        len(train_table.group_names),
        child_rng(cv.seed, "fold", fold_index, "init"),
    )
    theta_star = meta_train(
        train_table,
        masked_test,
        tasks,
        base_config,
        config.meta,
        child_rng(cv.seed, "fold", fold_index, "meta"),
        initial_weights=theta0,
    )

    metric_name = "auc" if config.task_kind == "classification" else "mse"
    rows: list[MetricRow] = []
    for task in targets:
        y_vals, y_obs = test_table.column_values(task.column)
        scored = np.flatnonzero(y_obs)
        if scored.size == 0:
            raise DataError(f"held-out group {group_name!r} has no observed {task.column!r}")
        y_test = y_vals[scored]
        if task.kind == "classification":
            y_test = binarize_labels(y_test)
        train_data = task_dataset(train_table, task.column, task.kind)

        for model_name, theta in (("base_initial", theta0), ("meta", theta_star)):
            rng_ft = child_rng(cv.seed, "fold", fold_index, model_name, task.column)
            adapted, transform = fine_tune(theta, task, train_table, base_config, rng_ft)
            preds_test = predict_rows(adapted, masked_test, task.kind, base_config, transform)[
                scored
            ]
            preds_train = predict_rows(adapted, train_table, task.kind, base_config, transform)[
                train_data.row_indices
            ]
            value, note = _score(task.kind, preds_test, y_test)
            train_value, _ = _score(task.kind, preds_train, train_data.y)
            rows.append(
                MetricRow(
                    group_name, task.column, model_name, metric_name,
                    value, train_value, int(scored.size), note,
                )
            )

        x_test = model_inputs(masked_test)[scored]
        baseline_kinds = (
            CLASSIFICATION_BASELINES if task.kind == "classification" else REGRESSION_BASELINES
        )
        for kind in baseline_kinds:
            preds_test = baseline_predict(
                kind, (train_data.x, train_data.y), x_test, config.baselines
            )
            preds_train = baseline_predict(
                kind, (train_data.x, train_data.y), train_data.x, config.baselines
            )
            value, note = _score(task.kind, preds_test, y_test)
            train_value, _ = _score(task.kind, preds_train, train_data.y)
            rows.append(
                MetricRow(
                    group_name, task.column, kind, metric_name,
                    value, train_value, int(scored.size), note,
                )
            )
    rows.sort(key=lambda r: (r.task, r.model))
    return rows


def _fold_worker(payload) -> list[MetricRow]:
    return _fold_rows(*payload)


def run_cv(
    raw_table: DatasetTable,
    manifest: Manifest,
    model_config: PipelineConfig,
    cv_config: CvConfig = CvConfig(),
) -> MetricReport:
    """Full group-holdout protocol: one fold per eligible held-out group.

    Each fold preprocesses on its own training rows, selects tasks,
    meta-trains, meta-tests per target task, and scores baselines on the
    same features. Fold order and output ordering are deterministic and
    independent of the worker count.
    """
    if raw_table.n_groups < 2:
        raise DataError("group-holdout CV needs at least two groups")
    eligible = [
        name for name in raw_table.group_names if name not in cv_config.excluded_holdout_groups
    ]
    if not eligible:
        raise ConfigError("every group is excluded from holdout; nothing to evaluate")
    payloads = [
        (raw_table, manifest, model_config, cv_config, i, name)
        for i, name in enumerate(eligible)
    ]
    if cv_config.jobs > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=cv_config.jobs) as pool:
            fold_rows = list(pool.map(_fold_worker, payloads))
    else:
        fold_rows = [_fold_worker(p) for p in payloads]
    rows: list[MetricRow] = []
    for chunk in fold_rows:
        rows.extend(chunk)
    return MetricReport(tuple(rows))


# ---------------------------------------------------------------------------
# Randomized grid search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchSpace:
    """The published hyperparameter grids, plus the few knobs the write-up
    left unstated (learning rate, missing threshold) with conventional
    values. Candidates are drawn uniformly and independently per field."""

    n_layers: tuple[int, ...] = (2, 4, 6, 8)
    hidden_dim: tuple[int, ...] = (8, 16, 32, 64, 128)
    embedding_dim: tuple[int, ...] = (8, 16, 32, 64, 128)
    activation: tuple[str, ...] = ("relu", "tanh")
    dropout_rate: tuple[float, ...] = (0.05, 0.1, 0.2)
    reg_kind: tuple[str, ...] = ("l1", "l2", "both")
    reg_strength: tuple[float, ...] = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
    optimizer: tuple[str, ...] = ("adam", "sgd")
    learning_rate: tuple[float, ...] = (0.1, 0.01, 0.001)
    inner_iterations: tuple[int, ...] = (1, 2, 5)
    meta_iterations: tuple[int, ...] = (20, 30, 40, 50, 60, 70, 80, 90, 100)
    epsilon0: tuple[float, ...] = (0.25, 0.5, 0.75)
    k: tuple[int, ...] = (5, 10, 15)
    tasks_per_iteration: tuple[int, ...] = (1, 2, 5)
    selection_method: tuple[str, ...] = ("all_post", "pearson", "mutual_info")
    keep_fraction_range: tuple[float, float] = (0.70, 0.99)
    scaling: tuple[str, ...] = ("none", "normalize", "standardize")
    missing_threshold: tuple[float, ...] = (0.3, 0.5, 0.7)


def _pick(rng: np.random.Generator, grid: tuple):
    return grid[int(rng.integers(len(grid)))]


def sample_candidate(
    space: SearchSpace, rng: np.random.Generator, template: PipelineConfig
) -> PipelineConfig:
    base = replace(
        template.base,
        n_layers=_pick(rng, space.n_layers),
        hidden_dim=_pick(rng, space.hidden_dim),
        embedding_dim=_pick(rng, space.embedding_dim),
        activation=_pick(rng, space.activation),
        dropout_rate=_pick(rng, space.dropout_rate),
        reg_kind=_pick(rng, space.reg_kind),
        reg_strength=_pick(rng, space.reg_strength),
        optimizer=_pick(rng, space.optimizer),
        learning_rate=_pick(rng, space.learning_rate),
        inner_iterations=_pick(rng, space.inner_iterations),
    )
    meta = replace(
        template.meta,
        meta_iterations=_pick(rng, space.meta_iterations),
        epsilon0=_pick(rng, space.epsilon0),
        k=_pick(rng, space.k),
        tasks_per_iteration=_pick(rng, space.tasks_per_iteration),
    )
    method = _pick(rng, space.selection_method)
    lo, hi = space.keep_fraction_range
    selection = replace(
        template.selection,
        method=method,
        keep_fraction=1.0 if method == "all_post" else float(rng.uniform(lo, hi)),
    )
    preprocess = replace(
        template.preprocess,
        scaling=_pick(rng, space.scaling),
        missing_threshold=_pick(rng, space.missing_threshold),
    )
    return replace(template, base=base, meta=meta, selection=selection, preprocess=preprocess)


def grid_search(
    space: SearchSpace,
    raw_table: DatasetTable,
    manifest: Manifest,
    budget: int,
    seed: int,
    template: PipelineConfig = PipelineConfig(),
    cv_config: CvConfig = CvConfig(),
) -> tuple[PipelineConfig, list[dict]]:
    """Randomized search: sample ``budget`` candidates, score each by its
    mean CV metric over every fold and task, and return the best.

    Higher AUC wins for classification, lower MSE for regression. The
    leaderboard is deterministic for a given seed; candidates that fail are
    kept with their diagnostics, and an error is raised only if all fail.
    """
    if budget < 1:
        raise ConfigError("grid search budget must be at least 1")
    maximize = template.task_kind == "classification"
    entries: list[dict] = []
    for i in range(budget):
        candidate = sample_candidate(space, child_rng(seed, "candidate", i), template)
        entry: dict = {"candidate": i, "config": candidate.to_dict()}
        try:
            report = run_cv(
                raw_table, manifest, candidate, replace(cv_config, seed=cv_config.seed)
            )
            vals = [
                r.value for r in report.rows if r.model == "meta" and math.isfinite(r.value)
            ]
            if not vals:
                raise DataError("no defined metric values for the meta model")
            entry["score"] = float(np.mean(vals))
            entry["status"] = "ok"
        except (ConfigError, DataError, NumericError) as exc:
            entry["score"] = float("nan")
            entry["status"] = "failed"
            entry["error"] = f"{type(exc).__name__}: {exc}"
        entries.append(entry)

    scored = [e for e in entries if e["status"] == "ok"]
    if not scored:
        details = "; ".join(f"candidate {e['candidate']}: {e['error']}" for e in entries)
        raise DataError(f"all grid-search candidates failed: {details}")
    scored.sort(key=lambda e: ((-e["score"]) if maximize else e["score"], e["candidate"]))
    failed = [e for e in entries if e["status"] != "ok"]
    leaderboard = scored + sorted(failed, key=lambda e: e["candidate"])
    for rank, e in enumerate(leaderboard, start=1):
        e["rank"] = rank
    best = PipelineConfig.from_dict(leaderboard[0]["config"])
    return best, leaderboard
