"""Dataset representation, CSV/manifest ingestion, and the preprocessing
pipeline: differential features, sparse-feature removal, sex-style residual
features, train-only mean imputation, feature/target scaling, and
group-holdout splitting.

Tables are immutable after construction; every operation returns a new
table, so read-only sharing across threads is safe. All fit statistics are
computed on training rows only and recorded in a serializable plan that can
be replayed bit-exactly.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import stdtr

from .errors import ConfigError, DataError, ShapeError

TIMINGS = ("pre", "during", "post")
KINDS = ("numeric", "categorical")
ROLES = ("feature", "group", "target", "stratifier")
SCALING_MODES = ("none", "normalize", "standardize", "standardize_vs_reference_group")

DEFAULT_MISSING_SENTINELS = ("", "NA")


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnMeta:
    name: str
    timing: str
    kind: str = "numeric"
    role: str = "feature"

    def __post_init__(self) -> None:
        if self.timing not in TIMINGS:
            raise ConfigError(f"column {self.name!r}: unknown timing {self.timing!r}")
        if self.kind not in KINDS:
            raise ConfigError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise ConfigError(f"column {self.name!r}: unknown role {self.role!r}")


@dataclass(frozen=True)
class DatasetTable:
    """Rows of (features, group, targets) with an explicit missing mask.

    ``columns`` describes the numeric matrix ``values``; the group column is
    carried separately as dense integer ids into ``group_names``. Missing
    cells hold NaN and are flagged in ``missing_mask``. ``group_names`` always
    lists every group of the originating study, even for row subsets, so
    group ids stay stable across splits.
    """

    columns: tuple[ColumnMeta, ...]
    values: np.ndarray
    missing_mask: np.ndarray
    group_ids: np.ndarray
    group_names: tuple[str, ...]
    group_column: str = "group"

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        mask = np.array(self.missing_mask, dtype=bool)
        gids = np.array(self.group_ids, dtype=np.int64)
        if values.ndim != 2 or values.shape[1] != len(self.columns):
            raise ShapeError(
                f"values shape {values.shape} does not match {len(self.columns)} columns"
            )
        if mask.shape != values.shape:
            raise ShapeError("missing mask shape must equal values shape")
        if gids.shape != (values.shape[0],):
            raise ShapeError("group ids must have one entry per row")
        if gids.size and (gids.min() < 0 or gids.max() >= len(self.group_names)):
            raise DataError("group ids out of range of group names")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise DataError("column names must be unique")
        for arr in (values, mask, gids):
            arr.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "missing_mask", mask)
        object.__setattr__(self, "group_ids", gids)
        object.__setattr__(self, "_index", {c.name: i for i, c in enumerate(self.columns)})

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_groups(self) -> int:
        return len(self.group_names)

    def column_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise DataError(f"no column named {name!r}") from None

    def column_values(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """(values, observed) for one column; observed is ~missing."""
        j = self.column_index(name)
        return self.values[:, j], ~self.missing_mask[:, j]

    def columns_with(self, role: str | None = None, timing: str | None = None) -> list[ColumnMeta]:
        out = []
        for c in self.columns:
            if role is not None and c.role != role:
                continue
            if timing is not None and c.timing != timing:
                continue
            out.append(c)
        return out

    def take_rows(self, idx: np.ndarray) -> "DatasetTable":
        return DatasetTable(
            self.columns,
            self.values[idx],
            self.missing_mask[idx],
            self.group_ids[idx],
            self.group_names,
            self.group_column,
        )

    def replace_matrix(
        self,
        columns: tuple[ColumnMeta, ...],
        values: np.ndarray,
        missing_mask: np.ndarray,
    ) -> "DatasetTable":
        return DatasetTable(
            columns, values, missing_mask, self.group_ids, self.group_names, self.group_column
        )

    def group_rows(self, group_id: int) -> np.ndarray:
        return np.flatnonzero(self.group_ids == group_id)

    def resolve_group(self, group: int | str) -> int:
        if isinstance(group, str):
            try:
                return self.group_names.index(group)
            except ValueError:
                raise DataError(f"unknown group {group!r}") from None
        gid = int(group)
        if not (0 <= gid < self.n_groups):
            raise DataError(f"group id {gid} out of range")
        return gid


@dataclass(frozen=True)
class SplitSpec:
    """Which group is held out, and which groups never become test folds."""

    held_out_group: int | str
    excluded_holdout_groups: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.held_out_group in self.excluded_holdout_groups:
            raise ConfigError("held-out group cannot also be excluded from holdout")


@dataclass(frozen=True)
class Manifest:
    """Column declarations plus study-level preprocessing hints."""

    columns: tuple[ColumnMeta, ...]
    group_column: str
    differential_pairs: tuple[tuple[str, str], ...] = ()
    reference_group: str | None = None
    missing_values: tuple[str, ...] = DEFAULT_MISSING_SENTINELS

    def to_dict(self) -> dict:
        return {
            "columns": [
                {"name": c.name, "timing": c.timing, "kind": c.kind, "role": c.role}
                for c in self.columns
            ],
            "differential_pairs": [list(p) for p in self.differential_pairs],
            "reference_group": self.reference_group,
            "missing_values": list(self.missing_values),
        }


def auto_differential_pairs(columns: tuple[ColumnMeta, ...]) -> tuple[tuple[str, str], ...]:
    """Pair columns named ``<stem>_post`` / ``<stem>_pre`` (features only)."""
    by_name = {c.name: c for c in columns}
    pairs = []
    for c in columns:
        if c.role != "feature" or not c.name.endswith("_post"):
            continue
        pre_name = c.name[: -len("_post")] + "_pre"
        pre = by_name.get(pre_name)
        if pre is not None and pre.role == "feature":
            pairs.append((c.name, pre_name))
    return tuple(pairs)


_MANIFEST_KEYS = {"columns", "differential_pairs", "reference_group", "missing_values"}
_COLUMN_KEYS = {"name", "timing", "kind", "role"}


def parse_manifest(doc: dict) -> Manifest:
    unknown = set(doc) - _MANIFEST_KEYS
    if unknown:
        raise ConfigError(f"unknown manifest keys: {sorted(unknown)}")
    if "columns" not in doc:
        raise ConfigError("manifest is missing 'columns'")
    metas = []
    for entry in doc["columns"]:
        extra = set(entry) - _COLUMN_KEYS
        if extra:
            raise ConfigError(f"unknown column keys {sorted(extra)} in manifest")
        metas.append(
            ColumnMeta(
                name=entry["name"],
                timing=entry.get("timing", "pre"),
                kind=entry.get("kind", "numeric"),
                role=entry.get("role", "feature"),
            )
        )
    names = [c.name for c in metas]
    if len(set(names)) != len(names):
        raise ConfigError("manifest declares duplicate column names")
    groups = [c for c in metas if c.role == "group"]
    if len(groups) != 1:
        raise ConfigError(f"manifest must declare exactly one group column, found {len(groups)}")
    if not any(c.role == "target" for c in metas):
        raise ConfigError("manifest must declare at least one target column")
    for c in metas:
        if c.role == "target" and c.kind != "numeric":
            raise ConfigError(f"target column {c.name!r} must be numeric")
    table_metas = tuple(c for c in metas if c.role != "group")

    pairs_doc = doc.get("differential_pairs", [])
    if pairs_doc == "auto":
        pairs = auto_differential_pairs(table_metas)
    else:
        pairs = tuple((str(p[0]), str(p[1])) for p in pairs_doc)
    missing = tuple(str(s) for s in doc.get("missing_values", DEFAULT_MISSING_SENTINELS))
    return Manifest(
        columns=table_metas,
        group_column=groups[0].name,
        differential_pairs=pairs,
        reference_group=doc.get("reference_group"),
        missing_values=missing,
    )


def load_manifest(path: str | Path) -> Manifest:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"manifest {path}: invalid JSON ({exc})") from None
    return parse_manifest(doc)


# ---------------------------------------------------------------------------
# CSV loading
# ---------------------------------------------------------------------------


def load_csv(manifest_path: str | Path, data_path: str | Path) -> DatasetTable:
    """Read an RFC-4180 CSV against its manifest.

    Empty cells and configured sentinels become missing-mask entries,
    categorical feature columns are one-hot encoded, a binary categorical
    stratifier becomes a 0/1 column, and the group column is mapped to dense
    integer ids in order of first appearance.
    """
    manifest = load_manifest(manifest_path) if not isinstance(manifest_path, Manifest) else manifest_path
    with open(data_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{data_path}: empty file") from None
        rows = [row for row in reader]
    return table_from_rows(manifest, header, rows, source=str(data_path))


def table_from_rows(
    manifest: Manifest, header: list[str], rows: list[list[str]], source: str = "<data>"
) -> DatasetTable:
    declared = {c.name for c in manifest.columns} | {manifest.group_column}
    for name in header:
        if name not in declared:
            raise DataError(f"{source}: column {name!r} not declared in manifest")
    for name in declared:
        if name not in header:
            raise DataError(f"{source}: manifest column {name!r} missing from data header")
    col_pos = {name: i for i, name in enumerate(header)}
    sentinels = set(manifest.missing_values)
    n = len(rows)

    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{source}: row {r + 2} has {len(row)} cells, expected {len(header)}")

    # group column first: dense ids in order of first appearance
    group_names: list[str] = []
    group_ids = np.zeros(n, dtype=np.int64)
    gpos = col_pos[manifest.group_column]
    for r, row in enumerate(rows):
        label = row[gpos].strip()
        if label in sentinels:
            raise DataError(f"{source}: row {r + 2}: missing group value")
        if label not in group_names:
            group_names.append(label)
        group_ids[r] = group_names.index(label)

    out_columns: list[ColumnMeta] = []
    out_values: list[np.ndarray] = []
    out_mask: list[np.ndarray] = []

    for meta in manifest.columns:
        pos = col_pos[meta.name]
        raw = [row[pos].strip() for row in rows]
        missing = np.array([cell in sentinels for cell in raw], dtype=bool)
        if meta.kind == "numeric":
            vals = np.full(n, np.nan)
            for r, cell in enumerate(raw):
                if missing[r]:
                    continue
                try:
                    vals[r] = float(cell)
                except ValueError:
                    raise DataError(
                        f"{source}: row {r + 2}, column {meta.name!r}: "
                        f"cannot parse {cell!r} as numeric"
                    ) from None
            out_columns.append(meta)
            out_values.append(vals)
            out_mask.append(missing)
        else:  # categorical
            cats = sorted({cell for r, cell in enumerate(raw) if not missing[r]})
            if meta.role == "stratifier":
                if len(cats) != 2:
                    raise DataError(
                        f"{source}: stratifier {meta.name!r} must be binary, "
                        f"found {len(cats)} categories"
                    )
                vals = np.full(n, np.nan)
                for r, cell in enumerate(raw):
                    if not missing[r]:
                        vals[r] = float(cats.index(cell))
                out_columns.append(ColumnMeta(meta.name, meta.timing, "numeric", "stratifier"))
                out_values.append(vals)
                out_mask.append(missing)
            else:
                # one-hot encode a categorical feature
                for cat in cats:
                    vals = np.full(n, np.nan)
                    for r, cell in enumerate(raw):
                        if not missing[r]:
                            vals[r] = 1.0 if cell == cat else 0.0
                    out_columns.append(
                        ColumnMeta(f"{meta.name}={cat}", meta.timing, "numeric", meta.role)
                    )
                    out_values.append(vals)
                    out_mask.append(missing.copy())

    values = np.column_stack(out_values) if out_values else np.zeros((n, 0))
    mask = np.column_stack(out_mask) if out_mask else np.zeros((n, 0), dtype=bool)
    return DatasetTable(
        tuple(out_columns), values, mask, group_ids, tuple(group_names), manifest.group_column
    )


# ---------------------------------------------------------------------------
# Preprocessing operations
# ---------------------------------------------------------------------------


def drop_columns(table: DatasetTable, names: tuple[str, ...]) -> DatasetTable:
    if not names:
        return table
    keep = [i for i, c in enumerate(table.columns) if c.name not in names]
    cols = tuple(table.columns[i] for i in keep)
    return table.replace_matrix(cols, table.values[:, keep], table.missing_mask[:, keep])


def drop_sparse_features(
    table: DatasetTable, threshold: float, train_mask: np.ndarray | None = None
) -> tuple[DatasetTable, tuple[str, ...]]:
    """Remove feature columns whose missing fraction exceeds ``threshold``.

    The fraction is computed on training rows when a mask is given; group,
    target, and stratifier columns are never removed.
    """
    if not (0.0 <= threshold <= 1.0):
        raise ConfigError(f"missing threshold must lie in [0, 1], got {threshold}")
    rows = slice(None) if train_mask is None else np.asarray(train_mask, dtype=bool)
    dropped = []
    for j, col in enumerate(table.columns):
        if col.role != "feature":
            continue
        frac = float(table.missing_mask[rows, j].mean()) if table.n_rows else 0.0
        if frac > threshold:
            dropped.append(col.name)
    return drop_columns(table, tuple(dropped)), tuple(dropped)


def impute_means(
    table: DatasetTable, train_row_mask: np.ndarray
) -> tuple[DatasetTable, dict[str, float]]:
    """Fill missing feature cells with the training-row means.

    Test-row gaps receive the training mean as well; target columns are left
    untouched. Errors out if a feature column has no observed training value
    (it should have been dropped as sparse).
    """
    train_row_mask = np.asarray(train_row_mask, dtype=bool)
    means: dict[str, float] = {}
    for j, col in enumerate(table.columns):
        if col.role != "feature":
            continue
        observed = ~table.missing_mask[:, j] & train_row_mask
        if not observed.any():
            raise DataError(
                f"feature {col.name!r} has no observed training values; "
                "drop it before imputing"
            )
        means[col.name] = float(table.values[observed, j].mean())
    return apply_imputation(table, means), means


def apply_imputation(table: DatasetTable, means: dict[str, float]) -> DatasetTable:
    values = np.array(table.values)
    mask = np.array(table.missing_mask)
    for name, mean in means.items():
        j = table.column_index(name)
        gaps = mask[:, j]
        values[gaps, j] = mean
        mask[gaps, j] = False
    return table.replace_matrix(table.columns, values, mask)


def two_sample_t_test(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sided p-value of Welch's unequal-variance t-test.

    Degenerate samples (zero variance in both) yield p = 1 with a warning,
    which keeps downstream feature screening conservative.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DataError("t-test needs at least two observations per sample")
    va = a.var(ddof=1)
    vb = b.var(ddof=1)
    se2 = va / a.size + vb / b.size
    if se2 == 0.0:
        warnings.warn("t-test on zero-variance samples; returning p=1", stacklevel=2)
        return 1.0
    t = (a.mean() - b.mean()) / np.sqrt(se2)
    df = se2**2 / ((va / a.size) ** 2 / (a.size - 1) + (vb / b.size) ** 2 / (b.size - 1))
    return float(2.0 * stdtr(df, -abs(t)))


@dataclass(frozen=True)
class ResidualStats:
    """Per-column stratum means fitted on training rows."""

    stratifier: str
    mode: str  # replace | append
    columns: dict[str, tuple[tuple[float, float], tuple[float, float]]] = field(default_factory=dict)


def residualize(
    table: DatasetTable,
    stratifier_column: str,
    alpha: float = 0.05,
    train_mask: np.ndarray | None = None,
    mode: str = "replace",
) -> tuple[DatasetTable, ResidualStats]:
    """Replace stratifier-sensitive features by within-stratum residuals.

    A feature qualifies when a Welch t-test between the two strata (training
    rows only) comes out below ``alpha``; its values then become
    ``value - mean(feature | same stratum, training rows)``. ``mode='append'``
    keeps the original and adds a ``<name>_resid`` column instead.
    """
    if mode not in ("replace", "append"):
        raise ConfigError(f"residual mode must be 'replace' or 'append', got {mode!r}")
    train = (
        np.ones(table.n_rows, dtype=bool) if train_mask is None else np.asarray(train_mask, bool)
    )
    s_vals, s_obs = table.column_values(stratifier_column)
    strata = np.unique(s_vals[s_obs & train])
    if strata.size != 2:
        raise DataError(
            f"stratifier {stratifier_column!r} must take exactly two values on "
            f"training rows, found {strata.size}"
        )
    stats: dict[str, tuple[tuple[float, float], tuple[float, float]]] = {}
    for col in table.columns:
        if col.role != "feature" or col.name == stratifier_column:
            continue
        vals, obs = table.column_values(col.name)
        in0 = train & obs & s_obs & (s_vals == strata[0])
        in1 = train & obs & s_obs & (s_vals == strata[1])
        if in0.sum() < 2 or in1.sum() < 2:
            continue
        if vals[in0].var(ddof=1) == 0.0 and vals[in1].var(ddof=1) == 0.0:
            continue  # degenerate t-test; never significant
        p = two_sample_t_test(vals[in0], vals[in1])
        if p < alpha:
            stats[col.name] = (
                (float(strata[0]), float(vals[in0].mean())),
                (float(strata[1]), float(vals[in1].mean())),
            )
    rstats = ResidualStats(stratifier=stratifier_column, mode=mode, columns=stats)
    return apply_residual(table, rstats), rstats


def apply_residual(table: DatasetTable, stats: ResidualStats) -> DatasetTable:
    if not stats.columns:
        return table
    s_vals, s_obs = table.column_values(stats.stratifier)
    values = np.array(table.values)
    mask = np.array(table.missing_mask)
    new_cols = list(table.columns)
    appended_values = []
    appended_mask = []
    for name, ((v0, m0), (v1, m1)) in stats.columns.items():
        j = table.column_index(name)
        col_vals = np.array(values[:, j])
        obs = ~mask[:, j]
        # rows with an unknown stratum keep their raw value
        sel0 = obs & s_obs & (s_vals == v0)
        sel1 = obs & s_obs & (s_vals == v1)
        col_vals[sel0] = col_vals[sel0] - m0
        col_vals[sel1] = col_vals[sel1] - m1
        if stats.mode == "replace":
            values[:, j] = col_vals
        else:
            meta = table.columns[j]
            new_cols.append(ColumnMeta(f"{name}_resid", meta.timing, "numeric", "feature"))
            appended_values.append(col_vals)
            appended_mask.append(mask[:, j].copy())
    if appended_values:
        values = np.column_stack([values] + appended_values)
        mask = np.column_stack([mask] + appended_mask)
    return table.replace_matrix(tuple(new_cols), values, mask)


def differential_features(
    table: DatasetTable, pairs: tuple[tuple[str, str], ...]
) -> DatasetTable:
    """Append post-minus-pre columns for repeated measurements.

    Each pair adds a post-timing feature ``<post>_minus_<pre>``; the result
    is missing wherever either member is. Target columns may not be paired.
    """
    if not pairs:
        return table
    new_cols = list(table.columns)
    add_vals = []
    add_mask = []
    for post_name, pre_name in pairs:
        for name in (post_name, pre_name):
            meta = table.columns[table.column_index(name)]
            if meta.role == "target":
                raise ConfigError(
                    f"differential pair ({post_name!r}, {pre_name!r}) touches target "
                    f"column {name!r}"
                )
        post_vals, post_obs = table.column_values(post_name)
        pre_vals, pre_obs = table.column_values(pre_name)
        diff = post_vals - pre_vals
        missing = ~(post_obs & pre_obs)
        diff = np.where(missing, np.nan, diff)
        new_cols.append(ColumnMeta(f"{post_name}_minus_{pre_name}", "post", "numeric", "feature"))
        add_vals.append(diff)
        add_mask.append(missing)
    values = np.column_stack([table.values] + add_vals)
    mask = np.column_stack([table.missing_mask] + add_mask)
    return table.replace_matrix(tuple(new_cols), values, mask)


@dataclass(frozen=True)
class ScaleStats:
    """Affine per-column transforms: scaled = (x - shift) / scale."""

    mode: str
    feature_affine: dict[str, tuple[float, float]] = field(default_factory=dict)
    target_affine: dict[str, tuple[float, float]] = field(default_factory=dict)
    reference_group: str | None = None
    skipped: tuple[str, ...] = ()


def fit_scaling(
    table: DatasetTable,
    train_mask: np.ndarray,
    mode: str,
    reference_group: str | None = None,
) -> ScaleStats:
    """Fit scaling statistics on training rows.

    ``normalize`` min-maxes features to [0, 1]; ``standardize`` centers and
    scales them; ``standardize_vs_reference_group`` additionally standardizes
    target columns with the reference group's training-row statistics.
    Zero-variance columns are left unscaled with a warning.
    """
    if mode not in SCALING_MODES:
        raise ConfigError(f"unknown scaling mode {mode!r}")
    train = np.asarray(train_mask, dtype=bool)
    feature_affine: dict[str, tuple[float, float]] = {}
    target_affine: dict[str, tuple[float, float]] = {}
    skipped: list[str] = []
    if mode == "none":
        return ScaleStats(mode=mode)

    for col in table.columns:
        if col.role not in ("feature", "stratifier"):
            continue
        vals, obs = table.column_values(col.name)
        sel = obs & train
        if not sel.any():
            skipped.append(col.name)
            continue
        x = vals[sel]
        if mode == "normalize":
            lo, hi = float(x.min()), float(x.max())
            if hi == lo:
                warnings.warn(f"column {col.name!r} has zero range; left unscaled", stacklevel=2)
                skipped.append(col.name)
                continue
            feature_affine[col.name] = (lo, hi - lo)
        else:
            mu, sd = float(x.mean()), float(x.std())
            if sd == 0.0:
                warnings.warn(f"column {col.name!r} has zero variance; left unscaled", stacklevel=2)
                skipped.append(col.name)
                continue
            feature_affine[col.name] = (mu, sd)

    if mode == "standardize_vs_reference_group":
        if reference_group is None:
            raise ConfigError("standardize_vs_reference_group requires a reference group")
        ref_id = table.resolve_group(reference_group)
        ref_rows = (table.group_ids == ref_id) & train
        if not ref_rows.any():
            raise DataError(
                f"reference group {reference_group!r} has no training rows to fit on"
            )
        for col in table.columns:
            if col.role != "target":
                continue
            vals, obs = table.column_values(col.name)
            sel = obs & ref_rows
            if sel.sum() < 2:
                raise DataError(
                    f"target {col.name!r}: reference group needs >=2 observed training values"
                )
            mu, sd = float(vals[sel].mean()), float(vals[sel].std())
            if sd == 0.0:
                warnings.warn(f"target {col.name!r} constant in reference group; left unscaled", stacklevel=2)
                skipped.append(col.name)
                continue
            target_affine[col.name] = (mu, sd)

    return ScaleStats(
        mode=mode,
        feature_affine=feature_affine,
        target_affine=target_affine,
        reference_group=reference_group,
        skipped=tuple(skipped),
    )


def scale_features(table: DatasetTable, stats: ScaleStats) -> DatasetTable:
    """Apply fitted affine transforms; missing cells stay missing."""
    if stats.mode == "none":
        return table
    values = np.array(table.values)
    for name, (shift, scale) in {**stats.feature_affine, **stats.target_affine}.items():
        j = table.column_index(name)
        obs = ~table.missing_mask[:, j]
        values[obs, j] = (values[obs, j] - shift) / scale
    return table.replace_matrix(table.columns, values, table.missing_mask)


def group_holdout_split(
    table: DatasetTable, spec: SplitSpec
) -> tuple[DatasetTable, DatasetTable]:
    """Partition rows into (train = other groups, test = held-out group)."""
    gid = table.resolve_group(spec.held_out_group)
    test_rows = table.group_ids == gid
    if not test_rows.any():
        raise DataError(f"held-out group {table.group_names[gid]!r} has no rows")
    return table.take_rows(~test_rows), table.take_rows(test_rows)


# ---------------------------------------------------------------------------
# The fitted plan
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PreprocessConfig:
    missing_threshold: float = 0.5
    scaling: str = "standardize"
    reference_group: str | None = None
    residual_alpha: float = 0.05
    residual_mode: str = "replace"

    def __post_init__(self) -> None:
        if not (0.0 <= self.missing_threshold <= 1.0):
            raise ConfigError("missing_threshold must lie in [0, 1]")
        if self.scaling not in SCALING_MODES:
            raise ConfigError(f"unknown scaling mode {self.scaling!r}")


@dataclass(frozen=True)
class PreprocessPlan:
    """Everything needed to replay preprocessing bit-exactly.

    Fit statistics derive only from training rows; applying the plan to the
    same raw table reproduces the processed table exactly.
    """

    config: PreprocessConfig
    differential_pairs: tuple[tuple[str, str], ...]
    dropped_columns: tuple[str, ...]
    residual_stats: ResidualStats | None
    imputation_means: dict[str, float]
    scale_stats: ScaleStats

    def to_dict(self) -> dict:
        return {
            "config": {
                "missing_threshold": self.config.missing_threshold,
                "scaling": self.config.scaling,
                "reference_group": self.config.reference_group,
                "residual_alpha": self.config.residual_alpha,
                "residual_mode": self.config.residual_mode,
            },
            "differential_pairs": [list(p) for p in self.differential_pairs],
            "dropped_columns": list(self.dropped_columns),
            "residual_stats": None
            if self.residual_stats is None
            else {
                "stratifier": self.residual_stats.stratifier,
                "mode": self.residual_stats.mode,
                "columns": {
                    name: [list(pair[0]), list(pair[1])]
                    for name, pair in self.residual_stats.columns.items()
                },
            },
            "imputation_means": dict(self.imputation_means),
            "scale_stats": {
                "mode": self.scale_stats.mode,
                "feature_affine": {k: list(v) for k, v in self.scale_stats.feature_affine.items()},
                "target_affine": {k: list(v) for k, v in self.scale_stats.target_affine.items()},
                "reference_group": self.scale_stats.reference_group,
                "skipped": list(self.scale_stats.skipped),
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PreprocessPlan":
        cfg = PreprocessConfig(**doc["config"])
        res = doc["residual_stats"]
        rstats = None
        if res is not None:
            rstats = ResidualStats(
                stratifier=res["stratifier"],
                mode=res["mode"],
                columns={
                    name: (tuple(pair[0]), tuple(pair[1]))
                    for name, pair in res["columns"].items()
                },
            )
        sc = doc["scale_stats"]
        sstats = ScaleStats(
            mode=sc["mode"],
            feature_affine={k: tuple(v) for k, v in sc["feature_affine"].items()},
            target_affine={k: tuple(v) for k, v in sc["target_affine"].items()},
            reference_group=sc["reference_group"],
            skipped=tuple(sc["skipped"]),
        )
        return cls(
            config=cfg,
            differential_pairs=tuple((p[0], p[1]) for p in doc["differential_pairs"]),
            dropped_columns=tuple(doc["dropped_columns"]),
            residual_stats=rstats,
            imputation_means={k: float(v) for k, v in doc["imputation_means"].items()},
            scale_stats=sstats,
        )


def fit_preprocess(
    table: DatasetTable,
    train_row_mask: np.ndarray,
    config: PreprocessConfig,
    differential_pairs: tuple[tuple[str, str], ...] = (),
) -> tuple[PreprocessPlan, DatasetTable]:
    """Fit the full pipeline on training rows and apply it to every row.

    Order: differential features -> sparse-feature removal -> residual
    features -> mean imputation -> scaling. Returns the serializable plan
    and the processed table.
    """
    train = np.asarray(train_row_mask, dtype=bool)
    t = differential_features(table, differential_pairs)
    t, dropped = drop_sparse_features(t, config.missing_threshold, train)
    rstats = None
    stratifiers = t.columns_with(role="stratifier")
    if stratifiers:
        t, rstats = residualize(
            t, stratifiers[0].name, config.residual_alpha, train, config.residual_mode
        )
    t, means = impute_means(t, train)
    sstats = fit_scaling(t, train, config.scaling, config.reference_group)
    t = scale_features(t, sstats)
    plan = PreprocessPlan(
        config=config,
        differential_pairs=differential_pairs,
        dropped_columns=dropped,
        residual_stats=rstats,
        imputation_means=means,
        scale_stats=sstats,
    )
    return plan, t


def apply_preprocess(table: DatasetTable, plan: PreprocessPlan) -> DatasetTable:
    """Replay a fitted plan on a raw table (bit-exact with the fit output)."""
    t = differential_features(table, plan.differential_pairs)
    t = drop_columns(t, plan.dropped_columns)
    if plan.residual_stats is not None:
        t = apply_residual(t, plan.residual_stats)
    t = apply_imputation(t, plan.imputation_means)
    return scale_features(t, plan.scale_stats)


# ---------------------------------------------------------------------------
# Model-facing views
# ---------------------------------------------------------------------------


def model_input_columns(table: DatasetTable) -> list[str]:
    """Feature columns observed before or during treatment, in table order."""
    return [c.name for c in table.columns if c.role == "feature" and c.timing in ("pre", "during")]


def model_inputs(table: DatasetTable, allow_missing: bool = False) -> np.ndarray:
    """The (rows x input features) matrix fed to models."""
    names = model_input_columns(table)
    if not names:
        raise DataError("table has no pre/during feature columns to use as inputs")
    idx = [table.column_index(n) for n in names]
    x = np.array(table.values[:, idx])
    if not allow_missing and table.missing_mask[:, idx].any():
        raise DataError("model inputs contain missing values; impute before modeling")
    return x


@dataclass(frozen=True)
class TaskData:
    """One task's training slice: inputs, group ids, labels, source rows."""

    x: np.ndarray
    group_ids: np.ndarray
    y: np.ndarray
    row_indices: np.ndarray

    def __post_init__(self) -> None:
        if not (len(self.x) == len(self.group_ids) == len(self.y) == len(self.row_indices)):
            raise ShapeError("task data arrays must share their first dimension")

    @property
    def n(self) -> int:
        return len(self.y)

    def take(self, idx: np.ndarray) -> "TaskData":
        return TaskData(self.x[idx], self.group_ids[idx], self.y[idx], self.row_indices[idx])


def binarize_labels(y: np.ndarray) -> np.ndarray:
    """Positive class is a strict increase: y > 0 maps to 1, ties at 0 to 0."""
    return (np.asarray(y, dtype=np.float64) > 0.0).astype(np.float64)


def task_dataset(table: DatasetTable, column: str, kind: str) -> TaskData:
    """Rows with an observed label for one task, as model-ready arrays."""
    if kind not in ("regression", "classification"):
        raise ConfigError(f"unknown task kind {kind!r}")
    vals, obs = table.column_values(column)
    rows = np.flatnonzero(obs)
    if rows.size == 0:
        raise DataError(f"task column {column!r} has no observed values")
    x = model_inputs(table)[rows]
    y = vals[rows]
    if kind == "classification":
        y = binarize_labels(y)
    return TaskData(x, table.group_ids[rows], y, rows)


def withhold_targets(table: DatasetTable) -> DatasetTable:
    """Mask every target cell; the zero-shot firewall for held-out rows."""
    values = np.array(table.values)
    mask = np.array(table.missing_mask)
    for j, col in enumerate(table.columns):
        if col.role == "target":
            values[:, j] = np.nan
            mask[:, j] = True
    return table.replace_matrix(table.columns, values, mask)


def targets_withheld(table: DatasetTable) -> bool:
    for j, col in enumerate(table.columns):
        if col.role == "target" and not table.missing_mask[:, j].all():
            return False
    return True
