"""Observed-matrix container, delimited-text IO, synthetic data, and the
mask/noise perturbations used by the evaluation protocols.

File format: UTF-8 delimited text, one matrix row per line, comma or tab
delimiter auto-detected, ``NA`` (any case) or an empty field marks a
missing entry, and lines starting with ``#`` are comments.  Values are
written with 17 significant digits so a save/load round trip is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .samplers import RngHandle

__all__ = [
    "MatrixParseError",
    "EmptyMatrixError",
    "DataValidationError",
    "InfeasibleSplitError",
    "ObservedMatrix",
    "DatasetMeta",
    "SplitPlan",
    "load_matrix",
    "save_matrix",
    "generate_synthetic",
    "save_manifest",
    "load_manifest",
    "synthetic_from_manifest",
    "add_noise",
    "make_splits",
    "round_to_counts",
    "validate_counts",
]

MISSING_TOKEN = "NA"
SYNTH_FAMILIES = ("gaussian", "exponential", "poisson")

# prior defaults used by the synthetic generator
_SYNTH_WEIGHT_PREC = 0.1  # Gaussian / exponential factor priors
_SYNTH_GAMMA_SHAPE = 1.0  # Poisson-family Gamma(a, b) factor priors
_SYNTH_GAMMA_RATE = 1.0


class MatrixParseError(ValueError):
    """Malformed matrix file; the message carries the offending line."""


class EmptyMatrixError(ValueError):
    """No observed entries survive parsing/filtering."""


class DataValidationError(ValueError):
    """Data violates a model or container requirement."""


class InfeasibleSplitError(ValueError):
    """No split satisfies the row/column coverage requirement."""


@dataclass(frozen=True)
class ObservedMatrix:
    """A partially observed real matrix: ``values`` plus a boolean ``mask``
    that is True where the entry is observed.

    Instances are immutable (the arrays are marked read-only) and safe to
    share across parallel folds.  Loaders and split builders guarantee
    that every row and column keeps at least one observed entry; the
    constructor itself only requires a nonempty mask so that degenerate
    conditionals (a row with no observations) stay constructible in
    direct API use.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        mask = np.array(self.mask, dtype=bool)
        if values.ndim != 2 or values.shape != mask.shape:
            raise DataValidationError("values and mask must be matching 2-d arrays")
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise DataValidationError("matrix must be nonempty")
        if not mask.any():
            raise EmptyMatrixError("matrix has no observed entries")
        if not np.all(np.isfinite(values[mask])):
            raise DataValidationError("observed entries must be finite")
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @cached_property
    def mask_f(self) -> np.ndarray:
        m = self.mask.astype(float)
        m.setflags(write=False)
        return m

    @cached_property
    def n_obs(self) -> int:
        return int(self.mask.sum())

    @cached_property
    def obs_ij(self) -> np.ndarray:
        idx = np.argwhere(self.mask)
        idx.setflags(write=False)
        return idx

    @cached_property
    def row_obs(self) -> tuple[np.ndarray, ...]:
        return tuple(np.flatnonzero(self.mask[i]) for i in range(self.n_rows))

    @cached_property
    def col_obs(self) -> tuple[np.ndarray, ...]:
        return tuple(np.flatnonzero(self.mask[:, j]) for j in range(self.n_cols))

    @property
    def fraction_observed(self) -> float:
        return self.n_obs / (self.n_rows * self.n_cols)

    def observed_values(self) -> np.ndarray:
        return self.values[self.mask]

    def meta(self, name: str = "") -> "DatasetMeta":
        return DatasetMeta(name, self.n_rows, self.n_cols, self.fraction_observed)


@dataclass(frozen=True)
class DatasetMeta:
    name: str
    rows: int
    columns: int
    fraction_observed: float

    def __post_init__(self):
        if not (0 < self.fraction_observed <= 1 + 1e-9):
            raise DataValidationError("fraction_observed must lie in (0, 1]")


# ---------------------------------------------------------------------------
# Text IO.
# ---------------------------------------------------------------------------


def _parse_token(tok: str, path: str, lineno: int) -> float:
    tok = tok.strip()
    if tok == "" or tok.upper() == MISSING_TOKEN:
        return np.nan
    try:
        return float(tok)
    except ValueError:
        raise MatrixParseError(f"{path}:{lineno}: cannot parse value {tok!r}") from None


def load_matrix(path, min_observed: int = 3, name: str | None = None) -> ObservedMatrix:
    """Load a delimited-text matrix.

    Rows and columns with fewer than ``min_observed`` observed entries are
    dropped, repeatedly, until the matrix is stable (so loading an
    already-filtered matrix changes nothing).  Pass ``min_observed=1`` to
    keep everything that has any data at all.
    """
    path = str(path)
    rows: list[list[float]] = []
    delim: str | None = None
    width: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.rstrip("\n").rstrip("\r")
            if not stripped.strip() or stripped.lstrip().startswith("#"):
                continue
            if delim is None:
                delim = "\t" if "\t" in stripped else ","
            toks = stripped.split(delim)
            if width is None:
                width = len(toks)
            elif len(toks) != width:
                raise MatrixParseError(
                    f"{path}:{lineno}: expected {width} fields, found {len(toks)}"
                )
            rows.append([_parse_token(t, path, lineno) for t in toks])
    if not rows:
        raise EmptyMatrixError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=float)
    mask = np.isfinite(values)
    values, mask = _filter_sparse_lines(values, mask, min_observed)
    if values.size == 0 or not mask.any():
        raise EmptyMatrixError(f"{path}: no entries left after filtering")
    values = np.where(mask, values, 0.0)
    return ObservedMatrix(values, mask)


def _filter_sparse_lines(values, mask, min_observed):
    while True:
        keep_rows = mask.sum(axis=1) >= min_observed
        if not keep_rows.all():
            values, mask = values[keep_rows], mask[keep_rows]
            if values.size == 0:
                return values, mask
        keep_cols = mask.sum(axis=0) >= min_observed
        if not keep_cols.all():
            values, mask = values[:, keep_cols], mask[:, keep_cols]
            if values.size == 0:
                return values, mask
        if keep_rows.all() and keep_cols.all():
            return values, mask


def save_matrix(m: ObservedMatrix, path, delimiter: str = ",") -> None:
    path = str(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# rows={m.n_rows} cols={m.n_cols} observed={m.n_obs}\n")
        for i in range(m.n_rows):
            cells = [
                format(m.values[i, j], ".17g") if m.mask[i, j] else MISSING_TOKEN
                for j in range(m.n_cols)
            ]
            fh.write(delimiter.join(cells) + "\n")


# ---------------------------------------------------------------------------
# Synthetic data.
# ---------------------------------------------------------------------------


def _sample_mask(rng: RngHandle, n_rows: int, n_cols: int, fraction: float) -> np.ndarray:
    total = n_rows * n_cols
    n_obs = int(round(fraction * total))
    n_obs = min(max(n_obs, 1), total)
    if n_obs < max(n_rows, n_cols):
        raise InfeasibleSplitError(
            f"{n_obs} observed entries cannot cover {n_rows} rows and {n_cols} columns"
        )
    flat = rng.gen.permutation(total)[:n_obs]
    mask = np.zeros(total, dtype=bool).reshape(n_rows, n_cols)
    mask.ravel()[flat] = True
    _repair_coverage(rng, mask)
    return mask


def _repair_coverage(rng: RngHandle, mask: np.ndarray) -> None:
    """Move observed cells so every row and column keeps at least one,
    preserving the total count."""
    n_rows, n_cols = mask.shape
    for _ in range(n_rows + n_cols + 1):
        row_counts = mask.sum(axis=1)
        col_counts = mask.sum(axis=0)
        empty_rows = np.flatnonzero(row_counts == 0)
        empty_cols = np.flatnonzero(col_counts == 0)
        if empty_rows.size == 0 and empty_cols.size == 0:
            return
        # donors: observed cells whose row and column both stay covered
        donor_i, donor_j = np.nonzero(mask & (row_counts[:, None] > 1) & (col_counts[None, :] > 1))
        if donor_i.size == 0:
            raise InfeasibleSplitError("cannot cover every row and column at this density")
        pick = int(rng.gen.integers(donor_i.size))
        if empty_rows.size:
            i = int(empty_rows[0])
            j = int(rng.gen.integers(n_cols))
        else:
            j = int(empty_cols[0])
            i = int(rng.gen.integers(n_rows))
        mask[donor_i[pick], donor_j[pick]] = False
        mask[i, j] = True
    raise InfeasibleSplitError("coverage repair did not converge")


def generate_synthetic(
    n_rows: int,
    n_cols: int,
    k_true: int,
    family: str,
    tau: float,
    fraction_observed: float,
    seed: int,
) -> tuple[ObservedMatrix, np.ndarray, np.ndarray]:
    """Generate a matrix from one of the model families.

    Factors are drawn from the family's default priors; the observed
    matrix is their product plus Gaussian noise of precision ``tau``
    (``tau = inf`` means no noise), or a Poisson draw for the poisson
    family.  Returns ``(matrix, U, V)`` with the ground-truth factors.
    """
    if family not in SYNTH_FAMILIES:
        raise DataValidationError(f"unknown family {family!r}; choose from {SYNTH_FAMILIES}")
    if n_rows < 1 or n_cols < 1 or k_true < 1 or k_true > min(n_rows, n_cols):
        raise DataValidationError("need 1 <= k_true <= min(n_rows, n_cols)")
    if not tau > 0:
        raise DataValidationError("tau must be positive")
    if not 0 < fraction_observed <= 1:
        raise DataValidationError("fraction_observed must lie in (0, 1]")
    rng = RngHandle(seed)
    if family == "gaussian":
        sd = 1.0 / np.sqrt(_SYNTH_WEIGHT_PREC)
        u = rng.gen.normal(0.0, sd, size=(n_rows, k_true))
        v = rng.gen.normal(0.0, sd, size=(n_cols, k_true))
    elif family == "exponential":
        u = rng.gen.exponential(1.0 / _SYNTH_WEIGHT_PREC, size=(n_rows, k_true))
        v = rng.gen.exponential(1.0 / _SYNTH_WEIGHT_PREC, size=(n_cols, k_true))
    else:
        u = rng.gen.gamma(_SYNTH_GAMMA_SHAPE, 1.0 / _SYNTH_GAMMA_RATE, size=(n_rows, k_true))
        v = rng.gen.gamma(_SYNTH_GAMMA_SHAPE, 1.0 / _SYNTH_GAMMA_RATE, size=(n_cols, k_true))
    product = u @ v.T
    if family == "poisson":
        values = rng.gen.poisson(product).astype(float)
    elif np.isinf(tau):
        values = product
    else:
        values = product + rng.gen.normal(0.0, 1.0 / np.sqrt(tau), size=product.shape)
    mask = _sample_mask(rng, n_rows, n_cols, fraction_observed)
    return ObservedMatrix(np.where(mask, values, 0.0), mask), u, v


def save_manifest(path, *, n_rows, n_cols, k_true, family, tau, fraction_observed, seed) -> None:
    """Record everything needed to regenerate a synthetic matrix bit-identically."""
    doc = {
        "format": "gibbsmf-synthetic-v1",
        "rows": int(n_rows),
        "cols": int(n_cols),
        "k_true": int(k_true),
        "family": str(family),
        "tau": float(tau),
        "fraction_observed": float(fraction_observed),
        "seed": int(seed),
    }
    with open(str(path), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> dict:
    with open(str(path), "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "gibbsmf-synthetic-v1":
        raise DataValidationError(f"{path}: not a synthetic-dataset manifest")
    return doc


def synthetic_from_manifest(doc: dict) -> tuple[ObservedMatrix, np.ndarray, np.ndarray]:
    return generate_synthetic(
        doc["rows"], doc["cols"], doc["k_true"], doc["family"],
        doc["tau"], doc["fraction_observed"], doc["seed"],
    )


# ---------------------------------------------------------------------------
# Perturbations and splits.
# ---------------------------------------------------------------------------


def add_noise(m: ObservedMatrix, noise_to_signal: float, seed: int) -> ObservedMatrix:
    """Add zero-mean Gaussian noise to the observed entries.

    The noise variance is ``noise_to_signal`` times the variance of the
    observed data (a variance-to-variance ratio).  The mask is unchanged.
    """
    if noise_to_signal < 0:
        raise DataValidationError("noise_to_signal must be nonnegative")
    if noise_to_signal == 0:
        return ObservedMatrix(m.values.copy(), m.mask.copy())
    rng = RngHandle(seed)
    sd = float(np.sqrt(noise_to_signal * np.var(m.observed_values())))
    noise = rng.gen.normal(0.0, sd, size=m.values.shape)
    values = m.values + noise * m.mask_f
    return ObservedMatrix(values, m.mask.copy())


@dataclass(frozen=True)
class SplitPlan:
    """Assignment of every observed entry to a fold.

    Folds partition the observed set, their sizes differ by at most one,
    and each training set (the complement of one fold) keeps at least one
    observation in every row and column.  For a holdout split, fold 0 is
    the training set and fold 1 the test set.
    """

    obs_ij: np.ndarray
    fold_of: np.ndarray
    n_folds: int
    seed: int
    kind: str  # "kfold" or "holdout"

    def __post_init__(self):
        obs = np.asarray(self.obs_ij, dtype=int)
        folds = np.asarray(self.fold_of, dtype=int)
        obs.setflags(write=False)
        folds.setflags(write=False)
        object.__setattr__(self, "obs_ij", obs)
        object.__setattr__(self, "fold_of", folds)

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.n_folds)

    def test_indices(self, fold: int) -> np.ndarray:
        return self.obs_ij[self.fold_of == fold]

    def train_indices(self, fold: int) -> np.ndarray:
        return self.obs_ij[self.fold_of != fold]

    def train_matrix(self, m: ObservedMatrix, fold: int) -> ObservedMatrix:
        mask = np.zeros_like(m.mask)
        keep = self.train_indices(fold)
        mask[keep[:, 0], keep[:, 1]] = True
        return ObservedMatrix(np.where(mask, m.values, 0.0), mask)


def _train_coverage_violations(m, obs_ij, fold_of, fold):
    """Entries of ``fold`` whose removal leaves their row or column empty."""
    in_fold = fold_of == fold
    rows = np.zeros(m.n_rows, dtype=int)
    cols = np.zeros(m.n_cols, dtype=int)
    train = obs_ij[~in_fold]
    np.add.at(rows, train[:, 0], 1)
    np.add.at(cols, train[:, 1], 1)
    bad = in_fold & ((rows[obs_ij[:, 0]] == 0) | (cols[obs_ij[:, 1]] == 0))
    return np.flatnonzero(bad)


def make_splits(
    m: ObservedMatrix,
    n_folds: int | None = None,
    holdout_fraction: float | None = None,
    seed: int = 0,
) -> SplitPlan:
    """Partition the observed entries into folds, or carve out a holdout set.

    Entries whose removal would empty a row or column of the training set
    are swapped with entries from other folds; if no swap can restore
    coverage an :class:`InfeasibleSplitError` is raised.  Deterministic
    under ``seed``.
    """
    if (n_folds is None) == (holdout_fraction is None):
        raise DataValidationError("pass exactly one of n_folds or holdout_fraction")
    rng = RngHandle(seed)
    obs_ij = m.obs_ij.copy()
    n = obs_ij.shape[0]
    if n_folds is not None:
        if n_folds < 2:
            raise DataValidationError("n_folds must be at least 2")
        if n_folds > n:
            raise InfeasibleSplitError("more folds than observed entries")
        kind = "kfold"
        k = n_folds
        fold_of = np.empty(n, dtype=int)
        fold_of[rng.gen.permutation(n)] = np.arange(n) % k
    else:
        if not 0 < holdout_fraction < 1:
            raise DataValidationError("holdout_fraction must lie in (0, 1)")
        n_test = int(round(holdout_fraction * n))
        if n_test < 1 or n_test >= n:
            raise InfeasibleSplitError("holdout fraction leaves no test or no training data")
        kind = "holdout"
        k = 2
        fold_of = np.zeros(n, dtype=int)
        fold_of[rng.gen.permutation(n)[:n_test]] = 1
    _repair_split(rng, m, obs_ij, fold_of, k, kind)
    return SplitPlan(obs_ij, fold_of, k, seed, kind)


def _repair_split(rng, m, obs_ij, fold_of, k, kind):
    folds = [1] if kind == "holdout" else list(range(k))
    for _ in range(200):
        swapped = False
        for fold in folds:
            bad = _train_coverage_violations(m, obs_ij, fold_of, fold)
            if bad.size == 0:
                continue
            e1 = int(bad[rng.gen.integers(bad.size)])
            others = np.flatnonzero(fold_of != fold)
            if others.size == 0:
                raise InfeasibleSplitError("cannot restore row/column coverage")
            e2 = int(others[rng.gen.integers(others.size)])
            fold_of[e1], fold_of[e2] = fold_of[e2], fold_of[e1]
            swapped = True
        if not swapped:
            return
    # final check after the pass budget
    for fold in folds:
        if _train_coverage_violations(m, obs_ij, fold_of, fold).size:
            raise InfeasibleSplitError("cannot restore row/column coverage")


# ---------------------------------------------------------------------------
# Count-data helpers for the Poisson-likelihood models.
# ---------------------------------------------------------------------------


def round_to_counts(m: ObservedMatrix) -> ObservedMatrix:
    """Round observed values half-up to integers, keeping one real-valued store."""
    rounded = np.floor(m.values + 0.5)
    bad = m.mask & (rounded < 0)
    if bad.any():
        i, j = map(int, np.argwhere(bad)[0])
        raise DataValidationError(f"cell ({i},{j}) value {m.values[i, j]!r} rounds negative")
    return ObservedMatrix(np.where(m.mask, rounded, 0.0), m.mask.copy())


def validate_counts(m: ObservedMatrix) -> None:
    """Require every observed entry to be a nonnegative integer."""
    vals = m.values
    bad = m.mask & ((vals < 0) | (vals != np.floor(vals)))
    if bad.any():
        i, j = map(int, np.argwhere(bad)[0])
        raise DataValidationError(
            f"cell ({i},{j}) value {vals[i, j]!r} is not a nonnegative integer"
        )
