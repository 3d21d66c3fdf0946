"""Dataset container, validation, and CSV ingestion.

Group labels are pinned by the per-group instrument lists in ``GroupSpec``:
the j-th block of instrument columns defines group j, so downstream
estimates are never subject to label switching by the optimizer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = ["DataError", "GroupSpec", "Dataset", "load_csv", "write_csv",
           "validate_exclusions"]


class DataError(ValueError):
    """Invalid input data (bad file, bad cell, domain violation)."""


@dataclass(frozen=True)
class GroupSpec:
    """Per-group instrument column lists.

    ``groups[j]`` holds the ordered column names entering group j's choice
    equation. Names may overlap across groups, but identification requires
    each group to keep at least one exclusive continuous instrument when
    there is more than one group. An intercept is prepended to every block
    unless ``add_intercept`` is False.
    """

    groups: tuple[tuple[str, ...], ...]
    add_intercept: bool = True

    def __init__(self, groups, add_intercept: bool = True):
        object.__setattr__(
            self, "groups", tuple(tuple(g) for g in groups)
        )
        object.__setattr__(self, "add_intercept", bool(add_intercept))
        if self.n_groups < 1:
            raise ValueError("GroupSpec needs at least one group")
        for j, g in enumerate(self.groups):
            if len(g) == 0 and not self.add_intercept:
                raise ValueError(f"group {j} has no instrument columns")

    @property
    def n_groups(self) -> int:
        return len(self.groups)


def validate_exclusions(spec: GroupSpec, covariate_names) -> list[str]:
    """Check the exclusive-instrument requirement; returns violation messages.

    With a single group the requirement is vacuous. Otherwise every group
    must have at least one column absent from all other groups' lists and
    from the outcome covariates.
    """
    if spec.n_groups == 1:
        return []
    covs = set(covariate_names)
    violations = []
    for j, cols in enumerate(spec.groups):
        others = set()
        for h, other in enumerate(spec.groups):
            if h != j:
                others.update(other)
        exclusive = [c for c in cols if c not in others and c not in covs]
        if not exclusive:
            violations.append(
                f"group {j} has no instrument excluded from the other groups "
                f"and the covariates"
            )
    return violations


@dataclass(frozen=True)
class Dataset:
    """Validated observation set.

    ``x`` carries a leading constant column by convention; ``z_blocks[j]``
    is the instrument matrix for group j, assembled in GroupSpec order.
    Arrays are frozen after construction and safe to share across threads.
    """

    y: np.ndarray
    d: np.ndarray
    x: np.ndarray
    z_blocks: tuple[np.ndarray, ...]
    x_names: tuple[str, ...] = ()
    z_names: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self):
        y = np.ascontiguousarray(np.asarray(self.y, dtype=float))
        d = np.ascontiguousarray(np.asarray(self.d, dtype=float))
        x = np.ascontiguousarray(np.asarray(self.x, dtype=float))
        zb = tuple(np.ascontiguousarray(np.asarray(z, dtype=float))
                   for z in self.z_blocks)
        n = y.shape[0]
        if y.ndim != 1 or d.shape != (n,) or x.ndim != 2 or x.shape[0] != n:
            raise DataError("inconsistent array shapes in Dataset")
        for j, z in enumerate(zb):
            if z.ndim != 2 or z.shape[0] != n:
                raise DataError(f"instrument block {j} has wrong shape")
        for name, arr in (("y", y), ("x", x), *((f"z_blocks[{j}]", z)
                                                for j, z in enumerate(zb))):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite values in {name}")
        if not np.all(np.isin(d, (0.0, 1.0))):
            raise DataError("treatment indicator must be 0 or 1")
        if d.sum() == 0 or d.sum() == n:
            raise DataError("both treatment arms must be non-empty")
        for arr in (y, d, x, *zb):
            arr.flags.writeable = False
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z_blocks", zb)
        object.__setattr__(self, "x_names", tuple(self.x_names))
        object.__setattr__(self, "z_names", tuple(tuple(g)
                                                  for g in self.z_names))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_groups(self) -> int:
        return len(self.z_blocks)

    @property
    def dim_x(self) -> int:
        return self.x.shape[1]


def _parse_cell(raw: str, row: int, col: str) -> float:
    if raw is None or raw.strip() == "":
        raise DataError(f"missing value at row {row}, column '{col}'")
    try:
        return float(raw)
    except ValueError:
        raise DataError(
            f"non-numeric cell {raw!r} at row {row}, column '{col}'"
        ) from None


def load_csv(path, spec: GroupSpec, column_roles: dict) -> Dataset:
    """Read a UTF-8 comma-separated file into a validated Dataset.

    ``column_roles`` maps column names to one of ``outcome``, ``treatment``,
    ``covariate``, or ``instrument``. Covariates keep the order of the role
    map; instrument blocks follow ``spec``. Row order is preserved. Errors
    name the offending row (1-based, excluding the header) and column.
    """
    roles = dict(column_roles)
    outcome_cols = [c for c, r in roles.items() if r == "outcome"]
    treat_cols = [c for c, r in roles.items() if r == "treatment"]
    cov_cols = [c for c, r in roles.items() if r == "covariate"]
    known = {"outcome", "treatment", "covariate", "instrument"}
    for c, r in roles.items():
        if r not in known:
            raise DataError(f"unknown role {r!r} for column '{c}'")
    if len(outcome_cols) != 1 or len(treat_cols) != 1:
        raise DataError("exactly one outcome and one treatment column required")
    needed = set(roles) | {c for g in spec.groups for c in g}

    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open data file {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = sorted(needed - set(header))
        if missing:
            raise DataError(f"missing columns in {path}: {', '.join(missing)}")
        rows = []
        for idx, rec in enumerate(reader, start=1):
            rows.append({c: _parse_cell(rec.get(c), idx, c) for c in needed})
    if not rows:
        raise DataError(f"no data rows in {path}")

    def column(name):
        return np.array([r[name] for r in rows])

    y = column(outcome_cols[0])
    d = column(treat_cols[0])
    bad = np.nonzero(~np.isin(d, (0.0, 1.0)))[0]
    if bad.size:
        raise DataError(
            f"treatment column '{treat_cols[0]}' has value {d[bad[0]]!r} "
            f"at row {bad[0] + 1}; must be 0 or 1"
        )

    ones = np.ones((len(rows), 1))
    x_cols = [column(c) for c in cov_cols]
    x = np.column_stack([ones] + [c[:, None] for c in x_cols]) \
        if x_cols else ones
    x_names = ("const", *cov_cols)

    z_blocks, z_names = [], []
    for cols in spec.groups:
        block = [column(c)[:, None] for c in cols]
        names = list(cols)
        if spec.add_intercept:
            block = [ones] + block
            names = ["const"] + names
        z_blocks.append(np.hstack(block))
        z_names.append(tuple(names))

    return Dataset(y=y, d=d, x=x, z_blocks=tuple(z_blocks),
                   x_names=x_names, z_names=tuple(z_names))


def write_csv(dataset: Dataset, path, float_fmt="%.17g"):
    """Write the observed columns back to CSV (numeric round trip to 1e-15).

    Covariate and instrument columns are written once each under their
    stored names; the auto-prepended constant is skipped.
    """
    cols: dict[str, np.ndarray] = {"y": dataset.y, "d": dataset.d}
    for k, name in enumerate(dataset.x_names):
        if name != "const":
            cols[name] = dataset.x[:, k]
    for names, block in zip(dataset.z_names, dataset.z_blocks):
        for k, name in enumerate(names):
            if name != "const" and name not in cols:
                cols[name] = block[:, k]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols.keys())
        for i in range(dataset.n):
            writer.writerow([float_fmt % cols[c][i] for c in cols])
