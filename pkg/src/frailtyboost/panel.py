"""Loan-period panel data: loading, validation, imputation, encoding, splits.

A panel holds one row per loan-year at risk: identifiers, integer year,
planar coordinates (lon, lat treated as Euclidean), the default indicator,
the monetary exposure and the predictor columns declared by a schema.
Defaults terminate a loan's at-risk history, so a loan has y = 1 only in
its last observed row.  Distances are plain Euclidean in the coordinate
units; no great-circle correction is applied.

CSV format: header exactly ``loan_id,year,lon,lat,default,balance`` followed
by the schema's feature names; missing feature values are empty fields.
Floats are written with Python's shortest round-trip representation, which
makes write(load(file)) reproduce a canonically formatted file exactly.
"""

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

STRUCTURAL_COLUMNS = ("loan_id", "year", "lon", "lat", "default", "balance")


class PanelFormatError(ValueError):
    """Malformed file content; carries the offending line number."""


class PanelValidationError(ValueError):
    """Structurally parseable data that violates per-loan invariants."""


@dataclass
class FeatureSchema:
    """Ordered predictor declarations: name, kind, optional category levels."""

    names: list
    kinds: list
    levels: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.names) != len(self.kinds):
            raise ValueError("names and kinds must align")
        if len(set(self.names)) != len(self.names):
            raise ValueError("feature names must be unique")
        for name in self.names:
            if name in STRUCTURAL_COLUMNS and name != "year":
                raise ValueError(f"feature name {name!r} collides with a structural column")
        for k in self.kinds:
            if k not in ("numeric", "categorical"):
                raise ValueError(f"unknown feature kind {k!r}")
        for name, lv in self.levels.items():
            if name not in self.names:
                raise ValueError(f"levels declared for unknown feature {name!r}")
            if self.kind_of(name) != "categorical":
                raise ValueError(f"levels declared for numeric feature {name!r}")

    def kind_of(self, name):
        return self.kinds[self.names.index(name)]

    def is_categorical(self, name):
        return self.kind_of(name) == "categorical"

    @classmethod
    def parse(cls, text):
        names, kinds, levels = [], [], {}
        for ln, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = next(csv.reader([line]))
            if len(parts) < 2:
                raise PanelFormatError(f"schema line {ln}: expected 'name,kind[,levels...]'")
            name, kind = parts[0].strip(), parts[1].strip()
            names.append(name)
            kinds.append(kind)
            if len(parts) > 2:
                levels[name] = [p.strip() for p in parts[2:]]
        try:
            return cls(names=names, kinds=kinds, levels=levels)
        except ValueError as exc:
            raise PanelFormatError(f"invalid schema: {exc}") from exc

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def to_text(self):
        lines = []
        for name, kind in zip(self.names, self.kinds):
            parts = [name, kind] + list(self.levels.get(name, []))
            lines.append(",".join(parts))
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


def _fmt_float(x):
    # canonical shortest round-trip text; empty field for missing
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    return repr(float(x))


class LoanPanel:
    """Columnar loan-period panel with a frozen feature schema.

    Numeric features are float arrays with NaN for missing; categorical
    features are object arrays with None for missing.  Instances are treated
    as immutable after construction.
    """

    def __init__(self, loan_id, year, lon, lat, default, balance, features, schema,
                 validate=True):
        self.loan_id = np.asarray(loan_id, dtype=object)
        self.year = np.asarray(year, dtype=np.int64)
        self.lon = np.asarray(lon, dtype=float)
        self.lat = np.asarray(lat, dtype=float)
        self.default = np.asarray(default, dtype=np.int64)
        self.balance = np.asarray(balance, dtype=float)
        self.features = dict(features)
        self.schema = schema
        n = self.loan_id.shape[0]
        for arr in (self.year, self.lon, self.lat, self.default, self.balance):
            if arr.shape != (n,):
                raise ValueError("all panel columns must share one length")
        for name in schema.names:
            if name == "year":
                continue
            if name not in self.features:
                raise ValueError(f"missing feature column {name!r}")
            if self.features[name].shape != (n,):
                raise ValueError(f"feature column {name!r} has the wrong length")
        if validate:
            self.validate()

    @property
    def n_obs(self):
        return self.loan_id.shape[0]

    @property
    def n_loans(self):
        return len(set(self.loan_id.tolist()))

    def periods(self):
        return np.unique(self.year)

    def validate(self):
        """Check the per-loan invariants, reporting every violation found."""
        if np.any(~np.isin(self.default, (0, 1))):
            raise PanelValidationError("default indicator must be 0 or 1")
        if np.any(~np.isfinite(self.lon)) or np.any(~np.isfinite(self.lat)):
            raise PanelValidationError("coordinates must be finite")
        if np.any(~np.isfinite(self.balance)) or np.any(self.balance < 0):
            raise PanelValidationError("balance must be finite and nonnegative")
        problems = []
        by_loan = {}
        for i, lid in enumerate(self.loan_id.tolist()):
            by_loan.setdefault(lid, []).append(i)
        for lid, rows in by_loan.items():
            yrs = self.year[rows]
            if len(set(yrs.tolist())) != len(rows):
                dup = int(np.argmax(np.bincount(yrs - yrs.min())) + yrs.min())
                problems.append(f"loan {lid}: duplicate period {dup}")
                continue
            defaults = [r for r in rows if self.default[r] == 1]
            if defaults:
                last = rows[int(np.argmax(yrs))]
                if len(defaults) > 1 or defaults[0] != last:
                    problems.append(f"loan {lid}: default not terminal")
        if problems:
            shown = "; ".join(problems[:20])
            more = "" if len(problems) <= 20 else f" (+{len(problems) - 20} more)"
            raise PanelValidationError(f"invalid panel: {shown}{more}")

    def subset(self, mask_or_idx):
        """Row subset sharing the schema (no revalidation)."""
        idx = np.asarray(mask_or_idx)
        feats = {k: v[idx] for k, v in self.features.items()}
        return LoanPanel(
            self.loan_id[idx],
            self.year[idx],
            self.lon[idx],
            self.lat[idx],
            self.default[idx],
            self.balance[idx],
            feats,
            self.schema,
            validate=False,
        )

    def filter_periods(self, lo=None, hi=None):
        """Rows with lo <= year <= hi (either bound optional)."""
        mask = np.ones(self.n_obs, dtype=bool)
        if lo is not None:
            mask &= self.year >= lo
        if hi is not None:
            mask &= self.year <= hi
        return self.subset(mask)

    def equals(self, other):
        if self.schema.names != other.schema.names or self.n_obs != other.n_obs:
            return False
        base = (
            np.array_equal(self.loan_id, other.loan_id)
            and np.array_equal(self.year, other.year)
            and np.array_equal(self.lon, other.lon, equal_nan=True)
            and np.array_equal(self.lat, other.lat, equal_nan=True)
            and np.array_equal(self.default, other.default)
            and np.array_equal(self.balance, other.balance, equal_nan=True)
        )
        if not base:
            return False
        for name in self.features:
            a, b = self.features[name], other.features[name]
            if a.dtype == object:
                if not np.array_equal(a, b):
                    return False
            elif not np.array_equal(a, b, equal_nan=True):
                return False
        return True


def read_panel_csv(path, schema):
    """Parse and validate a panel CSV against a schema."""
    with open(path, encoding="utf-8", newline="") as fh:
        return _parse_panel(fh, schema, str(path))


def parse_panel_csv(text, schema):
    return _parse_panel(io.StringIO(text), schema, "<string>")


def _parse_panel(fh, schema, where):
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise PanelFormatError(f"{where}: empty file") from None
    expected = list(STRUCTURAL_COLUMNS) + [n for n in schema.names if n != "year"]
    if header != expected:
        raise PanelFormatError(
            f"{where} line 1: header must be {','.join(expected)!r}, got {','.join(header)!r}"
        )
    feat_names = [n for n in schema.names if n != "year"]
    cols = {n: [] for n in feat_names}
    loan_id, year, lon, lat, default, balance = [], [], [], [], [], []
    for ln, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(expected):
            raise PanelFormatError(
                f"{where} line {ln}: expected {len(expected)} fields, got {len(row)}"
            )
        try:
            loan_id.append(row[0])
            year.append(int(row[1]))
            lon.append(float(row[2]))
            lat.append(float(row[3]))
            d = int(row[4])
            if d not in (0, 1):
                raise ValueError("default must be 0 or 1")
            default.append(d)
            balance.append(float(row[5]))
        except ValueError as exc:
            raise PanelFormatError(f"{where} line {ln}: {exc}") from None
        for j, name in enumerate(feat_names):
            raw = row[6 + j]
            if schema.is_categorical(name):
                cols[name].append(raw if raw != "" else None)
            else:
                if raw == "":
                    cols[name].append(np.nan)
                else:
                    try:
                        cols[name].append(float(raw))
                    except ValueError:
                        raise PanelFormatError(
                            f"{where} line {ln}: bad numeric value {raw!r} for {name!r}"
                        ) from None
    features = {}
    for name in feat_names:
        if schema.is_categorical(name):
            features[name] = np.asarray(cols[name], dtype=object)
        else:
            features[name] = np.asarray(cols[name], dtype=float)
    return LoanPanel(loan_id, year, lon, lat, default, balance, features, schema)


def load_panel(csv_path, schema_path):
    """Read a schema file and the panel it describes."""
    schema = FeatureSchema.read(schema_path)
    return read_panel_csv(csv_path, schema)


def panel_to_csv_text(panel):
    feat_names = [n for n in panel.schema.names if n != "year"]
    out = io.StringIO()
    out.write(",".join(list(STRUCTURAL_COLUMNS) + feat_names) + "\n")
    for i in range(panel.n_obs):
        parts = [
            str(panel.loan_id[i]),
            str(int(panel.year[i])),
            _fmt_float(panel.lon[i]),
            _fmt_float(panel.lat[i]),
            str(int(panel.default[i])),
            _fmt_float(panel.balance[i]),
        ]
        for name in feat_names:
            v = panel.features[name][i]
            if panel.schema.is_categorical(name):
                parts.append("" if v is None else str(v))
            else:
                parts.append(_fmt_float(v))
        out.write(",".join(parts) + "\n")
    return out.getvalue()


def write_panel_csv(panel, path):
    """Write the canonical CSV form (shortest float representations)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(panel_to_csv_text(panel))


@dataclass
class Imputer:
    """Train-fitted fill statistics: numeric means and modal categories."""

    numeric_means: dict
    categorical_modes: dict

    def transform(self, panel):
        feats = {}
        for name, col in panel.features.items():
            if panel.schema.is_categorical(name):
                fill = self.categorical_modes.get(name)
                col = col.copy()
                col[np.array([v is None for v in col.tolist()])] = fill
            else:
                col = np.where(np.isnan(col), self.numeric_means.get(name, np.nan), col)
            feats[name] = col
        return LoanPanel(
            panel.loan_id, panel.year, panel.lon, panel.lat, panel.default,
            panel.balance, feats, panel.schema, validate=False,
        )

    def to_dict(self):
        return {
            "numeric_means": dict(self.numeric_means),
            "categorical_modes": dict(self.categorical_modes),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            numeric_means=dict(d["numeric_means"]),
            categorical_modes=dict(d["categorical_modes"]),
        )


def fit_imputer(panel):
    """Column fill statistics from this (training) panel.

    Numerics get their observed mean, categoricals their most frequent level with
    lexicographic tie-break.  A fully missing column is an error.
    """
    means, modes = {}, {}
    for name, col in panel.features.items():
        if panel.schema.is_categorical(name):
            present = [v for v in col.tolist() if v is not None]
            if not present:
                raise PanelValidationError(f"feature {name!r} has no observed values")
            values, counts = np.unique(np.asarray(present, dtype=object), return_counts=True)
            modes[name] = values[np.argmax(counts)]
        else:
            if np.all(np.isnan(col)):
                raise PanelValidationError(f"feature {name!r} has no observed values")
            means[name] = float(np.nanmean(col))
    return Imputer(numeric_means=means, categorical_modes=modes)


def impute(panel):
    """Fill missing values; returns (filled panel, fitted imputer)."""
    imp = fit_imputer(panel)
    return imp.transform(panel), imp


class DesignEncoder:
    """Frozen design-matrix transformation for a fitted model.

    Numerics pass through; categoricals are one-hot encoded over the levels
    seen at fit time plus a reserved "other" level that absorbs unseen
    categories at transform time (with a warning).  Linear mode drops each
    categorical's first level and prepends an intercept column.  A
    categorical schema entry named "year" encodes the panel's year column
    as period fixed effects.
    """

    OTHER = "__other__"

    def __init__(self, schema, linear):
        self.schema = schema
        self.linear = bool(linear)
        self.levels_ = None
        self.columns_ = None

    def _feature_values(self, panel, name):
        if name == "year":
            return panel.year.astype(np.int64).astype(str).astype(object)
        return panel.features[name]

    def fit(self, panel):
        self.levels_ = {}
        for name in self.schema.names:
            if not self.schema.is_categorical(name):
                continue
            declared = self.schema.levels.get(name)
            if declared:
                self.levels_[name] = list(declared)
            else:
                vals = self._feature_values(panel, name)
                present = sorted({v for v in vals.tolist() if v is not None})
                self.levels_[name] = present
        cols = ["intercept"] if self.linear else []
        for name in self.schema.names:
            if self.schema.is_categorical(name):
                levels = self.levels_[name] + [self.OTHER]
                if self.linear:
                    levels = levels[1:]
                cols.extend(f"{name}={lv}" for lv in levels)
            else:
                cols.append(name)
        self.columns_ = cols
        return self

    def transform(self, panel):
        if self.levels_ is None:
            raise ValueError("encoder is not fitted")
        n = panel.n_obs
        blocks = []
        if self.linear:
            blocks.append(np.ones((n, 1)))
        for name in self.schema.names:
            if self.schema.is_categorical(name):
                vals = self._feature_values(panel, name)
                levels = self.levels_[name]
                lookup = {lv: k for k, lv in enumerate(levels)}
                codes = np.array(
                    [lookup.get(v, len(levels)) for v in vals.tolist()], dtype=np.int64
                )
                n_unseen = int(np.sum(codes == len(levels)))
                if n_unseen:
                    warnings.warn(
                        f"{n_unseen} values of {name!r} outside the fitted levels; "
                        "mapped to the reserved other level"
                    )
                onehot = np.zeros((n, len(levels) + 1))
                onehot[np.arange(n), codes] = 1.0
                if self.linear:
                    onehot = onehot[:, 1:]
                blocks.append(onehot)
            else:
                col = panel.features[name]
                if np.any(np.isnan(col)):
                    raise ValueError(f"feature {name!r} still has missing values; impute first")
                blocks.append(col[:, None])
        if not blocks:
            return np.empty((n, 0))
        return np.hstack(blocks)

    def to_dict(self):
        return {
            "linear": self.linear,
            "levels": {k: list(v) for k, v in (self.levels_ or {}).items()},
            "columns": list(self.columns_ or []),
        }

    @classmethod
    def from_dict(cls, d, schema):
        enc = cls(schema, d["linear"])
        enc.levels_ = {k: list(v) for k, v in d["levels"].items()}
        enc.columns_ = list(d["columns"])
        return enc


@dataclass
class SplitWindow:
    """One expanding-window evaluation slice."""

    test_period: int

    @property
    def train_end(self):
        return self.test_period - 1

    @property
    def validation_period(self):
        return self.test_period - 1

    @property
    def inner_train_end(self):
        return self.test_period - 2


@dataclass
class SplitPlan:
    windows: list

    def __iter__(self):
        return iter(self.windows)

    def __len__(self):
        return len(self.windows)


def expanding_window_split(panel, first_test_period, last_test_period=None):
    """Expanding-window plan: for test year Y, train is every year < Y,
    validation is year Y-1 and inner-train every year < Y-1."""
    periods = panel.periods()
    lo, hi = int(periods.min()), int(periods.max())
    if last_test_period is None:
        last_test_period = hi
    first_test_period = int(first_test_period)
    last_test_period = int(last_test_period)
    if first_test_period <= lo + 1:
        raise ValueError(
            f"first test period {first_test_period} leaves no inner-train/validation split"
        )
    if last_test_period < first_test_period:
        raise ValueError("last test period precedes the first")
    windows = []
    for test in range(first_test_period, last_test_period + 1):
        if not np.any(panel.year == test):
            raise ValueError(f"no observations in test period {test}")
        if not np.any(panel.year < test):
            raise ValueError(f"no training observations before period {test}")
        windows.append(SplitWindow(test_period=test))
    return SplitPlan(windows=windows)
