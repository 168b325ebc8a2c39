"""Dataset ingestion, model configuration, covariates and result files.

Model configuration is YAML; see README for the schema. Datasets are CSV
files with one row per polling station.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import yaml

from .model import CovariateDesign, Dimensions, ModelError, ParameterVector, StationRecord

SHARE_EPS = 1e-4


class DatasetError(ModelError):
    pass


class ConfigError(ModelError):
    pass


def build_covariate(shares, mode: str = "centered_logit", eps: float = SHARE_EPS) -> np.ndarray:
    """Centered logit of per-station shares (clamped to [eps, 1 - eps]).

    ``mode="raw"`` returns the values unchanged.
    """
    x = np.asarray(shares, dtype=float)
    if mode == "raw":
        return x.copy()
    if mode != "centered_logit":
        raise ConfigError(f"unknown covariate transform {mode!r}")
    if np.any(np.isnan(x)) or np.any(x < 0) or np.any(x > 1):
        raise DatasetError("covariate shares must lie in [0, 1]")
    s = np.clip(x, eps, 1.0 - eps)
    lg = np.log(s) - np.log1p(-s)
    return lg - lg.mean()


@dataclass(frozen=True)
class CovariateDef:
    """One covariate.

    Exactly one source is used: ``share_of`` (a first-election option, share of
    the station electorate), ``column`` (a CSV column read as is) or
    ``numerator``/``denominator`` (CSV count columns summed, then divided).
    """

    name: str
    share_of: str | None = None
    column: str | None = None
    numerator: tuple[str, ...] = ()
    denominator: tuple[str, ...] = ()
    transform: str = "centered_logit"


@dataclass(frozen=True)
class ModelConfig:
    rows: tuple[str, ...]
    columns: tuple[str, ...]
    station_id: str = "station"
    covariates: tuple[CovariateDef, ...] = ()
    effects: tuple[tuple[str, str, str], ...] = ()
    C: float = 50.0
    C_values: tuple[float, ...] = (10.0, 50.0, 100.0)
    shared_tau: bool = False
    fit: dict = field(default_factory=dict)
    exclude_stations: tuple[str, ...] = ()
    allow_unbalanced: bool = False
    seed: int = 0

    def __post_init__(self):
        if len(self.rows) < 1 or len(self.columns) < 2:
            raise ConfigError("need at least one row option and two column options")
        names = [c.name for c in self.covariates]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate covariate names")
        for cov in self.covariates:
            sources = sum([cov.share_of is not None, cov.column is not None, bool(cov.numerator)])
            if sources != 1:
                raise ConfigError(f"covariate {cov.name!r} needs exactly one of share_of, column, numerator")
            if cov.share_of is not None and cov.share_of not in self.rows:
                if cov.share_of in self.columns:
                    raise ConfigError(
                        f"covariate {cov.name!r} uses second-election option {cov.share_of!r}; covariates must "
                        "come from quantities observed jointly with the first election, otherwise the "
                        "outcome enters its own regressors")
                raise ConfigError(f"covariate {cov.name!r}: unknown option {cov.share_of!r}")
        for row, col, cov in self.effects:
            if row not in self.rows:
                raise ConfigError(f"effect row {row!r} is not a first-election option")
            if col not in self.columns:
                raise ConfigError(f"effect column {col!r} is not a second-election option")
            if col == self.columns[-1]:
                raise ConfigError(f"effect ({row}, {col}, {cov}) targets the reference column {col!r}")
            if cov not in names:
                raise ConfigError(f"effect uses undefined covariate {cov!r}")
        self.design()

    @property
    def dims_rc(self) -> tuple[int, int]:
        return len(self.rows), len(self.columns)

    def design(self) -> CovariateDesign:
        names = [c.name for c in self.covariates]
        return CovariateDesign(tuple(
            (self.rows.index(r), self.columns.index(c), names.index(v)) for r, c, v in self.effects))

    def fit_options(self, C: float | None = None, quasi: bool | None = None):
        from .estimation import FitOptions

        opts = dict(self.fit)
        opts["C"] = self.C if C is None else C
        if quasi is not None:
            opts["quasi"] = quasi
        return FitOptions(**opts)

    def to_dict(self) -> dict:
        return {
            "rows": list(self.rows),
            "columns": list(self.columns),
            "station_id": self.station_id,
            "covariates": [
                {k: (list(v) if isinstance(v, tuple) else v) for k, v in cov.__dict__.items() if v not in (None, ())}
                for cov in self.covariates
            ],
            "effects": [list(e) for e in self.effects],
            "C": self.C,
            "C_values": list(self.C_values),
            "shared_tau": self.shared_tau,
            "fit": dict(self.fit),
            "exclude_stations": list(self.exclude_stations),
            "allow_unbalanced": self.allow_unbalanced,
            "seed": self.seed,
        }


_CONFIG_KEYS = {"rows", "columns", "station_id", "covariates", "effects", "C", "C_values", "shared_tau",
                "fit", "exclude_stations", "allow_unbalanced", "seed"}


def config_from_dict(raw: dict) -> ModelConfig:
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        covs = tuple(
            CovariateDef(
                name=str(c["name"]),
                share_of=c.get("share_of"),
                column=c.get("column"),
                numerator=tuple(_as_list(c.get("numerator", ()))),
                denominator=tuple(_as_list(c.get("denominator", ()))),
                transform=c.get("transform", "centered_logit"),
            )
            for c in raw.get("covariates") or ()
        )
        effects = []
        for e in raw.get("effects") or ():
            effects.append((str(e["row"]), str(e["column"]), str(e["covariate"])) if isinstance(e, dict)
                           else tuple(str(x) for x in e))
        return ModelConfig(
            rows=tuple(str(x) for x in raw["rows"]),
            columns=tuple(str(x) for x in raw["columns"]),
            station_id=str(raw.get("station_id", "station")),
            covariates=covs,
            effects=tuple(effects),
            C=float(raw.get("C", 50.0)),
            C_values=tuple(float(x) for x in raw.get("C_values", (10.0, 50.0, 100.0))),
            shared_tau=bool(raw.get("shared_tau", False)),
            fit=dict(raw.get("fit") or {}),
            exclude_stations=tuple(str(x) for x in raw.get("exclude_stations") or ()),
            allow_unbalanced=bool(raw.get("allow_unbalanced", False)),
            seed=int(raw.get("seed", 0)),
        )
    except KeyError as exc:
        raise ConfigError(f"missing config key {exc}") from None


def _as_list(x) -> list[str]:
    return [x] if isinstance(x, str) else [str(v) for v in x]


def load_config(path: str | Path) -> ModelConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return config_from_dict(raw)


def save_config(path: str | Path, config: ModelConfig) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)


def _parse_count(text: str, row: int, col: str) -> int:
    try:
        value = float(text)
    except ValueError:
        raise DatasetError(f"row {row}: column {col!r} is not a number: {text!r}") from None
    if value < 0:
        raise DatasetError(f"row {row}: negative count in column {col!r}")
    if value != int(value):
        raise DatasetError(f"row {row}: non-integer count in column {col!r}")
    return int(value)


def _parse_float(text: str, row: int, col: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DatasetError(f"row {row}: column {col!r} is not a number: {text!r}") from None


def load_dataset(path: str | Path, config: ModelConfig, allow_unbalanced: bool | None = None,
                 exclude: Iterable[str] = ()) -> tuple[list[StationRecord], Dimensions]:
    """Read and validate a station CSV.

    Rows are numbered from 1 for the first data line. Stations listed in
    ``exclude`` (or the config's ``exclude_stations``) are dropped before
    covariates are centered.
    """
    allow = config.allow_unbalanced if allow_unbalanced is None else allow_unbalanced
    excluded = set(config.exclude_stations) | {str(x) for x in exclude}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [config.station_id, *config.rows, *config.columns]
        for cov in config.covariates:
            needed += [c for c in (cov.column,) if c] + list(cov.numerator) + list(cov.denominator)
        missing = [c for c in needed if c not in header]
        if missing:
            raise DatasetError(f"{path}: unknown columns {missing}")
        ids, ns, ys, raw_cov, unbalanced = [], [], [], [], []
        for row, rec in enumerate(reader, start=1):
            if None in rec or any(v is None for v in rec.values()):
                raise DatasetError(f"row {row}: wrong number of fields")
            sid = rec[config.station_id]
            n = [_parse_count(rec[c], row, c) for c in config.rows]
            y = [_parse_count(rec[c], row, c) for c in config.columns]
            if sid in excluded:
                continue
            if sum(n) != sum(y):
                if not allow:
                    raise DatasetError(
                        f"row {row} (station {sid!r}): first-election total {sum(n)} != second-election total "
                        f"{sum(y)}; use --allow-unbalanced to accept")
                unbalanced.append(sid)
            ids.append(sid)
            ns.append(n)
            ys.append(y)
            raw_cov.append(rec)
    if len(set(ids)) != len(ids):
        raise DatasetError(f"{path}: duplicate station ids")
    if not ids:
        raise DatasetError(f"{path}: no stations left after exclusions")
    n = np.array(ns, dtype=np.int64)
    v = np.zeros((len(ids), len(config.covariates)))
    for m, cov in enumerate(config.covariates):
        if cov.share_of is not None:
            tot = n.sum(axis=1)
            vals = n[:, config.rows.index(cov.share_of)] / np.where(tot > 0, tot, 1)
        elif cov.column is not None:
            vals = np.array([_parse_float(rec[cov.column], s + 1, cov.column) for s, rec in enumerate(raw_cov)])
        else:
            num = np.array([[_parse_float(rec[c], s + 1, c) for c in cov.numerator] for s, rec in enumerate(raw_cov)])
            den = np.array([[_parse_float(rec[c], s + 1, c) for c in cov.denominator] for s, rec in enumerate(raw_cov)])
            num, den = num.sum(axis=1), den.sum(axis=1)
            if np.any(den <= 0):
                raise DatasetError(f"covariate {cov.name!r}: non-positive denominator")
            vals = num / den
        v[:, m] = build_covariate(vals, cov.transform)
    records = [StationRecord(n[s], np.array(ys[s]), v[s], ids[s]) for s in range(len(ids))]
    r, c = config.dims_rc
    return records, Dimensions(r, c, len(records))


def write_dataset(path: str | Path, records: Sequence[StationRecord], rows: Sequence[str],
                  columns: Sequence[str], covariate_names: Sequence[str] = (), station_id: str = "station") -> None:
    """Write records as a station CSV; covariates are written as computed values."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([station_id, *rows, *columns, *covariate_names])
        for s, rec in enumerate(records):
            w.writerow([rec.station_id or str(s + 1), *map(int, rec.n), *map(int, rec.y),
                        *(repr(float(x)) for x in rec.v[:len(covariate_names)])])


def fit_result_to_dict(result) -> dict[str, Any]:
    p = result.params

    def arr(a):
        return np.asarray(a).tolist()

    return {
        "alpha": arr(p.alpha),
        "beta": arr(p.beta),
        "tau": arr(p.tau),
        "loglik": result.loglik,
        "information": arr(result.information),
        "covariance": arr(result.covariance),
        "se": [None if not np.isfinite(x) else x for x in np.asarray(result.se).tolist()],
        "iterations": result.iterations,
        "converged": bool(result.converged),
        "clamp_count": int(result.clamp_count),
        "at_boundary": [bool(b) for b in result.at_boundary],
        "C": result.C,
        "quasi": bool(result.quasi),
        "loglik_trace": list(result.loglik_trace),
        "max_abs_score": result.max_abs_score,
    }


def fit_result_from_dict(d: dict):
    from .estimation import FitResult

    return FitResult(
        params=ParameterVector(np.array(d["alpha"], dtype=float), np.array(d["beta"], dtype=float),
                               np.array(d["tau"], dtype=float)),
        loglik=float(d["loglik"]),
        information=np.array(d["information"], dtype=float),
        covariance=np.array(d["covariance"], dtype=float),
        se=np.array([np.nan if x is None else x for x in d["se"]], dtype=float),
        iterations=int(d["iterations"]),
        converged=bool(d["converged"]),
        clamp_count=int(d["clamp_count"]),
        at_boundary=np.array(d["at_boundary"], dtype=bool),
        C=float(d["C"]),
        quasi=bool(d["quasi"]),
        loglik_trace=[float(x) for x in d["loglik_trace"]],
        max_abs_score=float(d["max_abs_score"]),
    )


def save_fit_result(path: str | Path, result) -> None:
    # json writes floats with repr, which round-trips exactly
    with open(path, "w") as fh:
        json.dump(fit_result_to_dict(result), fh, indent=1)
        fh.write("\n")


def load_fit_result(path: str | Path):
    with open(path) as fh:
        return fit_result_from_dict(json.load(fh))


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def format_table(header: Sequence[str], rows: Sequence[Sequence], digits: int = 4) -> str:
    """Aligned text table; floats printed with ``digits`` decimals."""
    cells = [[str(h) for h in header]]
    for row in rows:
        cells.append([f"{x:.{digits}f}" if isinstance(x, (float, np.floating)) else str(x) for x in row])
    widths = [max(len(r[j]) for r in cells) for j in range(len(header))]
    lines = []
    for k, r in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if j == 0 else c.rjust(w) for j, (c, w) in enumerate(zip(r, widths))))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
