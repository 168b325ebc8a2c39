"""Parameterization, link functions and moments of the aggregated vote vector.

The second election's last option is the reference category throughout: a
row of transition logits has ``c - 1`` entries and the reference probability
is recovered by complementation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

PROB_FLOOR = 1e-12


class ModelError(ValueError):
    """Invalid model input (bad probabilities, dimensions, designs)."""


class IdentifiabilityError(ModelError):
    """More free mean parameters than the data can identify."""


@dataclass(frozen=True)
class Dimensions:
    r: int
    c: int
    k: int

    def __post_init__(self):
        if self.r < 1 or self.c < 2 or self.k < 1:
            raise ModelError(f"invalid dimensions r={self.r}, c={self.c}, k={self.k}")

    def identified(self, n_beta: int = 0) -> bool:
        """True unless the free mean parameters exceed ``k * (c - 1)``."""
        return self.r * (self.c - 1) + n_beta <= self.k * (self.c - 1)


@dataclass(frozen=True)
class StationRecord:
    """Margins of one polling station.

    Attributes
    ----------
    n : first-election counts, length r.
    y : second-election counts, length c.
    v : covariate values (may be empty).
    station_id : label used in error messages and outputs.
    """

    n: NDArray[np.int64]
    y: NDArray[np.int64]
    v: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))
    station_id: str = ""

    def __post_init__(self):
        n = np.asarray(self.n, dtype=np.int64)
        y = np.asarray(self.y, dtype=np.int64)
        v = np.asarray(self.v, dtype=float).reshape(-1)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "v", v)
        if n.ndim != 1 or y.ndim != 1:
            raise ModelError("station counts must be vectors")
        if (n < 0).any() or (y < 0).any():
            raise ModelError(f"station {self.station_id!r}: negative counts")

    @property
    def balanced(self) -> bool:
        return int(self.n.sum()) == int(self.y.sum())


@dataclass(frozen=True)
class Dataset:
    """Stacked arrays for k stations: n (k, r), y (k, c), v (k, m)."""

    n: NDArray[np.float64]
    y: NDArray[np.float64]
    v: NDArray[np.float64]
    ids: tuple[str, ...]

    @classmethod
    def from_records(cls, records: Sequence[StationRecord]) -> "Dataset":
        if len(records) == 0:
            raise ModelError("empty dataset")
        n = np.array([rec.n for rec in records], dtype=float)
        y = np.array([rec.y for rec in records], dtype=float)
        widths = {rec.v.size for rec in records}
        if len(widths) != 1:
            raise ModelError("stations carry different numbers of covariates")
        v = np.array([rec.v for rec in records], dtype=float).reshape(len(records), -1)
        ids = tuple(rec.station_id or str(s) for s, rec in enumerate(records))
        return cls(n, y, v, ids)

    @property
    def k(self) -> int:
        return self.n.shape[0]

    @property
    def r(self) -> int:
        return self.n.shape[1]

    @property
    def c(self) -> int:
        return self.y.shape[1]

    def records(self) -> list[StationRecord]:
        return [
            StationRecord(self.n[s].astype(np.int64), self.y[s].astype(np.int64), self.v[s], self.ids[s])
            for s in range(self.k)
        ]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.n[index], self.y[index], self.v[index], tuple(np.asarray(self.ids, dtype=object)[index]))


def as_dataset(data: Dataset | Sequence[StationRecord]) -> Dataset:
    return data if isinstance(data, Dataset) else Dataset.from_records(data)


@dataclass(frozen=True)
class CovariateDesign:
    """Sparse covariate effects: each ``(i, j, m)`` entry is one free slope
    of covariate ``m`` on the logit of cell ``(i, j)`` (0-based)."""

    entries: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        entries = tuple(tuple(int(x) for x in e) for e in self.entries)
        object.__setattr__(self, "entries", entries)
        if len(set(entries)) != len(entries):
            raise ModelError("duplicate covariate design entries")
        if any(min(e) < 0 for e in entries):
            raise ModelError("negative index in covariate design")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def n_covariates(self) -> int:
        return max((e[2] for e in self.entries), default=-1) + 1

    def validate(self, r: int, c: int, n_cov: int | None = None) -> None:
        for i, j, m in self.entries:
            if i >= r:
                raise ModelError(f"design row {i} out of range for r={r}")
            if j == c - 1:
                raise ModelError(f"design entry ({i}, {j}, {m}) targets the reference column")
            if j >= c:
                raise ModelError(f"design column {j} out of range for c={c}")
            if n_cov is not None and m >= n_cov:
                raise ModelError(f"design covariate {m} but only {n_cov} covariates supplied")


@dataclass(frozen=True)
class ParameterVector:
    """Baseline logits ``alpha`` (r, c-1), slopes ``beta`` and overdispersion
    logits ``tau``. ``tau`` has length r, or length 1 for a single
    overdispersion parameter shared by all rows."""

    alpha: NDArray[np.float64]
    beta: NDArray[np.float64]
    tau: NDArray[np.float64]

    def __post_init__(self):
        alpha = np.atleast_2d(np.asarray(self.alpha, dtype=float))
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).reshape(-1))
        tau = np.asarray(self.tau, dtype=float).reshape(-1)
        object.__setattr__(self, "tau", tau)
        if tau.size not in (1, alpha.shape[0]):
            raise ModelError(f"tau must have length 1 or r={alpha.shape[0]}, got {tau.size}")

    @property
    def r(self) -> int:
        return self.alpha.shape[0]

    @property
    def c(self) -> int:
        return self.alpha.shape[1] + 1

    @property
    def shared_tau(self) -> bool:
        return self.tau.size == 1 and self.r > 1

    @property
    def size(self) -> int:
        return self.alpha.size + self.beta.size + self.tau.size

    @property
    def theta(self) -> NDArray[np.float64]:
        """Overdispersion per row, broadcast to length r."""
        th = _expit(self.tau)
        return np.broadcast_to(th, (self.r,)).copy()

    def pack(self) -> NDArray[np.float64]:
        return np.concatenate([self.alpha.ravel(), self.beta, self.tau])

    @classmethod
    def unpack(cls, flat: ArrayLike, r: int, c: int, n_beta: int, n_tau: int) -> "ParameterVector":
        flat = np.asarray(flat, dtype=float)
        na = r * (c - 1)
        if flat.size != na + n_beta + n_tau:
            raise ModelError(f"expected {na + n_beta + n_tau} parameters, got {flat.size}")
        return cls(flat[:na].reshape(r, c - 1), flat[na:na + n_beta], flat[na + n_beta:])

    def like(self, flat: ArrayLike) -> "ParameterVector":
        """A vector with this one's layout holding the values in ``flat``."""
        return self.unpack(flat, self.r, self.c, self.beta.size, self.tau.size)

    def names(self, row_names: Sequence[str] | None = None, col_names: Sequence[str] | None = None,
              design: CovariateDesign | None = None, cov_names: Sequence[str] | None = None) -> list[str]:
        rows = list(row_names) if row_names else [str(i + 1) for i in range(self.r)]
        cols = list(col_names) if col_names else [str(j + 1) for j in range(self.c)]
        out = [f"alpha[{rows[i]},{cols[j]}]" for i in range(self.r) for j in range(self.c - 1)]
        entries = design.entries if design is not None else [(-1, -1, b) for b in range(self.beta.size)]
        for b, (i, j, m) in enumerate(entries):
            cov = cov_names[m] if cov_names else str(m + 1)
            out.append(f"beta[{rows[i]},{cols[j]};{cov}]" if i >= 0 else f"beta[{b + 1}]")
        if self.tau.size == 1:
            out.append("tau")
        else:
            out.extend(f"tau[{rows[i]}]" for i in range(self.r))
        return out


@dataclass(frozen=True)
class StationMoments:
    mu: NDArray[np.float64]
    V: NDArray[np.float64]


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def logits_to_probs(lambda_row: ArrayLike) -> NDArray[np.float64]:
    """Multinomial-logit inverse with the last category as reference.

    Works on the last axis, so a stack of rows can be passed at once.
    """
    lam = np.asarray(lambda_row, dtype=float)
    if not np.all(np.isfinite(lam)):
        raise ModelError("non-finite logit")
    full = np.concatenate([lam, np.zeros(lam.shape[:-1] + (1,))], axis=-1)
    full = full - full.max(axis=-1, keepdims=True)
    e = np.exp(full)
    # dividing every entry (reference included) keeps relative accuracy in tiny cells
    return e / e.sum(axis=-1, keepdims=True)


def probs_to_logits(p: ArrayLike) -> NDArray[np.float64]:
    p = np.asarray(p, dtype=float)
    for j, pj in enumerate(np.atleast_1d(p).reshape(-1, p.shape[-1]).T):
        if np.any(pj <= 0) or np.any(pj >= 1) or not np.all(np.isfinite(pj)):
            raise ModelError(f"probability in cell {j} is outside (0, 1)")
    if not np.allclose(p.sum(axis=-1), 1.0, atol=1e-8):
        raise ModelError("probabilities do not sum to 1")
    return np.log(p[..., :-1]) - np.log(p[..., -1:])


def station_logits(params: ParameterVector, design: CovariateDesign, v: NDArray) -> NDArray[np.float64]:
    """Logits for every station: shape (k, r, c-1) from covariates ``v`` (k, m)."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if len(design) != params.beta.size:
        raise ModelError(f"design has {len(design)} entries but beta has {params.beta.size}")
    if len(design) and v.shape[1] < design.n_covariates:
        raise ModelError(f"design uses {design.n_covariates} covariates, {v.shape[1]} supplied")
    lam = np.broadcast_to(params.alpha, (v.shape[0],) + params.alpha.shape).copy()
    for b, (i, j, m) in enumerate(design.entries):
        lam[:, i, j] += params.beta[b] * v[:, m]
    return lam


def station_probs(params: ParameterVector, design: CovariateDesign, v_s: ArrayLike) -> NDArray[np.float64]:
    """Transition probability matrix (r, c) for one station with covariates ``v_s``."""
    v_s = np.asarray(v_s, dtype=float).reshape(1, -1)
    return logits_to_probs(station_logits(params, design, v_s))[0]


def _check_theta(theta):
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0) or np.any(theta >= 1):
        raise ModelError(f"overdispersion theta={theta} outside (0, 1)")


def _multinomial_cov(pi: NDArray) -> NDArray:
    pt = np.asarray(pi, dtype=float)[:-1]
    return np.diag(pt) - np.outer(pt, pt)


def cluster_factor(theta, C, n):
    """Overdispersion factor ``1 + theta * C * (n - 1) / n`` (1 when n <= 1)."""
    n = np.asarray(n, dtype=float)
    safe = np.where(n > 0, n, 1.0)
    return np.where(n > 1, 1.0 + theta * C * (safe - 1.0) / safe, 1.0)


def row_variance(pi_i: ArrayLike, theta_i: float, C: float, n_is: int) -> NDArray[np.float64]:
    """Covariance of one row's second-election counts under the cluster model.

    ``theta_i = 0`` is accepted here as the no-overdispersion limit.
    """
    _check_theta(theta_i)
    if C <= 0:
        raise ModelError("cluster size C must be positive")
    if n_is < 0:
        raise ModelError("negative row count")
    if n_is == 0:
        return np.zeros((len(pi_i) - 1,) * 2)
    return n_is * cluster_factor(theta_i, C, n_is) * _multinomial_cov(pi_i)


def brown_payne_variance(pi_i: ArrayLike, theta_i: float, n_is: int) -> NDArray[np.float64]:
    """Compound-multinomial covariance, factor ``1 + theta (n - 1)``. Comparison only."""
    _check_theta(theta_i)
    if n_is < 0:
        raise ModelError("negative row count")
    if n_is == 0:
        return np.zeros((len(pi_i) - 1,) * 2)
    return n_is * (1.0 + theta_i * (n_is - 1)) * _multinomial_cov(pi_i)


def station_moments(params: ParameterVector, design: CovariateDesign, record: StationRecord,
                    C: float) -> StationMoments:
    pi = station_probs(params, design, record.v)
    theta = params.theta
    mu = record.n.astype(float) @ pi[:, :-1]
    V = sum(row_variance(pi[i], theta[i], C, int(record.n[i])) for i in range(params.r))
    return StationMoments(mu, np.asarray(V))


def goodman_init(goodman_matrix: NDArray, n_beta: int, n_tau: int,
                 clip: tuple[float, float] = (0.02, 0.98), theta0: float = 0.05) -> ParameterVector:
    """Starting values: clipped Goodman rows as logits, zero slopes, theta = 0.05."""
    p = np.clip(np.asarray(goodman_matrix, dtype=float), *clip)
    p = p / p.sum(axis=1, keepdims=True)
    return ParameterVector(probs_to_logits(p), np.zeros(n_beta), np.full(n_tau, logit(theta0)))


def design_from_entries(entries: Iterable[Sequence[int]]) -> CovariateDesign:
    return CovariateDesign(tuple(tuple(e) for e in entries))
