"""Gaussian-approximation likelihood, Fisher scoring and standard errors.

Each station contributes a multivariate normal density for its
second-election counts (reference column dropped) with mean and covariance
given by the cluster-overdispersed model. Parameters are packed as
``[alpha (row-major), beta, tau]``.

Per-station contributions are reduced with exactly rounded summation so the
results do not depend on station order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_factor, cho_solve

from .model import (
    PROB_FLOOR,
    CovariateDesign,
    Dataset,
    IdentifiabilityError,
    ModelError,
    ParameterVector,
    StationRecord,
    as_dataset,
    goodman_init,
    logits_to_probs,
    station_logits,
)

log = logging.getLogger(__name__)

ALPHA_BOUND = 15.0
TAU_BOUND = 15.0


class FitError(ModelError):
    pass


@dataclass(frozen=True)
class FitOptions:
    C: float = 50.0
    max_iterations: int = 100
    gradient_tolerance: float = 1e-6
    step_halving_max: int = 10
    ridge: float = 1e-8
    max_step: float = 2.0
    quasi: bool = False

    def __post_init__(self):
        if min(self.C, self.max_iterations, self.gradient_tolerance, self.ridge, self.max_step) <= 0 or self.step_halving_max < 0:
            raise ModelError("fit options must be positive")


@dataclass
class FitResult:
    params: ParameterVector
    loglik: float
    information: NDArray[np.float64]
    covariance: NDArray[np.float64]
    se: NDArray[np.float64]
    iterations: int
    converged: bool
    clamp_count: int
    at_boundary: NDArray[np.bool_]
    C: float
    quasi: bool = False
    loglik_trace: list[float] = field(default_factory=list)
    max_abs_score: float = float("nan")


@dataclass
class _Eval:
    loglik: float
    score: NDArray | None = None
    info: NDArray | None = None
    clamp_count: int = 0


def _exact_sum(a: NDArray) -> NDArray:
    """Sum over axis 0 with correctly rounded (order independent) results."""
    a = np.asarray(a, dtype=float)
    flat = a.reshape(a.shape[0], -1)
    return np.array([math.fsum(col) for col in flat.T]).reshape(a.shape[1:])


def _lambda_jacobian(params: ParameterVector, design: CovariateDesign, ds: Dataset) -> NDArray:
    """d lambda[s, i, m] / d phi[p] as an array (k, P, r, c-1); zero for tau."""
    r, q = params.alpha.shape
    G = np.zeros((ds.k, params.size, r, q))
    for i in range(r):
        for m in range(q):
            G[:, i * q + m, i, m] = 1.0
    na = r * q
    for b, (i, j, m) in enumerate(design.entries):
        G[:, na + b, i, j] = ds.v[:, m]
    return G


def _factorize(V: NDArray, ridge: float, ids: Sequence[str]) -> NDArray:
    """Cholesky factors of a stack of covariances, repairing singular ones."""
    try:
        return np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        pass
    L = np.empty_like(V)
    eye = np.eye(V.shape[-1])
    for s in range(V.shape[0]):
        try:
            L[s] = np.linalg.cholesky(V[s])
            continue
        except np.linalg.LinAlgError:
            pass
        scale = max(float(np.trace(V[s])) / V.shape[-1], 1.0)
        try:
            L[s] = np.linalg.cholesky(V[s] + ridge * scale * eye)
        except np.linalg.LinAlgError:
            raise ModelError(f"station {ids[s]!r}: covariance singular after ridge repair") from None
    return L


def _evaluate(params: ParameterVector, design: CovariateDesign, ds: Dataset, C: float,
              order: int = 2, quasi: bool = False, ridge: float = 1e-8) -> _Eval:
    r, q = params.alpha.shape
    if ds.r != r or ds.c != q + 1:
        raise ModelError(f"data is {ds.r}x{ds.c} but parameters are {r}x{q + 1}")
    n = ds.n
    pt = logits_to_probs(station_logits(params, design, ds.v))[..., :-1]
    ptc = np.clip(pt, PROB_FLOOR, 1.0 - PROB_FLOOR)
    clamps = int(np.count_nonzero((ptc != pt) & (n[..., None] > 0)))

    theta = params.theta
    eye = np.eye(q)
    S = ptc[..., :, None] * eye - ptc[..., :, None] * ptc[..., None, :]
    w = np.where(n > 0, n + theta * C * (n - 1.0), 0.0)
    V = np.einsum("sr,srab->sab", w, S)
    mu = np.einsum("sr,sra->sa", n, pt)
    res = ds.y[:, :-1] - mu

    L = _factorize(V, ridge, ds.ids)
    logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    Vinv = np.linalg.inv(L @ np.swapaxes(L, 1, 2))
    u = np.einsum("sab,sb->sa", Vinv, res)
    ll_s = -0.5 * logdet - 0.5 * np.einsum("sa,sa->s", res, u)
    out = _Eval(math.fsum(ll_s), clamp_count=clamps)
    if order == 0:
        return out

    G = _lambda_jacobian(params, design, ds)
    A = pt[..., :, None] * eye - pt[..., :, None] * pt[..., None, :]  # d pt_a / d lambda_m
    dmu = np.einsum("sr,sram,sprm->spa", n, A, G, optimize=True)
    # d S / d lambda_m = diag(d) - d p' - p d' with d = A[..., :, m]
    d = np.swapaxes(A, -1, -2)  # (k, r, m, a)
    dS = (d[..., :, None] * eye
          - d[..., :, None] * pt[..., None, None, :]
          - pt[..., None, :, None] * d[..., None, :])
    dV = np.einsum("sr,sprm,srmab->spab", w, G, dS, optimize=True)
    n_tau = params.tau.size
    dw = np.where(n > 1, C * (n - 1.0), 0.0) * theta * (1.0 - theta)
    t0 = params.size - n_tau
    if n_tau == 1:
        dV[:, t0] = np.einsum("sr,srab->sab", dw, S)
    else:
        for i in range(r):
            dV[:, t0 + i] = dw[:, i, None, None] * S[:, i]

    M = np.einsum("sab,spbc->spac", Vinv, dV)  # V^-1 dV_p
    mean_score = np.einsum("spa,sa->sp", dmu, u)
    var_score = 0.5 * (np.einsum("sa,spab,sb->sp", u, dV, u) - np.trace(M, axis1=2, axis2=3))
    mean_info = np.einsum("spa,sab,sqb->spq", dmu, Vinv, dmu, optimize=True)
    var_info = 0.5 * np.einsum("spab,sqba->spq", M, M, optimize=True)
    if quasi:
        var_score[:, :t0] = 0.0
        var_info[:, :t0, :] = 0.0
        var_info[:, :, :t0] = 0.0
    out.score = _exact_sum(mean_score + var_score)
    if order >= 2:
        info = _exact_sum(mean_info + var_info)
        out.info = 0.5 * (info + info.T)
    return out


def log_likelihood(params: ParameterVector, design: CovariateDesign,
                   data: Dataset | Sequence[StationRecord], C: float) -> float:
    """Gaussian log-likelihood, additive constants dropped."""
    return _evaluate(params, design, as_dataset(data), C, order=0).loglik


def score(params: ParameterVector, design: CovariateDesign,
          data: Dataset | Sequence[StationRecord], C: float, quasi: bool = False) -> NDArray[np.float64]:
    """Analytic gradient through both the mean and the covariance.

    With ``quasi=True`` the slopes and baseline logits use the mean channel
    only; the overdispersion coordinates keep their full score.
    """
    return _evaluate(params, design, as_dataset(data), C, order=1, quasi=quasi).score


def expected_information(params: ParameterVector, design: CovariateDesign,
                         data: Dataset | Sequence[StationRecord], C: float,
                         quasi: bool = False) -> NDArray[np.float64]:
    return _evaluate(params, design, as_dataset(data), C, order=2, quasi=quasi).info


def _solve(info: NDArray, rhs: NDArray, ridge: float) -> NDArray:
    try:
        return cho_solve(cho_factor(info), rhs)
    except np.linalg.LinAlgError:
        pass
    bumped = info + ridge * max(float(np.abs(np.diag(info)).max(initial=0.0)), 1.0) * np.eye(len(info))
    try:
        return np.linalg.solve(bumped, rhs)
    except np.linalg.LinAlgError:
        raise FitError("expected information is singular; the model may not be identified") from None


def _bounds(params: ParameterVector) -> tuple[NDArray, NDArray]:
    lo = np.full(params.size, -np.inf)
    hi = np.full(params.size, np.inf)
    na = params.alpha.size
    lo[:na], hi[:na] = -ALPHA_BOUND, ALPHA_BOUND
    lo[-params.tau.size:], hi[-params.tau.size:] = -TAU_BOUND, TAU_BOUND
    return lo, hi


def _covariance(info: NDArray, ridge: float) -> NDArray:
    try:
        np.linalg.cholesky(info)
        return np.linalg.inv(info)
    except np.linalg.LinAlgError:
        return _solve(info, np.eye(len(info)), ridge)


def default_init(ds: Dataset, design: CovariateDesign, n_tau: int) -> ParameterVector:
    from .reconstruction import goodman_fit

    return goodman_init(goodman_fit(ds).matrix, len(design), n_tau)


def fit(data: Dataset | Sequence[StationRecord], design: CovariateDesign | None = None,
        options: FitOptions | None = None, init: ParameterVector | None = None,
        shared_tau: bool = False) -> FitResult:
    """Maximize the Gaussian log-likelihood by Fisher scoring with step halving.

    Parameters
    ----------
    data : stations (records or a stacked ``Dataset``).
    design : sparse covariate effects; empty by default.
    options : iteration controls and the cluster size ``C``.
    init : starting point; defaults to the Goodman estimate.
    shared_tau : fit one overdispersion parameter for all rows. Ignored when
        ``init`` is given (its ``tau`` length decides).
    """
    ds = as_dataset(data)
    design = design or CovariateDesign()
    opts = options or FitOptions()
    design.validate(ds.r, ds.c, ds.v.shape[1])
    n_mean = ds.r * (ds.c - 1) + len(design)
    if n_mean > ds.k * (ds.c - 1):
        raise IdentifiabilityError(f"{n_mean} mean parameters but only {ds.k * (ds.c - 1)} observations")
    keep = ds.n.sum(axis=1) > 0
    if not keep.all():
        if (ds.y[~keep].sum(axis=1) > 0).any():
            raise ModelError("station with empty first-election electorate but second-election votes")
        ds = ds.subset(np.flatnonzero(keep))

    if init is None:
        init = default_init(ds, design, 1 if shared_tau and ds.r > 1 else ds.r)
    lo, hi = _bounds(init)
    phi = np.clip(init.pack(), lo, hi)

    def ev(x, order):
        return _evaluate(init.like(x), design, ds, opts.C, order=order, quasi=opts.quasi, ridge=opts.ridge)

    cur = ev(phi, 2)
    if not np.isfinite(cur.loglik) or not np.all(np.isfinite(cur.score)):
        raise FitError("log-likelihood is not finite at the starting values; supply init")
    trace = [cur.loglik]
    converged = False
    iterations = 0

    def free_mask(x, s):
        pinned = ((x <= lo) & (s < 0)) | ((x >= hi) & (s > 0))
        return ~pinned

    while True:
        free = free_mask(phi, cur.score)
        if np.max(np.abs(cur.score[free]), initial=0.0) < opts.gradient_tolerance:
            converged = True
            break
        if iterations >= opts.max_iterations:
            break
        step = np.zeros_like(phi)
        step[free] = _solve(cur.info[np.ix_(free, free)], cur.score[free], opts.ridge)
        decrement = float(cur.score[free] @ step[free])
        # far from the optimum the scoring step can be huge along weakly
        # informed directions (e.g. tau when theta is near 0 or 1)
        biggest = np.max(np.abs(step))
        if biggest > opts.max_step:
            step *= opts.max_step / biggest
        accepted = None
        t = 1.0
        for _ in range(opts.step_halving_max + 1):
            cand = np.clip(phi + t * step, lo, hi)
            trial = ev(cand, 0 if not opts.quasi else 1)
            if np.isfinite(trial.loglik):
                if opts.quasi:
                    ok = np.max(np.abs(trial.score)) < np.max(np.abs(cur.score))
                else:
                    ok = trial.loglik >= cur.loglik
                if ok:
                    accepted = cand
                    break
            t *= 0.5
        if accepted is None:
            # no ascent left within rounding: accept as converged if the
            # Newton decrement is negligible
            converged = decrement < 1e-10 * max(1.0, abs(cur.loglik))
            if not converged:
                log.debug("step halving exhausted at iteration %d", iterations)
            break
        iterations += 1
        phi = accepted
        cur = ev(phi, 2)
        trace.append(cur.loglik)

    params = init.like(phi)
    cov = _covariance(cur.info, opts.ridge)
    se = np.sqrt(np.where(np.diag(cov) > 0, np.diag(cov), np.nan))
    na = params.alpha.size
    at_bound = np.zeros(params.size, dtype=bool)
    at_bound[:na] = np.abs(phi[:na]) >= ALPHA_BOUND
    at_bound[-params.tau.size:] = np.abs(phi[-params.tau.size:]) >= TAU_BOUND
    free = free_mask(phi, cur.score)
    return FitResult(
        params=params,
        loglik=cur.loglik,
        information=cur.info,
        covariance=cov,
        se=se,
        iterations=iterations,
        converged=converged,
        clamp_count=cur.clamp_count,
        at_boundary=at_bound,
        C=opts.C,
        quasi=opts.quasi,
        loglik_trace=trace,
        max_abs_score=float(np.max(np.abs(cur.score[free]), initial=0.0)),
    )


def average_transition_matrix(result: FitResult, design: CovariateDesign,
                              data: Dataset | Sequence[StationRecord]) -> tuple[NDArray, NDArray]:
    """Station-averaged transition matrix and its delta-method standard errors."""
    ds = as_dataset(data)
    params = result.params
    P = logits_to_probs(station_logits(params, design, ds.v))  # (k, r, c)
    avg = P.mean(axis=0)
    q = params.c - 1
    # d pi_j / d lambda_m = pi_j (delta_jm - pi_m), j over all c columns
    delta = np.eye(params.c)[:, :q]
    J = P[..., :, None] * (delta - P[..., None, :q])  # (k, r, c, q)
    G = _lambda_jacobian(params, design, ds)
    grad = np.einsum("srjm,sprm->rjp", J, G, optimize=True) / ds.k
    var = np.einsum("rjp,pq,rjq->rj", grad, result.covariance, grad)
    return avg, np.sqrt(np.clip(var, 0.0, None))
