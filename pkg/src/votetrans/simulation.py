"""Generative cluster mechanism and Monte Carlo study of the estimator.

Every station draws its electorate and first-election votes, splits each
first-election group into clusters of average size ``C``, draws one
Dirichlet transition vector per cluster and sums the cluster multinomials.
Replicate ``b`` of a study uses the random stream seeded by ``(seed, b)``,
so results do not depend on how replicates are scheduled.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .estimation import FitError, FitOptions, fit
from .io import build_covariate
from .model import (
    CovariateDesign,
    Dataset,
    ModelError,
    ParameterVector,
    StationRecord,
    logit,
    logits_to_probs,
    station_logits,
)

log = logging.getLogger(__name__)

Z_THRESHOLDS = (1.2815, 1.6449, 1.9600, 2.576)


@dataclass(frozen=True)
class CovariateSpec:
    """How a simulated covariate is produced before the centered-logit transform.

    ``kind="first_election"`` uses the share of first-election option
    ``option`` in each station; ``kind="exogenous"`` draws the share uniformly
    within ``bounds``.
    """

    kind: str = "first_election"
    option: int = 0
    bounds: tuple[float, float] = (0.1, 0.3)

    def __post_init__(self):
        if self.kind not in ("first_election", "exogenous"):
            raise ModelError(f"unknown covariate kind {self.kind!r}")
        if not 0 <= self.bounds[0] <= self.bounds[1] <= 1:
            raise ModelError(f"bad share bounds {self.bounds}")


@dataclass(frozen=True)
class ScenarioConfig:
    """Settings of the data generator.

    ``first_election_prob_bounds`` holds (low, high) for the first r - 1
    options; the last option takes the remainder. A ``theta_true`` entry of 0
    switches that row to fixed cluster probabilities (no overdispersion).
    """

    k: int = 200
    n_bounds: tuple[int, int] = (600, 800)
    first_election_prob_bounds: tuple[tuple[float, float], ...] = ((0.3, 0.7),)
    alpha_true: tuple[tuple[float, ...], ...] = ((float(np.log(0.7 / 0.3)),), (float(np.log(0.2 / 0.8)),))
    beta_true: tuple[float, ...] = ()
    design: CovariateDesign = field(default_factory=CovariateDesign)
    covariates: tuple[CovariateSpec, ...] = ()
    theta_true: tuple[float, ...] = (0.1, 0.1)
    C: float = 50.0
    seed: int = 0
    shared_tau: bool = False

    def __post_init__(self):
        if not isinstance(self.design, CovariateDesign):
            object.__setattr__(self, "design", CovariateDesign(tuple(tuple(e) for e in self.design)))
        alpha = np.asarray(self.alpha_true, dtype=float)
        r = alpha.shape[0]
        if self.k < 1 or not 1 <= self.n_bounds[0] <= self.n_bounds[1]:
            raise ModelError("invalid station count or size bounds")
        if len(self.first_election_prob_bounds) != r - 1:
            raise ModelError(f"need {r - 1} first-election probability bounds")
        for lo, hi in self.first_election_prob_bounds:
            if not 0 <= lo <= hi <= 1:
                raise ModelError(f"bad probability bounds ({lo}, {hi})")
        if sum(hi for _, hi in self.first_election_prob_bounds) > 1:
            raise ModelError("first-election probability bounds leave no room for the last option")
        if len(self.theta_true) != r or any(not 0 <= t < 1 for t in self.theta_true):
            raise ModelError("theta_true must have one value in [0, 1) per row")
        if len(self.beta_true) != len(self.design):
            raise ModelError("beta_true must match the covariate design")
        self.design.validate(r, alpha.shape[1] + 1, len(self.covariates))
        if self.shared_tau and len(set(self.theta_true)) != 1:
            raise ModelError("shared_tau requires equal theta_true across rows")
        if self.C <= 0:
            raise ModelError("C must be positive")

    @property
    def r(self) -> int:
        return len(self.alpha_true)

    @property
    def c(self) -> int:
        return len(self.alpha_true[0]) + 1

    def true_params(self) -> ParameterVector:
        theta = np.asarray(self.theta_true)
        if np.any(theta <= 0):
            raise ModelError("true tau undefined for theta = 0")
        tau = logit(theta[:1] if self.shared_tau else theta)
        return ParameterVector(np.asarray(self.alpha_true), np.asarray(self.beta_true, dtype=float), tau)


def scenario(name: str, **overrides) -> ScenarioConfig:
    """Preset configurations.

    ``none``, ``concordant`` and ``discordant`` are the two-party confounding
    scenarios (covariate = centered logit of the first-election share of party
    1, one overdispersion parameter). ``milan`` is a three-by-three layout with
    five exogenous share covariates, each acting on a single cell.
    """
    two_party = dict(
        first_election_prob_bounds=((0.1, 0.9),),
        C=10.0,
        design=CovariateDesign(((0, 0, 0), (1, 0, 0))),
        covariates=(CovariateSpec("first_election", 0),),
        shared_tau=True,
    )
    presets = {
        "none": dict(two_party, beta_true=(0.0, 0.0)),
        "concordant": dict(two_party, beta_true=(1.0, 0.5)),
        "discordant": dict(two_party, beta_true=(-1.0, 0.5)),
    }
    if name == "milan":
        probs = np.array([[0.1388, 0.0858, 0.7754],
                          [0.9380, 0.0050, 0.0570],
                          [0.2938, 0.0428, 0.6634]])
        alpha = np.log(probs[:, :-1] / probs[:, -1:])
        base = dict(
            k=1159,
            n_bounds=(700, 1000),
            first_election_prob_bounds=((0.2, 0.4), (0.25, 0.45)),
            alpha_true=tuple(map(tuple, alpha.tolist())),
            # PdL, LN, UdC, IdV, abstention shares
            covariates=(CovariateSpec("exogenous", bounds=(0.15, 0.35)),
                        CovariateSpec("exogenous", bounds=(0.02, 0.12)),
                        CovariateSpec("exogenous", bounds=(0.02, 0.08)),
                        CovariateSpec("exogenous", bounds=(0.02, 0.08)),
                        CovariateSpec("exogenous", bounds=(0.25, 0.45))),
            design=CovariateDesign(((0, 0, 1), (2, 0, 2), (2, 1, 4), (0, 0, 0), (1, 0, 3))),
            beta_true=(0.33, 0.08, -0.73, -0.40, 0.42),
            theta_true=(0.05, 0.05, 0.05),
        )
    elif name in presets:
        base = presets[name]
    else:
        raise ModelError(f"unknown scenario {name!r}")
    base = dict(base)
    base.update(overrides)
    return ScenarioConfig(**base)


def dirichlet_from_mean_precision(mean, theta: float) -> NDArray[np.float64]:
    """Concentrations giving mean ``mean`` and covariance ``theta * (diag - outer)``."""
    if not 0 < theta < 1:
        raise ModelError(f"theta={theta} outside (0, 1)")
    return np.asarray(mean, dtype=float) * (1.0 - theta) / theta


def _cluster_probs(rng: np.random.Generator, means: NDArray, theta: NDArray) -> NDArray:
    """One Dirichlet draw per row of ``means``; rows with theta 0 keep the mean."""
    out = means.copy()
    live = theta > 0
    if live.any():
        conc = means[live] * ((1.0 - theta[live]) / theta[live])[:, None]
        g = rng.standard_gamma(conc)
        tot = g.sum(axis=1, keepdims=True)
        ok = tot[:, 0] > 0
        g[ok] /= tot[ok]
        g[~ok] = means[live][~ok]
        out[live] = g
    return out


def _draw_cells(rng: np.random.Generator, n: NDArray, probs: NDArray, theta: NDArray, C: float) -> NDArray:
    """Latent cell counts (k, r, c) given row counts n (k, r) and probabilities (k, r, c)."""
    k, r, c = probs.shape
    owners, sizes = [], []
    for s in range(k):
        for i in range(r):
            nsi = int(n[s, i])
            if nsi == 0:
                continue
            h = max(1, int(nsi // C))
            sizes.append(rng.multinomial(nsi, np.full(h, 1.0 / h)))
            owners.append(np.full(h, s * r + i))
    sizes = np.concatenate(sizes)
    owners = np.concatenate(owners)
    p = _cluster_probs(rng, probs.reshape(k * r, c)[owners], np.tile(theta, k)[owners])
    votes = rng.multinomial(sizes, p)
    cells = np.zeros((k * r, c), dtype=np.int64)
    np.add.at(cells, owners, votes)
    return cells.reshape(k, r, c)


def simulate(cfg: ScenarioConfig, rng: np.random.Generator) -> tuple[Dataset, NDArray[np.int64]]:
    """Draw one dataset; returns stacked margins and the latent cells (k, r, c)."""
    k, r = cfg.k, cfg.r
    N = rng.integers(cfg.n_bounds[0], cfg.n_bounds[1] + 1, size=k)
    lows = np.array([b[0] for b in cfg.first_election_prob_bounds])
    highs = np.array([b[1] for b in cfg.first_election_prob_bounds])
    p = rng.uniform(lows, highs, size=(k, r - 1))
    p = np.column_stack([p, 1.0 - p.sum(axis=1)])
    n = rng.multinomial(N, p)

    v = np.zeros((k, len(cfg.covariates)))
    for m, spec in enumerate(cfg.covariates):
        if spec.kind == "first_election":
            share = n[:, spec.option] / N
        else:
            share = rng.uniform(*spec.bounds, size=k)
        v[:, m] = build_covariate(share)

    params = ParameterVector(np.asarray(cfg.alpha_true), np.asarray(cfg.beta_true, dtype=float), np.zeros(r))
    probs = logits_to_probs(station_logits(params, cfg.design, v))
    cells = _draw_cells(rng, n, probs, np.asarray(cfg.theta_true, dtype=float), cfg.C)
    ds = Dataset(n.astype(float), cells.sum(axis=1).astype(float), v, tuple(str(s + 1) for s in range(k)))
    return ds, cells


def generate_dataset(cfg: ScenarioConfig, replicate: int | None = None) -> tuple[list[StationRecord], NDArray[np.int64]]:
    """Station records and latent cells drawn with the config's seed.

    ``replicate`` selects the stream ``(seed, replicate)`` used by the study.
    """
    ds, cells = simulate(cfg, _rng(cfg.seed, replicate))
    return ds.records(), cells


def _rng(seed: int, replicate: int | None = None) -> np.random.Generator:
    entropy = [int(seed)] if replicate is None else [int(seed), int(replicate)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def variance_oracle_draws(pi, theta: float, C: float, n: int, reps: int, seed: int = 0,
                          chunk: int = 10_000) -> NDArray[np.float64]:
    """Second-election counts of one first-election group of size ``n``, drawn
    ``reps`` times from the cluster mechanism; reference column dropped."""
    pi = np.asarray(pi, dtype=float)
    rng = _rng(seed)
    h = max(1, int(n // C))
    out = np.empty((reps, pi.size - 1))
    for start in range(0, reps, chunk):
        b = min(chunk, reps - start)
        sizes = rng.multinomial(n, np.full(h, 1.0 / h), size=b).ravel()
        means = np.broadcast_to(pi, (b * h, pi.size))
        p = _cluster_probs(rng, np.array(means), np.full(b * h, float(theta)))
        votes = rng.multinomial(sizes, p).reshape(b, h, pi.size).sum(axis=1)
        out[start:start + b] = votes[:, :-1]
    return out


def covariance_mc_se(draws: NDArray) -> tuple[NDArray, NDArray]:
    """Empirical covariance of ``draws`` and the Monte Carlo s.e. of each entry."""
    x = draws - draws.mean(axis=0)
    prods = x[:, :, None] * x[:, None, :]
    reps = draws.shape[0]
    return prods.sum(axis=0) / (reps - 1), prods.std(axis=0, ddof=1) / np.sqrt(reps)


def variance_oracle(pi, theta: float, C: float, n: int, reps: int, seed: int = 0) -> NDArray[np.float64]:
    if reps < 10_000:
        raise ModelError("variance oracle needs at least 10^4 replicates")
    return covariance_mc_se(variance_oracle_draws(pi, theta, C, n, reps, seed))[0]


def share_slope(ds: Dataset, row: int = 0, col: int = 0) -> float:
    """OLS slope of second-election share of ``col`` on first-election share of ``row``."""
    x, y = scatter_data(ds, row, col)
    return float(np.polyfit(x, y, 1)[0])


def scatter_data(ds: Dataset, row: int = 0, col: int = 0) -> tuple[NDArray, NDArray]:
    tot = ds.n.sum(axis=1)
    return ds.n[:, row] / tot, ds.y[:, col] / ds.y.sum(axis=1)


@dataclass
class McReport:
    names: list[str]
    truth: NDArray[np.float64]
    estimates: NDArray[np.float64]  # (successful replicates, P)
    ses: NDArray[np.float64]
    replicate_ids: NDArray[np.int64]
    failures: int
    z_values: tuple[float, ...] = Z_THRESHOLDS

    @property
    def replicates(self) -> int:
        return self.estimates.shape[0] + self.failures

    @property
    def bias(self) -> NDArray:
        return self.estimates.mean(axis=0) - self.truth

    @property
    def mean_se(self) -> NDArray:
        return self.ses.mean(axis=0)

    @property
    def sd(self) -> NDArray:
        return self.estimates.std(axis=0, ddof=1)

    @property
    def se_ratio(self) -> NDArray:
        return self.mean_se / self.sd

    @property
    def exceedance(self) -> NDArray:
        """Proportions (len(z_values), P) with |error| > z * reported s.e."""
        zscores = np.abs(self.estimates - self.truth) / self.ses
        return np.array([(zscores > z).mean(axis=0) for z in self.z_values])


def _one_replicate(cfg: ScenarioConfig, b: int, options: FitOptions):
    ds, _ = simulate(cfg, _rng(cfg.seed, b))
    try:
        res = fit(ds, cfg.design, options, shared_tau=cfg.shared_tau)
    except (ModelError, np.linalg.LinAlgError) as exc:
        log.info("replicate %d failed: %s", b, exc)
        return b, None, None
    if not res.converged or not np.all(np.isfinite(res.se)):
        return b, None, None
    return b, res.params.pack(), res.se


def run_mc_study(cfg: ScenarioConfig, replicates: int, fit_options: FitOptions | None = None,
                 n_jobs: int = 1, z_values: Sequence[float] = Z_THRESHOLDS) -> McReport:
    """Generate ``replicates`` datasets, fit the generating model to each and
    summarize bias, s.e. ratios and tail exceedances."""
    if replicates < 1:
        raise ModelError("replicates must be >= 1")
    options = fit_options or FitOptions(C=cfg.C)
    if n_jobs == 1:
        rows = [_one_replicate(cfg, b, options) for b in range(replicates)]
    else:
        from joblib import Parallel, delayed

        rows = Parallel(n_jobs=n_jobs)(delayed(_one_replicate)(cfg, b, options) for b in range(replicates))
    rows.sort(key=lambda t: t[0])
    good = [t for t in rows if t[1] is not None]
    if not good:
        raise FitError("every replicate failed to fit")
    truth = cfg.true_params()
    return McReport(
        names=truth.names(design=cfg.design),
        truth=truth.pack(),
        estimates=np.array([t[1] for t in good]),
        ses=np.array([t[2] for t in good]),
        replicate_ids=np.array([t[0] for t in good]),
        failures=len(rows) - len(good),
        z_values=tuple(z_values),
    )


def with_sizes(cfg: ScenarioConfig, low: int, high: int) -> ScenarioConfig:
    return replace(cfg, n_bounds=(low, high))
