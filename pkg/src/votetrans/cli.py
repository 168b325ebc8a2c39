"""Command-line interface: ``votetrans <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import io
from .estimation import FitOptions, average_transition_matrix, fit
from .model import CovariateDesign, Dataset, ModelError, logits_to_probs, station_logits
from .reconstruction import expected_cells_ipf, goodman_fit
from .simulation import (
    CovariateSpec,
    ScenarioConfig,
    generate_dataset,
    run_mc_study,
    scatter_data,
    scenario,
)

log = logging.getLogger("votetrans")


def _out_dir(args) -> Path | None:
    if args.out_dir is None:
        return None
    path = Path(args.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load(args):
    config = io.load_config(args.config)
    exclude = [s for s in (args.exclude_stations or "").split(",") if s]
    records, dims = io.load_dataset(args.data, config, allow_unbalanced=args.allow_unbalanced or None,
                                    exclude=exclude)
    return config, records, dims


def _transition_rows(config, avg, se):
    rows = []
    for i, name in enumerate(config.rows):
        rows.append([name, *avg[i]])
        rows.append(["s.e.", *se[i]])
    return rows


def _fit_and_report(config, records, C, quasi, out: Path | None, tag: str = "") -> tuple:
    design = config.design()
    result = fit(records, design, config.fit_options(C=C, quasi=quasi), shared_tau=config.shared_tau)
    avg, se = average_transition_matrix(result, design, records)
    names = result.params.names(config.rows, config.columns, design, [c.name for c in config.covariates])
    if out is not None:
        io.save_fit_result(out / f"fit_result{tag}.json", result)
        io.write_csv(out / f"parameters{tag}.csv", ["parameter", "estimate", "se", "at_boundary"],
                     [[nm, float(x), float(s), bool(b)]
                      for nm, x, s, b in zip(names, result.params.pack(), result.se, result.at_boundary)])
        io.write_csv(out / f"transitions{tag}.csv", ["row", "column", "probability", "se"],
                     [[rn, cn, float(avg[i, j]), float(se[i, j])]
                      for i, rn in enumerate(config.rows) for j, cn in enumerate(config.columns)])
    return result, avg, se, names


def cmd_fit(args) -> int:
    config, records, dims = _load(args)
    C = args.C if args.C is not None else config.C
    out = _out_dir(args)
    result, avg, se, names = _fit_and_report(config, records, C, args.quasi or None, out)
    print(f"stations: {dims.k}  C: {C:g}  loglik: {result.loglik:.4f}  iterations: {result.iterations}  "
          f"converged: {result.converged}")
    if result.clamp_count:
        print(f"probability clamps: {result.clamp_count}")
    print()
    print("Average transition probabilities")
    print(io.format_table(["", *config.columns], _transition_rows(config, avg, se)))
    print()
    rows = [[nm, float(x), float(s), "boundary" if b else ""]
            for nm, x, s, b in zip(names, result.params.pack(), result.se, result.at_boundary)]
    print(io.format_table(["parameter", "estimate", "s.e.", ""], rows))
    return 0 if result.converged else 3


def cmd_sensitivity(args) -> int:
    config, records, dims = _load(args)
    values = [float(x) for x in args.c_values.split(",")] if args.c_values else list(config.C_values)
    out = _out_dir(args)
    mats, taus, lines = [], [], []
    for C in values:
        result, avg, _, names = _fit_and_report(config, records, C, args.quasi or None, out, tag=f"_C{C:g}")
        mats.append(avg)
        taus.append(result.params.tau)
        lines.append([f"{C:g}", *avg.ravel(), *result.params.tau, str(result.converged)])
    cells = [f"{r}->{c}" for r in config.rows for c in config.columns]
    tau_names = [n for n in names if n.startswith("tau")]
    header = ["C", *cells, *tau_names, "converged"]
    drift = np.max(np.abs(np.array(mats) - mats[0]), axis=0)
    print(io.format_table(header, [[x if isinstance(x, str) else float(x) for x in ln] for ln in lines]))
    print()
    print(f"max change in any average transition probability: {drift.max():.4f}")
    if out is not None:
        io.write_csv(out / "sensitivity.csv", header, lines)
    return 0


def cmd_goodman(args) -> int:
    config, records, dims = _load(args)
    g = goodman_fit(records)
    rows = []
    for i, name in enumerate(config.rows):
        rows.append([name, *g.matrix[i]])
        rows.append(["s.e.", *g.se[i]])
    print(io.format_table(["", *config.columns], rows))
    if g.out_of_range.any():
        bad = [f"{config.rows[i]}->{config.columns[j]}" for i, j in zip(*np.nonzero(g.out_of_range))]
        print(f"outside [0, 1]: {', '.join(bad)}")
    print(f"residual sum of squares: {g.rss:.4f}")
    out = _out_dir(args)
    if out is not None:
        io.write_csv(out / "goodman.csv", ["row", "column", "estimate", "se", "out_of_range"],
                     [[rn, cn, float(g.matrix[i, j]), float(g.se[i, j]), bool(g.out_of_range[i, j])]
                      for i, rn in enumerate(config.rows) for j, cn in enumerate(config.columns)])
    return 0


def cmd_reconstruct(args) -> int:
    config, records, dims = _load(args)
    design = config.design()
    if args.fit_result:
        result = io.load_fit_result(args.fit_result)
    else:
        result = fit(records, design, config.fit_options(quasi=args.quasi or None), shared_tau=config.shared_tau)
    ds = Dataset.from_records(records)
    probs = logits_to_probs(station_logits(result.params, design, ds.v))
    rows = []
    for s, rec in enumerate(records):
        cells = expected_cells_ipf(np.clip(probs[s], 1e-12, None), rec.n, rec.y)
        for i, rn in enumerate(config.rows):
            for j, cn in enumerate(config.columns):
                rows.append([rec.station_id, rn, cn, float(cells[i, j])])
    out = _out_dir(args) or Path(".")
    io.write_csv(out / "reconstructed_cells.csv", ["station", "row", "column", "expected"], rows)
    print(f"wrote {len(rows)} cells for {len(records)} stations to {out / 'reconstructed_cells.csv'}")
    return 0


def scenario_from_dict(raw: dict) -> ScenarioConfig:
    """Scenario YAML: optional ``scenario`` preset name plus field overrides.

    ``design`` is a list of [row, column, covariate] 0-based triples and
    ``covariates`` a list of {kind, option, bounds} mappings.
    """
    raw = dict(raw or {})
    name = raw.pop("scenario", None)
    if "design" in raw:
        raw["design"] = CovariateDesign(tuple(tuple(e) for e in raw["design"]))
    if "covariates" in raw:
        raw["covariates"] = tuple(CovariateSpec(**{k: (tuple(v) if k == "bounds" else v) for k, v in c.items()})
                                  for c in raw["covariates"])
    for key in ("n_bounds", "beta_true", "theta_true"):
        if key in raw:
            raw[key] = tuple(raw[key])
    for key in ("first_election_prob_bounds", "alpha_true"):
        if key in raw:
            raw[key] = tuple(tuple(x) for x in raw[key])
    try:
        return scenario(name, **raw) if name else ScenarioConfig(**raw)
    except TypeError as exc:
        raise io.ConfigError(f"bad scenario config: {exc}") from None


def _scenario(args) -> ScenarioConfig:
    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = yaml.safe_load(fh) or {}
    if args.scenario:
        raw["scenario"] = args.scenario
    cfg = scenario_from_dict(raw)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _model_config_for(cfg: ScenarioConfig) -> io.ModelConfig:
    rows = tuple(f"X{i + 1}" for i in range(cfg.r))
    cols = tuple(f"Y{j + 1}" for j in range(cfg.c))
    covs = tuple(io.CovariateDef(name=f"V{m + 1}", column=f"V{m + 1}", transform="raw")
                 for m in range(len(cfg.covariates)))
    effects = tuple((rows[i], cols[j], f"V{m + 1}") for i, j, m in cfg.design.entries)
    return io.ModelConfig(rows=rows, columns=cols, covariates=covs, effects=effects, C=cfg.C,
                          shared_tau=cfg.shared_tau, seed=cfg.seed)


def cmd_simulate(args) -> int:
    cfg = _scenario(args)
    records, cells = generate_dataset(cfg)
    out = _out_dir(args) or Path(".")
    mc = _model_config_for(cfg)
    io.write_dataset(out / "data.csv", records, mc.rows, mc.columns, [c.name for c in mc.covariates])
    io.save_config(out / "model.yaml", mc)
    io.write_csv(out / "latent_cells.csv", ["station", "row", "column", "count"],
                 [[rec.station_id, mc.rows[i], mc.columns[j], int(cells[s, i, j])]
                  for s, rec in enumerate(records) for i in range(cfg.r) for j in range(cfg.c)])
    x, y = scatter_data(Dataset.from_records(records))
    io.write_csv(out / "scatter.csv", ["station", "first_share", "second_share"],
                 [[rec.station_id, float(a), float(b)] for rec, a, b in zip(records, x, y)])
    print(f"wrote {len(records)} stations to {out / 'data.csv'} (model config {out / 'model.yaml'})")
    return 0


def cmd_mc_study(args) -> int:
    cfg = _scenario(args)
    options = FitOptions(C=cfg.C, quasi=bool(args.quasi))
    rep = run_mc_study(cfg, args.replicates, options, n_jobs=args.jobs)
    names = rep.names
    print(f"replicates: {rep.replicates}  failed fits: {rep.failures}")
    print()
    print(io.format_table(["", *names], [["truth", *rep.truth], ["bias", *rep.bias]]))
    print()
    print(io.format_table(["", *names], [["mean s.e.", *rep.mean_se], ["sample s.d.", *rep.sd],
                                         ["ratio", *rep.se_ratio]]))
    print()
    print(io.format_table(["z", *names], [[f"{z:g}", *row] for z, row in zip(rep.z_values, rep.exceedance)]))
    out = _out_dir(args)
    if out is not None:
        io.write_csv(out / "bias.csv", ["parameter", "truth", "mean_estimate", "bias"],
                     [[n, float(t), float(t + b), float(b)] for n, t, b in zip(names, rep.truth, rep.bias)])
        io.write_csv(out / "se_ratio.csv", ["parameter", "mean_se", "sample_sd", "ratio"],
                     [[n, float(a), float(b), float(c)] for n, a, b, c in
                      zip(names, rep.mean_se, rep.sd, rep.se_ratio)])
        io.write_csv(out / "exceedance.csv", ["z", *names],
                     [[float(z), *map(float, row)] for z, row in zip(rep.z_values, rep.exceedance)])
        io.write_csv(out / "replicates.csv", ["replicate", *names, *[f"se:{n}" for n in names]],
                     [[int(b), *map(float, e), *map(float, s)]
                      for b, e, s in zip(rep.replicate_ids, rep.estimates, rep.ses)])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="votetrans", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_cmd(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", required=True, help="model config (YAML)")
        p.add_argument("--data", required=True, help="station CSV")
        p.add_argument("--out-dir")
        p.add_argument("--allow-unbalanced", action="store_true")
        p.add_argument("--exclude-stations", help="comma-separated station ids")
        p.add_argument("--quasi", action="store_true", help="mean-channel score for alpha and beta")
        p.set_defaults(func=func)
        return p

    p = data_cmd("fit", cmd_fit, "fit the model and print average transitions")
    p.add_argument("--C", type=float, help="cluster size (overrides config)")
    p = data_cmd("sensitivity", cmd_sensitivity, "refit over several cluster sizes")
    p.add_argument("--c-values", help="comma-separated C values (overrides config)")
    data_cmd("goodman", cmd_goodman, "Goodman least-squares estimates")
    p = data_cmd("reconstruct", cmd_reconstruct, "expected cells per station by IPF")
    p.add_argument("--fit-result", help="use a saved fit_result.json instead of refitting")

    def sim_cmd(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="scenario config (YAML)")
        p.add_argument("--scenario", choices=["none", "concordant", "discordant", "milan"])
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")
        p.set_defaults(func=func)
        return p

    sim_cmd("simulate", cmd_simulate, "generate one dataset")
    p = sim_cmd("mc-study", cmd_mc_study, "Monte Carlo study of the estimator")
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--quasi", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ModelError, OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
