"""Command-line pipeline: solve | simulate | train | diagnose | backtest.

Every command reads a single YAML (or JSON) config file, optionally
overridden by --seed/--out, and writes CSV/JSON artifacts into the output
directory.  Each artifact embeds the fully resolved config and seed so any
output can be reproduced from its own metadata.  Verbosity is controlled
by the BENCHTRACK_LOG environment variable (DEBUG, INFO, WARNING, ...).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import backtest as bt
from . import baseline, qlearn, sde
from .model import (
    ModelParams,
    classical_solution,
    exploratory_constants,
)

log = logging.getLogger("benchtrack")


class ConfigError(ValueError):
    """Missing or malformed configuration."""


def _setup_logging() -> None:
    level = os.environ.get("BENCHTRACK_LOG", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(p) as fh:
            cfg = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return cfg


def _require(cfg: dict, key: str, where: str = "config"):
    if key not in cfg:
        raise ConfigError(f"{where} is missing required key {key!r}")
    return cfg[key]


def _model_params(cfg: dict) -> ModelParams:
    m = _require(cfg, "model")
    try:
        return ModelParams(
            mu=np.asarray(_require(m, "mu", "model"), dtype=float),
            sigma=np.asarray(_require(m, "sigma", "model"), dtype=float),
            sigma_z=float(_require(m, "sigma_z", "model")),
            kappa=float(_require(m, "kappa", "model")),
            eta=np.asarray(_require(m, "eta", "model"), dtype=float),
            rho=float(_require(m, "rho", "model")),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model block: {exc}") from exc


def _resolved(cfg: dict, seed: int | None) -> dict:
    out = dict(cfg)
    out["seed"] = seed
    return out


def _write_json(path: Path, payload: dict, cfg: dict, seed: int | None) -> None:
    payload = dict(payload)
    payload["config"] = _resolved(cfg, seed)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=_json_default)
    log.info("wrote %s", path)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return str(obj)


def cmd_solve(cfg: dict, seed: int | None, out: Path) -> int:
    params = _model_params(cfg)
    gamma = float(cfg.get("gamma", params.rho / params.d))
    grid_cfg = cfg.get("grid", {})
    y_max = float(grid_cfg.get("y_max", 10.0))
    step = float(grid_cfg.get("step", 0.01))

    sol = classical_solution(params)
    consts = exploratory_constants(params, gamma)
    ys = np.arange(0.0, y_max + step / 2, step)
    u = sol.value(ys)
    v = consts.value(ys)

    payload = {
        "lambda": sol.lam,
        "alpha": float(0.5 * params.mu @ np.linalg.solve(params.sigma_sigma_t, params.mu)),
        "xi_star": consts.xi_star,
        "psi1_star": consts.psi1_star,
        "psi2_star": consts.psi2_star,
        "psi3_star": consts.psi3_star,
        "psi3_is_derived": True,
        "gamma": gamma,
        "max_abs_classical_hjb_residual": float(np.max(np.abs(sol.hjb_residual(ys)))),
        "max_abs_exploratory_hjb_residual": float(np.max(np.abs(consts.hjb_residual(ys)))),
    }
    _write_json(out / "constants.json", payload, cfg, seed)

    with open(out / "value_tables.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        d = params.d
        writer.writerow(
            ["y", "u", "u_prime", "u_second", "v"]
            + [f"theta_star_{i+1}" for i in range(d)]
            + [f"policy_mean_{i+1}" for i in range(d)]
            + ["policy_var_scale"]
        )
        u1 = sol.value_d1(ys)
        u2 = sol.value_d2(ys)
        for i, y in enumerate(ys):
            spec = consts.policy(float(y))
            writer.writerow(
                [y, u[i], u1[i], u2[i], v[i]]
                + list(sol.policy(float(y)))
                + list(spec.mean)
                + [float(np.trace(spec.cov))]
            )
    _write_json(out / "value_tables.meta.json", {"rows": len(ys)}, cfg, seed)
    return 0


def cmd_simulate(cfg: dict, seed: int | None, out: Path) -> int:
    params = _model_params(cfg)
    sim = _require(cfg, "simulate")
    gamma = float(sim.get("gamma", params.rho / params.d))
    scheme = sim.get("scheme", "episode")
    n_paths = int(sim.get("n_paths", 1))
    y0 = float(sim.get("y0", 1.0))
    T = float(_require(sim, "T", "simulate"))
    dt = float(_require(sim, "dt", "simulate"))
    seed = 0 if seed is None else seed

    if n_paths == 0:
        log.warning("n_paths = 0: writing empty output")
        sde.export_paths_csv([], out / "paths.csv", out / "paths.meta.json",
                             {"config": _resolved(cfg, seed), "scheme": scheme, "n_paths": 0})
        _write_json(out / "summary.json", {"n_paths": 0, "warning": "no paths requested"}, cfg, seed)
        return 0

    summary: dict = {"scheme": scheme, "n_paths": n_paths}
    if scheme == "episode":
        consts = exploratory_constants(params, gamma)
        pp = qlearn.PolicyParams(
            xi=consts.xi_star, psi1=consts.psi1_star, psi2=consts.psi2_star, gamma=gamma
        )
        mean_coef, cov_chol = pp.policy_coefficients()
        batch = sde.simulate_linear_gaussian_batch(
            params, mean_coef, cov_chol, n_paths, y0, T, dt, seed
        )
        paths: list[sde.EpisodePath] | sde.BatchPaths = batch
        summary["clamp_events"] = batch.clamp_events
        summary["mean_terminal_state"] = float(batch.states[:, -1].mean())
        summary["mean_local_time"] = float(batch.local_time[:, -1].mean())
    elif scheme == "aggregated":
        paths = [
            sde.simulate_aggregated(params, gamma, y0, T, dt, sde.episode_rng(seed, i))
            for i in range(n_paths)
        ]
        summary["mean_terminal_state"] = float(np.mean([p.states[-1] for p in paths]))
    elif scheme == "skorokhod":
        logs = [
            sde.skorokhod_log_path(params, gamma, math.log1p(y0), T, dt, sde.episode_rng(seed, i))
            for i in range(n_paths)
        ]
        paths = [
            sde.EpisodePath(times=lp.times, states=np.expm1(lp.h), actions=None, local_time=lp.k)
            for lp in logs
        ]
        summary["mean_terminal_state"] = float(np.mean([p.states[-1] for p in paths]))
    else:
        raise ConfigError(f"unknown scheme {scheme!r}")

    meta = {"config": _resolved(cfg, seed), "scheme": scheme, "n_paths": n_paths}
    sde.export_paths_csv(paths, out / "paths.csv", out / "paths.meta.json", meta)

    if sim.get("ks_check", False):
        from scipy.stats import ks_2samp

        y_euler = sde.aggregated_terminal_sample(params, gamma, y0, T, dt, n_paths, seed)
        h_oracle = sde.skorokhod_terminal_sample(
            params, gamma, math.log1p(y0), T, dt, n_paths, seed + 1
        )
        ks = ks_2samp(y_euler, np.expm1(h_oracle))
        summary["ks_check"] = {"statistic": float(ks.statistic), "pvalue": float(ks.pvalue)}
        log.info("KS oracle comparison: D=%.4f p=%.4f", ks.statistic, ks.pvalue)

    _write_json(out / "summary.json", summary, cfg, seed)
    return 0


def _schedule_from_cfg(block: dict | None) -> qlearn.ScheduleSpec:
    if not block:
        return qlearn.DEFAULT_SCHEDULE
    def regime(b, default):
        return qlearn.ScheduleRegime(
            coef_xi=float(b.get("coef_xi", default.coef_xi)),
            coef_psi1=float(b.get("coef_psi1", default.coef_psi1)),
            coef_psi2=float(b.get("coef_psi2", default.coef_psi2)),
            power=float(b.get("power", default.power)),
        )
    d = qlearn.DEFAULT_SCHEDULE
    return qlearn.ScheduleSpec(
        switch_episode=int(block.get("switch_episode", d.switch_episode)),
        first=regime(block.get("first", {}), d.first),
        second=regime(block.get("second", {}), d.second),
    )


def cmd_train(cfg: dict, seed: int | None, out: Path) -> int:
    params = _model_params(cfg)
    tr = _require(cfg, "train")
    seed = int(tr.get("seed", 0)) if seed is None else seed
    dt = float(_require(tr, "dt", "train"))

    init_xi, init_psi1, init_psi2 = 0.0, None, None
    start_episode = 1
    resume = tr.get("resume")
    if resume:
        with open(resume) as fh:
            snap = json.load(fh)
        init_xi = float(snap["xi"])
        init_psi1 = np.asarray(snap["psi1"], dtype=float)
        init_psi2 = np.asarray(snap["psi2"], dtype=float)
        start_episode = int(snap["episodes"]) + 1
        log.info("resuming from %s at episode %d", resume, start_episode)

    init = tr.get("init", {})
    config = qlearn.LearnConfig(
        y0=float(tr.get("y0", 1.0)),
        T=float(_require(tr, "T", "train")),
        dt=dt,
        n_episodes=int(_require(tr, "episodes", "train")),
        gamma=float(tr.get("gamma", params.rho / params.d)),
        rho=float(tr.get("rho", params.rho)),
        seed=seed,
        schedule=_schedule_from_cfg(tr.get("schedule")),
        xi0=float(init.get("xi", init_xi)),
        psi1_0=np.asarray(init["psi1"], dtype=float) if "psi1" in init else init_psi1,
        psi2_0=np.asarray(init["psi2"], dtype=float) if "psi2" in init else init_psi2,
        chain_rule=bool(tr.get("chain_rule", True)),
        update_clip=float(tr.get("update_clip", 1.0)),
        start_episode=start_episode,
    )
    env = sde.Environment(params=params, dt=dt, action_cap=float(tr.get("action_cap", sde.DEFAULT_ACTION_CAP)))
    history = qlearn.train(config, env)
    history.to_csv(out / "history.csv")
    _write_json(out / "history.meta.json", {"rows": len(history.episodes)}, cfg, seed)
    _write_json(out / "learned.json", history.summary(), cfg, seed)
    return 0


def cmd_diagnose(cfg: dict, seed: int | None, out: Path) -> int:
    params = _model_params(cfg)
    dg = _require(cfg, "diagnose")
    seed = int(dg.get("seed", 0)) if seed is None else seed
    gamma = float(dg.get("gamma", params.rho / params.d))
    rho = float(dg.get("rho", params.rho))
    y0 = float(dg.get("y0", 1.0))
    n_paths = int(dg.get("n_paths", 1000))

    consts = exploratory_constants(params, gamma)
    pp = qlearn.PolicyParams(
        xi=consts.xi_star, psi1=consts.psi1_star, psi2=consts.psi2_star, gamma=gamma
    )
    if "params" in dg:
        blk = dg["params"]
        pp = qlearn.PolicyParams(
            xi=float(blk["xi"]),
            psi1=np.asarray(blk["psi1"], dtype=float),
            psi2=np.asarray(blk["psi2"], dtype=float),
            gamma=gamma,
        )

    payload: dict = {}
    if "T" in dg and "dt" in dg:
        T, dt = float(dg["T"]), float(dg["dt"])
        mean_coef, cov_chol = pp.policy_coefficients()
        batch = sde.simulate_linear_gaussian_batch(
            params, mean_coef, cov_chol, n_paths, y0, T, dt, seed
        )
        stats = qlearn.orthogonality_stats(pp, batch, rho)
        payload["orthogonality"] = stats.as_dict()
        payload["all_within_3_sigma"] = bool(np.all(np.abs(stats.z_scores()) < 3.0))
        shift = dg.get("xi_shift")
        if shift is not None:
            pp_shift = qlearn.PolicyParams(
                xi=pp.xi + float(shift), psi1=pp.psi1, psi2=pp.psi2, gamma=gamma
            )
            s2 = qlearn.orthogonality_stats(pp_shift, batch, rho)
            payload["xi_shift_control"] = s2.as_dict()

    sweep = dg.get("sweep")
    if sweep is not None:
        dt_list = [float(x) for x in sweep.get("dt_list", [])]
        T_list = [float(x) for x in sweep.get("T_list", [])]
        rows = qlearn.convergence_study(
            pp, params, dt_list, T_list, int(sweep.get("n_paths", n_paths)), y0, seed
        )
        payload["sweep"] = rows
        with open(out / "sweep.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dt", "T", "max_abs_mean", "tail_bound"])
            for r in rows:
                writer.writerow([r["dt"], r["T"], r["max_abs_mean"], r["tail_bound"]])

    if not payload:
        raise ConfigError("diagnose block requests nothing: give (T, dt) and/or sweep")
    _write_json(out / "diagnostics.json", payload, cfg, seed)
    return 0


def _strategy_from_cfg(blk: dict, prices: bt.PriceSeries, rho: float):
    kind = _require(blk, "type", "strategy")
    name = blk.get("name", kind)
    if kind == "mle":
        frac = float(blk.get("train_fraction", 0.5))
        split = max(3, int(len(prices) * frac))
        dtbar = float(np.median(np.diff(prices.times)))
        est = baseline.mle_estimate(
            prices.assets[:split], prices.benchmark[:split], dtbar
        )
        log.info(
            "%s: mu_hat=%s sigma_z_hat=%.6f (first %d rows)",
            name, est.mu_hat, est.sigma_z_hat, split,
        )
        return name, baseline.classical_strategy(est, rho, float(blk.get("kappa", 1.0)))
    if kind == "classical":
        params = _model_params({"model": blk["model"]})
        sol = classical_solution(params)
        return name, sol.policy
    if kind == "learned":
        with open(_require(blk, "params", "strategy")) as fh:
            snap = json.load(fh)
        gamma = float(blk.get("gamma", 0.2))
        pp = qlearn.PolicyParams(
            xi=float(snap["xi"]),
            psi1=np.asarray(snap["psi1"], dtype=float),
            psi2=np.asarray(snap["psi2"], dtype=float),
            gamma=gamma,
        )
        execution = blk.get("execution", "mean")
        if execution == "mean":
            def strat(y, _pp=pp):
                return qlearn.policy_from_q(_pp, y).mean
            return name, strat
        if execution == "sample":
            rng = np.random.default_rng(int(blk.get("sample_seed", 0)))
            def strat(y, _pp=pp, _rng=rng):
                spec = qlearn.policy_from_q(_pp, y)
                return _rng.multivariate_normal(spec.mean, spec.cov)
            return name, strat
        raise ConfigError(f"unknown execution mode {execution!r}")
    raise ConfigError(f"unknown strategy type {kind!r}")


def cmd_backtest(cfg: dict, seed: int | None, out: Path) -> int:
    blk = _require(cfg, "backtest")
    prices = bt.load_prices(_require(blk, "prices", "backtest"))
    v0 = float(_require(blk, "v0", "backtest"))
    rho = float(_require(blk, "rho", "backtest"))
    results = []
    for sblk in _require(blk, "strategies", "backtest"):
        name, strat = _strategy_from_cfg(sblk, prices, rho)
        res = bt.run_tracking(prices, strat, v0, rho, name=name)
        res.to_csv(out / f"backtest_{name}.csv")
        _write_json(out / f"backtest_{name}.meta.json", res.summary(), cfg, seed)
        results.append(res)
    report = bt.compare(results, baseline=int(blk.get("baseline_index", 0)))
    _write_json(out / "comparison.json", report, cfg, seed)
    return 0


COMMANDS = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "diagnose": cmd_diagnose,
    "backtest": cmd_backtest,
}


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(
        prog="benchtrack",
        description="Benchmark-tracking with capital injection: closed forms, "
        "simulation, q-learning, diagnostics and backtests.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML/JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override RNG seed")
        p.add_argument("--out", default=".", help="output directory")
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args.seed, out)
    except (ConfigError, bt.ParseError, bt.ValidationError) as exc:
        log.error("%s", exc)
        return 2
    except FileNotFoundError as exc:
        log.error("missing input file: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
