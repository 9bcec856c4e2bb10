"""Reflected-diffusion environment simulator with local-time accounting.

The normalized surplus follows, between reflections,

    dY = -sigma_z (Y + 1) dWk + a' mu dt + a' sigma dW ,

where ``a`` is the (possibly random) action, ``W`` the d-dimensional asset
driver and ``Wk`` the composite benchmark driver correlated with ``W``
through ``kappa`` and ``eta``.  All drivers are simulated as standard
Brownian increments under the benchmark-normalized pricing measure, which
is the measure every value function and martingale statistic in this
package is stated under.  Reflection at 0 uses the projection Euler scheme:
the overshoot below 0 is credited to the non-decreasing local-time process
``L`` and the state is clamped to 0.

An independent oracle for the policy-averaged dynamics is provided through
the explicit Skorokhod-map representation of the log-state: for
H = ln(1 + Y),

    H_t = h0 + mu_hat t + sigma_hat B_t + K_t ,
    K_t = max(0, -h0 + max_{s<=t} (-mu_hat s - sigma_hat B_s)) ,

which involves no Euler stepping of the reflection and is used to validate
the projection scheme distributionally.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .model import ModelParams, derived_constants

__all__ = [
    "NonFinite",
    "InvalidVariance",
    "NoiseIncrements",
    "EpisodePath",
    "BatchPaths",
    "LogPath",
    "episode_rng",
    "draw_increments",
    "step_reflected",
    "Environment",
    "simulate_episode",
    "rollout_linear_gaussian",
    "simulate_linear_gaussian_batch",
    "aggregated_coefficients",
    "simulate_aggregated",
    "aggregated_terminal_sample",
    "skorokhod_log_path",
    "skorokhod_terminal_sample",
    "export_paths_csv",
]

DEFAULT_ACTION_CAP = 1e6


class NonFinite(RuntimeError):
    """A state update produced NaN or Inf."""


class InvalidVariance(ValueError):
    """The aggregated diffusion coefficient would be the root of a negative number."""


def episode_rng(seed: int, episode_index: int) -> np.random.Generator:
    """Counter-based stream keyed by (run seed, episode index).

    Streams for distinct episodes are independent and reproducible, so
    batches of episodes can be generated in any order or in parallel.
    """
    return np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, episode_index]))


@dataclass(frozen=True)
class NoiseIncrements:
    """One step of driver increments: composite benchmark driver + asset drivers."""

    dw_kappa: float
    dw: np.ndarray


def _eta_unit(params: ModelParams) -> np.ndarray:
    n = float(np.linalg.norm(params.eta))
    if n == 0.0:
        # uncorrelated limit: the eta-channel never enters (kappa carries it)
        return np.zeros_like(params.eta)
    return params.eta / n


def draw_increments(params: ModelParams, dt: float, rng: np.random.Generator) -> NoiseIncrements:
    """Draw correlated Brownian increments over one step of length dt.

    The composite driver is kappa * g0 + sqrt(1-kappa^2) * eta_hat' g with
    g0 independent of the asset increments g; eta is normalized so the
    composite has variance dt and Cov(dw_kappa, dw_j) = sqrt(1-kappa^2)
    eta_hat_j dt.
    """
    if dt < 0.0:
        raise ValueError(f"dt must be >= 0, got {dt}")
    if dt == 0.0:
        return NoiseIncrements(dw_kappa=0.0, dw=np.zeros(params.d))
    g = rng.standard_normal(params.d + 1) * math.sqrt(dt)
    dw = g[1:]
    dw_eta = float(_eta_unit(params) @ dw)
    dw_kappa = params.kappa * g[0] + math.sqrt(1.0 - params.kappa**2) * dw_eta
    return NoiseIncrements(dw_kappa=dw_kappa, dw=dw)


def step_reflected(
    y: float,
    action: np.ndarray,
    params: ModelParams,
    dt: float,
    inc: NoiseIncrements,
) -> tuple[float, float]:
    """One projection-Euler step of the reflected state.

    Returns (y_next, dL) with y_next >= 0, dL >= 0 and y_next * dL = 0:
    the unreflected proposal's overshoot below zero is booked as local time.
    """
    action = np.asarray(action, dtype=float)
    proposal = (
        y
        - params.sigma_z * (y + 1.0) * inc.dw_kappa
        + float(action @ params.mu) * dt
        + float(action @ (params.sigma @ inc.dw))
    )
    if not math.isfinite(proposal):
        raise NonFinite(f"state proposal is not finite (y={y}, action={action})")
    if proposal >= 0.0:
        return proposal, 0.0
    return 0.0, -proposal


@dataclass(frozen=True)
class EpisodePath:
    """A discretized reflected trajectory on a uniform grid.

    states[k] >= 0 everywhere; local_time is cumulative, non-decreasing and
    increases only at steps whose post-step state sits exactly at 0.
    """

    times: np.ndarray       # (K+1,)
    states: np.ndarray      # (K+1,)
    actions: np.ndarray | None  # (K, d); None for action-free aggregated paths
    local_time: np.ndarray  # (K+1,), L_0 = 0
    seed: tuple[int, int] | None = None
    clamp_events: int = 0

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


@dataclass
class Environment:
    """Black-box one-step simulator handed to learners.

    Hides the model parameters behind step(); callers observe only the new
    state and the local-time increment, exactly what the offline learning
    loop consumes.
    """

    params: ModelParams
    dt: float
    action_cap: float = DEFAULT_ACTION_CAP
    clamp_events: int = 0

    def step(self, y: float, action: np.ndarray, rng: np.random.Generator) -> tuple[float, float]:
        action = np.asarray(action, dtype=float)
        norm = float(np.linalg.norm(action))
        if norm > self.action_cap:
            action = action * (self.action_cap / norm)
            self.clamp_events += 1
        inc = draw_increments(self.params, self.dt, rng)
        return step_reflected(y, action, self.params, self.dt, inc)


def _grid(T: float, dt: float) -> np.ndarray:
    n = round(T / dt)
    if not math.isclose(n * dt, T, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"horizon T={T} is not an integer multiple of dt={dt}")
    if n < 1:
        raise ValueError("need at least one step")
    return np.linspace(0.0, T, n + 1)


def simulate_episode(
    policy: Callable[[float, np.random.Generator], np.ndarray],
    y0: float,
    T: float,
    dt: float,
    params: ModelParams,
    rng: np.random.Generator,
    action_cap: float = DEFAULT_ACTION_CAP,
    seed_info: tuple[int, int] | None = None,
) -> EpisodePath:
    """Roll one episode: sample action, step the reflected state, repeat."""
    if y0 < 0.0:
        raise ValueError(f"y0 must be >= 0, got {y0}")
    times = _grid(T, dt)
    K = len(times) - 1
    env = Environment(params=params, dt=dt, action_cap=action_cap)
    states = np.empty(K + 1)
    local = np.empty(K + 1)
    actions = np.empty((K, params.d))
    states[0] = y0
    local[0] = 0.0
    y = float(y0)
    for k in range(K):
        a = np.asarray(policy(y, rng), dtype=float)
        try:
            y, dL = env.step(y, a, rng)
        except NonFinite as exc:
            raise NonFinite(f"episode {seed_info}, step {k}: {exc}") from exc
        actions[k] = a
        states[k + 1] = y
        local[k + 1] = local[k] + dL
    return EpisodePath(
        times=times,
        states=states,
        actions=actions,
        local_time=local,
        seed=seed_info,
        clamp_events=env.clamp_events,
    )


@dataclass(frozen=True)
class BatchPaths:
    """Vectorized stack of episodes sharing one grid (rows = episodes)."""

    times: np.ndarray       # (K+1,)
    states: np.ndarray      # (n, K+1)
    actions: np.ndarray     # (n, K, d)
    local_time: np.ndarray  # (n, K+1)
    seed: int | None = None
    clamp_events: int = 0

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    def __iter__(self) -> Iterator[EpisodePath]:
        for i in range(self.n_paths):
            yield EpisodePath(
                times=self.times,
                states=self.states[i],
                actions=self.actions[i],
                local_time=self.local_time[i],
                seed=(self.seed, i) if self.seed is not None else None,
            )


def rollout_linear_gaussian(
    env: Environment,
    mean_coef: np.ndarray,
    cov_chol: np.ndarray,
    y0: float,
    n_steps: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Single fast episode of a state-linear Gaussian policy.

    Draws the episode's normals in one block of shape (K, 2d+1) so the
    result is bit-identical to the corresponding row of
    simulate_linear_gaussian_batch under the same stream.
    """
    if y0 < 0.0:
        raise ValueError(f"y0 must be >= 0, got {y0}")
    params = env.params
    dt = env.dt
    d = params.d
    K = n_steps
    normals = rng.standard_normal((K, 2 * d + 1))
    sqdt = math.sqrt(dt)
    eta_hat = _eta_unit(params)
    ck = math.sqrt(1.0 - params.kappa**2)
    mean_coef = np.asarray(mean_coef, dtype=float).reshape(d)
    cov_chol = np.asarray(cov_chol, dtype=float).reshape(d, d)

    states = np.empty(K + 1)
    local = np.empty(K + 1)
    actions = np.empty((K, d))
    states[0] = y0
    local[0] = 0.0
    y = float(y0)
    L = 0.0
    cap = env.action_cap
    for k in range(K):
        scale = 1.0 + y
        a = scale * (mean_coef + cov_chol @ normals[k, :d])
        norm = float(np.linalg.norm(a))
        if norm > cap:
            a *= cap / norm
            env.clamp_events += 1
        dw = normals[k, d + 1 :] * sqdt
        dw_kappa = params.kappa * normals[k, d] * sqdt + ck * float(eta_hat @ dw)
        proposal = (
            y
            - params.sigma_z * scale * dw_kappa
            + float(a @ params.mu) * dt
            + float((a @ params.sigma) @ dw)
        )
        if not math.isfinite(proposal):
            raise NonFinite(f"step {k}: non-finite state proposal")
        if proposal >= 0.0:
            y = proposal
        else:
            L -= proposal
            y = 0.0
        actions[k] = a
        states[k + 1] = y
        local[k + 1] = L
    return states, actions, local


def simulate_linear_gaussian_batch(
    params: ModelParams,
    mean_coef: np.ndarray,
    cov_chol: np.ndarray,
    n_paths: int,
    y0: float,
    T: float,
    dt: float,
    seed: int,
    action_cap: float = DEFAULT_ACTION_CAP,
) -> BatchPaths:
    """Simulate many episodes of a state-linear Gaussian policy at once.

    The policy draws a ~ N(mean_coef (1+y), (1+y)^2 cov_chol cov_chol'),
    which covers both the explicit optimal policy and every parameterized
    policy used by the learner.  One Philox stream per episode keeps the
    result bit-identical to sequential generation path by path.
    """
    if y0 < 0.0:
        raise ValueError(f"y0 must be >= 0, got {y0}")
    times = _grid(T, dt)
    K = len(times) - 1
    d = params.d
    mean_coef = np.asarray(mean_coef, dtype=float).reshape(d)
    cov_chol = np.asarray(cov_chol, dtype=float).reshape(d, d)

    rngs = [episode_rng(seed, i) for i in range(n_paths)]
    # one block per episode, concatenated: (n, K, 2d+1) standard normals
    normals = np.stack([r.standard_normal((K, 2 * d + 1)) for r in rngs])
    z_act = normals[:, :, :d]
    g0 = normals[:, :, d]
    g = normals[:, :, d + 1 :]

    sqdt = math.sqrt(dt)
    eta_hat = _eta_unit(params)
    ck = math.sqrt(1.0 - params.kappa**2)

    states = np.empty((n_paths, K + 1))
    local = np.empty((n_paths, K + 1))
    actions = np.empty((n_paths, K, d))
    states[:, 0] = y0
    local[:, 0] = 0.0
    clamp_events = 0

    y = np.full(n_paths, float(y0))
    for k in range(K):
        scale = 1.0 + y
        a = scale[:, None] * (mean_coef[None, :] + z_act[:, k, :] @ cov_chol.T)
        norms = np.linalg.norm(a, axis=1)
        over = norms > action_cap
        if np.any(over):
            a[over] *= (action_cap / norms[over])[:, None]
            clamp_events += int(np.count_nonzero(over))
        dw = g[:, k, :] * sqdt
        dw_kappa = params.kappa * g0[:, k] * sqdt + ck * (dw @ eta_hat)
        proposal = (
            y
            - params.sigma_z * scale * dw_kappa
            + (a @ params.mu) * dt
            + np.einsum("ne,ne->n", a @ params.sigma, dw)
        )
        if not np.all(np.isfinite(proposal)):
            bad = int(np.flatnonzero(~np.isfinite(proposal))[0])
            raise NonFinite(f"path {bad}, step {k}: non-finite state proposal")
        y = np.maximum(proposal, 0.0)
        dL = np.maximum(-proposal, 0.0)
        actions[:, k, :] = a
        states[:, k + 1] = y
        local[:, k + 1] = local[:, k] + dL
    return BatchPaths(
        times=times,
        states=states,
        actions=actions,
        local_time=local,
        seed=seed,
        clamp_events=clamp_events,
    )


def aggregated_coefficients(params: ModelParams, gamma: float) -> tuple[float, float]:
    """Drift and diffusion multipliers of the policy-averaged state.

    Under the explicit Gaussian policy the state aggregates to

        dY = b (1+Y) dt + s (1+Y) dB + dL ,

    with b = 2 alpha + sqrt(1-kappa^2) zeta and
    s^2 = alpha + (d/2) gamma + kappa^2 sigma_z^2 / 2 + sqrt(1-kappa^2) zeta.
    """
    c = derived_constants(params)
    root_term = math.sqrt(1.0 - params.kappa**2) * c.zeta
    b = 2.0 * c.alpha + root_term
    s2 = c.alpha + 0.5 * params.d * gamma + 0.5 * params.kappa**2 * params.sigma_z**2 + root_term
    if s2 < 0.0:
        raise InvalidVariance(f"squared diffusion coefficient is negative: {s2}")
    return b, math.sqrt(s2)


def simulate_aggregated(
    params: ModelParams,
    gamma: float,
    y0: float,
    T: float,
    dt: float,
    rng: np.random.Generator,
) -> EpisodePath:
    """Projection-Euler path of the one-factor aggregated dynamics."""
    if y0 < 0.0:
        raise ValueError(f"y0 must be >= 0, got {y0}")
    b, s = aggregated_coefficients(params, gamma)
    times = _grid(T, dt)
    K = len(times) - 1
    states = np.empty(K + 1)
    local = np.empty(K + 1)
    states[0] = y0
    local[0] = 0.0
    y = float(y0)
    sqdt = math.sqrt(dt)
    shocks = rng.standard_normal(K)
    for k in range(K):
        proposal = y + b * (1.0 + y) * dt + s * (1.0 + y) * sqdt * shocks[k]
        if proposal >= 0.0:
            y, dL = proposal, 0.0
        else:
            y, dL = 0.0, -proposal
        states[k + 1] = y
        local[k + 1] = local[k] + dL
    return EpisodePath(times=times, states=states, actions=None, local_time=local)


def aggregated_terminal_sample(
    params: ModelParams,
    gamma: float,
    y0: float,
    T: float,
    dt: float,
    n_paths: int,
    seed: int,
) -> np.ndarray:
    """Terminal values Y_T of the aggregated dynamics, vectorized over paths."""
    b, s = aggregated_coefficients(params, gamma)
    times = _grid(T, dt)
    K = len(times) - 1
    rng = episode_rng(seed, 0)
    sqdt = math.sqrt(dt)
    y = np.full(n_paths, float(y0))
    for k in range(K):
        z = rng.standard_normal(n_paths)
        proposal = y + b * (1.0 + y) * dt + s * (1.0 + y) * sqdt * z
        y = np.maximum(proposal, 0.0)
    return y


@dataclass(frozen=True)
class LogPath:
    """Skorokhod-map representation of the log-state H = ln(1 + Y)."""

    times: np.ndarray
    h: np.ndarray   # reflected log-state, H >= 0
    k: np.ndarray   # cumulative boundary push (local time of H)
    b: np.ndarray   # the driving Brownian path (B_0 = 0)


def skorokhod_log_path(
    params: ModelParams,
    gamma: float,
    h0: float,
    T: float,
    dt: float,
    rng: np.random.Generator,
) -> LogPath:
    """Explicit running-max construction of the reflected log-state.

    H_t = h0 + mu_hat t + sigma_hat B_t + K_t, with K given by the closed
    Skorokhod formula; no Euler discretization of the reflection enters, so
    this doubles as an oracle for the projection scheme.
    """
    if h0 < 0.0:
        raise ValueError(f"h0 must be >= 0, got {h0}")
    b, s = aggregated_coefficients(params, gamma)
    mu_hat = b - 0.5 * s * s
    times = _grid(T, dt)
    K = len(times) - 1
    db = math.sqrt(dt) * rng.standard_normal(K)
    bpath = np.concatenate([[0.0], np.cumsum(db)])
    free = -mu_hat * times - s * bpath
    running_max = np.maximum.accumulate(np.maximum(free, 0.0))
    k = np.maximum(0.0, -h0 + running_max)
    h = h0 + mu_hat * times + s * bpath + k
    return LogPath(times=times, h=h, k=k, b=bpath)


def skorokhod_terminal_sample(
    params: ModelParams,
    gamma: float,
    h0: float,
    T: float,
    dt: float,
    n_paths: int,
    seed: int,
) -> np.ndarray:
    """Terminal log-states H_T from the Skorokhod construction, vectorized."""
    if h0 < 0.0:
        raise ValueError(f"h0 must be >= 0, got {h0}")
    b, s = aggregated_coefficients(params, gamma)
    mu_hat = b - 0.5 * s * s
    times = _grid(T, dt)
    K = len(times) - 1
    rng = episode_rng(seed, 0)
    bpath = np.zeros(n_paths)
    running_max = np.zeros(n_paths)
    sqdt = math.sqrt(dt)
    for j in range(1, K + 1):
        bpath += sqdt * rng.standard_normal(n_paths)
        free = -mu_hat * times[j] - s * bpath
        running_max = np.maximum(running_max, free)
    k_T = np.maximum(0.0, -h0 + running_max)
    return h0 + mu_hat * T + s * bpath + k_T


def export_paths_csv(paths: BatchPaths | list[EpisodePath], csv_path, meta_path=None, metadata: dict | None = None) -> None:
    """Write paths as (episode, k, t, y, action..., dL, L) rows plus a metadata JSON."""
    episodes = list(paths) if not isinstance(paths, list) else paths
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        d = 0 if not episodes or episodes[0].actions is None else episodes[0].actions.shape[1]
        header = ["episode", "k", "t", "y"] + [f"action_{i+1}" for i in range(d)] + ["dL", "L"]
        writer.writerow(header)
        for idx, ep in enumerate(episodes):
            dL = np.diff(ep.local_time)
            for k in range(ep.n_steps + 1):
                acts = [] if ep.actions is None else (
                    list(ep.actions[k]) if k < ep.n_steps else [math.nan] * d
                )
                writer.writerow(
                    [idx, k, ep.times[k], ep.states[k]]
                    + acts
                    + [dL[k - 1] if k > 0 else 0.0, ep.local_time[k]]
                )
    if meta_path is not None:
        with open(meta_path, "w") as fh:
            json.dump(metadata or {}, fh, indent=2, default=str)
