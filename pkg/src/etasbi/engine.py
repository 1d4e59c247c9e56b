"""Sequential neural posterior estimation and ABC baselines.

All three methods work on a :class:`~etasbi.tasks.Task`.  Simulations are
seeded per index from the master seed, so results do not depend on the
number of worker processes.
"""
from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .core import PosteriorSamples, PriorExhaustedError
from .nde import MdnModel, TrainConfig, mdn_train
from .parallel import ordered_map, task_rng
from .tasks import Task

log = logging.getLogger(__name__)

CORRECTIONS = ("none", "importance", "truncated")


class SimulationBudgetError(RuntimeError):
    """Too many failed simulations in one round."""


class SupportWarning(UserWarning):
    """Fewer posterior draws than requested survived the prior-support check."""


class EmptyAcceptanceWarning(UserWarning):
    pass


class StuckChainWarning(UserWarning):
    pass


def _sub_seed(master: int, *key: int) -> int:
    return int(np.random.SeedSequence(int(master), spawn_key=key).generate_state(1)[0])


def _simulate_one(task: Task, theta, master_seed: int, key: tuple):
    return task.simulate(theta, task_rng(master_seed, *key))


# SNPE -----------------------------------------------------------------------


@dataclass(frozen=True)
class SnpeConfig:
    rounds: int = 15
    sims_per_round: int = 2000
    n_posterior: int = 5000
    correction: str = "truncated"
    # box covers the central 1 - truncation_mass of posterior draws per axis
    truncation_mass: float = 1e-3
    truncation_samples: int = 10000
    importance_clip: float = 99.5
    # failure policy: redraw theta, at most max_redraw_factor * L per round
    max_redraw_factor: int = 10
    support_attempt_factor: int = 100
    hidden: tuple[int, ...] = (64, 64)
    n_components: int = 8
    full_cov: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.sims_per_round < 50:
            raise ValueError("sims_per_round must be >= 50")
        if self.n_posterior < 1:
            raise ValueError("n_posterior must be >= 1")
        if self.correction not in CORRECTIONS:
            raise ValueError(f"correction must be one of {CORRECTIONS}")
        if not 0 < self.truncation_mass < 1:
            raise ValueError("truncation_mass must lie in (0, 1)")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass
class RoundRecord:
    round: int
    dataset_size: int
    n_new: int
    attempts: int
    failures: int
    successes: int
    proposal: str
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int
    restarts: int
    learning_rate: float
    wall_time: float
    box_lo: list[float] | None = None
    box_hi: list[float] | None = None

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SnpeResult:
    samples: PosteriorSamples
    models: list[MdnModel]
    records: list[RoundRecord]
    s_obs: np.ndarray
    theta_u: np.ndarray
    summaries: np.ndarray
    weights: np.ndarray
    round_index: np.ndarray
    task: Task

    def round_samples(self, k: int, n: int, seed: int = 0) -> PosteriorSamples:
        """Draws from the round-k estimator (1-based), restricted to the prior."""
        u, _ = sample_restricted(self.task, self.models[k - 1], self.task.features(self.s_obs), n,
                                 np.random.default_rng(seed))
        return PosteriorSamples(self.task.from_u(u), self.task.names, "snpe", seed=seed, round=k)


def sample_restricted(task: Task, model: MdnModel, x_obs, n: int, rng, attempt_factor: int = 100):
    """Draw ``n`` values of u from q(u | x_obs) with nonzero prior density.

    Returns (u, attempts).  Stops early, with a warning, after
    ``attempt_factor * n`` draws.
    """
    kept, attempts, need = [], 0, n
    cap = attempt_factor * n
    while need > 0 and attempts < cap:
        batch = min(max(2 * need, 256), cap - attempts)
        u = model.sample(x_obs, batch, rng)
        attempts += batch
        ok = u[np.isfinite(task.log_prior_u(u))][:need]
        kept.append(ok)
        need -= ok.shape[0]
    u = np.vstack(kept) if kept else np.zeros((0, task.dim))
    if u.shape[0] < n:
        warnings.warn(
            f"only {u.shape[0]} of {n} posterior draws inside the prior support after {attempts} attempts",
            SupportWarning,
            stacklevel=2,
        )
    return u, attempts


def simulate_round(task: Task, draw, L: int, master_seed: int, round_idx: int, max_redraws: int, threads=None):
    """Simulate L successful (theta, summary) pairs.

    ``draw(rng, n)`` returns n proposal draws.  Failed runs are replaced by
    fresh draws until every slot succeeds or ``max_redraws`` is exceeded.
    """
    theta = draw(task_rng(master_seed, round_idx, 0), L)
    out: list = [None] * L
    pending = np.arange(L)
    attempts = failures = 0
    wave = 0
    while True:
        args = [(task, theta[i], master_seed, (round_idx, 1, wave, int(i))) for i in pending]
        res = ordered_map(_simulate_one, args, threads)
        attempts += pending.size
        failed = []
        for i, r in zip(pending, res):
            if r is None:
                failed.append(int(i))
            else:
                out[i] = r
        failures += len(failed)
        if not failed:
            break
        if failures > max_redraws:
            raise SimulationBudgetError(f"round {round_idx}: {failures} failed simulations exceed cap {max_redraws}")
        wave += 1
        pending = np.asarray(failed)
        theta[pending] = draw(task_rng(master_seed, round_idx, 2, wave), pending.size)
    return theta, np.vstack(out), attempts, failures


def snpe_run(task: Task, s_obs, config: SnpeConfig = SnpeConfig(), threads=None, on_round=None) -> SnpeResult:
    """Sequential NPE: simulate from the current proposal, retrain on all pairs.

    ``s_obs`` is the observed summary vector.  ``on_round(record, model,
    new_theta, new_summaries)`` is called after each round.
    """
    s_obs = np.asarray(s_obs, dtype=float).ravel()
    x_obs = task.features(s_obs)
    if config.correction == "none" and config.rounds > 1:
        log.warning("correction 'none' with %d rounds: later rounds are biased toward the proposal", config.rounds)
    theta_u = np.zeros((0, task.dim))
    summaries = np.zeros((0, s_obs.size))
    weights = np.zeros(0)
    round_index = np.zeros(0, dtype=int)
    models: list[MdnModel] = []
    records: list[RoundRecord] = []
    L = config.sims_per_round

    def prior_draw(rng, n):
        return task.sample_prior(rng, n)

    draw, proposal, box = prior_draw, "prior", None
    model = None
    for k in range(1, config.rounds + 1):
        t0 = time.perf_counter()
        theta, S, attempts, failures = simulate_round(
            task, draw, L, config.seed, k, config.max_redraw_factor * L, threads
        )
        u_new = task.to_u(theta)
        if proposal == "posterior":
            lw = task.log_prior_u(u_new) - model.log_prob(u_new, x_obs)
            w = np.exp(lw - lw.max())
            w /= w.mean()
            w = np.minimum(w, np.percentile(w, config.importance_clip))
            w /= w.mean()
        else:
            w = np.ones(L)
        theta_u = np.vstack([theta_u, u_new])
        summaries = np.vstack([summaries, S])
        weights = np.concatenate([weights, w])
        round_index = np.concatenate([round_index, np.full(L, k)])

        tc = replace(config.train, seed=_sub_seed(config.seed, k, 3))
        res = mdn_train(
            theta_u,
            task.features(summaries),
            tc,
            sample_weight=None if np.all(weights == 1.0) else weights,
            hidden=config.hidden,
            n_components=config.n_components,
            full_cov=config.full_cov,
        )
        model = res.model
        model.meta.update({"round": k, "names": list(task.names)})
        models.append(model)
        rec = RoundRecord(
            round=k,
            dataset_size=theta_u.shape[0],
            n_new=L,
            attempts=attempts,
            failures=failures,
            successes=attempts - failures,
            proposal=proposal,
            train_loss=res.train_loss,
            val_loss=res.val_loss,
            best_epoch=res.best_epoch,
            restarts=res.restarts,
            learning_rate=res.learning_rate,
            wall_time=0.0,
            box_lo=None if box is None else box[0].tolist(),
            box_hi=None if box is None else box[1].tolist(),
        )

        # proposal for the next round
        if k < config.rounds and config.correction != "none":
            rng = task_rng(config.seed, k, 4)
            if config.correction == "truncated":
                u, _ = sample_restricted(task, model, x_obs, config.truncation_samples, rng,
                                         config.support_attempt_factor)
                if u.shape[0] < 2:
                    raise PriorExhaustedError("posterior estimate has no mass inside the prior support")
                a = config.truncation_mass / 2.0
                lo, hi = np.quantile(u, [a, 1.0 - a], axis=0)
                box = (lo, hi)

                def draw(rng, n, lo=lo, hi=hi):
                    return task.sample_prior_truncated(rng, n, lo, hi)

                proposal = "truncated"
            else:
                current = model

                def draw(rng, n, current=current):
                    u, _ = sample_restricted(task, current, x_obs, n, rng, config.support_attempt_factor)
                    if u.shape[0] < n:
                        raise PriorExhaustedError("proposal has too little mass inside the prior support")
                    return task.from_u(u)

                proposal = "posterior"
        rec.wall_time = time.perf_counter() - t0
        records.append(rec)
        log.info(
            "round %d: %d pairs, %d failures, val loss %.4f, %.1fs",
            k, rec.dataset_size, failures, res.val_loss[res.best_epoch], rec.wall_time,
        )
        if on_round is not None:
            on_round(rec, model, theta, S)

    rng = task_rng(config.seed, config.rounds + 1, 5)
    u, attempts = sample_restricted(task, model, x_obs, config.n_posterior, rng, config.support_attempt_factor)
    samples = PosteriorSamples(
        task.from_u(u),
        task.names,
        "snpe",
        seed=config.seed,
        round=config.rounds,
        meta={"support_attempts": attempts, "correction": config.correction},
    )
    return SnpeResult(samples, models, records, s_obs, theta_u, summaries, weights, round_index, task)


# ABC ------------------------------------------------------------------------


@dataclass(frozen=True)
class AbcConfig:
    # None: take the epsilon_quantile of pilot distances
    epsilon: float | None = None
    epsilon_quantile: float = 0.01
    budget: int = 10000
    pilot_size: int = 500
    # per-summary multipliers on the standardized squared differences
    summary_weights: tuple[float, ...] | None = None
    # MCMC only; None tunes the random walk from the pilot
    proposal_scale: tuple[float, ...] | float | None = None
    chain_length: int | None = None
    stuck_window: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.epsilon_quantile <= 1:
            raise ValueError("epsilon_quantile must lie in (0, 1]")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.pilot_size < 2:
            raise ValueError("pilot_size must be >= 2")


@dataclass
class AbcDistance:
    s_obs: np.ndarray
    scale: np.ndarray
    weights: np.ndarray

    def __call__(self, s) -> np.ndarray:
        z = (np.atleast_2d(s) - self.s_obs) / self.scale
        return np.sqrt((self.weights * z**2).sum(axis=1))


def mad_scale(S) -> np.ndarray:
    """Median absolute deviation per column, falling back to std and then 1."""
    S = np.atleast_2d(S)
    mad = np.median(np.abs(S - np.median(S, axis=0)), axis=0)
    sd = S.std(axis=0)
    return np.where(mad > 0, mad, np.where(sd > 0, sd, 1.0))


@dataclass
class AbcPilot:
    theta: np.ndarray
    summaries: np.ndarray
    distance: AbcDistance
    distances: np.ndarray
    epsilon: float


def abc_pilot(task: Task, s_obs, config: AbcConfig, threads=None) -> AbcPilot:
    s_obs = np.asarray(s_obs, dtype=float).ravel()
    theta = np.vstack([task.sample_prior(task_rng(config.seed, 0, i), 1) for i in range(config.pilot_size)])
    args = [(task, theta[i], config.seed, (0, 1, i)) for i in range(config.pilot_size)]
    res = ordered_map(_simulate_one, args, threads)
    ok = [i for i, r in enumerate(res) if r is not None]
    if len(ok) < 2:
        raise SimulationBudgetError("pilot produced fewer than two valid simulations")
    S = np.vstack([res[i] for i in ok])
    standardize = getattr(getattr(task, "summary", None), "standardize", True)
    scale = mad_scale(S) if standardize else np.ones(s_obs.size)
    w = np.ones(s_obs.size) if config.summary_weights is None else np.asarray(config.summary_weights, float)
    if w.size != s_obs.size:
        raise ValueError("summary_weights length does not match the summary vector")
    dist = AbcDistance(s_obs, scale, w)
    d = dist(S)
    eps = config.epsilon if config.epsilon is not None else float(np.quantile(d, config.epsilon_quantile))
    if not eps > 0:
        eps = float(np.min(d[d > 0])) if np.any(d > 0) else 1.0
    return AbcPilot(theta[ok], S, dist, d, eps)


def _abc_draw(task: Task, seed: int, i: int):
    rng = task_rng(seed, 1, i)
    theta = task.sample_prior(rng, 1)[0]
    return theta, task.simulate(theta, rng)


def abc_rejection(task: Task, s_obs, config: AbcConfig = AbcConfig(), threads=None, pilot: AbcPilot | None = None):
    """Rejection ABC with ``config.budget`` prior-predictive simulations."""
    pilot = pilot or abc_pilot(task, s_obs, config, threads)
    eps = pilot.epsilon
    res = ordered_map(_abc_draw, [(task, config.seed, i) for i in range(config.budget)], threads)
    theta = np.vstack([r[0] for r in res])
    d = np.full(config.budget, np.inf)
    valid = np.array([r[1] is not None for r in res])
    if valid.any():
        d[valid] = pilot.distance(np.vstack([r[1] for r in res if r[1] is not None]))
    acc = d <= eps
    if not acc.any():
        warnings.warn(f"no simulation within epsilon={eps:g}", EmptyAcceptanceWarning, stacklevel=2)
    return PosteriorSamples(
        theta[acc],
        task.names,
        "abc",
        seed=config.seed,
        meta={
            "epsilon": eps,
            "acceptance_rate": float(acc.mean()),
            "n_simulations": config.budget,
            "n_failed": int((~valid).sum()),
            "distances": d,
        },
    )


def abc_mcmc(task: Task, s_obs, config: AbcConfig = AbcConfig(), threads=None, pilot: AbcPilot | None = None):
    """Likelihood-free MCMC with a uniform ABC kernel.

    A rejection warm-up finds the first accepted state; the chain then
    proposes Gaussian random-walk moves in transformed space, simulates
    once per proposal and accepts when the distance is within epsilon and
    the prior Metropolis-Hastings test passes.
    """
    pilot = pilot or abc_pilot(task, s_obs, config, threads)
    eps = pilot.epsilon
    dist = pilot.distance

    state = None
    used = 0
    while used < config.budget:
        theta, s = _abc_draw(task, config.seed, used)
        used += 1
        if s is not None and dist(s)[0] <= eps:
            state = theta
            break
    if state is None:
        raise RuntimeError(f"no accepted draw in {used} warm-up simulations at epsilon={eps:g}")
    warmup = used

    d = task.dim
    if config.proposal_scale is None:
        near = pilot.distances <= eps
        ref = pilot.theta[near] if near.sum() > 2 * d else pilot.theta
        factor = 2.38 / math.sqrt(d) if near.sum() > 2 * d else 0.1
        scale = factor * task.to_u(ref).std(axis=0)
        scale = np.where(scale > 0, scale, 0.1)
    else:
        scale = np.broadcast_to(np.asarray(config.proposal_scale, dtype=float), (d,)).copy()

    n_steps = config.chain_length if config.chain_length is not None else max(config.budget - warmup, 1)
    u = task.to_u(state)[0]
    lp = float(task.log_prior_u(u)[0])
    chain = np.empty((n_steps, d))
    accepted = 0
    win_acc = 0
    n_sims = warmup
    stuck = False
    for r in range(n_steps):
        rng = task_rng(config.seed, 2, r)
        prop = u + scale * rng.standard_normal(d)
        lpp = float(task.log_prior_u(prop)[0])
        log_a = math.log(rng.random())
        # the prior test needs no simulation, so do it first
        if np.isfinite(lpp) and log_a < lpp - lp:
            theta = task.from_u(prop)[0]
            s = task.simulate(theta, rng)
            n_sims += 1
            if s is not None and dist(s)[0] <= eps:
                u, lp = prop, lpp
                accepted += 1
                win_acc += 1
        chain[r] = task.from_u(u)[0]
        if (r + 1) % config.stuck_window == 0:
            if win_acc < 0.01 * config.stuck_window and not stuck:
                stuck = True
                warnings.warn(
                    f"ABC-MCMC acceptance {win_acc / config.stuck_window:.3%} over the last "
                    f"{config.stuck_window} proposals",
                    StuckChainWarning,
                    stacklevel=2,
                )
            win_acc = 0
    return PosteriorSamples(
        chain,
        task.names,
        "abc-mcmc",
        seed=config.seed,
        meta={
            "epsilon": eps,
            "acceptance_rate": accepted / n_steps,
            "warmup_simulations": warmup,
            "n_simulations": n_sims,
            "proposal_scale": scale.tolist(),
        },
    )
