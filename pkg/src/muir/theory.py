"""Runtime experiments for the decomposed K-valued (1+lambda)-EA.

Fitness is linear: block ``d`` scores the weighted count of its locations that
hold module 0 (the unique optimum). Many independent trials run together as
rows of one array; every trial is still a pure function of (params, seed).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .decomposition import ConfigurationError

SAMPLING = ("uniform", "proportional")
INIT = ("uniform", "pessimistic")


@dataclass(frozen=True)
class EAParams:
    L: int
    K: int
    D: int
    lam: int = 1
    sampling: str = "uniform"
    init: str = "uniform"
    max_iter: int = 1_000_000

    def __post_init__(self):
        if self.L < 1 or self.K < 1 or self.D < 1 or self.lam < 1:
            raise ConfigurationError("L, K, D, lam must be positive")
        if self.L % self.D:
            raise ConfigurationError(f"D={self.D} does not divide L={self.L}")
        if self.sampling not in SAMPLING or self.init not in INIT:
            raise ConfigurationError(f"bad sampling/init {self.sampling}/{self.init}")
        if self.init == "pessimistic" and self.K < self.L:
            raise ConfigurationError("pessimistic init needs K >= L")


@dataclass
class EATrialResult:
    L: int
    K: int
    D: int
    lam: int
    sampling: str
    init: str
    iterations: int
    reached: bool
    seed: int

    def as_row(self) -> dict:
        return asdict(self)


def _initial(params: EAParams, trials: int, rng) -> np.ndarray:
    if params.init == "pessimistic":
        # location l starts on module l, so only location 0 is correct
        return np.tile(np.arange(params.L), (trials, 1))
    return rng.integers(params.K, size=(trials, params.L))


def _fitness(psi: np.ndarray, weights: np.ndarray, D: int) -> np.ndarray:
    """Per-block linear fitness, shape (..., D)."""
    hit = (psi == 0) * weights
    return hit.reshape(psi.shape[:-1] + (D, -1)).sum(-1)


def run_decomposed_ea_batch(
    params: EAParams,
    trials: int,
    rng: np.random.Generator,
    weights: np.ndarray | None = None,
    trace: bool = False,
):
    """Run ``trials`` independent EAs; returns iterations (and wrong-count trace).

    Iterations count passes through the outer loop until every block is
    optimal; trials hitting ``max_iter`` report ``max_iter`` and reached=False.
    """
    L, K, D, lam = params.L, params.K, params.D, params.lam
    w = np.ones(L) if weights is None else np.asarray(weights, float)
    if w.shape != (L,) or (w <= 0).any():
        raise ConfigurationError("weights must be positive, one per location")
    if K == 1:
        iters = np.zeros(trials, dtype=np.int64)
        return (iters, np.ones(trials, bool), [np.zeros(trials)]) if trace else (iters, np.ones(trials, bool))

    psi = _initial(params, trials, rng)
    rate = D / L
    done = (psi == 0).all(axis=1)
    iters = np.zeros(trials, dtype=np.int64)
    wrong = [(psi != 0).sum(1).astype(float)] if trace else None
    t = 0
    live = np.flatnonzero(~done)
    cur = psi[live]
    while len(live) and t < params.max_iter:
        t += 1
        n = len(live)
        best = cur.copy()
        best_fit = _fitness(cur, w, D)
        for _ in range(lam):
            mask = rng.random((n, L)) < rate
            if params.sampling == "uniform":
                draws = rng.integers(K, size=(n, L))
            else:
                draws = cur[np.arange(n)[:, None], rng.integers(L, size=(n, L))]
            child = np.where(mask, draws, cur)
            fit = _fitness(child, w, D)
            better = fit > best_fit  # ties keep the earlier (incumbent first)
            if better.any():
                loc_mask = np.repeat(better, L // D, axis=1)
                best = np.where(loc_mask, child, best)
                best_fit = np.where(better, fit, best_fit)
        cur = best
        iters[live] = t
        psi[live] = cur
        if trace:
            wrong.append((psi != 0).sum(1).astype(float))
        finished = (cur == 0).all(axis=1)
        if finished.any():
            done[live[finished]] = True
            live = live[~finished]
            cur = cur[~finished]
    if trace:
        return iters, done, wrong
    return iters, done


def run_decomposed_ea(params: EAParams, seed: int, weights=None) -> EATrialResult:
    rng = np.random.default_rng(seed)
    iters, done = run_decomposed_ea_batch(params, 1, rng, weights)
    return EATrialResult(
        params.L, params.K, params.D, params.lam, params.sampling, params.init,
        int(iters[0]), bool(done[0]), seed,
    )


def run_trials(params: EAParams, trials: int, seed: int, chunk: int = 256) -> list[EATrialResult]:
    """Trials in chunks; each chunk gets its own stream spawned from ``seed``."""
    results = []
    n_chunks = math.ceil(trials / chunk)
    streams = np.random.SeedSequence(seed).spawn(n_chunks)
    for c, ss in enumerate(streams):
        size = min(chunk, trials - c * chunk)
        iters, done = run_decomposed_ea_batch(params, size, np.random.default_rng(ss))
        for k in range(size):
            results.append(
                EATrialResult(params.L, params.K, params.D, params.lam, params.sampling,
                              params.init, int(iters[k]), bool(done[k]), seed * 1_000_003 + c * chunk + k)
            )
    return results


# ---------------------------------------------------------------- closed forms


def expected_wrong_count(L: int, t: int) -> float:
    """Mean-field wrong-location count ``(L-1)^(2^t) / L^(2^t - 1)``."""
    if L < 2 or t < 0:
        raise ValueError("need L >= 2 and t >= 0")
    # L * (1 - 1/L)^(2^t), evaluated in log space to avoid overflow
    return L * math.exp((2.0**t) * math.log1p(-1.0 / L))


def wrong_count_recurrence(L: int, t: int) -> float:
    w = float(L - 1)
    for _ in range(t):
        w = w * w / L
    return w


def mean_wrong_trajectory(L: int, trials: int, seed: int, steps: int) -> np.ndarray:
    """Empirical mean wrong count per iteration (pessimistic, proportional, D=L)."""
    params = EAParams(L, L, L, 1, "proportional", "pessimistic")
    _, _, wrong = run_decomposed_ea_batch(params, trials, np.random.default_rng(seed), trace=True)
    out = np.zeros(steps + 1)
    for t in range(steps + 1):
        out[t] = wrong[t].mean() if t < len(wrong) else 0.0
    return out


def harmonic(n: int) -> float:
    return float(np.sum(1.0 / np.arange(1, n + 1)))


def predictor(L: int, K: int, D: int) -> float:
    """Scale of the expected convergence time for a given decomposition.

    ``K (L/D) (1 + ln(L/D)) H_D``: the per-block (1+1)-EA time times the
    harmonic factor for the slowest of D blocks. The ``1 +`` keeps the
    per-block term positive when blocks have a single location.
    """
    per = L / D
    return K * per * (1.0 + math.log(per)) * harmonic(D)


# ---------------------------------------------------------------- fitting


@dataclass
class ScalingFit:
    predictor_name: str
    x: list[float]
    mean_iterations: list[float]
    intercept: float
    slope: float
    r2: float
    residuals: list[float]
    conclusive: bool

    def as_dict(self) -> dict:
        return asdict(self)


def fit_linear(x, y) -> tuple[float, float, float, np.ndarray]:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), float(coef[1]), r2, resid


def fit_scaling(
    results: list[EATrialResult],
    by: str = "L",
    predictor_name: str = "log_L",
    min_groups: int = 5,
    min_trials: int = 100,
) -> ScalingFit:
    """Least-squares fit of mean iterations against a theory predictor.

    ``predictor_name``: ``log_L`` (ln L), ``KLlogL`` (K L ln L), or
    ``theorem`` (:func:`predictor`).
    """
    groups: dict[int, list[EATrialResult]] = {}
    for r in results:
        groups.setdefault(getattr(r, by), []).append(r)
    keys = sorted(groups)
    means = [float(np.mean([r.iterations for r in groups[k]])) for k in keys]
    xs = []
    for k in keys:
        r = groups[k][0]
        if predictor_name == "log_L":
            xs.append(math.log(r.L))
        elif predictor_name == "KLlogL":
            xs.append(r.K * r.L * math.log(r.L))
        elif predictor_name == "theorem":
            xs.append(predictor(r.L, r.K, r.D))
        else:
            raise ValueError(f"unknown predictor {predictor_name!r}")
    conclusive = (
        len(keys) >= min_groups
        and all(len(groups[k]) >= min_trials for k in keys)
        and all(r.reached for r in results)
    )
    a, b, r2, resid = fit_linear(xs, means)
    return ScalingFit(predictor_name, xs, means, a, b, r2, resid.tolist(), conclusive)


def ordering_check(results: list[EATrialResult], min_ratio: float = 1.0) -> dict:
    """Mean iterations by D, and whether they strictly decrease with D."""
    by_d: dict[int, list[int]] = {}
    for r in results:
        by_d.setdefault(r.D, []).append(r.iterations)
    ds = sorted(by_d)
    means = [float(np.mean(by_d[d])) for d in ds]
    ratios = [means[i] / means[i + 1] for i in range(len(ds) - 1)]
    return {
        "D": ds,
        "mean_iterations": means,
        "ratios": ratios,
        "ordered": all(r > min_ratio for r in ratios),
    }
