"""Grouped linear-regression benchmark: 30 tasks in 3 groups of 10.

Tasks within a group share a direction and differ by a scalar, so no task is
solvable from its own 10 training samples (fewer than the 20 inputs) but a
shared module per group solves all of them.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .alignment import MuirConfig, run_muir
from .bank import BankConfig, HypermoduleBank, init_bank
from .tensor import Adam, Tape, Var, einsum, mean, sqrt, square


@dataclass(frozen=True)
class SyntheticConfig:
    n_groups: int = 3
    tasks_per_group: int = 10
    dim: int = 20
    n_train: int = 10
    n_val: int = 5
    n_test: int = 50
    noisy: bool = False
    noise_sigma: float = 0.5
    noise_on_test: bool = False
    scale_low: float = 0.5
    scale_high: float = 2.5
    signed_scales: bool = False

    def __post_init__(self):
        for name in ("n_groups", "tasks_per_group", "dim", "n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.scale_low <= self.scale_high:
            raise ValueError("need 0 < scale_low <= scale_high")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @property
    def n_tasks(self) -> int:
        return self.n_groups * self.tasks_per_group


@dataclass
class SyntheticTaskSet:
    config: SyntheticConfig
    seed: int
    directions: np.ndarray  # (G, dim), unit norm
    scales: np.ndarray  # (T,)
    groups: np.ndarray  # (T,)
    weights: np.ndarray  # (T, dim)
    X: dict[str, np.ndarray] = field(default_factory=dict)  # split -> (T, N, dim)
    y: dict[str, np.ndarray] = field(default_factory=dict)  # split -> (T, N)

    @property
    def n_tasks(self) -> int:
        return len(self.groups)


def generate_synthetic(seed: int, config: SyntheticConfig = SyntheticConfig()) -> SyntheticTaskSet:
    rng = np.random.default_rng(seed)
    cfg = config
    dirs = rng.standard_normal((cfg.n_groups, cfg.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    T = cfg.n_tasks
    groups = np.repeat(np.arange(cfg.n_groups), cfg.tasks_per_group)
    mag = rng.uniform(cfg.scale_low, cfg.scale_high, size=T)
    sign = rng.choice([-1.0, 1.0], size=T)
    scales = mag * sign if cfg.signed_scales else mag
    weights = scales[:, None] * dirs[groups]
    ts = SyntheticTaskSet(cfg, seed, dirs, scales, groups, weights)
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        X = rng.standard_normal((T, n, cfg.dim))
        y = np.einsum("tnd,td->tn", X, weights)
        noise = rng.standard_normal((T, n)) * cfg.noise_sigma
        if cfg.noisy and (split != "test" or cfg.noise_on_test):
            y = y + noise
        ts.X[split] = X
        ts.y[split] = y
    return ts


def rmse_per_task(pred: np.ndarray, y: np.ndarray) -> np.ndarray:
    if y.size == 0:
        raise ValueError("empty split")
    return np.sqrt(np.mean((pred - y) ** 2, axis=1))


def rmse(weights: np.ndarray, ts: SyntheticTaskSet, split: str) -> float:
    """Per-task RMSE of linear weights (T, dim), averaged over tasks."""
    X, y = ts.X[split], ts.y[split]
    if y.size == 0:
        raise ValueError(f"split {split!r} is empty")
    pred = np.einsum("tnd,td->tn", X, weights)
    return float(rmse_per_task(pred, y).mean())


def grouping_score(psi, groups) -> int:
    """+1 per task on a module shared only within its group, 0 if unshared,
    -1 if the module is shared across groups."""
    psi = np.asarray(psi)
    groups = np.asarray(groups)
    score = 0
    for t in range(len(psi)):
        users = np.flatnonzero(psi == psi[t])
        if len(users) == 1:
            continue
        score += 1 if (groups[users] == groups[t]).all() else -1
    return score


def oracle_alignment(groups) -> np.ndarray:
    """Each task uses the module of the first task in its group."""
    groups = np.asarray(groups)
    first = {g: int(np.flatnonzero(groups == g)[0]) for g in np.unique(groups)}
    return np.array([first[g] for g in groups])


def task_rmse_loss(err: Var) -> tuple[Var, np.ndarray]:
    """Mean over tasks of per-task RMSE; ``err`` is (tasks, samples, ...).

    Training on the evaluation metric rather than MSE keeps gradient
    magnitudes from vanishing as residuals shrink.
    """
    sq = square(err)
    per_elem = 1.0 / (sq.value.size // sq.shape[0])
    letters = "abcdefgh"[: len(sq.shape) - 1]
    ms = einsum(f"t{letters}->t", sq) * per_elem
    r = sqrt(ms, RMSE_EPS)
    return mean(r), r.value


RMSE_EPS = 1e-12
# Module entries He-scaled for a 20-row block (context starts at 1). With the
# contraction rule the contexts shrink faster than a fresh shared module can
# turn toward its group, and frozen group alignments get stuck.
SIGMA_H_RULE = "rows"


class JointLinearModel:
    """One 20x1 block per task; prediction is ``<B_t, x>``."""

    def __init__(self, ts: SyntheticTaskSet, bank: HypermoduleBank):
        self.ts = ts
        self.bank = bank
        self.extra: dict[str, np.ndarray] = {}

    @classmethod
    def build(
        cls,
        ts: SyntheticTaskSet,
        c: int = 1,
        seed: int = 0,
        sigma_h_rule: str = SIGMA_H_RULE,
        context_scale: str = "sqrt",
    ) -> "JointLinearModel":
        cfg = BankConfig(c=c, m=ts.config.dim, n=1, sigma_h_rule=sigma_h_rule, context_scale=context_scale)
        bank, _ = init_bank([ts.config.dim] * ts.n_tasks, cfg, np.random.default_rng(seed))
        return cls(ts, bank)

    def loss_var(self, tape: Tape, blocks: Var, extra, rng) -> tuple[Var, np.ndarray]:
        X, y = self.ts.X["train"], self.ts.y["train"][..., None]
        err = einsum("tbm,tmn->tbn", tape.const(X), blocks) - tape.const(y)
        return task_rmse_loss(err)

    def evaluate(self, blocks: np.ndarray, extra, split: str) -> np.ndarray:
        pred = np.einsum("tbm,tm->tb", self.ts.X[split], blocks[..., 0])
        return rmse_per_task(pred, self.ts.y[split])

    def weights(self, psi) -> np.ndarray:
        return self.bank.generate_all(psi)[..., 0]


# ---------------------------------------------------------------- setups


@dataclass
class SetupResult:
    setup: str
    seed: int
    test_rmse: float
    test_rmse_per_task: list[float]
    val_rmse: float
    history: list[dict] = field(default_factory=list)
    alignments: list[list[int]] = field(default_factory=list)
    psi: list[int] | None = None
    best_generation: int | None = None
    model: JointLinearModel | None = None

    def summary(self) -> dict:
        out = {
            "setup": self.setup,
            "seed": self.seed,
            "test_rmse": self.test_rmse,
            "val_rmse": self.val_rmse,
            "best_generation": self.best_generation,
        }
        if self.psi is not None:
            out["final_grouping_score"] = grouping_score(self.psi, self.model.ts.groups)
            out["final_active_K"] = len(set(self.psi))
        return out


N_FINAL = 5000


def default_muir_config(**overrides) -> MuirConfig:
    base = dict(lam=8, p=0.5, lr_s=0.01, n_iter=100, n_init=0, n_gen=300, n_final=N_FINAL, patience=50)
    base.update(overrides)
    return MuirConfig(**base)


def _finish(setup, ts, model, result, seed) -> SetupResult:
    test = model.evaluate(model.bank.generate_all(result.psi0), {}, "test")
    return SetupResult(
        setup=setup,
        seed=seed,
        test_rmse=float(test.mean()),
        test_rmse_per_task=test.tolist(),
        val_rmse=result.best.val_mean,
        history=result.history,
        alignments=result.alignments,
        psi=result.psi0.tolist(),
        best_generation=result.best.generation,
        model=model,
    )


def run_muir_synthetic(
    ts: SyntheticTaskSet,
    config: MuirConfig | None = None,
    c: int = 1,
    sigma_h_rule: str = SIGMA_H_RULE,
    context_scale: str = "sqrt",
) -> SetupResult:
    config = config or default_muir_config()
    model = JointLinearModel.build(ts, c, config.seed, sigma_h_rule, context_scale)
    groups = ts.groups
    result = run_muir(model, config, extra_metrics=lambda psi: {"grouping_score": grouping_score(psi, groups)})
    return _finish("muir", ts, model, result, config.seed)


def run_random(
    ts: SyntheticTaskSet,
    config: MuirConfig | None = None,
    c: int = 1,
    sigma_h_rule: str = SIGMA_H_RULE,
    context_scale: str = "sqrt",
) -> SetupResult:
    config = replace(config or default_muir_config(), selection="random")
    model = JointLinearModel.build(ts, c, config.seed, sigma_h_rule, context_scale)
    groups = ts.groups
    result = run_muir(model, config, extra_metrics=lambda psi: {"grouping_score": grouping_score(psi, groups)})
    return _finish("random", ts, model, result, config.seed)


def run_oracle(
    ts: SyntheticTaskSet,
    config: MuirConfig | None = None,
    c: int = 1,
    sigma_h_rule: str = SIGMA_H_RULE,
    context_scale: str = "sqrt",
) -> SetupResult:
    config = replace(config or default_muir_config(), selection="frozen")
    model = JointLinearModel.build(ts, c, config.seed, sigma_h_rule, context_scale)
    groups = ts.groups
    result = run_muir(
        model,
        config,
        psi0=oracle_alignment(groups),
        extra_metrics=lambda psi: {"grouping_score": grouping_score(psi, groups)},
    )
    return _finish("oracle", ts, model, result, config.seed)


def run_stl(ts: SyntheticTaskSet, config: MuirConfig | None = None) -> SetupResult:
    """Independent linear models; each task keeps its best-validation weights.

    Weights start uniform in +-1/sqrt(dim), the usual default for a linear
    layer. A He-normal start leaves noise in the directions ten samples
    cannot pin down and does worse than predicting zero.

    Training runs in rounds of ``n_iter`` full-batch Adam steps for up to
    ``n_gen`` rounds, stopping once no task has improved for ``patience`` rounds.
    """
    config = config or default_muir_config()
    rng = np.random.default_rng(config.seed)
    T, dim = ts.n_tasks, ts.config.dim
    bound = 1.0 / np.sqrt(dim)
    W = rng.uniform(-bound, bound, size=(T, dim))
    adam = Adam(lr=config.lr)
    X, y = ts.X["train"], ts.y["train"]
    Xv, yv = ts.X["val"], ts.y["val"]

    def val_rmse(w):
        return rmse_per_task(np.einsum("tnd,td->tn", Xv, w), yv)

    best_w = W.copy()
    best_val = val_rmse(W)
    stale = np.zeros(T, dtype=int)
    history = [{"generation": 0, "val_mean": float(best_val.mean())}]
    for gen in range(1, config.n_gen + 1):
        for _ in range(config.n_iter):
            tape = Tape()
            w = tape.var(W)
            err = einsum("tnd,td->tn", tape.const(X), w) - tape.const(y)
            loss, _ = task_rmse_loss(err)
            (g,) = tape.gradient(loss, [w])
            adam.step({"W": W}, {"W": g})
        v = val_rmse(W)
        improved = v < best_val
        best_w[improved] = W[improved]
        best_val = np.where(improved, v, best_val)
        stale = np.where(improved, 0, stale + 1)
        history.append({"generation": gen, "val_mean": float(v.mean())})
        if config.patience is not None and (stale >= config.patience).all():
            break
    test = rmse_per_task(np.einsum("tnd,td->tn", ts.X["test"], best_w), ts.y["test"])
    return SetupResult(
        setup="stl",
        seed=config.seed,
        test_rmse=float(test.mean()),
        test_rmse_per_task=test.tolist(),
        val_rmse=float(best_val.mean()),
        history=history,
    )


SETUPS = {
    "stl": run_stl,
    "random": run_random,
    "oracle": run_oracle,
    "muir": run_muir_synthetic,
}


def zero_predictor_rmse(ts: SyntheticTaskSet, split: str = "test") -> float:
    return rmse(np.zeros_like(ts.weights), ts, split)
