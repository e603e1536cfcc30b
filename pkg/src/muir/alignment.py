"""Optimizing which hypermodule each location uses, interleaved with training.

Each generation resets the location beliefs ``s``, proposes ``lambda``
alternative modules at a random ``ceil(p L)`` subset of locations, trains the
soft-merged model, then commits, per location, the module carrying the most
belief mass.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .bank import HypermoduleBank, generate_var, parameter_counts, soft_merge_var
from .tensor import Adam, AdamState, Tape, Var, softmax_array

log = logging.getLogger(__name__)

NEW = -1
SELECTIONS = ("belief", "random", "frozen")
EVAL_POINTS = ("after_commit", "before_commit")


@dataclass
class MuirConfig:
    lam: int = 8
    p: float = 0.5
    lr: float = 1e-3
    lr_s: float = 0.01
    n_init: int = 0
    n_iter: int = 100
    n_gen: int = 300
    n_final: int = 0
    alpha: float | None = None  # None -> lam / (lam + 1)
    eps: float = 1e-4
    patience: int | None = None
    selection: str = "belief"
    eval_point: str = "after_commit"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.p <= 1:
            raise ValueError(f"p must be in (0, 1], got {self.p}")
        if not 0 <= self.eps < 1:
            raise ValueError(f"eps must be in [0, 1), got {self.eps}")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.lam >= 1 and not 0 < self.resolved_alpha < 1:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.selection not in SELECTIONS:
            raise ValueError(f"selection must be one of {SELECTIONS}")
        if self.eval_point not in EVAL_POINTS:
            raise ValueError(f"eval_point must be one of {EVAL_POINTS}")
        for name in ("n_init", "n_iter", "n_gen", "n_final"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def resolved_alpha(self) -> float:
        return self.lam / (self.lam + 1) if self.alpha is None else self.alpha


@dataclass
class AlignmentState:
    psi0: np.ndarray
    psis: np.ndarray | None = None  # (lam + 1, L); row 0 is psi0
    s: np.ndarray | None = None  # (L, lam + 1)
    perturbed: np.ndarray | None = None
    generation: int = 0


class JointModel(Protocol):
    """What :func:`run_muir` needs from a model whose blocks come from a bank."""

    bank: HypermoduleBank
    extra: dict[str, np.ndarray]

    def loss_var(
        self, tape: Tape, blocks: Var, extra: dict[str, Var], rng: np.random.Generator
    ) -> tuple[Var, np.ndarray]: ...

    def evaluate(self, blocks: np.ndarray, extra: dict[str, np.ndarray], split: str) -> np.ndarray: ...


# ---------------------------------------------------------------- pieces


def init_soft_weights(lam: int, alpha: float) -> np.ndarray:
    """Beliefs giving the incumbent probability ``1 - alpha``."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if lam < 1:
        raise ValueError("lam must be at least 1")
    s = np.full(lam + 1, math.log(alpha) - math.log(lam) - math.log(1 - alpha))
    s[0] = 0.0
    return s


def sample_probabilities(psi0: np.ndarray, eps: float, new_allowed: bool, capacity: int):
    """Exact distribution of :func:`proportional_sample` as (module probs, P(NEW))."""
    usage = np.bincount(psi0, minlength=capacity) / len(psi0)
    if new_allowed:
        return (1 - eps) * usage, eps
    return usage, 0.0


def proportional_sample(
    psi0: np.ndarray, eps: float, rng: np.random.Generator, new_allowed: bool = True
) -> int:
    """A module id drawn proportionally to its usage in ``psi0``, or ``NEW``.

    ``NEW`` has probability ``eps`` when ``new_allowed``; otherwise that mass
    goes back to the existing modules.
    """
    if new_allowed and eps > 0 and rng.random() < eps:
        return NEW
    return int(psi0[rng.integers(len(psi0))])


def subset_size(p: float, L: int) -> int:
    # guard against p * L landing a hair above an integer
    return min(L, max(1, math.ceil(round(p * L, 9))))


def propose_candidates(
    psi0: np.ndarray,
    p: float,
    lam: int,
    rng: np.random.Generator,
    eps: float = 0.0,
    bank: HypermoduleBank | None = None,
    on_new: Callable[[int, int], None] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Candidate alignments ``(lam + 1, L)`` with row 0 equal to ``psi0``.

    Without a bank, ``NEW`` draws are left in place as ``-1``. With a bank,
    each ``NEW`` allocates a fresh module (``on_new(module, location)`` is
    called) while free ids remain.
    """
    psi0 = np.asarray(psi0)
    L = len(psi0)
    locs = np.sort(rng.choice(L, size=subset_size(p, L), replace=False))
    psis = np.tile(psi0, (lam + 1, 1))
    for i in range(1, lam + 1):
        for loc in locs:
            allowed = eps > 0 and (bank is None or bank.active_count < bank.capacity)
            k = proportional_sample(psi0, eps, rng, allowed)
            if k == NEW and bank is not None:
                k = bank.allocate(rng, int(bank.fan_in[loc]))
                if on_new is not None:
                    on_new(k, int(loc))
            psis[i, loc] = k
    return psis, locs


def score_candidates(s_row: np.ndarray, modules: np.ndarray) -> np.ndarray:
    """Belief mass per slot, summed over slots that hold the same module."""
    prob = softmax_array(s_row)
    modules = np.asarray(modules)
    same = modules[:, None] == modules[None, :]
    return same.astype(float) @ prob


def select_slots(s: np.ndarray, psis: np.ndarray) -> np.ndarray:
    """Winning slot per location; ties go to the incumbent, then lowest slot."""
    return np.array([int(np.argmax(score_candidates(s[l], psis[:, l]))) for l in range(psis.shape[1])])


def commit_selection(
    state: AlignmentState,
    bank: HypermoduleBank,
    mode: str = "belief",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Apply the per-location winners to ``psi0`` and drop orphaned modules."""
    psis = state.psis
    if mode == "belief":
        slots = select_slots(state.s, psis)
    elif mode == "random":
        slots = rng.integers(psis.shape[0], size=psis.shape[1])
    else:
        raise ValueError(f"cannot commit with mode {mode!r}")
    psi0 = state.psi0
    for loc in range(len(psi0)):
        new = int(psis[slots[loc], loc])
        bank.move(loc, int(psi0[loc]), new)
        psi0[loc] = new
    bank.prune_unused()
    state.psis = None
    state.s = None
    return psi0


def psi_hash(psi: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(psi, dtype=np.int64).tobytes()).hexdigest()[:12]


# ---------------------------------------------------------------- full loop


@dataclass
class BestSnapshot:
    generation: int
    val_mean: float
    val: np.ndarray
    bank: HypermoduleBank
    psi0: np.ndarray
    extra: dict[str, np.ndarray]
    adam: dict[str, AdamState]


@dataclass
class RunResult:
    history: list[dict] = field(default_factory=list)
    alignments: list[list[int]] = field(default_factory=list)
    best: BestSnapshot | None = None
    psi0: np.ndarray | None = None
    stopped_early: bool = False


class MuirTrainer:
    """Owns the optimizer and alignment state for one run."""

    def __init__(self, model: JointModel, config: MuirConfig, psi0: np.ndarray | None = None):
        self.model = model
        self.config = config
        self.bank = model.bank
        self.rng = np.random.default_rng(config.seed)
        if psi0 is None:
            psi0 = np.arange(self.bank.L)
        self.state = AlignmentState(np.array(psi0, dtype=np.int64))
        self.bank.set_usage(self.state.psi0)
        self.adam = Adam(lr=config.lr, lr_overrides={"s": config.lr_s})
        self.train_z = not self.bank.config.exact_sharing

    # -- training

    def _params(self) -> dict[str, np.ndarray]:
        params = {"H": self.bank.H, **self.model.extra}
        if self.train_z:
            params["z"] = self.bank.z
        return params

    def train(self, steps: int, merged: bool) -> np.ndarray:
        """Backprop steps through the plain or soft-merged blocks; mean task losses."""
        total = None
        for _ in range(steps):
            tape = Tape()
            H = tape.var(self.bank.H)
            z = tape.var(self.bank.z) if self.train_z else tape.const(self.bank.z)
            extra = {k: tape.var(v) for k, v in self.model.extra.items()}
            leaves = {"H": H, **extra}
            if self.train_z:
                leaves["z"] = z
            if merged:
                s = tape.var(self.state.s)
                leaves["s"] = s
                blocks = soft_merge_var(H, z, s, self.state.psis)
            else:
                blocks = generate_var(H, z, self.state.psi0)
            loss, task_losses = self.model.loss_var(tape, blocks, extra, self.rng)
            names = list(leaves)
            grads = tape.gradient(loss, [leaves[k] for k in names])
            params = self._params()
            if merged:
                params["s"] = self.state.s
            self.adam.step(params, dict(zip(names, grads)))
            total = task_losses if total is None else total + task_losses
        return np.zeros(0) if total is None else total / steps

    def blocks(self, merged: bool = False) -> np.ndarray:
        if not merged:
            return self.bank.generate_all(self.state.psi0)
        tape = Tape()
        H, z, s = (tape.const(a) for a in (self.bank.H, self.bank.z, self.state.s))
        return soft_merge_var(H, z, s, self.state.psis).value

    def evaluate(self, split: str, merged: bool = False) -> np.ndarray:
        blocks = self.blocks(merged)
        return np.asarray(self.model.evaluate(blocks, self.model.extra, split), dtype=float)

    # -- one generation

    def _on_new(self, k: int | None, loc: int) -> None:
        if k is not None:
            self.adam.reset("H", k)

    def generation(self) -> tuple[np.ndarray, np.ndarray, int]:
        """One generation; returns (train losses, validation metric, new modules).

        With ``eval_point="before_commit"`` validation is measured on the
        soft-merged model as trained; otherwise on the committed alignment.
        """
        cfg = self.config
        st = self.state
        if cfg.selection == "frozen" or cfg.lam == 0:
            losses = self.train(cfg.n_iter, merged=False)
            return losses, self.evaluate("val"), 0
        L = self.bank.L
        st.s = np.tile(init_soft_weights(cfg.lam, cfg.resolved_alpha), (L, 1))
        self.adam.reset("s")
        before = self.bank.active_count
        st.psis, st.perturbed = propose_candidates(
            st.psi0, cfg.p, cfg.lam, self.rng, cfg.eps, self.bank, self._on_new
        )
        n_new = self.bank.active_count - before
        losses = self.train(cfg.n_iter, merged=True)
        val = self.evaluate("val", merged=True) if cfg.eval_point == "before_commit" else None
        commit_selection(st, self.bank, cfg.selection, self.rng)
        if val is None:
            val = self.evaluate("val")
        return losses, val, n_new

    # -- bookkeeping

    def snapshot(self, generation: int, val: np.ndarray) -> BestSnapshot:
        return BestSnapshot(
            generation=generation,
            val_mean=float(np.mean(val)),
            val=val.copy(),
            bank=self.bank.copy(),
            psi0=self.state.psi0.copy(),
            extra={k: v.copy() for k, v in self.model.extra.items()},
            adam=self.adam.snapshot(),
        )

    def restore(self, snap: BestSnapshot) -> None:
        b = snap.bank
        self.bank.H[...] = b.H
        self.bank.z[...] = b.z
        self.bank.usage[...] = b.usage
        self.bank.alive[...] = b.alive
        self.state.psi0[...] = snap.psi0
        for k, v in snap.extra.items():
            self.model.extra[k][...] = v
        self.adam.restore(snap.adam)

    def record(self, generation, train_losses, val, n_new, extra_metrics) -> dict:
        counts = parameter_counts(self.state.psi0, self.bank)
        row = {
            "generation": generation,
            "train_mean": float(np.mean(train_losses)) if len(train_losses) else float("nan"),
            "val_mean": float(np.mean(val)),
            "active_K": self.bank.active_count,
            "n_new": n_new,
            "params_original": counts["original"],
            "params_reparameterized": counts["reparameterized"],
            "params_inference": counts["inference"],
            "psi_hash": psi_hash(self.state.psi0),
        }
        if extra_metrics is not None:
            row.update(extra_metrics(self.state.psi0))
        for t, v in enumerate(train_losses):
            row[f"train_{t}"] = float(v)
        for t, v in enumerate(val):
            row[f"val_{t}"] = float(v)
        return row


def run_muir(
    model: JointModel,
    config: MuirConfig,
    psi0: np.ndarray | None = None,
    extra_metrics: Callable[[np.ndarray], dict] | None = None,
) -> RunResult:
    """Full interleaved optimization; leaves ``model`` in its final trained state.

    Generation 0 is the state after the ``n_init`` warm-up. Validation is
    evaluated once per generation (see ``MuirConfig.eval_point``); the
    snapshot of a best generation always holds the committed alignment.
    The best state (by mean validation metric) is restored before the
    ``n_final`` steps.
    """
    tr = MuirTrainer(model, config, psi0)
    result = RunResult()

    losses = tr.train(config.n_init, merged=False)
    val = tr.evaluate("val")
    result.history.append(tr.record(0, losses, val, 0, extra_metrics))
    result.alignments.append(tr.state.psi0.tolist())
    result.best = tr.snapshot(0, val)
    since_best = 0

    for gen in range(1, config.n_gen + 1):
        tr.state.generation = gen
        losses, val, n_new = tr.generation()
        result.history.append(tr.record(gen, losses, val, n_new, extra_metrics))
        result.alignments.append(tr.state.psi0.tolist())
        if float(np.mean(val)) < result.best.val_mean:
            result.best = tr.snapshot(gen, val)
            since_best = 0
        else:
            since_best += 1
        if config.patience is not None and since_best >= config.patience:
            result.stopped_early = True
            log.info("early stop at generation %d (best %d)", gen, result.best.generation)
            break

    tr.restore(result.best)
    tr.train(config.n_final, merged=False)
    result.psi0 = tr.state.psi0.copy()
    return result
