"""Hypermodules, contexts, and the bookkeeping around them.

Module ``k`` is a ``c x m x n`` tensor; location ``l`` owns a length-``c``
context. The block used at ``l`` is ``H[psi[l]]`` contracted with ``z[l]``
along the first axis. With ``c == 0`` modules hold raw ``m x n`` blocks that
are shared verbatim (stored internally with a unit context axis and a fixed
context of ones).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .decomposition import ConfigurationError, IntegrityError, PseudoTaskLocation
from .tensor import Var, einsum, softmax, take


SIGMA_H_RULES = ("contraction", "rows")
CONTEXT_SCALES = ("linear", "sqrt")


@dataclass(frozen=True)
class BankConfig:
    """Module shape ``c x m x n`` and the rule fixing the module init scale.

    ``sigma_h_rule="contraction"`` sets ``sigma_H^2 = 2/c``; ``"rows"`` sets
    ``sigma_H^2 = 2/m``. The constant context entry then follows from
    ``context_scale``: ``"sqrt"`` solves ``sqrt(c) |z| sigma_H = sigma``, which
    gives generated entries variance exactly ``sigma^2``. ``"linear"`` solves
    ``c |z| sigma_H = sigma`` and gives ``sigma^2 / c``; the two agree at ``c = 1``.
    """

    c: int = 4
    m: int = 16
    n: int = 16
    sigma_h_rule: str = "contraction"
    context_scale: str = "sqrt"

    def __post_init__(self):
        if self.c < 0 or self.m < 1 or self.n < 1:
            raise ConfigurationError(f"invalid bank shape c={self.c} m={self.m} n={self.n}")
        if self.sigma_h_rule not in SIGMA_H_RULES:
            raise ConfigurationError(f"sigma_h_rule must be one of {SIGMA_H_RULES}")
        if self.context_scale not in CONTEXT_SCALES:
            raise ConfigurationError(f"context_scale must be one of {CONTEXT_SCALES}")

    @property
    def exact_sharing(self) -> bool:
        return self.c == 0

    @property
    def context_dim(self) -> int:
        return max(self.c, 1)

    @property
    def sigma_h(self) -> float:
        # location dependence always lives in z, so sigma_H is shared by all modules
        if not self.c:
            return float("nan")
        return math.sqrt(2.0 / (self.c if self.sigma_h_rule == "contraction" else self.m))


def he_sigma(fan_in: int) -> float:
    if fan_in <= 0:
        raise ConfigurationError(f"fan_in must be positive, got {fan_in}")
    return math.sqrt(2.0 / fan_in)


def context_value(fan_in: int, config: BankConfig) -> float:
    """Constant context entry for a location with the given fan-in."""
    factor = config.c if config.context_scale == "linear" else math.sqrt(config.c)
    return he_sigma(fan_in) / (factor * config.sigma_h)


class HypermoduleBank:
    """Module tensors ``H`` (capacity x c x m x n), contexts ``z`` (L x c),
    per-module usage counts and liveness.

    Capacity equals the initial module count; freed ids are only handed out
    again by :meth:`allocate`.
    """

    def __init__(self, config: BankConfig, H: np.ndarray, z: np.ndarray, fan_in: np.ndarray):
        self.config = config
        self.H = H
        self.z = z
        self.fan_in = np.asarray(fan_in, dtype=np.int64)
        self.usage = np.zeros(len(H), dtype=np.int64)
        self.alive = np.zeros(len(H), dtype=bool)

    @property
    def L(self) -> int:
        return len(self.z)

    @property
    def capacity(self) -> int:
        return len(self.H)

    @property
    def active_count(self) -> int:
        return int(self.alive.sum())

    def copy(self) -> "HypermoduleBank":
        b = HypermoduleBank(self.config, self.H.copy(), self.z.copy(), self.fan_in.copy())
        b.usage = self.usage.copy()
        b.alive = self.alive.copy()
        return b

    # -------------------------------------------------------------- usage

    def set_usage(self, psi: np.ndarray) -> None:
        psi = np.asarray(psi)
        self.check_psi(psi)
        self.usage = np.bincount(psi, minlength=self.capacity).astype(np.int64)
        self.alive = self.usage > 0

    def check_psi(self, psi: np.ndarray) -> None:
        if len(psi) != self.L:
            raise IntegrityError(f"alignment has length {len(psi)}, expected {self.L}")
        if psi.min() < 0 or psi.max() >= self.capacity:
            raise IntegrityError("alignment references a module id outside the bank")

    def move(self, loc: int, old: int, new: int) -> None:
        """Reassign one location. Modules left unused stay live until
        :meth:`prune_unused`, so a batch of moves can be applied in any order."""
        if old == new:
            return
        if not self.alive[new]:
            raise IntegrityError(f"module {new} is not live")
        self.usage[old] -= 1
        self.usage[new] += 1

    # -------------------------------------------------------------- creation

    def init_module(self, k: int, rng: np.random.Generator, fan_in: int) -> None:
        cfg = self.config
        if cfg.exact_sharing:
            self.H[k] = rng.normal(0.0, he_sigma(fan_in), size=self.H.shape[1:])
        else:
            he_sigma(fan_in)  # validates fan_in
            self.H[k] = rng.normal(0.0, cfg.sigma_h, size=self.H.shape[1:])

    def allocate(self, rng: np.random.Generator, fan_in: int, reserved=()) -> int | None:
        """Initialize a fresh module in the lowest free id, or None if full.

        The module is live but unused until some location commits to it.
        """
        free = np.flatnonzero(~self.alive)
        free = [int(k) for k in free if int(k) not in reserved]
        if not free:
            return None
        k = free[0]
        self.init_module(k, rng, fan_in)
        self.alive[k] = True
        self.usage[k] = 0
        return k

    def prune_unused(self) -> list[int]:
        dead = np.flatnonzero(self.alive & (self.usage == 0))
        self.alive[dead] = False
        return [int(k) for k in dead]

    # -------------------------------------------------------------- generation

    def generate_block(self, psi: np.ndarray, loc: int) -> np.ndarray:
        k = int(psi[loc])
        if not (0 <= k < self.capacity) or not self.alive[k]:
            raise IntegrityError(f"location {loc} references dead module {k}")
        if self.config.exact_sharing:
            return self.H[k, 0].copy()
        return np.einsum("kij,k->ij", self.H[k], self.z[loc])

    def generate_all(self, psi: np.ndarray) -> np.ndarray:
        """All L blocks as an (L, m, n) array."""
        psi = np.asarray(psi)
        return np.einsum("lcij,lc->lij", self.H[psi], self.z)

    def soft_merge_block(self, candidates: Sequence[int], s: np.ndarray, loc: int) -> np.ndarray:
        candidates = np.asarray(candidates)
        s = np.asarray(s, dtype=float)
        if s.shape != (len(candidates),):
            raise ValueError(f"beliefs of length {s.size} for {len(candidates)} candidates")
        e = np.exp(s - s.max())
        p = e / e.sum()
        gen = np.einsum("icmn,c->imn", self.H[candidates], self.z[loc])
        return np.einsum("i,imn->mn", p, gen)

    # -------------------------------------------------------------- arrays

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "H": self.H,
            "z": self.z,
            "fan_in": self.fan_in,
            "usage": self.usage,
            "alive": self.alive,
        }

    @classmethod
    def from_arrays(cls, config: BankConfig, arrays) -> "HypermoduleBank":
        b = cls(config, np.array(arrays["H"]), np.array(arrays["z"]), np.array(arrays["fan_in"]))
        b.usage = np.array(arrays["usage"], dtype=np.int64)
        b.alive = np.array(arrays["alive"], dtype=bool)
        return b


def init_bank(
    locations: Sequence[PseudoTaskLocation] | Sequence[int],
    config: BankConfig,
    rng: np.random.Generator,
) -> tuple[HypermoduleBank, np.ndarray]:
    """Pessimistic initialization: location ``l`` gets its own module ``l``.

    ``locations`` may be PseudoTaskLocations or plain fan-in values.
    Returns the bank and the initial alignment ``arange(L)``.
    """
    fan_in = np.array(
        [loc.fan_in if isinstance(loc, PseudoTaskLocation) else int(loc) for loc in locations],
        dtype=np.int64,
    )
    L = len(fan_in)
    if L < 1:
        raise ConfigurationError("need at least one location")
    if (fan_in <= 0).any():
        raise ConfigurationError("every location needs a positive fan_in")
    ce = config.context_dim
    H = np.empty((L, ce, config.m, config.n))
    if config.exact_sharing:
        z = np.ones((L, 1))
    else:
        z = np.array([[context_value(int(f), config)] * ce for f in fan_in])
    bank = HypermoduleBank(config, H, z, fan_in)
    for k in range(L):
        bank.init_module(k, rng, int(fan_in[k]))
    psi = np.arange(L)
    bank.set_usage(psi)
    return bank, psi


# ---------------------------------------------------------------- graph ops


def generate_var(H: Var, z: Var, psi) -> Var:
    """Differentiable (L, m, n) blocks for a single alignment."""
    return einsum("lcij,lc->lij", take(H, psi), z)


def soft_merge_var(H: Var, z: Var, s: Var, psis: np.ndarray) -> Var:
    """Differentiable belief-weighted blocks for candidate alignments.

    ``psis`` has shape (lambda + 1, L); ``s`` has shape (L, lambda + 1).
    """
    k1, L = psis.shape
    Hsel = take(H, psis.reshape(-1))
    Hsel = Hsel.reshape((k1, L) + H.shape[1:])
    gen = einsum("ilcmn,lc->ilmn", Hsel, z)
    return einsum("li,ilmn->lmn", softmax(s, axis=1), gen)


# ---------------------------------------------------------------- accounting


def collapse_mask(usage: np.ndarray, config: BankConfig) -> np.ndarray:
    """Modules whose generated blocks are cheaper to store directly.

    A module used ``u`` times costs ``u*c + c*m*n`` kept and ``u*m*n`` collapsed;
    collapse whenever that does not increase size. This always includes
    modules used at most ``c`` times.
    """
    mn = config.m * config.n
    u = np.asarray(usage)
    return (u > 0) & (u * mn <= config.c * (u + mn))


def parameter_counts(psi: np.ndarray, bank: HypermoduleBank) -> dict[str, int]:
    cfg = bank.config
    mn = cfg.m * cfg.n
    L = len(psi)
    usage = np.bincount(np.asarray(psi), minlength=bank.capacity)
    active = usage > 0
    k_active = int(active.sum())
    if cfg.exact_sharing:
        reparam = k_active * mn
        return {
            "original": L * mn,
            "reparameterized": reparam,
            "inference": reparam,
            "K_active": k_active,
            "K_generic": k_active,
            "L_o": 0,
        }
    collapsed = collapse_mask(usage, cfg)
    kept = active & ~collapsed
    L_o = int(usage[collapsed].sum())
    k_kept = int(kept.sum())
    return {
        "original": L * mn,
        "reparameterized": L * cfg.c + k_active * cfg.c * mn,
        "inference": (L - L_o) * cfg.c + k_kept * cfg.c * mn + L_o * mn,
        "K_active": k_active,
        "K_generic": k_kept,
        "L_o": L_o,
    }


def parsimony_threshold(L: int, config: BankConfig) -> float:
    """Module count below which the reparameterization is smaller than the original."""
    mn = config.m * config.n
    return L * (mn - config.c) / (config.c * mn)


@dataclass
class CollapsedModel:
    """Inference-time parameters: shared modules plus materialized blocks."""

    config: BankConfig
    psi: np.ndarray
    H: dict[int, np.ndarray]
    z: dict[int, np.ndarray]
    raw: dict[int, np.ndarray]

    def blocks(self) -> np.ndarray:
        cfg = self.config
        out = np.empty((len(self.psi), cfg.m, cfg.n))
        for loc, k in enumerate(self.psi):
            if loc in self.raw:
                out[loc] = self.raw[loc]
            else:
                out[loc] = np.einsum("kij,k->ij", self.H[int(k)], self.z[loc])
        return out

    def parameter_count(self) -> int:
        return (
            sum(h.size for h in self.H.values())
            + sum(v.size for v in self.z.values())
            + sum(b.size for b in self.raw.values())
        )


def collapse_for_inference(psi: np.ndarray, bank: HypermoduleBank) -> CollapsedModel:
    psi = np.asarray(psi)
    cfg = bank.config
    usage = np.bincount(psi, minlength=bank.capacity)
    if cfg.exact_sharing:
        H = {int(k): bank.H[k].copy() for k in np.flatnonzero(usage)}
        return CollapsedModel(cfg, psi.copy(), H, {l: np.ones(1) for l in range(len(psi))}, {})
    collapsed = collapse_mask(usage, cfg)
    H, z, raw = {}, {}, {}
    for loc, k in enumerate(psi):
        k = int(k)
        if collapsed[k]:
            raw[loc] = bank.generate_block(psi, loc)
        else:
            H.setdefault(k, bank.H[k].copy())
            z[loc] = bank.z[loc].copy()
    return CollapsedModel(cfg, psi.copy(), H, z, raw)


# ---------------------------------------------------------------- generality


STATS = ("stdev", "mean", "norm", "max")


def tensor_stats(t: np.ndarray) -> dict[str, float]:
    t = np.asarray(t, dtype=float).ravel()
    return {
        "stdev": float(t.std()),
        "mean": float(t.mean()),
        "norm": float(np.linalg.norm(t)),
        "max": float(t.max()),
    }


def mann_whitney(a, b) -> tuple[float, float] | tuple[None, None]:
    """Two-sided Mann-Whitney U (statistic of ``a``) and p-value."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) == 0 or len(b) == 0:
        return None, None
    res = stats.mannwhitneyu(a, b, alternative="two-sided", method="auto")
    return float(res.statistic), float(res.pvalue)


def generality_stats(psi: np.ndarray, bank: HypermoduleBank) -> dict:
    """Generic (used more than c times) vs specific tensors, per parameter group."""
    psi = np.asarray(psi)
    c = bank.config.c
    usage = np.bincount(psi, minlength=bank.capacity)
    modules = np.flatnonzero(usage)
    generic_mod = {int(k) for k in modules if usage[k] > c}
    blocks = bank.generate_all(psi)

    groups = {
        "hypermodules": [(int(k) in generic_mod, bank.H[k]) for k in modules],
        "contexts": [(int(psi[l]) in generic_mod, bank.z[l]) for l in range(len(psi))],
        "linear_maps": [(int(psi[l]) in generic_mod, blocks[l]) for l in range(len(psi))],
    }
    report = {
        "c": c,
        "n_generic_modules": len(generic_mod),
        "n_specific_modules": int(len(modules) - len(generic_mod)),
        "groups": {},
    }
    for name, items in groups.items():
        per = {"generic": [], "specific": []}
        for is_generic, t in items:
            per["generic" if is_generic else "specific"].append(tensor_stats(t))
        entry = {"n_generic": len(per["generic"]), "n_specific": len(per["specific"]), "stats": {}}
        for stat in STATS:
            g = [d[stat] for d in per["generic"]]
            s = [d[stat] for d in per["specific"]]
            u, p = mann_whitney(g, s)
            entry["stats"][stat] = {
                "generic_mean": float(np.mean(g)) if g else None,
                "specific_mean": float(np.mean(s)) if s else None,
                "U": u,
                "p_value": p,
                "defined": p is not None,
            }
        report["groups"][name] = entry
    return report
