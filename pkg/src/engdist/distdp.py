"""Exact quantile-distribution dynamic programming on tabular session MDPs.

Value distributions are represented by M equally weighted atoms placed at the
quantile midpoints tau_hat_i = (i - 1/2) / M.  The evaluation operator forms,
for every (state, action), the exact finite mixture of
``reward + gamma' * atom`` over reward outcomes, successor pairs, and atoms,
then projects back to M atoms by evaluating the mixture's inverse CDF at the
midpoints (infimum convention, ties toward the smaller value).

Three operator modes are exposed:

* ``constant-gamma``      -- gamma' == eta everywhere (plain discounting);
* ``termination-aware``   -- gamma'(s, a) = min(1 - ell(s, a), eta), applied
  at the successor pair;
* ``data-terminal``       -- termination-aware discounting plus an explicit
  terminal branch of weight ell(s, a) whose value is the reward alone.  This
  is the fixed point of a learner trained on terminal-flagged logs and is
  what the Monte Carlo oracle in ``simenv`` samples from.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, ValidationError
from .simenv import SyntheticMDP

MODES = ("constant-gamma", "termination-aware", "data-terminal")


def quantile_midpoints(m: int) -> np.ndarray:
    """Midpoints tau_hat_i = (i - 1/2) / m for i = 1..m."""
    if m < 1:
        raise ValidationError(f"quantile count must be >= 1, got {m}")
    return (np.arange(m) + 0.5) / m


def wasserstein(d1, d2, p: float = 1.0) -> float:
    """W_p distance between two equally weighted atom sets of the same size.

    Both atom vectors are sorted; returns ``(mean |x_i - y_i|^p)^(1/p)``, or
    the max absolute difference for ``p = inf``.
    """
    a = np.sort(np.asarray(d1, dtype=np.float64).ravel())
    b = np.sort(np.asarray(d2, dtype=np.float64).ravel())
    if a.shape != b.shape:
        raise ValidationError(
            f"atom counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.size == 0:
        raise ValidationError("empty distributions")
    diffs = np.abs(a - b)
    if np.isinf(p):
        return float(diffs.max())
    if p < 1:
        raise ValidationError(f"order p must be >= 1 or inf, got {p!r}")
    if p == 1:
        return float(diffs.mean())
    return float((diffs ** p).mean() ** (1.0 / p))


@dataclass(frozen=True)
class ValueTable:
    """One quantile distribution per (state, action): atoms[s, a, i] estimates
    the tau_hat_i quantile.  Canonical form is sorted along the last axis."""

    atoms: np.ndarray  # (S, A, M)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.atoms, dtype=np.float64)
        if arr.ndim != 3:
            raise ValidationError(f"atoms must be (S, A, M), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("atoms contain non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "atoms", arr)

    @property
    def n_states(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_actions(self) -> int:
        return self.atoms.shape[1]

    @property
    def n_quantiles(self) -> int:
        return self.atoms.shape[2]

    @classmethod
    def zeros(cls, n_states: int, n_actions: int, m: int) -> "ValueTable":
        return cls(np.zeros((n_states, n_actions, m)))

    def means(self) -> np.ndarray:
        """Expected value per pair: the mean of the atoms (order-invariant)."""
        return self.atoms.mean(axis=-1)


def sup_wasserstein(z1: ValueTable, z2: ValueTable, p: float = 1.0) -> float:
    """Maximum of ``wasserstein`` over all (state, action) pairs."""
    if z1.atoms.shape != z2.atoms.shape:
        raise ValidationError(
            f"table shapes differ: {z1.atoms.shape} vs {z2.atoms.shape}")
    a = np.sort(z1.atoms, axis=-1)
    b = np.sort(z2.atoms, axis=-1)
    diffs = np.abs(a - b)
    if np.isinf(p):
        return float(diffs.max())
    if p < 1:
        raise ValidationError(f"order p must be >= 1 or inf, got {p!r}")
    if p == 1:
        return float(diffs.mean(axis=-1).max())
    return float((diffs ** p).mean(axis=-1).max() ** (1.0 / p))


@dataclass(frozen=True)
class DiscountSpec:
    """Effective per-pair discount specification.

    ``gamma'`` is the constant ``eta`` in constant-gamma mode and
    ``min(1 - ell, eta)`` otherwise; ``ell_table`` is ignored in
    constant-gamma mode.  See the module docstring for the data-terminal
    variant.
    """

    eta: float
    mode: str = "termination-aware"
    ell_table: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValidationError(f"eta must be in (0, 1), got {self.eta!r}")
        if self.mode not in MODES:
            raise ValidationError(
                f"mode must be one of {MODES}, got {self.mode!r}")
        if self.ell_table is not None:
            arr = np.ascontiguousarray(self.ell_table, dtype=np.float64)
            if arr.ndim != 2:
                raise ValidationError("ell_table must be 2-D (states, actions)")
            if np.any(arr < 0.0) or np.any(arr > 1.0):
                raise ValidationError("ell_table entries must lie in [0, 1]")
            arr.flags.writeable = False
            object.__setattr__(self, "ell_table", arr)
        elif self.mode != "constant-gamma":
            raise ValidationError(f"mode {self.mode!r} requires an ell_table")

    @classmethod
    def constant(cls, eta: float) -> "DiscountSpec":
        return cls(eta=eta, mode="constant-gamma")

    @classmethod
    def for_mdp(cls, mdp: SyntheticMDP, eta: float,
                mode: str = "termination-aware") -> "DiscountSpec":
        """Use the MDP's own termination table as ell."""
        ell = None if mode == "constant-gamma" else mdp.term_prob
        return cls(eta=eta, mode=mode, ell_table=ell)

    def gamma_prime(self, n_states: int, n_actions: int) -> np.ndarray:
        if self.mode == "constant-gamma":
            return np.full((n_states, n_actions), self.eta)
        if self.ell_table.shape != (n_states, n_actions):
            raise ValidationError(
                f"ell_table shape {self.ell_table.shape} does not match "
                f"({n_states}, {n_actions})")
        return np.minimum(1.0 - self.ell_table, self.eta)


def apply_operator(table: ValueTable, mdp: SyntheticMDP,
                   disc: DiscountSpec) -> ValueTable:
    """One exact sweep of the distributional evaluation operator.

    For each (s, a) the output atoms are the inverse CDF, at the quantile
    midpoints, of the finite mixture of ``r + gamma'(s', a') * atom_j`` over
    reward outcomes (click probabilities), successors (transition rows),
    next actions (behavior policy), and atoms (weight 1/M); the data-terminal
    mode adds a branch of weight ``ell(s, a)`` valued at the reward alone.
    Output atoms are sorted ascending.
    """
    s_n, a_n, m = table.atoms.shape
    if (s_n, a_n) != (mdp.n_states, mdp.n_actions):
        raise ValidationError(
            f"value table is {s_n}x{a_n}, MDP is {mdp.n_states}x{mdp.n_actions}")
    gp = disc.gamma_prime(s_n, a_n)
    tau = quantile_midpoints(m)
    data_terminal = disc.mode == "data-terminal"

    # The scaled successor atoms are shared by every (s, a); sort them once.
    flat = (gp[:, :, None] * table.atoms).reshape(-1)
    order = np.argsort(flat, kind="stable")
    sv = flat[order]
    merged = np.concatenate([sv, 1.0 + sv])
    morder = np.argsort(merged, kind="stable")
    values = merged[morder]
    if data_terminal:
        term_pos = np.searchsorted(values, [0.0, 1.0], side="left")
        values_out = np.insert(values, term_pos, [0.0, 1.0])
    else:
        values_out = values
    last = values_out.size - 1

    # successor weights P(s'|s,a) * b(a'|s'), flattened over (s', a')
    succ_w = (mdp.transition[:, :, :, None]
              * mdp.behavior_policy[None, None, :, :]).reshape(s_n, a_n, -1)

    out = np.empty((s_n, a_n, m))
    for s in range(s_n):
        for a in range(a_n):
            w = np.repeat(succ_w[s, a], m) / m
            ws = w[order]
            p_click = mdp.click_prob[s, a]
            wm = np.concatenate([(1.0 - p_click) * ws, p_click * ws])[morder]
            if data_terminal:
                ell = disc.ell_table[s, a]
                wm = (1.0 - ell) * wm
                wm = np.insert(wm, term_pos,
                               [ell * (1.0 - p_click), ell * p_click])
            cdf = np.cumsum(wm)
            idx = np.searchsorted(cdf, tau, side="left")
            out[s, a] = values_out[np.minimum(idx, last)]
    return ValueTable(out)


@dataclass(frozen=True)
class FixedPointResult:
    """Converged table plus the per-sweep d_inf trace."""

    table: ValueTable
    distances: list[float]

    @property
    def iterations(self) -> int:
        return len(self.distances)


def solve_fixed_point(mdp: SyntheticMDP, disc: DiscountSpec, m: int,
                      tol: float, max_iter: int = 1000) -> FixedPointResult:
    """Iterate the operator from the all-zeros table until the d_inf change
    between consecutive sweeps drops below ``tol``.

    Raises ConvergenceError (carrying the trace) if ``max_iter`` is exhausted.
    """
    if tol <= 0.0:
        raise ValidationError(f"tol must be > 0, got {tol!r}")
    if max_iter < 1:
        raise ValidationError(f"max_iter must be >= 1, got {max_iter}")
    z = ValueTable.zeros(mdp.n_states, mdp.n_actions, m)
    trace: list[float] = []
    for _ in range(max_iter):
        z_next = apply_operator(z, mdp, disc)
        d = sup_wasserstein(z, z_next, np.inf)
        trace.append(d)
        z = z_next
        if d < tol:
            return FixedPointResult(z, trace)
    raise ConvergenceError(
        f"no fixed point within {max_iter} sweeps "
        f"(last d_inf change {trace[-1]!r}, tol {tol!r})", trace)


def check_contraction(mdp: SyntheticMDP, disc: DiscountSpec, trials: int,
                      seed: int, *, p: float = np.inf, m: int = 32,
                      atom_range: tuple[float, float] | None = None
                      ) -> list[tuple[float, float]]:
    """Empirical contraction probe.

    Per trial, draw two random value tables (atoms uniform over
    ``atom_range``, default ``[0, 1/(1-eta)]`` to cover the reachable range,
    then sorted), apply the operator to both, and record the sup-Wasserstein
    distance before and after.
    """
    if trials < 1:
        raise ValidationError(f"trials must be >= 1, got {trials}")
    lo, hi = atom_range if atom_range is not None else (
        0.0, 1.0 / (1.0 - disc.eta))
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    shape = (mdp.n_states, mdp.n_actions, m)
    pairs: list[tuple[float, float]] = []
    for _ in range(trials):
        z1 = ValueTable(np.sort(rng.uniform(lo, hi, shape), axis=-1))
        z2 = ValueTable(np.sort(rng.uniform(lo, hi, shape), axis=-1))
        before = sup_wasserstein(z1, z2, p)
        after = sup_wasserstein(apply_operator(z1, mdp, disc),
                                apply_operator(z2, mdp, disc), p)
        pairs.append((before, after))
    return pairs


def max_contraction_ratio(pairs: list[tuple[float, float]]) -> float:
    """Largest after/before ratio, skipping zero-distance inputs."""
    ratios = [after / before for before, after in pairs if before > 0.0]
    return max(ratios, default=0.0)
