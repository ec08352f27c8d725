"""Synthetic session environment.

A small tabular MDP where each decision step yields a Bernoulli click and a
Bernoulli chance that the session ends, plus a fixed stochastic logging
policy.  The module generates reproducible session logs and provides Monte
Carlo ground-truth return samples against which exact solvers and learned
models are verified.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import ValidationError

State = int | tuple[int, ...]

_U64 = (1 << 64) - 1


@dataclass(frozen=True, slots=True)
class Transition:
    """One logged decision step.

    ``next_state`` and ``next_action`` are present exactly when
    ``terminal == 0``; ``next_action`` is the action actually taken at
    ``next_state`` later in the same session.
    """

    session_id: int
    step: int
    state: State
    action: int
    reward: int
    terminal: int
    next_state: State | None = None
    next_action: int | None = None


@dataclass(frozen=True)
class SyntheticMDP:
    """Tabular session MDP with stochastic clicks and stochastic termination.

    ``transition[s, a]`` is the next-state distribution, ``click_prob[s, a]``
    the click (reward) probability, ``term_prob[s, a]`` the probability that
    the session ends after the decision, and ``behavior_policy[s]`` the
    logging policy's action distribution.  All probability rows must sum to 1.
    Arrays are frozen after construction and safe to share across threads.
    """

    n_states: int
    n_actions: int
    transition: np.ndarray        # (S, A, S)
    click_prob: np.ndarray        # (S, A)
    term_prob: np.ndarray         # (S, A)
    behavior_policy: np.ndarray   # (S, A)
    initial_state_dist: np.ndarray  # (S,)

    def __post_init__(self):
        for name in ("transition", "click_prob", "term_prob",
                     "behavior_policy", "initial_state_dist"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def validate(self, term_floor: float = 0.0) -> None:
        """Check shapes, [0, 1] ranges, row sums, and the termination floor.

        Raises ValidationError naming the offending row.
        """
        s, a = self.n_states, self.n_actions
        shapes = {
            "transition": (s, a, s),
            "click_prob": (s, a),
            "term_prob": (s, a),
            "behavior_policy": (s, a),
            "initial_state_dist": (s,),
        }
        for name, want in shapes.items():
            arr = getattr(self, name)
            if arr.shape != want:
                raise ValidationError(
                    f"{name} has shape {arr.shape}, expected {want}")
            if np.any(arr < 0.0) or np.any(arr > 1.0):
                bad = np.unravel_index(
                    int(np.argmax((arr < 0.0) | (arr > 1.0))), arr.shape)
                raise ValidationError(
                    f"{name} entry {bad} = {arr[bad]!r} outside [0, 1]")
        for name, rows in (("transition", self.transition.reshape(s * a, s)),
                           ("behavior_policy", self.behavior_policy)):
            sums = rows.sum(axis=-1)
            off = np.abs(sums - 1.0) > 1e-9
            if off.any():
                i = int(np.argmax(off))
                where = (f"(state={i // a}, action={i % a})"
                         if name == "transition" else f"(state={i})")
                raise ValidationError(
                    f"{name} row {where} sums to {sums[i]!r}, expected 1")
        total = self.initial_state_dist.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(
                f"initial_state_dist sums to {total!r}, expected 1")
        if term_floor > 0.0 and self.term_prob.min() < term_floor:
            bad = np.unravel_index(int(np.argmin(self.term_prob)),
                                   self.term_prob.shape)
            raise ValidationError(
                f"term_prob at (state={bad[0]}, action={bad[1]}) = "
                f"{self.term_prob[bad]!r} below required floor {term_floor!r}")


def random_mdp(n_states: int, n_actions: int, seed: int, *,
               term_range: tuple[float, float] = (0.1, 0.5),
               click_range: tuple[float, float] = (0.05, 0.95),
               alpha: float = 1.0) -> SyntheticMDP:
    """Draw a random MDP: Dirichlet(alpha) probability rows, uniform tables."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    transition = rng.dirichlet(np.full(n_states, alpha), size=(n_states, n_actions))
    behavior = rng.dirichlet(np.full(n_actions, alpha), size=n_states)
    initial = rng.dirichlet(np.full(n_states, alpha))
    click = rng.uniform(*click_range, size=(n_states, n_actions))
    term = rng.uniform(*term_range, size=(n_states, n_actions))
    return SyntheticMDP(n_states, n_actions, transition, click, term,
                        behavior, initial)


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _U64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _U64
    return x ^ (x >> 31)


@dataclass(frozen=True, slots=True)
class StateFeaturizer:
    """Deterministic hash from a state id to a fixed vector of categorical
    feature ids, standing in for rich production-side features."""

    n_features: int
    vocab_size: int
    seed: int

    def features(self, state: int) -> tuple[int, ...]:
        return tuple(
            _splitmix64(_splitmix64(self.seed + k * 0x9E3779B97F4A7C15)
                        ^ (state & _U64)) % self.vocab_size
            for k in range(self.n_features))

    def vocab_sizes(self) -> tuple[int, ...]:
        return (self.vocab_size,) * self.n_features

    def to_manifest(self) -> dict:
        return {"type": "hashed", "n_features": self.n_features,
                "vocab_size": self.vocab_size, "seed": self.seed}

    @classmethod
    def from_manifest(cls, doc: dict) -> "StateFeaturizer":
        return cls(int(doc["n_features"]), int(doc["vocab_size"]),
                   int(doc["seed"]))


def _cum_rows(table: np.ndarray) -> list[list[float]]:
    return [list(np.cumsum(row)) for row in table.reshape(-1, table.shape[-1])]


def iter_sessions(mdp: SyntheticMDP, n_sessions: int, seed: int, *,
                  featurizer: StateFeaturizer | None = None,
                  term_floor: float = 1e-6) -> Iterator[list[Transition]]:
    """Yield one simulated session at a time under the behavior policy.

    Session ``i`` draws from a Philox stream keyed with words ``2i, 2i+1`` of
    ``SeedSequence(seed).generate_state(2 * n_sessions)``, so sessions are
    independent and may be generated in parallel without changing output.
    Per step the draw order is: reward uniform, termination uniform, then on
    continuation the next-state and next-action uniforms.  Output is
    byte-identical for identical ``(mdp, n_sessions, seed)``.
    """
    if n_sessions < 1:
        raise ValidationError(f"n_sessions must be >= 1, got {n_sessions}")
    mdp.validate(term_floor=term_floor)

    a_count = mdp.n_actions
    s_count = mdp.n_states
    cum_init = list(np.cumsum(mdp.initial_state_dist))
    cum_beh = _cum_rows(mdp.behavior_policy)
    cum_trans = _cum_rows(mdp.transition)
    click = mdp.click_prob.tolist()
    term = mdp.term_prob.tolist()
    enc = featurizer.features if featurizer is not None else (lambda s: s)

    keys = np.random.SeedSequence(seed).generate_state(
        2 * n_sessions, np.uint64).reshape(n_sessions, 2)
    # Re-keying one Philox through its state dict matches fresh construction
    # bit for bit and is much cheaper than constructing per session.
    bitgen = np.random.Philox(key=0)
    rng = np.random.Generator(bitgen)
    state_template = bitgen.state

    for sid in range(n_sessions):
        state_template["state"]["key"][:] = keys[sid]
        state_template["state"]["counter"][:] = 0
        state_template["buffer_pos"] = 4
        bitgen.state = state_template

        s = min(bisect_right(cum_init, rng.random()), s_count - 1)
        a = min(bisect_right(cum_beh[s], rng.random()), a_count - 1)
        rows: list[Transition] = []
        step = 0
        while True:
            r = 1 if rng.random() < click[s][a] else 0
            if rng.random() < term[s][a]:
                rows.append(Transition(sid, step, enc(s), a, r, 1))
                break
            s2 = min(bisect_right(cum_trans[s * a_count + a], rng.random()),
                     s_count - 1)
            a2 = min(bisect_right(cum_beh[s2], rng.random()), a_count - 1)
            rows.append(Transition(sid, step, enc(s), a, r, 0, enc(s2), a2))
            s, a = s2, a2
            step += 1
        yield rows


def generate_logs(mdp: SyntheticMDP, n_sessions: int, seed: int, *,
                  featurizer: StateFeaturizer | None = None,
                  term_floor: float = 1e-6) -> list[Transition]:
    """Simulate ``n_sessions`` sessions and return the flattened transitions."""
    out: list[Transition] = []
    for rows in iter_sessions(mdp, n_sessions, seed, featurizer=featurizer,
                              term_floor=term_floor):
        out.extend(rows)
    return out


def mc_return_samples(mdp: SyntheticMDP, state: int, action: int, eta: float,
                      n_rollouts: int, seed: int, *,
                      disc_floor: float = 1e-9) -> np.ndarray:
    """Monte Carlo samples of the termination-aware discounted return.

    Each rollout starts from the forced pair ``(state, action)`` and follows
    the behavior policy.  A sample is
    ``r_0 + sum_{t>=1} survived(t) * prod_{k<=t} gamma'(s_k, a_k) * r_t`` with
    ``gamma'(s, a) = min(1 - term_prob(s, a), eta)``; survival is sampled from
    ``term_prob``.  Rollouts truncate once the running discount product falls
    below ``disc_floor`` (tail bounded by ``disc_floor / (1 - eta)``).

    Vectorized over rollouts with a single seeded stream; per step the draw
    order is reward uniforms, termination uniforms, then next-state and
    next-action uniforms for the survivors.
    """
    if not 0.0 < eta < 1.0:
        raise ValidationError(f"eta must be in (0, 1), got {eta!r}")
    if n_rollouts < 1:
        raise ValidationError(f"n_rollouts must be >= 1, got {n_rollouts}")
    mdp.validate()
    if not 0 <= state < mdp.n_states or not 0 <= action < mdp.n_actions:
        raise ValidationError(f"pair ({state}, {action}) out of range")

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    gamma_prime = np.minimum(1.0 - mdp.term_prob, eta)
    cum_trans = np.cumsum(mdp.transition, axis=-1)
    cum_beh = np.cumsum(mdp.behavior_policy, axis=-1)

    returns = np.zeros(n_rollouts)
    alive = np.arange(n_rollouts)
    s = np.full(n_rollouts, state, dtype=np.int64)
    a = np.full(n_rollouts, action, dtype=np.int64)
    disc = np.ones(n_rollouts)

    while alive.size:
        k = alive.size
        clicked = rng.random(k) < mdp.click_prob[s, a]
        returns[alive] += disc * clicked
        cont = rng.random(k) >= mdp.term_prob[s, a]
        alive, s, a, disc = alive[cont], s[cont], a[cont], disc[cont]
        if not alive.size:
            break
        m = alive.size
        s = np.minimum((cum_trans[s, a] <= rng.random(m)[:, None]).sum(axis=1),
                       mdp.n_states - 1)
        a = np.minimum((cum_beh[s] <= rng.random(m)[:, None]).sum(axis=1),
                       mdp.n_actions - 1)
        disc = disc * gamma_prime[s, a]
        keep = disc >= disc_floor
        if not keep.all():
            alive, s, a, disc = alive[keep], s[keep], a[keep], disc[keep]
    return returns


def empirical_termination_rate(
        logs: Sequence[Transition]) -> dict[tuple[State, int], float]:
    """Per visited (state, action) pair: fraction of transitions ending the
    session.  Pairs never visited are absent."""
    if not logs:
        raise ValidationError("logs are empty")
    visits: dict[tuple[State, int], int] = {}
    ends: dict[tuple[State, int], int] = {}
    for t in logs:
        key = (t.state, t.action)
        visits[key] = visits.get(key, 0) + 1
        ends[key] = ends.get(key, 0) + t.terminal
    return {key: ends[key] / visits[key] for key in visits}
