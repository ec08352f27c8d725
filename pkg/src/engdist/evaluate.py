"""Session-level evaluation of scoring policies and learned models.

Runs ranking policies inside the synthetic environment and reports
engagement analogues (clicks per session, impressions per session, CTR),
plus comparisons of a learned model against the exact solver and Monte
Carlo oracles.
"""

from __future__ import annotations

import numpy as np
from scipy import stats

from .distdp import DiscountSpec, solve_fixed_point, wasserstein, quantile_midpoints
from .errors import ValidationError
from .qrlearn import EngagementModel
from .simenv import SyntheticMDP, Transition, empirical_termination_rate, mc_return_samples


def _model_state_row(model: EngagementModel, state: int) -> tuple[int, ...]:
    if model.feature_map is not None:
        return model.feature_map.features(state)
    return (state,)


def model_score_table(model: EngagementModel, n_states: int,
                      n_actions: int) -> np.ndarray:
    """Engagement score (mean of quantile outputs) for every pair."""
    states = np.array([_model_state_row(model, s) for s in range(n_states)],
                      dtype=np.int64)
    grid_s = np.repeat(states, n_actions, axis=0)
    grid_a = np.tile(np.arange(n_actions, dtype=np.int64), n_states)
    q, _ = model.forward_batch(grid_s, grid_a)
    return q.mean(axis=1).reshape(n_states, n_actions)


def model_ell_table(model: EngagementModel, n_states: int,
                    n_actions: int) -> np.ndarray:
    """Predicted termination probability for every pair."""
    states = np.array([_model_state_row(model, s) for s in range(n_states)],
                      dtype=np.int64)
    grid_s = np.repeat(states, n_actions, axis=0)
    grid_a = np.tile(np.arange(n_actions, dtype=np.int64), n_states)
    return model.ell_batch(grid_s, grid_a).reshape(n_states, n_actions)


def greedy_policy(scores: np.ndarray) -> np.ndarray:
    """Top-ranked action per state (ties to the lowest action id)."""
    return np.argmax(scores, axis=1).astype(np.int64)


def simulate_policy(mdp: SyntheticMDP, n_sessions: int, seed: int,
                    policy: np.ndarray | None = None) -> dict[str, float]:
    """Simulate sessions under a deterministic per-state policy (or the
    behavior policy when ``policy`` is None) and report per-session clicks
    (vv), impressions (imp), and their ratio (ctr).

    Vectorized over sessions from one seeded stream; draw order per step is
    [action uniforms when following the behavior policy,] click uniforms,
    termination uniforms, then next-state uniforms for the survivors.
    """
    if n_sessions < 1:
        raise ValidationError(f"n_sessions must be >= 1, got {n_sessions}")
    mdp.validate(term_floor=1e-9)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    cum_trans = np.cumsum(mdp.transition, axis=-1)
    cum_beh = np.cumsum(mdp.behavior_policy, axis=-1)

    s = np.minimum((np.cumsum(mdp.initial_state_dist)
                    <= rng.random(n_sessions)[:, None]).sum(axis=1),
                   mdp.n_states - 1)
    clicks = 0
    impressions = 0
    while s.size:
        k = s.size
        if policy is None:
            a = np.minimum((cum_beh[s] <= rng.random(k)[:, None]).sum(axis=1),
                           mdp.n_actions - 1)
        else:
            a = policy[s]
        impressions += k
        clicks += int((rng.random(k) < mdp.click_prob[s, a]).sum())
        cont = rng.random(k) >= mdp.term_prob[s, a]
        s, a = s[cont], a[cont]
        if not s.size:
            break
        s = np.minimum((cum_trans[s, a] <= rng.random(s.size)[:, None])
                       .sum(axis=1), mdp.n_states - 1)
    return {"vv": clicks / n_sessions, "imp": impressions / n_sessions,
            "ctr": clicks / impressions, "sessions": n_sessions}


def kendall_rank_agreement(scores: np.ndarray,
                           oracle_scores: np.ndarray) -> float:
    """Mean per-state Kendall tau between a score table and the oracle's."""
    taus = []
    for s in range(scores.shape[0]):
        tau = stats.kendalltau(scores[s], oracle_scores[s])[0]
        if np.isfinite(tau):
            taus.append(tau)
    return float(np.mean(taus)) if taus else float("nan")


def calibration_report(model: EngagementModel, logs: list[Transition],
                       min_visits: int = 1) -> dict[str, float]:
    """Compare the termination head against empirical termination rates on
    pairs with at least ``min_visits`` visits."""
    rates = empirical_termination_rate(logs)
    visits: dict = {}
    for t in logs:
        visits[(t.state, t.action)] = visits.get((t.state, t.action), 0) + 1
    errors = []
    for (state, action), rate in rates.items():
        if visits[(state, action)] < min_visits:
            continue
        _, ell = model.forward(state, action)
        errors.append(abs(ell - rate))
    if not errors:
        return {"pairs": 0, "max_abs_error": float("nan"),
                "mean_abs_error": float("nan")}
    return {"pairs": len(errors), "max_abs_error": float(max(errors)),
            "mean_abs_error": float(np.mean(errors))}


def oracle_comparison(model: EngagementModel, mdp: SyntheticMDP, eta: float,
                      *, dp_tol: float = 1e-8, dp_max_iter: int = 2000,
                      mc_rollouts: int = 0, seed: int = 0) -> dict:
    """Model-vs-oracle metrics on a known MDP.

    The oracle is the data-terminal fixed point (the distribution a learner
    on terminal-flagged logs converges to).  Reports the absolute error of
    the engagement score against the oracle mean, rank agreement per state,
    termination-head error against the true table, and optionally the W1
    distance between model quantiles and Monte Carlo return samples.
    """
    disc = DiscountSpec.for_mdp(mdp, eta, "data-terminal")
    fp = solve_fixed_point(mdp, disc, model.n_quantiles, dp_tol, dp_max_iter)
    oracle_means = fp.table.means()
    g = model_score_table(model, mdp.n_states, mdp.n_actions)
    err = np.abs(g - oracle_means)
    out = {
        "mean_value_error_max": float(err.max()),
        "mean_value_error_mean": float(err.mean()),
        "kendall_tau_mean": kendall_rank_agreement(g, oracle_means),
        "dp_iterations": fp.iterations,
    }
    if model.has_term_head:
        ell_err = np.abs(model_ell_table(model, mdp.n_states, mdp.n_actions)
                         - mdp.term_prob)
        out["ell_vs_mdp_max"] = float(ell_err.max())
        out["ell_vs_mdp_mean"] = float(ell_err.mean())
    if mc_rollouts > 0:
        tau = quantile_midpoints(model.n_quantiles)
        w1s = []
        for s in range(mdp.n_states):
            for a in range(mdp.n_actions):
                samples = mc_return_samples(
                    mdp, s, a, eta, mc_rollouts,
                    seed + 7919 * (s * mdp.n_actions + a))
                empirical = np.quantile(samples, tau, method="inverted_cdf")
                quantiles, _ = model.forward(s, a)
                w1s.append(wasserstein(quantiles, empirical, 1.0))
        out["w1_to_mc_max"] = float(max(w1s))
        out["w1_to_mc_mean"] = float(np.mean(w1s))
        out["mc_rollouts"] = mc_rollouts
    return out


def evaluate_model(model: EngagementModel, *, mdp: SyntheticMDP | None = None,
                   logs: list[Transition] | None = None, eta: float = 0.95,
                   w: float = 1.0, n_sessions: int = 10000, seed: int = 0,
                   mc_rollouts: int = 0, min_visits: int = 100) -> dict:
    """Full evaluation report; requires an MDP, logs, or both."""
    if mdp is None and logs is None:
        raise ValidationError("evaluation needs an MDP spec, logs, or both")
    report: dict = {}
    if mdp is not None:
        g = model_score_table(model, mdp.n_states, mdp.n_actions)
        policies = {
            "behavior": None,
            "ctr_greedy": greedy_policy(mdp.click_prob),
            "model": greedy_policy(g),
            "blended": greedy_policy(mdp.click_prob + w * g),
        }
        report["ranking_eval"] = {
            name: simulate_policy(mdp, n_sessions, seed, policy)
            for name, policy in policies.items()}
        report["oracle_comparison"] = oracle_comparison(
            model, mdp, eta, mc_rollouts=mc_rollouts, seed=seed)
    if logs is not None and model.has_term_head:
        report["calibration"] = calibration_report(model, logs, min_visits)
    return report
