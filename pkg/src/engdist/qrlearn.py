"""Quantile-regression learner for long-term engagement values.

A shared-trunk embedding MLP with two heads: M quantile outputs for the
return distribution and one sigmoid output for the per-decision termination
probability.  Training minimizes, over logged transitions, the sum of the
asymmetric quantile huber loss against bootstrapped targets from a
periodically copied target network and a binary cross-entropy term on the
terminal flag.  Terminal samples bootstrap to the reward alone; non-terminal
targets are scaled by ``gamma' = min(1 - ell(s', a'), eta)`` where ``ell``
comes from the live model but carries no gradient (only the BCE term trains
the termination head).

All gradients are derived by hand (plain reverse-mode matrix calculus over
numpy arrays) and checked against central finite differences; the optimizer
is a self-contained Adam.  Everything is float64 and deterministic given the
seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataio import batch_indices
from .distdp import quantile_midpoints
from .errors import DataFormatError, TrainingDivergedError, ValidationError
from .simenv import StateFeaturizer, Transition

OBJECTIVES = ("quantile", "squared")


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters for ``train``; defaults follow the deployed settings
    (200 quantiles, kappa 1, Adam at 1.5e-4, target copy every 100 steps)."""

    n_quantiles: int = 200
    kappa: float = 1.0
    eta: float = 0.95
    target_copy_period: int = 100
    batch_size: int = 128
    learning_rate: float = 0.00015
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    seed: int = 0
    grad_clip: float | None = None

    def validate(self) -> None:
        checks = [
            (self.n_quantiles >= 1, f"n_quantiles must be >= 1, got {self.n_quantiles}"),
            (self.kappa > 0.0, f"kappa must be > 0, got {self.kappa!r}"),
            (0.0 < self.eta < 1.0, f"eta must be in (0, 1), got {self.eta!r}"),
            (self.target_copy_period >= 1,
             f"target_copy_period must be >= 1, got {self.target_copy_period}"),
            (self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}"),
            (self.learning_rate > 0.0,
             f"learning_rate must be > 0, got {self.learning_rate!r}"),
            (self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}"),
            (self.grad_clip is None or self.grad_clip > 0.0,
             f"grad_clip must be positive when set, got {self.grad_clip!r}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValidationError(msg)


@dataclass(frozen=True)
class ModelConfig:
    """Network shape: one embedding table per state feature plus one for the
    action, a ReLU trunk, and the two heads."""

    state_vocab_sizes: tuple[int, ...]
    n_actions: int
    embedding_dim: int = 32
    hidden_sizes: tuple[int, ...] = (64, 64)
    term_head: bool = True


# ---------------------------------------------------------------------------
# losses


def _qh_pieces(u: np.ndarray, tau: np.ndarray, kappa: float
               ) -> tuple[np.ndarray, np.ndarray]:
    """Per-term quantile huber loss and its derivative w.r.t. u.

    ``u`` has quantile index on its second-to-last axis (matching ``tau``).
    rho = |tau - 1(u<0)| * huber_kappa(u) / kappa; d rho/d u uses the smooth
    branch limit at the |u| = kappa kinks.
    """
    absu = np.abs(u)
    huber = np.where(absu <= kappa, 0.5 * u * u, kappa * (absu - 0.5 * kappa))
    w = np.abs(tau - (u < 0.0))
    rho = w * huber / kappa
    psi = w * np.clip(u, -kappa, kappa) / kappa
    return rho, psi


def quantile_huber_loss(pred, targets, kappa: float) -> float:
    """Asymmetric huber quantile-regression loss.

    ``pred[i]`` estimates the tau_hat_i quantile; returns
    ``(1/N) sum_i sum_j rho_kappa_tau_i(targets[j] - pred[i])``.
    """
    if kappa <= 0.0:
        raise ValidationError(f"kappa must be > 0, got {kappa!r}")
    pred = np.asarray(pred, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if pred.size == 0 or targets.size == 0:
        raise ValidationError("pred and targets must be non-empty")
    tau = quantile_midpoints(pred.size)[:, None]
    rho, _ = _qh_pieces(targets[None, :] - pred[:, None], tau, kappa)
    return float(rho.sum() / targets.size)


def bce_loss(ell_pred: float, e: int) -> float:
    """Binary cross-entropy ``-e log(ell) - (1-e) log(1-ell)``."""
    if not 0.0 < ell_pred < 1.0:
        raise ValidationError(f"ell_pred must be in (0, 1), got {ell_pred!r}")
    return float(-e * np.log(ell_pred) - (1 - e) * np.log(1.0 - ell_pred))


def _bce_from_logits(logits: np.ndarray, e: np.ndarray) -> np.ndarray:
    # softplus(t) - e*t; cannot hit log(0) whatever the logit
    return np.logaddexp(0.0, logits) - e * logits


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# batched transition arrays


@dataclass(frozen=True)
class TransitionBatch:
    """Column view of transitions; terminal rows carry successor placeholders."""

    states: np.ndarray        # (N, F) int64
    actions: np.ndarray       # (N,) int64
    rewards: np.ndarray       # (N,) float64
    terminal: np.ndarray      # (N,) bool
    next_states: np.ndarray   # (N, F) int64, zeros where terminal
    next_actions: np.ndarray  # (N,) int64, zeros where terminal

    def __len__(self) -> int:
        return self.actions.shape[0]

    @staticmethod
    def _state_row(state) -> tuple[int, ...]:
        return (state,) if isinstance(state, int) else tuple(state)

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]
                         ) -> "TransitionBatch":
        if not transitions:
            raise ValidationError("no transitions given")
        width = len(cls._state_row(transitions[0].state))
        n = len(transitions)
        states = np.zeros((n, width), dtype=np.int64)
        next_states = np.zeros((n, width), dtype=np.int64)
        actions = np.zeros(n, dtype=np.int64)
        next_actions = np.zeros(n, dtype=np.int64)
        rewards = np.zeros(n)
        terminal = np.zeros(n, dtype=bool)
        for i, t in enumerate(transitions):
            row = cls._state_row(t.state)
            if len(row) != width:
                raise DataFormatError(
                    f"transition {i}: state width {len(row)} != {width}")
            states[i] = row
            actions[i] = t.action
            rewards[i] = t.reward
            terminal[i] = bool(t.terminal)
            if t.terminal:
                if t.next_state is not None or t.next_action is not None:
                    raise DataFormatError(
                        f"transition {i}: terminal step carries a successor")
            else:
                if t.next_state is None or t.next_action is None:
                    raise DataFormatError(
                        f"transition {i}: non-terminal step lacks "
                        "next_state/next_action")
                next_states[i] = cls._state_row(t.next_state)
                next_actions[i] = t.next_action
        return cls(states, actions, rewards, terminal, next_states,
                   next_actions)

    def take(self, idx: np.ndarray) -> "TransitionBatch":
        return TransitionBatch(self.states[idx], self.actions[idx],
                               self.rewards[idx], self.terminal[idx],
                               self.next_states[idx], self.next_actions[idx])


def _infer_model_config(batch: TransitionBatch, *, term_head: bool = True,
                        embedding_dim: int = 32,
                        hidden_sizes: tuple[int, ...] = (64, 64)
                        ) -> ModelConfig:
    vocab = np.maximum(batch.states.max(axis=0),
                       batch.next_states.max(axis=0)) + 1
    n_actions = int(max(batch.actions.max(), batch.next_actions.max())) + 1
    return ModelConfig(tuple(int(v) for v in vocab), n_actions,
                       embedding_dim=embedding_dim, hidden_sizes=hidden_sizes,
                       term_head=term_head)


# ---------------------------------------------------------------------------
# model


@dataclass
class _ForwardCache:
    x: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]
    quantiles: np.ndarray
    logits: np.ndarray | None
    states: np.ndarray
    actions: np.ndarray


class EngagementModel:
    """Shared-trunk embedding MLP with a quantile head and an optional
    termination head.

    Embeddings and trunk weights initialize uniform in +-1/sqrt(fan_in);
    both output heads start at zero, so an untrained model predicts all
    quantiles 0 and ell = 0.5.
    """

    def __init__(self, config: ModelConfig, n_quantiles: int,
                 params: dict[str, np.ndarray],
                 feature_map: StateFeaturizer | None = None):
        self.config = config
        self.n_quantiles = n_quantiles
        self.params = params
        self.feature_map = feature_map

    @property
    def has_term_head(self) -> bool:
        return self.config.term_head

    @classmethod
    def initialize(cls, config: ModelConfig, n_quantiles: int, seed: int,
                   feature_map: StateFeaturizer | None = None
                   ) -> "EngagementModel":
        if n_quantiles < 1:
            raise ValidationError(
                f"n_quantiles must be >= 1, got {n_quantiles}")
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        d = config.embedding_dim
        params: dict[str, np.ndarray] = {}
        bound = 1.0 / np.sqrt(d)
        for k, vocab in enumerate(config.state_vocab_sizes):
            params[f"state_embedding_{k}"] = rng.uniform(
                -bound, bound, (vocab, d))
        params["action_embedding"] = rng.uniform(
            -bound, bound, (config.n_actions, d))
        fan_in = (len(config.state_vocab_sizes) + 1) * d
        for i, width in enumerate(config.hidden_sizes):
            bound = 1.0 / np.sqrt(fan_in)
            params[f"trunk_{i}_weight"] = rng.uniform(
                -bound, bound, (fan_in, width))
            params[f"trunk_{i}_bias"] = np.zeros(width)
            fan_in = width
        params["quantile_head_weight"] = np.zeros((fan_in, n_quantiles))
        params["quantile_head_bias"] = np.zeros(n_quantiles)
        if config.term_head:
            params["termination_head_weight"] = np.zeros((fan_in, 1))
            params["termination_head_bias"] = np.zeros(1)
        return cls(config, n_quantiles, params, feature_map)

    def tensor_names(self) -> list[str]:
        names = [f"state_embedding_{k}"
                 for k in range(len(self.config.state_vocab_sizes))]
        names.append("action_embedding")
        for i in range(len(self.config.hidden_sizes)):
            names += [f"trunk_{i}_weight", f"trunk_{i}_bias"]
        names += ["quantile_head_weight", "quantile_head_bias"]
        if self.config.term_head:
            names += ["termination_head_weight", "termination_head_bias"]
        return names

    def copy(self) -> "EngagementModel":
        return EngagementModel(
            self.config, self.n_quantiles,
            {k: v.copy() for k, v in self.params.items()}, self.feature_map)

    def _embed(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        cfg = self.config
        if states.ndim != 2 or states.shape[1] != len(cfg.state_vocab_sizes):
            raise ValidationError(
                f"states must be (B, {len(cfg.state_vocab_sizes)}), "
                f"got {states.shape}")
        cols = []
        for k, vocab in enumerate(cfg.state_vocab_sizes):
            ids = states[:, k]
            if ids.min() < 0 or ids.max() >= vocab:
                raise IndexError(
                    f"state feature {k} id outside [0, {vocab})")
            cols.append(self.params[f"state_embedding_{k}"][ids])
        if actions.min() < 0 or actions.max() >= cfg.n_actions:
            raise IndexError(f"action id outside [0, {cfg.n_actions})")
        cols.append(self.params["action_embedding"][actions])
        return np.concatenate(cols, axis=1)

    def _forward_cached(self, states: np.ndarray, actions: np.ndarray
                        ) -> _ForwardCache:
        x = self._embed(states, actions)
        pre, post = [], []
        h = x
        for i in range(len(self.config.hidden_sizes)):
            z = h @ self.params[f"trunk_{i}_weight"] + self.params[f"trunk_{i}_bias"]
            pre.append(z)
            h = np.maximum(z, 0.0)
            post.append(h)
        q = h @ self.params["quantile_head_weight"] + self.params["quantile_head_bias"]
        logits = None
        if self.config.term_head:
            logits = (h @ self.params["termination_head_weight"]
                      + self.params["termination_head_bias"])[:, 0]
        return _ForwardCache(x, pre, post, q, logits, states, actions)

    def forward_batch(self, states: np.ndarray, actions: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray | None]:
        """Quantile outputs (B, M) and termination logits (B,) or None."""
        cache = self._forward_cached(np.asarray(states, dtype=np.int64),
                                     np.asarray(actions, dtype=np.int64))
        return cache.quantiles, cache.logits

    def forward(self, state, action: int
                ) -> tuple[np.ndarray, float | None]:
        """Single-pair evaluation: (M quantile values, termination probability).

        Deterministic and safe for concurrent readers.
        """
        row = TransitionBatch._state_row(state)
        q, logits = self.forward_batch(np.array([row], dtype=np.int64),
                                       np.array([action], dtype=np.int64))
        ell = float(_sigmoid(logits)[0]) if logits is not None else None
        return q[0].copy(), ell

    def ell_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Termination probabilities for a batch (requires the term head)."""
        if not self.config.term_head:
            raise ValidationError("model has no termination head")
        _, logits = self.forward_batch(states, actions)
        return _sigmoid(logits)


def _backward(model: EngagementModel, cache: _ForwardCache,
              d_quantiles: np.ndarray, d_logits: np.ndarray | None
              ) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its derivatives w.r.t. the heads."""
    grads: dict[str, np.ndarray] = {}
    h_last = cache.post[-1] if cache.post else cache.x
    grads["quantile_head_weight"] = h_last.T @ d_quantiles
    grads["quantile_head_bias"] = d_quantiles.sum(axis=0)
    dh = d_quantiles @ model.params["quantile_head_weight"].T
    if d_logits is not None:
        dl = d_logits[:, None]
        grads["termination_head_weight"] = h_last.T @ dl
        grads["termination_head_bias"] = dl.sum(axis=0)
        dh = dh + dl @ model.params["termination_head_weight"].T
    elif model.config.term_head:
        grads["termination_head_weight"] = np.zeros_like(
            model.params["termination_head_weight"])
        grads["termination_head_bias"] = np.zeros_like(
            model.params["termination_head_bias"])
    for i in reversed(range(len(model.config.hidden_sizes))):
        dz = dh * (cache.pre[i] > 0.0)
        below = cache.post[i - 1] if i > 0 else cache.x
        grads[f"trunk_{i}_weight"] = below.T @ dz
        grads[f"trunk_{i}_bias"] = dz.sum(axis=0)
        dh = dz @ model.params[f"trunk_{i}_weight"].T
    d = model.config.embedding_dim
    for k, vocab in enumerate(model.config.state_vocab_sizes):
        g = np.zeros((vocab, d))
        np.add.at(g, cache.states[:, k], dh[:, k * d:(k + 1) * d])
        grads[f"state_embedding_{k}"] = g
    g = np.zeros((model.config.n_actions, d))
    offset = len(model.config.state_vocab_sizes) * d
    np.add.at(g, cache.actions, dh[:, offset:offset + d])
    grads["action_embedding"] = g
    return grads


# ---------------------------------------------------------------------------
# targets and the joint objective


def compute_targets(transitions: Sequence[Transition],
                    target_model: EngagementModel,
                    live_model: EngagementModel, eta: float) -> np.ndarray:
    """Per-sample target vectors (B, M) for the quantile head.

    Terminal samples get the reward repeated M times; non-terminal samples
    get ``r + gamma' * beta'(s', a')`` with ``beta'`` from the target model
    and ``gamma' = min(1 - ell(s', a'), eta)`` from the live model's
    termination head (constant eta when the model has none).  Targets carry
    no gradient.
    """
    return _targets_from_arrays(TransitionBatch.from_transitions(transitions),
                                target_model, live_model, eta)


def _targets_from_arrays(batch: TransitionBatch,
                         target_model: EngagementModel,
                         live_model: EngagementModel,
                         eta: float) -> np.ndarray:
    m = target_model.n_quantiles
    targets = np.repeat(batch.rewards[:, None], m, axis=1)
    boot = ~batch.terminal
    if boot.any():
        ns, na = batch.next_states[boot], batch.next_actions[boot]
        beta_next, _ = target_model.forward_batch(ns, na)
        if live_model.has_term_head:
            gp = np.minimum(1.0 - live_model.ell_batch(ns, na), eta)
        else:
            gp = np.full(int(boot.sum()), eta)
        targets[boot] = batch.rewards[boot, None] + gp[:, None] * beta_next
    return targets


def _joint_loss(model: EngagementModel, batch: TransitionBatch,
                targets: np.ndarray, kappa: float, objective: str,
                qh_mask: np.ndarray | None = None,
                sample_mask: np.ndarray | None = None,
                want_grads: bool = True
                ) -> tuple[float, float, dict[str, np.ndarray] | None]:
    """Mean-over-batch joint objective (value term + BCE term) and gradients.

    The optional masks zero out individual quantile-huber terms or whole
    samples while keeping the 1/B and 1/M normalizations; they exist for
    finite-difference checking near kinks.
    """
    n = len(batch)
    cache = model._forward_cached(batch.states, batch.actions)
    sm = np.ones(n) if sample_mask is None else sample_mask

    if objective == "quantile":
        m = model.n_quantiles
        tau = quantile_midpoints(m)[None, :, None]
        u = targets[:, None, :] - cache.quantiles[:, :, None]  # (B, M, M')
        rho, psi = _qh_pieces(u, tau, kappa)
        if qh_mask is not None:
            rho = rho * qh_mask
            psi = psi * qh_mask
        per_sample = rho.sum(axis=(1, 2)) / targets.shape[1]
        value_loss = float((sm * per_sample).sum() / n)
        d_q = -(sm[:, None] * psi.sum(axis=2)) / (n * targets.shape[1])
    elif objective == "squared":
        diff = cache.quantiles - targets
        value_loss = float((sm * (diff * diff).sum(axis=1)).sum() / n)
        d_q = 2.0 * sm[:, None] * diff / n
    else:
        raise ValidationError(
            f"objective must be one of {OBJECTIVES}, got {objective!r}")

    d_logits = None
    bce = 0.0
    if cache.logits is not None:
        e = batch.terminal.astype(np.float64)
        bce_terms = _bce_from_logits(cache.logits, e)
        bce = float((sm * bce_terms).sum() / n)
        d_logits = sm * (_sigmoid(cache.logits) - e) / n

    grads = _backward(model, cache, d_q, d_logits) if want_grads else None
    return value_loss, bce, grads


# ---------------------------------------------------------------------------
# optimizer and training loop


class Adam:
    """Standard Adam with bias correction; optional global-norm gradient clip."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 grad_clip: float | None = None):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> None:
        if self.grad_clip is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (
                np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainResult:
    model: EngagementModel
    trace: list[tuple[int, float, float, float]]  # step, value, bce, total


def train(logs: Sequence[Transition], config: TrainingConfig, *,
          model_config: ModelConfig | None = None,
          objective: str = "quantile",
          feature_map: StateFeaturizer | None = None,
          on_step: Callable[[int, EngagementModel, EngagementModel], None]
          | None = None) -> TrainResult:
    """Fit the model on logged transitions.

    Initializes from the seed, copies live to target, then walks seeded
    shuffled minibatches; the target network is refreshed every
    ``target_copy_period`` steps (after the update).  Returns the final model
    and the per-step (value_loss, bce_loss, total) trace.  Deterministic
    given (logs, config): two identical runs produce bitwise-equal traces and
    parameters.  Raises TrainingDivergedError on a non-finite loss.
    """
    config.validate()
    if objective not in OBJECTIVES:
        raise ValidationError(
            f"objective must be one of {OBJECTIVES}, got {objective!r}")
    data = TransitionBatch.from_transitions(logs)
    if model_config is None:
        model_config = _infer_model_config(data)
    model = EngagementModel.initialize(model_config, config.n_quantiles,
                                       config.seed, feature_map)
    target = model.copy()
    opt = Adam(model.params, config.learning_rate, config.adam_beta1,
               config.adam_beta2, config.adam_eps, config.grad_clip)

    trace: list[tuple[int, float, float, float]] = []
    step = 0
    for idx in batch_indices(len(data), config.batch_size, config.seed,
                             config.epochs):
        batch = data.take(idx)
        targets = _targets_from_arrays(batch, target, model, config.eta)
        value_loss, bce, grads = _joint_loss(model, batch, targets,
                                             config.kappa, objective)
        total = value_loss + bce
        step += 1
        if not np.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite loss at step {step}", step)
        opt.step(model.params, grads)
        trace.append((step, value_loss, bce, total))
        if step % config.target_copy_period == 0:
            target = model.copy()
        if on_step is not None:
            on_step(step, model, target)
    return TrainResult(model, trace)


# ---------------------------------------------------------------------------
# gradient verification


def gradient_check(model: EngagementModel, transitions: Sequence[Transition],
                   config: TrainingConfig, *, objective: str = "quantile",
                   fd_step: float = 1e-4, kink_tol: float = 1e-3) -> float:
    """Max relative error between analytic and central finite-difference
    gradients of the joint objective, ``|a - n| / max(1, |a| + |n|)``.

    Targets are computed once from the model and frozen, mirroring training
    (no gradient flows through targets).  Terms whose residual sits within
    ``kink_tol`` of the +-kappa huber kinks and samples with a ReLU
    preactivation within ``kink_tol`` of zero are excluded from the compared
    objective on both sides, since the loss is not twice differentiable there.
    """
    if len(transitions) > 8:
        raise ValidationError("gradient_check expects a batch of <= 8 samples")
    batch = TransitionBatch.from_transitions(transitions)
    targets = _targets_from_arrays(batch, model, model, config.eta)

    cache = model._forward_cached(batch.states, batch.actions)
    sample_mask = np.ones(len(batch))
    for z in cache.pre:
        sample_mask *= (np.abs(z) >= kink_tol).all(axis=1)
    qh_mask = None
    if objective == "quantile":
        u = targets[:, None, :] - cache.quantiles[:, :, None]
        qh_mask = (np.abs(np.abs(u) - config.kappa) >= kink_tol).astype(float)

    _, _, grads = _joint_loss(model, batch, targets, config.kappa, objective,
                              qh_mask, sample_mask)

    def objective_value() -> float:
        v, b, _ = _joint_loss(model, batch, targets, config.kappa, objective,
                              qh_mask, sample_mask, want_grads=False)
        return v + b

    worst = 0.0
    for name in model.tensor_names():
        arr = model.params[name]
        grad = grads[name]
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = arr[ix]
            arr[ix] = orig + fd_step
            f_plus = objective_value()
            arr[ix] = orig - fd_step
            f_minus = objective_value()
            arr[ix] = orig
            numeric = (f_plus - f_minus) / (2.0 * fd_step)
            analytic = grad[ix]
            rel = abs(analytic - numeric) / max(1.0, abs(analytic) + abs(numeric))
            worst = max(worst, rel)
    return worst
