import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from engdist.errors import (DataFormatError, TrainingDivergedError,
                            ValidationError)
from engdist.qrlearn import (Adam, EngagementModel, ModelConfig,
                             TrainingConfig, bce_loss, compute_targets,
                             gradient_check, quantile_huber_loss, train)
from engdist.simenv import (Transition, empirical_termination_rate,
                            generate_logs, random_mdp)
from engdist.distdp import DiscountSpec, solve_fixed_point


def stub_model(quantile_bias, term_logit=None, n_states=4, n_actions=4):
    """Model whose outputs are exactly the given head biases (zero weights)."""
    quantile_bias = np.asarray(quantile_bias, dtype=np.float64)
    config = ModelConfig((n_states,), n_actions, embedding_dim=2,
                         hidden_sizes=(3,), term_head=term_logit is not None)
    model = EngagementModel.initialize(config, quantile_bias.size, seed=0)
    for name, arr in model.params.items():
        model.params[name] = np.zeros_like(arr)
    model.params["quantile_head_bias"] = quantile_bias.copy()
    if term_logit is not None:
        model.params["termination_head_bias"] = np.array([float(term_logit)])
    return model


# ---------------------------------------------------------------------------
# quantile huber loss


def test_quantile_huber_zero_at_exact_fit():
    assert quantile_huber_loss([2.5], [2.5], kappa=1.0) == 0.0


def test_quantile_huber_hand_value_above():
    # M=1, tau_hat=0.5, pred 0, target 2: huber = 1 * (2 - 0.5) = 1.5,
    # weight |0.5 - 0| -> 0.75
    assert quantile_huber_loss([0.0], [2.0], kappa=1.0) \
        == pytest.approx(0.75, abs=1e-12)


def test_quantile_huber_hand_value_below():
    # u = -0.5: quadratic branch 0.125, weight |0.5 - 1| -> 0.0625
    assert quantile_huber_loss([1.0], [0.5], kappa=1.0) \
        == pytest.approx(0.0625, abs=1e-12)


def test_quantile_huber_rejects_bad_kappa():
    with pytest.raises(ValidationError):
        quantile_huber_loss([0.0], [1.0], kappa=0.0)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6),
       st.lists(st.floats(-5, 5), min_size=1, max_size=6),
       st.floats(0.1, 3.0))
@settings(max_examples=80, deadline=None)
def test_quantile_huber_nonnegative(pred, targets, kappa):
    assert quantile_huber_loss(pred, targets, kappa) >= 0.0


# ---------------------------------------------------------------------------
# bce loss


def test_bce_hand_values():
    assert bce_loss(0.5, 1) == pytest.approx(math.log(2.0), abs=1e-12)
    assert bce_loss(0.9, 0) == pytest.approx(-math.log(0.1), abs=1e-12)


def test_bce_vanishes_at_confident_correct():
    assert bce_loss(1.0 - 1e-9, 1) < 1e-8
    assert bce_loss(1e-9, 0) < 1e-8


def test_bce_rejects_degenerate_probs():
    with pytest.raises(ValidationError):
        bce_loss(0.0, 1)
    with pytest.raises(ValidationError):
        bce_loss(1.0, 0)


# ---------------------------------------------------------------------------
# compute_targets


def test_targets_terminal_repeats_reward():
    model = stub_model([0.0, 0.0, 0.0], term_logit=0.0)
    t = Transition(0, 0, 1, 2, 1, 1)
    targets = compute_targets([t], model, model, eta=0.95)
    assert np.array_equal(targets, [[1.0, 1.0, 1.0]])


def test_targets_zero_when_successor_always_terminates():
    # ell(s', a') ~ 1 makes gamma' ~ 0: no bootstrap from the target atoms
    target_model = stub_model([5.0, 7.0], term_logit=50.0)
    live_model = stub_model([0.0, 0.0], term_logit=50.0)
    t = Transition(0, 0, 0, 0, 0, 0, next_state=1, next_action=2)
    targets = compute_targets([t], target_model, live_model, eta=0.95)
    assert np.allclose(targets, 0.0, atol=1e-12)


def test_targets_hand_value_with_termination_discount():
    # ell = 0.3, eta = 0.95 -> gamma' = 0.7; beta' = {1, 2}, r = 1
    logit = math.log(0.3 / 0.7)
    target_model = stub_model([1.0, 2.0], term_logit=logit)
    live_model = stub_model([0.0, 0.0], term_logit=logit)
    t = Transition(0, 0, 0, 1, 1, 0, next_state=2, next_action=3)
    targets = compute_targets([t], target_model, live_model, eta=0.95)
    assert targets[0] == pytest.approx([1.7, 2.4], abs=1e-12)


def test_targets_fixed_eta_without_term_head():
    target_model = stub_model([1.0, 2.0])
    t = Transition(0, 0, 0, 1, 1, 0, next_state=2, next_action=3)
    targets = compute_targets([t], target_model, target_model, eta=0.9)
    assert targets[0] == pytest.approx([1.9, 2.8], abs=1e-12)


def test_targets_reject_missing_successor():
    model = stub_model([0.0], term_logit=0.0)
    bad = Transition(0, 0, 0, 0, 1, 0)  # non-terminal, no successor
    with pytest.raises(DataFormatError):
        compute_targets([bad], model, model, eta=0.9)
    bad2 = Transition(0, 0, 0, 0, 1, 1, next_state=1, next_action=0)
    with pytest.raises(DataFormatError):
        compute_targets([bad2], model, model, eta=0.9)


# ---------------------------------------------------------------------------
# forward


def test_forward_zero_initialized_heads():
    config = ModelConfig((5,), 3, embedding_dim=4, hidden_sizes=(8,))
    model = EngagementModel.initialize(config, 6, seed=3)
    q, ell = model.forward(2, 1)
    assert np.all(q == 0.0)
    assert ell == 0.5


def test_forward_deterministic():
    mdp_logs = generate_logs(random_mdp(4, 3, seed=0), 200, seed=1)
    res = train(mdp_logs, TrainingConfig(n_quantiles=8, epochs=2,
                                         batch_size=32, learning_rate=0.01,
                                         seed=5))
    a = res.model.forward(1, 2)
    b = res.model.forward(1, 2)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


@given(state=st.integers(0, 4), action=st.integers(0, 2),
       seed=st.integers(0, 100))
@settings(max_examples=40, deadline=None)
def test_forward_range_contract(state, action, seed):
    config = ModelConfig((5,), 3, embedding_dim=3, hidden_sizes=(6,))
    model = EngagementModel.initialize(config, 4, seed=seed)
    rng = np.random.default_rng(seed)
    for name in ("quantile_head_weight", "quantile_head_bias",
                 "termination_head_weight", "termination_head_bias"):
        model.params[name] = rng.normal(0, 2, model.params[name].shape)
    q, ell = model.forward(state, action)
    assert q.shape == (4,) and np.isfinite(q).all()
    assert 0.0 < ell < 1.0


def test_forward_rejects_out_of_range_ids():
    config = ModelConfig((5,), 3, embedding_dim=3, hidden_sizes=(6,))
    model = EngagementModel.initialize(config, 4, seed=0)
    with pytest.raises(IndexError):
        model.forward(5, 0)
    with pytest.raises(IndexError):
        model.forward(0, 3)


def test_engagement_score_invariant_under_head_permutation():
    config = ModelConfig((4,), 2, embedding_dim=3, hidden_sizes=(5,))
    model = EngagementModel.initialize(config, 6, seed=1)
    rng = np.random.default_rng(2)
    model.params["quantile_head_weight"] = rng.normal(0, 1, (5, 6))
    model.params["quantile_head_bias"] = rng.normal(0, 1, 6)
    before = model.forward(1, 1)[0].mean()
    perm = rng.permutation(6)
    model.params["quantile_head_weight"] = \
        model.params["quantile_head_weight"][:, perm]
    model.params["quantile_head_bias"] = model.params["quantile_head_bias"][perm]
    after = model.forward(1, 1)[0].mean()
    assert after == pytest.approx(before, rel=1e-12)


# ---------------------------------------------------------------------------
# gradient_check


def _random_headed_model(seed, m=5, term_head=True):
    config = ModelConfig((6, 4), 4, embedding_dim=3, hidden_sizes=(8, 8),
                         term_head=term_head)
    model = EngagementModel.initialize(config, m, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    heads = ["quantile_head_weight", "quantile_head_bias"]
    if term_head:
        heads += ["termination_head_weight", "termination_head_bias"]
    for name in heads:
        model.params[name] = rng.uniform(-0.4, 0.4, model.params[name].shape)
    return model


def _featureized_batch(seed, n=6):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        terminal = bool(rng.random() < 0.4)
        state = (int(rng.integers(6)), int(rng.integers(4)))
        if terminal:
            out.append(Transition(0, i, state, int(rng.integers(4)),
                                  int(rng.integers(2)), 1))
        else:
            out.append(Transition(0, i, state, int(rng.integers(4)),
                                  int(rng.integers(2)), 0,
                                  next_state=(int(rng.integers(6)),
                                              int(rng.integers(4))),
                                  next_action=int(rng.integers(4))))
    return out


def test_gradient_zero_at_stationary_point():
    # exact fit, no termination head: gradient is identically zero
    model = stub_model([1.0, 1.0, 1.0])
    t = Transition(0, 0, 0, 0, 1, 1)
    cfg = TrainingConfig(n_quantiles=3, seed=0)
    assert gradient_check(model, [t], cfg) <= 1e-6


def test_gradient_matches_finite_differences():
    cfg = TrainingConfig(n_quantiles=5, kappa=1.0, eta=0.9, seed=0)
    for seed in range(4):
        model = _random_headed_model(seed)
        batch = _featureized_batch(seed + 50)
        assert gradient_check(model, batch, cfg) <= 1e-4


def test_gradient_check_near_kinks_with_exclusion():
    # zero-init model, terminal reward 1, kappa 1: residuals sit exactly on
    # the kink; masked comparison must still agree to 1e-3
    config = ModelConfig((2,), 2, embedding_dim=3, hidden_sizes=(4,))
    model = EngagementModel.initialize(config, 3, seed=2)
    batch = [Transition(0, 0, 0, 0, 1, 1), Transition(1, 0, 1, 1, 0, 1)]
    cfg = TrainingConfig(n_quantiles=3, kappa=1.0, seed=0)
    assert gradient_check(model, batch, cfg) <= 1e-3


def test_gradient_check_squared_objective():
    cfg = TrainingConfig(n_quantiles=1, eta=0.9, seed=0)
    model = _random_headed_model(9, m=1, term_head=False)
    batch = _featureized_batch(77)
    assert gradient_check(model, batch, cfg, objective="squared") <= 1e-4


def test_gradient_check_rejects_large_batches():
    model = stub_model([0.0])
    batch = [Transition(0, i, 0, 0, 1, 1) for i in range(9)]
    with pytest.raises(ValidationError):
        gradient_check(model, batch, TrainingConfig(n_quantiles=1))


# ---------------------------------------------------------------------------
# train


def test_train_degenerate_point_target():
    logs = [Transition(0, 0, 0, 0, 1, 1)]
    cfg = TrainingConfig(n_quantiles=4, batch_size=1, learning_rate=1e-3,
                         adam_eps=2e-3, epochs=4000, seed=0)
    res = train(logs, cfg)
    q, _ = res.model.forward(0, 0)
    assert np.abs(q - 1.0).max() <= 1e-3
    assert res.trace[-1][1] < 1e-6  # joint quantile term at the last step


def test_train_always_terminating_pair_calibrates_ell():
    logs = [Transition(0, 0, 0, 0, 1, 1)] * 8
    cfg = TrainingConfig(n_quantiles=4, batch_size=4, learning_rate=0.05,
                         epochs=600, seed=0)
    res = train(logs, cfg)
    _, ell = res.model.forward(0, 0)
    assert ell >= 0.99


def test_train_deterministic_traces_and_parameters():
    logs = generate_logs(random_mdp(4, 3, seed=7), 300, seed=8)
    cfg = TrainingConfig(n_quantiles=8, epochs=3, batch_size=32,
                         learning_rate=0.01, seed=11)
    a = train(logs, cfg)
    b = train(logs, cfg)
    assert a.trace == b.trace
    assert all(np.array_equal(a.model.params[k], b.model.params[k])
               for k in a.model.params)


def test_train_loss_components_nonnegative():
    logs = generate_logs(random_mdp(4, 3, seed=1), 200, seed=2)
    cfg = TrainingConfig(n_quantiles=6, epochs=2, batch_size=16,
                         learning_rate=0.005, seed=3)
    res = train(logs, cfg)
    for _, value_loss, bce, total in res.trace:
        assert value_loss >= 0.0 and bce >= 0.0
        assert total == value_loss + bce


def test_train_target_network_staleness():
    logs = generate_logs(random_mdp(3, 2, seed=4), 150, seed=5)
    period = 7
    snapshots = {}
    events = []

    def on_step(step, live, target):
        key = tuple(target.params["quantile_head_bias"])
        if step % period == 0:
            # immediately after a copy, live and target agree bitwise
            events.append(all(np.array_equal(live.params[k], target.params[k])
                              for k in live.params))
        snapshots.setdefault(step // period, set()).add(key)

    cfg = TrainingConfig(n_quantiles=4, epochs=2, batch_size=8,
                         learning_rate=0.05, target_copy_period=period, seed=6)
    train(logs, cfg, on_step=on_step)
    assert events and all(events)
    # between copies the target parameters never change
    for window, keys in snapshots.items():
        assert len(keys) == 1


def test_train_divergence_raises_with_step():
    logs = generate_logs(random_mdp(3, 2, seed=0), 50, seed=1)
    cfg = TrainingConfig(n_quantiles=4, batch_size=16, learning_rate=1e50,
                         epochs=5, seed=0)
    with np.errstate(all="ignore"):
        with pytest.raises(TrainingDivergedError) as excinfo:
            train(logs, cfg, objective="squared")
    assert excinfo.value.step >= 1


def test_train_validates_config_and_objective():
    logs = [Transition(0, 0, 0, 0, 1, 1)]
    with pytest.raises(ValidationError):
        train(logs, TrainingConfig(kappa=-1.0))
    with pytest.raises(ValidationError):
        train(logs, TrainingConfig(), objective="hinge")
    with pytest.raises(ValidationError):
        train([], TrainingConfig())


def test_train_calibration_on_synthetic_env():
    # medium-sized run: learned means and termination probabilities track the
    # data-terminal fixed point and the empirical rates
    mdp = random_mdp(5, 2, seed=31, term_range=(0.35, 0.6),
                     click_range=(0.2, 0.8))
    eta = 0.9
    logs = generate_logs(mdp, 8000, seed=32)
    cfg = TrainingConfig(n_quantiles=16, eta=eta, batch_size=64,
                         learning_rate=2e-3, epochs=30, seed=33,
                         target_copy_period=100)
    res = train(logs, cfg)

    fp = solve_fixed_point(mdp, DiscountSpec.for_mdp(mdp, eta, "data-terminal"),
                           16, tol=1e-9, max_iter=1000)
    rates = empirical_termination_rate(logs)
    visits: dict = {}
    for t in logs:
        visits[(t.state, t.action)] = visits.get((t.state, t.action), 0) + 1
    checked = 0
    for (s, a), n in visits.items():
        if n < 300:
            continue
        q, ell = res.model.forward(s, a)
        assert q.mean() == pytest.approx(fp.table.means()[s, a], abs=0.1)
        assert ell == pytest.approx(rates[(s, a)], abs=0.1)
        checked += 1
    assert checked >= 5


# ---------------------------------------------------------------------------
# adam


def test_adam_matches_reference_update():
    params = {"w": np.array([1.0, -2.0])}
    grads = {"w": np.array([0.5, -0.25])}
    opt = Adam(params, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    opt.step(params, grads)
    # first step: m_hat = g, v_hat = g^2 -> update = lr * sign(g)
    expected = np.array([1.0, -2.0]) - 0.1 * np.array(
        [0.5 / (0.5 + 1e-8), -0.25 / (0.25 + 1e-8)])
    assert params["w"] == pytest.approx(expected, rel=1e-12)


def test_adam_global_norm_clip():
    params = {"w": np.zeros(2)}
    grads = {"w": np.array([3.0, 4.0])}  # norm 5
    opt = Adam(params, lr=1.0, grad_clip=1.0)
    opt.step(params, grads)
    # clipped gradient direction is preserved; Adam then normalizes scale
    assert np.sign(params["w"]) == pytest.approx([-1.0, -1.0])
