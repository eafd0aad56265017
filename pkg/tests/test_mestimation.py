import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from surveyalloc import streams
from surveyalloc.confidence import ConfidenceConfig
from surveyalloc.mestimation import (
    ConditioningError,
    MnlEnvironment,
    MnlSpec,
    MnlTask,
    balanced_design,
    exact_difficulty,
    expected_score,
    generate_tasks,
    mnl_hessian,
    mnl_probs,
    mnl_score,
    mnl_true_difficulties,
    optimal_lambda,
    sandwich_difficulty,
    theta_fit,
)
from surveyalloc.policies import largest_remainder, neyman_allocation


def random_task(seed, K=3, d=2, scale=1.0):
    rng = np.random.default_rng(seed)
    X = scale * rng.standard_normal((K, d))
    b = rng.standard_normal(d)
    return MnlTask(X=X, beta_star=b, beta_llm=0.7 * b + 0.3 * rng.standard_normal(d))


def test_task_validation():
    with pytest.raises(ValueError):
        MnlTask(X=np.ones((1, 2)), beta_star=np.zeros(2), beta_llm=np.zeros(2))
    with pytest.raises(ValueError):
        MnlTask(X=np.ones((3, 2)), beta_star=np.zeros(3), beta_llm=np.zeros(2))


def test_probs_examples():
    X = np.random.default_rng(0).standard_normal((4, 2))
    assert mnl_probs(X, np.zeros(2)) == pytest.approx(np.full(4, 0.25))
    two = np.array([[0.0], [math.log(3)]])
    assert mnl_probs(two, [1.0]) == pytest.approx([0.25, 0.75], abs=1e-12)


def test_probs_shift_invariant_and_stable():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
    b = np.array([0.3, -0.4])
    shifted = np.column_stack([X, np.ones(3)])
    assert mnl_probs(shifted, np.append(b, 123.0)) == pytest.approx(mnl_probs(X, b), abs=1e-12)
    big = mnl_probs(X * 1e3, b)
    assert np.isfinite(big).all() and big.sum() == pytest.approx(1.0, abs=1e-12)


@given(st.integers(0, 10_000), st.integers(2, 6), st.integers(1, 4))
def test_probs_sum_to_one(seed, K, d):
    rng = np.random.default_rng(seed)
    p = mnl_probs(rng.standard_normal((K, d)) * 3, rng.standard_normal(d))
    assert p.sum() == pytest.approx(1.0, abs=1e-12) and np.all(p >= 0)


def test_score_mean_zero_at_truth():
    t = random_task(1)
    p = mnl_probs(t.X, t.beta_star)
    y = np.random.default_rng(2).choice(3, size=100_000, p=p)
    scores = np.array([mnl_score(t.X, k, t.beta_star) for k in range(3)])[y]
    se = scores.std(axis=0) / math.sqrt(len(y))
    assert np.all(np.abs(scores.mean(axis=0)) < 3 * se)
    assert expected_score(t.X, t.beta_star, t.beta_star) == pytest.approx(np.zeros(2), abs=1e-15)


def test_score_bad_choice():
    with pytest.raises(ValueError):
        mnl_score(np.ones((3, 2)), 3, np.zeros(2))


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_hessian_finite_difference(seed):
    t = random_task(seed)
    h = 1e-5
    fd = np.empty((2, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd[:, j] = (expected_score(t.X, t.beta_star + e, t.beta_star)
                    - expected_score(t.X, t.beta_star - e, t.beta_star)) / (2 * h)
    H = mnl_hessian(t.X, t.beta_star)
    assert np.max(np.abs(H - fd)) < 1e-6
    assert np.allclose(H, H.T, atol=1e-15)
    assert np.linalg.eigvalsh(H).min() >= -1e-10


def test_lambda_zero_is_inverse_information():
    t = random_task(3)
    H = mnl_hessian(t.X, t.beta_star)
    assert exact_difficulty(t, 0.0) == pytest.approx(np.trace(np.linalg.inv(H)), rel=1e-12)
    mc = sandwich_difficulty(t, 0.0, 200_000, np.random.default_rng(4))
    assert mc == pytest.approx(np.trace(np.linalg.inv(H)), rel=0.02)


def test_identical_llm_coupled_vs_independent():
    t = random_task(5)
    t = MnlTask(X=t.X, beta_star=t.beta_star, beta_llm=t.beta_star)
    coupled = sandwich_difficulty(t, 1.0, 50_000, np.random.default_rng(6), coupled=True)
    assert coupled == pytest.approx(0.0, abs=1e-12)
    indep = sandwich_difficulty(t, 1.0, 200_000, np.random.default_rng(6))
    base = exact_difficulty(t, 0.0)
    assert indep == pytest.approx(2 * base, rel=0.02)
    assert exact_difficulty(t, 1.0) == pytest.approx(2 * base, rel=1e-12)


def test_det_criterion():
    t = random_task(7)
    Hi = np.linalg.inv(mnl_hessian(t.X, t.beta_star))
    assert exact_difficulty(t, 0.0, "det") == pytest.approx(np.linalg.det(Hi) ** 0.5, rel=1e-12)
    with pytest.raises(ValueError):
        exact_difficulty(t, 0.0, "max")


def test_sandwich_deterministic_and_guards():
    t = random_task(8)
    a = sandwich_difficulty(t, 0.5, 5000, np.random.default_rng(1))
    assert a == sandwich_difficulty(t, 0.5, 5000, np.random.default_rng(1))
    with pytest.raises(ValueError):
        sandwich_difficulty(t, 0.5, 999, np.random.default_rng(1))
    flat = MnlTask(X=np.array([[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]]), beta_star=np.zeros(2), beta_llm=np.zeros(2))
    with pytest.raises(ConditioningError):
        exact_difficulty(flat, 0.0)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_trace_rotation_invariant(seed):
    t = random_task(seed)
    R = special_ortho_group.rvs(2, random_state=seed)
    rot = MnlTask(X=t.X @ R, beta_star=R.T @ t.beta_star, beta_llm=R.T @ t.beta_llm)
    for lam in (0.0, 0.6, 1.0):
        assert exact_difficulty(rot, lam) == pytest.approx(exact_difficulty(t, lam), rel=1e-8)


def test_optimal_lambda_minimises():
    t = random_task(9)
    assert optimal_lambda(t) == 0.0  # independent draws carry no covariance
    C = 0.5 * mnl_hessian(t.X, t.beta_llm)
    lam = optimal_lambda(t, cross=C)
    assert lam == pytest.approx(0.5)
    Hi = np.linalg.inv(mnl_hessian(t.X, t.beta_star))
    VL = mnl_hessian(t.X, t.beta_llm)
    H = mnl_hessian(t.X, t.beta_star)
    crit = [np.trace(Hi @ (H - 2 * g * C + g * g * VL) @ Hi) for g in np.linspace(0, 1, 101)]
    assert np.argmin(crit) == 50


def test_balanced_design():
    D = balanced_design(3, 2)
    assert D.sum(axis=0) == pytest.approx(np.zeros(2), abs=1e-12)
    assert np.linalg.norm(D, axis=1) == pytest.approx(np.ones(3))
    with pytest.raises(ValueError):
        balanced_design(3, 3)


def test_default_mnl_setup_difficulty_spread():
    lows, highs, cvs = [], [], []
    for seed in range(3):
        A = mnl_true_difficulties(generate_tasks(MnlSpec(seed=seed)))
        lows.append(A.min())
        highs.append(A.max())
        cvs.append(A.std() / A.mean())
    assert np.mean(lows) == pytest.approx(4.8, rel=0.15)
    assert np.mean(highs) == pytest.approx(39.7, rel=0.15)
    assert np.mean(cvs) == pytest.approx(0.72, abs=0.1)


def test_monte_carlo_agrees_with_closed_form():
    t = generate_tasks(MnlSpec(Q=3, seed=1))[2]
    for lam in (0.0, 1.0):
        mc = sandwich_difficulty(t, lam, 50_000, np.random.default_rng(lam == 1.0))
        assert mc == pytest.approx(exact_difficulty(t, lam), rel=0.03)


def test_theta_fit_recovers_truth():
    t = random_task(10)
    p = mnl_probs(t.X, t.beta_star)
    assert theta_fit(t.X, p * 1e6) == pytest.approx(t.beta_star, abs=1e-8)


def test_environment_draws_follow_probs():
    env = MnlEnvironment(generate_tasks(MnlSpec(Q=2, seed=3)))
    n = 100_000
    y, yl = env.draw(streams.derive_key(4), np.ones(n, int), np.arange(n))
    freq = np.bincount(y, minlength=3) / n
    assert freq == pytest.approx(env.p_star[1], abs=4 * math.sqrt(0.25 / n))
    assert np.bincount(yl, minlength=3) / n == pytest.approx(env.p_llm[1], abs=4 * math.sqrt(0.25 / n))


def test_online_estimate_converges():
    env = MnlEnvironment(generate_tasks(MnlSpec(Q=4, seed=2)), lam=1.0)
    keys = [streams.derive_key(1, r) for r in range(3)]
    learner = env.make_learner(keys, ConfidenceConfig(R=env.ranges()["R"], delta=0.01, Q=4, T_max=10),
                               max_n=5000)
    learner.initialise(3)
    rows = np.repeat(np.arange(3), 4)
    arms = np.tile(np.arange(4), 3)
    for j in range(3, 4000):
        learner.observe(rows, arms, j)
    assert np.all(learner.n == 4000)
    truth = env.arm_difficulty()
    assert learner.a_hat() == pytest.approx(np.tile(truth, (3, 1)), rel=0.1)
    assert np.all(learner.a_ucb() >= learner.a_hat())


def test_q2_grid_oracle_matches_neyman():
    A = mnl_true_difficulties(generate_tasks(MnlSpec(Q=2, seed=5)))
    B = 40
    best = min(range(1, B), key=lambda n1: A[0] / n1 + A[1] / (B - n1))
    n = largest_remainder(neyman_allocation(A, 1, 1, B), np.ones(2), B)
    assert abs(n[0] - best) <= 1
