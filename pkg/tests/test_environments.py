import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from surveyalloc import streams
from surveyalloc.environments import (
    DataError,
    ModuleEnvironment,
    ReplayDataset,
    ReplayEnvironment,
    SyntheticEnvironment,
    SyntheticSpec,
    disperse,
    dispersion_draw,
    group_modules,
    loguniform_cv,
    replay_ingest,
    replay_sample_pair,
    rescale_heterogeneity,
    synthetic_draw_vq,
    synthetic_sample_pair,
)
from surveyalloc.surrogate import MODULE_LABELS, generate_surrogate, target_difficulties, write_surrogate


def write_csv(path, rows, header="question_id,respondent_id,human,llm"):
    path.write_text(header + "\n" + "".join(",".join(map(str, r)) + "\n" for r in rows), encoding="utf-8")
    return path


# -- synthetic model --------------------------------------------------------------


def test_vq_homogeneous():
    assert np.array_equal(synthetic_draw_vq(SyntheticSpec(Q=7, h=0.0)), np.ones(7))


def test_vq_negative_h_rejected():
    with pytest.raises(ValueError):
        SyntheticSpec(h=-1)


def test_vq_mean_one():
    v = synthetic_draw_vq(SyntheticSpec(Q=100_000, h=2.0), np.random.default_rng(0))
    assert abs(v.mean() - 1) < 0.02


@pytest.mark.parametrize("h, cv", [(2.0, 1.04), (0.5, 0.29)])
def test_loguniform_cv(h, cv):
    assert loguniform_cv(h) == pytest.approx(cv, abs=0.005)
    v = synthetic_draw_vq(SyntheticSpec(Q=200_000, h=h), np.random.default_rng(1))
    assert v.std() / v.mean() == pytest.approx(cv, abs=0.01)


def test_ground_truth_fields():
    env = SyntheticEnvironment(SyntheticSpec(Q=3, rho=0.7, sigma_eta=0.5), v=np.array([1.0, 2.0, 0.5]))
    assert env.component_difficulty() == pytest.approx([0.76, 1.52, 0.38])
    assert np.all(env.lambda_star() == 0.7)
    assert np.all(env.true_mean() == 0)


def test_perfect_llm_pairs_equal():
    spec = SyntheticSpec(Q=2, rho=1.0, sigma_eta=0.0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        y, s = synthetic_sample_pair(spec, 1, rng)
        assert y == pytest.approx(s, abs=1e-12)
    env = SyntheticEnvironment(spec)
    y, s = env.draw(streams.derive_key(1), np.zeros(50, int), np.arange(50))
    assert np.allclose(y, s)


def test_independent_llm_zero_covariance():
    env = SyntheticEnvironment(SyntheticSpec(Q=1, rho=0.0), v=np.ones(1))
    y, s = env.draw(streams.derive_key(2), np.zeros(100_000, int), np.arange(100_000))
    se = np.std(y * s) / math.sqrt(len(y))
    assert abs(np.cov(y, s)[0, 1]) < 3 * se


def test_tuned_difficulty_monte_carlo():
    env = SyntheticEnvironment(SyntheticSpec(Q=1, rho=0.7, sigma_eta=0.5), v=np.ones(1))
    y, s = env.draw(streams.derive_key(3), np.zeros(100_000, int), np.arange(100_000))
    r = y - 0.7 * s
    se = np.std((r - r.mean()) ** 2) / math.sqrt(len(r))
    assert abs(r.var(ddof=1) - 0.76) < 3 * se
    assert np.var(y) == pytest.approx(1.25, rel=0.02) and np.var(s) == pytest.approx(1.0, rel=0.02)


def test_generator_sampler_moments():
    spec = SyntheticSpec(Q=2, rho=0.7, sigma_eta=0.5)
    rng = np.random.default_rng(4)
    v = np.array([1.0, 3.0])
    ys, ss = np.array([synthetic_sample_pair(spec, 1, rng, v=v) for _ in range(20_000)]).T
    assert np.cov(ys, ss)[0, 1] == pytest.approx(2.1, rel=0.05)


def test_same_key_same_draws():
    env = SyntheticEnvironment(SyntheticSpec(Q=4))
    k = streams.derive_key(5, 6)
    a = env.draw(k, np.arange(4), np.arange(4))
    b = env.draw(k, np.arange(4), np.arange(4))
    c = env.draw(streams.derive_key(5, 7), np.arange(4), np.arange(4))
    assert np.array_equal(a[0], b[0]) and not np.array_equal(a[0], c[0])


# -- replay ingestion -------------------------------------------------------------


def test_ingest_scales_and_clips(tmp_path):
    rows = [("q1", i, v, 10 - v) for i, v in enumerate([2, 4, 6, 8, 10])]
    rows += [("q2", i, v, v + 0.5 * (i % 2)) for i, v in enumerate([1, 2, 3, 4, 5])]
    ds = replay_ingest(write_csv(tmp_path / "d.csv", rows))
    assert ds.question_ids == ["q1", "q2"]
    for y, s in zip(ds.human, ds.llm):
        assert y.min() >= 0 and max(y.max(), s.max()) == 1 and min(y.min(), s.min()) == 0
    assert ds.lambda_star[0] == 0.0  # negative covariance
    assert ds.A[0] == pytest.approx(np.var(ds.human[0], ddof=1))


def test_ingest_excludes_perfect_prediction(tmp_path, caplog):
    rows = [(q, i, v, v) for q in ("a", "b") for i, v in enumerate([0, 1, 3])]
    rows += [("c", i, v, 1) for i, v in enumerate([0, 1, 3])]
    ds = replay_ingest(write_csv(tmp_path / "d.csv", rows))
    assert ds.question_ids == ["c"]
    assert set(ds.excluded) == {"a", "b"}
    assert "excluded" in caplog.text


@pytest.mark.parametrize("body, needle", [
    ("q1,1,0.5,0.5\nq1,2,0.5,0.1\n", "constant"),
    ("q1,1,0.5\n", "4 fields"),
    ("q1,1,abc,0.2\n", "non-numeric"),
])
def test_ingest_errors_name_question(tmp_path, body, needle):
    p = tmp_path / "d.csv"
    p.write_text("question_id,respondent_id,human,llm\n" + body)
    with pytest.raises(DataError, match=needle):
        replay_ingest(p)


def test_ingest_bad_header(tmp_path):
    p = write_csv(tmp_path / "d.csv", [("q", 1, 0, 1)], header="qid,rid,human,llm")
    with pytest.raises(DataError, match="header"):
        replay_ingest(p)
    empty = tmp_path / "e.csv"
    empty.write_text("question_id,respondent_id,human,llm\n")
    with pytest.raises(DataError, match="no data"):
        replay_ingest(empty)


def test_module_map(tmp_path):
    rows = [(q, i, v, 0.3) for q in ("a", "b") for i, v in enumerate([0, 1, 2])]
    data = write_csv(tmp_path / "d.csv", rows)
    good = write_csv(tmp_path / "m.csv", [("a", "M1"), ("b", "M1")], header="question_id,module_id")
    assert replay_ingest(data, good).module_of == {"a": "M1", "b": "M1"}
    partial = write_csv(tmp_path / "p.csv", [("a", "M1")], header="question_id,module_id")
    with pytest.raises(DataError, match="module"):
        replay_ingest(data, partial)


# -- replay sampling --------------------------------------------------------------


def tiny_dataset():
    return ReplayDataset(["one", "many"], [np.array([0.3]), np.array([0.0, 0.25, 0.5, 1.0])],
                         [np.array([0.7]), np.array([0.1, 0.2, 0.6, 0.9])])


def test_single_respondent_always_returned():
    ds = tiny_dataset()
    rng = np.random.default_rng(0)
    assert all(replay_sample_pair(ds, 0, rng) == (0.3, 0.7) for _ in range(10))
    env = ReplayEnvironment(ds)
    y, s = env.draw(streams.derive_key(1), np.zeros(20, int), np.arange(20))
    assert np.all(y == 0.3) and np.all(s == 0.7)


def test_bootstrap_rows_uniform():
    env = ReplayEnvironment(tiny_dataset())
    y, _ = env.draw(streams.derive_key(8), np.ones(100_000, int), np.arange(100_000))
    counts = np.array([(y == v).sum() for v in (0.0, 0.25, 0.5, 1.0)])
    assert sps.chisquare(counts).pvalue > 0.01


def test_bootstrap_difficulty_consistent():
    ds = generate_surrogate_dataset()
    env = ReplayEnvironment(ds)
    q = int(np.argmax(ds.A))
    y, s = env.draw(streams.derive_key(9), np.full(10_000, q), np.arange(10_000))
    r = y - ds.lambda_star[q] * s
    se = np.std((r - r.mean()) ** 2) / 100
    assert abs(r.var(ddof=1) - ds.A[q]) < 3 * se


def test_replay_never_mutates():
    ds = tiny_dataset()
    before = [a.copy() for a in ds.human + ds.llm]
    env = ReplayEnvironment(ds)
    env.draw(streams.derive_key(1), np.ones(100, int), np.arange(100))
    env.with_difficulty([0.1, 0.2])
    assert all(np.array_equal(a, b) for a, b in zip(before, ds.human + ds.llm))


def test_with_difficulty_hits_targets():
    ds = generate_surrogate_dataset()
    target = np.linspace(0.05, 0.2, ds.Q)
    env = ReplayEnvironment(ds).with_difficulty(target)
    assert env.component_difficulty() == pytest.approx(target, rel=1e-12)
    q = 5
    y, s = env.draw(streams.derive_key(10), np.full(20_000, q), np.arange(20_000))
    assert np.var(y - ds.lambda_star[q] * s) == pytest.approx(target[q], rel=0.05)


# -- surrogate --------------------------------------------------------------------

_CACHE = {}


def generate_surrogate_dataset():
    if "ds" not in _CACHE:
        qs = generate_surrogate(seed=0)
        _CACHE["ds"] = ReplayDataset([q.question_id for q in qs], [q.human for q in qs], [q.llm for q in qs],
                                     {q.question_id: q.module_id for q in qs})
    return _CACHE["ds"]


def test_surrogate_file_matches_targets(tmp_path):
    write_surrogate(tmp_path / "s.csv", tmp_path / "m.csv", seed=0)
    ds = replay_ingest(tmp_path / "s.csv", tmp_path / "m.csv")
    A = ds.A
    assert ds.Q == 68
    assert A.min() == pytest.approx(0.024, rel=0.05) and A.max() == pytest.approx(0.239, rel=0.05)
    assert A.std() / A.mean() == pytest.approx(0.63, rel=0.05)
    assert np.mean(ds.lambda_star < 0.01) == pytest.approx(0.38, abs=0.02)
    assert A.mean() == pytest.approx(0.106, rel=0.05)
    assert len(set(ds.module_of.values())) == len(set(MODULE_LABELS)) == 14
    rel = np.abs(np.sort(A) / np.sort(target_difficulties()) - 1)
    assert rel.mean() < 0.02 and rel.max() < 0.1


def test_shipped_surrogate_reproducible(tmp_path):
    from pathlib import Path

    shipped = Path(__file__).resolve().parents[1] / "data" / "surrogate_answers.csv"
    write_surrogate(tmp_path / "s.csv", tmp_path / "m.csv", seed=0)
    assert (tmp_path / "s.csv").read_bytes() == shipped.read_bytes()


# -- transforms -------------------------------------------------------------------


def test_rescale_identity_and_flat():
    A = np.array([0.03, 0.1, 0.2, 0.05])
    assert rescale_heterogeneity(A, 1.0) == pytest.approx(A, rel=1e-12)
    flat = rescale_heterogeneity(A, 0.0)
    assert np.allclose(flat, A.mean(), rtol=1e-12)


def test_rescale_two_points():
    A = np.array([0.05, 0.2])
    out = rescale_heterogeneity(A, 2.0)
    assert out.mean() == pytest.approx(A.mean(), rel=1e-12)
    assert np.std(np.log(out)) == pytest.approx(2 * np.std(np.log(A)), rel=1e-12)
    assert out[1] / out[0] == pytest.approx(16.0)


def test_rescale_errors():
    with pytest.raises(ValueError):
        rescale_heterogeneity([0.1, 0.0], 1.0)
    with pytest.raises(ValueError):
        rescale_heterogeneity([0.1, 0.2], -1.0)


@given(st.lists(st.floats(1e-3, 10), min_size=2, max_size=30), st.floats(0, 3))
def test_rescale_preserves_mean(A, h):
    A = np.array(A)
    assert rescale_heterogeneity(A, h).mean() == pytest.approx(A.mean(), rel=1e-12)


def test_disperse_examples():
    z = dispersion_draw(10, 0)
    assert np.all(disperse(0.0, z) == 1.0)
    assert disperse(1.0, [-1.0])[0] == 0.05  # clipped to zero, then floored
    assert disperse(1.0, [1.0])[0] == 2.0
    with pytest.raises(ValueError):
        disperse(1.5, z)


def test_disperse_mean_one():
    z = np.random.default_rng(0).uniform(-1, 1, 10_000)
    vals = disperse(0.5, z)
    assert abs(vals.mean() - 1) < 3 * vals.std() / 100


def test_dispersion_draw_fixed_across_levels():
    z = dispersion_draw(20, 11)
    assert np.array_equal(z, dispersion_draw(20, 11))
    assert np.all(disperse(0.5, z) - 1 == pytest.approx(0.5 * z))


@settings(max_examples=50)
@given(st.floats(0, 1), st.integers(0, 1000))
def test_disperse_bounds(a, seed):
    vals = disperse(a, dispersion_draw(30, seed))
    assert np.all((vals >= 0.05) & (vals <= 2.0))


def test_group_modules():
    ids, Aw, M = group_modules([0.1, 0.2, 0.4], ["x", "x", "y"])
    assert ids == ["x", "y"] and Aw == pytest.approx([0.3, 0.4])
    assert group_modules([0.7], ["solo"])[1] == pytest.approx([0.7])
    with pytest.raises(ValueError):
        group_modules([0.1, 0.2], ["x", ""])


def test_surrogate_modules_conserve_total():
    ds = generate_surrogate_dataset()
    env = ModuleEnvironment(ReplayEnvironment(ds), [ds.module_of[q] for q in ds.question_ids])
    assert env.n_arms == 14
    assert env.arm_difficulty().sum() == pytest.approx(ds.A.sum(), rel=1e-12)
    assert env.arm_sizes().sum() == 68
