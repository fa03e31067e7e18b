import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from conftest import RATE
from healthaug.audio_io import ClipManifestEntry, Waveform
from healthaug.evalkit import (
    EmbeddingMatrix,
    EvalReport,
    LinearProbe,
    TaskResult,
    auroc,
    composite_score,
    delong_ci,
    embed_clip_sliding,
    evaluate_tasks,
    export_embeddings,
    fit_linear_probe,
    import_embeddings,
    mean_pool,
    read_report,
    write_report,
)


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def delong_oracle(scores, labels, level=0.95):
    """Placement values by explicit pair loops."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    psi = lambda p, q: 1.0 if p > q else 0.5 if p == q else 0.0  # noqa: E731
    v10 = [sum(psi(p, q) for q in neg) / len(neg) for p in pos]
    v01 = [sum(psi(p, q) for p in pos) / len(pos) for q in neg]
    auc = sum(v10) / len(v10)
    var = np.var(v10, ddof=1) / len(pos) + np.var(v01, ddof=1) / len(neg)
    half = norm.ppf(0.5 + level / 2) * math.sqrt(var)
    return auc, var, max(0.0, auc - half), min(1.0, auc + half)


small_instances = st.integers(2, 12).flatmap(lambda n: st.tuples(
    st.lists(st.integers(-3, 3).map(float), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
)).filter(lambda t: 0 < sum(t[1]) < len(t[1]))


@settings(max_examples=200, deadline=None)
@given(small_instances)
def test_auroc_matches_brute_force(inst):
    scores, labels = inst
    assert auroc(scores, labels) == brute_auroc(scores, labels)
    assert auroc(scores, labels) + auroc(-np.array(scores), labels) == 1.0


def test_delong_hand_example():
    # positives 0.8, 0.4; negatives 0.6, 0.2 -> V10 = (1, 0.5), V01 = (0.5, 0)
    scores, labels = [0.8, 0.4, 0.6, 0.2], [1, 1, 0, 0]
    r = delong_ci(scores, labels)
    assert r.auroc == 0.75
    assert abs(r.variance - 0.125) < 1e-15  # 0.125/2 + 0.125/2
    half = norm.ppf(0.975) * math.sqrt(0.125)
    assert r.ci_low == max(0.0, 0.75 - half) and r.ci_high == 1.0
    assert not r.degenerate


@settings(max_examples=100, deadline=None)
@given(small_instances)
def test_delong_matches_oracle(inst):
    scores, labels = inst
    r = delong_ci(scores, labels)
    assert r.auroc == auroc(scores, labels)
    assert r.ci_low <= r.auroc <= r.ci_high
    m = sum(labels)
    if m >= 2 and len(labels) - m >= 2 and not r.degenerate:
        auc, var, lo, hi = delong_oracle(scores, labels)
        assert abs(r.variance - var) < 1e-12
        assert abs(r.ci_low - lo) < 1e-12 and abs(r.ci_high - hi) < 1e-12


def test_separated_data_gives_unit_interval():
    r = delong_ci([0.9, 0.8, 0.7, 0.1, 0.2], [1, 1, 1, 0, 0])
    assert (r.auroc, r.ci_low, r.ci_high) == (1.0, 1.0, 1.0)
    assert r.degenerate


def test_single_example_class_is_degenerate():
    r = delong_ci([0.9, 0.1, 0.2], [1, 0, 0])
    assert r.degenerate and r.ci_low == r.ci_high == r.auroc


def test_duplication_halves_half_width():
    rng = np.random.default_rng(0)
    labels = np.repeat([1, 0], 40)
    scores = rng.standard_normal(80) + labels
    r1 = delong_ci(scores, labels)
    r4 = delong_ci(np.tile(scores, 4), np.tile(labels, 4))
    ratio = (r4.ci_high - r4.ci_low) / (r1.ci_high - r1.ci_low)
    assert r4.auroc == r1.auroc
    assert abs(ratio - 0.5) < 0.05


def test_auroc_input_errors():
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1, 2])
    with pytest.raises(ValueError):
        auroc([0.1], [1, 0])


# --- linear probe ----------------------------------------------------------------

def test_probe_separable():
    rng = np.random.default_rng(0)
    y = np.repeat([0, 1], 50)
    X = rng.standard_normal((100, 5))
    X[:, 0] += 4 * y
    probe = LinearProbe().fit(X, y)
    assert probe.score(X, y) > 0.99
    assert probe.predict_proba(X).shape == (100, 2)
    assert np.all(probe.predict(X[y == 1][:10]) == 1)


def test_probe_null_data_near_chance():
    rng = np.random.default_rng(1)
    y = np.repeat([0, 1], 100)
    X = rng.standard_normal((200, 10))
    probe = LinearProbe().fit(X, y)
    Xt = rng.standard_normal((400, 10))
    yt = np.repeat([0, 1], 200)
    assert abs(probe.score(Xt, yt) - 0.5) < 0.1


def test_probe_tie_prefers_larger_penalty():
    # a single informative feature: every penalty ranks the folds identically
    y = np.tile([0, 1], 20)
    X = (y + 0.1 * np.arange(40) / 40)[:, None]
    probe = LinearProbe(penalty_grid=(0.01, 1.0, 100.0)).fit(X, y)
    assert np.all(probe.cv_scores_ == 1.0)
    assert probe.penalty_ == 100.0


def test_probe_objective_stationary():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, 60)
    X = rng.standard_normal((60, 3)) + y[:, None]
    probe = LinearProbe(penalty_grid=(0.5,), k_folds=3).fit(X, y)
    Z = (X - probe.mean_) / probe.scale_
    p = 1 / (1 + np.exp(-(Z @ probe.coef_ + probe.intercept_)))
    grad_w = Z.T @ (p - y) / 60 + 0.5 * probe.coef_
    grad_b = np.mean(p - y)
    assert np.linalg.norm(np.append(grad_w, grad_b)) < 1e-5


def test_probe_validation():
    with pytest.raises(ValueError):
        LinearProbe().fit(np.zeros((10, 2)), np.zeros(10))
    with pytest.raises(ValueError):
        LinearProbe(penalty_grid=(-1.0,)).fit(np.zeros((10, 2)), np.tile([0, 1], 5))
    with pytest.raises(ValueError):
        LinearProbe().fit(np.zeros((6, 2)), np.array([0, 0, 0, 1, 1, 1]))


def test_functional_probe_matches_estimator():
    rng = np.random.default_rng(3)
    y = np.repeat([0, 1], 30)
    X = rng.standard_normal((60, 4)) + y[:, None]
    fit = fit_linear_probe(X, y, rng=7)
    est = LinearProbe(random_state=7).fit(X, y)
    assert fit.penalty == est.penalty_
    assert np.array_equal(fit.decision_function(X), est.decision_function(X))


# --- sliding windows ----------------------------------------------------------------

class _MeanEncoder:
    def embed(self, batch):
        batch = np.asarray(batch)
        return np.stack([batch.mean(axis=(1, 2)), batch.std(axis=(1, 2))], axis=1)


def test_sliding_window_count_and_pooling():
    w = Waveform(np.random.default_rng(0).standard_normal(10 * RATE))
    calls = []

    class Recorder(_MeanEncoder):
        def embed(self, batch):
            calls.append(len(batch))
            return super().embed(batch)

    emb = embed_clip_sliding(w, Recorder())
    assert calls == [9]
    assert emb.shape == (2,)
    with pytest.raises(ValueError):
        embed_clip_sliding(Waveform(np.zeros(RATE)), _MeanEncoder())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mean_pool_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    e = rng.standard_normal((9, 16))
    assert np.max(np.abs(mean_pool(e) - mean_pool(e[rng.permutation(9)]))) <= 1e-12


# --- embeddings, reports -------------------------------------------------------------

@pytest.mark.parametrize("name", ["e.csv", "e.bin"])
def test_embedding_round_trip(tmp_path, name):
    m = EmbeddingMatrix(("a", "b", "c"), np.arange(6, dtype=float).reshape(3, 2) / 4)
    export_embeddings(m, tmp_path / name)
    back = import_embeddings(tmp_path / name)
    assert back.ids == m.ids and np.array_equal(back.values, m.values)


def test_embedding_errors(tmp_path):
    with pytest.raises(ValueError, match="row 1"):
        EmbeddingMatrix(("a", "b"), np.array([[0.0], [np.nan]]))
    with pytest.raises(ValueError):
        EmbeddingMatrix(("a", "a"), np.zeros((2, 1)))
    (tmp_path / "bad.csv").write_text("id,dim_0,dim_1\na,1,2\nb,3\n")
    with pytest.raises(ValueError, match="row 1"):
        import_embeddings(tmp_path / "bad.csv")
    (tmp_path / "nan.csv").write_text("id,dim_0\na,1\nb,nan\n")
    with pytest.raises(ValueError, match="row 1"):
        import_embeddings(tmp_path / "nan.csv")
    m = EmbeddingMatrix(("a",), np.zeros((1, 1)))
    with pytest.raises(KeyError):
        m.rows(["z"])


def test_report_round_trip(tmp_path):
    rep = EvalReport([TaskResult("t1", 0.75, 0.6, 0.9, 10, 20), TaskResult("t2", 0.5, 0.3, 0.7, 5, 5)])
    assert rep.composite == 0.625 == composite_score([0.75, 0.5])
    write_report(rep, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "task,auroc,ci_low,ci_high,n_pos,n_neg"
    assert lines[-1].startswith("composite,0.625")
    back = read_report(tmp_path / "r.csv")
    assert [t.auroc for t in back.tasks] == [0.75, 0.5]
    with pytest.raises(ValueError):
        TaskResult("bad", 0.5, 0.6, 0.7, 1, 1)
    with pytest.raises(ValueError):
        composite_score([])


def test_evaluate_tasks_uses_splits():
    rng = np.random.default_rng(0)
    entries, rows = [], []
    for i in range(80):
        y = i % 2
        split = "probe_train" if i < 50 else "probe_eval"
        entries.append(ClipManifestEntry(f"c{i}.wav", 0.0, 2.0, split, {"t": y, "u": None if i == 0 else 1 - y}))
        rows.append(rng.standard_normal(3) + 3 * y)
    emb = EmbeddingMatrix(tuple(e.clip_id for e in entries), np.array(rows))
    rep = evaluate_tasks(emb, entries, ["t", "u"])
    assert [t.task for t in rep.tasks] == ["t", "u"]
    assert rep.tasks[0].n_pos + rep.tasks[0].n_neg == 30
    assert rep.composite > 0.95
