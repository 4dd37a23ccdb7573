import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdtlab import attribution as attr
from cdtlab import model as M
from cdtlab import taskgen as T
from cdtlab.diffcore import DimensionError


def _causal_rows(rng, n):
    A = np.tril(rng.random((n, n)) + 1e-3)
    return A / A.sum(1, keepdims=True)


def _evidence(seed, n=8, heads=((0, 0), (0, 1), (1, 0))):
    rng = np.random.default_rng(seed)
    att = {h: _causal_rows(rng, n) for h in heads}
    grads = {h: rng.standard_normal((n, n)) for h in heads}
    return attr.AttentionEvidence(att, grads, rng.standard_normal((n, 4)))


@pytest.fixture(scope="module")
def sample():
    return T.gen_dataset(T.GenSpec(hops=3, sample_count=1, target_len_tokens=96, seed=1))[0][0]


@pytest.fixture(scope="module")
def params():
    return M.init_params(M.ModelConfig(n_layers=2, n_heads=2, d_model=16, vocab_size=len(T.DEFAULT_VOCAB), max_seq=128))


# ig_matrix


def test_ig_matrix_hand_value_and_zero_gradient():
    A = np.zeros((3, 3))
    A[2, 1] = 0.5
    g = np.zeros((3, 3))
    g[2, 1] = -0.3
    assert attr.ig_matrix(A, g)[1, 2] == pytest.approx(0.15)
    assert not attr.ig_matrix(A, np.zeros((3, 3))).any()


def test_ig_matrix_inherits_causal_zeros():
    rng = np.random.default_rng(0)
    ig = attr.ig_matrix(_causal_rows(rng, 6), rng.standard_normal((6, 6)))
    assert np.all(ig >= 0)
    assert np.all(ig[np.tril_indices(6, -1)] == 0)


def test_ig_matrix_shape_mismatch():
    with pytest.raises(DimensionError):
        attr.ig_matrix(np.zeros((3, 3)), np.zeros((3, 4)))


# class and token scores


def test_constant_field_gives_constant_score():
    n = 5
    A = np.full((n, n), 0.5)
    g = np.full((n, n), 0.4)
    ev = attr.AttentionEvidence({(0, 0): A}, {(0, 0): g})
    s = attr.ig_class_score(ev, {"sup": [0, 1, 2]}, [4])
    assert s.scores["sup"] == pytest.approx(0.2)


def test_empty_class_is_undefined():
    with pytest.raises(attr.UndefinedClassError):
        attr.ig_class_score(_evidence(0), {"sup": []}, [7])


def test_singleton_class_equals_token_score():
    ev = _evidence(1)
    ans = [6, 7]
    for i in range(6):
        s = attr.ig_class_score(ev, {"x": [i]}, ans).scores["x"]
        assert s == pytest.approx(attr.ig_token_score(ev, i, ans), rel=1e-12)


def test_token_scores_are_additive_over_a_partition():
    ev = _evidence(2)
    ans = [7]
    parts = {"a": [0, 3, 4], "b": [1, 2], "c": [5, 6]}
    cls = attr.ig_class_score(ev, parts, ans).scores
    total = sum(cls[r] * len(idx) for r, idx in parts.items())
    assert total == pytest.approx(attr.ig_token_scores(ev, ans)[:7].sum(), rel=1e-12)


def test_token_scores_ignore_class_labels():
    ev = _evidence(3)
    a = attr.ig_token_scores(ev, [7])
    attr.ig_class_score(ev, {"sup": [1, 2], "irr": [3]}, [7])
    assert np.array_equal(a, attr.ig_token_scores(ev, [7]))


def test_token_score_bounds():
    with pytest.raises(IndexError):
        attr.ig_token_score(_evidence(0), 8, [7])


def test_zero_attention_token_scores_zero():
    ev = _evidence(4)
    for h in ev.heads:
        ev.attention[h][:, 2] = 0.0
    assert attr.ig_token_score(ev, 2, [5, 6, 7]) == 0.0


def test_top_k_heads_selects_by_critical_mass():
    ev = _evidence(5)
    s = attr.ig_class_score(ev, {"sup": [0, 1], "inter": [2], "irr": [3, 4]}, [7], head_mode="top_k_heads", top_heads=2)
    assert len(s.heads) == 2
    full = attr.ig_class_score(ev, {"sup": [0, 1], "inter": [2], "irr": [3, 4]}, [7], head_mode="top_k_heads", top_heads=30)
    assert full.heads == ev.heads


# FR


def test_fr_full_and_empty_coverage():
    A = np.zeros((4, 4))
    A[3] = [0.4, 0.3, 0.2, 0.1]
    att = {(0, 0): A}
    fr = attr.fr_score(att, [3], 2, {"sup": [0, 1], "irr": [2, 3]})
    assert fr.scores == {"sup": 1.0, "irr": 0.0}


def test_fr_clamps_k_with_warning():
    att = {(0, 0): np.eye(3)}
    with pytest.warns(UserWarning, match="clamped"):
        fr = attr.fr_score(att, [2], 30, {"sup": [0, 1]})
    assert fr.clamped and fr.scores["sup"] == 1.0


def test_fr_rejects_bad_arguments():
    with pytest.raises(ValueError):
        attr.fr_score({(0, 0): np.eye(3)}, [2], 0, {"sup": [0]})
    with pytest.raises(ValueError):
        attr.fr_score({(0, 0): np.eye(3)}, [], 1, {"sup": [0]})


def test_fr_per_step_averages_to_mean():
    ev = _evidence(6)
    sets = {"sup": [0, 1, 2], "irr": [3, 4]}
    steps = attr.fr_score(ev.attention, [5, 6, 7], 3, sets, per_step=True)
    mean = attr.fr_score(ev.attention, [5, 6, 7], 3, sets)
    assert np.mean([s.scores["sup"] for s in steps]) == pytest.approx(mean.scores["sup"])


# gradient norms and proportionality


def test_embgrad_norms_examples():
    g = np.zeros((2, 6))
    g[1, :2] = [3, 4]
    assert attr.embgrad_norms(g).tolist() == [0.0, 5.0]
    with pytest.raises(attr.MissingEvidenceError):
        attr.embgrad_norms(None)


def test_embgrad_norms_rotation_invariant():
    rng = np.random.default_rng(0)
    g = rng.standard_normal((7, 5))
    Q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    np.testing.assert_allclose(attr.embgrad_norms(g @ Q), attr.embgrad_norms(g), rtol=1e-12)


def test_spearman_examples():
    x = [0.1, 0.5, 0.2, 0.9]
    assert attr.spearman(x, x) == pytest.approx(1.0)
    assert attr.spearman(x, [-v for v in x]) == pytest.approx(-1.0)
    rep = attr.proportionality_report(np.ones(4), np.arange(4.0), [0, 1, 2, 3])
    assert rep["spearman"] is None and not rep["defined"]


def test_minmax_records_constants():
    norm, (lo, hi) = attr.minmax({"sup": 3.0, "irr": 1.0, "low": 2.0})
    assert norm == {"sup": 1.0, "irr": 0.0, "low": 0.5} and (lo, hi) == (1.0, 3.0)


# on a real model


def test_collect_evidence_shapes_and_rows(params, sample):
    ev = attr.collect_evidence(params, sample)
    n = len(sample)
    assert len(ev.heads) == 4 and ev.embedding_grad.shape == (n, 16)
    for h in ev.heads:
        np.testing.assert_allclose(ev.attention[h].sum(1), 1.0, atol=1e-9)
    assert ev.loss > 0


def test_probe_sample_record(params, sample):
    rec = attr.probe_sample(params, sample, k=30)
    assert set(rec["ig"]) == set(T.CONTEXT_CLASSES)
    assert all(0 <= v <= 1 for v in rec["fr"].values())
    assert all(v >= 0 for v in rec["ig"].values())
    assert len(rec["token_ig"]) == len(sample) == len(rec["grad_norm"])


def test_answer_positions_are_prediction_rows(sample):
    ans = attr.answer_positions(sample)
    assert ans.tolist() == [sample.answer_span[0] - 1]
    assert T.DEFAULT_VOCAB.decode([sample.tokens[ans[0]]]) == ["<ans>"]


@given(st.integers(0, 2**31), st.floats(0.01, 100))
@settings(max_examples=40, deadline=None)
def test_loss_scaling_scales_scores_and_keeps_rankings(seed, c):
    ev = _evidence(seed)
    scaled = attr.AttentionEvidence(ev.attention, {h: g * c for h, g in ev.grads.items()}, ev.embedding_grad * c)
    ans = [6, 7]
    sets = {"sup": [0, 1], "inter": [2, 3], "irr": [4, 5]}
    a, b = attr.ig_class_score(ev, sets, ans), attr.ig_class_score(scaled, sets, ans)
    for r in sets:
        assert b.scores[r] == pytest.approx(c * a.scores[r], rel=1e-9)
    assert a.ordering() == b.ordering()
    ta, tb = attr.ig_token_scores(ev, ans), attr.ig_token_scores(scaled, ans)
    np.testing.assert_allclose(tb, c * ta, rtol=1e-9)
    na, nb = attr.embgrad_norms(ev.embedding_grad), attr.embgrad_norms(scaled.embedding_grad)
    ctx = list(range(6))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert attr.spearman(ta[ctx], na[ctx]) == pytest.approx(attr.spearman(tb[ctx], nb[ctx]))


@given(st.integers(0, 2**31), st.integers(1, 10))
@settings(max_examples=40, deadline=None)
def test_scores_in_range(seed, k):
    ev = _evidence(seed)
    sets = {"sup": [0, 1], "irr": [2, 3, 4]}
    fr = attr.fr_score(ev.attention, [6, 7], min(k, 8), sets)
    assert all(0.0 <= v <= 1.0 for v in fr.scores.values())
    ig = attr.ig_class_score(ev, sets, [6, 7])
    assert all(np.isfinite(v) and v >= 0 for v in ig.scores.values())
