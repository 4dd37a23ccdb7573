import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdtlab import diffcore as dc
from cdtlab import model as M
from gradcheck import numeric_grad, relative_error

TINY = M.ModelConfig(n_layers=2, n_heads=2, d_model=8, vocab_size=11, max_seq=16)


def _tokens(seed, n=6, vocab=11, b=None):
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab, n if b is None else (b, n))


def _loss(params, tokens, mode="all_positions"):
    logits, _ = M.forward(params, tokens)
    return M.lm_loss(logits, tokens, mode, [(3, 5)], [len(tokens)]).item()


def test_init_is_deterministic_and_seed_sensitive():
    a, b = M.init_params(TINY), M.init_params(TINY)
    assert all(np.array_equal(a[k], b[k]) for k in a.names())
    c = M.init_params(M.ModelConfig(**{**TINY.__dict__, "init_seed": 1}))
    assert any(not np.array_equal(a[k], c[k]) for k in a.names())


def test_init_statistics():
    p = M.init_params(M.ModelConfig())
    assert p["tok_emb"].std() == pytest.approx(0.02, rel=0.05)
    assert np.all(p["layer0.ln1.g"] == 1) and np.all(p["layer1.ff.b1"] == 0)


def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        M.ModelConfig(position_scheme="rope")
    with pytest.raises(ValueError, match="unknown"):
        M.ModelConfig.from_dict({"n_layer": 2})


@pytest.mark.parametrize("scheme", ["learned", "sinusoidal"])
def test_attention_rows_valid_and_causal(scheme):
    cfg = M.ModelConfig(**{**TINY.__dict__, "position_scheme": scheme})
    _, trace = M.forward(M.init_params(cfg), _tokens(0, 7))
    for (l, h), A in trace.attention_map().items():
        assert A.shape == (7, 7)
        np.testing.assert_allclose(A.sum(-1), 1.0, atol=1e-9)
        assert np.all(A[np.triu_indices(7, 1)] == 0.0)


def test_default_embeddings_are_lookup_plus_position():
    p = M.init_params(TINY)
    toks = _tokens(1)
    _, trace = M.forward(p, toks)
    np.testing.assert_array_equal(trace.embeddings.data[0], p["tok_emb"][toks] + p["pos_emb"][: len(toks)])


def test_identity_override_is_bit_identical():
    p = M.init_params(TINY)
    toks = _tokens(2)
    a, _ = M.forward(p, toks)
    b, _ = M.forward(p, toks, embedding_override=M.base_embeddings(p, toks)[0])
    assert np.array_equal(a.data, b.data)


def test_override_changes_output_but_not_table_gradient_path():
    p = M.init_params(TINY)
    toks = _tokens(3)
    E = M.base_embeddings(p, toks)[0]
    E2 = E + 0.5
    with dc.Tape():
        logits, trace = M.forward(p, toks, embedding_override=E2)
        g = dc.backward(M.lm_loss(logits, toks, "all_positions"))
    ref, _ = M.forward(p, toks, taps=(), embedding_override=E2, frozen=True)
    np.testing.assert_allclose(logits.data, ref.data, rtol=0, atol=1e-12)
    assert np.any(g[trace.params["tok_emb"]] != 0)


def test_malformed_override_and_length():
    p = M.init_params(TINY)
    with pytest.raises(dc.DimensionError):
        M.forward(p, _tokens(0), embedding_override=np.zeros((5, 8)))
    with pytest.raises(M.LengthError):
        M.forward(p, _tokens(0, n=17))


def test_causality_probe():
    p = M.init_params(TINY)
    toks = np.array([1, 2, 3])
    a, _ = M.forward(p, toks)
    b, _ = M.forward(p, np.array([1, 2, 9]))
    assert np.array_equal(a.data[0, 0], b.data[0, 0])
    assert np.array_equal(a.data[0, 1], b.data[0, 1])


def test_forward_is_pure():
    p = M.init_params(TINY)
    toks = _tokens(4, b=3)
    a, _ = M.forward(p, toks)
    b, _ = M.forward(p, toks)
    assert np.array_equal(a.data, b.data)


def test_batched_matches_single():
    p = M.init_params(TINY)
    toks = _tokens(5, b=3)
    batched, _ = M.forward(p, toks)
    for i in range(3):
        single, _ = M.forward(p, toks[i])
        np.testing.assert_allclose(batched.data[i], single.data[0], rtol=0, atol=1e-12)


def test_initial_loss_near_log_vocab():
    cfg = M.ModelConfig(n_layers=2, n_heads=4, d_model=64, vocab_size=512, max_seq=64)
    losses = []
    for seed in range(20):
        p = M.init_params(M.ModelConfig(**{**cfg.__dict__, "init_seed": seed}))
        toks = _tokens(seed, n=32, vocab=512)
        losses.append(_loss(p, toks))
    assert np.mean(losses) == pytest.approx(np.log(512), rel=0.10)


def test_loss_modes():
    toks = np.array([[5, 6, 7, 8, 9]])
    w = M.loss_weights(toks, "all_positions")
    assert w[0].tolist() == pytest.approx([0.25, 0.25, 0.25, 0.25, 0.0])
    # one-token answer at index 3 is predicted from position 2
    w = M.loss_weights(toks, "answer_only", [(3, 4)])
    assert np.flatnonzero(w[0]).tolist() == [2] and w.sum() == 1.0
    with pytest.raises(dc.PreconditionError):
        M.loss_weights(toks, "answer_only", [(3, 3)])
    with pytest.raises(dc.PreconditionError):
        M.loss_weights(toks, "answer_only")


def test_single_token_answer_reduces_to_one_position_ce():
    p = M.init_params(TINY)
    toks = _tokens(6)
    logits, _ = M.forward(p, toks)
    loss = M.lm_loss(logits, toks, "answer_only", [(4, 5)]).item()
    direct = dc.cross_entropy(logits.data[0, 3:4], [toks[4]], [1]).item()
    assert loss == pytest.approx(direct, rel=1e-12)


def test_restricted_logits_match_full():
    p = M.init_params(TINY)
    toks = _tokens(7, b=2)
    rows, cols, targets, weights = M.scored_positions(toks, "all_positions")
    full, _ = M.forward(p, toks)
    part, _ = M.forward(p, toks, logit_positions=(rows, cols))
    np.testing.assert_allclose(part.data, full.data[rows, cols], rtol=0, atol=1e-12)
    assert M.lm_loss_at(part, targets, weights).item() == pytest.approx(M.lm_loss(full, toks, "all_positions").item(), rel=1e-12)


def test_tap_shapes_and_frozen_contract():
    p = M.init_params(TINY)
    toks = _tokens(8, n=5)
    with dc.Tape():
        logits, trace = M.forward(p, toks, taps=("attention", "embeddings"), frozen=True)
        g = dc.backward(M.lm_loss(logits, toks, "all_positions"), [trace.embeddings, *trace.attention])
    assert g[trace.embeddings].shape == (1, 5, TINY.d_model)
    for a in trace.attention:
        assert g[a].shape == (1, TINY.n_heads, 5, 5)
    assert not any(t in g for t in trace.params.values())


def test_frozen_embedding_gradient_equals_unfrozen():
    p = M.init_params(TINY)
    toks = _tokens(9, n=6)
    with dc.Tape():
        logits, trace = M.forward(p, toks, taps=("embeddings",), frozen=True)
        gf = dc.backward(M.lm_loss(logits, toks, "all_positions"), [trace.embeddings])[trace.embeddings]
    with dc.Tape():
        logits, trace = M.forward(p, toks)
        gu = dc.backward(M.lm_loss(logits, toks, "all_positions"), [trace.embeddings])[trace.embeddings]
    np.testing.assert_allclose(gf, gu, rtol=1e-12, atol=1e-15)


def test_full_model_finite_differences():
    # every parameter tensor, 100 seeds, a random subset of coordinates per tensor
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        cfg = M.ModelConfig(n_layers=1 + seed % 2, n_heads=2, d_model=4, vocab_size=7, max_seq=8, init_seed=seed,
                            position_scheme="learned" if seed % 3 else "sinusoidal")
        p = M.init_params(cfg)
        for k in p.names():  # larger weights give a non-trivial landscape
            p.tensors[k] = p.tensors[k] + 0.3 * rng.standard_normal(p[k].shape)
        toks = rng.integers(0, 7, 5)
        with dc.Tape():
            logits, trace = M.forward(p, toks)
            g = dc.backward(M.lm_loss(logits, toks, "all_positions"))
        name = p.names()[seed % len(p.names())]
        coords = rng.choice(p[name].size, min(6, p[name].size), replace=False)

        def f(x, name=name):
            q = p.copy()
            q.tensors[name] = x
            return _loss(q, toks)

        num = numeric_grad(f, p[name], coords).reshape(-1)[coords]
        ana = g[trace.params[name]].reshape(-1)[coords]
        worst = max(worst, relative_error(ana, num))
    assert worst < 1e-5


def test_checkpoint_round_trip(tmp_path):
    p = M.init_params(TINY)
    M.save_checkpoint(p, tmp_path / "c.bin", {"step": 7})
    q, extra = M.load_checkpoint(tmp_path / "c.bin")
    assert extra == {"step": 7} and q.config == p.config
    for k in p.names():
        assert q[k].dtype == np.float64
        np.testing.assert_array_equal(q[k], p[k].astype(np.float32).astype(np.float64))
    header = (tmp_path / "c.bin").read_bytes().split(b"\n", 1)[0]
    assert b'"format_version": 1' in header
    assert (tmp_path / "c.bin").stat().st_size == len(header) + 1 + 4 * M.param_count(p)


@given(st.integers(1, 12), st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_prefix_logits_independent_of_suffix(n, seed):
    p = M.init_params(TINY)
    rng = np.random.default_rng(seed)
    toks = rng.integers(0, 11, n + 2)
    alt = toks.copy()
    alt[n:] = rng.integers(0, 11, 2)
    a, _ = M.forward(p, toks)
    b, _ = M.forward(p, alt)
    np.testing.assert_array_equal(a.data[0, :n], b.data[0, :n])
