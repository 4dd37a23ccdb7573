import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdtlab import model as M
from cdtlab import taskgen as T
from cdtlab import trainer as TR
from cdtlab.diffcore import DimensionError

MC = M.ModelConfig(n_layers=1, n_heads=2, d_model=16, vocab_size=len(T.DEFAULT_VOCAB), max_seq=96)


@pytest.fixture(scope="module")
def data():
    return T.gen_dataset(T.GenSpec(hops=3, sample_count=40, target_len_tokens=80, seed=5))[0]


def _cfg(**kw):
    base = dict(lr=1e-3, steps=4, batch_size=4, eval_interval=2, eval_samples=6, probe_samples=2)
    return TR.TrainConfig(**{**base, **kw})


def _same(p, q):
    return all(np.array_equal(p[k], q[k]) for k in p.names())


# adam


def _scalar_params(x):
    return M.Parameters(MC, {"w": np.array([x])})


def test_adam_first_step_scalar_oracle():
    lr, eps, g = 0.1, 1e-8, -0.37
    p = _scalar_params(2.0)
    q, st_ = TR.adam_update(p, {"w": np.array([g])}, TR.AdamState.zeros(p), lr, (0.9, 0.95), eps)
    # m_hat = g, v_hat = g^2 after bias correction
    assert q["w"][0] == pytest.approx(2.0 - lr * g / (abs(g) + eps), rel=1e-12)
    assert st_.step == 1
    assert st_.m["w"][0] == pytest.approx(0.1 * g) and st_.v["w"][0] == pytest.approx(0.05 * g * g)


def test_adam_second_step_scalar_oracle():
    b1, b2, lr, eps = 0.9, 0.95, 0.01, 1e-8
    p = _scalar_params(1.0)
    s = TR.AdamState.zeros(p)
    gs = [0.5, -0.2]
    m = v = 0.0
    x = 1.0
    for t, g in enumerate(gs, 1):
        p, s = TR.adam_update(p, {"w": np.array([g])}, s, lr, (b1, b2), eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    assert p["w"][0] == pytest.approx(x, rel=1e-12)


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = _scalar_params(1.0)
    s = TR.AdamState(3, {"w": np.array([0.4])}, {"w": np.array([0.2])})
    q, s2 = TR.adam_update(p, {"w": np.zeros(1)}, TR.AdamState(0, {"w": np.zeros(1)}, {"w": np.zeros(1)}), 0.1)
    assert q["w"][0] == 1.0
    _, s3 = TR.adam_update(p, {"w": np.zeros(1)}, s, 0.1)
    assert s3.m["w"][0] == pytest.approx(0.36) and s3.v["w"][0] == pytest.approx(0.19)


def test_adam_shape_mismatch():
    p = _scalar_params(1.0)
    with pytest.raises(DimensionError):
        TR.adam_update(p, {"w": np.zeros(2)}, TR.AdamState.zeros(p), 0.1)


def test_clip_by_global_norm():
    g, norm = TR.clip_by_global_norm({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
    assert norm == 5.0 and g["a"][0] == pytest.approx(0.6) and g["b"][0] == pytest.approx(0.8)
    g, _ = TR.clip_by_global_norm({"a": np.array([0.3])}, 1.0)
    assert g["a"][0] == 0.3


def test_config_rules():
    with pytest.raises(ValueError):
        TR.TrainConfig(objective="DPO")
    with pytest.raises(ValueError):
        TR.TrainConfig(objective="CDT", beta=-1)
    with pytest.raises(ValueError, match="unknown"):
        TR.TrainConfig.from_dict({"learning_rate": 1})
    assert TR.TrainConfig(objective="CE", beta=123.0).objective == "CE"


# steps


def test_ce_step_overfits_one_sample(data):
    p = M.init_params(MC)
    s = TR.AdamState.zeros(p)
    batch = TR.Batch.collate(data[:1])
    cfg = _cfg(lr=3e-3)
    for step in range(500):
        p, s, stats = TR.ce_step(p, s, batch, cfg)
        assert np.isfinite(stats["grad_norm"])
        if stats["loss"] < 0.05:
            break
    assert stats["loss"] < 0.05


def test_single_batch_descent(data):
    p = M.init_params(MC)
    s = TR.AdamState.zeros(p)
    batch = TR.Batch.collate(data[:8])
    losses = []
    for _ in range(50):
        p, s, stats = TR.ce_step(p, s, batch, _cfg())
        losses.append(stats["loss"])
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    assert losses[-1] < losses[0]


def test_cdt_beta_zero_equals_ce(data):
    p = q = M.init_params(MC)
    sp = sq = TR.AdamState.zeros(p)
    for step in range(1, 4):
        batch = TR.Batch.collate([data[i] for i in TR.batch_indices(step, len(data), 4, 0)])
        p, sp, _ = TR.ce_step(p, sp, batch, _cfg())
        q, sq, _ = TR.cdt_step(q, sq, batch, _cfg(objective="CDT", beta=0.0))
    assert _same(p, q)


def test_all_critical_masks_degrade_to_ce(data, monkeypatch):
    p = M.init_params(MC)
    batch = TR.Batch.collate(data[:4])
    ref, _, _ = TR.ce_step(p, TR.AdamState.zeros(p), batch, _cfg())
    monkeypatch.setattr(TR, "detect_batch", lambda b, g: [TR.detect_noise(np.ones(len(s))) for s in b.samples])
    out, _, _ = TR.cdt_step(p, TR.AdamState.zeros(p), batch, _cfg(objective="CDT", beta=1e4))
    assert _same(ref, out)


def test_detection_pass_leaves_params_and_state_untouched(data):
    p = M.init_params(MC)
    before = p.copy()
    batch = TR.Batch.collate(data[:4])
    E, G, loss = TR.detection_pass(p, batch, "answer_only")
    assert _same(p, before) and E.shape == G.shape == (4, batch.tokens.shape[1], MC.d_model)
    assert np.isfinite(loss)


def test_detection_gradients_are_per_sample(data):
    p = M.init_params(MC)
    batch = TR.Batch.collate(data[:3])
    _, G, _ = TR.detection_pass(p, batch, "answer_only")
    _, G1, _ = TR.detection_pass(p, TR.Batch.collate(data[1:2]), "answer_only")
    n = len(data[1])
    np.testing.assert_allclose(G[1, :n], G1[0, :n], rtol=1e-9, atol=1e-14)


def test_cdt_step_stats(data):
    p = M.init_params(MC)
    _, _, stats = TR.cdt_step(p, TR.AdamState.zeros(p), TR.Batch.collate(data[:4]), _cfg(objective="CDT", beta=1.0))
    assert 0 < stats["mask_density"] < 1
    assert stats["loss"] <= stats["loss_detect"] + 1e-12
    assert all(stats[k] > 0 for k in TR.TIMING_COLUMNS)
    with pytest.raises(ValueError):
        TR.cdt_step(p, TR.AdamState.zeros(p), TR.Batch.collate(data[:4]), _cfg())


def test_collate_pads_right(data):
    b = TR.Batch.collate([data[0], data[1]])
    assert b.tokens.shape[1] == max(len(data[0]), len(data[1]))
    for i, s in enumerate((data[0], data[1])):
        assert tuple(b.tokens[i, : len(s)]) == s.tokens
        assert not b.tokens[i, len(s):].any()


# evaluation


def test_untrained_exact_match_near_chance(data):
    assert TR.predict(M.init_params(MC), data).mean() <= 0.05


def test_perfect_detector():
    assert TR.precision_recall([3, 5, 9], [3, 5, 9]) == (1.0, 1.0)
    assert TR.precision_recall([3, 4], [3, 5]) == (0.5, 0.5)


def test_evaluate_record(data):
    ev = TR.evaluate(M.init_params(MC), data[:6], k=30, probe_samples=2)
    assert len(ev["verdicts"]) == 6
    for name in ("grad", "attention"):
        assert ev["detection"][name]["selected"] == 2 * 30
        assert 0 <= ev["detection"][name]["precision"] <= 1
    assert set(ev["ig"]) == set(T.CONTEXT_CLASSES)


def test_evaluate_clamps_top_k(data):
    ev = TR.evaluate(M.init_params(MC), data[:1], k=10_000, probe_samples=1)
    assert ev["detection"]["grad"]["selected"] == data[0].question_span[0] - 1


# run log and loop


def test_runlog_rules(tmp_path):
    log = TR.RunLog()
    log.append({"step": 2, "train_loss": 1.0, "t_detect": 0.5})
    with pytest.raises(ValueError):
        log.append({"step": 2})
    log.append({"step": 4, "train_loss": 0.5, "t_detect": 0.7})
    log.write(tmp_path / "r.csv")
    back = TR.RunLog.read(tmp_path / "r.csv")
    assert back.to_csv() == log.to_csv()
    assert list(back.rows[0]) == list(TR.RUNLOG_COLUMNS)
    other = TR.RunLog([dict(r, t_detect=9.0) for r in log.rows])
    assert other.digest() == log.digest()


def test_split_by_parity(data):
    train, held = TR.split_by_parity(data)
    assert {s.seed % 2 for s in train} == {0} and {s.seed % 2 for s in held} == {1}
    assert len(train) + len(held) == len(data)


@given(st.integers(1, 200), st.integers(1, 50), st.integers(1, 16), st.integers(0, 10))
@settings(max_examples=60, deadline=None)
def test_batch_indices_cover_each_epoch(step, n, bs, seed):
    idx = TR.batch_indices(step, n, bs, seed)
    assert len(idx) == bs and idx.min() >= 0 and idx.max() < n
    assert np.array_equal(idx, TR.batch_indices(step, n, bs, seed))
    epoch = np.concatenate([TR.batch_indices(s, n, 1, seed) for s in range(1, n + 1)])
    assert sorted(epoch.tolist()) == list(range(n))


def test_train_is_deterministic(data):
    a = TR.train(_cfg(objective="CDT", beta=1.0), data, MC)
    b = TR.train(_cfg(objective="CDT", beta=1.0), data, MC)
    assert a[1].digest() == b[1].digest() and _same(a[0], b[0])
    assert [r["step"] for r in a[1].rows] == [2, 4]


def test_resume_matches_uninterrupted(data, tmp_path):
    cfg = _cfg(objective="CDT", beta=1.0, steps=6, checkpoint_interval=2, eval_interval=3)
    full, full_log, _ = TR.train(cfg, data, MC, run_dir=tmp_path / "full")
    TR.train(cfg, data, MC, run_dir=tmp_path / "cut", stop_after=4)
    resumed, log, _ = TR.train(cfg, data, MC, run_dir=tmp_path / "cut")
    assert _same(full, resumed)
    assert log.digest() == full_log.digest()
    assert TR.RunLog.read(tmp_path / "cut" / "runlog.csv").digest() == full_log.digest()
    ckpt, extra = M.load_checkpoint(tmp_path / "full" / "ckpt_step6.bin")
    assert extra["step"] == 6
    assert (tmp_path / "full" / "ckpt_step6.bin").read_bytes() == (tmp_path / "cut" / "ckpt_step6.bin").read_bytes()


def test_divergence_writes_diagnostic_checkpoint(data, tmp_path, monkeypatch):
    real = TR.ce_step

    def poisoned(params, state, batch, config):
        p, s, stats = real(params, state, batch, config)
        if s.step == 2:
            stats = dict(stats, loss=float("nan"))
        return p, s, stats

    monkeypatch.setattr(TR, "ce_step", poisoned)
    with pytest.raises(TR.TrainingDivergedError):
        TR.train(_cfg(), data, MC, run_dir=tmp_path)
    assert (tmp_path / "diverged_step2.bin").exists()


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        TR.train(_cfg(), [], MC)
