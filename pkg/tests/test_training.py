import math

import numpy as np
import pytest

from snapgp import diffcore as dc
from snapgp import hsgp
from snapgp import model as gm
from snapgp import training as tr
from snapgp import variational as vi
from snapgp.data import SnapshotDataset, make_split, synth_generate
from snapgp.transport import PointCloud, sinkhorn_divergence


def _small_task(seed=1):
    ds, _ = synth_generate(2, 5, 120, range(4), seed)
    return ds, make_split(ds, "custom", [])


def _fast(**kw):
    base = dict(max_iterations=20, batch_per_time=32, log_every=0, val_every=5, sinkhorn_max_iter=40)
    base.update(kw)
    return tr.TrainConfig(**base)


def _prior_matching(model, seed):
    """Variational state equal to the prior at the hyperparameters drawn from ``seed``."""
    st = model.state
    arr = st.arrays()
    for k in arr:
        if k.split(".")[0] in ("ell_f", "sig_f", "ell_s", "sig_s"):
            arr[k] = np.zeros_like(arr[k])  # standard lognormal: zero KL
    st = vi.VariationalState.from_arrays(arr)
    hyp = gm.sample_phi(st, np.random.default_rng(seed)).hypers
    for A, basis, ell, sig in (("A_f", model.basis_f, hyp.ell_f, hyp.sig_f),
                               ("A_s", model.basis_s, hyp.ell_s, hyp.sig_s)):
        s = np.array([np.asarray(hsgp.spectral_weights(basis, ell[l], sig[l])) for l in range(ell.size)])
        arr[f"{A}.mean"] = np.zeros_like(arr[f"{A}.mean"])
        arr[f"{A}.log_sd"] = 0.5 * np.log(s)
    return model.with_state(vi.VariationalState.from_arrays(arr))


def test_kl_zero_at_prior_and_total_is_sum():
    cfg = gm.ModelConfig(L=2, G=3, M=4)
    m = _prior_matching(gm.build_model(cfg, [0.0, 1.0, 2.0]), seed=1)
    rng = np.random.default_rng(0)
    batches = {t: tr.Batch(rng.normal(size=(10, 3))) for t in (0.0, 1.0, 2.0)}
    tc = _fast()
    loss, parts = tr.compute_loss(m, batches, tc, np.random.default_rng(1))
    assert abs(parts.kl) < 1e-9
    # recompute each term independently with the same random stream
    rng = np.random.default_rng(1)
    phi = gm.sample_phi(m.state, rng)
    transport = 0.0
    for t in sorted(batches):
        gen = tr.generate_for_batch(m, phi, t, batches[t], rng)
        transport += sinkhorn_divergence(PointCloud(batches[t].X), PointCloud(gen), blur=tc.blur,
                                         scaling=tc.scaling, tol=tc.sinkhorn_tol,
                                         max_iter=tc.sinkhorn_max_iter).cost
    kl = float(vi.kl_total(m.state, m.basis_f, m.basis_s, phi.hypers))
    assert float(loss) == pytest.approx(transport + kl, abs=1e-12)
    assert parts.total == pytest.approx(float(loss), abs=1e-12)


def test_transport_vanishes_when_generation_matches():
    cfg = gm.ModelConfig(L=2, G=2, M=3)
    m = gm.build_model(cfg, [0.0, 1.0])
    arr = m.state.arrays()
    arr["A_f.mean"][:] = 0.0
    arr["A_s.mean"][:] = 0.0
    arr["A_s.mean"][:, 0] = -1e3       # latent sd exp(-1e3 * phi_0) underflows to 0 in the domain
    for k in ("A_f.log_sd", "A_s.log_sd"):
        arr[k][:] = -800.0
    m = m.with_state(vi.VariationalState.from_arrays(arr))
    b = np.array([0.5, -1.5])
    m.decoder = gm.DecoderParams([np.eye(2)], [b])
    batches = {t: tr.Batch(np.tile(b, (6, 1))) for t in (0.0, 1.0)}
    _, parts = tr.compute_loss(m, batches, _fast(), np.random.default_rng(2))
    for t, c in parts.per_time.items():
        assert c <= 1e-9


def test_empty_minibatch_rejected():
    m = gm.build_model(gm.ModelConfig(L=2, G=2, M=3), [0.0, 1.0])
    with pytest.raises(ValueError, match="empty"):
        tr.compute_loss(m, {0.0: tr.Batch(np.zeros((0, 2)))}, _fast(), np.random.default_rng(0))


def test_adam_zero_gradient_and_quadratic():
    p = {"x": np.array([1.0, -2.0])}
    opt = tr.AdamState(1e-3)
    out = tr.adam_update(p, {"x": np.zeros(2)}, opt)
    np.testing.assert_array_equal(out["x"], p["x"])
    target = np.array([0.3, 0.7])
    f = lambda x: float(np.sum((x - target) ** 2))
    opt = tr.AdamState(1e-2)
    new = tr.adam_update(p, {"x": 2 * (p["x"] - target)}, opt)
    assert f(new["x"]) < f(p["x"])


def test_train_step_with_frozen_leaves_keeps_them():
    ds, split = _small_task()
    tc = _fast()
    data = tr.prepare_data(ds, split, tc)
    m = gm.build_model(gm.ModelConfig(L=2, G=5, M=4), ds.times)
    batches = {t: data.batch(t, data.pools[t][:16], False) for t in data.times}
    frozen = set(tr.model_arrays(m))
    new, _ = tr.train_step(m, tr.AdamState(1e-2), batches, tc, np.random.default_rng(0), frozen=frozen)
    for k, v in tr.model_arrays(m).items():
        assert np.array_equal(tr.model_arrays(new)[k], v)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
def test_divergence_reports_iteration():
    ds, split = _small_task()
    tc = _fast()
    data = tr.prepare_data(ds, split, tc)
    m = gm.build_model(gm.ModelConfig(L=2, G=5, M=4), ds.times)
    m.decoder.weights[0] = m.decoder.weights[0] * 1e300
    batches = {t: data.batch(t, data.pools[t][:8], False) for t in data.times}
    with pytest.raises(tr.DivergenceError, match="iteration 7"):
        tr.train_step(m, tr.AdamState(1e-3), batches, tc, np.random.default_rng(0), iteration=7)


def test_two_hundred_steps_halve_the_loss():
    ds, split = _small_task()
    tc = tr.TrainConfig(max_iterations=200, batch_per_time=64, data_init=False, learning_rate=1e-2,
                        log_every=0, val_every=20)
    res = tr.fit(ds, split, gm.ModelConfig(L=2, G=5, M=6), tc)
    total = np.array(res.report.transport) + np.array(res.report.kl)
    assert total[-10:].mean() <= 0.5 * total[:10].mean()
    assert np.all(np.isfinite(total))
    assert min(res.report.kl) >= -1e-9


def test_zero_iterations_returns_init():
    ds, split = _small_task()
    res = tr.fit(ds, split, gm.ModelConfig(L=2, G=5, M=4), _fast(max_iterations=0, data_init=False))
    ref = gm.build_model(gm.ModelConfig(L=2, G=5, M=4), ds.times, seed=0)
    for k, v in tr.model_arrays(ref).items():
        assert np.array_equal(tr.model_arrays(res.model)[k], v)
    assert res.report.iterations == [] and res.report.val_loss == []
    assert res.report.best_iteration == 0


def test_fit_is_deterministic():
    ds, split = _small_task()
    cfg = gm.ModelConfig(L=2, G=5, M=4)
    a = tr.fit(ds, split, cfg, _fast())
    b = tr.fit(ds, split, cfg, _fast())
    assert a.report.best_iteration == b.report.best_iteration
    assert a.report.transport == b.report.transport
    for k, v in tr.model_arrays(a.model).items():
        assert np.array_equal(tr.model_arrays(b.model)[k], v)


def test_lr_trace_multiplicative_and_reload(tmp_path):
    ds, split = _small_task()
    tc = _fast(max_iterations=60, lr_patience_iterations=5, learning_rate=5e-2)
    res = tr.fit(ds, split, gm.ModelConfig(L=2, G=5, M=4), tc)
    lr = res.report.lr
    for a, b in zip(lr, lr[1:]):
        assert b == a or b == a * tc.lr_decay_factor
    assert lr[-1] < lr[0]
    assert all(i < j for i, j in zip(res.report.iterations, res.report.iterations[1:]))
    gm.save_model(tmp_path / "best.bin", res.model)
    back = gm.load_model(tmp_path / "best.bin")
    val = tr.validation_loss(back, res.data.validation_batches(), tc)
    assert abs(val - res.report.best_val_loss) < 1e-9
    res.report.write_csv(tmp_path / "log.csv")
    header = (tmp_path / "log.csv").read_text().splitlines()[0]
    assert header == "iteration,transport,kl,lr,val_loss"


def test_validation_rows_excluded_from_pools():
    ds, split = _small_task()
    data = tr.prepare_data(ds, split, _fast())
    assert len(data.val_rows) == 3
    for t, rows in data.val_rows.items():
        assert not set(rows) & set(data.pools[t])
        assert rows.size == 6  # 5% of 120


def test_few_training_times_warn():
    rng = np.random.default_rng(3)
    ds = SnapshotDataset([0.0, 1.0], [rng.normal(size=(40, 2)) for _ in range(2)])
    with pytest.warns(UserWarning, match="only 2 training times"):
        tr.prepare_data(ds, make_split(ds, "custom", []), _fast())
    with pytest.raises(ValueError, match="at least 2"):
        tr.prepare_data(ds, make_split(ds, "custom", [1]), _fast())


def test_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        tr.TrainConfig(validation_fraction=1.0)
    with pytest.raises(ValueError, match="init_whiten"):
        tr.TrainConfig(init_whiten="global")
    with pytest.raises(ValueError, match="unknown"):
        tr.TrainConfig.from_dict({"lr": 1.0})
    assert tr.TrainConfig.from_dict(tr.TrainConfig().to_dict()) == tr.TrainConfig()
    assert math.isclose(tr.TrainConfig().learning_rate, 1e-3)
