import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdvm import autodiff as ad
from gdvm.autodiff import Tape, Tensor, parameter
from gdvm.data import MULTICLASS, MULTILABEL, TaskKind, gen_blobs, gen_multilabel, gen_zeroshot
from gdvm.errors import CheckpointError, ConfigError, DimensionError, NumericAbort
from gdvm.model import (
    BASELINE,
    GDVM,
    GSNN,
    Architecture,
    GdvmModel,
    ModelVariant,
    TrainConfig,
    kl_to_standard_normal,
    latent_means,
    load_checkpoint,
    mc_scores,
    predict_deterministic,
    predict_mc,
    reparameterize,
    save_checkpoint,
    total_loss,
    train,
)
from gdvm.nn import OptimizerState


def dense_arch(n_out=3, k=4, act="softmax", dropout=0.0, mu_activation=None):
    classifier = [dict(kind="dense", out=8), dict(kind="relu")]
    if dropout:
        classifier.append(dict(kind="dropout", rate=dropout))
    classifier.append(dict(kind="dense", out=n_out))
    if act:
        classifier.append(dict(kind=act))
    return Architecture([dict(kind="dense", out=8), dict(kind="relu")], k, classifier, mu_activation)


def make(tag=GDVM, beta=0.5, seed=0, n_in=5, **kw):
    return GdvmModel(dense_arch(**kw), ModelVariant(tag, beta), TaskKind(MULTICLASS, 3), (n_in,), seed=seed)


def mc_kl(mu, logvar, n, rng):
    """E_q[log q(z) - log p(z)] by sampling, the oracle for the closed form."""
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * rng.standard_normal((n, mu.size))
    log_q = -0.5 * (((z - mu) / sigma) ** 2 + logvar + math.log(2 * math.pi)).sum(axis=1)
    log_p = -0.5 * (z ** 2 + math.log(2 * math.pi)).sum(axis=1)
    return float(np.mean(log_q - log_p))


# ---------------------------------------------------------------- encode


def test_zero_heads_give_standard_normal():
    m = make()
    for name in ("mu.0.weight", "logvar.0.weight"):
        m.params[name].data[:] = 0
    mu, logvar = m.encode(np.random.default_rng(0).normal(size=(4, 5)))
    assert np.all(mu.data == 0) and np.all(logvar.data == 0)


def test_encode_deterministic_and_row_independent():
    m = make()
    x = np.random.default_rng(1).normal(size=(2, 5))
    a, b = m.encode(x), m.encode(x)
    np.testing.assert_array_equal(a[0].data, b[0].data)
    np.testing.assert_array_equal(a[1].data, b[1].data)
    swapped = m.encode(x[::-1])
    np.testing.assert_array_equal(swapped[0].data, a[0].data[::-1])


def test_encode_shape_mismatch():
    with pytest.raises(DimensionError):
        make().encode(np.zeros((2, 4)))


def test_baseline_has_no_logvar_head():
    m = make(BASELINE)
    assert m.encode(np.zeros((1, 5)))[1] is None
    assert not any(n.startswith("logvar") for n in m.params)


def test_shared_parameters_identical_across_variants():
    models = [make(tag, seed=3) for tag in (BASELINE, GSNN, GDVM)]
    for name in models[0].params:
        for other in models[1:]:
            np.testing.assert_array_equal(models[0].params[name].data, other.params[name].data)


def test_classifier_width_must_match_task():
    with pytest.raises(DimensionError):
        GdvmModel(dense_arch(n_out=4), ModelVariant(), TaskKind(MULTICLASS, 3), (5,))
    with pytest.raises(ConfigError):
        GdvmModel(dense_arch(n_out=3, act="softmax"), ModelVariant(), TaskKind(MULTILABEL, 3), (5,))


def test_variant_rules():
    assert ModelVariant(GSNN, 3.0).beta == 0.0
    assert ModelVariant(BASELINE, 3.0).beta == 0.0
    assert not ModelVariant(BASELINE).samples and ModelVariant(GSNN).samples
    with pytest.raises(ConfigError):
        ModelVariant(GDVM, -0.1)


# ---------------------------------------------------------------- reparameterize


def test_reparameterize_examples():
    mu = Tensor([[1.0, 2.0]])
    np.testing.assert_array_equal(reparameterize(mu, Tensor([[0.3, -2.0]]), np.zeros((1, 2))).data, mu.data)
    z = reparameterize(mu, Tensor([[0.0, math.log(4.0)]]), np.array([[1.0, -1.0]]))
    np.testing.assert_allclose(z.data, [[2.0, 0.0]], atol=1e-15)
    with pytest.raises(DimensionError):
        reparameterize(mu, Tensor([[0.0]]), np.zeros((1, 2)))


def test_reparameterize_moments():
    n = 10**6
    mu = np.array([0.5, -2.0, 3.0])
    logvar = np.array([0.0, math.log(0.25), math.log(4.0)])
    eps = np.random.default_rng(0).standard_normal((n, 3))
    z = reparameterize(Tensor(np.tile(mu, (n, 1))), Tensor(np.tile(logvar, (n, 1))), eps).data
    np.testing.assert_allclose(z.mean(axis=0), mu, rtol=0.01)
    np.testing.assert_allclose(z.var(axis=0), np.exp(logvar), rtol=0.01)


def test_reparameterize_gradients():
    rng = np.random.default_rng(4)
    for _ in range(20):
        mu, lv, eps = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        w = rng.normal(size=(3, 2))
        pm, pl = parameter(mu), parameter(lv)
        with Tape() as tape:
            ad.backward(tape, ad.sum(ad.mul(reparameterize(pm, pl, eps), Tensor(w))))
        np.testing.assert_allclose(pm.grad, w, rtol=1e-12)
        np.testing.assert_allclose(pl.grad, w * 0.5 * eps * np.exp(lv / 2), rtol=1e-12)
        num = ad.finite_diff_grad(lambda t: ad.sum(ad.mul(reparameterize(Tensor(mu), t, eps), Tensor(w))), lv)
        assert ad.relative_error(pl.grad, num) < 1e-4


# ---------------------------------------------------------------- KL


def test_kl_examples():
    assert kl_to_standard_normal(Tensor(np.zeros((3, 5))), Tensor(np.zeros((3, 5)))).item() == 0.0
    assert kl_to_standard_normal(Tensor([[1.0]]), Tensor([[0.0]])).item() == pytest.approx(0.5, abs=1e-15)
    assert kl_to_standard_normal(Tensor([[0.0]]), Tensor([[-5.477464784989739e-17]])).item() >= 0.0
    v = kl_to_standard_normal(Tensor([[0.0, 0.0]]), Tensor([[math.log(2), math.log(0.5)]])).item()
    by_hand = 0.5 * ((2 - 1 - math.log(2)) + (0.5 - 1 - math.log(0.5)))
    assert v == pytest.approx(by_hand, abs=1e-15)
    assert v == pytest.approx(0.25, abs=1e-3)


def test_kl_examples_against_monte_carlo():
    rng = np.random.default_rng(0)
    for mu, lv in (([1.0], [0.0]), ([0.0, 0.0], [math.log(2), math.log(0.5)])):
        mu, lv = np.array(mu), np.array(lv)
        closed = kl_to_standard_normal(Tensor(mu[None]), Tensor(lv[None])).item()
        assert abs(mc_kl(mu, lv, 10**6, rng) - closed) / closed < 0.01


def test_kl_matches_monte_carlo_on_random_gaussians():
    rng = np.random.default_rng(123)
    for _ in range(10):
        k = int(rng.integers(1, 9))
        mu, lv = rng.normal(size=k), rng.uniform(-1.5, 1.5, size=k)
        closed = kl_to_standard_normal(Tensor(mu[None]), Tensor(lv[None])).item()
        est = mc_kl(mu, lv, 10**6, rng)
        assert abs(est - closed) / closed < 0.01, (k, closed, est)


def test_kl_batch_mean():
    rng = np.random.default_rng(2)
    mu, lv = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    rows = kl_to_standard_normal(Tensor(mu), Tensor(lv), reduce_batch=False).data
    assert kl_to_standard_normal(Tensor(mu), Tensor(lv)).item() == pytest.approx(rows.mean())


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.tuples(st.floats(-20, 20), st.floats(-10, 10)), min_size=1, max_size=8))
def test_kl_nonnegative(pairs):
    mu = np.array([[p[0] for p in pairs]])
    lv = np.array([[p[1] for p in pairs]])
    assert kl_to_standard_normal(Tensor(mu), Tensor(lv)).item() >= 0.0


# ---------------------------------------------------------------- total loss


def test_total_loss_examples():
    task, kl = Tensor(1.0), Tensor(0.25)
    assert total_loss(task, kl, ModelVariant(GDVM, 0.5)).item() == 1.125
    assert total_loss(task, kl, ModelVariant(GDVM, 0.0)).item() == 1.0
    assert total_loss(task, kl, ModelVariant(GSNN, 0.0)).item() == 1.0
    for tag in (BASELINE, GSNN, GDVM):
        assert total_loss(task, Tensor(0.0), ModelVariant(tag, 0.7)).item() == 1.0
    v = ModelVariant(GDVM, 1.0)
    v.beta = -1.0
    with pytest.raises(ConfigError):
        total_loss(task, kl, v)


# ---------------------------------------------------------------- gradients of the full objective


def _loss_fn(model, x, y, eps, name):
    """Scalar loss as a function of parameter ``name`` with every random input frozen."""
    def f(t):
        saved = model.params[name].data
        model.params[name].data = t.data
        try:
            return model.loss(x, y, True, np.random.default_rng(99), None, eps=eps).total
        finally:
            model.params[name].data = saved
    return f


def _relu_margin(monkeypatch, fn):
    """Smallest |input| seen by any relu while ``fn`` runs."""
    seen = [np.inf]
    real = ad.relu

    def spy(x):
        seen[0] = min(seen[0], float(np.abs(x.data).min()))
        return real(x)

    monkeypatch.setattr(ad, "relu", spy)
    try:
        fn()
    finally:
        monkeypatch.setattr(ad, "relu", real)
    return seen[0]


def _kink_free_case(monkeypatch, model, rng, shape_x, n_classes=3, k=4):
    # central differences are only valid away from relu kinks; redraw inputs until every
    # pre-activation is at least 1e-3 from zero (100x the step size)
    while True:
        x, y = rng.normal(size=shape_x), rng.integers(0, n_classes, size=shape_x[0])
        eps = rng.standard_normal((shape_x[0], k))
        margin = _relu_margin(monkeypatch, lambda: model.loss(x, y, True, np.random.default_rng(99), None, eps=eps))
        if margin > 1e-3:
            return x, y, eps


@pytest.mark.parametrize("tag", [GDVM, GSNN, BASELINE])
def test_full_loss_gradient_matches_finite_differences(tag, monkeypatch):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        model = make(tag, beta=0.7, seed=seed, dropout=0.3)
        x, y, eps = _kink_free_case(monkeypatch, model, rng, (6, 5))
        with Tape() as tape:
            ad.backward(tape, model.loss(x, y, True, np.random.default_rng(99), None, eps=eps).total)
        for name, p in model.params.items():
            num = ad.finite_diff_grad(_loss_fn(model, x, y, eps, name), p.data)
            worst = max(worst, ad.relative_error(p.grad, num))
    assert worst < 1e-4


@pytest.mark.parametrize("task", ["multilabel", "zeroshot"])
def test_other_task_gradients(task):
    rng = np.random.default_rng(0)
    if task == "multilabel":
        ds = gen_multilabel(0, n_labels=3, n_samples=6, dim=5)
        arch = dense_arch(n_out=3, act="sigmoid")
    else:
        ds = gen_zeroshot(0, 3, 2, 4, 2, nuisance_dim=1)
        arch = Architecture([dict(kind="dense", out=8), dict(kind="relu")], 4,
                            [dict(kind="dense", out=4), dict(kind="l2normalize")])
    for seed in range(20):
        model = GdvmModel(arch, ModelVariant(GDVM, 0.3), ds.task, ds.input_shape, seed=seed)
        x, y = ds.features[:6], ds.targets[:6]
        eps = rng.standard_normal((len(x), 4))
        with Tape() as tape:
            ad.backward(tape, model.loss(x, y, True, None, None, eps=eps).total)
        for name, p in model.params.items():
            num = ad.finite_diff_grad(_loss_fn(model, x, y, eps, name), p.data)
            assert ad.relative_error(p.grad, num) < 1e-4, name


def test_conv_model_gradient(monkeypatch):
    arch = Architecture(
        [dict(kind="conv", out=2, kernel=2, padding="same"), dict(kind="relu"),
         dict(kind="conv", out=3, kernel=2, stride=2), dict(kind="relu"), dict(kind="maxpool", kernel=2),
         dict(kind="flatten"), dict(kind="dense", out=5), dict(kind="relu")],
        3, [dict(kind="dense", out=4), dict(kind="dropout", rate=0.5), dict(kind="dense", out=3),
            dict(kind="softmax")])
    rng = np.random.default_rng(0)
    model = GdvmModel(arch, ModelVariant(GDVM, 0.5), TaskKind(MULTICLASS, 3), (1, 8, 8), seed=1)
    x, y, eps = _kink_free_case(monkeypatch, model, rng, (3, 1, 8, 8), k=3)
    with Tape() as tape:
        ad.backward(tape, model.loss(x, y, True, np.random.default_rng(99), None, eps=eps).total)
    for name, p in model.params.items():
        num = ad.finite_diff_grad(_loss_fn(model, x, y, eps, name), p.data)
        assert ad.relative_error(p.grad, num) < 1e-4, name


# ---------------------------------------------------------------- reduction identities


def _grads(model, x, y, eps, sample=True):
    with Tape() as tape:
        parts = model.loss(x, y, True, np.random.default_rng(5), None, sample=sample, eps=eps)
        ad.backward(tape, parts.total)
    return parts.total.data.copy(), {n: p.grad.copy() for n, p in model.params.items() if p.grad is not None}


def test_gdvm_beta_zero_equals_gsnn_bitwise():
    rng = np.random.default_rng(0)
    x, y, eps = rng.normal(size=(8, 5)), rng.integers(0, 3, size=8), rng.standard_normal((8, 4))
    la, ga = _grads(make(GDVM, beta=0.0, seed=2, dropout=0.5), x, y, eps)
    lb, gb = _grads(make(GSNN, seed=2, dropout=0.5), x, y, eps)
    assert la.tobytes() == lb.tobytes()
    assert ga.keys() == gb.keys()
    for n in ga:
        np.testing.assert_array_equal(ga[n], gb[n])


def test_gdvm_without_sampling_equals_baseline_bitwise():
    rng = np.random.default_rng(1)
    x, y, eps = rng.normal(size=(8, 5)), rng.integers(0, 3, size=8), rng.standard_normal((8, 4))
    la, ga = _grads(make(GDVM, beta=0.0, seed=4, dropout=0.5), x, y, eps, sample=False)
    lb, gb = _grads(make(BASELINE, seed=4, dropout=0.5), x, y, eps)
    assert la.tobytes() == lb.tobytes()
    for n in gb:
        np.testing.assert_array_equal(ga[n], gb[n])


def test_logvar_clamp_is_counted():
    m = make()
    m.params["logvar.0.bias"].data[:] = 50.0
    parts = m.loss(np.zeros((2, 5)), [0, 1], True, None, np.random.default_rng(0))
    assert parts.clamped == 2 * 4
    assert np.isfinite(parts.total.item())


# ---------------------------------------------------------------- training


def _blobs():
    return gen_blobs(0, n_classes=2, n_per_class=100, dim=2, spread=0.05, radius=2.0)


def test_zero_epochs_is_noop():
    m = make(n_in=2)
    before = m.params.state_dict()
    res = train(m, _blobs(), TrainConfig(0, 20, OptimizerState("adam")), 0)
    assert res.loss_trace == []
    for n, v in m.params.state_dict().items():
        np.testing.assert_array_equal(v, before[n])


@pytest.mark.parametrize("tag", [BASELINE, GSNN, GDVM])
def test_separable_blobs_fit(tag):
    ds = _blobs()
    arch = Architecture([dict(kind="dense", out=16), dict(kind="relu"), dict(kind="dense", out=16), dict(kind="relu")],
                        2, [dict(kind="dense", out=2), dict(kind="softmax")])
    m = GdvmModel(arch, ModelVariant(tag, 0.1), ds.task, ds.input_shape, seed=0)
    res = train(m, ds, TrainConfig(50, 20, OptimizerState("adam", lr=0.01)), 0)
    assert len(res.loss_trace) == 50
    assert np.mean(predict_deterministic(m, ds.features) == ds.targets) >= 0.99


def test_training_is_deterministic():
    def run():
        m = make(n_in=2, dropout=0.5)
        res = train(m, _blobs(), TrainConfig(3, 16, OptimizerState("rmsprop", lr=0.01)), 7)
        return np.array(res.loss_trace).tobytes(), m.params.state_dict()

    (ta, pa), (tb, pb) = run(), run()
    assert ta == tb
    for n in pa:
        assert pa[n].tobytes() == pb[n].tobytes()


def test_non_finite_loss_aborts_with_location():
    ds = _blobs()
    ds.features[150] = np.inf
    m = make(n_in=2)
    with pytest.raises(NumericAbort) as info, np.errstate(invalid="ignore"):
        train(m, ds, TrainConfig(2, 50, OptimizerState("adam")), 0)
    assert info.value.epoch == 0 and "epoch 0" in str(info.value)


# ---------------------------------------------------------------- prediction


def test_deterministic_prediction_ignores_logvar_head():
    m = make()
    x = np.random.default_rng(0).normal(size=(10, 5))
    a = predict_deterministic(m, x)
    m.params["logvar.0.weight"].data[:] = 123.0
    np.testing.assert_array_equal(predict_deterministic(m, x), a)
    np.testing.assert_array_equal(predict_deterministic(m, x), a)


def test_baseline_and_gdvm_share_prediction_path():
    g, b = make(GDVM, seed=8), make(BASELINE, seed=8)
    x = np.random.default_rng(0).normal(size=(10, 5))
    np.testing.assert_array_equal(predict_deterministic(g, x), predict_deterministic(b, x))


class _ZeroRng:
    def standard_normal(self, shape):
        return np.zeros(shape)


def test_mc_prediction():
    m = make()
    x = np.random.default_rng(0).normal(size=(7, 5))
    with pytest.raises(ConfigError):
        predict_mc(m, x, 0, 0)
    p = mc_scores(m, x, 20, 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    # prior draws ignore x; a forced central draw is Φ(0)
    central = mc_scores(m, x, 1, _ZeroRng())
    phi0 = m.classifier.activate(m.decode(Tensor(np.zeros((1, 4))))).data
    np.testing.assert_allclose(central, np.repeat(phi0, 7, axis=0))
    post = mc_scores(m, x, 5, 0, source="posterior")
    assert post.shape == (7, 3)


def test_mc_variance_shrinks_with_samples():
    m = make()
    x = np.random.default_rng(0).normal(size=(4, 5))
    spreads = []
    for n in (10, 100, 1000):
        runs = np.stack([mc_scores(m, x, n, seed) for seed in range(20)])
        spreads.append(float(runs.var(axis=0).mean()))
    assert spreads[0] > spreads[1] > spreads[2]


def test_latent_means_shape():
    assert latent_means(make(), np.zeros((9, 5))).shape == (9, 4)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = make(seed=5)
    for p in m.params._params.values():
        p.data += np.random.default_rng(1).normal(size=p.shape)
    path = tmp_path / "m.npz"
    save_checkpoint(m, path, extra={"seed": 5})
    back = load_checkpoint(path, m.arch)
    assert back.params.names() == m.params.names()
    for n, p in m.params.items():
        assert back.params[n].data.tobytes() == p.data.tobytes()
        assert back.params[n].dtype == np.float64
    assert back.checkpoint_extra == {"seed": 5}
    assert back.variant == m.variant


def test_checkpoint_zero_shot_keeps_prototypes(tmp_path):
    ds = gen_zeroshot(0, 3, 2, 4, 2)
    arch = Architecture([dict(kind="dense", out=8)], 3, [dict(kind="dense", out=4), dict(kind="l2normalize")])
    m = GdvmModel(arch, ModelVariant(GDVM, 0.1), ds.task, ds.input_shape)
    save_checkpoint(m, tmp_path / "z.npz")
    back = load_checkpoint(tmp_path / "z.npz")
    np.testing.assert_array_equal(back.task.unseen_prototypes, ds.task.unseen_prototypes)


def test_checkpoint_architecture_mismatch_names_layer(tmp_path):
    m = make()
    save_checkpoint(m, tmp_path / "m.npz")
    other = dense_arch()
    other.classifier[0].out = 9
    with pytest.raises(CheckpointError, match="classifier layer 0"):
        load_checkpoint(tmp_path / "m.npz", other)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.npz"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
