import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import MNIST_DIR, mnist_available
from sparse_sieve.data import load_mnist
from sparse_sieve.dense import (
    NON_TARGETED,
    TARGETED,
    DenseAttackConfig,
    adversarial_train,
    fgsm,
    ifgsm,
    ifgsm_nontargeted,
    ifgsm_targeted,
    pgd,
)
from sparse_sieve.evaluation import fooling_rate
from sparse_sieve.models import ModelSpec, build_model, least_likely_class, predict, train

SPEC = ModelSpec.mlp((16,), 4, (1, 5, 5))
LINEAR = ModelSpec("mlp", (), 4, (1, 5, 5))


@pytest.fixture(scope="module")
def small_model():
    return build_model(SPEC, 0)


def images(rng, n=8, shape=(1, 5, 5)):
    return rng.uniform(0, 1, size=(n, *shape))


def test_config_validation():
    for kwargs in ({"epsilon": 0}, {"step": 0}, {"epsilon": 0.1, "step": 0.2}, {"iterations": 0}, {"mode": "x"}):
        with pytest.raises(ValueError):
            DenseAttackConfig(**kwargs)


def test_zero_gradient_pixel_untouched(rng):
    model = build_model(SPEC, 0)
    model.params["dense0.weight"][3] = 0.0  # input element 3 feeds nothing
    x = images(rng)
    d = fgsm(model, x, np.zeros(len(x), dtype=int), 0.1, clip=False).delta
    assert not d.reshape(len(x), -1)[:, 3].any()


def test_fgsm_magnitudes_are_epsilon(small_model, rng):
    d = fgsm(small_model, images(rng), np.arange(8) % 4, 0.07, clip=False).delta
    nz = d[d != 0]
    assert nz.size > 0 and np.all(np.abs(nz) == 0.07)


def test_fgsm_clip_keeps_image_valid(small_model, rng):
    x = images(rng)
    x[:, :, :2] = 0.0
    x[:, :, -1] = 1.0
    d = fgsm(small_model, x, np.zeros(8, dtype=int), 0.3).delta
    adv = x + d
    assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_single_step_ifgsm_equals_fgsm(small_model, rng):
    x, y = images(rng), np.arange(8) % 4
    for eps in (4 / 255, 0.1, 0.3):
        for clip in (True, False):
            cfg = DenseAttackConfig(epsilon=eps, step=eps, iterations=1, clip=clip)
            assert np.array_equal(ifgsm(small_model, x, y, cfg).delta, fgsm(small_model, x, y, eps, clip).delta)


@settings(max_examples=40, deadline=None)
@given(
    st.floats(1e-3, 0.5),
    st.floats(0.05, 1.0),
    st.integers(1, 8),
    st.booleans(),
    st.sampled_from([NON_TARGETED, TARGETED]),
    st.integers(0, 2**16),
)
def test_dense_attacks_respect_budget(eps, frac, steps, clip, mode, seed):
    rng = np.random.default_rng(seed)
    model = build_model(SPEC, seed % 3)
    x = images(rng, 6)
    y = least_likely_class(model, x) if mode == TARGETED else rng.integers(0, 4, size=6)
    cfg = DenseAttackConfig(eps, frac * eps, steps, mode, random_init=True, clip=clip, restarts=2, seed=seed)
    for d in (ifgsm(model, x, y, cfg).delta, pgd(model, x, y, cfg).delta, fgsm(model, x, y, eps, clip).delta):
        assert np.abs(d).max() <= eps + 1e-12
        if clip:
            assert (x + d).min() >= 0.0 and (x + d).max() <= 1.0


def test_targeted_rejects_current_prediction(small_model, rng):
    x = images(rng)
    with pytest.raises(ValueError, match="target"):
        ifgsm_targeted(small_model, x, predict(small_model, x), DenseAttackConfig())


def test_targeted_records_finite_losses(small_model, rng):
    x = images(rng)
    out = ifgsm_targeted(small_model, x, least_likely_class(small_model, x), DenseAttackConfig(iterations=4))
    assert len(out.losses) == 4
    assert all(np.isfinite(v).all() for v in out.losses)


def test_pgd_without_random_start_is_ifgsm(small_model, rng):
    x, y = images(rng), np.arange(8) % 4
    cfg = DenseAttackConfig(0.1, 0.02, 6)
    assert np.array_equal(pgd(small_model, x, y, cfg).delta, ifgsm_nontargeted(small_model, x, y, cfg).delta)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**16), st.floats(0.01, 0.3))
def test_nontargeted_loss_non_decreasing_on_linear_model(seed, eps):
    # cross-entropy is convex in x for a linear model, and each sign step has
    # a non-negative inner product with the gradient even after clipping
    rng = np.random.default_rng(seed)
    model = build_model(LINEAR, seed)
    x = images(rng, 5)
    out = ifgsm_nontargeted(model, x, rng.integers(0, 4, size=5), DenseAttackConfig(eps, eps / 4, 8))
    losses = np.array(out.losses)
    assert np.all(np.diff(losses, axis=0) >= -1e-12)


def test_single_image_interface(small_model, rng):
    x = images(rng, 1)[0]
    out = fgsm(small_model, x, 2, 0.1)
    assert out.delta.shape == x.shape and isinstance(out.linf, float)


def test_adversarial_training_zero_budget_is_standard(blob_split):
    trn, _ = blob_split
    spec = ModelSpec.mlp((8,), 3, trn.image_shape)
    robust, _ = adversarial_train(spec, trn, None, epochs=1, seed=2, batch_size=32)
    plain, _ = train(build_model(spec, 2), trn, 1, batch_size=32, seed=2)
    assert all(np.array_equal(robust.params[k], plain.params[k]) for k in plain.params)


@pytest.mark.parametrize("method", ["pgd", "fast"])
def test_adversarial_training_deterministic(blob_split, method):
    trn, _ = blob_split
    spec = ModelSpec.mlp((8,), 3, trn.image_shape)
    cfg = DenseAttackConfig(0.1, 0.05, 2)
    a, _ = adversarial_train(spec, trn.head(64), cfg, 1, seed=1, method=method, batch_size=32)
    b, _ = adversarial_train(spec, trn.head(64), cfg, 1, seed=1, method=method, batch_size=32)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert a.metadata["adversarial_training"]["method"] == method


def test_epsilon_ramp(blob_split):
    trn, _ = blob_split
    spec = ModelSpec.mlp((8,), 3, trn.image_shape)
    cfg = DenseAttackConfig(0.2, 0.1, 2)
    run = lambda ramp: adversarial_train(spec, trn.head(64), cfg, 1, seed=1, batch_size=16, epsilon_ramp=ramp)[0]
    flat, ramped = run(0.0), run(1.0)
    assert not all(np.array_equal(flat.params[k], ramped.params[k]) for k in flat.params)
    assert ramped.metadata["adversarial_training"]["epsilon_ramp"] == 1.0
    with pytest.raises(ValueError, match="epsilon_ramp"):
        run(1.5)


@pytest.fixture(scope="module")
def mnist_mlp():
    if not mnist_available():
        pytest.skip("MNIST files not present")
    trn = load_mnist(MNIST_DIR, "train")
    tst = load_mnist(MNIST_DIR, "test").head(1000)
    model, _ = train(build_model(ModelSpec.mlp(), 0), trn, 1, batch_size=128, seed=0)
    idx = np.flatnonzero(predict(model, tst.images) == tst.labels)[:300]
    return model, tst.images[idx], tst.labels[idx]


def test_fgsm_large_budget_fools_mnist_mlp(mnist_mlp):
    model, x, y = mnist_mlp
    adv = x + fgsm(model, x, y, 0.2).delta
    assert fooling_rate(model, x, adv, y) > 0.5


def test_targeted_ifgsm_reaches_least_likely(mnist_mlp):
    model, x, y = mnist_mlp
    t = least_likely_class(model, x)
    adv = x + ifgsm(model, x, t, DenseAttackConfig(0.3, 0.01, 40, TARGETED)).delta
    assert fooling_rate(model, x, adv, y, TARGETED, t) >= 0.8


def test_pgd_at_least_ifgsm(mnist_mlp):
    model, x, y = mnist_mlp
    fr = lambda d: fooling_rate(model, x, x + d, y)
    fr_i = fr(ifgsm(model, x, y, DenseAttackConfig(0.1, 0.025, 10)).delta)
    fr_p = fr(pgd(model, x, y, DenseAttackConfig(0.1, 0.025, 10, random_init=True, restarts=3, seed=0)).delta)
    assert fr_p >= fr_i


def test_more_restarts_never_hurt(mnist_mlp):
    model, x, y = mnist_mlp
    hits = []
    for restarts in (1, 2, 4):
        cfg = DenseAttackConfig(0.1, 0.01, 5, random_init=True, restarts=restarts, seed=3)
        hits.append(predict(model, x + pgd(model, x, y, cfg).delta) != y)
    assert np.all(hits[0] <= hits[1]) and np.all(hits[1] <= hits[2])
