"""Layers, network assembly, training loop and model files."""

import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from csmud.neural import (
    ModelFormatError,
    TrainConfig,
    build_network,
    expected_param_count,
    featurize,
    infer_active_users,
    load_into,
    load_model,
    read_model_header,
    save_model,
    train,
)
from csmud.neural import layers as nl
from csmud.neural.network import top_n_sets
from csmud.neural.training import sgd_step
from csmud.selfcheck import GRADIENT_LAYERS, _layer_trial
from csmud.sysmodel import SplitPolicy, SystemConfig, generate_dataset

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# --- functional layers ---------------------------------------------------------------

def test_featurize_examples():
    np.testing.assert_array_equal(featurize(np.array([1 + 2j])), [1, 2])
    np.testing.assert_array_equal(featurize(np.zeros(4, complex)), np.zeros(8))


@given(hnp.arrays(complex, 5, elements=st.complex_numbers(max_magnitude=1e3)), finite)
def test_featurize_is_linear(y, a):
    np.testing.assert_allclose(featurize(a * y), a * featurize(y), rtol=1e-12, atol=1e-9)


def test_dense_examples(rng):
    x = rng.standard_normal((3, 4))
    b = rng.standard_normal(4)
    np.testing.assert_array_equal(nl.dense_forward(np.eye(4), np.zeros(4), x), x)
    np.testing.assert_array_equal(nl.dense_forward(rng.standard_normal((4, 4)), b, np.zeros((1, 4)))[0], b)


@pytest.mark.parametrize("block,want", [((-1, -2), (0, 0)), ((3, -1), (3, -1)), ((0, 0), (0, 0)),
                                        ((0, 1e-300), (0, 1e-300))])
def test_block_activation_examples(block, want):
    out, _ = nl.block_activation_forward(np.array([block], float), 2)
    np.testing.assert_array_equal(out[0], want)


@pytest.mark.parametrize("L", [1, 2, 3, 4])
def test_block_activation_truth_table(L):
    import itertools

    for signs in itertools.product((-1.0, 0.0, 1.0), repeat=L):
        z = np.array([signs]) * np.arange(1, L + 1)
        out, _ = nl.block_activation_forward(z, L)
        np.testing.assert_array_equal(out, z if np.any(z > 0) else 0 * z)


def test_block_max_pool_examples():
    out, _ = nl.block_max_pool_forward(np.array([[1, -2, 0.5, 3]]), 2)
    np.testing.assert_array_equal(out, [[1, 3]])
    out, idx = nl.block_max_pool_forward(np.array([[2.0, 2.0, 2.0]]), 3)
    assert out[0, 0] == 2.0
    np.testing.assert_array_equal(nl.block_max_pool_backward(np.array([[1.0]]), idx, 3), [[1, 0, 0]])


@given(hnp.arrays(float, (2, 12), elements=finite), st.sampled_from([1, 2, 3, 4, 6]),
       st.randoms(use_true_random=False))
def test_block_max_pool_permutation_invariant(z, L, r):
    perm = z.copy().reshape(2, -1, L)
    for row in perm:
        for blk in row:
            r.shuffle(blk)
    a, _ = nl.block_max_pool_forward(z, L)
    b, _ = nl.block_max_pool_forward(perm.reshape(2, -1), L)
    np.testing.assert_array_equal(a, b)


def test_block_widths_must_divide():
    with pytest.raises(ValueError):
        nl.block_activation_forward(np.zeros((1, 5)), 2)
    with pytest.raises(ValueError):
        nl.LayerSpec("block_activation", 5, block_size=2)


def test_batch_norm_standardises(rng):
    x = 10 * rng.standard_normal((64, 7)) + 3
    out, _ = nl.batch_norm_forward(x, np.ones(7), np.zeros(7))
    assert np.all(np.abs(out.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(out.var(axis=0) - 1) < 1e-6)


def test_batch_norm_normalised_input_passes(rng):
    x = rng.standard_normal((500, 4))
    x = (x - x.mean(0)) / x.std(0)
    out, _ = nl.batch_norm_forward(x, np.ones(4), np.zeros(4))
    np.testing.assert_allclose(out, x, atol=1e-4)


def test_batch_norm_inference_uses_running_stats():
    x = np.array([[1.0, 2.0]])
    out, cache = nl.batch_norm_forward(x, np.ones(2), np.zeros(2), np.array([1.0, 0.0]),
                                       np.array([4.0, 1.0]), training=False)
    assert cache is None
    np.testing.assert_allclose(out, [[0.0, 2 / np.sqrt(1 + nl.BN_EPS)]])


@pytest.mark.parametrize("kind", GRADIENT_LAYERS)
def test_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    worst = max(_layer_trial(kind, rng) for _ in range(20))
    assert worst < 1e-5


def test_softmax_uniform_scores():
    for K in (2, 5, 100):
        t = np.random.default_rng(K).random(K)
        loss, _ = nl.softmax_cross_entropy(np.zeros(K), t / t.sum())
        assert loss == pytest.approx(np.log(K), rel=1e-12)


def test_softmax_margin_limit():
    loss, g = nl.softmax_cross_entropy(np.array([60.0, -60.0]), np.array([1.0, 0.0]))
    assert loss < 1e-40 and np.all(np.abs(g) < 1e-40)


@given(hnp.arrays(float, (3, 6), elements=finite), finite)
def test_softmax_rows_and_shift(s, c):
    p = nl.softmax(s)
    np.testing.assert_allclose(p.sum(axis=1), 1, rtol=1e-12)
    np.testing.assert_allclose(nl.softmax(s + c), p, rtol=1e-9, atol=1e-15)


def test_softmax_rejects_bad_target():
    with pytest.raises(ValueError):
        nl.softmax_cross_entropy(np.zeros(3), np.array([0.5, 0.6, 0.0]))


def test_sigmoid_head_loss_gradient():
    s = np.array([[0.3, -1.2, 2.0]])
    t = np.array([[1.0, 0.0, 1.0]])
    loss, g = nl.sigmoid_cross_entropy(s, t)
    p = 1 / (1 + np.exp(-s))
    assert loss == pytest.approx(-np.sum(t * np.log(p) + (1 - t) * np.log(1 - p)))
    np.testing.assert_allclose(g, p - t)


# --- network assembly --------------------------------------------------------------------

@pytest.mark.parametrize("arch", ["BRNN", "DNN"])
@pytest.mark.parametrize("dims", [(20, 3, 18), (100, 6, 45), (4, 2, 5)])
@pytest.mark.parametrize("depth", [dict(), dict(relu_layers=1, residual_blocks=0),
                                   dict(relu_layers=3, relu_width=17, residual_blocks=1)])
def test_param_count(arch, dims, depth):
    K, L, M = dims
    net = build_network(arch, K, L, M, **depth)
    assert net.param_count() == expected_param_count(arch, K, L, M, **depth)


def test_param_count_desk_value():
    # 2 ReLU layers of width 2KL=120 on 2M=36 inputs, KL=60 body, three residual blocks
    assert expected_param_count("BRNN", 20, 3, 18) == 4440 + 120 * 121 + 120 * 2 + 240 + 7260 + 3 * (3600 + 60 + 120)
    assert expected_param_count("DNN", 20, 3, 18) - expected_param_count("BRNN", 20, 3, 18) == 60 * 20 + 20


@pytest.mark.parametrize("arch", ["BRNN", "DNN"])
def test_fresh_network_zero_input_finite(arch):
    net = build_network(arch, 20, 3, 18)
    assert np.all(np.isfinite(net.forward(np.zeros((4, 36)))))


def test_same_seed_shares_dense_weights():
    a = build_network("BRNN", 20, 3, 18, seed=5)
    b = build_network("DNN", 20, 3, 18, seed=5)
    dense_a = [l.W for l in a.layers if isinstance(l, nl.Dense)]
    dense_b = [l.W for l in b.layers if isinstance(l, nl.Dense)]
    assert len(dense_b) == len(dense_a) + 1
    for wa, wb in zip(dense_a, dense_b):
        np.testing.assert_array_equal(wa, wb)


def test_architectures_share_body_when_activations_saturate(rng):
    # with a large BN shift every block is active and every ReLU is identity,
    # so the two bodies compute the same function
    nets = [build_network(a, 6, 2, 5, seed=3, dtype=np.float64) for a in ("BRNN", "DNN")]
    for net in nets:
        for layer in net.layers[6:]:
            if isinstance(layer, nl.BatchNorm):
                layer.beta[:] = 100.0
        net.layers = net.layers[:-1]
    X = rng.standard_normal((8, 10))
    np.testing.assert_allclose(nets[0].forward(X, training=True),
                               nets[1].forward(X, training=True), rtol=1e-12)


def test_inference_is_batch_independent(rng):
    net = build_network("BRNN", 20, 3, 18, seed=1, dtype=np.float64)
    Y = rng.standard_normal((16, 18)) + 1j * rng.standard_normal((16, 18))
    batch = net.scores(Y)
    single = np.vstack([net.scores(y) for y in Y])
    np.testing.assert_allclose(batch, single, rtol=1e-12)


def test_top_n_examples():
    s = np.array([[0.1, 0.9, 0.05, 0.7]])
    assert top_n_sets(s, [2]) == [(1, 3)]
    assert top_n_sets(np.zeros((1, 4)), [2]) == [(0, 1)]
    net = build_network("BRNN", 5, 2, 4)
    users, scores = infer_active_users(net, np.ones(4, complex), 5)
    assert users == (0, 1, 2, 3, 4) and scores.shape == (5,)


def test_targets_per_head():
    soft = build_network("BRNN", 4, 2, 4)
    sig = build_network("BRNN", 4, 2, 4, head="sigmoid")
    np.testing.assert_array_equal(soft.targets([(0, 3)]), [[0.5, 0, 0, 0.5]])
    np.testing.assert_array_equal(sig.targets([(0, 3)]), [[1, 0, 0, 1]])


# --- training ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_data():
    c = SystemConfig(K=8, Ns=8, L=2, n=2, seed=2)
    tr = generate_dataset(c, SplitPolicy("train", n=2), 400)
    va = generate_dataset(c, SplitPolicy("val", n=2), 100)
    return c, tr, va


def _net(c, arch="BRNN", **kw):
    return build_network(arch, c.K, c.L, c.M, seed=0, **kw)


def test_zero_learning_rate_leaves_params(small_data):
    c, tr, va = small_data
    net = _net(c)
    before = [p.copy() for p in net.params()]
    train(net, tr, va, TrainConfig(learning_rate=0.0, batch_size=50, epochs=2, eval_every=4))
    for a, b in zip(before, net.params()):
        np.testing.assert_array_equal(a, b)


def test_zero_momentum_is_plain_sgd(small_data):
    c, tr, _ = small_data
    net = _net(c)
    X = featurize(tr.y[:32]).astype(net.dtype)
    loss, g = net.loss(net.forward(X, training=True), net.targets(tr.active[:32]))
    net.backward(g.astype(net.dtype))
    want = [p - (0.05 * gr).astype(p.dtype) for p, gr in zip(net.params(), net.grads())]
    sgd_step(net, 0.05, 0.0)
    for a, b in zip(want, net.params()):
        np.testing.assert_array_equal(a, b)


def test_momentum_update_rule():
    net = build_network("BRNN", 2, 1, 2, relu_width=2, residual_blocks=0, dtype=np.float64)
    p = net.params()[0]
    start = p.copy()
    g = net.grads()[0]
    g[...] = 1.0
    sgd_step(net, 0.1, 0.9)  # v = -0.1, p = start - 0.1
    sgd_step(net, 0.1, 0.9)  # v = -0.19, p = start - 0.29
    np.testing.assert_allclose(p, start - 0.29)


def test_training_is_deterministic(small_data):
    c, tr, va = small_data
    cfg = TrainConfig(batch_size=40, epochs=2, eval_every=5)
    traces = []
    for _ in range(2):
        _, t = train(_net(c), tr, va, cfg)
        traces.append([tuple(vars(cp).values()) for cp in t.checkpoints])
    assert traces[0] == traces[1] and len(traces[0]) == 4


def test_checkpoint_spacing(small_data):
    c, tr, va = small_data
    _, t = train(_net(c), tr, va, TrainConfig(batch_size=10, epochs=3, eval_every=7))
    np.testing.assert_array_equal(np.diff(t.column("batch")), 7)


def test_single_sample_overfit():
    # a single sample duplicated: batch norm needs two rows per batch
    c = SystemConfig(K=8, Ns=8, L=2, n=2, seed=2)
    one = generate_dataset(c, SplitPolicy("train", n=2), 1)
    ds = one.subset([0, 0])
    net = _net(c, dtype=np.float64)
    _, t = train(net, ds, ds, TrainConfig(learning_rate=0.01, momentum=0.0, batch_size=2,
                                          epochs=200, eval_every=1))
    loss = t.column("loss")
    assert np.all(np.diff(loss[10:]) < 0)


def test_trained_network_recovers_training_sample(small_data):
    c, tr, va = small_data
    sub = tr.subset(np.arange(64))
    net = _net(c, dtype=np.float64)
    train(net, sub, sub, TrainConfig(learning_rate=0.05, batch_size=16, epochs=150, eval_every=20))
    users, _ = infer_active_users(net, sub.y[0], 2)
    assert users == sub.active[0]


def test_training_rejects_mismatched_data(small_data):
    _, tr, va = small_data
    with pytest.raises(ValueError):
        train(build_network("BRNN", 9, 2, 9), tr, va, TrainConfig())


def test_running_variance_nonnegative(small_data):
    c, tr, va = small_data
    net = _net(c)
    train(net, tr, va, TrainConfig(batch_size=25, epochs=1, eval_every=4))
    for layer in net.layers:
        if isinstance(layer, nl.BatchNorm):
            assert np.all(layer.running_var >= 0)


# --- model files ------------------------------------------------------------------------

@pytest.fixture
def trained_file(tmp_path, small_data):
    c, tr, va = small_data
    net = _net(c)
    train(net, tr, va, TrainConfig(batch_size=50, epochs=1, eval_every=4))
    p = tmp_path / "BRNN.model"
    save_model(net, p)
    return net, p


def test_model_round_trip(trained_file, rng):
    net, p = trained_file
    back = load_model(p)
    X = rng.standard_normal((100, 2 * net.M))
    np.testing.assert_array_equal(back.forward(X), net.forward(X))
    assert back.batches_seen == net.batches_seen


def test_model_headers_name_the_architecture(tmp_path):
    for arch in ("BRNN", "DNN"):
        save_model(build_network(arch, 4, 2, 5), tmp_path / arch)
    a, b = (read_model_header(tmp_path / x)["architecture"] for x in ("BRNN", "DNN"))
    assert a["arch"] == "BRNN" and b["arch"] == "DNN" and a["layers"] != b["layers"]


def test_mismatched_load_leaves_network_untouched(trained_file):
    _, p = trained_file
    other = build_network("DNN", 8, 2, 9)
    before = copy.deepcopy(other.get_state())
    with pytest.raises(ModelFormatError):
        load_into(other, p)
    for k, v in other.get_state().items():
        np.testing.assert_array_equal(v, before[k])


def test_truncated_model_file(trained_file):
    _, p = trained_file
    p.write_bytes(p.read_bytes()[:-7])
    with pytest.raises(ModelFormatError, match="truncated"):
        load_model(p)


def test_corrupted_model_file(trained_file):
    _, p = trained_file
    raw = bytearray(p.read_bytes())
    raw[-3] ^= 0x10
    p.write_bytes(bytes(raw))
    with pytest.raises(ModelFormatError, match="checksum"):
        load_model(p)
