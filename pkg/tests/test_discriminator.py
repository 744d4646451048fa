import numpy as np
import pytest

from tiacam.autodiff import Tensor, backward, finite_diff_check, ops, param_gradcheck
from tiacam.discriminator import PairDiscriminator, discriminate
from tiacam.errors import ConfigError, ShapeError
from tiacam.nn import RunContext
from tiacam.optim import Adam


def _feats(seed, n=4, d=16):
    r = np.random.default_rng(seed)
    return r.normal(size=(n, d)), r.normal(size=(n, d))


def test_probabilities_in_open_interval_and_complementary():
    d = PairDiscriminator(16, hidden=16, layers=2, heads=2, head_scale=1.0)
    a, b = _feats(0)
    logits = d.logits(a, b)
    probs = ops.softmax(logits, axis=-1).data
    assert np.all((probs > 0) & (probs < 1))
    assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-7)
    assert np.array_equal(d(a, b).data, probs[:, 1])


def test_zero_head_gives_half():
    d = PairDiscriminator(16, hidden=16, head_scale=0.0)
    a, b = _feats(1)
    assert np.array_equal(d(a, b).data, np.full(4, 0.5))
    assert d(a[0], b[0]).item() == 0.5


def test_dim_mismatch():
    d = PairDiscriminator(16, hidden=16)
    with pytest.raises(ShapeError):
        d(np.zeros((2, 16)), np.zeros((2, 15)))
    with pytest.raises(ConfigError):
        PairDiscriminator(16, hidden=10, heads=4)


def test_attention_rows_are_distributions():
    d = PairDiscriminator(16, hidden=16, layers=2, heads=4)
    a, b = _feats(2)
    _, attn = d.logits(a, b, return_attention=True)
    assert len(attn) == 2
    for w in attn:
        assert w.shape == (4, 4, 3, 3)
        assert np.allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)


def test_eval_determinism():
    d = PairDiscriminator(16, hidden=16)
    a, b = _feats(3)
    assert d(a, b).data.tobytes() == discriminate(d, a, b).data.tobytes()


@pytest.mark.parametrize("seed", range(10))
def test_log_prob_gradient_wrt_image_feature(seed):
    d = PairDiscriminator(16, hidden=16, layers=2, heads=2, seed=seed, head_scale=1.0)
    a, b = _feats(seed, n=2)
    report = finite_diff_check(lambda za: ops.sum(ops.log(d(za, Tensor(b)))), a, eps=1e-6, tol=1e-4)
    assert report.passed, report.max_rel_err


@pytest.mark.parametrize("seed", range(10))
def test_gradient_wrt_parameters(seed):
    d = PairDiscriminator(8, hidden=8, layers=1, heads=2, seed=seed, head_scale=1.0)
    a, b = _feats(seed, n=3, d=8)
    names = [n for n, _ in d.named_parameters()]

    def loss():
        ctx = RunContext(training=True, rng=np.random.default_rng(seed))
        return ops.sum(ops.log(d(a, b, ctx)))

    report = param_gradcheck(d.parameters(), loss, eps=1e-6, tol=1e-4)
    assert report.passed, (names[report.worst[0]], report.max_rel_err)


def test_slot_swap_changes_output_after_training_step():
    d = PairDiscriminator(16, hidden=16, head_scale=1.0, seed=4)
    a, b = _feats(4)
    opt = Adam(d.parameters(), lr=1e-2)
    loss = ops.neg(ops.sum(ops.log(d(a, b))))
    grads = backward(loss)
    opt.step([grads[p.id] for p in d.parameters()])
    assert not np.allclose(d(a, b).data, d(b, a).data)


def test_without_slot_embeddings_the_pair_is_symmetric():
    d = PairDiscriminator(16, hidden=16, head_scale=1.0, slot_embeddings=False)
    a, b = _feats(5)
    assert np.allclose(d(a, b).data, d(b, a).data, atol=1e-12)
