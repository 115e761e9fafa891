import numpy as np
import pytest

from era_kd import autodiff as ad
from era_kd.autodiff import Tensor
from era_kd.distiller import SGD
from era_kd.errors import DimensionError, ParameterError
from era_kd.nn import (
    BN_EPS,
    BatchNormLayer,
    ClassifierHead,
    LinearLayer,
    MlpEncoder,
    ResMBranch,
    forward_branch,
    forward_encoder,
    forward_head,
    init_parameters,
)


def state_arrays(module):
    return [t.values.copy() for _, t in module.named_state()]


def test_init_is_deterministic():
    a, b = MlpEncoder(6, [8, 8], 4), MlpEncoder(6, [8, 8], 4)
    init_parameters(a, 3)
    init_parameters(b, 3)
    for x, y in zip(state_arrays(a), state_arrays(b)):
        assert x.tobytes() == y.tobytes()


def test_init_values(rng):
    enc = MlpEncoder(50, [40], 30)
    init_parameters(enc, 0)
    w = enc.linears[0].weight.values
    assert abs(w.std() - np.sqrt(2 / 50)) < 0.02
    assert not enc.linears[0].bias.values.any()
    bn = enc.norms[0]
    assert (bn.gamma.values == 1).all() and not bn.beta.values.any()
    assert not bn.running_mean.values.any() and (bn.running_var.values == 1).all()


def test_fresh_branch_outputs_zero(rng):
    br = ResMBranch(5, 7, m=3)
    init_parameters(br, 0)
    out = forward_branch(br, Tensor(rng.normal(size=(9, 5))))
    assert out.shape == (9, 7)
    assert not out.values.any()


def test_bn_eval_after_init_is_near_identity(rng):
    bn = BatchNormLayer(4).eval()
    x = rng.normal(size=(5, 4))
    np.testing.assert_allclose(bn(Tensor(x)).values, x / np.sqrt(1 + BN_EPS), rtol=0, atol=1e-15)


def test_bn_train_normalizes_batch(rng):
    bn = BatchNormLayer(3)
    bn.gamma.values[...] = [0.5, 2.0, 1.3]
    # the eps in the denominator shrinks the variance by var / (var + eps)
    out = bn(Tensor(rng.normal(3.0, 10.0, size=(16, 3)))).values
    assert np.abs(out.mean(axis=0)).max() <= 1e-9
    assert np.abs(out.var(axis=0) - bn.gamma.values ** 2).max() <= 1e-6


def test_bn_eval_does_not_touch_running_stats(rng):
    bn = BatchNormLayer(3)
    bn(Tensor(rng.normal(size=(8, 3))))
    before = state_arrays(bn)
    bn.eval()
    bn(Tensor(rng.normal(size=(8, 3))))
    for x, y in zip(before, state_arrays(bn)):
        assert x.tobytes() == y.tobytes()
    assert (bn.running_var.values >= 0).all()


def test_encoder_eval_rows_independent(rng):
    enc = MlpEncoder(6, [8], 4)
    init_parameters(enc, 1)
    enc(Tensor(rng.normal(size=(8, 6))))  # move running stats
    enc.eval()
    x = rng.normal(size=(8, 6))
    full = forward_encoder(enc, Tensor(x)).values
    one = forward_encoder(enc, Tensor(x[3:4])).values
    assert np.abs(full[3] - one[0]).max() <= 1e-12
    assert full.shape == (8, 4)


def test_linear_only_encoder_matches_matmul(rng):
    enc = MlpEncoder(3, [], 2, batch_norm=False)
    W = np.array([[1.0, 2.0, 0.0], [0.0, -1.0, 3.0]])
    b = np.array([0.5, -0.5])
    enc.linears[0].weight.values[...] = W
    enc.linears[0].bias.values[...] = b
    x = np.array([[1.0, 1.0, 1.0], [2.0, 0.0, -1.0]])
    np.testing.assert_array_equal(enc(Tensor(x)).values, x @ W.T + b)


def test_encoder_width_mismatch():
    with pytest.raises(DimensionError):
        MlpEncoder(6, [], 2)(Tensor(np.zeros((2, 5))))


def test_m1_branch_hand_weights_is_affine_and_signed():
    br = ResMBranch(2, 2, m=1).eval()
    W = np.array([[1.0, -2.0], [0.5, 1.0]])
    br.linears[0].weight.values[...] = W
    br.linears[0].bias.values[...] = [0.0, 1.0]
    br.norms[0].eps = 0.0  # identity statistics: mean 0, var 1
    x = np.array([[1.0, 1.0], [-1.0, 2.0]])
    out = br(Tensor(x)).values
    np.testing.assert_array_equal(out, x @ W.T + [0.0, 1.0])
    assert (out < 0).any()


def test_branch_needs_m_at_least_one():
    with pytest.raises(ParameterError):
        ResMBranch(3, 3, m=0)


def test_branch_hidden_defaults_to_input_width():
    br = ResMBranch(5, 9, m=3)
    assert br.widths == [5, 5, 5, 9]


def test_identity_head_returns_features(rng):
    head = ClassifierHead(3, 3)
    head.linear.weight.values[...] = np.eye(3)
    f = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(forward_head(head, Tensor(f)).values, f)


def test_head_hand_weights():
    head = ClassifierHead(2, 2)
    head.linear.weight.values[...] = [[1.0, 2.0], [3.0, 4.0]]
    out = head(Tensor([[1.0, 1.0]])).values
    np.testing.assert_array_equal(out, [[3.0, 7.0]])


def test_frozen_head_unchanged_after_100_steps(rng):
    head = ClassifierHead(4, 3, frozen=True)
    init_parameters(head, 0)
    enc = LinearLayer(5, 4)
    init_parameters(enc, 1)
    before = state_arrays(head)
    opt = SGD(enc.named_parameters() + head.named_parameters(), momentum=0.9, weight_decay=5e-4)
    for _ in range(100):
        opt.zero_grad()
        with ad.Tape() as tape:
            loss = ad.mean(ad.square(head(enc(Tensor(rng.normal(size=(8, 5)))))))
        tape.backward(loss)
        opt.step(0.01)
    for x, y in zip(before, state_arrays(head)):
        assert x.tobytes() == y.tobytes()
    assert head.frozen
