"""Finite-difference agreement for every differentiable primitive.

These are the op-level checks; whole-model checks live in the acceptance
suite. All cases run in float64, the dtype the checker insists on.
"""

import numpy as np
import pytest

from fusionlab import ops
from fusionlab.gradcheck import finite_difference_check
from fusionlab.params import Parameter
from fusionlab.tensor import Tensor

TOL = 1e-7


def check(build, *param_arrays, tol=TOL):
    params = [Parameter(f"p{i}", np.asarray(a, dtype=np.float64)) for i, a in enumerate(param_arrays)]
    err = finite_difference_check(lambda: build(*[p.value for p in params]), params)
    assert err < tol, f"relative error {err:.3e}"


def rnd(*shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).normal(size=shape) * scale


def test_matmul():
    check(lambda a, b: ops.mean(ops.matmul(a, b)), rnd(3, 4), rnd(4, 5, seed=1))


def test_matmul_batched():
    check(lambda a, b: ops.mean(ops.matmul(a, b)), rnd(2, 3, 4), rnd(4, 5, seed=1))


def test_bias_add():
    check(lambda x, b: ops.mean(ops.bias_add(x, b)), rnd(3, 4), rnd(4, seed=1))


def test_add_mul_scale():
    check(lambda a, b: ops.mean(ops.scale(ops.mul(ops.add(a, b), a), 0.7)),
          rnd(2, 5), rnd(2, 5, seed=1))


def test_relu_away_from_kink():
    x = rnd(4, 4)
    x[np.abs(x) < 0.1] = 0.5  # finite differences straddle the kink otherwise
    check(lambda a: ops.mean(ops.relu(a)), x)


def test_sigmoid_swish():
    check(lambda a: ops.mean(ops.sigmoid(a)), rnd(3, 3))
    check(lambda a: ops.mean(ops.swish(a)), rnd(3, 3, seed=2))


def test_glu():
    check(lambda a: ops.mean(ops.glu(a)), rnd(2, 3, 8))


def test_softmax():
    check(lambda a: ops.mean(ops.mul(ops.softmax(a), a)), rnd(3, 5))


def test_layer_norm_all_three_inputs():
    check(
        lambda x, g, b: ops.mean(ops.mul(ops.layer_norm(x, g, b), x)),
        rnd(4, 8), 1.0 + 0.1 * rnd(8, seed=1), 0.1 * rnd(8, seed=2),
    )


def test_conv1d():
    check(
        lambda x, w: ops.mean(ops.conv1d(x, w, stride=2)),
        rnd(2, 8, 3), rnd(2, 3, 4, seed=1, scale=0.5),
    )


def test_depthwise_conv1d():
    check(
        lambda x, w: ops.mean(ops.depthwise_conv1d(x, w)),
        rnd(2, 7, 3), rnd(5, 3, seed=1, scale=0.5),
    )


def test_movement_ops_pass_gradients_exactly():
    check(
        lambda x: ops.mean(ops.mul(ops.reshape(ops.transpose(x, 1, 2), (2, 12)), ops.reshape(ops.transpose(x, 1, 2), (2, 12)))),
        rnd(2, 3, 4),
    )
    check(lambda x: ops.mean(ops.narrow(x, 1, 1, 2)), rnd(3, 4))
    check(lambda x: ops.mean(ops.concat([x, ops.scale(x, 2.0)], axis=0)), rnd(2, 3))
    check(lambda x: ops.mean(ops.gather_rows(x, np.array([0, 2, 2]))), rnd(4, 3))


def test_cross_entropy():
    labels = np.array([0, 2, 1])
    check(lambda z: ops.cross_entropy_with_logits(z, labels), rnd(3, 4))


def test_attention_sized_composite():
    q = rnd(2, 5, 6)
    k = rnd(2, 5, 6, seed=1)

    def build(a, b):
        scores = ops.scale(ops.matmul(a, ops.transpose(b, 1, 2)), 6 ** -0.5)
        return ops.mean(ops.matmul(ops.softmax(scores), b))

    check(build, q, k)


def test_float32_parameters_rejected():
    p = Parameter("w", np.ones(3, dtype=np.float32))
    with pytest.raises(TypeError):
        finite_difference_check(lambda: ops.mean(ops.relu(p.value)), [p])


def test_bad_eps_rejected():
    p = Parameter("w", np.ones(3))
    with pytest.raises(ValueError):
        finite_difference_check(lambda: ops.mean(p.value), [p], eps=0.0)
