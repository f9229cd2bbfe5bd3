import math
import zlib

import numpy as np
import pytest

from simmil.errors import ContractError, FormatError
from simmil.numeric import (
    AdamKind,
    BatchNorm,
    Conv2d,
    CosineSchedule,
    F,
    Linear,
    OptimizerState,
    SGDMomentum,
    StepSchedule,
    Tensor,
    adam_step,
    check_gradients,
    schedule_lr,
    sgd_momentum_step,
)
from simmil.numeric import checkpoint as ck


def t64(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


class TestBackward:
    def test_square(self):
        x = t64(3.0)
        (x * x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_softmax_sum_has_zero_gradient(self):
        x = t64(np.random.default_rng(0).normal(size=5))
        F.softmax(x, axis=0).sum().backward()
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = t64(np.ones(3))
        with pytest.raises(ContractError):
            (x * 2).backward()

    def test_shared_subexpression_accumulates(self):
        x = t64(2.0)
        y = x * x
        (y + y * x).backward()  # 2x^2... d/dx (x^2 + x^3) = 2x + 3x^2
        assert x.grad == pytest.approx(4 + 12)

    def test_mlp_against_finite_differences(self):
        rng = np.random.default_rng(3)
        # 3-layer tanh perceptron 2->3->2->1 with biases: 9 + 8 + 3 = 20 parameters
        layers = [Linear(2, 3, rng), Linear(3, 2, rng), Linear(2, 1, rng)]
        params = [p for layer in layers for p in layer.astype(np.float64).parameters()]
        assert sum(p.data.size for p in params) == 20
        x = Tensor(rng.normal(size=(5, 2)))

        def fn():
            h = F.tanh(layers[0](x))
            h = F.tanh(layers[1](h))
            return (layers[2](h) ** 2).sum()

        assert check_gradients(fn, params, step=1e-3) < 1e-3


OPS = {
    "add_broadcast": lambda a, b: (a + b[0]).sum(),
    "mul": lambda a, b: (a * b).sum(),
    "div": lambda a, b: (a / (b * b + 1.0)).sum(),
    "matmul": lambda a, b: (a @ b.T).sum(),
    "exp_log": lambda a, b: F.log(F.exp(a) + F.exp(b)).sum(),
    "sigmoid": lambda a, b: (F.sigmoid(a) * b).sum(),
    "tanh": lambda a, b: (F.tanh(a) * b).sum(),
    "softplus": lambda a, b: (F.softplus(a) * b).sum(),
    "softmax": lambda a, b: (F.softmax(a, axis=1) * b).sum(),
    "log_softmax": lambda a, b: (F.log_softmax(a, axis=0) * b).sum(),
    "max_axis": lambda a, b: (a * b).max(axis=1).sum(),
    "mean_axis": lambda a, b: (a * b).mean(axis=0).sum(),
    "relu": lambda a, b: (F.relu(a) * b).sum(),
    "power": lambda a, b: ((a * a + 1.0) ** 0.5 * b).sum(),
    "index": lambda a, b: (a[(np.array([0, 2, 2]), np.array([1, 0, 1]))] * 3.0).sum() + b.sum(),
    "concat": lambda a, b: (F.concat([a, b], axis=1) ** 2).sum(),
    "stack_transpose": lambda a, b: (F.stack([a, b]).transpose(2, 0, 1) * F.stack([b, a]).transpose(2, 0, 1)).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_random_trials(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        a = t64(rng.normal(size=(3, 4)))
        b = t64(rng.normal(size=(3, 4)))
        worst = max(worst, check_gradients(lambda: OPS[name](a, b), [a, b]))
    assert worst < 1e-3


def test_conv_batchnorm_gradients():
    rng = np.random.default_rng(5)
    conv = Conv2d(2, 3, 3, rng, stride=2, padding=1).astype(np.float64)
    bn = BatchNorm(3).astype(np.float64)
    x = t64(rng.normal(size=(4, 2, 6, 5)))
    w = Tensor(rng.normal(size=(4, 3)))

    def fn():
        return (bn(conv(x)).mean(axis=(2, 3)) * w).sum()

    assert check_gradients(fn, [x] + conv.parameters() + bn.parameters()) < 1e-3


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    out = F.conv2d(Tensor(x), Tensor(w), None, stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 4, 4))
    for i in range(4):
        for j in range(4):
            patch = xp[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            ref[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, w)
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_batchnorm_eval_uses_running_estimates():
    bn = BatchNorm(2)
    x = Tensor(np.array([[1.0, 2.0], [3.0, 6.0]], dtype=np.float32))
    bn(x)
    np.testing.assert_allclose(bn.running_mean, [0.2, 0.4], rtol=1e-6)
    bn.eval()
    out = bn(x).data
    expected = (x.data - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
    np.testing.assert_allclose(out, expected, rtol=1e-6)


class TestSGD:
    def run(self, momentum, lr, p, grads):
        params = [np.array([p], dtype=np.float64)]
        state = OptimizerState.create(SGDMomentum(lr, momentum), params)
        trace = []
        for g in grads:
            sgd_momentum_step(state, params, [np.array([g], dtype=np.float64)])
            trace.append((params[0][0], state.first[0][0]))
        return trace

    def test_vanilla(self):
        assert self.run(0.0, 0.1, 1.0, [2.0])[-1][0] == pytest.approx(0.8)

    def test_two_momentum_steps(self):
        # hand-rolled: v1 = 1, p1 = -1; v2 = 0.9 + 1 = 1.9, p2 = -2.9
        (p1, v1), (p2, v2) = self.run(0.9, 1.0, 0.0, [1.0, 1.0])
        assert (p1, v1) == pytest.approx((-1.0, 1.0))
        assert (p2, v2) == pytest.approx((-2.9, 1.9))

    def test_zero_gradient_is_noop(self):
        assert self.run(0.9, 0.5, 1.5, [0.0])[-1][0] == 1.5

    def test_shape_mismatch(self):
        state = OptimizerState.create(SGDMomentum(0.1), [np.zeros(3)])
        with pytest.raises(ContractError):
            sgd_momentum_step(state, [np.zeros(3)], [np.zeros(2)])

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        g = [rng.normal(size=(4, 4)).astype(np.float32)]
        outs = []
        for _ in range(2):
            p = [np.ones((4, 4), dtype=np.float32)]
            st = OptimizerState.create(SGDMomentum(0.1, 0.9), p)
            for _ in range(3):
                sgd_momentum_step(st, p, g)
            outs.append(p[0].tobytes())
        assert outs[0] == outs[1]


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        for g in (1e-3, 0.5, 40.0, -7.0):
            p = [np.array([1.0])]
            st = OptimizerState.create(AdamKind(1e-3), p)
            adam_step(st, p, [np.array([g])])
            assert abs(p[0][0] - 1.0) == pytest.approx(1e-3, rel=1e-4)

    def test_zero_gradient_fresh_state(self):
        p = [np.array([0.3, -0.2])]
        st = OptimizerState.create(AdamKind(1e-2), p)
        adam_step(st, p, [np.zeros(2)])
        np.testing.assert_array_equal(p[0], [0.3, -0.2])

    def test_constant_gradient_moves_monotonically(self):
        p = [np.array([0.0])]
        st = OptimizerState.create(AdamKind(1e-2), p)
        trace = []
        for _ in range(2):
            adam_step(st, p, [np.array([2.0])])
            trace.append(p[0][0])
        assert 0 > trace[0] > trace[1]


class TestSchedules:
    def test_step(self):
        s = StepSchedule((60, 80), 0.1, 100)
        assert schedule_lr(s, 1e-3, 0) == pytest.approx(1e-3)
        assert schedule_lr(s, 1e-3, 61) == pytest.approx(1e-4)
        assert schedule_lr(s, 1e-3, 99) == pytest.approx(1e-5)

    def test_cosine_midpoint(self):
        assert schedule_lr(CosineSchedule(100), 2.0, 50) == pytest.approx(1.0)

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            schedule_lr(CosineSchedule(10), 1.0, 10)
        with pytest.raises(ContractError):
            schedule_lr(StepSchedule(total_epochs=5), 1.0, -1)

    @pytest.mark.parametrize("sched", [StepSchedule((3, 7), 0.1, 12), CosineSchedule(12)])
    def test_non_increasing(self, sched):
        lrs = [schedule_lr(sched, 0.1, e) for e in range(12)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))


class TestCheckpoint:
    def make(self):
        from collections import OrderedDict
        params = OrderedDict(w=np.arange(6, dtype=np.float32).reshape(2, 3), b=np.float32([1.5]),
                             s=np.array(3.0, dtype=np.float32))
        return ck.Checkpoint(params, ck.fingerprint_of("cfg"), "cfg")

    def test_round_trip(self, tmp_path):
        c = self.make()
        path = ck.save(c, tmp_path / "m.smck")
        back = ck.load(path)
        assert back.equal_params(c)
        assert back.fingerprint == c.fingerprint
        assert back.config_text == "cfg"
        back.verify()

    def test_header_layout(self):
        buf = ck.to_bytes(self.make())
        assert buf[:4] == b"SMCK"
        assert int.from_bytes(buf[4:8], "little") == 1
        assert int.from_bytes(buf[8:12], "little") == 3
        assert buf[-32:] == ck.fingerprint_of("cfg")

    def test_bad_magic_and_truncation(self):
        buf = ck.to_bytes(self.make())
        with pytest.raises(FormatError):
            ck.from_bytes(b"XXXX" + buf[4:])
        with pytest.raises(FormatError):
            ck.from_bytes(buf[:-40])

    def test_verify_detects_mismatch(self):
        c = self.make()
        c.config_text = "other"
        with pytest.raises(ContractError):
            c.verify()


def test_finite_difference_relative_error_floor():
    from simmil.numeric import relative_error
    assert relative_error(np.array([1e-12]), np.array([0.0])) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.001])) == pytest.approx(0.001 / 1.001)
    assert math.isfinite(relative_error(np.zeros(3), np.zeros(3)))
