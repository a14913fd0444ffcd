import hashlib
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motionlift import autograd as ag
from motionlift.errors import ConfigError, ShapeError
from motionlift.network import Model, NetworkConfig
from motionlift.optim import AdamW
from motionlift.pretrain import (PretrainConfig, TeacherState, apply_mask, build_target, ema_update, make_mask_plan,
                                 pretrain_loop, pretrain_loss, pretrain_step, replicate_for_multimask)

from conftest import path_topology


def cfg(**kw):
    base = dict(mask_prob=0.8, replicas=3, target_layers=1)
    base.update(kw)
    return PretrainConfig(**base)


def param_hash(model):
    h = hashlib.sha256()
    for n in sorted(model.params):
        h.update(model.params[n].data.tobytes())
    return h.hexdigest()


class TestConfig:
    def test_defaults(self):
        c = PretrainConfig()
        assert (c.mask_prob, c.replicas, c.target_layers, c.tau_start, c.tau_end) == (0.8, 3, 8, 0.999, 0.9999)

    @pytest.mark.parametrize("kw", [{"mask_prob": 0.0}, {"mask_prob": 1.0}, {"replicas": 0}, {"target_layers": 0},
                                    {"tau_start": 1.5}, {"mask_axis": "joints"}, {"loss_support": "none"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            PretrainConfig(**kw)


class TestMaskPlan:
    def test_eight_of_ten(self):
        plan = make_mask_plan(2, 10, cfg(), seed=0)
        assert plan.mask.shape == (6, 10)
        assert (plan.mask.sum(axis=1) == 8).all() and plan.per_row_count == 8

    def test_half_of_two(self):
        assert (make_mask_plan(3, 2, cfg(mask_prob=0.5), seed=1).mask.sum(axis=1) == 1).all()

    @pytest.mark.parametrize("p,l", [(0.01, 10), (0.99, 10)])
    def test_degenerate(self, p, l):
        with pytest.raises(ValueError):
            make_mask_plan(1, l, cfg(mask_prob=p), seed=0)

    def test_positional_uniformity(self):
        plan = make_mask_plan(10000, 10, cfg(mask_prob=0.7, replicas=1), seed=3)
        freq = plan.mask.mean(axis=0)
        assert freq.min() >= 0.67 and freq.max() <= 0.73

    def test_replicas_independent(self):
        plan = make_mask_plan(50, 20, cfg(mask_prob=0.5), seed=4)
        assert not np.array_equal(plan.mask[:50], plan.mask[50:100])

    def test_deterministic(self):
        a, b = make_mask_plan(2, 8, cfg(), 9, (3, 4)), make_mask_plan(2, 8, cfg(), 9, (3, 4))
        assert np.array_equal(a.mask, b.mask) and np.array_equal(a.fill_noise, b.fill_noise)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 30), st.sampled_from([0.6, 0.7, 0.8]), st.integers(0, 10**6))
    def test_exact_count(self, b, l, p, seed):
        k = int(np.floor(p * l + 0.5))
        if not 1 <= k < l:
            return
        plan = make_mask_plan(b, l, cfg(mask_prob=p), seed)
        assert (plan.mask.sum(axis=1) == k).all()


class TestReplicateAndMask:
    def test_layout(self):
        f = np.random.default_rng(0).normal(size=(2, 3, 2, 4))
        r = replicate_for_multimask(f, 3).data
        for b in range(2):
            for m in range(3):
                assert np.array_equal(r[m * 2 + b], f[b])
        assert replicate_for_multimask(f, 1).data is not None
        np.testing.assert_array_equal(replicate_for_multimask(f, 1).data, f)

    def test_mask_noise_and_untouched(self):
        f = np.random.default_rng(1).normal(size=(6, 5, 3, 4))
        plan = make_mask_plan(2, 5, cfg(mask_prob=0.6), 2, (3, 4))
        out = apply_mask(f, plan).data
        m = plan.mask
        assert np.array_equal(out[~m], f[~m])
        assert np.array_equal(out[m], plan.fill_noise[m])

    def test_zero_variance_noise(self):
        f = np.ones((3, 4, 2, 2))
        plan = make_mask_plan(1, 4, cfg(mask_prob=0.5), 0, (2, 2))
        plan.fill_noise[:] = 0.0
        out = apply_mask(f, plan).data
        assert np.all(out[plan.mask] == 0) and np.all(out[~plan.mask] == 1)

    def test_noise_statistics(self):
        plan = make_mask_plan(500, 10, cfg(mask_prob=0.5, replicas=1), 5, (5, 8))
        vals = plan.fill_noise[plan.mask]
        assert vals.size >= 10**5
        assert abs(vals.mean()) <= 0.02 and 0.98 <= vals.std() <= 1.02

    def test_token_axis(self):
        plan = make_mask_plan(1, 12, cfg(mask_prob=0.5, replicas=2, mask_axis="tokens"), 0, (4,))
        out = apply_mask(np.zeros((2, 4, 3, 4)), plan).data
        per_token = (out != 0).any(axis=-1).reshape(2, 12)
        assert np.array_equal(per_token, plan.mask)

    def test_shape_mismatch(self):
        plan = make_mask_plan(2, 4, cfg(mask_prob=0.5), 0, (3, 2))
        with pytest.raises(ShapeError):
            apply_mask(np.zeros((5, 4, 3, 2)), plan)


class TestEMA:
    def make(self, tau_start=0.999, tau_end=0.9999, steps=10):
        c = NetworkConfig(layers=1, dim=4, heads=1, mlp_ratio=1, frames=2, joints=2)
        student = Model(c, path_topology(2), seed=0)
        return student, TeacherState(student.copy(), tau_start, tau_end, steps)

    def test_scalar_oracle(self):
        student, teacher = self.make()
        rng = np.random.default_rng(0)
        for t in student.params.values():
            t.data = rng.normal(size=t.shape)
        before = {n: t.data.copy() for n, t in teacher.params.items()}
        ema_update(teacher, student)
        for n, t in teacher.params.items():
            it = np.nditer([before[n], student.params[n].data, t.data])
            for d, th, new in it:
                assert abs(float(new) - (0.999 * float(d) + (1 - 0.999) * float(th))) <= 1e-12

    def test_hand_value(self):
        student, teacher = self.make()
        name = "embed.bias"
        teacher.params[name].data[:] = 2.0
        student.params[name].data[:] = 1.0
        ema_update(teacher, student)
        np.testing.assert_allclose(teacher.params[name].data, 1.999, atol=1e-15)

    @pytest.mark.parametrize("tau", [0.0, 1.0])
    def test_fixed_points(self, tau):
        student, teacher = self.make(tau, tau)
        for t in student.params.values():
            t.data = t.data + 1.0
        before = {n: t.data.copy() for n, t in teacher.params.items()}
        ema_update(teacher, student)
        for n, t in teacher.params.items():
            assert np.array_equal(t.data, student.params[n].data if tau == 0.0 else before[n])

    def test_schedule_endpoints(self):
        _, teacher = self.make(0.999, 0.9999, steps=4)
        taus = []
        for s in range(7):
            teacher.step = s
            taus.append(teacher.tau)
        assert taus[0] == 0.999 and taus[4] == pytest.approx(0.9999, abs=1e-15) and taus[6] == taus[4]
        assert all(a <= b for a, b in zip(taus, taus[1:]))

    def test_bn_stats_copied(self):
        student, teacher = self.make()
        for st_ in student.bn.values():
            st_.running_mean = st_.running_mean + 3.0
        ema_update(teacher, student)
        for n, st_ in teacher.model.bn.items():
            assert np.array_equal(st_.running_mean, student.bn[n].running_mean)

    def test_shape_mismatch(self):
        student, teacher = self.make()
        c = NetworkConfig(layers=1, dim=8, heads=1, mlp_ratio=1, frames=2, joints=2)
        with pytest.raises(ShapeError):
            ema_update(teacher, Model(c, path_topology(2)))

    def test_concurrent_reads_see_consistent_state(self):
        student, teacher = self.make()
        x = np.zeros((1, 2, 2, 3))
        errors = []

        def reader():
            try:
                for _ in range(20):
                    teacher.encode(x)
            except Exception as exc:  # pragma: no cover
                errors.append(exc)
        th = threading.Thread(target=reader)
        th.start()
        for _ in range(20):
            ema_update(teacher, student)
        th.join()
        assert not errors


def plain_ln(v, eps=1e-12):
    mu = v.mean(-1, keepdims=True)
    return (v - mu) / np.sqrt(((v - mu) ** 2).mean(-1, keepdims=True) + eps)


class TestTarget:
    def test_unit_statistics(self):
        rng = np.random.default_rng(0)
        layers = [rng.normal(size=(2, 3, 4, 8)) * (i + 1) + i for i in range(4)]
        tgt = build_target(layers, 3)
        np.testing.assert_allclose(tgt.mean(-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(tgt.var(-1), 1.0, atol=1e-5)

    def test_k1_idempotent(self):
        rng = np.random.default_rng(1)
        f = rng.normal(size=(2, 3, 4, 8)) * 5 + 2
        np.testing.assert_allclose(build_target([rng.normal(size=f.shape), f], 1), plain_ln(f), atol=1e-7)

    def test_identical_layers_equal_k1(self):
        f = np.random.default_rng(2).normal(size=(1, 2, 3, 6))
        np.testing.assert_allclose(build_target([f, f, f], 3), build_target([f], 1), atol=1e-12)

    def test_hand_two_channel(self):
        # with two channels LN maps (a, b) to (sign(a-b), sign(b-a))
        f1 = np.array([[[[3.0, 1.0]]]])
        f2 = np.array([[[[0.0, 4.0]]]])
        f3 = np.array([[[[5.0, 2.0]]]])
        np.testing.assert_allclose(build_target([f2, f1, f3], 2), [[[[1.0, -1.0]]]], atol=1e-9)
        # mean of (1,-1), (-1,1), (1,-1) is (1/3, -1/3), renormalized to (1, -1)
        np.testing.assert_allclose(build_target([f1, f2, f3], 3), [[[[1.0, -1.0]]]], atol=1e-9)
        np.testing.assert_allclose(build_target([f1, f3, f2], 1), [[[[-1.0, 1.0]]]], atol=1e-9)

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            build_target([np.zeros((1, 1, 1, 2))], 2)


class TestLoss:
    def setup_method(self):
        self.plan = make_mask_plan(2, 4, cfg(mask_prob=0.5), 0, (3, 5))
        self.target = np.random.default_rng(0).normal(size=(2, 4, 3, 5))

    def rep(self):
        return np.concatenate([self.target] * 3)

    def test_zero_when_masked_match(self):
        s = np.random.default_rng(1).normal(size=(6, 4, 3, 5))
        s[self.plan.mask] = self.rep()[self.plan.mask]
        assert float(pretrain_loss(s, self.target, self.plan).data) == 0.0

    def test_constant_offset(self):
        s = self.rep() + 0.3
        assert float(pretrain_loss(s, self.target, self.plan).data) == pytest.approx(0.09, abs=1e-15)

    def test_brute_force(self):
        s = np.random.default_rng(2).normal(size=(6, 4, 3, 5))
        total, n = 0.0, 0
        for r in range(6):
            for t in range(4):
                if self.plan.mask[r, t]:
                    for j in range(3):
                        for c in range(5):
                            total += (s[r, t, j, c] - self.target[r % 2, t, j, c]) ** 2
                            n += 1
        assert float(pretrain_loss(s, self.target, self.plan).data) == pytest.approx(total / n, abs=1e-12)

    def test_all_support(self):
        s = self.rep() + 0.5
        s[~self.plan.mask] += 1.0
        assert float(pretrain_loss(s, self.target, self.plan, "all").data) == pytest.approx(
            0.5 * 0.25 + 0.5 * 2.25)

    def test_replica_permutation_invariance(self):
        s = np.random.default_rng(3).normal(size=(6, 4, 3, 5))
        base = float(pretrain_loss(s, self.target, self.plan).data)
        perm = [2, 0, 1]
        rows = np.concatenate([np.arange(2) + 2 * m for m in perm])
        plan2 = make_mask_plan(2, 4, cfg(mask_prob=0.5), 0, (3, 5))
        plan2.mask = self.plan.mask[rows]
        assert float(pretrain_loss(s[rows], self.target, plan2).data) == pytest.approx(base, abs=1e-14)

    def test_target_gets_no_gradient(self):
        s = ag.Tensor(np.zeros((6, 4, 3, 5)), requires_grad=True)
        tgt = ag.Tensor(self.target, requires_grad=True)
        pretrain_loss(s, tgt, self.plan).backward()
        assert tgt.grad is None and s.grad is not None


class TestStep:
    def setup(self, replicas=3, tau=0.999):
        c = NetworkConfig(layers=2, dim=8, heads=2, mlp_ratio=2, frames=5, joints=3)
        student = Model(c, path_topology(3), seed=0)
        pc = PretrainConfig(mask_prob=0.6, replicas=replicas, target_layers=2, tau_start=tau, tau_end=tau, steps=4)
        teacher = TeacherState.from_student(student, pc)
        opt = AdamW(student.params, 1e-3, total_steps=4)
        x = np.random.default_rng(0).normal(size=(2, 5, 3, 3))
        return student, teacher, pc, opt, x

    def test_one_teacher_forward_per_step(self):
        student, teacher, pc, opt, x = self.setup()
        for s in range(3):
            pretrain_step(student, teacher, x, pc, opt, seed=s)
        assert teacher.forward_calls == 3
        assert teacher.forward_rows == [2, 2, 2]

    def test_replica_count_changes_loss_not_teacher_calls(self):
        res = {}
        for m in (1, 3):
            student, teacher, pc, opt, x = self.setup(replicas=m)
            res[m] = (pretrain_step(student, teacher, x, pc, opt, seed=0), teacher.forward_calls)
        assert res[1][0] != res[3][0]
        assert res[1][1] == res[3][1] == 1

    def test_teacher_unchanged_with_tau_one(self):
        student, teacher, pc, opt, x = self.setup(tau=1.0)
        before = param_hash(teacher.model)
        pretrain_step(student, teacher, x, pc, opt, seed=0)
        assert param_hash(teacher.model) == before
        assert param_hash(student) != before

    def test_teacher_never_gets_gradients(self):
        student, teacher, pc, opt, x = self.setup()
        pretrain_step(student, teacher, x, pc, opt, seed=0)
        assert all(t.grad is None and not t.requires_grad for t in teacher.params.values())

    def test_k_greater_than_n(self):
        student, teacher, pc, opt, x = self.setup()
        pc.target_layers = 3
        with pytest.raises(ConfigError):
            pretrain_step(student, teacher, x, pc, opt)

    def test_loop_deterministic(self):
        c = NetworkConfig(layers=1, dim=8, heads=2, mlp_ratio=1, frames=5, joints=3)
        x = np.random.default_rng(0).normal(size=(5, 5, 3, 3))
        pc = PretrainConfig(mask_prob=0.6, target_layers=1, steps=4, batch_size=2)
        a = pretrain_loop(Model(c, path_topology(3), seed=1), x, pc, seed=2).losses
        b = pretrain_loop(Model(c, path_topology(3), seed=1), x, pc, seed=2).losses
        assert a == b and len(a) == 4
