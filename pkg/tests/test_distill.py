import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from sparsekit.distill import (LossVariant, TokenBatch, combined_loss, compute_losses, logit_kd_loss,
                               predictive_entropy, squarehead_layer_loss, squarehead_total, task_loss)
from sparsekit.errors import DegenerateTeacherError, DomainError, MissingTeacherError, ShapeError


def _batch(rng, B, seq, V, padded=0):
    padding = np.zeros((B, seq), dtype=bool)
    padding.ravel()[rng.choice(B * seq, size=padded, replace=False)] = True
    return TokenBatch(targets=rng.integers(0, V, size=(B, seq)), padding=padding)


def _numeric_grad(f, x, step=1e-3, points=None, rng=None):
    """ Central differences of scalar f at x, over all entries or `points` random ones. """
    flat = x.reshape(-1)
    indices = range(flat.size) if points is None else rng.choice(flat.size, size=points, replace=False)
    out = {}
    for i in indices:
        saved = flat[i]
        flat[i] = saved + step
        plus = f(x)
        flat[i] = saved - step
        minus = f(x)
        flat[i] = saved
        out[int(i)] = (plus - minus) / (2 * step)
    return out


def _assert_grad(analytic, numeric, rtol=1e-4, atol=1e-6):
    flat = analytic.reshape(-1)
    for i, value in numeric.items():
        assert flat[i] == pytest.approx(value, rel=rtol, abs=atol), f"entry {i}"


class TestTokenBatch:
    def test_all_padding(self):
        batch = TokenBatch(targets=np.zeros((1, 3)), padding=np.ones((1, 3)))
        with pytest.raises(DomainError):
            batch.count

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            TokenBatch(targets=np.zeros((2, 3)), padding=np.zeros((3, 2)))


class TestTaskLoss:
    def test_confident_targets(self):
        batch = TokenBatch(targets=[[0, 2]], padding=[[False, False]])
        logits = np.full((1, 2, 3), -1e4)
        logits[0, 0, 0] = logits[0, 1, 2] = 0.0
        loss, _ = task_loss(logits, batch)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_uniform(self):
        batch = TokenBatch(targets=[[1, 4, 2]], padding=[[False, False, True]])
        loss, _ = task_loss(np.zeros((1, 3, 7)), batch)
        assert loss == pytest.approx(math.log(7))

    def test_naive_loop(self, rng):
        batch = _batch(rng, 2, 3, 5, padded=1)
        logits = rng.standard_normal((2, 3, 5))
        total, count = 0.0, 0
        for b in range(2):
            for i in range(3):
                if batch.padding[b, i]:
                    continue
                z = logits[b, i]
                total += -(z[batch.targets[b, i]] - math.log(sum(math.exp(v) for v in z)))
                count += 1
        loss, _ = task_loss(logits, batch)
        assert loss == pytest.approx(total / count, abs=1e-6)

    def test_gradient(self, rng):
        batch = _batch(rng, 2, 4, 6, padded=2)
        logits = rng.standard_normal((2, 4, 6))
        _, grad = task_loss(logits, batch)
        numeric = _numeric_grad(lambda z: task_loss(z, batch)[0], logits.copy())
        _assert_grad(grad, numeric)
        assert np.all(grad[batch.padding] == 0)

    def test_target_out_of_range(self):
        batch = TokenBatch(targets=[[5]], padding=[[False]])
        with pytest.raises(DomainError):
            task_loss(np.zeros((1, 1, 5)), batch)

    def test_padding_target_ignored(self):
        batch = TokenBatch(targets=[[1, 99]], padding=[[False, True]])
        loss, _ = task_loss(np.zeros((1, 2, 4)), batch)
        assert loss == pytest.approx(math.log(4))


class TestLogitKD:
    def test_identity(self, rng):
        batch = _batch(rng, 2, 3, 4)
        logits = rng.standard_normal((2, 3, 4))
        loss, grad = logit_kd_loss(logits, logits.copy(), batch)
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert_allclose(grad, 0.0, atol=1e-12)

    def test_closed_form(self):
        batch = TokenBatch(targets=[[0]], padding=[[False]])
        teacher = np.log(np.array([[[0.75, 0.25]]]))
        loss, _ = logit_kd_loss(teacher, np.zeros((1, 1, 2)), batch)
        expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
        assert loss == pytest.approx(expected, abs=1e-9)
        assert loss == pytest.approx(0.13081, abs=1e-5)

    def test_nonnegative(self, rng):
        for _ in range(20):
            batch = _batch(rng, 2, 3, 5, padded=1)
            loss, _ = logit_kd_loss(rng.standard_normal((2, 3, 5)) * 3, rng.standard_normal((2, 3, 5)) * 3, batch)
            assert loss >= 0.0

    def test_gradient(self, rng):
        batch = _batch(rng, 2, 3, 5, padded=1)
        teacher = rng.standard_normal((2, 3, 5))
        student = rng.standard_normal((2, 3, 5))
        _, grad = logit_kd_loss(teacher, student, batch)
        numeric = _numeric_grad(lambda z: logit_kd_loss(teacher, z, batch)[0], student.copy())
        _assert_grad(grad, numeric)

    def test_temperature_gradient(self, rng):
        batch = _batch(rng, 1, 4, 3)
        teacher = rng.standard_normal((1, 4, 3))
        student = rng.standard_normal((1, 4, 3))
        _, grad = logit_kd_loss(teacher, student, batch, temperature=2.0)
        numeric = _numeric_grad(lambda z: logit_kd_loss(teacher, z, batch, temperature=2.0)[0], student.copy())
        _assert_grad(grad, numeric)

    def test_non_finite(self):
        batch = TokenBatch(targets=[[0]], padding=[[False]])
        with pytest.raises(DomainError):
            logit_kd_loss(np.array([[[np.nan, 0.0]]]), np.zeros((1, 1, 2)), batch)

    def test_shape_mismatch(self):
        batch = TokenBatch(targets=[[0]], padding=[[False]])
        with pytest.raises(ShapeError):
            logit_kd_loss(np.zeros((1, 1, 3)), np.zeros((1, 1, 2)), batch)


class TestSquareHead:
    def test_identity(self, rng):
        batch = _batch(rng, 2, 4, 3)
        f = rng.standard_normal((2, 4, 8))
        loss, _ = squarehead_layer_loss(f, f.copy(), batch)
        assert loss == 0.0

    def test_zero_student(self, rng):
        batch = _batch(rng, 2, 4, 3, padded=2)
        loss, _ = squarehead_layer_loss(rng.standard_normal((2, 4, 8)), np.zeros((2, 4, 8)), batch)
        assert loss == pytest.approx(1.0)

    def test_naive_loop(self, rng):
        batch = _batch(rng, 2, 4, 3, padded=3)
        f_t = rng.standard_normal((2, 4, 8))
        f_s = rng.standard_normal((2, 4, 8))
        num = den = 0.0
        n = 0
        for b in range(2):
            for i in range(4):
                if batch.padding[b, i]:
                    continue
                for k in range(8):
                    num += (f_t[b, i, k] - f_s[b, i, k]) ** 2
                    den += f_t[b, i, k] ** 2
                    n += 1
        loss, _ = squarehead_layer_loss(f_t, f_s, batch)
        assert loss == pytest.approx((num / n) / (den / n), abs=1e-6)

    def test_gradient(self, rng):
        batch = _batch(rng, 2, 3, 3, padded=1)
        f_t = rng.standard_normal((2, 3, 4))
        f_s = rng.standard_normal((2, 3, 4))
        _, grad = squarehead_layer_loss(f_t, f_s, batch)
        numeric = _numeric_grad(lambda z: squarehead_layer_loss(f_t, z, batch)[0], f_s.copy())
        _assert_grad(grad, numeric)

    def test_padding_invariance(self, rng):
        batch = _batch(rng, 2, 4, 3, padded=3)
        f_t = rng.standard_normal((2, 4, 8))
        f_s = rng.standard_normal((2, 4, 8))
        before, _ = squarehead_layer_loss(f_t, f_s, batch)
        f_t[batch.padding] += 100.0
        f_s[batch.padding] -= 50.0
        after, _ = squarehead_layer_loss(f_t, f_s, batch)
        assert after == before

    @pytest.mark.parametrize("c", [2.0, -0.5, 1e3])
    def test_scale_invariance(self, rng, c):
        batch = _batch(rng, 2, 4, 3, padded=1)
        f_t = rng.standard_normal((2, 4, 8))
        f_s = rng.standard_normal((2, 4, 8))
        base, _ = squarehead_layer_loss(f_t, f_s, batch)
        scaled, _ = squarehead_layer_loss(c * f_t, c * f_s, batch)
        assert scaled == pytest.approx(base, rel=1e-12)

    def test_degenerate_teacher(self, rng):
        batch = _batch(rng, 1, 3, 3)
        with pytest.raises(DegenerateTeacherError):
            squarehead_layer_loss(np.zeros((1, 3, 4)), rng.standard_normal((1, 3, 4)), batch)

    def test_teacher_nonzero_only_in_padding(self):
        batch = TokenBatch(targets=[[0, 0]], padding=[[False, True]])
        f_t = np.zeros((1, 2, 3))
        f_t[0, 1] = 1.0
        with pytest.raises(DegenerateTeacherError):
            squarehead_layer_loss(f_t, np.ones((1, 2, 3)), batch)

    @pytest.mark.parametrize("per_layer,expected", [([0, 0, 0], 0.0), ([1.0], 1.0), ([0.2, 0.5, 0.3], 1.0)])
    def test_total(self, per_layer, expected):
        assert squarehead_total(per_layer) == pytest.approx(expected)

    def test_total_empty(self):
        with pytest.raises(DomainError):
            squarehead_total([])


class TestCombinedLoss:
    def _parts(self):
        g = np.ones((1, 1, 2))
        return (0.4, g), (0.3, 2 * g), [(0.6, np.ones((1, 1, 4)))]

    def test_squarehead_sum(self):
        task, logit, feat = self._parts()
        breakdown = combined_loss("squarehead", task, feat=feat)
        assert breakdown.total == pytest.approx(1.0)
        assert breakdown.feat_total == pytest.approx(0.6)

    def test_kd_with_zero_weight_is_ce(self):
        task, logit, _ = self._parts()
        kd = combined_loss(LossVariant.KD, task, logit=logit, lam=0.0)
        ce = combined_loss(LossVariant.CE, task)
        assert kd.total == ce.total
        assert_allclose(kd.grad_logits, ce.grad_logits)

    def test_gradients_add(self):
        task, logit, feat = self._parts()
        breakdown = combined_loss("squarehead_kd", task, logit=logit, feat=feat, lam=0.5)
        assert breakdown.total == pytest.approx(0.4 + 0.5 * 0.3 + 0.5 * 0.6)
        assert_allclose(breakdown.grad_logits, np.full((1, 1, 2), 2.0))
        assert_allclose(breakdown.grad_features[0], np.full((1, 1, 4), 0.5))

    def test_missing_teacher(self):
        task, _, _ = self._parts()
        with pytest.raises(MissingTeacherError):
            combined_loss("kd", task)
        with pytest.raises(MissingTeacherError):
            combined_loss("squarehead", task)

    def test_variant_names(self):
        assert LossVariant.parse("StandardKD") is LossVariant.KD
        assert LossVariant.parse("SquareHead") is LossVariant.SQUAREHEAD
        with pytest.raises(DomainError):
            LossVariant.parse("mse")

    def test_as_row(self):
        task, _, feat = self._parts()
        row = combined_loss("squarehead", task, feat=feat).as_row(7, 1.25)
        assert list(row) == ["step", "variant", "task", "logit_kd", "feat_total", "total", "entropy"]
        assert row["step"] == 7 and row["variant"] == "squarehead" and row["entropy"] == 1.25

    @pytest.mark.parametrize("variant", ["ce", "kd", "squarehead", "squarehead_kd"])
    def test_compute_losses_gradient(self, rng, variant):
        batch = _batch(rng, 2, 3, 4, padded=1)
        t_logits = rng.standard_normal((2, 3, 4))
        t_feats = [rng.standard_normal((2, 3, 5)) for _ in range(2)]
        s_logits = rng.standard_normal((2, 3, 4))
        s_feats = [rng.standard_normal((2, 3, 5)) for _ in range(2)]

        def total(logits, feats):
            return compute_losses(variant, logits, feats, batch, t_logits, t_feats, lam=0.7, feat_lam=2.0).total

        breakdown = compute_losses(variant, s_logits, s_feats, batch, t_logits, t_feats, lam=0.7, feat_lam=2.0)
        numeric = _numeric_grad(lambda z: total(z, s_feats), s_logits.copy())
        assert len(numeric) >= 20
        _assert_grad(breakdown.grad_logits, numeric)
        if LossVariant.parse(variant).uses_features:
            f0 = s_feats[0].copy()
            numeric = _numeric_grad(lambda z: total(s_logits, [z, s_feats[1]]), f0)
            assert len(numeric) >= 20
            _assert_grad(breakdown.grad_features[0], numeric)
        else:
            assert breakdown.grad_features == ()


class TestPredictiveEntropy:
    def test_one_hot(self):
        batch = TokenBatch(targets=[[0, 0]], padding=[[False, False]])
        logits = np.full((1, 2, 3), -1e4)
        logits[0, :, 1] = 0.0
        assert predictive_entropy(logits, batch) == pytest.approx(0.0, abs=1e-12)

    def test_saturated_float32_logits(self):
        batch = TokenBatch(targets=[[0, 0]], padding=[[False, False]])
        logits = np.array([[[3e38, -3e38], [-3e38, 3e38]]], dtype=np.float32)
        with np.errstate(over="ignore"):
            h = predictive_entropy(logits, batch)
        assert np.isfinite(h)
        assert h == pytest.approx(0.0, abs=1e-12)

    def test_uniform(self):
        batch = TokenBatch(targets=[[0]], padding=[[False]])
        assert predictive_entropy(np.zeros((1, 1, 10)), batch) == pytest.approx(math.log(10), abs=1e-4)

    def test_closed_form(self):
        batch = TokenBatch(targets=[[0]], padding=[[False]])
        logits = np.log(np.array([[[0.5, 0.25, 0.25]]]))
        assert predictive_entropy(logits, batch) == pytest.approx(1.5 * math.log(2), abs=1e-9)

    def test_bounds(self, rng):
        batch = _batch(rng, 3, 4, 6, padded=2)
        h = predictive_entropy(rng.standard_normal((3, 4, 6)) * 4, batch)
        assert 0.0 <= h <= math.log(6)

    def test_all_padding(self):
        batch = TokenBatch(targets=[[0]], padding=[[True]])
        with pytest.raises(DomainError):
            predictive_entropy(np.zeros((1, 1, 2)), batch)
