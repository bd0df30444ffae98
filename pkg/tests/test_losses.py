"""Loss semantics: frozen hand-arithmetic values, independent loop oracles,
finite-difference gradients and algebraic properties."""

import math

import numpy as np
import pytest
import torch

from helpers import check_input_gradient
from protoseg import losses
from protoseg.losses import (EPS, LossBundle, LossWeights, loss_adversarial,
                             loss_bg, loss_cross, loss_discriminator,
                             loss_seen, loss_seg, loss_stage1,
                             pseudo_background)


def t(arr):
    return torch.tensor(np.asarray(arr), dtype=torch.float64)


def rand_probs(rng, n, c, h, w):
    logits = rng.normal(size=(n, c, h, w))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return t(e / e.sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# independent scalar-loop oracles
# ---------------------------------------------------------------------------

def oracle_stage1(probs, onehot):
    n, c, h, w = probs.shape
    total = 0.0
    for i in range(n):
        for ci in range(c):
            for y in range(h):
                for x in range(w):
                    total += -onehot[i, ci, y, x] * math.log(probs[i, ci, y, x] + EPS)
    return total / (n * c * h * w)


def oracle_seen_term(probs, seen_onehot, seen_indices):
    n, cs, h, w = seen_onehot.shape
    total = 0.0
    for i in range(n):
        per_sample = 0.0
        for k, ci in enumerate(seen_indices):
            for y in range(h):
                for x in range(w):
                    per_sample += -seen_onehot[i, k, y, x] * math.log(probs[i, ci, y, x] + EPS)
        total += per_sample / (h * w * cs)
    return total / n


def oracle_bg(y_hat, m_bg):
    n, _, h, w = y_hat.shape
    total = 0.0
    for i in range(n):
        per = 0.0
        for y in range(h):
            for x in range(w):
                per += (y_hat[i, 0, y, x] - m_bg[i, 0, y, x]) ** 2
        total += per / (h * w)
    return total / n


def oracle_disc(d_p, d_sp, d_ps, d_s, lam):
    vals = []
    for i in range(d_p.shape[0]):
        for y in range(d_p.shape[2]):
            for x in range(d_p.shape[3]):
                vals.append(-lam[0] * math.log(d_p[i, 0, y, x] + EPS)
                            - lam[1] * math.log(1 - d_sp[i, 0, y, x] + EPS)
                            - lam[2] * math.log(1 - d_ps[i, 0, y, x] + EPS)
                            - lam[3] * math.log(1 - d_s[i, 0, y, x] + EPS))
    return float(np.mean(vals))


def oracle_adv(d_sp, d_ps, d_s):
    vals = []
    for i in range(d_s.shape[0]):
        for y in range(d_s.shape[2]):
            for x in range(d_s.shape[3]):
                vals.append(-math.log(d_sp[i, 0, y, x] + EPS)
                            - math.log(d_ps[i, 0, y, x] + EPS)
                            - math.log(d_s[i, 0, y, x] + EPS))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# hand-arithmetic cases
# ---------------------------------------------------------------------------

class TestHandValues:
    def test_stage1_half_probability(self):
        probs = t([[[[0.5]], [[0.5]]]])
        onehot = t([[[[1.0]], [[0.0]]]])
        expected = -0.5 * math.log(0.5)     # 0.3466
        assert abs(float(loss_stage1(probs, onehot)) - expected) < 1e-6

    def test_stage1_perfect(self):
        probs = t([[[[1.0]], [[0.0]]]])
        onehot = t([[[[1.0]], [[0.0]]]])
        assert abs(float(loss_stage1(probs, onehot))) < 1e-6

    def test_cross_single_pixel(self):
        # one pixel, one seen class with prob 0.5 in both swapped outputs
        m = t([[[[0.5]], [[0.5]]]])
        y = t([[[[1.0]]]])
        expected = -(math.log(0.5) + math.log(0.5))  # 1.3863
        got = float(loss_cross(m, m, y, (1,)))
        assert abs(got - expected) < 1e-6

    def test_seen_single_pixel(self):
        m = t([[[[0.5]], [[0.5]]]])
        y = t([[[[1.0]]]])
        expected = math.log(2.0)                     # 0.6931
        assert abs(float(loss_seen(m, y, (1,))) - expected) < 1e-6

    def test_bg_quarter_errors(self):
        y_hat = t([[[[1.0, 0.0]]]])
        m_bg = t([[[[0.75, 0.25]]]])
        assert abs(float(loss_bg(y_hat, m_bg)) - 0.0625) < 1e-6

    def test_discriminator_single_cell(self):
        lam = LossWeights(lam=(3.0, 1.0, 1.0, 1.0))
        d_p, d_sp, d_ps, d_s = t([[[[0.9]]]]), t([[[[0.2]]]]), t([[[[0.3]]]]), t([[[[0.1]]]])
        expected = -3 * math.log(0.9) - math.log(0.8) - math.log(0.7) - math.log(0.9)
        got = float(loss_discriminator(d_p, d_sp, d_ps, d_s, lam))
        assert abs(got - expected) < 1e-6            # 1.0013

    def test_adversarial_all_half(self):
        half = t([[[[0.5]]]])
        expected = -3 * math.log(0.5)                # 2.0794
        assert abs(float(loss_adversarial(half, half, half)) - expected) < 1e-6

    def test_seg_combination(self):
        w = LossWeights()
        assert float(loss_seg(2.0, 1.0, 1.0, 1.0, w)) == pytest.approx(3.01, abs=1e-12)

    def test_seg_zero_components(self):
        assert loss_seg(0.0, 0.0, 0.0, 0.0, LossWeights()) == 0.0

    def test_seg_selector(self):
        w = LossWeights(omega=(0.0, 1.0, 0.0, 0.0))
        assert loss_seg(5.0, 2.5, 7.0, 9.0, w) == 2.5


# ---------------------------------------------------------------------------
# oracle equivalence on random tensors
# ---------------------------------------------------------------------------

class TestOracles:
    def test_stage1_matches_oracle(self):
        rng = np.random.default_rng(0)
        probs = rand_probs(rng, 2, 3, 4, 4)
        idx = rng.integers(0, 3, size=(2, 4, 4))
        onehot = t(np.moveaxis(np.eye(3)[idx], -1, 1))
        assert abs(float(loss_stage1(probs, onehot))
                   - oracle_stage1(probs.numpy(), onehot.numpy())) < 1e-10

    def test_stage1_uniform_probs(self):
        c = 4
        probs = t(np.full((1, c, 3, 3), 1.0 / c))
        idx = np.random.default_rng(1).integers(0, c, size=(1, 3, 3))
        onehot = t(np.moveaxis(np.eye(c)[idx], -1, 1))
        # each pixel contributes log(C)/C to the mean over C*H*W terms
        assert abs(float(loss_stage1(probs, onehot))
                   - oracle_stage1(probs.numpy(), onehot.numpy())) < 1e-12
        assert float(loss_stage1(probs, onehot)) == pytest.approx(
            math.log(c + c * EPS * 4) / c, rel=1e-6)

    def test_cross_matches_oracle(self):
        rng = np.random.default_rng(2)
        m_ps = rand_probs(rng, 2, 4, 3, 3)
        m_sp = rand_probs(rng, 2, 4, 3, 3)
        seen = (1, 3)
        idx = rng.integers(0, 2, size=(2, 3, 3))
        y = t(np.moveaxis(np.eye(2)[idx], -1, 1))
        expected = (oracle_seen_term(m_ps.numpy(), y.numpy(), seen)
                    + oracle_seen_term(m_sp.numpy(), y.numpy(), seen))
        assert abs(float(loss_cross(m_ps, m_sp, y, seen)) - expected) < 1e-10

    def test_seen_matches_oracle(self):
        rng = np.random.default_rng(3)
        m = rand_probs(rng, 2, 3, 4, 4)
        seen = (2,)
        y = t(rng.integers(0, 2, size=(2, 1, 4, 4)).astype(float))
        expected = oracle_seen_term(m.numpy(), y.numpy(), seen)
        assert abs(float(loss_seen(m, y, seen)) - expected) < 1e-10

    def test_bg_matches_oracle(self):
        rng = np.random.default_rng(4)
        y_hat = t(rng.integers(0, 2, size=(2, 1, 3, 3)).astype(float))
        m_bg = t(rng.uniform(0, 1, size=(2, 1, 3, 3)))
        assert abs(float(loss_bg(y_hat, m_bg))
                   - oracle_bg(y_hat.numpy(), m_bg.numpy())) < 1e-12

    def test_discriminator_matches_oracle(self):
        rng = np.random.default_rng(5)
        lam = LossWeights(lam=(3.0, 1.0, 1.0, 1.0))
        d = [t(rng.uniform(0.05, 0.95, size=(2, 1, 2, 2))) for _ in range(4)]
        got = float(loss_discriminator(d[0], d[1], d[2], d[3], lam))
        want = oracle_disc(*[x.numpy() for x in d], lam.lam)
        assert abs(got - want) < 1e-10

    def test_adversarial_matches_oracle(self):
        rng = np.random.default_rng(6)
        d = [t(rng.uniform(0.05, 0.95, size=(2, 1, 2, 2))) for _ in range(3)]
        got = float(loss_adversarial(*d))
        want = oracle_adv(*[x.numpy() for x in d])
        assert abs(got - want) < 1e-10


# ---------------------------------------------------------------------------
# pseudo background
# ---------------------------------------------------------------------------

class TestPseudoBackground:
    def test_background_dominant(self):
        m = t([[[[0.9]], [[0.05]], [[0.05]]]])
        assert float(pseudo_background(m)[0, 0, 0, 0]) == 1.0

    def test_structure_dominant(self):
        m = t([[[[0.1]], [[0.8]], [[0.1]]]])
        assert float(pseudo_background(m)[0, 0, 0, 0]) == 0.0

    def test_tie_goes_to_background(self):
        m = t([[[[0.5]], [[0.5]]]])
        assert float(pseudo_background(m)[0, 0, 0, 0]) == 1.0

    def test_matches_argmax_oracle(self):
        rng = np.random.default_rng(7)
        m = rand_probs(rng, 3, 5, 6, 6)
        got = pseudo_background(m).numpy()[:, 0]
        want = (m.numpy().argmax(axis=1) == 0).astype(float)
        np.testing.assert_array_equal(got, want)


# ---------------------------------------------------------------------------
# gradients vs central finite differences
# ---------------------------------------------------------------------------

class TestGradients:
    def test_stage1_gradient(self):
        rng = np.random.default_rng(10)
        probs = rand_probs(rng, 1, 3, 3, 3)
        idx = rng.integers(0, 3, size=(1, 3, 3))
        onehot = t(np.moveaxis(np.eye(3)[idx], -1, 1))
        check_input_gradient(lambda m: loss_stage1(m, onehot), probs)

    def test_cross_gradient(self):
        rng = np.random.default_rng(11)
        m_ps = rand_probs(rng, 1, 3, 3, 3)
        m_sp = rand_probs(rng, 1, 3, 3, 3)
        y = t(rng.integers(0, 2, size=(1, 2, 3, 3)).astype(float))
        seen = (1, 2)
        check_input_gradient(lambda m: loss_cross(m, m_sp, y, seen), m_ps)
        check_input_gradient(lambda m: loss_cross(m_ps, m, y, seen), m_sp)

    def test_seen_gradient(self):
        rng = np.random.default_rng(12)
        m = rand_probs(rng, 1, 3, 3, 3)
        y = t(rng.integers(0, 2, size=(1, 1, 3, 3)).astype(float))
        check_input_gradient(lambda p: loss_seen(p, y, (2,)), m)

    def test_bg_gradient(self):
        rng = np.random.default_rng(13)
        y_hat = t(rng.integers(0, 2, size=(1, 1, 3, 3)).astype(float))
        m_bg = t(rng.uniform(0.1, 0.9, size=(1, 1, 3, 3)))
        check_input_gradient(lambda m: loss_bg(y_hat, m), m_bg)

    def test_discriminator_gradient(self):
        rng = np.random.default_rng(14)
        lam = LossWeights()
        ds = [t(rng.uniform(0.1, 0.9, size=(1, 1, 3, 3))) for _ in range(4)]
        for k in range(4):
            def fn(x, k=k):
                args = list(ds)
                args[k] = x
                return loss_discriminator(args[0], args[1], args[2], args[3], lam)
            check_input_gradient(fn, ds[k])

    def test_adversarial_gradient(self):
        rng = np.random.default_rng(15)
        ds = [t(rng.uniform(0.1, 0.9, size=(1, 1, 3, 3))) for _ in range(3)]
        for k in range(3):
            def fn(x, k=k):
                args = list(ds)
                args[k] = x
                return loss_adversarial(*args)
            check_input_gradient(fn, ds[k])


# ---------------------------------------------------------------------------
# properties and contracts
# ---------------------------------------------------------------------------

class TestProperties:
    def test_all_losses_nonnegative(self):
        rng = np.random.default_rng(20)
        for _ in range(20):
            probs = rand_probs(rng, 1, 4, 3, 3)
            idx = rng.integers(0, 4, size=(1, 3, 3))
            onehot = t(np.moveaxis(np.eye(4)[idx], -1, 1))
            y_seen = t(rng.integers(0, 2, size=(1, 2, 3, 3)).astype(float))
            scores = [t(rng.uniform(0.05, 0.95, size=(1, 1, 2, 2)))
                      for _ in range(4)]
            w = LossWeights()
            assert float(loss_stage1(probs, onehot)) >= 0
            assert float(loss_seen(probs, y_seen, (1, 3))) >= 0
            assert float(loss_cross(probs, probs, y_seen, (1, 3))) >= 0
            assert float(loss_bg(y_seen[:, :1], probs[:, :1])) >= 0
            assert float(loss_discriminator(*scores, w)) >= 0
            assert float(loss_adversarial(*scores[:3])) >= 0

    def test_perfect_prediction_zeroing(self):
        # probability mass exactly on the true seen channels
        y_seen = t([[[[1.0, 0.0], [0.0, 1.0]]]])
        m = torch.zeros((1, 2, 2, 2), dtype=torch.float64)
        m[0, 1] = y_seen[0, 0]
        m[0, 0] = 1.0 - y_seen[0, 0]
        assert float(loss_seen(m, y_seen, (1,))) < 1e-7
        assert float(loss_cross(m, m, y_seen, (1,))) < 1e-7
        assert float(loss_bg(m[:, :1], m[:, :1])) == 0.0

    def test_seg_linearity_exact(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            comps = rng.uniform(0, 5, size=4)
            w = LossWeights(omega=tuple(rng.uniform(0, 2, size=4)))
            got = loss_seg(*comps, w)
            want = (w.omega[0] * comps[0] + w.omega[1] * comps[1]
                    + w.omega[2] * comps[2] + w.omega[3] * comps[3])
            assert got == want

    def test_bundle_identity_exact(self):
        rng = np.random.default_rng(22)
        for _ in range(50):
            w = LossWeights(omega=tuple(rng.uniform(0, 2, size=4)))
            vals = rng.uniform(0, 3, size=5)
            b = LossBundle.from_components(w, *vals)
            assert b.l_seg == (w.omega[0] * b.l_cross + w.omega[1] * b.l_seen
                               + w.omega[2] * b.l_bg + w.omega[3] * b.l_adv)

    def test_score_domain_validation(self):
        good = t([[[[0.5]]]])
        bad = t([[[[1.0]]]])
        with pytest.raises(ValueError):
            loss_discriminator(bad, good, good, good, LossWeights())
        with pytest.raises(ValueError):
            loss_adversarial(good, good, t([[[[0.0]]]]))

    def test_no_seen_classes_error(self):
        m = t(np.full((1, 2, 2, 2), 0.5))
        y = t(np.zeros((1, 0, 2, 2)))
        with pytest.raises(ValueError):
            loss_seen(m, y, ())

    def test_swap_terms_optional(self):
        d_p = t([[[[0.9]]]])
        d_s = t([[[[0.2]]]])
        w = LossWeights(lam=(3.0, 1.0, 1.0, 1.0))
        expected = -3 * math.log(0.9 + EPS) - math.log(1 - 0.2 + EPS)
        assert abs(float(loss_discriminator(d_p, None, None, d_s, w))
                   - expected) < 1e-12
        assert abs(float(loss_adversarial(None, None, d_s))
                   - (-math.log(0.2 + EPS))) < 1e-12
