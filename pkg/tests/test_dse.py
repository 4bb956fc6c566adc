import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdcl import autograd as ag
from rdcl.autograd import NumericDomainError, ShapeError, Tensor
from rdcl.dse import (
    DSE, DseHyper, DseNoise, GaussianParams, LatentFactors, content_augment, contrastive_mi,
    contrastive_score, decode, dse_forward, dse_loss, dse_plus_forward, dse_plus_loss, encode,
    kl_gaussian, mi_terms, mi_zs_penalty, motion_augment, pair_contrastive_losses, prior_step_params,
)
from rdcl.nn import Adam

T, D = 4, 3


def small_hyper(**kw):
    base = dict(d=D, d_lat=2, hidden=3, T=T)
    base.update(kw)
    return DseHyper(**base)


@pytest.fixture
def model(rng):
    return DSE(small_hyper(), rng)


def latents(s, z):
    s, z = np.asarray(s, float), np.asarray(z, float)
    n, t, k = z.shape
    q_s = GaussianParams(Tensor(s), Tensor(np.zeros_like(s)))
    q_z = [GaussianParams(Tensor(z[:, i]), Tensor(np.zeros((n, k)))) for i in range(t)]
    return LatentFactors(Tensor(s), Tensor(z), q_s, q_z, np.zeros_like(s), np.zeros_like(z))


class TestHyper:
    @pytest.mark.parametrize("kw", [{"tau": 0.0}, {"delta": -0.1}, {"delta": 1.5}, {"gamma": -1.0},
                                    {"theta": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            small_hyper(**kw)


class TestEncodeDecode:
    def test_zero_static_heads_give_standard_posterior(self, model, rng):
        model.s_mu.zero_()
        model.s_logsig.zero_()
        eps = rng.standard_normal((1, 2))
        lat = encode(model, rng.standard_normal((T, D)), eps_s=eps, rng=rng)
        np.testing.assert_array_equal(lat.q_s.mu.data, 0.0)
        np.testing.assert_array_equal(lat.q_s.sigma, 1.0)
        np.testing.assert_array_equal(lat.s.data, eps)

    def test_same_noise_same_latents(self, model, rng):
        x = rng.standard_normal((2, T, D))
        eps_s, eps_z = rng.standard_normal((2, 2)), rng.standard_normal((2, T, 2))
        a = encode(model, x, eps_s=eps_s, eps_z=eps_z)
        b = encode(model, x, eps_s=eps_s, eps_z=eps_z)
        np.testing.assert_array_equal(a.s.data, b.s.data)
        np.testing.assert_array_equal(a.z.data, b.z.data)

    def test_monte_carlo_mean_of_s(self, model, rng):
        x = rng.standard_normal((T, D))
        mean_lat = encode(model, x, sample=False)
        n = 10_000
        lat = encode(model, np.broadcast_to(x, (n, T, D)).copy(), rng=rng)
        mu, sigma = mean_lat.q_s.mu.data[0], mean_lat.q_s.sigma[0]
        assert np.all(np.abs(lat.s.data.mean(axis=0) - mu) <= 3 * sigma / 100)

    def test_posterior_mean_mode(self, model, rng):
        lat = encode(model, rng.standard_normal((T, D)), sample=False)
        np.testing.assert_array_equal(lat.s.data, lat.q_s.mu.data)

    def test_empty_sequence(self, model):
        with pytest.raises(ShapeError):
            encode(model, np.zeros((0, D)))

    def test_wrong_width(self, model):
        with pytest.raises(ShapeError):
            encode(model, np.zeros((T, D + 1)))

    def test_zero_decoder(self, model, rng):
        model.decoder.zero_()
        lat = encode(model, rng.standard_normal((T, D)), rng=rng)
        np.testing.assert_array_equal(decode(model, lat).data, 0.0)

    def test_decoder_is_time_shared(self, model, rng):
        z = rng.standard_normal((1, T, 2))
        z[0, 2] = z[0, 0]
        lat = latents(rng.standard_normal((1, 2)), z)
        out = decode(model, lat).data
        np.testing.assert_array_equal(out[0, 0], out[0, 2])

    def test_decode_gradient(self, model, rng):
        z = Tensor(rng.standard_normal((2, T, 2)))
        s = Tensor(rng.standard_normal((2, 2)))
        w = Tensor(rng.standard_normal((2, T, D)))

        def loss():
            lat = latents(s.data, z.data)
            lat.s, lat.z = s, z
            return (decode(model, lat) * w).sum()

        assert ag.grad_check_params(loss, [s, z] + model.decoder.parameters()) <= 1e-6


class TestPrior:
    def test_zero_prior_is_standard(self, model, rng):
        for mod in (model.prior_rnn, model.p_mu, model.p_logsig):
            mod.zero_()
        for t in range(T):
            q = prior_step_params(model, rng.standard_normal((t, 2)))
            np.testing.assert_array_equal(q.mu.data, 0.0)
            np.testing.assert_array_equal(q.sigma, 1.0)

    def test_pure_function(self, model, rng):
        prefix = rng.standard_normal((3, 2))
        a, b = prior_step_params(model, prefix), prior_step_params(model, prefix.copy())
        np.testing.assert_array_equal(a.mu.data, b.mu.data)
        np.testing.assert_array_equal(a.log_sigma.data, b.log_sigma.data)

    def test_gradient_through_prior(self, model, rng):
        prefix = Tensor(rng.standard_normal((2, 3, 2)))
        target = GaussianParams(Tensor(rng.standard_normal((2, 2))), Tensor(np.zeros((2, 2))))

        def loss():
            return kl_gaussian(target, prior_step_params(model, prefix)).sum()

        params = model.prior_rnn.parameters() + model.p_mu.parameters() + model.p_logsig.parameters()
        assert ag.grad_check_params(loss, params + [prefix]) <= 1e-5


class TestKl:
    def test_identical(self):
        q = GaussianParams(Tensor([0.0]), Tensor([0.0]))
        assert kl_gaussian(q, q).item() == 0.0

    def test_shifted_mean(self):
        q = GaussianParams(Tensor([1.0]), Tensor([0.0]))
        p = GaussianParams(Tensor([0.0]), Tensor([0.0]))
        assert abs(kl_gaussian(q, p).item() - 0.5) <= 1e-12

    def test_nonnegative_on_random_draws(self, rng):
        for _ in range(1000):
            q = GaussianParams(Tensor(rng.normal(0, 2, 3)), Tensor(rng.normal(0, 1, 3)))
            p = GaussianParams(Tensor(rng.normal(0, 2, 3)), Tensor(rng.normal(0, 1, 3)))
            assert kl_gaussian(q, p).item() >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            kl_gaussian(GaussianParams.standard((2,)), GaussianParams.standard((3,)))


class TestContrastive:
    def test_score_cases(self):
        v = np.array([1.0, 2.0, -1.0])
        assert contrastive_score(v, v, 0.5).item() == pytest.approx(math.exp(2.0), abs=1e-12)
        assert contrastive_score([1.0, 0.0], [0.0, 3.0], 0.5).item() == pytest.approx(1.0, abs=1e-15)
        assert contrastive_score(v, -2 * v, 0.5).item() == pytest.approx(math.exp(-2.0), abs=1e-12)

    def test_score_zero_norm(self):
        with pytest.raises(NumericDomainError):
            contrastive_score([0.0, 0.0], [1.0, 0.0], 0.5)

    def test_mi_one_orthogonal_negative(self):
        val = contrastive_mi([1.0, 0.0], [1.0, 0.0], [[0.0, 1.0]], 0.5).item()
        assert abs(val - math.log(math.e ** 2 / (math.e ** 2 + 1))) <= 1e-12

    def test_mi_n_negatives_monotone(self):
        prev = 0.0
        for n in range(1, 8):
            val = contrastive_mi([1.0, 0.0], [1.0, 0.0], [[0.0, 1.0]] * n, 0.5).item()
            assert val == pytest.approx(math.log(math.e ** 2 / (math.e ** 2 + n)), abs=1e-12)
            assert val < prev
            prev = val

    def test_mi_needs_negative(self):
        with pytest.raises(ValueError):
            contrastive_mi([1.0], [1.0], [], 0.5)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_mi_strictly_negative_and_monotone_in_positive(self, seed):
        r = np.random.default_rng(seed)
        a = r.standard_normal(4)
        negs = list(r.standard_normal((3, 4)))
        other = r.standard_normal(4)
        base = contrastive_mi(a, other, negs, 0.5).item()
        closer = contrastive_mi(a, 0.5 * other + 2.0 * a, negs, 0.5).item()
        assert base < 0 and closer < 0
        cos_o = other @ a / np.linalg.norm(other) / np.linalg.norm(a)
        c2 = 0.5 * other + 2.0 * a
        cos_c = c2 @ a / np.linalg.norm(c2) / np.linalg.norm(a)
        if cos_c > cos_o:
            assert closer > base


class TestAugment:
    def test_content_preserves_multiset(self, rng):
        x = rng.standard_normal((6, 3))
        out = content_augment(x, rng)
        assert sorted(map(bytes, x)) == sorted(map(bytes, out))

    def test_content_T2_is_fair(self, rng):
        x = np.array([[1.0], [2.0]])
        swaps = sum(content_augment(x, rng)[0, 0] == 2.0 for _ in range(10_000))
        assert abs(swaps - 5000) <= 3 * math.sqrt(2500)

    def test_content_identical_frames(self, rng):
        x = np.ones((5, 2))
        np.testing.assert_array_equal(content_augment(x, rng), x)

    def test_content_needs_two_frames(self, rng):
        with pytest.raises(ValueError):
            content_augment(np.ones((1, 2)), rng)

    def test_content_batched_per_sequence(self, rng):
        x = np.arange(40.0).reshape(5, 4, 2)
        out = content_augment(x, rng)
        for a, b in zip(x, out):
            assert sorted(map(bytes, a)) == sorted(map(bytes, b))

    def test_motion_zero_noise(self, rng):
        x = rng.standard_normal((4, 3))
        np.testing.assert_array_equal(motion_augment(x, rng, 0.0), x)

    def test_motion_noise_std(self, rng):
        x = np.zeros((10_000, 2))
        diff = motion_augment(x, rng, 0.3) - x
        assert np.all(np.abs(diff.std(axis=0) - 0.3) <= 0.05 * 0.3)

    def test_motion_keeps_order(self, rng):
        x = np.arange(8.0).reshape(8, 1) * 100
        out = motion_augment(x, rng, 0.1)
        assert np.all(np.diff(out[:, 0]) > 0)


def _hand_infonce(A, B, tau):
    """Row-anchored and column-anchored averages of the log-ratio, by explicit loops."""
    n = len(A)
    cos = lambda u, v: float(u @ v / np.linalg.norm(u) / np.linalg.norm(v))
    ca = cb = 0.0
    for i in range(n):
        num = math.exp(cos(A[i], B[i]) / tau)
        ca += math.log(num / sum(math.exp(cos(A[i], B[j]) / tau) for j in range(n)))
        cb += math.log(num / sum(math.exp(cos(A[j], B[i]) / tau) for j in range(n)))
    return ca / n, cb / n


class TestMiTerms:
    def test_batch_of_two_by_hand(self):
        s = np.array([[1.0, 0.0], [0.0, 1.0]])
        s_c = np.array([[1.0, 0.2], [0.3, 1.0]])
        z = np.array([[[1.0, 0.0], [0.5, 0.5]], [[0.0, 1.0], [1.0, -1.0]]])
        z_m = z + np.array([[[0.1, 0.0], [0.0, 0.1]], [[0.0, -0.1], [0.2, 0.0]]])
        lat, lat_m, lat_c = latents(s, z), latents(s, z_m), latents(s_c, z)
        i_z, i_s = mi_terms(lat, lat_m, lat_c, 0.5)
        hz = _hand_infonce(z.reshape(2, -1), z_m.reshape(2, -1), 0.5)
        hs = _hand_infonce(s, s_c, 0.5)
        assert i_z.item() == pytest.approx(0.5 * sum(hz), abs=1e-12)
        assert i_s.item() == pytest.approx(0.5 * sum(hs), abs=1e-12)
        assert i_z.item() <= 0 and i_s.item() <= 0

    def test_batch_order_invariant(self, rng):
        s, z = rng.standard_normal((5, 2)), rng.standard_normal((5, 3, 2))
        s2, z2 = rng.standard_normal((5, 2)), rng.standard_normal((5, 3, 2))
        perm = rng.permutation(5)
        a = mi_terms(latents(s, z), latents(s2, z2), latents(s2, z2), 0.5)
        b = mi_terms(latents(s[perm], z[perm]), latents(s2[perm], z2[perm]), latents(s2[perm], z2[perm]), 0.5)
        for u, v in zip(a, b):
            assert u.item() == pytest.approx(v.item(), abs=1e-12)

    def test_needs_two(self, rng):
        lat = latents(rng.standard_normal((1, 2)), rng.standard_normal((1, 3, 2)))
        with pytest.raises(ValueError):
            mi_terms(lat, lat, lat, 0.5)


def _mixture_inputs(s, z, log_sigma):
    s, z = np.asarray(s, float), np.asarray(z, float)
    q_s = GaussianParams(Tensor(s), Tensor(np.full_like(s, log_sigma)))
    q_z = [GaussianParams(Tensor(z[:, t]), Tensor(np.full_like(z[:, t], log_sigma)))
           for t in range(z.shape[1])]
    return Tensor(s), Tensor(z), q_s, q_z


class TestMiZs:
    def test_paired_delta_posteriors_give_ln2(self):
        s = [[0.0, 0.0], [5.0, 5.0]]
        z = [[[0.0, 0.0]], [[5.0, -5.0]]]
        val = mi_zs_penalty(*_mixture_inputs(s, z, math.log(1e-3))).item()
        assert val == pytest.approx(math.log(2.0), abs=1e-9)

    def test_identical_posteriors_give_zero(self, rng):
        s = np.tile(rng.standard_normal(2), (4, 1))
        z = np.tile(rng.standard_normal((3, 2)), (4, 1, 1))
        val = mi_zs_penalty(*_mixture_inputs(s, z, 0.0)).item()
        assert abs(val) <= 1e-12

    def test_shuffled_pairing_does_not_increase(self, rng):
        n = 8
        s = rng.standard_normal((n, 2))
        z = np.repeat(s[:, None, :] * 2.0, 3, axis=1) + 0.1 * rng.standard_normal((n, 3, 2))
        s_t, z_t, q_s, q_z = _mixture_inputs(s, z, math.log(0.3))
        paired = mi_zs_penalty(s_t, z_t, q_s, q_z).item()
        shuffled = []
        for _ in range(200):
            p = rng.permutation(n)
            shuffled.append(mi_zs_penalty(*_mixture_inputs(s, z[p], math.log(0.3))).item())
        assert np.mean(shuffled) <= paired

    def test_needs_two(self):
        with pytest.raises(ValueError):
            mi_zs_penalty(*_mixture_inputs([[0.0]], [[[0.0]]], 0.0))


class TestDseLoss:
    def test_pure_reconstruction_when_unregularized(self, rng):
        hyper = small_hyper(gamma=0.0, theta=0.0)
        m = DSE(hyper, rng)
        x = rng.standard_normal((3, T, D))
        noise = DseNoise.draw(rng, 3, T, D, hyper)
        out = dse_forward(m, x, hyper, noise)
        xhat = out.recon.data
        assert out.loss.item() == pytest.approx(0.5 * ((x - xhat) ** 2).sum() / 3, abs=1e-12)

    def test_components_compose_total(self, model, rng):
        hyper = model.hyper
        x = rng.standard_normal((3, T, D))
        out = dse_forward(model, x, hyper, DseNoise.draw(rng, 3, T, D, hyper))
        c = {k: v.item() for k, v in out.components.items()}
        total = (c["recon"] + hyper.gamma * (c["kl_s"] + c["kl_z"]) - hyper.gamma * (c["mi_z"] + c["mi_s"])
                 + hyper.theta * c["mi_zs"])
        assert out.loss.item() == pytest.approx(total, abs=1e-9)
        assert c["kl_s"] >= 0 and c["kl_z"] >= 0

    def test_kl_nonnegative_random_params(self):
        for seed in range(20):
            r = np.random.default_rng(seed)
            hyper = small_hyper()
            m = DSE(hyper, r)
            for p in m.parameters():
                p.data[...] = r.normal(0, 1.0, p.shape)
            _, comps = dse_loss(m, r.standard_normal((2, T, D)), hyper, r)
            assert comps["kl_s"].item() >= 0 and comps["kl_z"].item() >= 0

    def test_full_gradient_check(self, model, rng):
        x = rng.standard_normal((2, T, D))
        noise = DseNoise.draw(rng, 2, T, D, model.hyper)
        err = ag.grad_check_params(lambda: dse_forward(model, x, model.hyper, noise).loss,
                                   model.parameters())
        assert err <= 1e-4

    def test_batch_permutation_invariance(self, model, rng):
        x = rng.standard_normal((4, T, D))
        noise = DseNoise.draw(rng, 4, T, D, model.hyper)
        p = np.array([2, 0, 3, 1])
        a = dse_forward(model, x, model.hyper, noise).loss.item()
        b = dse_forward(model, x[p], model.hyper, noise.take(p)).loss.item()
        assert a == pytest.approx(b, abs=1e-10)


class TestPairContrastive:
    def test_identical_static(self):
        ls, lz = pair_contrastive_losses([1.0, 2.0], [1.0, 2.0], [1.0, 0.0], [0.0, 1.0], 0.2)
        assert ls.item() == pytest.approx(0.8, abs=1e-15)
        assert lz.item() == 0.0

    def test_range_on_random_draws(self, rng):
        for _ in range(1000):
            delta = rng.uniform(0, 1)
            a, b = rng.standard_normal((2, 3))
            ls, _ = pair_contrastive_losses(a, b, a, b, delta)
            assert 0.0 <= ls.item() <= 1.0 - delta + 1e-12

    def test_zero_norm(self):
        with pytest.raises(NumericDomainError):
            pair_contrastive_losses([0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0], 0.2)


class TestDsePlus:
    def test_inactive_hinge_equals_dse(self, rng):
        hyper = small_hyper(delta=1.0)
        m = DSE(hyper, rng)
        x1, x2 = rng.standard_normal((2, 3, T, D))
        noise = DseNoise.draw(rng, 6, T, D, hyper)
        plus = dse_plus_forward(m, x1, x2, hyper, noise)
        plain = dse_forward(m, np.concatenate([x1, x2]), hyper, noise)
        assert plus.components["contra_s"].item() == 0.0
        assert plus.loss.item() == plain.loss.item()

    def test_disabled_contrastive(self, model, rng):
        x1, x2 = rng.standard_normal((2, 2, T, D))
        noise = DseNoise.draw(rng, 4, T, D, model.hyper)
        out = dse_plus_forward(model, x1, x2, model.hyper, noise, contrastive=False)
        assert "contra_s" not in out.components

    def test_decreases_on_fixed_batch(self, rng):
        hyper = small_hyper()
        m = DSE(hyper, rng)
        x1, x2 = rng.standard_normal((2, 4, T, D))
        noise = DseNoise.draw(rng, 8, T, D, hyper)
        opt = Adam(m.parameters(), lr=1e-2)
        first = None
        for _ in range(200):
            opt.zero_grad()
            loss = dse_plus_forward(m, x1, x2, hyper, noise).loss
            first = loss.item() if first is None else first
            loss.backward()
            opt.step()
        assert loss.item() < first

    def test_gradient_check(self, model, rng):
        x1, x2 = rng.standard_normal((2, 2, T, D))
        noise = DseNoise.draw(rng, 4, T, D, model.hyper)
        err = ag.grad_check_params(lambda: dse_plus_forward(model, x1, x2, model.hyper, noise).loss,
                                   model.parameters())
        assert err <= 1e-4

    def test_rng_wrapper(self, model, rng):
        x1, x2 = rng.standard_normal((2, 2, T, D))
        a = dse_plus_loss(model, x1, x2, model.hyper, np.random.default_rng(5)).item()
        b = dse_plus_loss(model, x1, x2, model.hyper, np.random.default_rng(5)).item()
        assert a == b
