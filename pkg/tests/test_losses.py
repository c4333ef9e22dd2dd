import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from isgan import losses as L

import oracles


@pytest.fixture(autouse=True)
def _float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


def _pairs(img_a, img_p):
    return {"a": img_a, "p": img_p}


# ---------------------------------------------------------------------------
# softmax / identity loss
# ---------------------------------------------------------------------------


def test_softmax_prob_uniform():
    np.testing.assert_allclose(L.softmax_prob(torch.zeros(4), 2).item(), 0.25)
    probs = [L.softmax_prob(torch.zeros(4), c).item() for c in range(4)]
    np.testing.assert_allclose(sum(probs), 1.0, atol=1e-12)


def test_softmax_prob_scalar_example():
    np.testing.assert_allclose(L.softmax_prob(torch.tensor([1.0, 0.0]), 0).item(), 0.7310585786300049, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariance(logits, shift):
    x = torch.tensor(logits)
    np.testing.assert_allclose(L.softmax_prob(x + shift, 0).item(), L.softmax_prob(x, 0).item(), rtol=1e-9)


def test_identity_loss_closed_forms():
    one = torch.zeros(1, 1, 2)
    np.testing.assert_allclose(L.identity_loss(one, [1]).item(), 0.6931471805599453, atol=1e-12)
    uniform = torch.zeros(3, 8, 751)
    np.testing.assert_allclose(L.identity_loss(uniform, [0, 5, 750]).item(), 52.971245214113075, atol=1e-9)


def test_identity_loss_saturates():
    logits = torch.zeros(2, 8, 5)
    logits[0, :, 1] = 50
    logits[1, :, 3] = 50
    assert L.identity_loss(logits, [1, 3]).item() < 1e-8


def test_identity_loss_matches_oracle_with_smoothing():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 8, 6))
    labels = rng.integers(0, 6, size=4)
    expected = np.mean([sum(oracles.cross_entropy(list(logits[b, k]), labels[b], 0.1) for k in range(8))
                        for b in range(4)])
    got = L.identity_loss(torch.tensor(logits), torch.tensor(labels), smoothing=0.1).item()
    np.testing.assert_allclose(got, expected, rtol=1e-12)


def test_identity_loss_rejects_bad_label():
    with pytest.raises(ValueError):
        L.identity_loss(torch.zeros(1, 8, 3), [3])


# ---------------------------------------------------------------------------
# image reconstruction terms
# ---------------------------------------------------------------------------


def test_shuffle_recon_perfect_and_offset():
    a, p = torch.rand(2, 3, 8, 4), torch.rand(2, 3, 8, 4)
    perfect = {(i, j): (a if i == "a" else p) for i, j in L.PAIR_KEYS}
    assert L.shuffle_recon_loss(_pairs(a, p), perfect).item() == 0.0

    gray = torch.full((2, 3, 8, 4), 0.5)
    off = {k: gray + 0.5 for k in L.PAIR_KEYS}
    np.testing.assert_allclose(L.shuffle_recon_loss(_pairs(gray, gray), off).item(), 2.0, atol=1e-12)


def test_part_shuffle_loss_perfect_and_offset():
    gray = torch.full((1, 3, 4, 2), 0.5)
    assert L.part_shuffle_loss(_pairs(gray, gray), {k: gray for k in L.CROSS_KEYS}).item() == 0.0
    np.testing.assert_allclose(
        L.part_shuffle_loss(_pairs(gray, gray), {k: gray - 0.5 for k in L.CROSS_KEYS}).item(), 1.0
    )


# ---------------------------------------------------------------------------
# KL
# ---------------------------------------------------------------------------


def test_kl_closed_forms():
    assert L.kl_unrelated_loss(torch.zeros(2, 8, 4), torch.zeros(2, 8, 4)).item() == 0.0
    np.testing.assert_allclose(L.kl_unrelated_loss(torch.tensor([1.0]), torch.tensor([0.0])).item(), 0.5)
    np.testing.assert_allclose(
        L.kl_unrelated_loss(torch.tensor([0.0]), torch.tensor([1.0])).item(), 0.35914091422952255, atol=1e-12
    )


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-4, 4))
def test_kl_nonnegative_and_matches_oracle(mu, lv):
    got = L.kl_unrelated_loss(torch.tensor([mu]), torch.tensor([lv])).item()
    assert got >= -1e-12
    np.testing.assert_allclose(got, oracles.kl_standard_normal(mu, lv), rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------------------
# moving statistics and decorrelation
# ---------------------------------------------------------------------------


def test_first_batch_initializes_exactly():
    x = torch.randn(16, 8, 4)
    s = L.MovingStats(0.1)
    s.update("R", x)
    torch.testing.assert_close(s.mean["R"], x.mean(0))
    torch.testing.assert_close(s.std["R"], x.std(0, unbiased=True))


def test_constant_stream_hits_floor():
    s = L.MovingStats(0.1)
    for _ in range(300):
        s.update("U", torch.full((8, 2, 3), 2.5))
    torch.testing.assert_close(s.mean["U"], torch.full((2, 3), 2.5))
    torch.testing.assert_close(s.std["U"], torch.full((2, 3), L.STD_FLOOR))


def test_alternating_means_reach_fixed_cycle():
    a, b = 1.0, 3.0
    s = L.MovingStats(0.1)
    batch = lambda v: torch.full((4, 1, 1), v)  # noqa: E731
    s.update("R", batch(a))
    s.update("R", batch(b))
    for _ in range(200):
        s.update("R", batch(a))
        after_a = s.mean["R"].item()
        s.update("R", batch(b))
    after_a_ref, after_b_ref = oracles.ema_cycle(a, b, 0.1)
    np.testing.assert_allclose(after_a, after_a_ref, atol=1e-6)
    np.testing.assert_allclose(s.mean["R"].item(), after_b_ref, atol=1e-6)


def _fitted_stats(phi_R, phi_U):
    s = L.MovingStats(0.1)
    L.update_moving_stats(s, phi_R, phi_U)
    return s


def test_self_and_anti_correlation():
    x = torch.randn(256, 8, 16)
    np.testing.assert_allclose(L.part_correlations(x, x, _fitted_stats(x, x)).numpy(), 1.0, atol=1e-2)
    np.testing.assert_allclose(L.part_correlations(x, -x, _fitted_stats(x, -x)).numpy(), -1.0, atol=1e-2)
    np.testing.assert_allclose(L.decorrelation_loss(x, -x, _fitted_stats(x, -x)).item(), 8.0, atol=0.1)


def test_orthogonal_features_have_zero_correlation():
    r = torch.zeros(2, 1, 2)
    u = torch.zeros(2, 1, 2)
    r[:, 0, 0] = torch.tensor([1.0, -1.0])
    u[:, 0, 1] = torch.tensor([1.0, -1.0])
    s = L.MovingStats()
    s.mean = {"R": torch.zeros(1, 2), "U": torch.zeros(1, 2)}
    s.std = {"R": torch.ones(1, 2), "U": torch.ones(1, 2)}
    assert L.part_correlations(r, u, s).abs().max().item() == 0.0


def test_decorrelation_step_uses_previous_stats():
    s = L.MovingStats(0.1)
    x0, x1 = torch.randn(8, 8, 4), torch.randn(8, 8, 4)
    assert L.decorrelation_step(x0, x0, s).item() == 0.0
    ref = _fitted_stats(x0, x0)
    expected = L.decorrelation_loss(x1, x1, ref)
    got = L.decorrelation_step(x1, x1, s)
    torch.testing.assert_close(got, expected)
    L.update_moving_stats(ref, x1, x1)
    torch.testing.assert_close(s.mean["R"], ref.mean["R"])


def test_stats_do_not_carry_gradient():
    x = torch.randn(8, 8, 4, requires_grad=True)
    s = _fitted_stats(x, x)
    assert not s.mean["R"].requires_grad and not s.std["U"].requires_grad


# ---------------------------------------------------------------------------
# domain and class terms
# ---------------------------------------------------------------------------


def _maps(logit, n, shape=(3, 1, 4, 2)):
    return [torch.full(shape, float(logit)) for _ in range(n)]


def test_domain_loss_at_half():
    obj, gen = L.domain_loss(_maps(0, 2), _maps(0, 4), _maps(0, 2))
    np.testing.assert_allclose(obj.item(), -5.545177444479562, atol=1e-12)
    np.testing.assert_allclose(gen.item(), 6 * math.log(2), atol=1e-12)


def test_domain_loss_limits():
    obj, _ = L.domain_loss(_maps(60, 2), _maps(-60, 4), _maps(-60, 2))
    assert -1e-20 < obj.item() <= 0.0
    _, gen = L.domain_loss(_maps(0, 2), _maps(60, 4), _maps(60, 2))
    assert gen.item() < 1e-20


def test_domain_probability_is_patch_mean():
    m = torch.tensor([[[[2.0, -1.0], [0.5, -3.0]]]])
    p = torch.sigmoid(m).mean().item()
    obj, _ = L.domain_loss([m, m], [m] * 4, [m] * 2)
    np.testing.assert_allclose(obj.item(), oracles.domain_objective([p] * 2, [p] * 6), rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=8, max_size=8))
def test_domain_objective_nonpositive(logits):
    maps = [torch.full((1, 1, 2, 2), v) for v in logits]
    obj, _ = L.domain_loss(maps[:2], maps[2:6], maps[6:])
    assert obj.item() <= 0.0


def test_domain_loss_checks_counts():
    with pytest.raises(ValueError):
        L.domain_loss(_maps(0, 2), _maps(0, 3), _maps(0, 2))


def test_class_loss_closed_forms():
    labels = torch.tensor([0, 4, 9])
    z10 = [torch.zeros(3, 10)] * 8
    np.testing.assert_allclose(L.class_loss(z10[:2], z10[2:6], z10[6:], labels).item(), 18.420680743952367,
                               atol=1e-12)
    z2 = [torch.zeros(3, 2)] * 8
    np.testing.assert_allclose(L.class_loss(z2[:2], z2[2:6], z2[6:], torch.tensor([0, 1, 1])).item(),
                               5.545177444479562, atol=1e-12)
    perfect = [torch.nn.functional.one_hot(labels, 10).double() * 60] * 8
    assert L.class_loss(perfect[:2], perfect[2:6], perfect[6:], labels).item() < 1e-20


# ---------------------------------------------------------------------------
# total objective
# ---------------------------------------------------------------------------


def test_total_loss_default_weights():
    ones = {n: torch.tensor(1.0) for n in L.COMPONENT_NAMES}
    total, breakdown = L.total_loss(ones, L.LossWeights(), 3)
    assert total.item() == 44.0
    assert breakdown == {"R": 20.0, "U": 1.0, "S": 10.0, "PS": 10.0, "D": 1.0, "C": 2.0}


def test_total_loss_zero_weights_and_stage_gating():
    comps = {n: torch.tensor(float(i + 2)) for i, n in enumerate(L.COMPONENT_NAMES)}
    zero = L.LossWeights(0, 0, 0, 0, 0, 0)
    assert L.total_loss(comps, zero, 3)[0].item() == 0.0
    assert L.total_loss(comps, L.LossWeights(), 1)[0].item() == 20.0 * 2
    stage2, parts = L.total_loss(comps, L.LossWeights(), 2)
    assert "R" not in parts
    assert stage2.item() == 1 * 3 + 10 * 4 + 10 * 5 + 1 * 6 + 2 * 7


def test_kl_weight_schedule():
    w = L.LossWeights.defaults("KL")
    assert w.at("U", 2) == 1e-3 and w.at("U", 3) == 1e-2
    assert L.LossWeights.defaults("DC").at("U", 3) == 1.0


def test_weights_reject_negative():
    with pytest.raises(ValueError):
        L.LossWeights(R=-1)
    with pytest.raises(ValueError):
        L.LossWeights(S=float("nan"))


def test_total_loss_rejects_unknown_stage():
    with pytest.raises(ValueError):
        L.total_loss({}, L.LossWeights(), 4)
