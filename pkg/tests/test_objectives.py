import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import softmax_reference
from ssl_lab import objectives as O
from ssl_lab import tensor as T
from ssl_lab.tensor import Tensor

NAMES = [f"distinct_{i}" for i in range(9)] + [f"cardiac_{i}" for i in range(4)] + ["background"]


def ctx(step, total=100, c=14):
    return O.StepContext(step, total, c)


# --------------------------------------------------------------------------
# TSA schedule
# --------------------------------------------------------------------------
def test_linear_start_and_end():
    assert O.tsa_threshold(ctx(0), "linear") == pytest.approx(1 / 14)
    assert O.tsa_threshold(ctx(100), "linear") == 1.0


@pytest.mark.parametrize("schedule", ["linear", "log", "exp"])
def test_endpoints_are_exact(schedule):
    assert O.tsa_threshold(ctx(0), schedule) == pytest.approx(1 / 14, abs=1e-15)
    assert O.tsa_threshold(ctx(100), schedule) == 1.0


def test_log_midpoint_against_closed_form():
    c = 10
    value = O.tsa_threshold(O.StepContext(50, 100, c), "log")
    # independent evaluation of the rescaled closed form
    alpha = (1 - math.exp(-2.5)) / (1 - math.exp(-5))
    assert value == pytest.approx(alpha * (1 - 1 / c) + 1 / c, rel=1e-12)
    assert O.tsa_threshold(O.StepContext(49, 100, c), "log") <= value <= O.tsa_threshold(O.StepContext(51, 100, c), "log")


def test_exp_midpoint_against_closed_form():
    c = 10
    alpha = (math.exp(-2.5) - math.exp(-5)) / (1 - math.exp(-5))
    assert O.tsa_threshold(O.StepContext(50, 100, c), "exp") == pytest.approx(alpha * (1 - 1 / c) + 1 / c, rel=1e-12)


@pytest.mark.parametrize("schedule", ["linear", "log", "exp"])
def test_schedules_are_monotone(schedule):
    values = [O.tsa_threshold(ctx(t), schedule) for t in range(101)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_log_over_linear_over_exp_on_interior():
    for t in range(1, 100):
        lo, li, ex = (O.tsa_threshold(ctx(t), s) for s in ("log", "linear", "exp"))
        assert lo > li > ex


def test_step_outside_range_rejected():
    with pytest.raises(ValueError):
        O.StepContext(101, 100, 14)
    with pytest.raises(ValueError):
        O.StepContext(-1, 100, 14)


def test_disabled_schedule_keeps_everything():
    assert O.tsa_threshold(ctx(0), "disabled") == 1.0


# --------------------------------------------------------------------------
# TSA mask
# --------------------------------------------------------------------------
def test_tsa_boundary_keeps_uniform_rows():
    c = 14
    probs = np.full((5, c), 1 / c)
    assert O.tsa_mask(probs, np.arange(5), O.tsa_threshold(ctx(0), "linear")).all()


def test_tsa_drops_confident_rows():
    probs = np.array([[0.99, 0.01], [0.3, 0.7]])
    np.testing.assert_array_equal(O.tsa_mask(probs, [0, 1], 0.5), [False, False])
    np.testing.assert_array_equal(O.tsa_mask(probs, [1, 0], 0.5), [True, True])


def test_tsa_literal_flag_inverts():
    probs = np.array([[0.99, 0.01], [0.3, 0.7]])
    np.testing.assert_array_equal(O.tsa_mask(probs, [0, 0], 0.5, literal=True), [True, False])


def test_masked_loss_equals_subset_loss():
    rng = np.random.default_rng(0)
    for _ in range(20):
        probs = softmax_reference(rng.standard_normal((16, 6)) * 2)
        labels = rng.integers(0, 6, 16)
        keep = O.tsa_mask(probs, labels, 0.4)
        masked = T.cross_entropy(Tensor(probs), labels, mask=keep).item()
        if keep.any():
            subset = -np.log(probs[keep, labels[keep]]).mean()
            assert masked == pytest.approx(subset, rel=1e-12)
        else:
            assert masked == 0.0


# --------------------------------------------------------------------------
# CBM
# --------------------------------------------------------------------------
def test_thresholds_resolve_patterns_indices_and_names():
    cfg = O.SslConfig(eta_cbm_per_class={"cardiac_*": 0.25, "0": 0.5, "background": 0.9})
    th = cfg.thresholds(NAMES)
    assert th[0] == 0.5
    assert th[1] == 0.75
    np.testing.assert_array_equal(th[9:13], 0.25)
    assert th[13] == 0.9


def test_threshold_key_matching_nothing_is_an_error():
    with pytest.raises(ValueError, match="matches no class"):
        O.SslConfig(eta_cbm_per_class={"lung_*": 0.2}).thresholds(NAMES)


def test_cbm_default_threshold_includes_confident_row():
    p = np.array([[0.8, 0.1, 0.1]])
    assert O.cbm_mask(p, O.SslConfig()).all()


def test_cbm_cardiac_override():
    p = np.full((1, 14), 0.7 / 13)
    p[0, 10] = 0.30
    override = O.SslConfig(eta_cbm_per_class={"cardiac_*": 0.25})
    uniform = O.SslConfig()
    assert O.cbm_mask(p, override, override.thresholds(NAMES)).all()
    assert not O.cbm_mask(p, uniform, uniform.thresholds(NAMES)).any()


def test_cbm_disabled_threshold_masks_everything_and_zeroes_the_loss():
    cfg = O.SslConfig(eta_cbm_default=O.DISABLED_THRESHOLD)
    rng = np.random.default_rng(1)
    z = rng.standard_normal((8, 5)) * 10
    assert not O.cbm_mask(softmax_reference(z), cfg).any()
    za = Tensor(rng.standard_normal((8, 5)), requires_grad=True)
    loss = O.consistency_loss(Tensor(z), za, cfg)
    assert loss.item() == 0.0
    loss.backward()
    np.testing.assert_array_equal(za.grad, 0)


@given(arrays(np.float64, (6, 5), elements=st.floats(-5, 5)), st.integers(0, 2**16))
def test_cbm_ignores_non_argmax_mass(z, seed):
    p = softmax_reference(z)
    cfg = O.SslConfig(eta_cbm_default=0.4)
    base = O.cbm_mask(p, cfg)
    rng = np.random.default_rng(seed)
    q = p.copy()
    for i, row in enumerate(q):
        top = row.argmax()
        others = np.delete(np.arange(5), top)
        rest = rng.dirichlet(np.ones(4)) * (1 - row[top])
        # cap so the argmax is preserved
        if rest.max() < row[top]:
            q[i, others] = rest
    np.testing.assert_array_equal(O.cbm_mask(q, cfg), base)


# --------------------------------------------------------------------------
# consistency, entropy, total loss
# --------------------------------------------------------------------------
def test_consistency_zero_for_identical_logits_at_unit_temperature():
    z = np.random.default_rng(2).standard_normal((5, 4)) * 3
    cfg = O.SslConfig(temperature=1.0, eta_cbm_default=0.0)
    assert abs(O.consistency_loss(Tensor(z), Tensor(z.copy()), cfg).item()) < 1e-12


@given(arrays(np.float64, (1, 6), elements=st.floats(-5, 5)))
def test_sharpening_lowers_entropy(z):
    if np.ptp(z) < 1e-3:
        return
    sharp = T.entropy(T.softmax(Tensor(z), temperature=0.8)).item()
    plain = T.entropy(T.softmax(Tensor(z))).item()
    assert sharp < plain


def test_consistency_gradient_reaches_only_the_augmented_branch():
    rng = np.random.default_rng(3)
    zo = Tensor(rng.standard_normal((4, 3)) * 4, requires_grad=True)
    za = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    O.consistency_loss(zo, za, O.SslConfig(eta_cbm_default=0.0)).backward()
    assert zo.grad is None
    assert np.abs(za.grad).sum() > 0


def test_consistency_uses_sharpened_target():
    rng = np.random.default_rng(4)
    zo, za = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    cfg = O.SslConfig(eta_cbm_default=0.0, temperature=0.8)
    p, q = softmax_reference(zo, 0.8), softmax_reference(za)
    expected = (p * (np.log(p) - np.log(q))).sum(axis=1).mean()
    assert O.consistency_loss(Tensor(zo), Tensor(za), cfg).item() == pytest.approx(expected, rel=1e-10)


def test_total_loss_arithmetic():
    sup, cons, ent = Tensor(np.array(1.0)), Tensor(np.array(0.4)), Tensor(np.array(2.0))
    assert O.total_loss(sup, cons, ent, O.SslConfig(lambda_=0.5, entropy_weight=0.0)).item() == pytest.approx(1.2)
    assert O.total_loss(sup, cons, ent, O.SslConfig(lambda_=0.0, entropy_weight=0.1)).item() == pytest.approx(1.2)
    assert O.total_loss(sup, cons, ent, None).item() == 1.0


def test_total_loss_gradient_is_sum_of_component_gradients():
    rng = np.random.default_rng(5)
    zl, zu = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    zo = rng.standard_normal((6, 4)) * 3
    labels = rng.integers(0, 4, 6)
    cfg = O.SslConfig(lambda_=0.5, entropy_weight=0.1, eta_cbm_default=0.3)

    def grads(parts):
        a, b = Tensor(zl.copy(), requires_grad=True), Tensor(zu.copy(), requires_grad=True)
        sup = T.cross_entropy(T.softmax(a), labels)
        cons = O.consistency_loss(Tensor(zo), b, cfg)
        ent = T.entropy(T.softmax(b))
        terms = {"sup": sup, "cons": T.mul(cons, cfg.lambda_), "ent": T.mul(ent, cfg.entropy_weight)}
        if parts == "all":
            loss = O.total_loss(sup, cons, ent, cfg)
        else:
            loss = T.add(terms[parts], T.mul(T.add(T.tsum(a), T.tsum(b)), 0.0))
        loss.backward()
        return a.grad, b.grad

    total = grads("all")
    pieces = [grads(k) for k in ("sup", "cons", "ent")]
    np.testing.assert_allclose(total[0], sum(p[0] for p in pieces), atol=1e-12)
    np.testing.assert_allclose(total[1], sum(p[1] for p in pieces), atol=1e-12)


@pytest.mark.parametrize("kwargs", [
    {"lambda_": 1.5}, {"temperature": 0.0}, {"tsa_schedule": "cosine"}, {"entropy_weight": -1},
    {"eta_cbm_per_class": {"cardiac_*": -0.1}},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        O.SslConfig(**kwargs)


def test_config_json_round_trip():
    cfg = O.SslConfig(lambda_=0.3, eta_cbm_per_class={"cardiac_*": 0.25})
    d = cfg.to_dict()
    assert d["lambda"] == 0.3
    assert O.SslConfig.from_dict(d) == cfg


def test_consistency_positive_for_identical_logits_when_sharpened():
    z = np.random.default_rng(5).standard_normal((5, 4)) * 2
    cfg = O.SslConfig(temperature=0.8, eta_cbm_default=0.0)
    assert O.consistency_loss(Tensor(z), Tensor(z.copy()), cfg).item() > 1e-4
