import numpy as np
import pytest
from conftest import affine_lattice
from hypothesis import given, settings
from hypothesis import strategies as st

from ffdmotion.config import EnergyConfig, LMSettings
from ffdmotion.deform import DeformationLattice, dense_jacobian_det
from ffdmotion.energy import (
    LOG_FLOOR,
    discrepancy,
    heyde_penalty,
    pair_energy,
    penalty_terms,
    proposed_delta,
    rohlfing_penalty,
    selected_penalty,
    ssd,
    tikhonov,
    topology_penalty,
    total_energy,
    tukey_rho,
    tukey_weight,
)
from ffdmotion.sequence import ImageSequence
from ffdmotion.synth import PhantomConfig, generate_phantom


def scaled(domain, factor, spacing=6.0):
    """Lattice for ``w -> factor * w``, so ``|J| = factor**2``."""
    return affine_lattice(domain, spacing, (factor - 1.0) * np.eye(2))


def test_tukey_values():
    assert tukey_rho(0.0, 7.0) == 0.0
    assert tukey_rho(14.0, 7.0) == pytest.approx(49 / 6)
    assert tukey_rho(7.0, 7.0) == pytest.approx(49 / 6)
    assert tukey_rho(7.0 - 1e-9, 7.0) == pytest.approx(49 / 6)


@settings(max_examples=100, deadline=None)
@given(st.floats(-100, 100), st.floats(0.1, 50))
def test_tukey_properties(x, c):
    assert tukey_rho(x, c) == tukey_rho(-x, c)
    assert 0 <= tukey_rho(x, c) <= c * c / 6 + 1e-12
    assert tukey_rho(abs(x) + 0.5, c) >= tukey_rho(x, c) - 1e-12


def test_tukey_weight_is_rho_prime_over_x(rng):
    x, c = rng.uniform(-10, 10, 50), 6.0
    h = 1e-6
    deriv = (tukey_rho(x + h, c) - tukey_rho(x - h, c)) / (2 * h)
    np.testing.assert_allclose(tukey_weight(x, c) * x, deriv, atol=1e-6)


def test_discrepancy_examples(rng):
    f = rng.uniform(0, 255, (20, 18))
    zero = DeformationLattice.zeros((20, 18), 5.0)
    assert discrepancy(f, f, zero, 20.0) == 0.0
    assert ssd(f, f, zero) == 0.0
    assert ssd(f, f + 2.0, zero) == pytest.approx(4.0)
    noise = [rng.normal(0, 100, (100, 100)) for _ in range(2)]
    big = DeformationLattice.zeros((100, 100), 8.0)
    assert discrepancy(*noise, big, 2.0) == pytest.approx(4 / 6, rel=0.05)


def test_discrepancy_shift_phantom():
    gx, gy = np.meshgrid(np.arange(20.0), np.arange(16.0), indexing="ij")
    f0 = np.sin(gx / 3.0) * 50 + gy
    f1 = np.roll(f0, -1, axis=0)  # f1(w) = f0(w + (1, 0))
    lat = affine_lattice((20, 16), 5.0, np.zeros((2, 2)), (1.0, 0.0))
    r = discrepancy(f0[:-1], f1[:-1], affine_lattice((19, 16), 5.0, np.zeros((2, 2)), (1.0, 0.0)), 20.0)
    assert r < 1e-20
    # the last row samples outside the image, so it is masked rather than compared
    assert discrepancy(f0, f1, lat, 20.0) < 1e-20


def test_ssd_vs_tukey_small_residuals(rng):
    f0 = rng.uniform(0, 255, (30, 30))
    f1 = f0 + rng.normal(0, 0.5, f0.shape)
    zero = DeformationLattice.zeros((30, 30), 8.0)
    # rho(x) = x^2 / 2 - x^4 / (2 c^2) + ..., so ssd / 2 is the leading term
    assert discrepancy(f0, f1, zero, 200.0) == pytest.approx(ssd(f0, f1, zero) / 2, rel=0.01)


def test_dim_mismatch():
    with pytest.raises(ValueError):
        ssd(np.zeros((4, 4)), np.zeros((4, 5)), DeformationLattice.zeros((4, 4), 2.0))
    with pytest.raises(ValueError):
        ssd(np.zeros((4, 5)), np.zeros((4, 5)), DeformationLattice.zeros((4, 4), 2.0))


def test_tikhonov_examples():
    zero = DeformationLattice.zeros((20, 20), 5.0)
    assert tikhonov(zero, 1.0) == 0.0
    const = zero.with_points(np.broadcast_to([2.0, -1.0], zero.control_points.shape))
    assert tikhonov(const, 3.0) == pytest.approx(0.0, abs=1e-20)
    linear = affine_lattice((20, 20), 5.0, [[0.1, 0], [0, 0]])
    assert tikhonov(linear, 1.0) == pytest.approx(0.01, rel=1e-12)
    with pytest.raises(ValueError):
        tikhonov(zero, -1.0)


def test_proposed_delta_values():
    assert proposed_delta(-1.0, 5e-3, 0.1) == pytest.approx(np.e + 5e-3, abs=1e-12)
    assert proposed_delta(3.0, 1e-2, 0.1) == pytest.approx(np.exp(-3) + 0.03, abs=1e-12)
    assert proposed_delta(1.05, 1.0, 0.1) == 0.0
    assert proposed_delta(1.1, 0.0, 0.1) == pytest.approx(np.exp(-1.1))


def test_penalty_examples():
    ident = DeformationLattice.zeros((24, 24), 6.0)
    assert topology_penalty(ident, 5e-3, 0.1) == 0.0
    assert rohlfing_penalty(ident) == 0.0
    assert heyde_penalty(ident) == 0.0
    e_lat = scaled((24, 24), np.sqrt(np.e))
    assert rohlfing_penalty(e_lat) == pytest.approx(1.0, rel=1e-10)
    half = scaled((24, 24), np.sqrt(0.5))
    assert rohlfing_penalty(half) == pytest.approx(np.log(2), rel=1e-10)
    assert heyde_penalty(scaled((24, 24), np.sqrt(3))) == pytest.approx(4.0, rel=1e-10)
    flip = affine_lattice((24, 24), 6.0, [[-2.0, 0], [0, 0]])  # x -> -x, |J| = -1
    assert np.allclose(dense_jacobian_det(flip), -1.0)
    assert heyde_penalty(flip) == pytest.approx(4.0)
    assert rohlfing_penalty(flip) == pytest.approx(-np.log(LOG_FLOOR))
    with pytest.raises(ValueError):
        topology_penalty(ident, -1.0, 0.1)


def test_negative_jacobian_costs_more():
    # |J| = -0.5 and |J| = 0.5 are equally far from 1 in absolute value terms only
    # after taking |J|; the exponential branch dominates for the negative one
    neg = affine_lattice((24, 24), 6.0, [[-1.5, 0], [0, 0]])
    pos = affine_lattice((24, 24), 6.0, [[-0.5, 0], [0, 0]])
    assert topology_penalty(neg, 5e-3, 0.1) > topology_penalty(pos, 5e-3, 0.1)


def test_penalty_band_zero(rng):
    lat = DeformationLattice.zeros((30, 30), 10.0)
    lat = lat.with_points(rng.normal(0, 0.05, lat.control_points.shape))
    j = dense_jacobian_det(lat)
    tau = np.abs(j - 1).max() + 1e-6
    assert tau < 1
    assert topology_penalty(lat, 1.0, tau) == 0.0


def test_translation_invariance(rng):
    lat = DeformationLattice.zeros((20, 20), 5.0)
    lat = lat.with_points(rng.normal(0, 0.5, lat.control_points.shape))
    moved = lat.with_points(lat.control_points + [3.0, -2.0])
    for fn in (heyde_penalty, rohlfing_penalty, lambda l: topology_penalty(l, 5e-3, 0.1),
               lambda l: tikhonov(l, 1.0)):
        assert fn(moved) == pytest.approx(fn(lat), rel=1e-10, abs=1e-14)


def test_pixel_mean_matches_loop(rng):
    lat = DeformationLattice.zeros((12, 10), 4.0)
    lat = lat.with_points(rng.normal(0, 0.8, lat.control_points.shape))
    from ffdmotion.deform import jacobian_det

    loop = 0.0
    for m in range(12):
        for n in range(10):
            loop += (jacobian_det(lat, (m, n)) - 1.0) ** 2
    assert heyde_penalty(lat) == pytest.approx(loop / 120, rel=1e-12)


@pytest.mark.parametrize("kind", ["proposed", "heyde", "rohlfing"])
def test_penalty_terms_derivative(rng, kind):
    cfg = EnergyConfig(penalty_kind=kind, tau=0.1, phi=0.02)
    j = rng.uniform(-1.5, 3.0, 200)
    j = j[np.abs(np.abs(j - 1) - 0.1) > 1e-3]  # stay off the band edge
    j = j[np.abs(j) > 1e-3]
    v, dv, curv = penalty_terms(j, cfg)
    h = 1e-7
    fd = (penalty_terms(j + h, cfg)[0] - penalty_terms(j - h, cfg)[0]) / (2 * h)
    np.testing.assert_allclose(dv, fd, atol=1e-5)
    assert np.all(curv >= 0)


def test_total_energy_examples():
    static = ImageSequence(np.tile(np.arange(30.0).reshape(1, 6, 5), (4, 1, 1)))
    lats = [DeformationLattice.zeros((6, 5), 2.0)] * 3
    assert total_energy(static, lats, EnergyConfig()) == 0.0
    with pytest.raises(ValueError):
        total_energy(static, lats[:2])


def test_total_energy_additive(rng):
    seq, _ = generate_phantom(PhantomConfig(dims=(16, 14, 4), seed=1))
    lats = []
    for _ in range(3):
        lat = DeformationLattice.zeros((16, 14), 4.0)
        lats.append(lat.with_points(rng.normal(0, 0.3, lat.control_points.shape)))
    cfg = EnergyConfig(gamma=0.5)
    pieces = [pair_energy(seq[s], seq[s + 1], lats[s], cfg) for s in range(3)]
    assert total_energy(seq, lats, cfg) == pytest.approx(sum(p["total"] for p in pieces), rel=1e-12)
    none = cfg.with_(penalty_kind="none")
    expected = sum(discrepancy(seq[s], seq[s + 1], lats[s], cfg.tukey_c) + tikhonov(lats[s], 0.5)
                   for s in range(3))
    assert total_energy(seq, lats, none) == pytest.approx(expected, rel=1e-12)
    assert selected_penalty(lats[0], none) == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        EnergyConfig(tukey_c=0)
    with pytest.raises(ValueError):
        EnergyConfig(tau=1.0)
    with pytest.raises(ValueError):
        EnergyConfig(penalty_kind="bogus")
    with pytest.raises(ValueError):
        EnergyConfig(gamma=float("nan"))
    with pytest.raises(ValueError):
        LMSettings(lambda_up=0.5)
    cfg = EnergyConfig.from_flat_dict({"gamma": "2.5", "rank_k": "none", "lm.max_iters": "7"})
    assert cfg.gamma == 2.5 and cfg.rank_k is None and cfg.lm.max_iters == 7
    assert EnergyConfig.from_flat_dict(cfg.as_flat_dict()) == cfg
    with pytest.raises(KeyError):
        EnergyConfig.from_flat_dict({"nope": 1})
