import numpy as np
import pytest
from conftest import affine_lattice

from ffdmotion.analysis import rmse
from ffdmotion.config import EnergyConfig, LMSettings
from ffdmotion.deform import DeformationLattice, DisplacementField, sample_field
from ffdmotion.energy import pair_energy
from ffdmotion.sequence import ImageSequence
from ffdmotion.solver import (
    LOG_HEADER,
    PairProblem,
    accumulate_displacement,
    register_pair,
    register_sequence,
    write_convergence_log,
)
from ffdmotion.synth import PhantomConfig, generate_phantom

PHANTOM = EnergyConfig(tukey_c=200.0, gamma=1e4, spacing=16.0, interpolation="cubic",
                       lm=LMSettings(energy_tol=1e-9))


def small_problem(kind, rng, data_term="tukey"):
    img = rng.uniform(0, 100, (8, 8))
    f1 = img + rng.normal(0, 5, img.shape)
    lat = DeformationLattice.zeros((8, 8), 3.5)  # 2x2 interior knots
    cfg = EnergyConfig(tukey_c=30.0, gamma=0.5, penalty_kind=kind, tau=0.05, data_term=data_term)
    return PairProblem(img, f1, lat, cfg), rng.normal(0, 0.4, lat.n_params)


@pytest.mark.parametrize("kind", ["none", "proposed", "heyde"])
@pytest.mark.parametrize("data_term", ["tukey", "ssd"])
def test_residual_jacobian_fd(rng, kind, data_term):
    prob, theta = small_problem(kind, rng, data_term)
    frozen = prob.frozen_at(theta)
    jac = prob.residual_jacobian(theta, frozen)
    h = 1e-5
    fd = np.empty_like(jac)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fd[:, i] = (prob.residuals(theta + e, frozen) - prob.residuals(theta - e, frozen)) / (2 * h)
    assert np.abs(jac - fd).max() <= 1e-4 * np.abs(fd).max()


@pytest.mark.parametrize("kind", ["none", "proposed", "heyde", "rohlfing"])
def test_gradient_fd(rng, kind):
    prob, theta = small_problem(kind, rng)
    g, _ = prob.linearize(prob.state(theta))
    h = 1e-6
    fd = np.array([(prob.energy(theta + h * e) - prob.energy(theta - h * e)) / (2 * h)
                   for e in np.eye(theta.size)])
    assert np.abs(g - fd).max() <= 1e-5 * np.abs(fd).max()


def test_residuals_model_energy(rng):
    # with weights frozen at theta, half the squared residual norm is the SSD energy
    prob, theta = small_problem("heyde", rng, "ssd")
    r = prob.residuals(theta, prob.frozen_at(theta))
    assert 0.5 * r @ r == pytest.approx(prob.energy(theta), rel=1e-12)


def test_identical_frames_keep_zero_lattice(rng):
    f = rng.uniform(0, 255, (24, 24))
    res = register_pair(f, f, cfg=EnergyConfig(spacing=8.0))
    assert res.iterations <= 2
    np.testing.assert_array_equal(res.lattice.control_points, 0.0)
    assert res.converged and res.final_energy == 0.0


def test_pair_on_phantom():
    pc = PhantomConfig(dims=(48, 48, 3), motion="translation", amplitude=1.5, seed=2)
    seq, truth = generate_phantom(pc)
    res = register_pair(seq[0], seq[1], cfg=PHANTOM)
    assert max(rmse([res.field], [truth[0]])) < 0.5
    assert 0.9 <= res.jdet_range[0] and res.jdet_range[1] <= 1.1
    hist = np.array(res.energy_history)
    assert np.all(np.diff(hist) < 0)
    assert res.final_energy == pytest.approx(pair_energy(seq[0], seq[1], res.lattice, PHANTOM)["total"])
    assert res.iterations <= PHANTOM.lm.max_iters


def test_warm_start_consistency():
    pc = PhantomConfig(dims=(40, 40, 2), motion="periodic-contraction", amplitude=2.0, seed=4)
    seq, _ = generate_phantom(pc)
    cfg = EnergyConfig(tukey_c=200.0, gamma=1e3, spacing=10.0, interpolation="cubic")
    first = register_pair(seq[0], seq[1], cfg=cfg)
    second = register_pair(seq[0], seq[1], init=first.lattice, cfg=cfg)
    assert second.iterations <= 2
    assert abs(second.final_energy - first.final_energy) <= cfg.lm.energy_tol * max(1, first.final_energy)


def test_max_iters_flags_not_converged():
    pc = PhantomConfig(dims=(32, 32, 2), motion="translation", amplitude=1.0, seed=5)
    seq, _ = generate_phantom(pc)
    res = register_pair(seq[0], seq[1], cfg=PHANTOM.with_(lm=LMSettings(max_iters=1)))
    assert res.iterations == 1 and not res.converged and res.status == "not converged"


def test_non_finite_start():
    lat = DeformationLattice.zeros((8, 8), 4.0)
    with pytest.raises(ValueError):
        register_pair(np.full((8, 8), np.inf), np.zeros((8, 8)), lat)


def test_static_sequence():
    seq = ImageSequence(np.tile(np.random.default_rng(0).uniform(0, 9, (1, 16, 16)), (5, 1, 1)))
    results = register_sequence(seq, EnergyConfig(spacing=8.0))
    assert len(results) == 4
    assert all(not np.any(r.lattice.control_points) for r in results)


def test_sequence_matches_independent_pairs():
    pc = PhantomConfig(dims=(32, 32, 3), motion="periodic-contraction", amplitude=2.0, seed=8)
    seq, _ = generate_phantom(pc)
    cfg = PHANTOM.with_(spacing=10.0, gamma=1e3)
    results = register_sequence(seq, cfg)
    first = register_pair(seq[0], seq[1], cfg=cfg)
    second = register_pair(seq[1], seq[2], init=first.lattice, cfg=cfg, pair_index=1)
    assert [r.final_energy for r in results] == [first.final_energy, second.final_energy]
    again = register_sequence(seq, cfg)
    assert all(np.array_equal(a.lattice.control_points, b.lattice.control_points)
               for a, b in zip(results, again))


def test_failed_pair_does_not_abort():
    frames = np.random.default_rng(1).uniform(0, 50, (3, 16, 16))
    seq = ImageSequence(frames)
    bad = DeformationLattice.zeros((16, 8), 8.0)  # wrong domain makes pair 0 raise
    results = register_sequence(seq, EnergyConfig(spacing=8.0), init=bad)
    assert results[0].status == "failed" and results[0].message
    assert results[1].status != "failed"


def test_low_rank_option_denoises_first():
    pc = PhantomConfig(dims=(24, 24, 6), motion="periodic-contraction", amplitude=1.0,
                       noise_sigma=0.2, seed=3)
    seq, _ = generate_phantom(pc)
    cfg = PHANTOM.with_(spacing=12.0, rank_k=2)
    res = register_sequence(seq, cfg)
    assert len(res) == 5 and all(r.status != "failed" for r in res)


def test_accumulate_examples(rng):
    lat = DeformationLattice.zeros((12, 10), 4.0)
    lat = lat.with_points(rng.normal(0, 0.5, lat.control_points.shape))
    np.testing.assert_array_equal(accumulate_displacement([lat])[0].u, sample_field(lat).u)
    shift = affine_lattice((12, 10), 4.0, np.zeros((2, 2)), (1.0, 0.0))
    acc = accumulate_displacement([shift, shift])
    np.testing.assert_allclose(acc[1].u, np.broadcast_to([2.0, 0.0], (12, 10, 2)), atol=1e-10)
    zero = DeformationLattice.zeros((12, 10), 4.0)
    np.testing.assert_allclose(accumulate_displacement([lat, zero])[1].u, sample_field(lat).u)
    with pytest.raises(ValueError):
        accumulate_displacement([lat, DisplacementField.zeros((5, 5))])
    with pytest.raises(ValueError):
        accumulate_displacement([])


def test_accumulate_composes_pullbacks():
    # f1(w) = f0(w + u0(w)), f2(w) = f1(w + u1(w)) = f0(w + u1 + u0(w + u1))
    gx, gy = np.meshgrid(np.arange(20.0), np.arange(20.0), indexing="ij")
    u0 = np.stack([0.05 * gx, np.zeros_like(gx)], -1)
    u1 = np.stack([np.ones_like(gx), np.zeros_like(gx)], -1)
    acc = accumulate_displacement([DisplacementField(u0), DisplacementField(u1)])
    expect = 1.0 + 0.05 * (gx + 1.0)
    np.testing.assert_allclose(acc[1].u[:-1, :, 0], expect[:-1], atol=1e-12)


def test_convergence_log(tmp_path):
    pc = PhantomConfig(dims=(24, 24, 3), motion="translation", amplitude=1.0, seed=6)
    seq, _ = generate_phantom(pc)
    results = register_sequence(seq, PHANTOM.with_(spacing=12.0))
    path = tmp_path / "log.csv"
    write_convergence_log(results, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(LOG_HEADER)
    assert len(lines) == 1 + sum(r.iterations for r in results)
    accepted = [float(l.split(",")[2]) for l in lines[1:] if l.split(",")[4] == "1" and l[0] == "0"]
    assert np.all(np.diff(accepted) < 0)
