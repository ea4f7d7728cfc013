import math

import numpy as np
import pytest

from disknls.errors import BlowUpError, PreconditionError
from disknls.nls_flow import (
    FlowConfig, cth_distance, default_dt, evolve, hamiltonian, kinetic, linear_step, mass,
    nonlinear_coeffs, potential, relative_hamiltonian_drift, step, trajectory_rows, with_config,
)
from disknls.random_field import NoiseStream, sample_free_batch
from disknls.spectral_disk import build_basis, lp_norm, synthesize

B8 = build_basis(8)
B16 = build_basis(16)


def test_default_dt_schedule():
    assert default_dt(8) == default_dt(32) == 1e-3
    assert default_dt(64) == 5e-4
    assert default_dt(128) == 2.5e-4


@pytest.mark.parametrize("kwargs", [
    {"sign": "sideways"}, {"alpha": 3}, {"alpha": 0}, {"sign": "focusing", "alpha": 4},
    {"integrator": "euler"}, {"n": 0}, {"dt": -1e-3}, {"t_final": 1e-4}, {"save_every": 0},
])
def test_config_preconditions(kwargs):
    base = {"n": 8, "t_final": 0.1}
    with pytest.raises(PreconditionError):
        FlowConfig(**(base | kwargs))


def test_config_steps_and_defaults():
    cfg = FlowConfig(n=8, t_final=0.3)
    assert cfg.dt == 1e-3 and cfg.steps == 300 and cfg.sigma == 1.0
    assert with_config(cfg, sign="focusing").sigma == -1.0
    assert cfg.as_dict()["n"] == 8


def test_nonlinear_coeffs_single_mode_projection():
    # <|e_1|^2 e_1, e_1> = ||e_1||_4^4
    e1 = np.eye(8)[0].astype(complex)
    assert nonlinear_coeffs(e1, B8, 2)[0].real == pytest.approx(lp_norm(e1, 4, B8) ** 4)
    assert np.allclose(nonlinear_coeffs(e1, B8, 0), e1)


def test_free_flow_is_exact_rotation():
    phi = sample_free_batch(NoiseStream(0), 1, 8, B8.zeros)[0]
    cfg = FlowConfig(n=8, t_final=0.2, nonlinear_scale=0.0)
    tr = evolve(phi, cfg, B8)
    assert np.allclose(tr.final, linear_step(phi, tr.times[-1], B8.zeros), atol=1e-13)


def test_batch_matches_single_runs():
    phi = sample_free_batch(NoiseStream(1), 3, 8, B8.zeros)
    cfg = FlowConfig(n=8, t_final=0.05)
    batch = evolve(phi, cfg, B8).final
    single = np.array([evolve(p, cfg, B8).final for p in phi])
    assert np.allclose(batch, single, atol=1e-14)


@pytest.mark.parametrize("integrator", ["strang", "rk4_reference"])
def test_mass_and_energy_conserved(integrator):
    phi = sample_free_batch(NoiseStream(2), 4, 16, B16.zeros) * 10
    cfg = FlowConfig(n=16, t_final=0.2, integrator=integrator, dt=2e-4)
    tr = evolve(phi, cfg, B16)
    assert tr.diagnostics["max_relative_mass_drift"] < (1e-10 if integrator == "strang" else 1e-6)
    assert np.all(relative_hamiltonian_drift(tr, B16) < 1e-4)


def test_strang_is_time_reversible():
    phi = sample_free_batch(NoiseStream(3), 1, 8, B8.zeros)[0] * 5
    cfg = FlowConfig(n=8, t_final=0.01)
    fwd = step(phi, 1e-3, cfg, B8)
    assert np.allclose(step(fwd, -1e-3, cfg, B8), phi, atol=1e-13)


def test_hamiltonian_parts():
    u = np.eye(8)[2] * 2.0
    k = 0.5 * B8.zeros[2] ** 2 * 4
    assert kinetic(u, B8.zeros) == pytest.approx(k)
    assert potential(u, B8, 2) == pytest.approx(lp_norm(u, 4, B8) ** 4)
    h_def = hamiltonian(u, B8, "defocusing", 2)
    h_foc = hamiltonian(u, B8, "focusing", 2)
    assert h_def - h_foc == pytest.approx(potential(u, B8, 2) / 2)
    assert mass(u) == pytest.approx(4.0)


def test_blowup_raises_with_partial_trajectory():
    phi = np.zeros(8, complex)
    phi[0] = 1.0
    cfg = FlowConfig(n=8, t_final=0.1, sign="focusing", nonlinear_scale=1e10, blowup_threshold=1e3)
    with pytest.raises(BlowUpError) as exc:
        evolve(phi, cfg, B8)
    assert exc.value.step >= 1 and len(exc.value.states) == len(exc.value.times)
    assert "blow-up" in str(exc.value)


def test_dimension_mismatch_rejected():
    with pytest.raises(PreconditionError):
        evolve(np.zeros(4), FlowConfig(n=8, t_final=0.01), B8)
    with pytest.raises(PreconditionError):
        evolve(np.zeros(16), FlowConfig(n=16, t_final=0.01), B8)


def test_save_every_keeps_final_state():
    cfg = FlowConfig(n=8, t_final=0.0105, save_every=4, dt=1e-3)
    tr = evolve(np.eye(8)[0], cfg, B8)
    assert list(np.round(tr.times * 1000)) == [0, 4, 8, 10]


def test_cth_distance_pads_shorter_trajectory():
    a = np.zeros((3, 4), complex)
    b = np.zeros((3, 8), complex)
    b[1, 6] = 1.0
    z = B8.zeros
    assert cth_distance(a, b, 0.4, z) == pytest.approx((1 + z[6] ** 2) ** 0.2)


def test_order_two_on_smooth_data():
    phi = np.zeros(32, complex)
    phi[:3] = [1.0, 0.5j, 0.3]
    b = build_basis(32)
    drift = [relative_hamiltonian_drift(evolve(phi, FlowConfig(n=32, t_final=0.5, dt=dt), b), b)
             for dt in (1e-3, 5e-4)]
    assert drift[0] / drift[1] == pytest.approx(4.0, rel=0.2)


def test_trajectory_rows():
    tr = evolve(np.eye(8)[0], FlowConfig(n=8, t_final=0.001, dt=1e-3), B8)
    rows = list(trajectory_rows(tr))
    assert len(rows) == 16 and rows[0] == ("0.0", 1, "1.0", "0.0")
    batch = evolve(np.eye(8)[:2], FlowConfig(n=8, t_final=0.001, dt=1e-3), B8)
    with pytest.raises(PreconditionError):
        list(trajectory_rows(batch))


def test_synthesis_of_state_is_real_for_real_coefficients():
    assert np.all(np.isreal(synthesize(np.ones(8), B8)))
    assert math.isfinite(float(hamiltonian(np.ones(8), B8)))
