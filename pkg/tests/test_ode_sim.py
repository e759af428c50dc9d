"""
Tests para flujos/ode_sim.py
"""
import math
import pickle

import numpy as np
import pytest

from flujos import ode_sim
from flujos.errors import ConfigError, SignalExhaustedError, StiffnessError
from flujos.ode_sim import (
    PwcSignal,
    SolverConfig,
    available_systems,
    fhn_rhs,
    get_system,
    integrate,
    integrate_grid,
    interval_index,
    pwc_eval,
    samples_to_cover,
    vdp_rhs,
)


def constant_signal(value, delta, horizon):
    return PwcSignal(delta=delta, values=np.full(samples_to_cover(horizon, delta), value))


# ============================================================================
# Señales
# ============================================================================

def test_pwc_eval_right_open_intervals():
    """Test u(t) = u_k en [(k-1)Δ, kΔ)"""
    signal = PwcSignal(delta=0.5, values=[1.0, 2.0, 3.0])
    assert pwc_eval(signal, 0.0)[0] == 1.0
    assert pwc_eval(signal, 0.49)[0] == 1.0
    assert pwc_eval(signal, 0.5)[0] == 2.0
    assert pwc_eval(signal, 1.49)[0] == 3.0


def test_pwc_eval_boundaries_with_inexact_delta():
    """Test fronteras kΔ con Δ no representable (0.1, 0.2)"""
    signal = PwcSignal(delta=0.1, values=np.arange(1.0, 11.0))
    for k in range(10):
        assert pwc_eval(signal, k * 0.1)[0] == k + 1
    assert interval_index(3 * 0.2, 0.2) == 3


def test_pwc_eval_errors():
    """Test t negativo y señal agotada"""
    signal = PwcSignal(delta=0.5, values=[1.0, 2.0, 3.0])
    with pytest.raises(ValueError, match="negativo"):
        pwc_eval(signal, -0.1)
    with pytest.raises(SignalExhaustedError):
        pwc_eval(signal, 1.5)


def test_pwc_signal_validation():
    """Test Δ <= 0 y señal vacía"""
    with pytest.raises(ValueError):
        PwcSignal(delta=0.0, values=[1.0])
    with pytest.raises(ValueError):
        PwcSignal(delta=0.1, values=[])


def test_samples_to_cover():
    """Test ceil(T/Δ) + 1 valores"""
    assert samples_to_cover(15.0, 0.2) == 76
    assert samples_to_cover(20.0, 0.1) == 201
    assert samples_to_cover(1.0, 0.3) == 5
    signal = PwcSignal(delta=0.2, values=np.zeros(samples_to_cover(15.0, 0.2)))
    assert pwc_eval(signal, 15.0).shape == (1,)


# ============================================================================
# Sistemas
# ============================================================================

def test_vdp_rhs_values():
    """Test Van der Pol en un punto"""
    assert vdp_rhs(np.array([1.0, 2.0]), 0.5) == pytest.approx([2.0, -0.5])
    assert vdp_rhs(np.array([0.0, 1.0]), 0.0, mu=2.0) == pytest.approx([1.0, 2.0])


def test_fhn_rhs_values():
    """Test FitzHugh-Nagumo en el origen: x2' = a/(eta gamma) = 0.375"""
    assert fhn_rhs(np.array([0.0, 0.0]), 0.0) == pytest.approx([0.0, 0.375])
    assert fhn_rhs(np.array([1.0, 0.0]), 0.5) == pytest.approx([25.0, 1.625])


def test_get_system_registry():
    """Test sistemas registrados y overrides"""
    assert set(available_systems()) >= {"vdp", "fhn", "decay", "harmonic"}
    system = get_system("vdp", mu=2.0)
    assert system.params == {"mu": 2.0}
    assert system.rhs(np.array([0.0, 1.0]), np.array([0.0])) == pytest.approx([1.0, 2.0])
    assert (system.state_dim, system.input_dim) == (2, 1)


def test_get_system_errors():
    """Test sistema o parámetro desconocido"""
    with pytest.raises(ConfigError, match="desconocido"):
        get_system("lorenz")
    with pytest.raises(ConfigError, match="Parámetros desconocidos"):
        get_system("vdp", eta=1.0)
    with pytest.raises(ConfigError):
        get_system("fhn", eta=0.0)


def test_system_is_picklable():
    """Test que el sistema se puede mandar a otro proceso"""
    system = pickle.loads(pickle.dumps(get_system("fhn")))
    assert system.rhs(np.array([0.0, 0.0]), 0.0) == pytest.approx([0.0, 0.375])


# ============================================================================
# Integración
# ============================================================================

def test_integrate_decay_matches_exponential():
    """Test x' = -x: x(1) = e^-1"""
    system = get_system("decay")
    traj = integrate(system, [1.0], constant_signal(0.0, 0.2, 2.0), [0.0, 0.5, 1.0, 2.0])

    assert traj.states[0, 0] == 1.0
    assert traj.states[2, 0] == pytest.approx(0.3678794, abs=1e-6)
    assert traj.states[:, 0] == pytest.approx(np.exp(-traj.times), abs=1e-6)


def test_integrate_harmonic_full_period():
    """Test oscilador armónico: vuelve a (1, 0) en t = 2π"""
    system = get_system("harmonic")
    horizon = 2 * math.pi
    traj = integrate(system, [1.0, 0.0], constant_signal(0.0, 0.1, horizon), [math.pi / 2, horizon])

    assert traj.states[0] == pytest.approx([0.0, -1.0], abs=1e-5)
    assert traj.states[1] == pytest.approx([1.0, 0.0], abs=1e-5)


def test_integrate_constant_input_on_vdp_equilibrium():
    """Test VdP con u = c: el equilibrio (c, 0) queda fijo"""
    system = get_system("vdp")
    traj = integrate(system, [0.3, 0.0], constant_signal(0.3, 0.2, 3.0), np.linspace(0.0, 3.0, 7))
    assert traj.states == pytest.approx(np.tile([0.3, 0.0], (7, 1)), abs=1e-9)


def test_integrate_respects_input_switch():
    """Test que la entrada cambia exactamente en kΔ"""
    # VdP en reposo y escalón u = 1 en t = 0.5: x2 ~ (t - 0.5)
    system = get_system("vdp")
    signal = PwcSignal(delta=0.5, values=[0.0, 1.0, 1.0])
    traj = integrate(system, [0.0, 0.0], signal, [0.5, 0.5 + 1e-3])
    assert traj.states[0] == pytest.approx([0.0, 0.0], abs=1e-12)
    assert traj.states[1, 1] == pytest.approx(1e-3, rel=1e-2)


def test_integrate_chained_calls():
    """Test encadenar con t0 da lo mismo que una sola llamada"""
    system = get_system("vdp")
    rng = np.random.default_rng(0)
    signal = PwcSignal(delta=0.2, values=rng.normal(0, 5, size=20))
    full = integrate(system, [1.0, -1.0], signal, [1.3, 2.9])
    first = integrate(system, [1.0, -1.0], signal, [1.3])
    second = integrate(system, first.states[0], signal, [2.9], t0=1.3)
    assert second.states[0] == pytest.approx(full.states[1], abs=1e-7)


def test_integrate_restart_at_control_boundary():
    """Test cortar exactamente en kΔ y encadenar: mismo estado que una sola llamada"""
    system = get_system("vdp")
    rng = np.random.default_rng(2)
    signal = PwcSignal(delta=0.2, values=rng.normal(0, 5, size=20))
    boundary = 6 * 0.2

    whole = integrate(system, [1.0, -1.0], signal, [2.9])
    first = integrate(system, [1.0, -1.0], signal, [boundary])
    second = integrate(system, first.states[0], signal, [2.9], t0=boundary)
    assert np.max(np.abs(second.states[0] - whole.states[0])) <= 1e-9


@pytest.mark.parametrize("name,x0,horizon", [
    ("decay", [1.0], 2.0),
    ("harmonic", [1.0, 0.0], math.pi),
])
def test_integrate_tolerance_convergence(name, x0, horizon):
    """Test tolerancias a la mitad: la salida cambia menos que la tolerancia gruesa"""
    system = get_system(name)
    signal = constant_signal(0.0, 0.5, horizon)
    times = np.linspace(0.0, horizon, 9)
    coarse_cfg = SolverConfig()
    fine_cfg = SolverConfig(rel_tol=coarse_cfg.rel_tol / 2, abs_tol=coarse_cfg.abs_tol / 2)

    coarse = integrate(system, x0, signal, times, coarse_cfg)
    fine = integrate(system, x0, signal, times, fine_cfg)
    assert np.max(np.abs(fine.states - coarse.states)) < coarse_cfg.rel_tol


def test_integrate_errors():
    """Test entradas inválidas"""
    system = get_system("vdp")
    signal = constant_signal(0.0, 0.2, 1.0)
    with pytest.raises(ValueError, match="dimensión"):
        integrate(system, [1.0], signal, [0.5])
    with pytest.raises(ValueError, match="ordenado"):
        integrate(system, [1.0, 0.0], signal, [0.5, 0.1])
    with pytest.raises(SignalExhaustedError):
        integrate(system, [1.0, 0.0], signal, [5.0])


def test_integrate_solver_failure(monkeypatch):
    """Test que una falla del integrador se reporta como StiffnessError"""
    class Failed:
        success = False
        message = "Required step size is less than spacing between numbers."

    monkeypatch.setattr(ode_sim, "solve_ivp", lambda *args, **kwargs: Failed())
    with pytest.raises(StiffnessError, match="step size"):
        integrate(get_system("vdp"), [1.0, 0.0], constant_signal(0.0, 0.2, 1.0), [0.5])


def test_integrate_grid_matches_integrate():
    """Test grilla densa contra integración exacta a cada instante"""
    system = get_system("vdp")
    rng = np.random.default_rng(4)
    signal = PwcSignal(delta=0.2, values=np.repeat(rng.normal(0, 5, size=5), 5))
    dense = integrate_grid(system, [0.5, -0.5], signal, 4.0, 0.02)
    exact = integrate(system, [0.5, -0.5], signal, dense.times)

    assert dense.times.size == 201
    assert dense.states[0] == pytest.approx([0.5, -0.5])
    assert dense.states == pytest.approx(exact.states, rel=1e-4, abs=1e-5)


def test_integrate_grid_decay():
    """Test grilla densa con solución analítica"""
    dense = integrate_grid(get_system("decay"), [1.0], constant_signal(0.0, 0.1, 3.0), 3.0, 0.01)
    assert dense.states[:, 0] == pytest.approx(np.exp(-dense.times), abs=1e-6)


def test_solver_config_defaults():
    """Test tolerancias por defecto"""
    cfg = SolverConfig()
    assert cfg.rel_tol == 1e-6
    assert cfg.abs_tol == 1e-8
    assert cfg.first_step is None
    assert cfg.max_step is None
    assert cfg.model_dump(mode="json")["max_step"] is None


def test_solver_max_step_limits_steps(monkeypatch):
    """Test max_step None -> sin límite; finito -> se pasa a solve_ivp"""
    seen = []
    real = ode_sim.solve_ivp

    def spy(*args, **kwargs):
        seen.append(kwargs["max_step"])
        return real(*args, **kwargs)

    monkeypatch.setattr(ode_sim, "solve_ivp", spy)
    signal = constant_signal(0.0, 0.5, 1.0)
    integrate(get_system("decay"), [1.0], signal, [0.5])
    integrate(get_system("decay"), [1.0], signal, [0.5], SolverConfig(max_step=0.05))
    assert seen == [math.inf, 0.05]


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
