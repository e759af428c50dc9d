"""
Tests para flujos/nn_core.py
"""
import numpy as np
import pytest

from flujos.errors import DataFormatError, ShapeError, TrainingDivergenceError
from flujos.flow_model import ModelConfig, batched_loss, init_flow_model
from flujos.nn_core import (
    AdamState,
    LstmSpec,
    LstmState,
    MlpSpec,
    ParamVector,
    Segment,
    Tape,
    adam_step,
    backward,
    init_params,
    lstm_step,
    mlp_forward,
)


# ============================================================================
# ParamVector
# ============================================================================

def test_param_vector_segments_are_views():
    """Test que segment() devuelve una vista con la forma del segmento"""
    params = ParamVector.from_shapes([("W", (2, 3)), ("b", (3,))])
    assert len(params) == 9
    assert params.names == ["W", "b"]

    params.segment("W")[1, 2] = 7.0
    assert params.values[5] == 7.0
    assert params.segment("b").shape == (3,)


def test_param_vector_rejects_gaps_and_bad_length():
    """Test segmentos no contiguos o largo incorrecto"""
    with pytest.raises(DataFormatError, match="no contiguo"):
        ParamVector([Segment("a", (2,), 0), Segment("b", (2,), 3)])

    with pytest.raises(DataFormatError, match="valores"):
        ParamVector([Segment("a", (2,), 0)], np.zeros(3))

    with pytest.raises(DataFormatError, match="repetidos"):
        ParamVector([Segment("a", (1,), 0), Segment("a", (1,), 1)])


def test_param_vector_json_round_trip():
    """Test serialización exacta"""
    params = init_params([("W", (4, 3)), ("b", (3,))], np.random.default_rng(1))
    params.values[-1] = 1.0 / 3.0
    loaded = ParamVector.from_json(params.to_json())

    assert loaded.names == params.names
    assert np.array_equal(loaded.values, params.values)


def test_param_vector_unknown_segment():
    """Test segmento inexistente"""
    params = ParamVector.from_shapes([("W", (2, 2))])
    with pytest.raises(DataFormatError, match="desconocido"):
        params.segment("nope")


def test_init_params_bounds():
    """Test inicialización: pesos en ±1/sqrt(fan_in), bias en cero"""
    params = init_params([("W", (16, 8)), ("b", (8,))], np.random.default_rng(0))
    bound = 1.0 / np.sqrt(16)
    assert np.all(np.abs(params.segment("W")) <= bound)
    assert np.any(params.segment("W") != 0)
    assert np.all(params.segment("b") == 0)


# ============================================================================
# Capas
# ============================================================================

def test_mlp_forward_shapes():
    """Test salida 1-D para entrada 1-D y 2-D para lotes"""
    spec = MlpSpec(name="enc", input_dim=2, output_dim=3, hidden_widths=[4, 4])
    params = init_params(spec.param_shapes(), np.random.default_rng(0))

    assert mlp_forward(spec, params, np.zeros(2)).shape == (3,)
    assert mlp_forward(spec, params, np.zeros((5, 2))).shape == (5, 3)


def test_mlp_forward_matches_formula():
    """Test una capa oculta: W1^T tanh(W0^T x + b0) + b1"""
    spec = MlpSpec(name="net", input_dim=2, output_dim=1, hidden_widths=[3])
    params = init_params(spec.param_shapes(), np.random.default_rng(3))
    params.segment("net.b0")[:] = [0.1, -0.2, 0.3]
    params.segment("net.b1")[:] = [0.5]
    x = np.array([0.7, -1.1])

    hidden = np.tanh(x @ params.segment("net.W0") + params.segment("net.b0"))
    expected = hidden @ params.segment("net.W1") + params.segment("net.b1")
    assert mlp_forward(spec, params, x) == pytest.approx(expected, abs=1e-12)


def test_mlp_forward_wrong_dim():
    """Test dimensión de entrada incorrecta"""
    spec = MlpSpec(name="dec", input_dim=3, output_dim=2)
    params = init_params(spec.param_shapes(), np.random.default_rng(0))
    with pytest.raises(ShapeError, match="esperada 3"):
        mlp_forward(spec, params, np.zeros(2))


def test_mlp_spec_rejects_zero_width():
    """Test capa oculta de ancho 0"""
    with pytest.raises(ValueError):
        MlpSpec(name="enc", input_dim=2, output_dim=2, hidden_widths=[4, 0])


def test_lstm_step_zero_weights():
    """Test celda con pesos nulos: compuertas 0.5, candidato 0"""
    spec = LstmSpec(input_dim=2, hidden_dim=1)
    params = ParamVector.from_shapes(spec.param_shapes())
    state = lstm_step(spec, params, np.array([0.3, 1.0]), LstmState(np.zeros(1), np.array([1.0])))

    assert state.c[0] == pytest.approx(0.5)
    assert state.h[0] == pytest.approx(0.5 * np.tanh(0.5))


def test_lstm_step_gate_order():
    """Test orden de compuertas: input, forget, candidato, output"""
    spec = LstmSpec(input_dim=1, hidden_dim=1)
    params = ParamVector.from_shapes(spec.param_shapes())
    # forget cerrada (sigmoid(-50) ~ 0), input abierta, candidato = tanh(1)
    params.segment("lstm.b")[:] = [50.0, -50.0, 1.0, 50.0]
    state = lstm_step(spec, params, np.array([0.0]), LstmState(np.zeros(1), np.array([10.0])))

    assert state.c[0] == pytest.approx(np.tanh(1.0), abs=1e-12)
    assert state.h[0] == pytest.approx(np.tanh(np.tanh(1.0)), abs=1e-12)


def test_lstm_step_shape_errors():
    """Test estado o entrada de dimensión incorrecta"""
    spec = LstmSpec(input_dim=2, hidden_dim=3)
    params = ParamVector.from_shapes(spec.param_shapes())
    with pytest.raises(ShapeError):
        lstm_step(spec, params, np.zeros(3), LstmState.zeros(3))
    with pytest.raises(ShapeError):
        lstm_step(spec, params, np.zeros(2), LstmState.zeros(2))


def _spectral(w):
    return np.linalg.norm(np.atleast_2d(w), 2)


@pytest.mark.parametrize("seed", range(5))
def test_mlp_forward_is_lipschitz(seed):
    """Test continuidad: |f(x + d) - f(x)| <= prod ||W_i|| |d|"""
    rng = np.random.default_rng(seed)
    spec = MlpSpec(name="enc", input_dim=3, output_dim=2, hidden_widths=[6, 5])
    params = init_params(spec.param_shapes(), rng)
    bound = np.prod([_spectral(params.segment(f"enc.W{i}")) for i in range(3)])
    x = rng.normal(size=3)
    y = mlp_forward(spec, params, x)

    for eps in (1e-3, 1e-6):
        d = rng.normal(size=3)
        d *= eps / np.linalg.norm(d)
        change = np.linalg.norm(mlp_forward(spec, params, x + d) - y)
        assert change <= bound * eps * (1 + 1e-9)
    assert np.linalg.norm(mlp_forward(spec, params, x + 1e-12) - y) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_lstm_step_is_lipschitz(seed):
    """Test continuidad en cada coordenada de entrada, h y c"""
    rng = np.random.default_rng(seed)
    spec = LstmSpec(input_dim=2, hidden_dim=4)
    params = init_params(spec.param_shapes(), rng)
    x = rng.normal(size=2)
    h = np.tanh(rng.normal(size=4))
    c = rng.normal(size=4)
    eps = 1e-6
    # sigmoid es 1/4-Lipschitz y tanh 1-Lipschitz
    bound = (1.5 + (np.max(np.abs(c)) + eps) / 4) * _spectral(params.segment("lstm.W")) + 1.0
    base = lstm_step(spec, params, x, LstmState(h, c))

    for which, arr in (("x", x), ("h", h), ("c", c)):
        for j in range(arr.size):
            bumped = {"x": x.copy(), "h": h.copy(), "c": c.copy()}
            bumped[which][j] += eps
            out = lstm_step(spec, params, bumped["x"], LstmState(bumped["h"], bumped["c"]))
            assert np.linalg.norm(out.h - base.h) <= bound * eps * (1 + 1e-6)
            assert np.linalg.norm(out.c - base.c) <= bound * eps * (1 + 1e-6)


# ============================================================================
# Cinta
# ============================================================================

def test_tape_simple_gradient():
    """Test d/dW sum((xW - y)^2)"""
    params = ParamVector.from_shapes([("W", (2, 1))])
    params.values[:] = [0.5, -1.0]
    x = np.array([[1.0, 2.0]])
    tape = Tape()
    pred = tape.matmul(x, tape.param(params, "W"))
    loss = tape.weighted_sq_error(pred, np.array([[1.0]]), np.array([1.0]))
    grad = backward(tape, loss, params)

    # pred = 0.5 - 2 = -1.5, residuo -2.5
    assert float(loss.value) == pytest.approx(6.25)
    assert grad == pytest.approx([2 * -2.5 * 1.0, 2 * -2.5 * 2.0])


def test_tape_take_accumulates_repeated_rows():
    """Test gather con índices repetidos suma gradientes"""
    params = ParamVector.from_shapes([("A", (3, 1))])
    params.values[:] = [1.0, 2.0, 3.0]
    tape = Tape()
    rows = tape.take(tape.param(params, "A"), np.array([0, 0, 2]))
    loss = tape.weighted_sq_error(rows, np.zeros((3, 1)), np.ones(3))
    grad = backward(tape, loss, params)

    assert grad == pytest.approx([4.0, 0.0, 6.0])


def test_tape_backward_requires_scalar():
    """Test backward sobre salida no escalar"""
    params = ParamVector.from_shapes([("W", (2, 2))])
    tape = Tape()
    out = tape.tanh(tape.param(params, "W"))
    with pytest.raises(ValueError, match="escalar"):
        tape.backward(out)


def test_tape_without_recording():
    """Test cinta de inferencia: no guarda nodos ni permite backward"""
    params = ParamVector.from_shapes([("W", (2, 2))])
    tape = Tape(record=False)
    out = tape.weighted_sq_error(tape.param(params, "W"), np.ones((2, 2)), np.ones(2))
    assert len(tape) == 0
    with pytest.raises(ValueError, match="record"):
        tape.backward(out)


def _loss_value(model, params, batch):
    return float(batched_loss(Tape(record=False), model, *batch, params=params).value)


def _random_batch(rng, model, n_traj=2, n_samples=4, n_values=8):
    x0s = rng.standard_normal((n_traj, model.state_dim))
    inputs = rng.normal(0.0, 2.0, size=(n_traj, n_values, model.input_dim))
    traj = rng.integers(0, n_traj, size=n_samples)
    traj[0] = 0
    times = rng.uniform(0.0, (n_values - 1) * model.delta, size=n_samples)
    targets = rng.standard_normal((n_samples, model.state_dim))
    return x0s, inputs, traj, times, targets


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    """Test gradiente de la cinta contra diferencias centradas en todos los parámetros"""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(hidden_dim=int(rng.integers(2, 9)),
                      encoder_widths=[int(rng.integers(2, 17))] * 2,
                      decoder_widths=[int(rng.integers(2, 17))] * 2)
    model = init_flow_model(cfg, state_dim=2, input_dim=1, delta=0.2, seed=seed)
    batch = _random_batch(rng, model, n_samples=int(rng.integers(1, 5)))

    tape = Tape()
    loss = batched_loss(tape, model, *batch)
    grad = backward(tape, loss, model.params)

    eps = 1e-5
    for i in range(len(model.params)):
        plus, minus = model.params.values.copy(), model.params.values.copy()
        plus[i] += eps
        minus[i] -= eps
        numeric = (_loss_value(model, model.params.with_values(plus), batch)
                   - _loss_value(model, model.params.with_values(minus), batch)) / (2 * eps)
        assert abs(grad[i] - numeric) <= 1e-4 * max(abs(grad[i]), abs(numeric)) + 1e-8, \
            f"{i}: cinta={grad[i]} numérico={numeric}"


# ============================================================================
# Adam
# ============================================================================

def test_adam_first_step():
    """Test primer paso: p - lr * g/(|g| + eps)"""
    params = ParamVector.from_shapes([("p", (1,))])
    state = AdamState.zeros(1, lr=0.01)
    new_params, new_state = adam_step(state, params, np.array([1.0]))

    assert new_params.values[0] == pytest.approx(-0.01 / (1.0 + 1e-8), rel=1e-12)
    assert new_state.t == 1
    assert params.values[0] == 0.0
    assert state.t == 0


def test_adam_zero_gradient_is_identity():
    """Test gradiente nulo desde cero: parámetros intactos, t avanza"""
    params = ParamVector.from_shapes([("p", (3,))])
    params.values[:] = [0.5, -1.0, 2.0]
    state = AdamState.zeros(3, lr=0.1)
    new_params, new_state = adam_step(state, params, np.zeros(3))

    assert np.array_equal(new_params.values, params.values)
    assert new_state.t == 1
    assert np.array_equal(new_state.m, np.zeros(3))
    assert np.array_equal(new_state.v, np.zeros(3))


def test_adam_two_identical_gradients():
    """Test dos pasos con el mismo g: p0 - 2 lr g/(|g| + eps)"""
    g = np.array([0.3, -2.0, 1e-3])
    params = ParamVector.from_shapes([("p", (3,))])
    params.values[:] = [1.0, 1.0, 1.0]
    state = AdamState.zeros(3, lr=0.01)
    once, state = adam_step(state, params, g)
    twice, state = adam_step(state, once, g)

    step = 0.01 * g / (np.abs(g) + 1e-8)
    assert once.values == pytest.approx(params.values - step, rel=1e-12)
    assert twice.values == pytest.approx(params.values - 2 * step, rel=1e-10)
    assert state.t == 2


def test_adam_rejects_non_finite_gradient():
    """Test gradiente NaN"""
    params = ParamVector.from_shapes([("p", (2,))])
    state = AdamState.zeros(2, lr=0.01)
    with pytest.raises(TrainingDivergenceError):
        adam_step(state, params, np.array([1.0, np.nan]))


def test_adam_rejects_wrong_length():
    """Test gradiente de largo distinto"""
    params = ParamVector.from_shapes([("p", (2,))])
    with pytest.raises(ShapeError):
        adam_step(AdamState.zeros(2, lr=0.01), params, np.zeros(3))


def test_adam_state_json_round_trip():
    """Test serialización del estado de Adam"""
    params = ParamVector.from_shapes([("p", (3,))])
    state = AdamState.zeros(3, lr=0.02)
    _, state = adam_step(state, params, np.array([0.1, -0.2, 0.3]))
    loaded = AdamState.from_json(state.to_json())

    assert np.array_equal(loaded.m, state.m)
    assert np.array_equal(loaded.v, state.v)
    assert loaded.t == 1
    assert loaded.lr == 0.02


def test_adam_state_json_invalid():
    """Test estado de Adam incompleto"""
    with pytest.raises(DataFormatError):
        AdamState.from_json({"m": [0.0]})


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
