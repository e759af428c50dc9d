"""
Modelo de función de flujo
φ̂(s, x, u) = h_dec(g(z_{k_s}, z_{k_s+1}, τ_{k_s+1}))

El estado inicial x pasa por el encoder (h0, c0); la LSTM consume los tokens
(u_k, τ_k) de la discretización de s; g combina los dos últimos estados
ocultos y el decoder devuelve la estimación del estado.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .errors import DataFormatError, ShapeError, SignalExhaustedError
from .nn_core import (
    AdamState,
    LstmSpec,
    LstmState,
    MlpSpec,
    ParamVector,
    Tape,
    Var,
    init_params,
    lstm_step,
    mlp_forward,
)
from .ode_sim import PwcSignal, interval_index

CHECKPOINT_SCHEMA = 2


class ModelConfig(BaseModel):
    """Tamaños de las tres redes"""
    model_config = {"extra": "forbid"}

    hidden_dim: int = Field(..., ge=1, description="Estados ocultos de la LSTM")
    encoder_widths: List[int] = Field(..., description="Capas ocultas del encoder")
    decoder_widths: List[int] = Field(..., description="Capas ocultas del decoder")


@dataclass
class FlowModel:
    """Encoder + LSTM + decoder y los pesos en un único ParamVector"""
    encoder: MlpSpec
    lstm: LstmSpec
    decoder: MlpSpec
    params: ParamVector
    delta: float
    state_dim: int
    input_dim: int
    rng_seed: Optional[int] = None
    training_meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        H = self.lstm.hidden_dim
        if self.encoder.input_dim != self.state_dim or self.encoder.output_dim != 2 * H:
            raise ShapeError(f"Encoder {self.encoder.input_dim}->{self.encoder.output_dim} incompatible con n={self.state_dim}, H={H}")
        if self.lstm.input_dim != self.input_dim + 1:
            raise ShapeError(f"LSTM de entrada {self.lstm.input_dim}, esperada m+1={self.input_dim + 1}")
        if self.decoder.input_dim != H or self.decoder.output_dim != self.state_dim:
            raise ShapeError(f"Decoder {self.decoder.input_dim}->{self.decoder.output_dim} incompatible con H={H}, n={self.state_dim}")
        if not self.delta > 0:
            raise ValueError(f"Δ debe ser > 0: {self.delta}")

    @property
    def hidden_dim(self) -> int:
        return self.lstm.hidden_dim

    def param_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return self.encoder.param_shapes() + self.lstm.param_shapes() + self.decoder.param_shapes()

    def with_params(self, params: ParamVector) -> "FlowModel":
        return FlowModel(
            encoder=self.encoder, lstm=self.lstm, decoder=self.decoder, params=params,
            delta=self.delta, state_dim=self.state_dim, input_dim=self.input_dim,
            rng_seed=self.rng_seed, training_meta=dict(self.training_meta),
        )


def init_flow_model(cfg: ModelConfig, state_dim: int, input_dim: int, delta: float,
                    seed: int = 0) -> FlowModel:
    """Construir las tres redes con pesos aleatorios reproducibles"""
    encoder = MlpSpec(name="enc", input_dim=state_dim, output_dim=2 * cfg.hidden_dim,
                      hidden_widths=cfg.encoder_widths)
    lstm = LstmSpec(name="lstm", input_dim=input_dim + 1, hidden_dim=cfg.hidden_dim)
    decoder = MlpSpec(name="dec", input_dim=cfg.hidden_dim, output_dim=state_dim,
                      hidden_widths=cfg.decoder_widths)
    shapes = encoder.param_shapes() + lstm.param_shapes() + decoder.param_shapes()
    params = init_params(shapes, np.random.default_rng(seed))
    return FlowModel(encoder=encoder, lstm=lstm, decoder=decoder, params=params,
                     delta=delta, state_dim=state_dim, input_dim=input_dim, rng_seed=seed)


def reinit_flow_model(model: FlowModel, seed: int = 0) -> FlowModel:
    """Mismas redes que `model` con pesos iniciales nuevos"""
    fresh = model.with_params(init_params(model.param_shapes(), np.random.default_rng(seed)))
    fresh.rng_seed = seed
    fresh.training_meta = {}
    return fresh


# ============================================================================
# Discretización del tiempo
# ============================================================================

@dataclass
class DiscretizedQuery:
    """k_s y la secuencia de tokens (u_k, τ_k), k = 1..k_s+1"""
    k_s: int
    controls: np.ndarray
    taus: np.ndarray

    @property
    def tokens(self) -> np.ndarray:
        """Filas [u_k, τ_k] (τ va después de las m coordenadas de control)"""
        return np.concatenate([self.controls, self.taus[:, None]], axis=1)

    def __len__(self) -> int:
        return self.k_s + 1


def _last_tau(s, k, delta):
    tau = (np.asarray(s, dtype=np.float64) - k * delta) / delta
    return np.clip(tau, 0.0, np.nextafter(1.0, 0.0))


def discretize_time(s: float, delta: float, signal: PwcSignal) -> DiscretizedQuery:
    """k_s = floor(s/Δ), τ_k = 1 para k <= k_s y τ_{k_s+1} = (s - k_s Δ)/Δ"""
    if s < 0:
        raise ValueError(f"Instante negativo: {s}")
    if abs(signal.delta - delta) > 1e-12 * max(1.0, delta):
        raise DataFormatError(f"Δ de la señal ({signal.delta}) distinto del Δ del modelo ({delta})")
    k_s = interval_index(s, delta)
    if k_s + 1 > len(signal):
        raise SignalExhaustedError(
            f"s={s} requiere {k_s + 1} valores de entrada, la señal tiene {len(signal)}"
        )
    taus = np.ones(k_s + 1)
    taus[k_s] = float(_last_tau(s, k_s, delta))
    return DiscretizedQuery(k_s=k_s, controls=signal.values[:k_s + 1].copy(), taus=taus)


def interpolate_g(z_prev, z_last, tau_last: float):
    """g = (1 - τ) z_{k_s} + τ z_{k_s+1}"""
    z_prev = np.asarray(z_prev, dtype=np.float64)
    z_last = np.asarray(z_last, dtype=np.float64)
    if z_prev.shape != z_last.shape:
        raise ShapeError(f"Estados de distinta forma: {z_prev.shape} vs {z_last.shape}")
    if not 0.0 <= tau_last <= 1.0:
        raise ValueError(f"τ fuera de [0, 1]: {tau_last}")
    return (1.0 - tau_last) * z_prev + tau_last * z_last


# ============================================================================
# Evaluación
# ============================================================================

def _check_model_inputs(model: FlowModel, x, signal: PwcSignal) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != model.state_dim:
        raise ShapeError(f"Estado inicial de dimensión {x.size}, esperada {model.state_dim}")
    if signal.input_dim != model.input_dim:
        raise ShapeError(f"Señal de dimensión {signal.input_dim}, esperada {model.input_dim}")
    return x


def flow_forward(model: FlowModel, s: float, x, signal: PwcSignal) -> np.ndarray:
    """Evaluar φ̂(s, x, u) paso a paso"""
    x = _check_model_inputs(model, x, signal)
    query = discretize_time(s, model.delta, signal)
    H = model.hidden_dim

    enc = mlp_forward(model.encoder, model.params, x)
    state = LstmState(enc[:H], enc[H:])
    hidden = [state.h]
    for token in query.tokens:
        state = lstm_step(model.lstm, model.params, token, state)
        hidden.append(state.h)

    z = interpolate_g(hidden[query.k_s], hidden[query.k_s + 1], float(query.taus[-1]))
    return mlp_forward(model.decoder, model.params, z)


def rollout_graph(tape: Tape, model: FlowModel, x0s: np.ndarray, inputs: np.ndarray,
                  traj_index: np.ndarray, k_s: np.ndarray, tau: np.ndarray,
                  params: Optional[ParamVector] = None) -> Var:
    """
    Rollout por lotes con prefijo compartido

    x0s: (B, n) estados iniciales, inputs: (B, L, m) valores u_1..u_L por
    trayectoria. Cada consulta q usa la trayectoria traj_index[q] en el
    instante (k_s[q] + tau[q]) Δ. Los pasos con τ = 1 se calculan una sola vez
    para todo el lote; solo el último token depende de la consulta.
    Devuelve una Var (Q, n).
    """
    params = params if params is not None else model.params
    H = model.hidden_dim
    k_max = int(k_s.max()) if k_s.size else 0

    enc = mlp_forward(model.encoder, params, x0s, tape)
    state = LstmState(tape.slice_cols(enc, 0, H), tape.slice_cols(enc, H, 2 * H))
    hs, cs = [state.h], [state.c]
    ones = np.ones((x0s.shape[0], 1))
    for k in range(k_max):
        token = np.concatenate([inputs[:, k, :], ones], axis=1)
        state = lstm_step(model.lstm, params, token, state, tape)
        hs.append(state.h)
        cs.append(state.c)

    index = (k_s, traj_index)
    h_sel = tape.take(tape.stack(hs), index)
    c_sel = tape.take(tape.stack(cs), index)
    last_tokens = np.concatenate([inputs[traj_index, k_s, :], tau[:, None]], axis=1)
    last = lstm_step(model.lstm, params, last_tokens, LstmState(h_sel, c_sel), tape)

    weight = tau[:, None]
    z = tape.add(tape.mul(1.0 - weight, h_sel), tape.mul(weight, last.h))
    return mlp_forward(model.decoder, params, z, tape)


def query_indices(times: np.ndarray, delta: float, n_values: int) -> Tuple[np.ndarray, np.ndarray]:
    """k_s y τ vectorizados; valida que la señal alcance"""
    times = np.asarray(times, dtype=np.float64)
    if times.size and times.min() < 0:
        raise ValueError("Hay instantes negativos")
    k_s = np.atleast_1d(interval_index(times, delta)).astype(np.int64)
    if k_s.size and k_s.max() + 1 > n_values:
        raise SignalExhaustedError(
            f"t={times.max()} requiere {k_s.max() + 1} valores de entrada, la señal tiene {n_values}"
        )
    return k_s, _last_tau(times, k_s, delta)


def flow_rollout(model: FlowModel, times: Sequence[float], x, signal: PwcSignal) -> np.ndarray:
    """φ̂ en todos los instantes de una trayectoria, compartiendo la pasada de la LSTM"""
    x = _check_model_inputs(model, x, signal)
    times = np.asarray(times, dtype=np.float64).ravel()
    if times.size == 0:
        return np.zeros((0, model.state_dim))
    if np.any(np.diff(times) < 0):
        raise ValueError("times debe estar ordenado")
    if abs(signal.delta - model.delta) > 1e-12 * max(1.0, model.delta):
        raise DataFormatError(f"Δ de la señal ({signal.delta}) distinto del Δ del modelo ({model.delta})")

    k_s, tau = query_indices(times, model.delta, len(signal))
    tape = Tape(record=False)
    out = rollout_graph(
        tape, model, x[None, :], signal.values[None, :, :],
        np.zeros(times.size, dtype=np.int64), k_s, tau,
    )
    return out.value


def batch_arrays(x0s: Sequence[np.ndarray], signals: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Apilar estados iniciales y entradas (rellenando con el último valor si difieren en largo)"""
    x0s = np.stack([np.asarray(x, dtype=np.float64) for x in x0s])
    length = max(s.shape[0] for s in signals)
    inputs = np.stack([
        np.concatenate([s, np.repeat(s[-1:], length - s.shape[0], axis=0)]) if s.shape[0] < length else s
        for s in signals
    ])
    return x0s, inputs


def batched_loss(tape: Tape, model: FlowModel, x0s: np.ndarray, inputs: np.ndarray,
                 traj_index: np.ndarray, times: np.ndarray, targets: np.ndarray,
                 params: Optional[ParamVector] = None) -> Var:
    """
    Loss empírico de un lote de pares (trayectoria, instante)

    Promedio sobre trayectorias del promedio sobre sus muestras de ||ξ - φ̂||².
    """
    traj_index = np.asarray(traj_index, dtype=np.int64)
    counts = np.bincount(traj_index, minlength=x0s.shape[0])
    present = np.count_nonzero(counts)
    if present == 0:
        raise ValueError("Lote vacío")
    weights = 1.0 / (present * counts[traj_index])

    k_s, tau = query_indices(times, model.delta, inputs.shape[1])
    pred = rollout_graph(tape, model, x0s, inputs, traj_index, k_s, tau, params)
    return tape.weighted_sq_error(pred, targets, weights)


# ============================================================================
# Checkpoints
# ============================================================================

def save_checkpoint(model: FlowModel, path, optimizer: Optional[AdamState] = None,
                    resume: Optional[Dict[str, Any]] = None) -> Path:
    """Guardar specs, Δ, dimensiones y pesos (y opcionalmente el estado de Adam)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {
        "schema_version": CHECKPOINT_SCHEMA,
        "delta": model.delta,
        "state_dim": model.state_dim,
        "input_dim": model.input_dim,
        "specs": {
            "encoder": model.encoder.model_dump(),
            "lstm": model.lstm.model_dump(),
            "decoder": model.decoder.model_dump(),
        },
        **model.params.to_json(),
        "rng_seed": model.rng_seed,
        "training_meta": model.training_meta,
    }
    if optimizer is not None:
        data["optimizer"] = optimizer.to_json()
    if resume is not None:
        data["resume"] = resume
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=1, allow_nan=False)
    return path


def read_checkpoint(path) -> Dict[str, Any]:
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise DataFormatError(f"No existe el checkpoint {path}")
    except json.JSONDecodeError as e:
        raise DataFormatError(f"Checkpoint corrupto ({path}): {e}")
    if data.get("schema_version") != CHECKPOINT_SCHEMA:
        raise DataFormatError(
            f"Versión de checkpoint {data.get('schema_version')} no soportada (esperada {CHECKPOINT_SCHEMA})"
        )
    return data


def load_checkpoint(path) -> Tuple[FlowModel, Optional[AdamState], Optional[Dict[str, Any]]]:
    """Cargar modelo, estado de Adam (si existe) y estado de reanudación"""
    data = read_checkpoint(path)
    try:
        specs = data["specs"]
        model = FlowModel(
            encoder=MlpSpec(**specs["encoder"]),
            lstm=LstmSpec(**specs["lstm"]),
            decoder=MlpSpec(**specs["decoder"]),
            params=ParamVector.from_json(data),
            delta=float(data["delta"]),
            state_dim=int(data["state_dim"]),
            input_dim=int(data["input_dim"]),
            rng_seed=data.get("rng_seed"),
            training_meta=data.get("training_meta", {}),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataFormatError(f"Checkpoint inválido: {e}")

    expected = [name for name, _ in model.param_shapes()]
    if model.params.names != expected:
        raise DataFormatError("Los segmentos del checkpoint no coinciden con las specs")

    optimizer = AdamState.from_json(data["optimizer"]) if "optimizer" in data else None
    if optimizer is not None and optimizer.m.size != len(model.params):
        raise DataFormatError("Estado de Adam con largo distinto al de los parámetros")
    return model, optimizer, data.get("resume")


def check_compatible(model: FlowModel, delta: float, state_dim: int, input_dim: int) -> None:
    """Verificar Δ y dimensiones contra un dataset"""
    if abs(model.delta - delta) > 1e-12 * max(1.0, delta):
        raise DataFormatError(f"El modelo usa Δ={model.delta} y el dataset Δ={delta}")
    if model.state_dim != state_dim or model.input_dim != input_dim:
        raise DataFormatError(
            f"Dimensiones del modelo (n={model.state_dim}, m={model.input_dim}) "
            f"distintas a las del dataset (n={state_dim}, m={input_dim})"
        )
