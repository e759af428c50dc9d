"""
Núcleo de redes neuronales
Diferenciación automática en modo reverso sobre una cinta (Tape), capas
feedforward con tanh, celda LSTM estándar y optimizador Adam.

Todos los pesos viven en un único vector plano (ParamVector) en float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator
from scipy.special import expit

from .errors import DataFormatError, ShapeError, TrainingDivergenceError


# ============================================================================
# Vector de parámetros
# ============================================================================

@dataclass(frozen=True)
class Segment:
    """Segmento nombrado dentro del vector plano"""
    name: str
    shape: Tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamVector:
    """
    Vector plano de parámetros con segmentos nombrados

    Los segmentos son contiguos, no se superponen y cubren todo el vector.
    segment(name) devuelve una vista con la forma del segmento.
    """

    def __init__(self, segments: Sequence[Segment], values: Optional[np.ndarray] = None):
        segments = list(segments)
        offset = 0
        for seg in segments:
            if seg.offset != offset:
                raise DataFormatError(
                    f"Segmento '{seg.name}' no contiguo: offset {seg.offset}, esperado {offset}"
                )
            offset += seg.size

        names = [seg.name for seg in segments]
        if len(set(names)) != len(names):
            raise DataFormatError("Hay nombres de segmento repetidos")

        if values is None:
            values = np.zeros(offset)
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.size != offset:
            raise DataFormatError(
                f"El vector tiene {values.size} valores pero los segmentos suman {offset}"
            )

        self.segments = segments
        self.values = values
        self._index = {seg.name: seg for seg in segments}

    @classmethod
    def from_shapes(cls, shapes: Sequence[Tuple[str, Tuple[int, ...]]]) -> "ParamVector":
        """Crear un vector en cero a partir de (nombre, shape) en orden"""
        segments = []
        offset = 0
        for name, shape in shapes:
            seg = Segment(name=name, shape=tuple(int(d) for d in shape), offset=offset)
            segments.append(seg)
            offset += seg.size
        return cls(segments)

    def __len__(self) -> int:
        return self.values.size

    @property
    def names(self) -> List[str]:
        return [seg.name for seg in self.segments]

    def segment_info(self, name: str) -> Segment:
        if name not in self._index:
            raise DataFormatError(f"Segmento desconocido: {name}")
        return self._index[name]

    def segment(self, name: str) -> np.ndarray:
        """Vista (sin copia) del segmento con su forma"""
        seg = self.segment_info(name)
        return self.values[seg.offset:seg.offset + seg.size].reshape(seg.shape)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(self.segments, values)

    def copy(self) -> "ParamVector":
        return ParamVector(self.segments, self.values.copy())

    def layout(self) -> List[Dict[str, Any]]:
        return [
            {"name": seg.name, "shape": list(seg.shape), "offset": seg.offset}
            for seg in self.segments
        ]

    def to_json(self) -> Dict[str, Any]:
        # float -> repr en json, round-trip exacto
        return {"segments": self.layout(), "values": [float(v) for v in self.values]}

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> "ParamVector":
        try:
            segments = [
                Segment(name=s["name"], shape=tuple(int(d) for d in s["shape"]), offset=int(s["offset"]))
                for s in data["segments"]
            ]
            values = np.array(data["values"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"Vector de parámetros inválido: {e}")
        return cls(segments, values)


def init_params(shapes: Sequence[Tuple[str, Tuple[int, ...]]], rng: np.random.Generator) -> ParamVector:
    """
    Inicializar pesos uniformes en [-1/sqrt(fan_in), 1/sqrt(fan_in)] y biases en cero

    Un segmento 1-D se considera bias; en los 2-D fan_in es la primera dimensión.
    """
    params = ParamVector.from_shapes(shapes)
    for seg in params.segments:
        if len(seg.shape) == 1:
            continue
        bound = 1.0 / np.sqrt(seg.shape[0])
        params.values[seg.offset:seg.offset + seg.size] = rng.uniform(-bound, bound, size=seg.size)
    return params


# ============================================================================
# Especificaciones de redes
# ============================================================================

class MlpSpec(BaseModel):
    """Red feedforward: tanh en capas ocultas, salida afín"""
    name: str = Field(..., description="Prefijo de los segmentos (enc, dec)")
    input_dim: int = Field(..., ge=1)
    output_dim: int = Field(..., ge=1)
    hidden_widths: List[int] = Field(default_factory=list, description="Anchos de las capas ocultas")

    @field_validator('hidden_widths')
    @classmethod
    def validate_widths(cls, v):
        if any(w < 1 for w in v):
            raise ValueError(f"Anchos de capa deben ser >= 1: {v}")
        return v

    def dims(self) -> List[int]:
        return [self.input_dim] + list(self.hidden_widths) + [self.output_dim]

    def param_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        dims = self.dims()
        shapes = []
        for i in range(len(dims) - 1):
            shapes.append((f"{self.name}.W{i}", (dims[i], dims[i + 1])))
            shapes.append((f"{self.name}.b{i}", (dims[i + 1],)))
        return shapes


class LstmSpec(BaseModel):
    """Celda LSTM de una capa; la entrada es (u_k, tau_k)"""
    name: str = Field(default="lstm", description="Prefijo de los segmentos")
    input_dim: int = Field(..., ge=1, description="m + 1 (control más tau)")
    hidden_dim: int = Field(..., ge=1)

    def param_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        # compuertas en columnas: input, forget, candidato, output
        rows = self.input_dim + self.hidden_dim
        return [
            (f"{self.name}.W", (rows, 4 * self.hidden_dim)),
            (f"{self.name}.b", (4 * self.hidden_dim,)),
        ]


@dataclass
class LstmState:
    """Estado (h, c) de la LSTM; arrays o Vars de una cinta"""
    h: Any
    c: Any

    @classmethod
    def zeros(cls, hidden_dim: int) -> "LstmState":
        return cls(np.zeros(hidden_dim), np.zeros(hidden_dim))


# ============================================================================
# Cinta de diferenciación automática
# ============================================================================

class Var:
    """Nodo de la cinta: valor, gradiente acumulado y función de retropropagación"""
    __slots__ = ("value", "grad", "requires_grad", "_backward")

    def __init__(self, value: np.ndarray, requires_grad: bool = False,
                 backward: Optional[Callable[[np.ndarray], None]] = None):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward = backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def _accumulate(var: Var, g: np.ndarray) -> None:
    if var.requires_grad:
        var.grad = g if var.grad is None else var.grad + g


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sumar g sobre los ejes que se expandieron por broadcasting"""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    """
    Cinta que registra operaciones en orden de creación

    Con record=False solo evalúa (no guarda nodos): es el modo de inferencia.
    Una cinta se usa para un único backward.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._nodes: List[Var] = []
        self._params: Dict[Tuple[int, str], Var] = {}

    def __len__(self) -> int:
        return len(self._nodes)

    # --- hojas ---

    def const(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64))

    def as_var(self, x) -> Var:
        return x if isinstance(x, Var) else self.const(x)

    def param(self, params: ParamVector, name: str) -> Var:
        """Hoja asociada a un segmento; la misma Var se reutiliza en toda la cinta"""
        key = (id(params), name)
        var = self._params.get(key)
        if var is None:
            var = Var(params.segment(name), requires_grad=self.record)
            self._params[key] = var
        return var

    def _emit(self, value: np.ndarray, parents: Sequence[Var],
              backward: Callable[[np.ndarray], None]) -> Var:
        needs_grad = self.record and any(p.requires_grad for p in parents)
        out = Var(value, requires_grad=needs_grad)
        if needs_grad:
            out._backward = backward
            self._nodes.append(out)
        return out

    # --- operaciones ---

    def matmul(self, a, b) -> Var:
        a, b = self.as_var(a), self.as_var(b)

        def backward(g):
            if a.requires_grad:
                _accumulate(a, g @ b.value.T)
            if b.requires_grad:
                _accumulate(b, a.value.T @ g)

        return self._emit(a.value @ b.value, (a, b), backward)

    def add(self, a, b) -> Var:
        a, b = self.as_var(a), self.as_var(b)

        def backward(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(g, b.shape))

        return self._emit(a.value + b.value, (a, b), backward)

    def sub(self, a, b) -> Var:
        a, b = self.as_var(a), self.as_var(b)

        def backward(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(-g, b.shape))

        return self._emit(a.value - b.value, (a, b), backward)

    def mul(self, a, b) -> Var:
        a, b = self.as_var(a), self.as_var(b)

        def backward(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g * b.value, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g * a.value, b.shape))

        return self._emit(a.value * b.value, (a, b), backward)

    def tanh(self, a) -> Var:
        a = self.as_var(a)
        y = np.tanh(a.value)

        def backward(g):
            _accumulate(a, g * (1.0 - y * y))

        return self._emit(y, (a,), backward)

    def sigmoid(self, a) -> Var:
        a = self.as_var(a)
        y = expit(a.value)

        def backward(g):
            _accumulate(a, g * y * (1.0 - y))

        return self._emit(y, (a,), backward)

    def slice_cols(self, a, start: int, stop: int) -> Var:
        a = self.as_var(a)

        def backward(g):
            full = np.zeros_like(a.value)
            full[:, start:stop] = g
            _accumulate(a, full)

        return self._emit(a.value[:, start:stop], (a,), backward)

    def concat_cols(self, parts: Sequence) -> Var:
        parts = [self.as_var(p) for p in parts]
        widths = [p.shape[1] for p in parts]
        bounds = np.cumsum([0] + widths)

        def backward(g):
            for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
                if p.requires_grad:
                    _accumulate(p, g[:, lo:hi])

        return self._emit(np.concatenate([p.value for p in parts], axis=1), parts, backward)

    def stack(self, parts: Sequence) -> Var:
        parts = [self.as_var(p) for p in parts]

        def backward(g):
            for i, p in enumerate(parts):
                if p.requires_grad:
                    _accumulate(p, g[i])

        return self._emit(np.stack([p.value for p in parts], axis=0), parts, backward)

    def take(self, a, index) -> Var:
        """Indexado avanzado (gather); el backward usa np.add.at para índices repetidos"""
        a = self.as_var(a)

        def backward(g):
            full = np.zeros_like(a.value)
            np.add.at(full, index, g)
            _accumulate(a, full)

        return self._emit(a.value[index], (a,), backward)

    def weighted_sq_error(self, pred, target, weights) -> Var:
        """sum_j w_j * ||pred_j - target_j||^2 (escalar)"""
        pred = self.as_var(pred)
        target = np.asarray(target, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64)
        diff = pred.value - target
        value = np.array(np.sum(weights * np.sum(diff * diff, axis=1)))

        def backward(g):
            _accumulate(pred, 2.0 * g * weights[:, None] * diff)

        return self._emit(value, (pred,), backward)

    # --- retropropagación ---

    def backward(self, out: Var, seed: float = 1.0) -> None:
        """Propagar el gradiente de una salida escalar hacia todas las hojas"""
        if not self.record:
            raise ValueError("La cinta no registra operaciones (record=False)")
        if np.ndim(seed) != 0 or out.value.size != 1:
            raise ValueError("backward requiere una salida escalar y una semilla escalar")
        out.grad = np.full(out.value.shape, float(seed))
        for node in reversed(self._nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)

    def gradient(self, params: ParamVector) -> np.ndarray:
        """Gradiente plano con el layout de params (cero donde no hubo dependencia)"""
        flat = np.zeros(len(params))
        for (owner, name), var in self._params.items():
            if owner != id(params) or var.grad is None:
                continue
            seg = params.segment_info(name)
            flat[seg.offset:seg.offset + seg.size] += var.grad.ravel()
        return flat


def backward(tape: Tape, loss: Var, params: ParamVector, seed: float = 1.0) -> np.ndarray:
    """Gradiente del escalar loss respecto de todos los parámetros"""
    tape.backward(loss, seed)
    return tape.gradient(params)


# ============================================================================
# Capas
# ============================================================================

def _as_batch(tape: Tape, x) -> Tuple[Var, bool]:
    if isinstance(x, Var):
        if x.value.ndim != 2:
            raise ShapeError(f"Se esperaba un batch 2-D, llegó shape {x.value.shape}")
        return x, False
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return tape.const(arr[None, :]), True
    if arr.ndim != 2:
        raise ShapeError(f"Entrada con shape inválida: {arr.shape}")
    return tape.const(arr), False


def mlp_forward(spec: MlpSpec, params: ParamVector, x, tape: Optional[Tape] = None):
    """
    Evaluar la red feedforward

    Sin tape devuelve un array (1-D si x es 1-D); con tape devuelve una Var.
    """
    own = tape is None
    if own:
        tape = Tape(record=False)
    h, single = _as_batch(tape, x)
    if h.shape[1] != spec.input_dim:
        raise ShapeError(f"{spec.name}: entrada de dimensión {h.shape[1]}, esperada {spec.input_dim}")

    n_hidden = len(spec.hidden_widths)
    for i in range(n_hidden + 1):
        h = tape.add(
            tape.matmul(h, tape.param(params, f"{spec.name}.W{i}")),
            tape.param(params, f"{spec.name}.b{i}"),
        )
        if i < n_hidden:
            h = tape.tanh(h)

    if not own:
        return h
    return h.value[0] if single else h.value


def lstm_step(spec: LstmSpec, params: ParamVector, inputs, state: LstmState,
              tape: Optional[Tape] = None) -> LstmState:
    """
    Un paso de la celda LSTM (sin peepholes)

    i, f, o = sigmoid(.), candidato = tanh(.), c' = f*c + i*g, h' = o*tanh(c')
    """
    own = tape is None
    if own:
        tape = Tape(record=False)
    x, single = _as_batch(tape, inputs)
    h, _ = _as_batch(tape, state.h)
    c, _ = _as_batch(tape, state.c)

    H = spec.hidden_dim
    if x.shape[1] != spec.input_dim:
        raise ShapeError(f"{spec.name}: entrada de dimensión {x.shape[1]}, esperada {spec.input_dim}")
    if h.shape[1] != H or c.shape[1] != H:
        raise ShapeError(f"{spec.name}: estado con dimensión distinta de {H}")
    if not (x.shape[0] == h.shape[0] == c.shape[0]):
        raise ShapeError(f"{spec.name}: filas de entrada y estado no coinciden")

    z = tape.add(
        tape.matmul(tape.concat_cols([x, h]), tape.param(params, f"{spec.name}.W")),
        tape.param(params, f"{spec.name}.b"),
    )
    gate_i = tape.sigmoid(tape.slice_cols(z, 0, H))
    gate_f = tape.sigmoid(tape.slice_cols(z, H, 2 * H))
    cand = tape.tanh(tape.slice_cols(z, 2 * H, 3 * H))
    gate_o = tape.sigmoid(tape.slice_cols(z, 3 * H, 4 * H))

    c_new = tape.add(tape.mul(gate_f, c), tape.mul(gate_i, cand))
    h_new = tape.mul(gate_o, tape.tanh(c_new))

    if not own:
        return LstmState(h_new, c_new)
    if single:
        return LstmState(h_new.value[0], c_new.value[0])
    return LstmState(h_new.value, c_new.value)


# ============================================================================
# Adam
# ============================================================================

@dataclass
class AdamState:
    """Momentos de Adam, contador de pasos y learning rate actual"""
    m: np.ndarray
    v: np.ndarray
    lr: float
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def to_json(self) -> Dict[str, Any]:
        return {
            "m": [float(x) for x in self.m],
            "v": [float(x) for x in self.v],
            "lr": self.lr,
            "t": self.t,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> "AdamState":
        try:
            return cls(
                m=np.array(data["m"], dtype=np.float64),
                v=np.array(data["v"], dtype=np.float64),
                lr=float(data["lr"]),
                t=int(data["t"]),
                beta1=float(data["beta1"]),
                beta2=float(data["beta2"]),
                eps=float(data["eps"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"Estado de Adam inválido: {e}")


def adam_step(state: AdamState, params: ParamVector, grad: np.ndarray) -> Tuple[ParamVector, AdamState]:
    """Un paso de Adam con corrección de sesgo; devuelve copias nuevas"""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (len(params),) or state.m.shape != grad.shape or state.v.shape != grad.shape:
        raise ShapeError(
            f"Gradiente de shape {grad.shape} no coincide con {len(params)} parámetros"
        )
    if not np.all(np.isfinite(grad)):
        raise TrainingDivergenceError("Gradiente no finito (NaN/inf) en adam_step")
    if not state.lr > 0:
        raise ValueError(f"Learning rate debe ser > 0: {state.lr}")

    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    values = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)

    new_state = AdamState(m=m, v=v, lr=state.lr, t=t, beta1=state.beta1,
                          beta2=state.beta2, eps=state.eps)
    return params.with_values(values), new_state
