"""
Simulación de trayectorias (ground truth)
Integración RK45 (Dormand-Prince) de Van der Pol y FitzHugh-Nagumo con
entradas constantes por tramos. El integrador se reinicia en cada frontera
de control kΔ, así ningún paso cruza una discontinuidad de la entrada.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field
from scipy.integrate import solve_ivp

from .errors import ConfigError, SignalExhaustedError, StiffnessError


# ============================================================================
# Señales constantes por tramos
# ============================================================================

def interval_index(t, delta: float):
    """
    Índice (base 0) del intervalo [kΔ, (k+1)Δ) que contiene a t

    Se corrige el redondeo de t/Δ para que las fronteras coincidan con k*delta.
    Acepta escalares o arrays.
    """
    t = np.asarray(t, dtype=np.float64)
    k = np.floor(t / delta)
    k = np.where((k + 1.0) * delta <= t, k + 1.0, k)
    k = np.where(k * delta > t, k - 1.0, k)
    k = k.astype(np.int64)
    return int(k) if k.ndim == 0 else k


@dataclass(frozen=True)
class PwcSignal:
    """Entrada constante por tramos: u(t) = u_k para (k-1)Δ <= t < kΔ"""
    delta: float
    values: np.ndarray

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"El período Δ debe ser > 0: {self.delta}")
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] == 0:
            raise ValueError(f"Valores de señal con shape inválida: {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def input_dim(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def horizon(self) -> float:
        """Último instante en que la señal está definida (extremo derecho abierto)"""
        return len(self) * self.delta


def pwc_eval(signal: PwcSignal, t: float) -> np.ndarray:
    """Valor de la señal en t (intervalos abiertos a derecha)"""
    if t < 0:
        raise ValueError(f"Instante negativo: {t}")
    k = interval_index(t, signal.delta)
    if k >= len(signal):
        raise SignalExhaustedError(
            f"La señal cubre {len(signal)} períodos, se pidió t={t} (período {k + 1})"
        )
    return signal.values[k]


def samples_to_cover(horizon: float, delta: float) -> int:
    """Cantidad de valores para que t = horizon sea consultable (ceil(T/Δ) + 1)"""
    return max(int(math.ceil(horizon / delta)), interval_index(horizon, delta)) + 1


# ============================================================================
# Sistemas
# ============================================================================

def vdp_rhs(x: np.ndarray, u, mu: float = 1.0) -> np.ndarray:
    """Van der Pol forzado: [x2, -x1 + (1 - x1^2) mu x2 + u]"""
    u = float(np.ravel(u)[0])
    return np.array([x[1], -x[0] + (1.0 - x[0] ** 2) * mu * x[1] + u])


def fhn_rhs(x: np.ndarray, u, eta: float = 1.0 / 50.0, gamma: float = 40.0,
            a: float = 0.3, b: float = 1.4) -> np.ndarray:
    """FitzHugh-Nagumo: eta x1' = x1 - x1^3 - x2 + u, eta gamma x2' = x1 + a - b x2"""
    u = float(np.ravel(u)[0])
    return np.array([
        (x[0] - x[0] ** 3 - x[1] + u) / eta,
        (x[0] + a - b * x[1]) / (eta * gamma),
    ])


def decay_rhs(x: np.ndarray, u) -> np.ndarray:
    """Sistema de prueba x' = -x (la entrada se ignora)"""
    return -np.asarray(x, dtype=np.float64)


def harmonic_rhs(x: np.ndarray, u) -> np.ndarray:
    """Oscilador armónico de prueba: x1' = x2, x2' = -x1"""
    return np.array([x[1], -x[0]])


@dataclass(frozen=True)
class SystemDef:
    """Sistema de control invariante en el tiempo: x' = f(x, u)"""
    name: str
    state_dim: int
    input_dim: int
    rhs: Callable[[np.ndarray, np.ndarray], np.ndarray]
    params: Dict[str, float] = field(default_factory=dict)


_REGISTRY = {
    # nombre: (función, n, m, parámetros por defecto)
    "vdp": (vdp_rhs, 2, 1, {"mu": 1.0}),
    "fhn": (fhn_rhs, 2, 1, {"eta": 1.0 / 50.0, "gamma": 40.0, "a": 0.3, "b": 1.4}),
    "decay": (decay_rhs, 1, 1, {}),
    "harmonic": (harmonic_rhs, 2, 1, {}),
}


def available_systems() -> Sequence[str]:
    return sorted(_REGISTRY)


def get_system(name: str, **overrides: float) -> SystemDef:
    """Buscar un sistema registrado y aplicar overrides de parámetros"""
    if name not in _REGISTRY:
        raise ConfigError(
            f"Sistema desconocido: {name}. Debe ser uno de {', '.join(available_systems())}"
        )
    fn, n, m, defaults = _REGISTRY[name]
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise ConfigError(f"Parámetros desconocidos para '{name}': {sorted(unknown)}")
    params = {**defaults, **{k: float(v) for k, v in overrides.items()}}
    if name == "fhn" and not (params["eta"] > 0 and params["gamma"] > 0):
        raise ConfigError("FHN requiere eta > 0 y gamma > 0")
    rhs = partial(fn, **params) if params else fn
    return SystemDef(name=name, state_dim=n, input_dim=m, rhs=rhs, params=params)


# ============================================================================
# Integración
# ============================================================================

class SolverConfig(BaseModel):
    """Tolerancias del integrador RK45"""
    rel_tol: float = Field(default=1e-6, gt=0)
    abs_tol: float = Field(default=1e-8, gt=0)
    max_step: Optional[float] = Field(default=None, gt=0, description="Paso máximo (None = sin límite)")
    first_step: Optional[float] = Field(default=None, gt=0, description="None = heurística de scipy")


@dataclass
class DenseTrajectory:
    """Estados del sistema en los instantes consultados"""
    times: np.ndarray
    states: np.ndarray
    x0: np.ndarray
    signal: PwcSignal


def _advance(system: SystemDef, x: np.ndarray, u: np.ndarray, t0: float, t1: float,
             cfg: SolverConfig, t_eval: Optional[np.ndarray] = None):
    """Integrar con entrada constante en [t0, t1]"""
    span = t1 - t0
    first_step = cfg.first_step if cfg.first_step is not None and cfg.first_step <= span else None
    sol = solve_ivp(
        lambda t, y: system.rhs(y, u),
        (t0, t1),
        x,
        method="RK45",
        t_eval=t_eval,
        rtol=cfg.rel_tol,
        atol=cfg.abs_tol,
        max_step=cfg.max_step if cfg.max_step is not None else np.inf,
        first_step=first_step,
    )
    if not sol.success:
        raise StiffnessError(f"{system.name}: el integrador falló en [{t0}, {t1}]: {sol.message}")
    return sol


def _check_inputs(system: SystemDef, x0, signal: PwcSignal, t_end: float) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    if x0.size != system.state_dim:
        raise ValueError(f"{system.name}: x0 de dimensión {x0.size}, esperada {system.state_dim}")
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 no es finito")
    if signal.input_dim != system.input_dim:
        raise ValueError(f"{system.name}: señal de dimensión {signal.input_dim}, esperada {system.input_dim}")
    if t_end > signal.horizon:
        raise SignalExhaustedError(
            f"La señal cubre hasta t={signal.horizon}, se pidió integrar hasta t={t_end}"
        )
    return x0


def integrate(system: SystemDef, x0, signal: PwcSignal, times: Sequence[float],
              cfg: Optional[SolverConfig] = None, t0: float = 0.0) -> DenseTrajectory:
    """
    Integrar exactamente hasta cada instante pedido

    Los tramos de integración se cortan en cada frontera kΔ y en cada instante
    consultado; así el estado en cada t sale del paso final del integrador y no
    de una interpolación. t0 permite encadenar llamadas.
    """
    cfg = cfg or SolverConfig()
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1:
        raise ValueError("times debe ser 1-D")
    if times.size and (times[0] < t0 or np.any(np.diff(times) < 0)):
        raise ValueError("times debe estar ordenado y ser >= t0")
    t_end = float(times[-1]) if times.size else t0
    x = _check_inputs(system, x0, signal, t_end)
    x_start = x.copy()

    delta = signal.delta
    states = np.empty((times.size, system.state_dim))
    t = float(t0)
    for i, q in enumerate(times):
        q = float(q)
        while t < q:
            k = interval_index(t, delta)
            stop = min(q, (k + 1) * delta)
            x = _advance(system, x, signal.values[k], t, stop, cfg).y[:, -1]
            t = stop
        states[i] = x

    return DenseTrajectory(times=times, states=states, x0=x_start, signal=signal)


def integrate_grid(system: SystemDef, x0, signal: PwcSignal, t_end: float, spacing: float,
                   cfg: Optional[SolverConfig] = None) -> DenseTrajectory:
    """
    Trayectoria en una grilla uniforme 0, spacing, ..., <= t_end

    Un solve_ivp por intervalo de control con salida densa en los puntos de la
    grilla; es la verdad de referencia para curvas de loss y estudios largos.
    """
    cfg = cfg or SolverConfig()
    if not spacing > 0:
        raise ValueError(f"spacing debe ser > 0: {spacing}")
    n_points = int(math.floor(t_end / spacing + 1e-9)) + 1
    grid = np.arange(n_points) * spacing
    x = _check_inputs(system, x0, signal, float(grid[-1]))
    x_start = x.copy()

    delta = signal.delta
    states = np.empty((n_points, system.state_dim))
    states[0] = x
    k_of = interval_index(grid, delta)
    last_k = int(k_of[-1])
    for k in range(last_k + 1):
        lo, hi = k * delta, min((k + 1) * delta, float(grid[-1]))
        if hi <= lo:
            break
        inside = np.nonzero((k_of == k) & (grid > lo))[0]
        t_eval = np.append(grid[inside], hi) if not inside.size or grid[inside[-1]] < hi else grid[inside]
        sol = _advance(system, x, signal.values[k], lo, hi, cfg, t_eval=t_eval)
        states[inside] = sol.y[:, :inside.size].T
        x = sol.y[:, -1]
        # puntos exactamente en la frontera (k+1)Δ pertenecen al intervalo siguiente
        on_edge = np.nonzero((k_of == k + 1) & (grid == hi))[0]
        states[on_edge] = x

    return DenseTrajectory(times=grid, states=states, x0=x_start, signal=signal)
