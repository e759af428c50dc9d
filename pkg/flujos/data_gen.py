"""
Generación de datasets
Condiciones iniciales, señales de entrada y tiempos de muestreo según las
distribuciones de los experimentos; integración, ruido de medición, splits
por trayectoria y persistencia en disco (manifest JSON + CSVs).
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from .errors import ConfigError, DataFormatError, StiffnessError
from .ode_sim import PwcSignal, SolverConfig, get_system, integrate, samples_to_cover

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")
INPUT_KINDS = ("vdp_square", "fhn_steps", "sine")
DEFAULT_HOLD = {"vdp_square": 5, "fhn_steps": 40, "sine": 1}


# ============================================================================
# Configuración
# ============================================================================

class InputDistribution(BaseModel):
    """Distribución de señales de entrada constantes por tramos"""
    model_config = {"extra": "forbid"}

    kind: str = Field(..., description="vdp_square, fhn_steps o sine")
    delta: float = Field(..., gt=0, description="Período de control Δ")
    hold: Optional[int] = Field(None, ge=1, description="Períodos por bloque (default según kind)")

    # vdp_square: amplitudes N(0, amplitude_std)
    amplitude_std: float = Field(default=5.0, gt=0)
    # fhn_steps: amplitudes LogNormal(log_mu, log_sigma)
    log_mu: float = Field(default=math.log(0.2))
    log_sigma: float = Field(default=0.5, gt=0)
    # sine: A ~ LogNormal(amp_log_mu, amp_log_sigma), Omega ~ Uniform(0, omega_max)
    amp_log_mu: float = Field(default=0.0)
    amp_log_sigma: float = Field(default=1.0, gt=0)
    omega_max: float = Field(default=2.0 * math.pi, gt=0)
    amplitude: Optional[float] = Field(None, description="Fijar A en lugar de muestrearla")
    omega: Optional[float] = Field(None, description="Fijar Omega en lugar de muestrearla")

    @field_validator('kind')
    @classmethod
    def validate_kind(cls, v):
        if v not in INPUT_KINDS:
            raise ValueError(f"Tipo de entrada no válido: {v}. Debe ser {', '.join(INPUT_KINDS)}")
        return v

    @property
    def block(self) -> int:
        return self.hold if self.hold is not None else DEFAULT_HOLD.get(self.kind, 1)


class DatasetConfig(BaseModel):
    """Protocolo de generación de un dataset"""
    model_config = {"extra": "forbid"}

    system: str = Field(..., description="Nombre del sistema registrado (vdp, fhn, ...)")
    system_params: Dict[str, float] = Field(default_factory=dict)
    n_traj: int = Field(..., ge=1, description="N trayectorias")
    n_samples: int = Field(..., ge=1, description="K muestras por trayectoria")
    horizon: float = Field(..., gt=0, description="T")
    delta: float = Field(..., gt=0, description="Δ")
    noise_std: float = Field(default=0.0, ge=0)
    split_fractions: Tuple[float, float, float] = Field(default=(0.6, 0.2, 0.2))
    seed: int = Field(default=0, ge=0)
    max_retries: int = Field(default=3, ge=0)
    input: InputDistribution
    solver: SolverConfig = Field(default_factory=SolverConfig)

    @field_validator('split_fractions')
    @classmethod
    def validate_fractions(cls, v):
        if any(f < 0 for f in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f"Las fracciones de split deben ser >= 0 y sumar 1: {v}")
        return v

    @model_validator(mode="after")
    def validate_consistency(self):
        if not self.horizon > self.delta:
            raise ValueError(f"Se requiere T > Δ (T={self.horizon}, Δ={self.delta})")
        if abs(self.input.delta - self.delta) > 1e-12:
            raise ValueError(f"Δ de la entrada ({self.input.delta}) distinto de Δ del dataset ({self.delta})")
        return self


# ============================================================================
# Muestreo
# ============================================================================

def trajectory_rng(seed: int, traj_id: int, attempt: int = 0) -> np.random.Generator:
    """Stream independiente por trayectoria: serial y paralelo dan lo mismo"""
    return np.random.default_rng([seed, traj_id, attempt])


def sample_initial(rng: np.random.Generator, n: int = 2) -> np.ndarray:
    """x(0) ~ N(0, I)"""
    return rng.standard_normal(n)


def sample_input(dist: InputDistribution, horizon: float, rng: np.random.Generator,
                 input_dim: int = 1) -> PwcSignal:
    """
    Muestrear una señal que cubra [0, horizon]

    vdp_square: bloques de `hold` valores iguales ~ N(0, amplitude_std)
    fhn_steps:  bloques de `hold` valores iguales ~ LogNormal(log_mu, log_sigma)
    sine:       u_k = A sin(Omega k Δ), A y Omega una vez por señal
    """
    length = samples_to_cover(horizon, dist.delta)
    hold = dist.block
    n_blocks = -(-length // hold)

    if dist.kind == "vdp_square":
        amps = rng.normal(0.0, dist.amplitude_std, size=(n_blocks, input_dim))
        values = np.repeat(amps, hold, axis=0)[:length]
    elif dist.kind == "fhn_steps":
        amps = rng.lognormal(dist.log_mu, dist.log_sigma, size=(n_blocks, input_dim))
        values = np.repeat(amps, hold, axis=0)[:length]
    elif dist.kind == "sine":
        amp = dist.amplitude if dist.amplitude is not None else rng.lognormal(dist.amp_log_mu, dist.amp_log_sigma)
        omega = dist.omega if dist.omega is not None else rng.uniform(0.0, dist.omega_max)
        k = np.arange(1, length + 1)
        column = amp * np.sin(omega * k * dist.delta)
        values = np.repeat(column[:, None], input_dim, axis=1)
        if hold > 1:
            values = np.repeat(values[::hold], hold, axis=0)[:length]
    else:
        raise ConfigError(f"Tipo de entrada desconocido: {dist.kind}")

    return PwcSignal(delta=dist.delta, values=values)


def latin_hypercube_times(n_samples: int, horizon: float, rng: np.random.Generator) -> np.ndarray:
    """Un punto uniforme en cada estrato [(k-1)T/K, kT/K), ordenados"""
    if n_samples < 1 or not horizon > 0:
        raise ValueError(f"Se requiere K >= 1 y T > 0 (K={n_samples}, T={horizon})")
    times = (np.arange(n_samples) + rng.uniform(size=n_samples)) * (horizon / n_samples)
    return np.minimum(times, np.nextafter(horizon, 0.0))


# ============================================================================
# Dataset
# ============================================================================

@dataclass
class TrajectoryRecord:
    """Una trayectoria medida: x0, entrada, tiempos y mediciones con ruido"""
    traj_id: int
    x0: np.ndarray
    inputs: np.ndarray
    times: np.ndarray
    measurements: np.ndarray
    split: str = "train"

    def signal(self, delta: float) -> PwcSignal:
        return PwcSignal(delta=delta, values=self.inputs)


@dataclass
class Dataset:
    """Trayectorias + configuración que las generó"""
    config: DatasetConfig
    records: List[TrajectoryRecord]
    created_at: str = field(default_factory=lambda: datetime.now().isoformat())
    retries: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def delta(self) -> float:
        return self.config.delta

    @property
    def state_dim(self) -> int:
        return int(self.records[0].x0.size)

    @property
    def input_dim(self) -> int:
        return int(self.records[0].inputs.shape[1])

    def split_records(self, name: str) -> List[TrajectoryRecord]:
        if name not in SPLITS:
            raise ValueError(f"Split desconocido: {name}")
        return [r for r in self.records if r.split == name]

    def split_counts(self) -> Dict[str, int]:
        return {name: len(self.split_records(name)) for name in SPLITS}


def iter_split(dataset: Dataset, name: str) -> Iterator[TrajectoryRecord]:
    """Recorrer las trayectorias de un split en orden de traj_id"""
    yield from sorted(dataset.split_records(name), key=lambda r: r.traj_id)


def split_sizes(n: int, fractions: Tuple[float, float, float]) -> Tuple[int, int, int]:
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def assign_splits(n: int, fractions: Tuple[float, float, float], seed: int) -> List[str]:
    """Partición aleatoria de ids de trayectoria (trayectorias enteras, no muestras)"""
    n_train, n_val, _ = split_sizes(n, fractions)
    order = np.random.default_rng([seed]).permutation(n)
    labels = [""] * n
    for rank, traj_id in enumerate(order):
        if rank < n_train:
            labels[traj_id] = "train"
        elif rank < n_train + n_val:
            labels[traj_id] = "val"
        else:
            labels[traj_id] = "test"
    return labels


def generate_trajectory(cfg: DatasetConfig, traj_id: int) -> Tuple[TrajectoryRecord, List[Dict[str, Any]]]:
    """Generar una trayectoria, redibujando si el integrador falla"""
    system = get_system(cfg.system, **cfg.system_params)
    retries = []
    for attempt in range(cfg.max_retries + 1):
        rng = trajectory_rng(cfg.seed, traj_id, attempt)
        x0 = sample_initial(rng, system.state_dim)
        signal = sample_input(cfg.input, cfg.horizon, rng, system.input_dim)
        times = latin_hypercube_times(cfg.n_samples, cfg.horizon, rng)
        try:
            traj = integrate(system, x0, signal, times, cfg.solver)
        except StiffnessError as e:
            retries.append({"traj_id": traj_id, "attempt": attempt, "error": str(e)})
            continue
        noise = rng.normal(0.0, cfg.noise_std, size=traj.states.shape) if cfg.noise_std > 0 else 0.0
        record = TrajectoryRecord(
            traj_id=traj_id,
            x0=x0,
            inputs=signal.values,
            times=times,
            measurements=traj.states + noise,
        )
        return record, retries
    raise StiffnessError(
        f"Trayectoria {traj_id}: {cfg.max_retries + 1} intentos fallidos, abortando"
    )


def generate_dataset(cfg: DatasetConfig, workers: int = 1, verbose: bool = False) -> Dataset:
    """
    Generar N trayectorias con mediciones ruidosas y asignar splits

    Cada trayectoria usa su propio RNG derivado de (seed, traj_id), así que el
    resultado no depende de `workers`.
    """
    get_system(cfg.system, **cfg.system_params)  # falla temprano si no existe

    if verbose:
        print(f"🔄 Generando {cfg.n_traj} trayectorias de '{cfg.system}' en [0, {cfg.horizon}]...")

    ids = list(range(cfg.n_traj))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(generate_trajectory, [cfg] * len(ids), ids))
    else:
        results = []
        for traj_id in ids:
            results.append(generate_trajectory(cfg, traj_id))
            if verbose and ((traj_id + 1) % 10 == 0 or traj_id + 1 == cfg.n_traj):
                print(f"   Progreso: {traj_id + 1}/{cfg.n_traj}")

    labels = assign_splits(cfg.n_traj, cfg.split_fractions, cfg.seed)
    records, retries = [], []
    for (record, failed), label in zip(results, labels):
        record.split = label
        records.append(record)
        retries.extend(failed)

    for r in retries:
        print(f"⚠️  Trayectoria {r['traj_id']} redibujada (intento {r['attempt']}): {r['error']}")

    dataset = Dataset(config=cfg, records=records, retries=retries)
    if verbose:
        counts = dataset.split_counts()
        print(f"✅ Dataset listo: {counts['train']}/{counts['val']}/{counts['test']} (train/val/test)")
    return dataset


# ============================================================================
# Persistencia
# ============================================================================

def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(dataset: Dataset, path) -> Path:
    """
    Guardar en un directorio:
      manifest.json, measurements.csv, inputs.csv, initial_states.csv, splits.csv
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, m = dataset.state_dim, dataset.input_dim

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "created_at": dataset.created_at,
        "config": dataset.config.model_dump(mode="json"),
        "n_traj": len(dataset.records),
        "samples_per_traj": {str(r.traj_id): int(r.times.size) for r in dataset.records},
        "inputs_per_traj": {str(r.traj_id): int(r.inputs.shape[0]) for r in dataset.records},
        "state_dim": n,
        "input_dim": m,
        "split_counts": dataset.split_counts(),
        "retries": dataset.retries,
    }
    with open(path / "manifest.json", 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, allow_nan=False)

    with open(path / "measurements.csv", 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(["traj_id", "t"] + [f"xhat_{i + 1}" for i in range(n)])
        for r in dataset.records:
            for t, row in zip(r.times, r.measurements):
                writer.writerow([r.traj_id, _fmt(t)] + [_fmt(v) for v in row])

    with open(path / "inputs.csv", 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(["traj_id", "k"] + [f"u_{i + 1}" for i in range(m)])
        for r in dataset.records:
            for k, row in enumerate(r.inputs, 1):
                writer.writerow([r.traj_id, k] + [_fmt(v) for v in row])

    with open(path / "initial_states.csv", 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(["traj_id"] + [f"x_{i + 1}" for i in range(n)])
        for r in dataset.records:
            writer.writerow([r.traj_id] + [_fmt(v) for v in r.x0])

    with open(path / "splits.csv", 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(["traj_id", "split"])
        for r in dataset.records:
            writer.writerow([r.traj_id, r.split])

    return path


def _read_rows(path: Path, width: int) -> Dict[int, List[List[float]]]:
    """Leer un CSV agrupando filas por traj_id; valida el ancho de cada fila"""
    rows: Dict[int, List[List[float]]] = {}
    with open(path, 'r', encoding='utf-8') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or len(header) != width:
            raise DataFormatError(f"{path.name}: encabezado inválido")
        for line_no, row in enumerate(reader, 2):
            if len(row) != width:
                raise DataFormatError(f"{path.name}:{line_no}: fila truncada o con columnas extra")
            try:
                rows.setdefault(int(row[0]), []).append([float(v) for v in row[1:]])
            except ValueError as e:
                raise DataFormatError(f"{path.name}:{line_no}: valor inválido ({e})")
    return rows


def load_dataset(path) -> Dataset:
    """Cargar un dataset guardado con save_dataset (valida consistencia)"""
    path = Path(path)
    try:
        with open(path / "manifest.json", 'r', encoding='utf-8') as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise DataFormatError(f"No existe {path / 'manifest.json'}")
    except json.JSONDecodeError as e:
        raise DataFormatError(f"manifest.json corrupto: {e}")

    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DataFormatError(
            f"Versión de schema {manifest.get('schema_version')} no soportada (esperada {SCHEMA_VERSION})"
        )

    try:
        config = DatasetConfig.model_validate(manifest["config"])
        n, m, n_traj = int(manifest["state_dim"]), int(manifest["input_dim"]), int(manifest["n_traj"])
        samples_per_traj = {int(k): int(v) for k, v in manifest["samples_per_traj"].items()}
        inputs_per_traj = {int(k): int(v) for k, v in manifest["inputs_per_traj"].items()}
    except Exception as e:
        raise DataFormatError(f"manifest.json inválido: {e}")

    try:
        measurements = _read_rows(path / "measurements.csv", 2 + n)
        inputs = _read_rows(path / "inputs.csv", 2 + m)
        initial = _read_rows(path / "initial_states.csv", 1 + n)
        with open(path / "splits.csv", 'r', encoding='utf-8') as f:
            splits = {int(row["traj_id"]): row["split"] for row in csv.DictReader(f)}
    except FileNotFoundError as e:
        raise DataFormatError(f"Falta un archivo del dataset: {e.filename}")
    except (KeyError, ValueError) as e:
        raise DataFormatError(f"splits.csv inválido: {e}")

    ids = sorted(samples_per_traj)
    for name, table in (("measurements", measurements), ("inputs", inputs),
                        ("initial_states", initial), ("splits", splits)):
        if len(table) != n_traj or sorted(table) != ids:
            raise DataFormatError(
                f"{name}: {len(table)} trayectorias, el manifest declara {n_traj}"
            )

    records = []
    for traj_id in ids:
        meas = np.array(measurements[traj_id])
        inp = np.array(inputs[traj_id])
        if meas.shape[0] != samples_per_traj[traj_id] or inp.shape[0] != inputs_per_traj[traj_id]:
            raise DataFormatError(f"Trayectoria {traj_id}: cantidad de filas distinta a la del manifest")
        if splits[traj_id] not in SPLITS:
            raise DataFormatError(f"Trayectoria {traj_id}: split inválido '{splits[traj_id]}'")
        # inputs.csv guarda k 1-based en la primera columna
        records.append(TrajectoryRecord(
            traj_id=traj_id,
            x0=np.array(initial[traj_id][0]),
            inputs=inp[:, 1:],
            times=meas[:, 0],
            measurements=meas[:, 1:],
            split=splits[traj_id],
        ))

    return Dataset(
        config=config,
        records=records,
        created_at=manifest.get("created_at", ""),
        retries=manifest.get("retries", []),
    )
