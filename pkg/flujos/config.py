"""
Configuración de experimentos
Defaults por sistema (protocolos de VdP y FHN) + archivo YAML + flags del CLI,
en ese orden de precedencia.
"""
from __future__ import annotations

import copy
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .data_gen import DatasetConfig, InputDistribution
from .errors import ConfigError
from .flow_model import ModelConfig
from .trainer import TrainConfig


class StudyConfig(BaseModel):
    """Estudios sobre trayectorias nuevas (horizonte, distribución de entrada, trazas)"""
    model_config = {"extra": "forbid"}

    t_grid: List[float] = Field(..., description="Horizontes t donde se estima ℓ_t")
    n_traj: int = Field(default=100, ge=1, description="Trayectorias nuevas por estimación")
    alt_input: Optional[InputDistribution] = Field(None, description="Q_u para input-dist-study")
    trace_horizon: float = Field(..., gt=0, description="Horizonte de las trazas de eval")
    n_traces: int = Field(default=3, ge=0)
    shared_draws: bool = Field(default=True, description="Una simulación por trayectoria para todo t_grid")
    spacing: Optional[float] = Field(None, gt=0, description="Grilla densa (default Δ/10)")
    seed_offset: int = Field(default=1_000_000, ge=1, description="Separa los sorteos de evaluación de los del dataset")

    @field_validator('t_grid')
    @classmethod
    def validate_grid(cls, v):
        if not v or any(t <= 0 for t in v):
            raise ValueError(f"t_grid debe ser no vacío y positivo: {v}")
        return sorted(v)


class ExcitabilityConfig(BaseModel):
    """Escalera de amplitudes y criterio de spikes para FHN"""
    model_config = {"extra": "forbid"}

    x0: List[float] = Field(..., description="Estado inicial (reposo superior)")
    schedule: List[float] = Field(..., description="Amplitudes de la escalera")
    hold_blocks: int = Field(default=2, ge=1, description="Bloques de `block` períodos por escalón")
    block: int = Field(default=40, ge=1, description="Períodos Δ por bloque")
    threshold: float = Field(default=0.8, description="Umbral sobre x1")
    min_separation: float = Field(default=0.3, ge=0, description="Separación mínima entre spikes")
    spacing: Optional[float] = Field(None, gt=0, description="Grilla densa (default Δ/10)")
    sweep_amplitudes: List[float] = Field(
        default_factory=lambda: [round(0.05 + 0.01 * i, 2) for i in range(36)],
        description="Amplitudes constantes para sweep",
    )
    sweep_horizon: float = Field(default=40.0, gt=0)

    @field_validator('schedule')
    @classmethod
    def validate_schedule(cls, v):
        if not v:
            raise ValueError("La escalera necesita al menos un escalón")
        return v


class ExperimentConfig(BaseModel):
    """Contenido completo de un archivo de configuración"""
    model_config = {"extra": "forbid"}

    system: str
    seed: int = Field(default=0, ge=0)
    out_dir: str = Field(..., description="Directorio raíz de artefactos")
    workers: int = Field(default=1, ge=1, description="Procesos para generar datasets")
    dataset: DatasetConfig
    model: ModelConfig
    train: TrainConfig
    study: StudyConfig
    excitability: Optional[ExcitabilityConfig] = None

    @model_validator(mode="after")
    def validate_system(self):
        if self.dataset.system != self.system:
            raise ValueError(f"dataset.system ({self.dataset.system}) distinto de system ({self.system})")
        return self


# ============================================================================
# Defaults por sistema
# ============================================================================

def _vdp_defaults() -> Dict[str, Any]:
    return {
        "dataset": {
            "system": "vdp", "n_traj": 30, "n_samples": 200, "horizon": 15.0, "delta": 0.2,
            "noise_std": 0.1, "input": {"kind": "vdp_square"},
        },
        "model": {"hidden_dim": 8, "encoder_widths": [96, 96], "decoder_widths": [48, 48]},
        "train": {"initial_lr": 1e-2},
        "study": {
            "t_grid": [float(t) for t in range(15, 101, 5)], "n_traj": 100,
            "alt_input": {"kind": "sine"}, "trace_horizon": 15.0,
        },
    }


def _fhn_defaults() -> Dict[str, Any]:
    return {
        "dataset": {
            "system": "fhn", "n_traj": 300, "n_samples": 300, "horizon": 20.0, "delta": 0.1,
            "noise_std": 0.05, "input": {"kind": "fhn_steps"},
        },
        "model": {"hidden_dim": 16, "encoder_widths": [64, 64], "decoder_widths": [32, 32]},
        "train": {"initial_lr": 2e-2},
        "study": {
            "t_grid": [20.0, 25.0, 30.0, 35.0, 40.0], "n_traj": 100,
            "alt_input": {"kind": "sine"}, "trace_horizon": 40.0,
        },
        "excitability": {
            "x0": [0.7, 0.71],
            "schedule": [0.35, 0.30, 0.225, 0.215, 0.205, 0.12, 0.08],
        },
    }


SYSTEM_DEFAULTS = {"vdp": _vdp_defaults, "fhn": _fhn_defaults}


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Mezclar dicts anidados; las hojas de override ganan"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def read_yaml(path) -> Dict[str, Any]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"No existe el archivo de configuración: {path}")
    except yaml.YAMLError as e:
        raise ConfigError(f"Error al parsear YAML ({path}): {e}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: se esperaba un mapeo de claves en el nivel superior")
    return data


def build_config(raw: Dict[str, Any], system: Optional[str] = None, seed: Optional[int] = None,
                 out: Optional[str] = None) -> ExperimentConfig:
    """
    Resolver defaults + archivo + flags

    El seed de nivel superior se propaga a dataset, train y a la inicialización
    salvo que el archivo los fije; --seed los pisa siempre.
    """
    system = system or raw.get("system") or raw.get("dataset", {}).get("system")
    if not system:
        raise ConfigError("Falta el nombre del sistema ('system' en el archivo o --system)")
    if system not in SYSTEM_DEFAULTS:
        raise ConfigError(f"Sistema sin defaults de experimento: {system}. Debe ser {', '.join(SYSTEM_DEFAULTS)}")

    data = deep_merge(SYSTEM_DEFAULTS[system](), raw)
    data["system"] = system
    data["dataset"]["system"] = system

    top_seed = seed if seed is not None else int(data.get("seed", 0))
    data["seed"] = top_seed
    for section in ("dataset", "train"):
        if seed is not None or "seed" not in raw.get(section, {}):
            data[section]["seed"] = top_seed

    # las distribuciones de entrada heredan Δ del dataset
    delta = data["dataset"]["delta"]
    data["dataset"]["input"].setdefault("delta", delta)
    if data["study"].get("alt_input") is not None:
        data["study"]["alt_input"].setdefault("delta", delta)

    data["out_dir"] = out or raw.get("out_dir") or os.environ.get("FLUJOS_OUT_DIR") or str(Path("runs") / system)

    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Configuración inválida:\n{e}")


def load_config(path=None, system: Optional[str] = None, seed: Optional[int] = None,
                out: Optional[str] = None) -> ExperimentConfig:
    """Cargar un YAML (opcional) y resolverlo contra los defaults del sistema"""
    raw = read_yaml(path) if path is not None else {}
    return build_config(raw, system=system, seed=seed, out=out)
