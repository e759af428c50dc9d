"""
Entrenamiento y evaluación
Adam por minibatches de pares (trayectoria, instante), reducción del learning
rate por meseta, early stopping y estimación de ℓ_t con intervalos de confianza.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .data_gen import (
    Dataset,
    InputDistribution,
    TrajectoryRecord,
    iter_split,
    sample_initial,
    sample_input,
    trajectory_rng,
)
from .errors import StiffnessError, TrainingDivergenceError
from .flow_model import (
    FlowModel,
    batch_arrays,
    batched_loss,
    check_compatible,
    flow_rollout,
    save_checkpoint,
)
from .nn_core import AdamState, ParamVector, Tape, adam_step, backward
from .ode_sim import SolverConfig, SystemDef, integrate, integrate_grid

HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "lr"]

# predict(model, times, x0, signal) -> (len(times), n)
Predictor = Callable[..., np.ndarray]


class TrainConfig(BaseModel):
    """Hiperparámetros de entrenamiento"""
    model_config = {"extra": "forbid"}

    batch_size: int = Field(default=1024, ge=1, description="Pares (trayectoria, instante) por lote")
    initial_lr: float = Field(default=1e-2, gt=0)
    lr_factor: float = Field(default=0.2, gt=0, lt=1, description="Factor de reducción (1/5)")
    lr_patience: int = Field(default=5, ge=1)
    early_stop_tol: float = Field(default=5e-4, gt=0)
    early_stop_patience: int = Field(default=30, ge=1)
    max_epochs: int = Field(default=1000, ge=1)
    seed: int = Field(default=0, ge=0)
    beta1: float = Field(default=0.9, gt=0, lt=1)
    beta2: float = Field(default=0.999, gt=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)


# ============================================================================
# Scheduler y early stopping
# ============================================================================

def _require_finite(val_loss: float) -> float:
    val_loss = float(val_loss)
    if not math.isfinite(val_loss):
        raise ValueError(f"Loss de validación no finito: {val_loss}")
    return val_loss


@dataclass
class LrScheduler:
    """Reduce el lr por `factor` tras `patience` épocas sin mejorar el mejor valor"""
    lr: float
    factor: float = 0.2
    patience: int = 5
    best: float = math.inf
    counter: int = 0

    def step(self, val_loss: float) -> float:
        val_loss = _require_finite(val_loss)
        if val_loss < self.best:
            self.best = val_loss
            self.counter = 0
        else:
            self.counter += 1
            if self.counter >= self.patience:
                self.lr *= self.factor
                self.counter = 0
        return self.lr

    def to_json(self) -> Dict[str, Any]:
        return {"lr": self.lr, "factor": self.factor, "patience": self.patience,
                "best": self.best, "counter": self.counter}


def lr_step(scheduler: LrScheduler, val_loss: float) -> float:
    return scheduler.step(val_loss)


@dataclass
class EarlyStopper:
    """Corta tras `patience` épocas seguidas que no bajan el mejor valor en más de `tol`"""
    tol: float = 5e-4
    patience: int = 30
    best: float = math.inf
    counter: int = 0

    def step(self, val_loss: float) -> bool:
        val_loss = _require_finite(val_loss)
        if self.best - val_loss > self.tol:
            self.best = val_loss
            self.counter = 0
        else:
            self.counter += 1
        return self.counter >= self.patience

    def to_json(self) -> Dict[str, Any]:
        return {"tol": self.tol, "patience": self.patience, "best": self.best, "counter": self.counter}


def early_stop(stopper: EarlyStopper, val_loss: float) -> bool:
    return stopper.step(val_loss)


# ============================================================================
# Losses
# ============================================================================

@dataclass
class LossEstimate:
    """Media, varianza empírica e IC 95% (1.96 sqrt(var/n))"""
    mean: float
    variance: float
    n: int
    redrawn: int = 0

    @classmethod
    def from_samples(cls, samples: Sequence[float], redrawn: int = 0, label: str = "") -> "LossEstimate":
        samples = np.asarray(samples, dtype=np.float64)
        if samples.size == 0:
            raise ValueError("No hay muestras para estimar el loss")
        if samples.size < 2:
            print(f"⚠️  {label or 'Estimación'} con n=1: varianza e IC indefinidos (NaN)")
            variance = math.nan
        else:
            variance = float(np.var(samples, ddof=1))
        return cls(mean=float(samples.mean()), variance=variance, n=int(samples.size), redrawn=redrawn)

    @property
    def ci_half_width(self) -> float:
        return 1.96 * math.sqrt(self.variance / self.n) if self.n >= 2 else math.nan

    @property
    def ci_lo(self) -> float:
        return self.mean - self.ci_half_width

    @property
    def ci_hi(self) -> float:
        return self.mean + self.ci_half_width


def records_to_samples(records: Sequence[TrajectoryRecord], delta: float) -> List[Tuple]:
    """(times, x0, signal, mediciones) por trayectoria"""
    return [(r.times, r.x0, r.signal(delta), r.measurements) for r in records]


def _rollout_predict(model: FlowModel, times, x0, signal) -> np.ndarray:
    return flow_rollout(model, times, x0, signal)


def truth_predictor(system: SystemDef, solver: Optional[SolverConfig] = None) -> Predictor:
    """Predictor que devuelve la solución exacta (autotest del pipeline de evaluación)"""
    def predict(model, times, x0, signal):
        return integrate(system, x0, signal, times, solver).states
    return predict


def per_trajectory_losses(model: FlowModel, samples: Sequence[Tuple],
                          predict: Optional[Predictor] = None) -> np.ndarray:
    """(1/K) sum_k ||ξ_k - φ̂(t_k)||² por trayectoria"""
    predict = predict or _rollout_predict
    losses = []
    for times, x0, signal, measured in samples:
        err = np.asarray(measured) - predict(model, times, x0, signal)
        losses.append(float(np.mean(np.sum(err * err, axis=1))))
    return np.array(losses)


def empirical_loss(model: FlowModel, samples: Sequence[Tuple],
                   predict: Optional[Predictor] = None) -> float:
    """ℓ̂_T: media sobre trayectorias de la media sobre muestras"""
    if not samples:
        raise ValueError("empirical_loss requiere al menos una trayectoria")
    return float(np.mean(per_trajectory_losses(model, samples, predict)))


def evaluate_split(model: FlowModel, dataset: Dataset, split: str = "test",
                   predict: Optional[Predictor] = None) -> Tuple[List[int], np.ndarray]:
    """ids y ℓ̂ por trayectoria de un split"""
    check_compatible(model, dataset.delta, dataset.state_dim, dataset.input_dim)
    records = list(iter_split(dataset, split))
    if not records:
        raise ValueError(f"El split '{split}' está vacío")
    losses = per_trajectory_losses(model, records_to_samples(records, dataset.delta), predict)
    return [r.traj_id for r in records], losses


# ============================================================================
# Entrenamiento
# ============================================================================

@dataclass
class TrainHistory:
    """Registro por época"""
    epochs: List[int] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0

    def append(self, epoch: int, train_loss: float, val_loss: float, lr: float, seconds: float):
        self.epochs.append(epoch)
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.lr.append(lr)
        self.seconds.append(seconds)

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def best_val(self) -> float:
        return self.val_loss[self.best_epoch - 1] if self.best_epoch else math.inf


def read_history(path) -> TrainHistory:
    history = TrainHistory()
    with open(path, 'r', encoding='utf-8') as f:
        for row in csv.DictReader(f):
            history.append(int(row["epoch"]), float(row["train_loss"]), float(row["val_loss"]),
                           float(row["lr"]), 0.0)
    if history.val_loss:
        history.best_epoch = int(np.argmin(history.val_loss)) + 1
    return history


def truncate_history(path, last_epoch: int) -> None:
    """Descartar filas posteriores a last_epoch (escritas antes de guardar last.json)"""
    path = Path(path)
    with open(path, 'r', newline='', encoding='utf-8') as f:
        rows = list(csv.reader(f))
    if not rows:
        return
    kept = [row for row in rows[1:] if row and int(row[0]) <= last_epoch]
    if len(kept) == len(rows) - 1:
        return
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(rows[0])
        writer.writerows(kept)


def _history_writer(out_dir: Optional[Path], resuming: bool):
    if out_dir is None:
        return None, None
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "history.csv"
    append = resuming and path.exists()
    f = open(path, 'a' if append else 'w', newline='', encoding='utf-8')
    writer = csv.writer(f)
    if not append:
        writer.writerow(HISTORY_COLUMNS)
    return f, writer


def train(model: FlowModel, dataset: Dataset, cfg: TrainConfig, out_dir=None,
          resume: Optional[Dict[str, Any]] = None, optimizer: Optional[AdamState] = None,
          verbose: bool = False) -> Tuple[FlowModel, TrainHistory]:
    """
    Minimizar ℓ̂_T con Adam y devolver los pesos de la mejor época de validación

    Con out_dir se escribe history.csv por época y last.json (pesos actuales,
    Adam, scheduler y early stopping) para poder reanudar con `resume`.
    """
    check_compatible(model, dataset.delta, dataset.state_dim, dataset.input_dim)
    train_records = dataset.split_records("train")
    val_records = dataset.split_records("val")
    if not train_records or not val_records:
        raise ValueError("train requiere splits de entrenamiento y validación no vacíos")

    x0s, inputs = batch_arrays([r.x0 for r in train_records], [r.inputs for r in train_records])
    pair_traj = np.concatenate([np.full(r.times.size, i) for i, r in enumerate(train_records)])
    pair_time = np.concatenate([r.times for r in train_records])
    pair_target = np.concatenate([r.measurements for r in train_records])
    val_samples = records_to_samples(val_records, dataset.delta)

    rng = np.random.default_rng(cfg.seed)
    params = model.params.copy()
    adam = optimizer or AdamState.zeros(len(params), cfg.initial_lr, cfg.beta1, cfg.beta2, cfg.eps)
    scheduler = LrScheduler(lr=adam.lr, factor=cfg.lr_factor, patience=cfg.lr_patience)
    stopper = EarlyStopper(tol=cfg.early_stop_tol, patience=cfg.early_stop_patience)
    history = TrainHistory()
    best_params, best_val, start_epoch = params.copy(), math.inf, 1

    out_dir = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        params = ParamVector.from_json(resume["params"])
        best_params = ParamVector.from_json(resume["best_params"])
        best_val = float(resume["best_val"])
        scheduler = LrScheduler(**resume["scheduler"])
        stopper = EarlyStopper(**resume["stopper"])
        rng.bit_generator.state = resume["rng_state"]
        start_epoch = int(resume["epoch"]) + 1
        if out_dir is not None and (out_dir / "history.csv").exists():
            truncate_history(out_dir / "history.csv", start_epoch - 1)
            history = read_history(out_dir / "history.csv")
        if verbose:
            print(f"🔄 Reanudando desde la época {start_epoch - 1} (lr={scheduler.lr:g})")

    n_pairs = pair_traj.size
    if verbose:
        print(f"🔄 Entrenando: {len(train_records)} trayectorias, {n_pairs} muestras, "
              f"{len(params)} parámetros, lote {cfg.batch_size}")

    f, writer = _history_writer(out_dir, resume is not None)
    history.stop_reason = "max_epochs"
    try:
        for epoch in range(start_epoch, cfg.max_epochs + 1):
            started = time.perf_counter()
            order = rng.permutation(n_pairs)
            total = 0.0
            for lo in range(0, n_pairs, cfg.batch_size):
                batch = np.sort(order[lo:lo + cfg.batch_size])
                used, local = np.unique(pair_traj[batch], return_inverse=True)
                tape = Tape()
                loss = batched_loss(tape, model, x0s[used], inputs[used], local,
                                    pair_time[batch], pair_target[batch], params)
                value = float(loss.value)
                if not math.isfinite(value):
                    raise TrainingDivergenceError(
                        f"Loss no finito en la época {epoch} (lote {lo // cfg.batch_size + 1}, lr={adam.lr:g})"
                    )
                grad = backward(tape, loss, params)
                params, adam = adam_step(adam, params, grad)
                total += value * batch.size

            train_loss = total / n_pairs
            current = model.with_params(params)
            val_loss = empirical_loss(current, val_samples)
            if not math.isfinite(val_loss):
                raise TrainingDivergenceError(f"Loss de validación no finito en la época {epoch}")

            lr_used = adam.lr
            history.append(epoch, train_loss, val_loss, lr_used, time.perf_counter() - started)
            if writer is not None:
                writer.writerow([epoch, repr(train_loss), repr(val_loss), repr(lr_used)])
                f.flush()

            if val_loss < best_val:
                best_val, best_params = val_loss, params.copy()
            adam.lr = scheduler.step(val_loss)
            stop = stopper.step(val_loss)

            if verbose:
                print(f"📊 Época {epoch}: train={train_loss:.6f} val={val_loss:.6f} lr={lr_used:g}")

            if out_dir is not None:
                resume_state = {
                    "epoch": epoch,
                    "params": params.to_json(),
                    "best_params": best_params.to_json(),
                    "best_val": best_val,
                    "scheduler": scheduler.to_json(),
                    "stopper": stopper.to_json(),
                    "rng_state": rng.bit_generator.state,
                }
                save_checkpoint(current, out_dir / "last.json", optimizer=adam, resume=resume_state)

            if stop:
                history.stop_reason = "early_stop"
                break
    finally:
        if f is not None:
            f.close()

    history.best_epoch = int(np.argmin(history.val_loss)) + 1 if history.val_loss else 0
    trained = model.with_params(best_params)
    trained.training_meta = {
        "epochs": len(history),
        "best_epoch": history.best_epoch,
        "best_val": best_val,
        "stop_reason": history.stop_reason,
        "train_seconds": float(sum(history.seconds)),
        "train_config": cfg.model_dump(),
    }
    if verbose:
        print(f"✅ Entrenamiento terminado ({history.stop_reason}): mejor época {history.best_epoch}, val={best_val:.6f}")
    return trained, history


# ============================================================================
# ℓ_t sobre trayectorias nuevas
# ============================================================================

def _fresh_errors(model: FlowModel, system: SystemDef, dist: InputDistribution, horizon: float,
                  traj_id: int, seed: int, spacing: float, predict: Predictor,
                  solver: Optional[SolverConfig], max_retries: int) -> Tuple[np.ndarray, np.ndarray, int]:
    """Errores cuadráticos sobre la grilla densa de una trayectoria nueva"""
    for attempt in range(max_retries + 1):
        rng = trajectory_rng(seed, traj_id, attempt)
        x0 = sample_initial(rng, system.state_dim)
        signal = sample_input(dist, horizon, rng, system.input_dim)
        try:
            truth = integrate_grid(system, x0, signal, horizon, spacing, solver)
        except StiffnessError:
            continue
        err = predict(model, truth.times, x0, signal) - truth.states
        return truth.times, np.sum(err * err, axis=1), attempt
    raise StiffnessError(f"Trayectoria de evaluación {traj_id}: {max_retries + 1} intentos fallidos")


def _grid_spacing(dist: InputDistribution, spacing: Optional[float]) -> float:
    return spacing if spacing is not None else dist.delta / 10.0


def loss_samples(model: FlowModel, system: SystemDef, dist: InputDistribution, t: float,
                 n_traj: int, seed: int, predict: Optional[Predictor] = None,
                 spacing: Optional[float] = None, solver: Optional[SolverConfig] = None,
                 max_retries: int = 3) -> Tuple[np.ndarray, int]:
    """(1/t) ∫ ||φ̂ - φ||² por trayectoria nueva (media sobre grilla densa) y redibujos"""
    predict = predict or _rollout_predict
    spacing = _grid_spacing(dist, spacing)
    losses, redrawn = [], 0
    for i in range(n_traj):
        _, sq, attempt = _fresh_errors(model, system, dist, t, i, seed, spacing, predict, solver, max_retries)
        losses.append(float(sq.mean()))
        redrawn += attempt
    return np.array(losses), redrawn


def estimate_loss_curve(model: FlowModel, system: SystemDef, dist: InputDistribution,
                        t_grid: Sequence[float], n_traj: int, seed: int,
                        predict: Optional[Predictor] = None, spacing: Optional[float] = None,
                        solver: Optional[SolverConfig] = None, shared_draws: bool = True,
                        max_retries: int = 3, verbose: bool = False) -> List[LossEstimate]:
    """
    ℓ_t para cada t de la grilla

    shared_draws=True simula cada trayectoria una vez en [0, max(t_grid)] y
    promedia el prefijo [0, t]; con False se sortean trayectorias nuevas por t.
    """
    predict = predict or _rollout_predict
    spacing = _grid_spacing(dist, spacing)
    t_grid = [float(t) for t in t_grid]
    if not t_grid:
        return []

    if not shared_draws:
        estimates = []
        for j, t in enumerate(t_grid):
            losses, redrawn = loss_samples(model, system, dist, t, n_traj, seed + j, predict,
                                           spacing, solver, max_retries)
            estimates.append(LossEstimate.from_samples(losses, redrawn, label=f"ℓ_{t:g}"))
            if verbose:
                print(f"📊 t={t:g}: ℓ={estimates[-1].mean:.6f}")
        return estimates

    t_max = max(t_grid)
    per_t = [[] for _ in t_grid]
    redrawn = 0
    for i in range(n_traj):
        times, sq, attempt = _fresh_errors(model, system, dist, t_max, i, seed, spacing, predict,
                                           solver, max_retries)
        redrawn += attempt
        csum = np.cumsum(sq)
        for j, t in enumerate(t_grid):
            last = min(int(round(t / spacing)), times.size - 1)
            per_t[j].append(float(csum[last] / (last + 1)))
        if verbose and ((i + 1) % 10 == 0 or i + 1 == n_traj):
            print(f"   Progreso: {i + 1}/{n_traj} trayectorias")

    return [LossEstimate.from_samples(s, redrawn, label=f"ℓ_{t:g}") for s, t in zip(per_t, t_grid)]
