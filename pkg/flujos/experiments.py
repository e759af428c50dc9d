"""
Experimentos
Drivers de los subcomandos del CLI: generación, entrenamiento, evaluación,
predicción, estudio de horizonte, estudio de distribución de entrada,
excitabilidad de FHN y barrido de amplitudes. Cada uno escribe CSV/JSON en
el directorio de salida del experimento.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ExperimentConfig
from .data_gen import generate_dataset, load_dataset, sample_initial, sample_input, save_dataset, trajectory_rng
from .errors import ConfigError, DataFormatError
from .flow_model import (
    check_compatible,
    flow_rollout,
    init_flow_model,
    load_checkpoint,
    reinit_flow_model,
    save_checkpoint,
)
from .ode_sim import PwcSignal, get_system, integrate_grid
from .trainer import (
    LossEstimate,
    estimate_loss_curve,
    evaluate_split,
    loss_samples,
    train,
    truth_predictor,
)


def _fmt(x: float) -> str:
    return repr(float(x))


def _subdir(cfg: ExperimentConfig, name: str) -> Path:
    path = Path(cfg.out_dir) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dataset_dir(cfg: ExperimentConfig, dataset_dir=None) -> Path:
    return Path(dataset_dir) if dataset_dir is not None else Path(cfg.out_dir) / "dataset"


def _checkpoint_path(cfg: ExperimentConfig, checkpoint=None) -> Path:
    return Path(checkpoint) if checkpoint is not None else Path(cfg.out_dir) / "train" / "checkpoint.json"


def _system(cfg: ExperimentConfig):
    return get_system(cfg.dataset.system, **cfg.dataset.system_params)


def _eval_seed(cfg: ExperimentConfig) -> int:
    return cfg.seed + cfg.study.seed_offset


def _load_model(cfg: ExperimentConfig, checkpoint=None):
    model, _, _ = load_checkpoint(_checkpoint_path(cfg, checkpoint))
    system = _system(cfg)
    check_compatible(model, cfg.dataset.delta, system.state_dim, system.input_dim)
    return model


# ============================================================================
# generate / train
# ============================================================================

def cmd_generate(cfg: ExperimentConfig, out=None, verbose: bool = False) -> Path:
    """Generar y guardar el dataset del experimento"""
    dataset = generate_dataset(cfg.dataset, workers=cfg.workers, verbose=verbose)
    path = save_dataset(dataset, _dataset_dir(cfg, out))

    if dataset.retries:
        with open(path / "retries.csv", 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(["traj_id", "attempt", "error"])
            for r in dataset.retries:
                writer.writerow([r["traj_id"], r["attempt"], r["error"]])

    if verbose:
        print(f"✅ Dataset guardado en {path}")
    return path


def cmd_train(cfg: ExperimentConfig, dataset_dir=None, resume=None, verbose: bool = False) -> Path:
    """Entrenar desde cero o reanudar desde last.json"""
    dataset = load_dataset(_dataset_dir(cfg, dataset_dir))
    out_dir = _subdir(cfg, "train")

    optimizer, resume_state = None, None
    if resume is not None:
        model, optimizer, resume_state = load_checkpoint(resume)
        if resume_state is None or optimizer is None:
            raise DataFormatError(f"{resume} no tiene estado de reanudación (usar last.json)")
    else:
        model = init_flow_model(cfg.model, dataset.state_dim, dataset.input_dim, dataset.delta, seed=cfg.seed)

    trained, history = train(model, dataset, cfg.train, out_dir=out_dir, resume=resume_state,
                             optimizer=optimizer, verbose=verbose)
    path = save_checkpoint(trained, out_dir / "checkpoint.json")
    if verbose:
        print(f"✅ Checkpoint guardado en {path} ({len(history)} épocas, {history.stop_reason})")
    return path


# ============================================================================
# eval / predict
# ============================================================================

def write_traces(path: Path, rows: Sequence[Tuple[int, np.ndarray, np.ndarray, np.ndarray]]) -> Path:
    """traj_id, t, x_1..x_n, xhat_1..xhat_n"""
    n = rows[0][2].shape[1] if rows else 0
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(["traj_id", "t"] + [f"x_{i + 1}" for i in range(n)] + [f"xhat_{i + 1}" for i in range(n)])
        for traj_id, times, truth, pred in rows:
            for t, x, xh in zip(times, truth, pred):
                writer.writerow([traj_id, _fmt(t)] + [_fmt(v) for v in x] + [_fmt(v) for v in xh])
    return path


def _json_float(x: float) -> Optional[float]:
    """NaN/inf -> null (JSON estándar)"""
    return float(x) if math.isfinite(x) else None


def _estimate_json(est: LossEstimate) -> Dict[str, Any]:
    return {"mean": _json_float(est.mean), "variance": _json_float(est.variance), "n": est.n,
            "ci_lo": _json_float(est.ci_lo), "ci_hi": _json_float(est.ci_hi), "redrawn": est.redrawn}


def cmd_eval(cfg: ExperimentConfig, checkpoint=None, dataset_dir=None, split: str = "test",
             fresh: bool = True, perfect: bool = False, verbose: bool = False) -> Dict[str, Any]:
    """
    Evaluar un checkpoint

    per_traj.csv: ℓ̂ por trayectoria del split; metrics.json: agregados,
    loss del modelo sin entrenar y ℓ_T sobre trayectorias nuevas;
    traces.csv: trayectorias reales y predichas en [0, trace_horizon].
    perfect=True reemplaza el modelo por la solución exacta.
    """
    model = _load_model(cfg, checkpoint)
    dataset = load_dataset(_dataset_dir(cfg, dataset_dir))
    system = _system(cfg)
    out_dir = _subdir(cfg, "eval")
    predict = truth_predictor(system, cfg.dataset.solver) if perfect else None

    if verbose:
        print(f"🔄 Evaluando split '{split}'...")
    ids, losses = evaluate_split(model, dataset, split, predict)
    split_est = LossEstimate.from_samples(losses, label=f"split {split}")

    with open(out_dir / "per_traj.csv", 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(["traj_id", "split", "loss"])
        for traj_id, loss in zip(ids, losses):
            writer.writerow([traj_id, split, _fmt(loss)])

    # misma arquitectura que el checkpoint, pesos iniciales
    initial = reinit_flow_model(model, seed=model.rng_seed if model.rng_seed is not None else cfg.seed)
    _, initial_losses = evaluate_split(initial, dataset, split)

    metrics: Dict[str, Any] = {
        "split": split,
        "perfect_model": perfect,
        "split_loss": _estimate_json(split_est),
        "initial_model_loss": float(np.mean(initial_losses)),
        "noise_floor": model.state_dim * cfg.dataset.noise_std ** 2,
        "training_meta": model.training_meta,
    }

    if fresh:
        if verbose:
            print(f"🔄 ℓ_T sobre {cfg.study.n_traj} trayectorias nuevas (T={cfg.dataset.horizon:g})...")
        samples, redrawn = loss_samples(model, system, cfg.dataset.input, cfg.dataset.horizon,
                                        cfg.study.n_traj, _eval_seed(cfg), predict,
                                        cfg.study.spacing, cfg.dataset.solver)
        metrics["fresh_loss"] = _estimate_json(LossEstimate.from_samples(samples, redrawn, label="ℓ_T"))
        metrics["fresh_loss"]["t"] = cfg.dataset.horizon

    rows = []
    spacing = cfg.study.spacing or cfg.dataset.delta / 10.0
    for i in range(cfg.study.n_traces):
        rng = trajectory_rng(_eval_seed(cfg) + 1, i)
        x0 = sample_initial(rng, system.state_dim)
        signal = sample_input(cfg.dataset.input, cfg.study.trace_horizon, rng, system.input_dim)
        truth = integrate_grid(system, x0, signal, cfg.study.trace_horizon, spacing, cfg.dataset.solver)
        pred = predict(model, truth.times, x0, signal) if predict else flow_rollout(model, truth.times, x0, signal)
        rows.append((i, truth.times, truth.states, pred))
    if rows:
        write_traces(out_dir / "traces.csv", rows)

    with open(out_dir / "metrics.json", 'w', encoding='utf-8') as f:
        json.dump(metrics, f, indent=2, allow_nan=False)

    if verbose:
        print(f"📊 ℓ̂ ({split}): {split_est.mean:.6f} (modelo inicial: {metrics['initial_model_loss']:.6f})")
        if fresh:
            print(f"📊 ℓ_T nuevas: {metrics['fresh_loss']['mean']:.6f}")
    return metrics


def read_signal_csv(path, delta: float) -> PwcSignal:
    """CSV con columnas u_1..u_m (y opcionalmente k) -> señal"""
    with open(path, 'r', encoding='utf-8') as f:
        reader = csv.DictReader(f)
        columns = [c for c in (reader.fieldnames or []) if c.startswith("u_")]
        if not columns:
            raise DataFormatError(f"{path}: faltan columnas u_1..u_m")
        try:
            values = [[float(row[c]) for c in columns] for row in reader]
        except (TypeError, ValueError) as e:
            raise DataFormatError(f"{path}: valor inválido ({e})")
    if not values:
        raise DataFormatError(f"{path}: no hay valores de entrada")
    return PwcSignal(delta=delta, values=np.array(values))


def read_times_csv(path) -> np.ndarray:
    with open(path, 'r', encoding='utf-8') as f:
        reader = csv.DictReader(f)
        if "t" not in (reader.fieldnames or []):
            raise DataFormatError(f"{path}: falta la columna t")
        try:
            return np.array([float(row["t"]) for row in reader])
        except (TypeError, ValueError) as e:
            raise DataFormatError(f"{path}: valor inválido ({e})")


def predict_csv(checkpoint, x0: Sequence[float], inputs_csv, times_csv) -> Tuple[np.ndarray, np.ndarray]:
    """(times, φ̂) en el orden del CSV de tiempos"""
    model, _, _ = load_checkpoint(checkpoint)
    signal = read_signal_csv(inputs_csv, model.delta)
    times = read_times_csv(times_csv)
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.size != model.state_dim:
        raise DataFormatError(f"x0 de dimensión {x0.size}, el modelo espera {model.state_dim}")

    order = np.argsort(times, kind="stable")
    pred = np.empty((times.size, model.state_dim))
    pred[order] = flow_rollout(model, times[order], x0, signal)
    return times, pred


def cmd_predict(checkpoint, x0: Sequence[float], inputs_csv, times_csv, out_csv) -> Path:
    """Trayectoria predicha (t, xhat_1..xhat_n) para un x0 y una señal dados"""
    times, pred = predict_csv(checkpoint, x0, inputs_csv, times_csv)

    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(["t"] + [f"xhat_{i + 1}" for i in range(pred.shape[1])])
        for t, row in zip(times, pred):
            writer.writerow([_fmt(t)] + [_fmt(v) for v in row])
    return out_csv


# ============================================================================
# Estudios
# ============================================================================

def cmd_horizon_study(cfg: ExperimentConfig, checkpoint=None, t_grid: Optional[Sequence[float]] = None,
                      n_traj: Optional[int] = None, verbose: bool = False) -> Path:
    """loss_curve.csv: t, mean, ci_lo, ci_hi"""
    model = _load_model(cfg, checkpoint)
    t_grid = list(t_grid) if t_grid is not None else cfg.study.t_grid
    n_traj = n_traj or cfg.study.n_traj
    if verbose:
        print(f"🔄 Estudio de horizonte: {len(t_grid)} valores de t, {n_traj} trayectorias")

    estimates = estimate_loss_curve(model, _system(cfg), cfg.dataset.input, t_grid, n_traj,
                                    _eval_seed(cfg), spacing=cfg.study.spacing,
                                    solver=cfg.dataset.solver, shared_draws=cfg.study.shared_draws,
                                    verbose=verbose)

    path = _subdir(cfg, "horizon") / "loss_curve.csv"
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(["t", "mean", "ci_lo", "ci_hi"])
        for t, est in zip(t_grid, estimates):
            writer.writerow([_fmt(t), _fmt(est.mean), _fmt(est.ci_lo), _fmt(est.ci_hi)])

    if verbose:
        ratio = max(e.mean for e in estimates) / estimates[0].mean if estimates[0].mean > 0 else math.nan
        print(f"📊 max ℓ_t / ℓ_{t_grid[0]:g} = {ratio:.3f}")
        print(f"✅ {path}")
    return path


def cmd_input_dist_study(cfg: ExperimentConfig, checkpoint=None, n_traj: Optional[int] = None,
                         verbose: bool = False) -> Path:
    """loss_dist.csv: una fila por (distribución, trayectoria) con ℓ_T"""
    if cfg.study.alt_input is None:
        raise ConfigError("input-dist-study requiere study.alt_input")
    model = _load_model(cfg, checkpoint)
    system = _system(cfg)
    n_traj = n_traj or cfg.study.n_traj
    dists = [("train", cfg.dataset.input), ("alt", cfg.study.alt_input)]

    path = _subdir(cfg, "input_dist") / "loss_dist.csv"
    means = {}
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(["distribution", "kind", "traj_id", "loss"])
        for label, dist in dists:
            if verbose:
                print(f"🔄 ℓ_T con entradas '{dist.kind}' ({n_traj} trayectorias)...")
            losses, _ = loss_samples(model, system, dist, cfg.dataset.horizon, n_traj, _eval_seed(cfg),
                                     spacing=cfg.study.spacing, solver=cfg.dataset.solver)
            means[label] = float(losses.mean())
            for traj_id, loss in enumerate(losses):
                writer.writerow([label, dist.kind, traj_id, _fmt(loss)])

    if verbose:
        print(f"📊 Media train={means['train']:.6f}  alt={means['alt']:.6f}")
        print(f"✅ {path}")
    return path


# ============================================================================
# Excitabilidad
# ============================================================================

RESTING = "resting"
SPIKING = "spiking"


@dataclass
class SpikeReport:
    """Spikes detectados y clasificación por ventana"""
    spike_times: List[float]
    windows: List[Tuple[float, float]]
    classes: List[str]
    threshold: float
    amplitudes: List[float] = field(default_factory=list)

    def counts(self) -> List[int]:
        times = np.asarray(self.spike_times)
        return [int(np.count_nonzero((times >= lo) & (times < hi))) for lo, hi in self.windows]


def detect_spikes(times, x1, threshold: float = 0.8, min_separation: float = 0.3,
                  windows: Optional[Sequence[Tuple[float, float]]] = None,
                  amplitudes: Optional[Sequence[float]] = None) -> SpikeReport:
    """
    Detectar spikes en x1(t)

    Un spike es un cruce ascendente del umbral; el siguiente exige volver a
    bajar del umbral y estar a >= min_separation del anterior. Una ventana es
    'spiking' con 2 o más spikes en [inicio, fin).
    """
    times = np.asarray(times, dtype=np.float64).ravel()
    x1 = np.asarray(x1, dtype=np.float64).ravel()
    if x1.size == 0:
        raise DataFormatError("Serie vacía: no se pueden detectar spikes")
    if times.size != x1.size:
        raise DataFormatError(f"times ({times.size}) y x1 ({x1.size}) de distinto largo")

    spikes: List[float] = []
    armed = x1[0] < threshold
    for i in range(1, x1.size):
        if armed and x1[i] >= threshold:
            # instante del cruce por interpolación lineal
            frac = (threshold - x1[i - 1]) / (x1[i] - x1[i - 1])
            t_cross = times[i - 1] + frac * (times[i] - times[i - 1])
            if not spikes or t_cross - spikes[-1] >= min_separation:
                spikes.append(float(t_cross))
            armed = False
        elif not armed and x1[i] < threshold:
            armed = True

    if windows is None:
        windows = [(float(times[0]), float(np.nextafter(times[-1], math.inf)))]
    windows = [(float(lo), float(hi)) for lo, hi in windows]
    report = SpikeReport(spike_times=spikes, windows=windows, classes=[], threshold=threshold,
                         amplitudes=list(amplitudes or []))
    report.classes = [SPIKING if c >= 2 else RESTING for c in report.counts()]
    return report


def staircase_signal(schedule: Sequence[float], delta: float, hold: int) -> PwcSignal:
    """Cada amplitud se mantiene `hold` períodos; un valor extra cubre t = horizonte"""
    values = np.repeat(np.asarray(schedule, dtype=np.float64), hold)
    return PwcSignal(delta=delta, values=np.append(values, values[-1]))


def class_runs(classes: Sequence[str]) -> List[str]:
    """Colapsar clases consecutivas iguales: resting, spiking, resting, ..."""
    runs: List[str] = []
    for c in classes:
        if not runs or runs[-1] != c:
            runs.append(c)
    return runs


def cmd_excitability(cfg: ExperimentConfig, checkpoint=None, schedule: Optional[Sequence[float]] = None,
                     verbose: bool = False) -> Dict[str, Any]:
    """
    Escalera de amplitudes: verdad RK45 vs modelo sobre el mismo (x0, u)

    Escribe spikes.csv (window_start, window_end, amplitude, truth_class,
    pred_class), excitability_traces.csv y report.json con el acuerdo.
    """
    exc = cfg.excitability
    if exc is None:
        raise ConfigError(f"El sistema '{cfg.system}' no tiene configuración de excitabilidad")
    model = _load_model(cfg, checkpoint)
    system = _system(cfg)
    schedule = list(schedule) if schedule is not None else exc.schedule
    delta = cfg.dataset.delta
    hold = exc.hold_blocks * exc.block
    window = hold * delta
    horizon = len(schedule) * window
    spacing = exc.spacing or delta / 10.0

    signal = staircase_signal(schedule, delta, hold)
    if verbose:
        print(f"🔄 Excitabilidad: {len(schedule)} escalones de {window:g} s")
    truth = integrate_grid(system, exc.x0, signal, horizon, spacing, cfg.dataset.solver)
    pred = flow_rollout(model, truth.times, exc.x0, signal)

    windows = [(i * window, (i + 1) * window) for i in range(len(schedule))]
    truth_report = detect_spikes(truth.times, truth.states[:, 0], exc.threshold, exc.min_separation,
                                 windows, schedule)
    pred_report = detect_spikes(truth.times, pred[:, 0], exc.threshold, exc.min_separation,
                                windows, schedule)
    agree = [a == b for a, b in zip(truth_report.classes, pred_report.classes)]

    out_dir = _subdir(cfg, "excitability")
    with open(out_dir / "spikes.csv", 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(["window_start", "window_end", "amplitude", "truth_class", "pred_class"])
        for (lo, hi), amp, tc, pc in zip(windows, schedule, truth_report.classes, pred_report.classes):
            writer.writerow([_fmt(lo), _fmt(hi), _fmt(amp), tc, pc])
    write_traces(out_dir / "excitability_traces.csv", [(0, truth.times, truth.states, pred)])

    report = {
        "schedule": schedule,
        "window": window,
        "threshold": exc.threshold,
        "min_separation": exc.min_separation,
        "truth_classes": truth_report.classes,
        "pred_classes": pred_report.classes,
        "truth_spike_times": truth_report.spike_times,
        "pred_spike_times": pred_report.spike_times,
        "truth_pattern": class_runs(truth_report.classes),
        "agreement": float(np.mean(agree)),
    }
    with open(out_dir / "report.json", 'w', encoding='utf-8') as f:
        json.dump(report, f, indent=2, allow_nan=False)

    if verbose:
        print(f"📊 Verdad:  {' → '.join(report['truth_pattern'])}")
        print(f"📊 Acuerdo por ventana: {report['agreement']:.0%}")
    return report


def cmd_sweep(cfg: ExperimentConfig, amplitudes: Optional[Sequence[float]] = None,
              verbose: bool = False) -> Path:
    """
    sweep.csv: amplitud constante -> spikes en la segunda mitad del horizonte

    Sirve para ubicar la banda excitable antes de fijar las escaleras.
    """
    exc = cfg.excitability
    if exc is None:
        raise ConfigError(f"El sistema '{cfg.system}' no tiene configuración de excitabilidad")
    system = _system(cfg)
    amplitudes = list(amplitudes) if amplitudes is not None else exc.sweep_amplitudes
    delta = cfg.dataset.delta
    spacing = exc.spacing or delta / 10.0
    horizon = exc.sweep_horizon
    n_values = int(math.ceil(horizon / delta)) + 1

    path = _subdir(cfg, "sweep") / "sweep.csv"
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(["amplitude", "spikes", "class"])
        for amp in amplitudes:
            signal = PwcSignal(delta=delta, values=np.full(n_values, float(amp)))
            truth = integrate_grid(system, exc.x0, signal, horizon, spacing, cfg.dataset.solver)
            report = detect_spikes(truth.times, truth.states[:, 0], exc.threshold, exc.min_separation,
                                   [(horizon / 2.0, horizon)])
            count = report.counts()[0]
            writer.writerow([_fmt(amp), count, report.classes[0]])
            if verbose:
                print(f"   u={amp:g}: {count} spikes ({report.classes[0]})")

    if verbose:
        print(f"✅ {path}")
    return path
