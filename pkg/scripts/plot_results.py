#!/usr/bin/env python3
"""
Figuras a partir de los CSV de un directorio de resultados
Uso: python scripts/plot_results.py runs/vdp
"""
import argparse
import csv
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib as mpl
mpl.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_rows(path: Path):
    with open(path, 'r', encoding='utf-8') as f:
        return list(csv.DictReader(f))


def plot_history(run: Path, out: Path) -> bool:
    path = run / "train" / "history.csv"
    if not path.exists():
        return False
    rows = read_rows(path)
    epochs = [int(r["epoch"]) for r in rows]
    fig, ax = plt.subplots()
    ax.semilogy(epochs, [float(r["train_loss"]) for r in rows], label="train")
    ax.semilogy(epochs, [float(r["val_loss"]) for r in rows], label="val")
    ax.set_xlabel("época")
    ax.set_ylabel("loss")
    ax.legend()
    fig.savefig(out / "history.png", dpi=150)
    plt.close(fig)
    return True


def plot_traces(path: Path, dest: Path) -> bool:
    """Real (azul, punteada) y predicha (negra) por coordenada"""
    if not path.exists():
        return False
    by_traj = defaultdict(list)
    for r in read_rows(path):
        by_traj[r["traj_id"]].append(r)
    n = sum(1 for k in next(iter(by_traj.values()))[0] if k.startswith("x_"))
    fig, axes = plt.subplots(len(by_traj), n, squeeze=False, figsize=(4 * n, 2.5 * len(by_traj)))
    for row, rows in zip(axes, by_traj.values()):
        t = [float(r["t"]) for r in rows]
        for i, ax in enumerate(row, 1):
            ax.plot(t, [float(r[f"x_{i}"]) for r in rows], 'b--', label="real")
            ax.plot(t, [float(r[f"xhat_{i}"]) for r in rows], 'k-', label="predicha")
            ax.set_ylabel(f"x{i}")
    axes[-1][0].set_xlabel("t")
    axes[0][0].legend()
    fig.tight_layout()
    fig.savefig(dest, dpi=150)
    plt.close(fig)
    return True


def plot_loss_curve(run: Path, out: Path) -> bool:
    path = run / "horizon" / "loss_curve.csv"
    if not path.exists():
        return False
    rows = read_rows(path)
    t = np.array([float(r["t"]) for r in rows])
    mean = np.array([float(r["mean"]) for r in rows])
    lo = np.array([float(r["ci_lo"]) for r in rows])
    hi = np.array([float(r["ci_hi"]) for r in rows])
    fig, ax = plt.subplots()
    ax.plot(t, mean, 'k-')
    ax.fill_between(t, lo, hi, color='0.8')
    ax.set_xlabel("t")
    ax.set_ylabel("ℓ_t")
    fig.savefig(out / "loss_curve.png", dpi=150)
    plt.close(fig)
    return True


def plot_loss_dist(run: Path, out: Path) -> bool:
    path = run / "input_dist" / "loss_dist.csv"
    if not path.exists():
        return False
    groups = defaultdict(list)
    for r in read_rows(path):
        groups[f"{r['distribution']} ({r['kind']})"].append(float(r["loss"]))
    fig, ax = plt.subplots()
    ax.boxplot(list(groups.values()))
    ax.set_xticklabels(list(groups.keys()))
    ax.set_ylabel("ℓ_T")
    fig.savefig(out / "loss_dist.png", dpi=150)
    plt.close(fig)
    return True


def plot_excitability(run: Path, out: Path) -> bool:
    """x1 real y predicha con las ventanas excitables sombreadas"""
    exc = run / "excitability"
    if not (exc / "excitability_traces.csv").exists():
        return False
    rows = read_rows(exc / "excitability_traces.csv")
    t = [float(r["t"]) for r in rows]
    fig, ax = plt.subplots(figsize=(10, 3))
    ax.plot(t, [float(r["x_1"]) for r in rows], 'b--', label="real")
    ax.plot(t, [float(r["xhat_1"]) for r in rows], 'k-', label="predicha")
    for w in read_rows(exc / "spikes.csv"):
        if w["truth_class"] == "spiking":
            ax.axvspan(float(w["window_start"]), float(w["window_end"]), color='0.85')
    ax.set_xlabel("t")
    ax.set_ylabel("x1")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "excitability.png", dpi=150)
    plt.close(fig)
    return True


def main():
    parser = argparse.ArgumentParser(description='Figuras de un directorio de resultados')
    parser.add_argument('run', type=str, help='Directorio out_dir del experimento')
    parser.add_argument('--out', type=str, help='Directorio de figuras (default <run>/figures)')
    args = parser.parse_args()

    run = Path(args.run)
    out = Path(args.out) if args.out else run / "figures"
    out.mkdir(parents=True, exist_ok=True)

    done = {
        "history": plot_history(run, out),
        "traces": plot_traces(run / "eval" / "traces.csv", out / "traces.png"),
        "loss_curve": plot_loss_curve(run, out),
        "loss_dist": plot_loss_dist(run, out),
        "excitability": plot_excitability(run, out),
    }
    for name, ok in done.items():
        print(f"{'✅' if ok else '⚠️ '} {name}")
    sys.exit(0 if any(done.values()) else 1)


if __name__ == '__main__':
    main()
