#!/usr/bin/env python3
"""
CLI de flujos
Generar datasets, entrenar el modelo de flujo y correr los estudios de
evaluación desde un archivo YAML de experimento.
"""
import argparse
import os
import sys
import traceback
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

# Permitir ejecutar el script sin instalar el paquete
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from flujos.config import load_config  # noqa: E402
from flujos.errors import FlujosError  # noqa: E402
from flujos import experiments  # noqa: E402


def parse_floats(text: str) -> List[float]:
    """'0.35, 0.3,0.2' -> [0.35, 0.3, 0.2]"""
    try:
        return [float(v) for v in text.replace(';', ',').split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Lista de números inválida: {text}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', '-c', type=str, help='Archivo YAML del experimento')
    common.add_argument('--system', type=str, help='Sistema (vdp, fhn) si no hay --config')
    common.add_argument('--seed', type=int, help='Semilla (pisa la del archivo)')
    common.add_argument('--out', type=str, help='Directorio de salida (pisa out_dir)')
    common.add_argument('--verbose', '-v', action='store_true', help='Mostrar progreso')

    parser = argparse.ArgumentParser(
        description='Aprender funciones de flujo de sistemas de control con una RNN',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Ejemplos de uso:

  # Pipeline Van der Pol
  python cli/flujos_cli.py generate --config configs/vdp.yaml -v
  python cli/flujos_cli.py train --config configs/vdp.yaml -v
  python cli/flujos_cli.py eval --config configs/vdp.yaml -v
  python cli/flujos_cli.py horizon-study --config configs/vdp.yaml
  python cli/flujos_cli.py input-dist-study --config configs/vdp.yaml

  # FitzHugh-Nagumo y excitabilidad
  python cli/flujos_cli.py sweep --config configs/fhn.yaml -v
  python cli/flujos_cli.py excitability --config configs/fhn_excitability_b.yaml

  # Reanudar un entrenamiento cortado
  python cli/flujos_cli.py train --config configs/vdp.yaml --resume runs/vdp/train/last.json

  # Predecir con un checkpoint
  python cli/flujos_cli.py predict --checkpoint runs/vdp/train/checkpoint.json \\
      --x0 1.0,0.0 --inputs u.csv --times t.csv --output pred.csv

Variables de entorno (.env):
  FLUJOS_OUT_DIR   Directorio de salida por defecto
  FLUJOS_VERBOSE   1 para mostrar progreso siempre
  FLUJOS_RUN_SLOW  1 para habilitar los tests end-to-end

Códigos de salida: 0 ok, 1 error inesperado, 2 configuración, 3 datos, 4 numérico
        """
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('generate', parents=[common], help='Generar dataset')
    p.add_argument('--workers', type=int, help='Procesos en paralelo')

    p = sub.add_parser('train', parents=[common], help='Entrenar el modelo')
    p.add_argument('--dataset', type=str, help='Directorio del dataset (default <out>/dataset)')
    p.add_argument('--resume', type=str, help='last.json de un entrenamiento anterior')

    p = sub.add_parser('eval', parents=[common], help='Evaluar un checkpoint')
    p.add_argument('--checkpoint', type=str, help='Default <out>/train/checkpoint.json')
    p.add_argument('--dataset', type=str, help='Directorio del dataset')
    p.add_argument('--split', choices=['train', 'val', 'test'], default='test')
    p.add_argument('--no-fresh', action='store_true', help='No estimar ℓ_T con trayectorias nuevas')
    p.add_argument('--perfect', action='store_true', help='Usar la solución exacta como predictor (autotest)')

    p = sub.add_parser('predict', parents=[common], help='Predecir una trayectoria')
    p.add_argument('--checkpoint', type=str, required=True)
    p.add_argument('--x0', type=parse_floats, required=True, help='Estado inicial, ej. 1.0,0.0')
    p.add_argument('--inputs', type=str, required=True, help='CSV con columnas u_1..u_m')
    p.add_argument('--times', type=str, required=True, help='CSV con columna t')
    p.add_argument('--output', type=str, required=True, help='CSV de salida (t, xhat_1..xhat_n)')

    p = sub.add_parser('horizon-study', parents=[common], help='ℓ_t para t en una grilla')
    p.add_argument('--checkpoint', type=str)
    p.add_argument('--t-grid', type=parse_floats, help='Ej. 15,20,25')
    p.add_argument('--n', type=int, help='Trayectorias nuevas')

    p = sub.add_parser('input-dist-study', parents=[common], help='ℓ_T con dos distribuciones de entrada')
    p.add_argument('--checkpoint', type=str)
    p.add_argument('--n', type=int, help='Trayectorias por distribución')

    p = sub.add_parser('excitability', parents=[common], help='Escalera de amplitudes en FHN')
    p.add_argument('--checkpoint', type=str)
    p.add_argument('--schedule', type=parse_floats, help='Amplitudes, ej. 0.35,0.21,0.1')

    p = sub.add_parser('sweep', parents=[common], help='Barrido de amplitudes constantes (RK45)')
    p.add_argument('--amplitudes', type=parse_floats)

    return parser


def run(args: argparse.Namespace) -> None:
    verbose = args.verbose or os.environ.get('FLUJOS_VERBOSE') == '1'

    if args.command == 'predict':
        path = experiments.cmd_predict(args.checkpoint, args.x0, args.inputs, args.times, args.output)
        if verbose:
            print(f"✅ Predicción guardada en {path}")
        return

    cfg = load_config(args.config, system=args.system, seed=args.seed, out=args.out)

    if args.command == 'generate':
        if args.workers:
            cfg = cfg.model_copy(update={"workers": args.workers})
        experiments.cmd_generate(cfg, verbose=verbose)
    elif args.command == 'train':
        experiments.cmd_train(cfg, dataset_dir=args.dataset, resume=args.resume, verbose=verbose)
    elif args.command == 'eval':
        experiments.cmd_eval(cfg, checkpoint=args.checkpoint, dataset_dir=args.dataset, split=args.split,
                             fresh=not args.no_fresh, perfect=args.perfect, verbose=verbose)
    elif args.command == 'horizon-study':
        experiments.cmd_horizon_study(cfg, checkpoint=args.checkpoint, t_grid=args.t_grid,
                                      n_traj=args.n, verbose=verbose)
    elif args.command == 'input-dist-study':
        experiments.cmd_input_dist_study(cfg, checkpoint=args.checkpoint, n_traj=args.n, verbose=verbose)
    elif args.command == 'excitability':
        experiments.cmd_excitability(cfg, checkpoint=args.checkpoint, schedule=args.schedule, verbose=verbose)
    elif args.command == 'sweep':
        experiments.cmd_sweep(cfg, amplitudes=args.amplitudes, verbose=verbose)


def main(argv: Optional[List[str]] = None) -> int:
    """CLI principal"""
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        run(args)
        return 0
    except FlujosError as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return 1


if __name__ == '__main__':
    sys.exit(main())
