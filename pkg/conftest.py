"""Configuración de pytest: el repo en sys.path para importar flujos y cli"""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))
