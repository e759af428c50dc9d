"""
Errores de flujos
Cada clase define el código de salida que usa el CLI
"""


class FlujosError(Exception):
    """Error base del paquete"""
    exit_code = 1


class ConfigError(FlujosError):
    """Configuración inválida: sistema desconocido, claves mal escritas, valores fuera de rango"""
    exit_code = 2


class DataFormatError(FlujosError):
    """Dataset o checkpoint con formato inválido o incompatible"""
    exit_code = 3


class ShapeError(DataFormatError, ValueError):
    """Dimensiones de entrada que no coinciden con la red"""


class SignalExhaustedError(DataFormatError, IndexError):
    """Se pidió un instante fuera del horizonte que cubre la señal"""


class NumericError(FlujosError):
    """Falla numérica (integración o entrenamiento)"""
    exit_code = 4


class StiffnessError(NumericError):
    """El integrador no pudo avanzar (paso demasiado chico)"""


class TrainingDivergenceError(NumericError):
    """Loss o gradiente no finito durante el entrenamiento"""
