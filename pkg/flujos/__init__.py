"""
flujos - Aprendizaje de funciones de flujo de sistemas de control
"""
__version__ = "1.0.0"
