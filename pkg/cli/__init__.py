"""CLI de flujos: generate, train, eval, predict, estudios y excitabilidad"""
