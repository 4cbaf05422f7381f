"""Platoon scheduling at unsignalized intersections with parallel neural MCTS."""

__version__ = "0.1.0"
