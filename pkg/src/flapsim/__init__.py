"""Simulation, reinforcement-learning control and analysis of a five-joint flapping-wing robot."""

__version__ = "0.1.0"
