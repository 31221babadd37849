"""Offline RL laboratory: advantage-filtered behavioral cloning with
advantage-prioritized experience sampling on desk-scale control tasks.
"""

__version__ = "0.1.0"
