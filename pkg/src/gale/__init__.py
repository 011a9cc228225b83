"""Multimodal wind and acceleration forecasting for bridge decks, with the tools around it.

Modules: ``tensor`` (autodiff), ``bench`` (synthetic deck), ``preprocess``,
``models``, ``training``, ``evaluation``, ``anomaly``, ``io`` (file
formats), ``pipeline`` (desk-scale workflow) and ``cli``.
"""

__version__ = "0.1.0"
