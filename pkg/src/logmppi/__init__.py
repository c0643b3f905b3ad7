"""MPPI and log-MPPI sampling-based model predictive control.

Submodules: ``sampling`` (Gaussian and normal times log-normal noise),
``dynamics``, ``costs``, ``controller``, ``costmap``, ``world`` (forests,
corridors and the closed-loop simulator), ``experiments`` and ``cli``.
"""

__version__ = "0.1.0"
