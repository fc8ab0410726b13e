"""Frozen solver budgets and calibrated constants.

The calibrated values come from ``scripts/calibrate.py``; rerunning it prints the
measured worst cases next to the frozen numbers.  Every report embeds
``TUNABLES.as_dict()`` so runs are reproducible.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class Tunables:
    # simplex search
    nm_iterations: int = 200
    nm_restarts: int = 3
    nm_initial_step: float = 0.05
    batch_nm_iterations: int = 120
    batch_chunk: int = 8192
    seed_t_weight: float = 1.0
    # coarse plane grid of strong_vertical_beta: 2 * grid_half_steps + 1 values per axis
    grid_half_steps: int = 64
    sigma_grid_max: float = 4.0
    # sampling of balls in the corona sweep
    corona_lines: int = 5
    corona_samples: int = 9
    # samples per line when a per-line constant c is fitted for a fixed plane
    quadric_samples: int = 17
    # fixed batch size of the corona sweep; independent of the worker count
    sweep_chunk: int = 16384
    # calibrated constants
    # seeds this many times above the Bad threshold are Bad without polishing;
    # polishing never lowered a seed by more than about 10x in calibration
    polish_ceiling: float = 32.0
    snap_constant: float = 4.0
    quadric_c1: float = 5.0
    quadric_c2: float = 8.0
    quadric_c3: float = 4.0
    line_stability_c: float = 8.0
    ruler_to_beta_C: float = 4.0
    ruler_to_beta_delta: float = 0.02
    ruler_to_beta_eps: float = 0.25
    bvp_delta_base: float = 0.25
    projection_c: float = 2.0
    bump_c1: float = 571.0
    bump_c2: float = 75640.0

    def as_dict(self) -> dict:
        return asdict(self)


TUNABLES = Tunables()
