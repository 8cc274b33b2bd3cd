"""Steering of driftless nonholonomic systems by sinusoidal controls.

The package builds Hall bases of the free Lie algebra, puts control
systems into privileged coordinates, lifts them to free nilpotent form,
steers the nilpotent model exactly with sinusoids, and wraps the lot in
a globally convergent iterative planner.
"""

__version__ = "0.1.0"
