"""Ultraweak DPG discretizations (Poisson, Stokes, linearized Navier-Stokes)
solved by conjugate gradients with a geometric multigrid preconditioner
built from field-aware prolongation, static condensation, and weighted
overlapping additive Schwarz smoothing."""

__version__ = "0.1.0"
