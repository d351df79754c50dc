"""Vectorial shortening operators, Orlicz N-functions and De Giorgi certificates."""
from .grid import Grid, VectorField
from .local_energy import LocalProblem, local_energy, local_energy_gradient, solve_local
from .nfunc import CapabilityError, DomainError, NFunction
from .nonlocal_energy import FarField, KernelTable, NonlocalProblem, solve_nonlocal, tail
from .report import Check, CertificateReport
from .solver import SolverStagnation
from .vecops import Ball, Hull, project, shorten, truncate

__all__ = ["Ball", "CapabilityError", "Check", "CertificateReport", "DomainError", "FarField",
           "Grid", "Hull", "KernelTable", "LocalProblem", "NFunction", "NonlocalProblem",
           "SolverStagnation", "VectorField", "local_energy", "local_energy_gradient", "project",
           "shorten", "solve_local", "solve_nonlocal", "tail", "truncate"]

__version__ = "0.1.0"
