"""Compiled high-order Magnus expansions for ``H(t) = A + d(t) B``.

The package builds the Lie algebra generated by ``A`` and ``B``, compiles
the truncated Magnus expansion into sparse polynomial coefficients over
that algebra, and uses the result for simulation and for spline-based
gradient pulse optimisation.
"""
from .coeffs import CoeffTensor, build_coefficients, load_artifact, read_artifact, save_artifact
from .control import ControlProblem, build_problem, evaluate, minimize, rydberg_problem, sweep_ckp
from .errors import MagnusError
from .evaluate import EffectiveHamiltonian, effective_hamiltonian, eval_coeffs, propagate
from .lie import LieBasis, StructureConstants, compute_structure_constants, generate_lie_algebra
from .models import build_model, ckp_gate
from .spline import HermiteSpline, read_spline, write_spline

__version__ = "0.1.0"

__all__ = [
    "CoeffTensor",
    "ControlProblem",
    "EffectiveHamiltonian",
    "HermiteSpline",
    "LieBasis",
    "MagnusError",
    "StructureConstants",
    "build_coefficients",
    "build_model",
    "build_problem",
    "ckp_gate",
    "compute_structure_constants",
    "effective_hamiltonian",
    "eval_coeffs",
    "evaluate",
    "generate_lie_algebra",
    "load_artifact",
    "minimize",
    "propagate",
    "read_artifact",
    "read_spline",
    "rydberg_problem",
    "save_artifact",
    "sweep_ckp",
    "write_spline",
]
