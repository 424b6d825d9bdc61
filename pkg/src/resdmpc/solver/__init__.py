"""In-house nonlinear programming: SQP driver, QP backends, l1 splitting, derivatives."""

from .derivatives import fd_jacobian, fd_jacobian_batched
from .l1 import L1Split, l1_split
from .nlp import NlpProblem, SolveReport, Status, solve
from .qp import QpResult, solve_qp_dense, solve_qp_sparse

__all__ = [
    "L1Split", "NlpProblem", "QpResult", "SolveReport", "Status", "fd_jacobian",
    "fd_jacobian_batched", "l1_split", "solve", "solve_qp_dense", "solve_qp_sparse",
]
