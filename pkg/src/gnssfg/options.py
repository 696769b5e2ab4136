from dataclasses import dataclass


@dataclass(frozen=True)
class SolverOptions:
    """Stopping rules and damping schedule shared by all iterative solvers.

    Iteration stops when any of the following holds: the absolute cost change is
    below ``abs_cost_tol``, the relative cost change is below ``rel_cost_tol``,
    or the step norm is below ``step_tol``.
    """

    max_iterations: int = 50
    abs_cost_tol: float = 1e-12
    rel_cost_tol: float = 1e-9
    step_tol: float = 1e-10
    lm_initial_lambda: float = 1e-4
    lm_lambda_factor: float = 10.0
    lm_max_lambda: float = 1e12

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        for name in ("abs_cost_tol", "rel_cost_tol", "step_tol", "lm_initial_lambda"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not self.lm_lambda_factor > 1:
            raise ValueError("lm_lambda_factor must be > 1")
