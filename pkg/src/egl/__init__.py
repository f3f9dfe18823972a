"""Black-box optimization by learning the mean-gradient of the objective."""

from egl.baselines import nelder_mead, random_search
from egl.core import ExplorationBatch, ReplayBuffer, Rng, RunRecord
from egl.gradnet import NotPoised, ls_mean_gradient
from egl.objectives import BudgetedObjective, BudgetExhausted, Objective, make_benchmark
from egl.optimizer import ConvergentEglConfig, EglConfig, run_convergent_egl, run_egl, run_igl

__all__ = [
    "BudgetExhausted", "BudgetedObjective", "ConvergentEglConfig", "EglConfig", "ExplorationBatch",
    "NotPoised", "Objective", "ReplayBuffer", "Rng", "RunRecord", "ls_mean_gradient", "make_benchmark",
    "nelder_mead", "random_search", "run_convergent_egl", "run_egl", "run_igl",
]
__version__ = "0.1.0"
