"""Sparse and functional principal components analysis.

Rank-one factors ``d u v'`` that combine sparsity penalties with smoothness
(elliptical-norm) constraints, fitted by alternating proximal steps and
stacked by deflation.
"""

__version__ = "0.1.0"

from .core import (
    DataMatrix,
    ModelFit,
    RankOneFactor,
    SFPCAConfig,
    deflate,
    fit,
    fit_rank_one,
    init_rank1,
    inner_ascent,
    objective,
    rescale,
    smooth_gradient,
    smooth_loss,
    sparsity_threshold,
)
from .exceptions import ConvergenceWarning, DimensionError, SFPCAError, StructureMatrixError
from .modelsel import ParamGrid, SelectionResult, bic_score, df_l1, nested_select
from .prox import PenaltySpec, penalty_value, prox, prox_nonneg, soft_threshold
from .simlab import (
    EvalReport,
    SimScenario,
    SimTruth,
    gen_data,
    gen_signal,
    roc_sweep,
    score,
    svd_baseline,
)
from .structmat import (
    SmoothOperator,
    StructureMatrix,
    chain_diff_matrix,
    grid_diff_matrix,
    largest_eigenvalue,
    load_structure_matrix,
    save_structure_matrix,
)
