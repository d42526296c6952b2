"""Dynamic structured sparsity as a compressed-sensing problem.

Random sketches of a layer's features are decoded into hardware-admissible
supports by structured sparse recovery; an entropy-driven controller sizes
the sketch and a joint allocator trades prompt compression against sparsity.
"""

__version__ = "0.1.0"

from ._validation import (CapacityError, DegenerateInputError, InvalidArgumentError,
                          NumericalFailureError, derive_seed)
from .controller import (ControllerConfig, StabilityReport, adapt_budget, budget_admissible,
                         predictive_entropy, sensing_cost, stability_gain)
from .dictionary import (FeasibleFamily, StructuredDictionary, StructuredUnit, SupportSet,
                         build_synthetic_dictionary, enumerate_family, is_admissible,
                         project_support, support_drift, support_prf)
from .estimators import GroupLassoRecovery, StructuredOMP
from .recovery import (ErrorCurve, RecoveryConfig, RecoveryResult, effective_matrix,
                       fit_error_curve, omp_structured, prox_group_lasso, recover_incremental)
from .sensing import (MeasurementOperator, Sketch, coherence_sparsity_bound, draw_operator,
                      empirical_rip, measure, mutual_coherence, sample_complexity)

__all__ = [name for name in dir() if not name.startswith("_")]
