"""Finite elements with trainable neural enrichment functions.

A stable-GFEM solver whose per-node enrichment functions are small
sine-activated networks trained by minimizing the Ritz energy of the
discrete solution, with residual-based adaptivity and an interface-aware
input channel for problems with weak discontinuities.
"""

from .assembly import (AssembledSystem, Assembler, apply_dirichlet, assemble,
                       ritz_loss)
from .driver import (RunConfig, RunResult, TrainingHistory, default_config,
                     load_run, run_adaptive_nefem, run_nefem, save_run)
from .estimator import EstimatorField, doerfler_mark, estimate, percentage_mark
from .linsolve import SolverConfig, scaled_condition_number, solve_spd
from .mesh import (InterfaceGeometry, Mesh, build_structured_mesh,
                   classify_interface_elements, locate_point)
from .network import (AdamState, MlpEnrichment, adam_step, init_network,
                      load_networks, save_networks)
from .problems import (ProblemSpec, ReferenceField, error_norms, example1,
                       example2, example3, fem_reference)
from .quadrature import (CutRule, QuadratureRule, cut_element_rule, edge_rule,
                         map_rule, reference_rule)
from .space import AnalyticEnrichment, EnrichmentSpace, build_space

__version__ = "0.1.0"
