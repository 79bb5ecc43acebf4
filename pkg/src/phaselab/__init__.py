"""Multiphase phase-field laboratory with explicit super-timestepping."""

from .grid import (ContourSegmentSet, Grid, ScalarField, SparsePhaseField,
                   dump_fields, flux_divergence, half_crossing, integrate,
                   laplacian, load_fields, marching_squares)
from .model import (KksSystem, ModelParams, Partition, PhysicalParams, State,
                    concentration_rhs, derive_model_params, free_energy,
                    grand_potential, kks_partition, phase_rhs, profile,
                    simplex_project, thin_interface_mobility)
from .integrators import (OdeSystem, RhsCounter, StsCoeffs, Tolerances,
                          feuler_step, sommeijer_error, ssp104_step,
                          ssp2_step, sts_coeffs, sts_step,
                          weighted_error_norm)
from .stepcontrol import (ControllerState, EigEstimate, gershgorin_bounds,
                          pid_update, sts_stage_count, validate_bounds)
from .benchmarks import (BenchmarkReport, BenchmarkSpec, IntegratorConfig,
                         build_embedding, build_single_grain, build_stefan,
                         build_triple_junction, concentration_shift,
                         dihedral_angle, run_benchmark, stefan_fit,
                         stefan_growth_constant, theta_eq)

__version__ = "0.1.0"
