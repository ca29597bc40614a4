"""Galerkin simulation of elastic and poroelastic bodies with repulsive
electrostatic self-interaction at large strains."""

from .basis import ReferenceDomain, GalerkinBasis, QuadratureRule, build_basis, quadrature
from .kinematics import (DeformationState, DetReport, gradients, cof_inv,
                         div_inv_transpose, det_monitor, preimages,
                         area_formula_residual, pushforward_density,
                         pushforward_total)
from .energy import (StoredEnergyModel, NonlocalKernel, NonlocalOperator,
                     stored_energy, stress, mech_force, mech_energy)
from .electrostatics import (ElectrostaticParams, SpatialMesh, PotentialField,
                             CouplingQuadrature, solve_potential,
                             electrostatic_energy, dual_value, maxwell_stress)
from .dynamics import (LoadSpec, System, SimulationState, StepRejected,
                       mass_matrix, kinetic_energy, electro_force, step,
                       residual, static_equilibrium)
from .diffusion import (DiffusionParams, DiffusionState, chemical_potential,
                        mobility_pullback, diffusion_step, dissipation_rate,
                        darcy_fick_split, variational_inequality_residual)
from .diagnostics import EnergyLedger, ledger_update, total_energy, convergence_study
from .scenario import Scenario, ScenarioError, parse_scenario
from .runner import run, run_path

__version__ = "0.1.0"
