"""Rough viscosity PDEs solved by flow transformation."""
from .roughpath import (SignatureElement, RoughDriver, MeshSpec, chen_concat, lift_smooth,
                        p_variation_distance, sample_brownian, piecewise_linear_driver,
                        twisted_driver, pure_area_driver, identity_driver)
from .vecfield import VectorFieldSet, BracketSpec, lie_bracket, iterated_bracket, named_fields
from .flow import FlowSolution, solve_flow_rough, solve_flow_smooth, inverse_transform_data
from .operators import Operator, TransformedOperator, eval_operator, transform_operator, \
    check_ellipticity, check_modulus
from .pdesolve import Grid, Field, cfl_dt, step, solve_pde, sup_distance
from .rpde import RPDEProblem, StudyReport, solve_rpde, wong_zakai_study, contraction_check, \
    twisted_study

__version__ = "0.1.0"
