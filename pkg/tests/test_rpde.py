import json
import math

import numpy as np
import pytest

from roughvisc.flow import solve_flow_rough
from roughvisc.operators import heat_operator, hjb_operator, zero_operator
from roughvisc.pdesolve import Field, Grid, interpolate, solve_pde, sup_distance
from roughvisc.roughpath import (MeshSpec, identity_driver, lift_smooth, p_variation_distance,
                                 piecewise_linear_driver, sample_brownian)
from roughvisc.rpde import (DomainExitWarning, RPDEProblem, contraction_check, drift_corrected_problem,
                            shifted_piecewise_linear, solve_rpde, twisted_study, wong_zakai_study)
from roughvisc.vecfield import constant_fields, sin_cos_fields

pytestmark = pytest.mark.filterwarnings("ignore::roughvisc.rpde.DomainExitWarning")

S2 = 0.1
ONE = constant_fields([[1.0]])


def gauss(x):
    return np.exp(-x[:, 0] ** 2 / (2 * S2))


def bump(x):
    return np.exp(-2 * x[:, 0] ** 2)


def smooth_z(T=0.5, K=64):
    t = np.linspace(0, T, K + 1)
    return t, 0.6 * np.sin(5 * t) + 0.3 * t


def test_problem_validation():
    g = Grid(1, 2.0, 0.1)
    u0 = Field.initial(g, gauss)
    with pytest.raises(ValueError):
        RPDEProblem(heat_operator(2), ONE, identity_driver(1), u0)
    with pytest.raises(ValueError):
        RPDEProblem(heat_operator(1), ONE, identity_driver(2), u0)


def test_identity_driver_bit_for_bit():
    g = Grid(1, 3.0, 0.05, 0.2)
    u0 = Field.initial(g, gauss)
    out = [0.05, 0.1, 0.2]
    u = solve_rpde(RPDEProblem(heat_operator(1), ONE, identity_driver(1, 0.2, 8), u0, out))
    v = solve_pde(heat_operator(1), u0, 0.2, out)
    assert np.array_equal(u.values, v.values) and np.array_equal(u.times, v.times)


def test_transport_golden():
    g = Grid(1, 4.0, 0.01, 0.5)
    t, z = smooth_z()
    u = solve_rpde(RPDEProblem(zero_operator(1), ONE, lift_smooth(t, z), Field.initial(g, bump), [0.25, 0.5]))
    for s in (0.25, 0.5):
        zs = np.interp(s, t, z)
        assert np.max(np.abs(u.slice_at(s) - bump(g.nodes - zs))) <= 1e-3


def test_heat_shift_golden():
    g = Grid(1, 4.0, 0.02, 0.25)
    t, z = smooth_z(0.25, 32)
    u = solve_rpde(RPDEProblem(heat_operator(1), ONE, lift_smooth(t, z), Field.initial(g, gauss)))
    var = S2 + 2 * 0.25
    exact = math.sqrt(S2 / var) * np.exp(-(g.axis - z[-1]) ** 2 / (2 * var))
    assert np.max(np.abs(u.final - exact)) <= 5e-3


def test_driver_reversal_recovers_initial_data():
    g = Grid(1, 4.0, 0.02, 1.0)
    drv = piecewise_linear_driver(sample_brownian(5, 2, MeshSpec(1.0, 8)), 6)
    V = sin_cos_fields()
    u0 = Field.initial(g, bump)
    uT = solve_rpde(RPDEProblem(zero_operator(1), V, drv, u0))
    back = solve_rpde(RPDEProblem(zero_operator(1), V, drv.reversed(), Field(g, [0.0], uT.final[None])))
    # each composition's own interpolation error against the exact pullback;
    # interpolation is an averaging, so the first error passes through the second stage unamplified
    flow = solve_flow_rough(V, drv)
    pulled = bump(flow.inverse(1.0, g.nodes))
    e1 = np.max(np.abs(uT.final.ravel() - pulled))
    e2 = np.max(np.abs(interpolate(g, pulled.reshape(g.shape), flow.forward(1.0, g.nodes))[0] - u0.final.ravel()))
    assert np.max(np.abs(back.final - u0.final)) <= e1 + e2 + 1e-6
    assert np.max(np.abs(back.final - u0.final)) <= 2 * max(e1, e2) + 1e-6


def test_approximating_sequence_independence():
    # single samples are noisy at rate 2^{-k/2}; the median over a fixed seed set shrinks with k
    g = Grid(1, 4.0, 0.02, 1.0)
    V = sin_cos_fields()
    u0 = Field.initial(g, bump)
    gaps = np.zeros((8, 4))
    for seed in range(8):
        fine = sample_brownian(seed, 2, MeshSpec(1.0, 11))
        for q, k in enumerate((3, 5, 7, 9)):
            a = solve_rpde(RPDEProblem(zero_operator(1), V, piecewise_linear_driver(fine, k), u0))
            b = solve_rpde(RPDEProblem(zero_operator(1), V, shifted_piecewise_linear(fine, k), u0))
            gaps[seed, q] = sup_distance(a, b)
    med = np.median(gaps, axis=0)
    assert np.all(np.diff(med) < 0)


def test_continuity_ladder():
    g = Grid(1, 4.0, 0.02, 1.0)
    V = sin_cos_fields()
    base = piecewise_linear_driver(sample_brownian(2, 2, MeshSpec(1.0, 8)), 6)
    t = base.times
    wiggle = np.stack([np.sin(7 * t), np.cos(3 * t) - 1], 1)
    u0 = Field.initial(g, bump)
    ref = solve_rpde(RPDEProblem(zero_operator(1), V, base, u0))
    dists, pvars = [], []
    for eps in (0.2, 0.05, 0.0125):
        drv = lift_smooth(t, base.level1 + eps * wiggle)
        pvars.append(p_variation_distance(drv, base))
        dists.append(sup_distance(solve_rpde(RPDEProblem(zero_operator(1), V, drv, u0)), ref))
    assert pvars[0] > pvars[1] > pvars[2]
    assert dists[0] > dists[1] > dists[2]


def test_domain_exit_warning():
    g = Grid(1, 1.0, 0.05, 1.0)
    t = np.linspace(0, 1, 9)
    with pytest.warns(DomainExitWarning):
        u = solve_rpde(RPDEProblem(zero_operator(1), ONE, lift_smooth(t, 0.5 * t), Field.initial(g, bump)))
    assert u.meta["exit_fraction"] == pytest.approx(0.25, abs=0.03)


def test_wong_zakai_smooth_driver_has_zero_distances():
    g = Grid(1, 3.0, 0.05, 1.0)
    t4 = np.linspace(0, 1, 17)
    t8 = np.linspace(0, 1, 257)
    path = np.stack([np.interp(t8, t4, np.sin(3 * t4)), np.interp(t8, t4, t4 ** 2)], 1)
    rep = wong_zakai_study(zero_operator(1), sin_cos_fields(), Field.initial(g, bump), 0,
                           [4, 5, 6], fine=lift_smooth(t8, path))
    # identical paths; what remains is the flow integrator's own tolerance
    assert max(rep.column("consecutive")[:-1]) <= 1e-6
    assert max(rep.column("to_fine")) <= 1e-6


def test_wong_zakai_commutative_levels_agree_at_mesh_times():
    g = Grid(1, 4.0, 0.02, 1.0)
    rep = wong_zakai_study(zero_operator(1), ONE, Field.initial(g, bump), 3, [3, 4, 5], fine_level=7)
    # each level is exact transport at level-3 mesh times; only interpolation error remains
    assert max(rep.column("consecutive")[:-1]) <= 1e-3
    doc = json.loads(rep.to_json())
    assert doc["levels"] == [3, 4, 5] and rep.to_csv().startswith("level,")


def test_wong_zakai_rejects_unsorted_levels():
    g = Grid(1, 1.0, 0.1)
    with pytest.raises(ValueError):
        wong_zakai_study(zero_operator(1), ONE, Field.initial(g, bump), 0, [5, 4])


HJB = hjb_operator(1, lambda t, x, g: np.full((x.shape[0], 1, 1), g[0]),
                   lambda t, x, g: np.full((x.shape[0], 1), g[1]), [(0.5, 1.0), (0.2, -1.0)])


def test_contraction_constant_shift():
    g = Grid(1, 3.0, 0.05, 0.5)
    drv = piecewise_linear_driver(sample_brownian(1, 2, MeshSpec(0.5, 8)), 5)
    u0 = Field.initial(g, bump)
    same = contraction_check(HJB, sin_cos_fields(), drv, u0, u0)
    assert same.distance == 0.0 and same.passed
    shifted = contraction_check(HJB, sin_cos_fields(), drv, u0, u0.with_values([0.0], u0.values + 0.3))
    assert shifted.distance == pytest.approx(0.3, abs=1e-12) and shifted.passed


def test_contraction_random_perturbation():
    g = Grid(1, 3.0, 0.05, 0.5)
    drv = piecewise_linear_driver(sample_brownian(9, 2, MeshSpec(0.5, 8)), 5)
    rng = np.random.default_rng(0)
    u0 = Field.initial(g, bump)
    pert = u0.with_values([0.0], u0.values + 0.2 * rng.uniform(-1, 1, u0.values.shape))
    rep = contraction_check(HJB, sin_cos_fields(), drv, u0, pert)
    assert rep.passed and rep.witness is None


def test_drift_corrected_zero_driver_is_transport():
    # V_a = [V1, V2] = -1, so du = Du dt and u = u0(x + t)
    g = Grid(1, 4.0, 0.02, 1.0)
    prob = drift_corrected_problem(zero_operator(1), sin_cos_fields(), identity_driver(2, 1.0, 16),
                                   Field.initial(g, bump), 0, 1)
    u = solve_rpde(prob)
    assert np.max(np.abs(u.final - bump(g.nodes + 1.0))) <= 1e-2


def test_twisted_without_loops_matches_wong_zakai():
    g = Grid(1, 3.0, 0.05, 1.0)
    u0 = Field.initial(g, bump)
    tw = twisted_study(zero_operator(1), sin_cos_fields(), u0, 4, [3, 4], fine_level=6, loops=False)
    fine = sample_brownian(4, 2, MeshSpec(1.0, 6))
    out = [i / 8 for i in range(1, 9)]
    plain = solve_rpde(RPDEProblem(zero_operator(1), sin_cos_fields(), fine, u0, out))
    for row, k in zip(tw.rows, (3, 4)):
        u = solve_rpde(RPDEProblem(zero_operator(1), sin_cos_fields(), piecewise_linear_driver(fine, k), u0, out))
        assert row["to_uncorrected"] == pytest.approx(sup_distance(u, plain), abs=1e-12)


def test_twisted_zero_driver_tracks_corrected_equation():
    g = Grid(1, 4.0, 0.04, 1.0)
    rep = twisted_study(zero_operator(1), sin_cos_fields(), Field.initial(g, bump), None, [4, 6],
                        out_times=[0.5, 1.0])
    d = rep.column("to_corrected")
    assert d[1] < d[0] and rep.summary["ratio_check"]
