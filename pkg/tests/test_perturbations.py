import io

import numpy as np
import pytest

from pmpkit.cone_geometry import GeneratedCone, conic_membership
from pmpkit.control_system import (
    ControlSignal,
    ControlSystem,
    box,
    constant_signal,
    simulate,
)
from pmpkit.flows import IntegratorConfig
from pmpkit.perturbations import (
    NeedleData,
    NeedleLayoutError,
    PerturbationCone,
    PerturbationVector,
    Provenance,
    RealizationError,
    RealizationOptions,
    TimePerturbationData,
    apply_needle,
    apply_needle_suite,
    build_initial_cone,
    build_tangent_cone,
    build_time_cone,
    class1_vector,
    cone_transport_check,
    multi_needle_vector,
    realize_direction,
    time_perturbation_vector,
    transport_vector,
)


def double_integrator():
    return ControlSystem(
        m=2, k=1,
        f=lambda x, u: np.array([x[1], u[0]]),
        df_dx=lambda x, u: np.array([[0.0, 1.0], [0.0, 0.0]]),
        control_set=box([-1.0], [1.0]),
    )


def scalar_integrator():
    return ControlSystem(
        m=1, k=1,
        f=lambda x, u: np.array([u[0]]),
        df_dx=lambda x, u: np.zeros((1, 1)),
        control_set=box([-1.0], [1.0]),
    )


def rest_trajectory(b=1.0):
    return simulate(double_integrator(), constant_signal(0.0, b, [0.0]), [0.0, 0.0])


class TestApplyNeedle:
    def test_zero_length_noop(self):
        u = constant_signal(0.0, 2.0, [0.0])
        assert apply_needle(u, NeedleData(1.0, 0.0, [1.0]), 0.1) is u

    def test_single_needle_window(self):
        u = constant_signal(0.0, 2.0, [0.0])
        out = apply_needle(u, NeedleData(1.0, 1.0, [1.0]), 0.1)
        assert out.value_at(0.85)[0] == 0.0
        assert out.value_at(0.95)[0] == 1.0
        assert out.value_at(1.05)[0] == 0.0
        assert out.switch_times == (0.9, 1.0)

    def test_stacked_same_time_later_innermost(self):
        u = constant_signal(0.0, 2.0, [0.0])
        out = apply_needle_suite(
            u,
            [NeedleData(1.0, 1.0, [2.0]), NeedleData(1.0, 0.5, [3.0])],
            0.1,
        )
        # later-listed needle occupies [0.95, 1.0], first one [0.85, 0.95]
        assert out.value_at(0.9)[0] == 2.0
        assert out.value_at(0.97)[0] == 3.0
        assert out.value_at(0.8)[0] == 0.0
        assert out.value_at(1.01)[0] == 0.0

    def test_overlap_rejected(self):
        u = constant_signal(0.0, 2.0, [0.0])
        with pytest.raises(NeedleLayoutError):
            apply_needle_suite(
                u,
                [NeedleData(1.0, 1.0, [1.0]), NeedleData(0.95, 1.0, [1.0])],
                0.1,
            )

    def test_escape_rejected(self):
        u = constant_signal(0.0, 2.0, [0.0])
        with pytest.raises(NeedleLayoutError):
            apply_needle(u, NeedleData(0.05, 1.0, [1.0]), 0.1)

    def test_needle_equal_to_reference_is_invisible(self):
        u = constant_signal(0.0, 2.0, [0.0])
        out = apply_needle(u, NeedleData(1.0, 1.0, [0.0]), 0.1)
        assert out.switch_times == ()


class TestClass1Vector:
    def test_double_integrator_formula(self):
        traj = rest_trajectory()
        v = class1_vector(double_integrator(), traj, NeedleData(0.5, 1.0, [1.0]))
        assert np.allclose(v.vector, [0.0, 1.0], atol=1e-12)
        assert v.base_time == 0.5

    def test_reference_control_gives_zero(self):
        traj = rest_trajectory()
        v = class1_vector(double_integrator(), traj, NeedleData(0.5, 1.0, [0.0]))
        assert np.array_equal(v.vector, [0.0, 0.0])

    def test_positive_homogeneity_exact(self):
        traj = rest_trajectory()
        v1 = class1_vector(double_integrator(), traj, NeedleData(0.5, 1.0, [1.0]))
        v2 = class1_vector(double_integrator(), traj, NeedleData(0.5, 2.0, [1.0]))
        assert np.array_equal(v2.vector, 2.0 * v1.vector)

    def test_switch_time_rejected(self):
        sys = double_integrator()
        u = ControlSignal(a=0.0, b=1.0, switch_times=(0.5,),
                          values=(np.array([0.0]), np.array([1.0])))
        traj = simulate(sys, u, [0.0, 0.0])
        with pytest.raises(ValueError):
            class1_vector(sys, traj, NeedleData(0.5, 1.0, [1.0]))


class TestTransport:
    def test_identity_at_base_time(self):
        traj = rest_trajectory()
        v = PerturbationVector(0.5, np.array([1.0, 2.0]))
        out = transport_vector(double_integrator(), traj, v, 0.5)
        assert np.array_equal(out.vector, [1.0, 2.0])

    def test_nilpotent_closed_form(self):
        traj = rest_trajectory()
        out = transport_vector(double_integrator(), traj,
                               PerturbationVector(0.25, np.array([0.0, 1.0])), 1.0)
        assert np.allclose(out.vector, [0.75, 1.0], atol=1e-9)

    def test_zero_stays_zero(self):
        traj = rest_trajectory()
        out = transport_vector(double_integrator(), traj,
                               PerturbationVector(0.25, np.zeros(2)), 1.0)
        assert np.array_equal(out.vector, [0.0, 0.0])

    def test_backward_rejected(self):
        traj = rest_trajectory()
        with pytest.raises(ValueError):
            transport_vector(double_integrator(), traj,
                             PerturbationVector(0.5, np.ones(2)), 0.25)


class TestMultiNeedle:
    def test_single_equals_transport(self):
        sys = double_integrator()
        traj = rest_trajectory()
        pi = NeedleData(0.3, 1.0, [1.0])
        lhs = multi_needle_vector(sys, traj, [pi], 1.0)
        rhs = transport_vector(sys, traj, class1_vector(sys, traj, pi), 1.0)
        assert np.allclose(lhs.vector, rhs.vector, atol=1e-12)

    def test_same_time_additivity(self):
        sys = double_integrator()
        traj = rest_trajectory()
        pis = [NeedleData(0.3, 1.0, [1.0]), NeedleData(0.3, 0.5, [-1.0])]
        total = multi_needle_vector(sys, traj, pis, 1.0)
        parts = [transport_vector(sys, traj, class1_vector(sys, traj, p), 1.0).vector
                 for p in pis]
        assert np.allclose(total.vector, parts[0] + parts[1], atol=1e-12)

    def test_unordered_rejected(self):
        sys = double_integrator()
        traj = rest_trajectory()
        with pytest.raises(ValueError):
            multi_needle_vector(sys, traj,
                                [NeedleData(0.6, 1.0, [1.0]), NeedleData(0.3, 1.0, [1.0])],
                                1.0)

    def test_time_beyond_eval_rejected(self):
        sys = double_integrator()
        traj = rest_trajectory()
        with pytest.raises(ValueError):
            multi_needle_vector(sys, traj, [NeedleData(0.9, 1.0, [1.0])], 0.5)


class TestTimePerturbationVector:
    def test_zero_delta_reduces_to_class1(self):
        sys = double_integrator()
        traj = rest_trajectory()
        tp = time_perturbation_vector(sys, traj, TimePerturbationData(0.5, 1.0, 0.0, [1.0]))
        c1 = class1_vector(sys, traj, NeedleData(0.5, 1.0, [1.0]))
        assert np.array_equal(tp.vector, c1.vector)

    def test_pure_time_shift_gives_drift(self):
        sys = double_integrator()
        traj = simulate(sys, constant_signal(0.0, 1.0, [1.0]), [0.0, 0.0])
        tp = time_perturbation_vector(sys, traj, TimePerturbationData(0.5, 0.0, 1.0, [1.0]))
        assert np.allclose(tp.vector, [0.5, 1.0], atol=1e-9)

    def test_combined_formula(self):
        # gamma(0.5) = (0, 1) under zero control from x0 = (-0.5, 1)
        sys = double_integrator()
        traj = simulate(sys, constant_signal(0.0, 1.0, [0.0]), [-0.5, 1.0])
        tp = time_perturbation_vector(sys, traj,
                                      TimePerturbationData(0.5, 1.0, 0.5, [1.0]))
        assert np.allclose(tp.vector, [0.5, 1.0], atol=1e-9)


class TestTangentCone:
    def test_reference_only_sampling_gives_origin(self):
        sys = double_integrator()
        traj = rest_trajectory()
        cone = build_tangent_cone(sys, traj, 1.0,
                                  {"times": [0.5], "controls": [[0.0]]})
        assert cone.cone.generators == []
        assert conic_membership(cone.cone, [0.0, 0.0]) == "interior"

    def test_scalar_integrator_spans_line(self):
        sys = scalar_integrator()
        traj = simulate(sys, constant_signal(0.0, 1.0, [0.0]), [0.0])
        cone = build_tangent_cone(sys, traj, 1.0,
                                  {"times": [0.5], "controls": [[-1.0], [1.0]]})
        gens = sorted(g[0] for g in cone.cone.generators)
        assert np.allclose(gens, [-1.0, 1.0], atol=1e-12)
        assert conic_membership(cone.cone, [0.3]) == "interior"

    def test_double_integrator_generators_closed_form(self):
        sys = double_integrator()
        traj = rest_trajectory()
        cone = build_tangent_cone(sys, traj, 1.0,
                                  {"times": [0.25, 0.5, 0.75], "controls": [[-1.0], [1.0]]})
        want = []
        for tau in (0.25, 0.5, 0.75):
            want.append(np.array([1.0 - tau, 1.0]))
            want.append(-np.array([1.0 - tau, 1.0]))
        assert len(cone.cone.generators) == 6
        for g, p in zip(cone.cone.generators, cone.provenance):
            expect = p.needle.u1[0] * np.array([1.0 - p.needle.t1, 1.0])
            assert np.allclose(g, expect, atol=1e-9)
        assert conic_membership(cone.cone, [0.6, 1.0]) == "interior"

    def test_empty_sampling_rejected(self):
        sys = double_integrator()
        traj = rest_trajectory()
        with pytest.raises(ValueError):
            build_tangent_cone(sys, traj, 1.0, {"times": [], "controls": [[1.0]]})
        with pytest.raises(ValueError):
            build_tangent_cone(sys, traj, 1.0, {"times": [0.5], "controls": []})

    def test_monotone_in_sampling(self):
        sys = double_integrator()
        traj = rest_trajectory()
        small = build_tangent_cone(sys, traj, 1.0,
                                   {"times": [0.25, 0.5], "controls": [[-1.0], [1.0]]})
        big = build_tangent_cone(sys, traj, 1.0,
                                 {"times": [0.25, 0.5, 0.75], "controls": [[-1.0], [1.0]]})
        v = [0.6, 1.0]
        assert conic_membership(small.cone, v) == "interior"
        assert conic_membership(big.cone, v) == "interior"


class TestTimeCone:
    def test_zero_drift_equals_tangent_cone(self):
        sys = double_integrator()
        traj = rest_trajectory()
        sampling = {"times": [0.25], "controls": [[-1.0], [1.0]]}
        tc = build_time_cone(sys, traj, 0.5, sampling)
        kc = build_tangent_cone(sys, traj, 0.5, sampling)
        assert len(tc.cone.generators) == len(kc.cone.generators)
        for g, h in zip(tc.cone.generators, kc.cone.generators):
            assert np.array_equal(g, h)

    def test_pure_drift_spans_line(self):
        sys = ControlSystem(m=1, k=1, f=lambda x, u: np.ones(1),
                            df_dx=lambda x, u: np.zeros((1, 1)),
                            control_set=box([-1.0], [1.0]))
        traj = simulate(sys, constant_signal(0.0, 1.0, [0.0]), [0.0])
        cone = build_time_cone(sys, traj, 0.5, {"times": [0.25], "controls": [[0.0]]})
        gens = sorted(g[0] for g in cone.cone.generators)
        assert np.allclose(gens, [-1.0, 1.0])
        assert conic_membership(cone.cone, [0.4]) == "interior"

    def test_double_integrator_axis_generators(self):
        sys = double_integrator()
        traj = simulate(sys, constant_signal(0.0, 1.0, [1.0]), [0.0, 0.0])
        cone = build_time_cone(sys, traj, 0.5, {"times": [0.25], "controls": [[-1.0]]})
        kinds = [p.kind for p in cone.provenance]
        assert "axis+" in kinds and "axis-" in kinds
        for g, p in zip(cone.cone.generators, cone.provenance):
            if p.kind == "axis+":
                assert np.allclose(g, [0.5, 1.0], atol=1e-9)
            if p.kind == "axis-":
                assert np.allclose(g, [-0.5, -1.0], atol=1e-9)

    def test_switch_time_rejected(self):
        sys = double_integrator()
        u = ControlSignal(a=0.0, b=1.0, switch_times=(0.5,),
                          values=(np.array([0.0]), np.array([1.0])))
        traj = simulate(sys, u, [0.0, 0.0])
        with pytest.raises(ValueError):
            build_time_cone(sys, traj, 0.5, {"times": [0.25], "controls": [[1.0]]})


class TestInitialCone:
    def test_empty_basis_equals_time_cone(self):
        sys = double_integrator()
        traj = simulate(sys, constant_signal(0.0, 1.0, [1.0]), [0.0, 0.0])
        sampling = {"times": [0.25], "controls": [[-1.0]]}
        ic = build_initial_cone(sys, traj, 0.5, [], sampling)
        tc = build_time_cone(sys, traj, 0.5, sampling)
        assert len(ic.cone.generators) == len(tc.cone.generators)

    def test_transported_basis_closed_form(self):
        sys = double_integrator()
        traj = rest_trajectory(b=1.2)
        cone = build_initial_cone(sys, traj, 1.0, [np.array([1.0, 0.0])],
                                  {"times": [0.5], "controls": [[1.0]]})
        init_gens = [g for g, p in zip(cone.cone.generators, cone.provenance)
                     if p.kind.startswith("init")]
        assert len(init_gens) == 2
        assert np.allclose(np.abs(init_gens), [[1.0, 0.0], [1.0, 0.0]], atol=1e-9)

    def test_full_basis_spans_state_space(self):
        sys = double_integrator()
        traj = rest_trajectory(b=1.2)
        cone = build_initial_cone(sys, traj, 1.0, list(np.eye(2)),
                                  {"times": [0.5], "controls": [[1.0]]})
        for v in ([0.3, -0.8], [-1.0, 0.2], [0.0, 0.9]):
            assert conic_membership(cone.cone, v) == "interior"


class TestConeTransportCheck:
    def test_same_time_zero_violation(self):
        sys = double_integrator()
        traj = rest_trajectory()
        cone = build_time_cone(sys, traj, 0.5, {"times": [0.25], "controls": [[-1.0], [1.0]]})
        rep = cone_transport_check(sys, traj, 0.5, 0.5, cone)
        assert rep.max_violation < 1e-8

    def test_double_integrator_inclusion(self):
        sys = double_integrator()
        traj = rest_trajectory()
        cone = build_time_cone(sys, traj, 0.5,
                               {"times": [0.25, 0.4], "controls": [[-1.0], [1.0]]})
        rep = cone_transport_check(sys, traj, 0.5, 0.75, cone)
        assert rep.max_violation < 1e-8
        assert all(v in ("interior", "boundary") for v in rep.memberships)

    def test_axis_identity_constant_control(self):
        sys = double_integrator()
        traj = simulate(sys, constant_signal(0.0, 1.0, [1.0]), [0.0, 0.0])
        cone = build_time_cone(sys, traj, 0.5, {"times": [0.25], "controls": [[-1.0]]})
        rep = cone_transport_check(sys, traj, 0.5, 0.8, cone)
        assert rep.axis_defect < 1e-6


class TestSlopeInvariants:
    def needle_deviation(self, sys, traj, needles, s, t_eval):
        from pmpkit.perturbations import _clip_signal
        pert = apply_needle_suite(traj.control, needles, s)
        ref = simulate(sys, _clip_signal(traj.control, t_eval), traj.states[0]).endpoint
        end = simulate(sys, _clip_signal(pert, t_eval), traj.states[0]).endpoint
        return (end - ref) / s

    def test_needle_tangency_slope(self):
        sys = double_integrator()
        traj = rest_trajectory()
        pi = NeedleData(0.3, 1.0, [1.0])
        v = class1_vector(sys, traj, pi).vector
        errs = [np.linalg.norm(self.needle_deviation(sys, traj, [pi], s, 0.3) - v)
                for s in (1e-2, 1e-3, 1e-4)]
        assert errs[0] > errs[1] > errs[2]
        assert errs[2] < 1e-3

    def test_two_needle_distinct_times_slope(self):
        sys = double_integrator()
        traj = rest_trajectory()
        pis = [NeedleData(0.3, 1.0, [1.0]), NeedleData(0.6, 0.5, [-1.0])]
        w = multi_needle_vector(sys, traj, pis, 0.6).vector
        errs = [np.linalg.norm(self.needle_deviation(sys, traj, pis, s, 0.6) - w)
                for s in (1e-2, 1e-3, 1e-4)]
        assert errs[0] > errs[1] > errs[2]
        assert errs[2] < 1e-3

    def test_two_needle_same_time_slope(self):
        sys = double_integrator()
        traj = rest_trajectory()
        pis = [NeedleData(0.5, 1.0, [1.0]), NeedleData(0.5, 0.5, [-1.0])]
        w = multi_needle_vector(sys, traj, pis, 0.5).vector
        errs = [np.linalg.norm(self.needle_deviation(sys, traj, pis, s, 0.5) - w)
                for s in (1e-2, 1e-3, 1e-4)]
        assert errs[0] > errs[1] > errs[2]
        assert errs[2] < 1e-3

    def test_time_perturbation_slope(self):
        from pmpkit.perturbations import _clip_signal
        sys = double_integrator()
        traj = simulate(sys, constant_signal(0.0, 1.0, [1.0]), [0.0, 0.0])
        tau, l, dt, u1 = 0.5, 1.0, 0.3, [-1.0]
        v = time_perturbation_vector(sys, traj, TimePerturbationData(tau, l, dt, u1)).vector
        ref = simulate(sys, _clip_signal(traj.control, tau), traj.states[0]).endpoint
        errs = []
        for s in (1e-2, 1e-3, 1e-4):
            pert = apply_needle_suite(traj.control, [NeedleData(tau, l, u1)], s)
            end = simulate(sys, _clip_signal(pert, tau + dt * s), traj.states[0]).endpoint
            errs.append(np.linalg.norm((end - ref) / s - v))
        assert errs[0] > errs[1] > errs[2]
        assert errs[2] < 1e-3


def full_plane_cone(sys, traj, t=1.0):
    return build_tangent_cone(sys, traj, t,
                              {"times": [0.25, 0.75], "controls": [[-1.0], [1.0]]})


class TestRealizeDirection:
    def test_scalar_linear_exact(self):
        sys = scalar_integrator()
        traj = simulate(sys, constant_signal(0.0, 1.0, [0.0]), [0.0])
        cone = build_tangent_cone(sys, traj, 1.0,
                                  {"times": [0.5], "controls": [[-1.0], [1.0]]})
        res = realize_direction(sys, traj, 1.0, [0.5], cone)
        assert res.s_prime == pytest.approx(res.s, rel=1e-6)
        assert res.endpoint[0] == pytest.approx(0.5 * res.s_prime, abs=1e-12)
        assert res.residual <= 0.02 * res.s

    def test_generator_direction_slope(self):
        sys = double_integrator()
        traj = rest_trajectory()
        cone = full_plane_cone(sys, traj)
        v = np.array([0.75, 1.0])  # the transported tau=0.25, u=+1 generator
        opts = RealizationOptions(cfg=IntegratorConfig(step=2e-3))
        res = realize_direction(sys, traj, 1.0, v, cone, opts)
        assert 0.5 <= res.s_prime / res.s <= 2.0
        assert res.residual <= opts.tol * res.s
        # the single needle alone realizes the direction in the limit
        errs = []
        for s in (1e-2, 1e-3):
            pert = apply_needle(traj.control, NeedleData(0.25, 1.0, [1.0]), s)
            end = simulate(sys, pert, [0.0, 0.0]).endpoint
            errs.append(np.linalg.norm(end / s - v))
        assert errs[1] < errs[0]

    def test_interior_direction_two_dim(self):
        sys = double_integrator()
        traj = rest_trajectory()
        cone = full_plane_cone(sys, traj)
        opts = RealizationOptions(cfg=IntegratorConfig(step=2e-3))
        res = realize_direction(sys, traj, 1.0, [0.5, 1.0], cone, opts)
        assert res.residual <= opts.tol * res.s
        assert 0.5 <= res.s_prime / res.s <= 2.0
        want = res.s_prime * np.array([0.5, 1.0])
        assert np.linalg.norm(res.endpoint - want) <= opts.tol * res.s

    def test_resimulation_bit_exact(self):
        sys = double_integrator()
        traj = rest_trajectory()
        cone = full_plane_cone(sys, traj)
        opts = RealizationOptions(cfg=IntegratorConfig(step=2e-3))
        res = realize_direction(sys, traj, 1.0, [0.5, 1.0], cone, opts)
        again = simulate(sys, res.control, traj.states[0], opts.cfg).endpoint
        assert np.array_equal(again, res.endpoint)

    def test_zero_vector_rejected(self):
        sys = double_integrator()
        traj = rest_trajectory()
        cone = full_plane_cone(sys, traj)
        with pytest.raises(ValueError):
            realize_direction(sys, traj, 1.0, [0.0, 0.0], cone)

    def test_boundary_direction_rejected(self):
        sys = double_integrator()
        traj = rest_trajectory()
        cone = PerturbationCone(
            at_time=1.0,
            cone=GeneratedCone([np.array([1.0, 0.0]), np.array([0.0, 1.0])]),
            provenance=(
                Provenance(kind="needle", source_time=0.5,
                           needle=NeedleData(0.5, 1.0, [1.0])),
                Provenance(kind="needle", source_time=0.5,
                           needle=NeedleData(0.5, 1.0, [-1.0])),
            ),
            control_dim=1,
        )
        with pytest.raises(ValueError):
            realize_direction(sys, traj, 1.0, [1.0, 0.0], cone)

    def test_flat_cone_rejected(self):
        sys = double_integrator()
        traj = rest_trajectory()
        cone = build_tangent_cone(sys, traj, 1.0,
                                  {"times": [0.25], "controls": [[1.0]]})
        with pytest.raises(ValueError):
            realize_direction(sys, traj, 1.0, [1.5, 2.0], cone)

    def test_free_time_scalar(self):
        sys = ControlSystem(m=1, k=1,
                            f=lambda x, u: np.array([u[0]]),
                            df_dx=lambda x, u: np.zeros((1, 1)),
                            control_set=box([0.0], [1.0]))
        traj = simulate(sys, constant_signal(0.0, 1.0, [0.5]), [0.0])
        cone = build_time_cone(sys, traj, 0.5,
                               {"times": [0.25], "controls": [[0.25], [0.75]]})
        res = realize_direction(sys, traj, 0.5, [0.1], cone)
        assert res.s_prime > 0
        assert res.residual <= 0.02 * res.s
        want = 0.25 + res.s_prime * 0.1
        assert res.endpoint[0] == pytest.approx(want, abs=1e-9)

    def test_budget_exhaustion_reports_best_residual(self):
        sys = double_integrator()
        traj = rest_trajectory()
        cone = full_plane_cone(sys, traj)
        opts = RealizationOptions(tol=1e-12, max_attempts=1, root_max_iter=1,
                                  cfg=IntegratorConfig(step=5e-3))
        with pytest.raises(RealizationError) as info:
            realize_direction(sys, traj, 1.0, [0.5, 1.0], cone, opts)
        assert np.isfinite(info.value.best_residual)


class TestConeCsv:
    def test_columns_and_kinds(self):
        sys = double_integrator()
        traj = simulate(sys, constant_signal(0.0, 1.0, [1.0]), [0.0, 0.0])
        cone = build_time_cone(sys, traj, 0.5, {"times": [0.25], "controls": [[-1.0]]})
        buf = io.StringIO()
        cone.to_csv(buf)
        lines = buf.getvalue().strip().split("\n")
        assert lines[0] == "tau,l,u0,kind"
        kinds = [ln.split(",")[-1] for ln in lines[1:]]
        assert "needle" in kinds and "axis+" in kinds and "axis-" in kinds
        needle_row = lines[1 + kinds.index("needle")].split(",")
        assert float(needle_row[0]) == 0.25
        assert float(needle_row[1]) == 1.0
        assert float(needle_row[2]) == -1.0
