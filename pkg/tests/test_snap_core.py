import numpy as np
import pytest

from conftest import pair_problem, physical_problem, synthetic_problem
from snapforge.angular_basis import map_to_3sphere, switching_function
from snapforge.constants import (
    CROSS_PIPELINE_RTOL,
    FD_FORCE_RTOL,
    FUSED_STAGED_RTOL,
    NEWTON_RTOL,
    ROTATION_RTOL,
)
from snapforge.halfint_index import HalfIntIndexMaps
from snapforge.oracle import (
    finite_difference_forces,
    random_rotation,
    relative_error,
    rotate_problem,
    total_energy,
    z_bruteforce,
)
from snapforge.snap_core import (
    Problem,
    SnapParams,
    adjoint_energy,
    adjoint_pipeline,
    baseline_pipeline,
    compute_B,
    compute_dB,
    compute_dE,
    compute_dU,
    compute_energy,
    compute_fused_dE,
    compute_U,
    compute_Y,
    compute_Z,
    context,
    transpose_ulisttot,
    update_forces,
    update_forces_baseline,
)


def level(tot_row, maps, t):
    o = maps.u_block_offset[t]
    return tot_row[o : o + (t + 1) ** 2].reshape(t + 1, t + 1)


def lone_atom(J, wself=1.0):
    nb = HalfIntIndexMaps.build(J).n_b
    params = SnapParams(twojmax=J, rcut=1.0, beta=np.ones(nb), wself=wself)
    return Problem.from_lists(np.zeros((1, 3)), [[]], [[]], params)


class TestProblem:
    def test_rejects_bad_geometry(self):
        params = SnapParams(twojmax=2, rcut=1.0, beta=np.ones(5))
        with pytest.raises(ValueError):
            Problem.from_lists(np.zeros((2, 3)), [[1], [0]], [[[0, 0, 1.0]], [[0, 0, -1.0]]], params)
        with pytest.raises(ValueError):
            Problem.from_lists(np.zeros((2, 3)), [[1], [0]], [[[0, 0, 0.0]], [[0, 0, 0.0]]], params)

    def test_beta_length_checked(self):
        with pytest.raises(ValueError):
            SnapParams(twojmax=2, rcut=1.0, beta=np.ones(4))


class TestU:
    def test_no_neighbors_is_self_term(self):
        tot, _ = compute_U(lone_atom(4, wself=0.7))
        maps = HalfIntIndexMaps.build(4)
        for t in range(5):
            np.testing.assert_array_equal(level(tot[0], maps, t), 0.7 * np.eye(t + 1))

    def test_single_z_neighbor(self):
        p = pair_problem([0, 0, 0.4], twojmax=2)
        tot, _ = compute_U(p)
        m = map_to_3sphere([0, 0, 0.4], 1.0)
        fc, _ = switching_function(0.4, 1.0)
        u1 = level(tot[0], HalfIntIndexMaps.build(2), 1)
        np.testing.assert_allclose(np.diag(u1), fc * np.array([np.conj(m.a), m.a]) + 1.0,
                                   atol=1e-15)
        np.testing.assert_allclose([u1[0, 1], u1[1, 0]], 0.0, atol=1e-15)

    def test_neighbor_permutation(self):
        p = synthetic_problem(16, 10, 8, seed=2)
        perm = np.random.default_rng(0).permutation(p.maxnb)
        q = Problem(p.positions, p.neighbors[:, perm], p.displacements[:, perm], p.counts,
                    p.params)
        a, _ = compute_U(p)
        b, _ = compute_U(q)
        assert np.abs(a - b).max() <= 1e-12 * np.abs(a).max()

    def test_deterministic(self):
        p = synthetic_problem(16, 10, 8, seed=2)
        a, _ = compute_U(p)
        b, _ = compute_U(p)
        np.testing.assert_array_equal(a, b)

    def test_privatized_matches_serialized(self):
        p = synthetic_problem(16, 10, 6, seed=2)
        a, _ = compute_U(p)
        b, ul = compute_U(p, accumulation="privatized", workers=3)
        np.testing.assert_allclose(b, a, rtol=0, atol=1e-13)
        assert ul.shape == (16, 10, HalfIntIndexMaps.build(6).n_u)

    def test_unknown_accumulation(self):
        with pytest.raises(ValueError):
            compute_U(lone_atom(2), accumulation="atomic")


class TestTranspose:
    def test_involution_and_mapping(self):
        tot, _ = compute_U(synthetic_problem(6, 4, 4, seed=1))
        t = transpose_ulisttot(tot)
        assert t[3, 5] == tot[5, 3]
        back = transpose_ulisttot(t, "to_index_fastest")
        np.testing.assert_array_equal(back, tot)
        assert t.sum() == pytest.approx(tot.sum(), rel=1e-14)

    def test_bad_direction(self):
        with pytest.raises(ValueError):
            transpose_ulisttot(np.zeros((2, 5)), "sideways")


class TestZB:
    def test_zero_input(self):
        ctx = context(4)
        assert not np.any(compute_Z(np.zeros((3, ctx.maps.n_u), complex), ctx))

    def test_j0_is_square(self):
        ctx = context(0)
        z = compute_Z(np.array([[1.5 - 0.5j]]), ctx)
        assert z[0, 0] == pytest.approx((1.5 - 0.5j) ** 2)

    def test_against_brute_force(self):
        p = synthetic_problem(3, 6, 4, seed=4)
        ctx = context(4)
        tot, _ = compute_U(p)
        z = compute_Z(tot, ctx)
        maps = ctx.maps
        for i in range(3):
            for row, (j1, j2, j) in enumerate(maps.coupling_triples):
                ref = z_bruteforce(level(tot[i], maps, j1), level(tot[i], maps, j2), j1, j2, j)
                got = z[i, maps.z_offset[row] : maps.z_offset[row] + (j + 1) ** 2]
                np.testing.assert_allclose(got, ref.reshape(-1), atol=1e-13)

    def test_lone_atom_bispectrum(self):
        # U = wself*I on every level, so every B is wself^3 (j+1)
        for J in (2, 8):
            p = lone_atom(J, wself=1.3)
            tot, _ = compute_U(p)
            b = compute_B(compute_Z(tot), tot)
            want = [1.3**3 * (j + 1) for _, _, j in HalfIntIndexMaps.build(J).z_triples]
            np.testing.assert_allclose(b[0], want, rtol=1e-14)

    def test_rotation(self):
        p = synthetic_problem(8, 12, 8, seed=3)
        rot = random_rotation(np.random.default_rng(11))
        tot, _ = compute_U(p)
        tr, _ = compute_U(rotate_problem(p, rot))
        b0, b1 = compute_B(compute_Z(tot), tot), compute_B(compute_Z(tr), tr)
        assert relative_error(b1, b0) <= ROTATION_RTOL

    def test_imaginary_residue_raises(self):
        ctx = context(2)
        tot, _ = compute_U(synthetic_problem(2, 3, 2, seed=0))
        bad = tot.copy()
        bad[:, 1] += 0.3j  # breaks the block symmetry
        with pytest.raises(FloatingPointError):
            compute_B(compute_Z(bad, ctx), bad, ctx)

    def test_energy(self):
        b = np.arange(10.0).reshape(2, 5)
        e, tot = compute_energy(b, np.eye(5)[2])
        np.testing.assert_array_equal(e, [2.0, 7.0])
        assert tot == 9.0
        e2, _ = compute_energy(b, 2 * np.eye(5)[2] + np.eye(5)[0])
        np.testing.assert_array_equal(e2, 2 * e + b[:, 0])
        with pytest.raises(ValueError):
            compute_energy(b, np.ones(4))


class TestDerivatives:
    def test_dU_orders_agree(self):
        p = synthetic_problem(8, 5, 6, seed=1)
        a = compute_dU(p)
        b = compute_dU(p, index_order="atom-fastest")
        np.testing.assert_array_equal(a, b)
        with pytest.raises(ValueError):
            compute_dU(p, index_order="diagonal")

    def test_zero_weight(self):
        p = synthetic_problem(4, 3, 4, seed=1)
        q = Problem(p.positions, p.neighbors, p.displacements, p.counts, p.params,
                    neighbor_weights=np.zeros_like(p.neighbor_weights))
        assert not np.any(compute_dU(q))

    def test_dB_zero_and_translation(self, small_physical):
        p = small_physical
        ctx = context(4)
        tot, _ = compute_U(p)
        z = compute_Z(tot, ctx)
        du = compute_dU(p)
        assert not np.any(compute_dB(z, np.zeros_like(du), p.counts, ctx))
        dbl = compute_dB(z, du, p.counts, ctx)
        # descriptors are translation invariant, so the forces built from dB balance
        forces = update_forces_baseline(dbl, p.params.beta, p)[1]
        assert np.abs(forces.sum(0)).max() <= NEWTON_RTOL * np.abs(forces).max()

    def test_dB_finite_difference(self):
        d = np.array([0.2, -0.35, 0.3])
        p = pair_problem(d, twojmax=4)
        ctx = context(4)
        tot, _ = compute_U(p)
        dbl = compute_dB(compute_Z(tot, ctx), compute_dU(p), p.counts, ctx)
        h = 1e-6
        for k in range(3):
            e = np.zeros(3)
            e[k] = h

            def b_of(dd):
                q = pair_problem(dd, twojmax=4)
                t, _ = compute_U(q)
                return compute_B(compute_Z(t, ctx), t, ctx)[0]

            num = (b_of(d + e) - b_of(d - e)) / (2 * h)
            assert relative_error(dbl[0, 0, :, k], num) <= 1e-7


class TestForces:
    def test_zero_beta(self, small_physical):
        p = small_physical
        q = Problem(p.positions, p.neighbors, p.displacements, p.counts,
                    p.params.with_beta(np.zeros_like(p.params.beta)), box=p.box)
        st, e = adjoint_pipeline(q, half=True)
        assert not np.any(st.forces)
        assert not np.any(e)
        assert not np.any(compute_Y(compute_U(q)[0], q.params.beta))

    def test_newton(self, synth32_j8):
        st, _ = adjoint_pipeline(synth32_j8, half=True)
        assert np.abs(st.forces.sum(0)).max() <= NEWTON_RTOL * np.abs(st.forces).max()

    def test_finite_difference(self, small_physical):
        st, _ = baseline_pipeline(small_physical)
        num = finite_difference_forces(small_physical)
        assert relative_error(st.forces, num) <= FD_FORCE_RTOL

    def test_pair_forces_opposite(self):
        p = pair_problem([0.1, 0.2, 0.3], twojmax=4)
        st, _ = adjoint_pipeline(p)
        np.testing.assert_array_equal(st.forces[0], -st.forces[1])
        assert np.abs(st.forces).max() > 0

    def test_cutoff_smoothness(self):
        rc = 1.0
        direction = np.array([1.0, 2.0, -0.5]) / np.linalg.norm([1.0, 2.0, -0.5])
        near = adjoint_pipeline(pair_problem(direction * rc * (1 - 1e-8), twojmax=4))[0].forces
        mid = adjoint_pipeline(pair_problem(direction * rc * 0.9, twojmax=4))[0].forces
        assert np.abs(near).max() <= 1e-6 * np.abs(mid).max()


class TestAdjoint:
    def test_one_hot_y_matches_z_sum(self):
        # Y is a beta-weighted sum of Z blocks over the triple's three roles
        p = synthetic_problem(2, 6, 4, seed=9)
        ctx = context(4)
        tot, _ = compute_U(p)
        z = compute_Z(tot, ctx)
        y_all = [compute_Y(tot, np.eye(ctx.maps.n_b)[l], ctx) for l in range(ctx.maps.n_b)]
        beta = np.random.default_rng(0).normal(size=ctx.maps.n_b)
        y = compute_Y(tot, beta, ctx)
        np.testing.assert_allclose(y, sum(b * yl for b, yl in zip(beta, y_all)), atol=1e-12)
        # the energy identity holds per triple
        b = compute_B(z, tot, ctx)
        for l in range(ctx.maps.n_b):
            np.testing.assert_allclose(adjoint_energy(y_all[l], tot, 4), b[:, l], rtol=1e-12)

    def test_half_y_matches_full(self):
        p = synthetic_problem(4, 6, 8, seed=9)
        ctx = context(8)
        tot, _ = compute_U(p)
        yf = compute_Y(tot, p.params.beta, ctx)
        yh = compute_Y(tot, p.params.beta, ctx, half=True)
        from snapforge.snap_core import _half_of
        np.testing.assert_allclose(yh, _half_of(yf, ctx), atol=1e-13)
        th, _ = compute_U(p, half=True)
        np.testing.assert_allclose(compute_Y(th, p.params.beta, half=True, input_half=True), yh,
                                   atol=1e-13)

    def test_fused_matches_staged(self, synth32_j8):
        p = synth32_j8
        tot, _ = compute_U(p)
        for half in (False, True):
            y = compute_Y(tot, p.params.beta, half=half)
            staged = compute_dE(compute_dU(p, half=half), y, p.counts, 8, half=half)
            fused, _ = compute_fused_dE(p, y, half=half)
            fiss, _ = compute_fused_dE(p, y, half=half, fission=True)
            assert relative_error(fused, staged) <= FUSED_STAGED_RTOL
            np.testing.assert_array_equal(fiss, fused)

    def test_update_forces_scatter(self):
        p = pair_problem([0.1, 0.0, 0.2])
        de = np.zeros((2, 1, 3))
        de[0, 0] = [1.0, 2.0, 3.0]
        f = update_forces(de, p)
        np.testing.assert_array_equal(f, [[1.0, 2.0, 3.0], [-1.0, -2.0, -3.0]])

    @pytest.mark.parametrize("J", [2, 4, 8])
    def test_pipelines_agree(self, J):
        p = physical_problem(8, J, seed=J) if J < 8 else synthetic_problem(24, 10, 8, seed=J)
        sb, eb = baseline_pipeline(p)
        for half, fused in ((False, False), (True, False), (False, True), (True, True)):
            sa, ea = adjoint_pipeline(p, half=half, fused=fused)
            assert relative_error(sa.forces, sb.forces) <= CROSS_PIPELINE_RTOL
            assert relative_error(ea, eb) <= CROSS_PIPELINE_RTOL
        assert sum(eb) == pytest.approx(total_energy(p), rel=1e-13)
