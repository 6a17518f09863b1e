"""Reduction pipeline stages: annulus truncation bookkeeping, per-ray
rearrangement against hand geometry, weight-splitting consolidation, the
radial transport maps, the barycenter fixed point, and the composed runs
on both the nearly-spherical and the large-asymmetry branches."""

import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.optimize import brentq

from rieszstab import reduction as R
from rieszstab.exceptions import NonConvergenceError, PreconditionError
from rieszstab.kernel import (
    KernelParams,
    sparse_deficit_bound,
    unit_ball_volume,
)
from rieszstab.sets import (
    GraphSet,
    SphereGrid,
    TwoSidedGraphSet,
    VoxelSet,
    fraenkel_asymmetry,
    graph_barycenter,
    graph_volume,
    sphere_grid,
    voxelized_ball,
    voxelize_star,
)

H = 1.0 / 16
P3 = KernelParams(3, 2.0)
OMEGA3 = unit_ball_volume(3)

# Frozen 1D oracles.  LAM_* solve lam*(1-(1-c)^n) = (1-lam)*((1+c)^n-1) by
# Brent root search; PUSH_QUAD is scipy.integrate.quad of z*(z^2+1/4) over
# the target shell of the single-ray cross map (weight pi), which equals
# the source-side integral through phi(t) = (2-t^2)^(1/2) identically.
LAM_C01_N2 = 0.525
LAM_C01_N3 = 0.5498338870431898
PUSH_QUAD = 0.377697976777833


def u_mix(d):
    # zonal quadrupole with a small dipole contamination
    return 0.05 * (0.5 * (3.0 * d[..., 2] ** 2 - 1.0) + 0.2 * d[..., 0])


def u_sym(d):
    # even in d0 and d1, tilted along d2
    return 0.025 * (3.0 * d[..., 2] ** 2 - 1.0) + 0.03 * d[..., 2]


def hand_grid2():
    """Two antipodal circle nodes; weights sum to the circle length."""
    nodes = np.array([[1.0, 0.0], [-1.0, 0.0]])
    return SphereGrid(2, nodes, np.array([np.pi, np.pi]), {"type": "hand"})


def box_centers(half, h=H, dim=3):
    origin = -half * h * np.ones(dim)
    idx = np.indices((2 * half,) * dim).reshape(dim, -1).T
    return origin, origin + h * (idx + 0.5)


def ball_with_satellite():
    """Calibrated voxel ball plus a far blob and an equal-count inner hole."""
    origin, cent = box_centers(32)
    r = np.linalg.norm(cent, axis=1)
    occ = np.zeros(len(cent), dtype=bool)
    target = voxelized_ball(3, H).volume() / H ** 3
    order = np.argsort(r, kind="stable")
    occ[order[: int(round(target))]] = True
    sat = (np.linalg.norm(cent - np.array([1.6, 0.0, 0.0]), axis=1) <= 0.215) & ~occ
    hole = np.zeros_like(occ)
    hole[[i for i in order if occ[i]][: int(np.count_nonzero(sat))]] = True
    occ = (occ & ~hole) | sat
    v = VoxelSet(origin, H, occ.reshape((64,) * 3))
    return v, cent[sat], cent[hole]


def scattered_chunks():
    """Eight balls of volume omega/8 at cube corners, pairwise far apart."""
    origin, cent = box_centers(46)
    occ = np.zeros(len(cent), dtype=bool)
    n_per = int(round(OMEGA3 / H ** 3 / 8.0))
    for sx in (-2.2, 2.2):
        for sy in (-2.2, 2.2):
            for sz in (-2.2, 2.2):
                d = np.linalg.norm(cent - np.array([sx, sy, sz]), axis=1)
                occ[np.argsort(d, kind="stable")[:n_per]] = True
    return VoxelSet(origin, H, occ.reshape((92,) * 3))


def far_half_balls():
    """Two opposite half-balls of combined volume omega, centers at +-3 e1."""
    origin, cent = box_centers(68)
    occ = np.zeros(len(cent), dtype=bool)
    n_half = int(round(OMEGA3 / H ** 3 / 2.0))
    for cx in (3.0, -3.0):
        d = np.where(np.sign(cx) * cent[:, 0] >= abs(cx),
                     np.linalg.norm(cent - np.array([cx, 0.0, 0.0]), axis=1),
                     np.inf)
        occ[np.argsort(d, kind="stable")[:n_half]] = True
    return VoxelSet(origin, H, occ.reshape((136,) * 3))


@pytest.fixture(scope="module")
def grid16():
    return sphere_grid(3, 16)


@pytest.fixture(scope="module")
def v_mix():
    return voxelize_star(u_mix, dim=3, spacing=H)


class TestTruncateToAnnulus:
    def test_inside_annulus_is_identity(self, v_mix):
        rec = {}
        out = R.truncate_to_annulus(v_mix, 0.45, P3, record=rec)
        assert rec["moved_volume"] == 0.0
        assert out.volume() == v_mix.volume()
        assert v_mix.contains(out.centers()).all()

    def test_satellite_blob_bookkeeping(self):
        v, sat_centers, hole_centers = ball_with_satellite()
        eps = 0.32
        rec = {}
        out = R.truncate_to_annulus(v, eps, P3, record=rec)
        n_blob = len(sat_centers)
        assert n_blob == 160
        # both stages move n_blob cells each; |E delta E'| counts both ends
        assert rec["moved_volume"] == pytest.approx(4 * n_blob * H ** 3, rel=0)
        assert out.volume() == v.volume()
        # satellite emptied, carved holes refilled
        assert not out.contains(sat_centers).any()
        assert out.contains(hole_centers).all()
        # relocated cells land in the receiving shell, donors leave the
        # mirrored inner shell
        oc = out.centers()
        fresh = oc[~v.contains(oc)]
        r_fresh = np.linalg.norm(fresh, axis=1)
        outer = r_fresh > 1.0
        e2 = eps ** 2
        slack = 0.5 * H * math.sqrt(3.0)
        assert np.all(r_fresh[outer] > 1.0 + e2 / 3.0 - slack)
        assert np.all(r_fresh[outer] < 1.0 + e2 / 2.0 + slack)
        vc = v.centers()
        gone = vc[~out.contains(vc)]
        r_gone = np.linalg.norm(gone, axis=1)
        inner_donors = (r_gone < 1.0) & (r_gone > 0.5)
        assert np.all(r_gone[inner_donors] > 1.0 - e2 / 2.0 - slack)
        assert np.all(r_gone[inner_donors] < 1.0 - e2 / 3.0 + slack)
        assert np.max(np.linalg.norm(oc, axis=1)) <= 1.0 + e2 + slack

    def test_deterministic(self):
        v, _, _ = ball_with_satellite()
        a = R.truncate_to_annulus(v, 0.32, P3)
        b = R.truncate_to_annulus(v, 0.32, P3)
        assert np.array_equal(a.occ, b.occ) and np.array_equal(a.origin, b.origin)

    def test_capacity_error_when_shell_too_thin(self):
        v, _, _ = ball_with_satellite()
        # at eps = 0.2 the receiving shell holds fewer cells than the blob
        with pytest.raises(R.CapacityError):
            R.truncate_to_annulus(v, 0.2, P3)

    def test_preconditions(self, grid16):
        with pytest.raises(PreconditionError):
            R.truncate_to_annulus(voxelized_ball(3, H, radius=1.05), 0.2, P3)
        with pytest.raises(PreconditionError):
            R.truncate_to_annulus(GraphSet(grid16, np.zeros(len(grid16))), 0.2, P3)
        with pytest.raises(PreconditionError):
            R.truncate_to_annulus(voxelized_ball(3, H), 1.5, P3)


class TestRadialRearrange:
    def test_ball_profile_is_flat(self, grid16):
        t = R.radial_rearrange(voxelized_ball(3, H, calibrate=False), grid16)
        assert np.max(t.u_plus) <= 2.0 * H
        assert np.max(t.u_minus) <= 2.0 * H

    def test_single_ray_hand_geometry(self):
        # one occupied row along the x axis; lattice arithmetic is exact in
        # powers of two, so the closed forms must come out exact as well
        half = 24
        origin = -(half + 0.5) * H * np.ones(2)
        occ = np.zeros((2 * half + 1, 2 * half + 1), dtype=bool)
        occ[half:half + 20, half] = True   # +x: contiguous [0, 1.21875]
        occ[half - 5:half, half] = True    # -x: contiguous [0, 0.34375]
        v = VoxelSet(origin, H, occ)
        t = R.radial_rearrange(v, hand_grid2())
        assert t.u_plus[0] == 0.21875      # exactly R - 1
        assert t.u_minus[0] == 0.0
        assert t.u_plus[1] == 0.0
        assert t.u_minus[1] == 0.65625     # exactly 1 - R
        assert np.array_equal(t.ray_segments[0], [[0.0, 1.21875]])
        assert np.array_equal(t.ray_segments[1], [[0.0, 0.34375]])

    def test_volume_fidelity(self, v_mix, grid16):
        # voxel-surface jaggedness dominates; does not shrink with the grid
        t = R.radial_rearrange(v_mix, grid16)
        assert abs(t.volume() - v_mix.volume()) <= 2e-2 * v_mix.volume()
        v2 = voxelize_star(lambda d: 0.05 * (d[..., 0] ** 2 - 0.5),
                           dim=2, spacing=H)
        t2 = R.radial_rearrange(v2, sphere_grid(2, 256))
        assert abs(t2.volume() - v2.volume()) <= 1e-3 * v2.volume()

    def test_segments_retained(self, v_mix, grid16):
        t = R.radial_rearrange(v_mix, grid16)
        assert t.ray_segments is not None and len(t.ray_segments) == len(grid16)
        assert all(np.asarray(s).shape[1] == 2 for s in t.ray_segments)

    def test_center_continuity(self, v_mix, grid16):
        za = np.array([0.01, 0.0, 0.02])
        zb = za + np.array([0.0, 1e-3, 0.0])
        ta = R.radial_rearrange(v_mix, grid16, center=za)
        tb = R.radial_rearrange(v_mix, grid16, center=zb)
        drift = (np.mean(np.abs(ta.u_plus - tb.u_plus))
                 + np.mean(np.abs(ta.u_minus - tb.u_minus)))
        assert drift <= 5e-3

    def test_eps_regime_violation(self, grid16):
        v = voxelize_star(lambda d: 0.21 * np.exp(-8.0 * (1.0 - d[..., 2])),
                          dim=3, spacing=H)
        with pytest.raises(PreconditionError, match="eps regime"):
            R.radial_rearrange(v, grid16, eps=0.2)

    def test_containment_violation(self, grid16):
        v = voxelize_star(lambda d: 0.3 * np.exp(-4.0 * (1.0 - d[..., 2])),
                          dim=3, spacing=H)
        with pytest.raises(PreconditionError, match="outside"):
            R.radial_rearrange(v, grid16, eps=0.2)

    def test_preconditions(self, grid16):
        with pytest.raises(PreconditionError):
            R.radial_rearrange(GraphSet(grid16, np.zeros(len(grid16))), grid16)
        with pytest.raises(PreconditionError):
            R.radial_rearrange(voxelized_ball(2, H), grid16)


class TestConsolidate:
    def test_one_sided_passes_through(self):
        g2 = hand_grid2()
        t = TwoSidedGraphSet(g2, np.array([0.07, 0.02]), np.zeros(2))
        out = R.consolidate(t)
        assert not out.split
        assert np.array_equal(out.u, [0.07, 0.02])
        assert np.array_equal(out.weights, g2.weights)

    def test_split_weights_match_root_oracle(self):
        g2 = hand_grid2()
        t = TwoSidedGraphSet(g2, np.array([0.1, 0.0]), np.array([0.1, 0.0]))
        out = R.consolidate(t)
        assert out.split
        # node 0 splits into the bump and gap fractions lam, 1 - lam
        assert out.u == pytest.approx([0.1, -0.1, 0.0], abs=0)
        assert out.weights[0] == pytest.approx(LAM_C01_N2 * np.pi, rel=1e-12)
        assert out.weights[1] == pytest.approx((1 - LAM_C01_N2) * np.pi, rel=1e-12)
        assert np.array_equal(out.node_index, [0, 0, 1])
        lam3 = brentq(lambda l: l * (1 - 0.9 ** 3) - (1 - l) * (1.1 ** 3 - 1), 0, 1,
                      xtol=1e-15)
        assert lam3 == pytest.approx(LAM_C01_N3, abs=1e-12)

    def test_volume_preserved_exactly(self, grid16):
        rng = np.random.default_rng(5)
        t = TwoSidedGraphSet(grid16,
                             0.1 * rng.random(len(grid16)),
                             0.1 * rng.random(len(grid16)))
        out = R.consolidate(t)
        assert graph_volume(out) == pytest.approx(t.volume(), abs=1e-12)
        assert np.max(np.abs(out.u)) <= max(np.max(t.u_plus), np.max(t.u_minus))

    def test_sd_ratio_recorded(self, v_mix, grid16):
        rec = {}
        R.consolidate(R.radial_rearrange(v_mix, grid16), record=rec)
        assert rec["sd_ratio"] >= 0.5 - 1e-12
        assert rec["sd_ratio_ok"]

    def test_type_error(self, grid16):
        with pytest.raises(PreconditionError):
            R.consolidate(GraphSet(grid16, np.zeros(len(grid16))))


class TestRadialTransport:
    def test_identity_on_already_rearranged_set(self, grid16):
        star = voxelize_star(lambda d: 0.1 * d[..., 0] ** 2, dim=3, spacing=H)
        t = R.radial_rearrange(star, grid16)
        tr = R.build_radial_transport(t, GraphSet(grid16, t.u_plus))
        assert all(len(b) == 0 for b in tr.blocks)
        assert tr.mass_residual() == 0.0
        r = np.array([0.5, 0.9, 1.0, 1.05])
        assert np.array_equal(tr.map_radii(3, r), r)

    def test_single_ray_cross_map_closed_form(self):
        g2 = hand_grid2()
        r_in = math.sqrt(2.0 - 1.1 ** 2)
        t = TwoSidedGraphSet(g2, np.zeros(2), np.array([1.0 - r_in, 0.0]),
                             ray_segments=[np.array([[0.0, 1.1]]),
                                           np.array([[0.0, 1.0]])])
        tr = R.build_radial_transport(t, GraphSet(g2, np.zeros(2)))
        (block,) = tr.blocks[0]
        assert (block.src_desc, block.tgt_desc) == (False, True)
        ts = np.linspace(1.0, 1.1, 21)
        assert np.max(np.abs(tr.map_radii(0, ts) - np.sqrt(2.0 - ts ** 2))) <= 1e-12
        assert tr.map_radii(0, 1.0)[0] == 1.0
        assert tr.blocks[1] == []

    def test_single_ray_pushforward_quad_oracle(self):
        g2 = hand_grid2()
        r_in = math.sqrt(2.0 - 1.1 ** 2)
        t = TwoSidedGraphSet(g2, np.zeros(2), np.array([1.0 - r_in, 0.0]),
                             ray_segments=[np.array([[0.0, 1.1]]),
                                           np.array([[0.0, 1.0]])])
        tr = R.build_radial_transport(t, GraphSet(g2, np.zeros(2)))
        tgt, src = tr.pushforward_check(lambda q: q[..., 0] ** 2 + 0.25)
        assert tgt == pytest.approx(PUSH_QUAD, abs=1e-9)
        assert src == pytest.approx(PUSH_QUAD, abs=1e-9)
        ref = quad(lambda z: (z * z + 0.25) * z, r_in, 1.0)[0] * np.pi
        assert tgt == pytest.approx(ref, abs=1e-12)

    def test_pushforward_twenty_functions(self, grid16):
        v, _, _ = ball_with_satellite()
        t = R.radial_rearrange(R.truncate_to_annulus(v, 0.32, P3), grid16)
        tr = R.build_radial_transport(t, GraphSet(grid16, t.u_plus))
        assert tr.mass_residual() <= 1e-10
        rng = np.random.default_rng(11)
        checked = 0
        for _ in range(20):
            c = rng.uniform(-0.5, 0.5, size=3)
            w = rng.uniform(1.0, 4.0)
            a = rng.uniform(0.2, 1.0, size=3)

            def fn(q, c=c, w=w, a=a):
                return np.exp(-w * np.sum((q - c) ** 2, axis=-1)) + q @ a + 2.0

            tgt, src = tr.pushforward_check(fn)
            assert abs(tgt - src) <= 1e-2 * abs(tgt)
            checked += 1
        assert checked == 20

    def test_mass_mismatch_raises(self):
        g2 = hand_grid2()
        t = TwoSidedGraphSet(g2, np.zeros(2), np.array([0.2, 0.0]),
                             ray_segments=[np.array([[0.0, 1.1]]),
                                           np.array([[0.0, 1.0]])])
        with pytest.raises(PreconditionError, match="mass mismatch"):
            R.build_radial_transport(t, GraphSet(g2, np.zeros(2)))

    def test_preconditions(self, grid16):
        g2 = hand_grid2()
        t = TwoSidedGraphSet(g2, np.zeros(2), np.zeros(2))
        with pytest.raises(PreconditionError, match="segments"):
            R.build_radial_transport(t, GraphSet(g2, np.zeros(2)))
        t2 = TwoSidedGraphSet(g2, np.zeros(2), np.zeros(2),
                              ray_segments=[np.array([[0.0, 1.0]])] * 2)
        with pytest.raises(PreconditionError, match="grid"):
            R.build_radial_transport(t2, GraphSet(grid16, np.zeros(len(grid16))))
        with pytest.raises(PreconditionError, match="profile"):
            R.build_radial_transport(t2, GraphSet(g2, np.array([0.05, 0.0])))


class TestAdjustBarycenter:
    def test_symmetric_ball_returns_origin(self):
        z, e_z = R.adjust_barycenter(voxelized_ball(3, H, calibrate=False), 0.2)
        assert np.all(z == 0.0)
        assert np.linalg.norm(graph_barycenter(e_z)) <= 1e-4

    def test_mirror_symmetry_pins_components(self):
        v = voxelize_star(u_sym, dim=3, spacing=H)
        z, _ = R.adjust_barycenter(v, 0.2)
        assert abs(z[0]) <= 1e-9 and abs(z[1]) <= 1e-9
        assert z[2] > 0.02   # follows the d2 tilt

    def test_contaminated_harmonic_converges(self, v_mix):
        z, e_z = R.adjust_barycenter(v_mix, 0.2)
        assert np.linalg.norm(graph_barycenter(e_z) - z) <= \
            np.linalg.norm(graph_barycenter(e_z)) + np.linalg.norm(z)
        assert np.linalg.norm(graph_barycenter(e_z)) <= R.BARYCENTER_TOL
        assert np.linalg.norm(z) <= 0.1
        assert z[0] > 0.0    # the d0 contamination pulls the center along +e1

    def test_boundary_field_points_inward(self, v_mix, grid16):
        for d in np.vstack([np.eye(3), -np.eye(3)]):
            zb = 0.1 * d
            b = R.barycenter_field(v_mix, zb, grid16)
            assert float((b - zb) @ zb) < 0.0

    def test_iteration_cap_raises(self, monkeypatch):
        monkeypatch.setattr(R, "BARYCENTER_CAP", 1)
        with pytest.raises(NonConvergenceError) as exc:
            R.adjust_barycenter(voxelized_ball(3, H), 0.2)
        assert exc.value.residual is not None
        assert exc.value.residual > R.BARYCENTER_TOL

    def test_annulus_precondition(self):
        origin, cent = box_centers(40)
        occ = np.linalg.norm(cent - np.array([1.5, 0.0, 0.0]), axis=1) <= 1.0
        v = VoxelSet(origin, H, occ.reshape((80,) * 3))
        with pytest.raises(PreconditionError):
            R.adjust_barycenter(v, 0.2)


class TestReducePipeline:
    def test_voxel_ball_trivial_report(self):
        rep = R.reduce_pipeline(voxelized_ball(3, H), 0.2, P3)
        assert rep.branch == "nearly-spherical"
        assert rep.all_passed()
        assert abs(rep.input_deficit) <= 5e-3
        assert np.linalg.norm(rep.center) <= 0.01
        assert rep.barycenter_residual <= R.BARYCENTER_TOL
        assert rep.annular is not None and rep.consolidated is not None

    def test_harmonic_profile_inequalities(self, grid16):
        def quomo(d):
            return 0.05 * (3.0 * d[..., 2] ** 2 - 1.0)

        def make(s):
            return voxelize_star(lambda d: (1.0 + quomo(d)) * s - 1.0,
                                 dim=3, spacing=H)

        s = brentq(lambda s: make(s).volume() - OMEGA3, 0.95, 1.05, xtol=1e-6)
        rep = R.reduce_pipeline(make(s), 0.45, P3, grid=grid16)
        assert rep.branch == "nearly-spherical"
        assert rep.all_passed(), {k: c for k, c in rep.flags.items() if not c.passed}
        assert {"deficit_truncation", "deficit_rearrangement", "barycenter",
                "final_deficit", "final_asymmetry"} <= set(rep.flags)
        assert 0.0 < rep.input_deficit < 0.1

    def test_scattered_sparse_branch(self):
        v = scattered_chunks()
        xi = OMEGA3 / 8.0 + 0.01
        rep = R.reduce_pipeline(v, 0.2, P3, xi=xi)
        assert rep.branch == "large-asymmetry"
        assert rep.flags["asymmetry_upper"].passed
        assert rep.flags["sparse_bound"].passed
        assert rep.input_asymmetry >= 2.0 * (OMEGA3 - xi)
        assert rep.input_deficit > sparse_deficit_bound(P3)
        assert rep.annular is None and rep.center is None
        rep2 = R.reduce_pipeline(v, 0.2, P3, xi=xi)
        assert rep2.input_deficit == rep.input_deficit
        assert all(rep2.flags[k].residual == rep.flags[k].residual
                   for k in rep.flags)

    def test_half_balls_fallback_without_sparse_gate(self):
        rep = R.reduce_pipeline(far_half_balls(), 0.2, P3)
        assert rep.branch == "large-asymmetry"
        assert rep.flags["asymmetry_upper"].passed
        # delta ~ omega stays below the 2(omega - xi) gate at the default xi
        assert "sparse_bound" not in rep.flags
        assert rep.input_asymmetry <= 2.0 * OMEGA3 + 1e-3

    def test_preconditions(self, grid16):
        with pytest.raises(PreconditionError):
            R.reduce_pipeline(voxelized_ball(3, H, radius=1.1), 0.2, P3)
        with pytest.raises(PreconditionError):
            R.reduce_pipeline(GraphSet(grid16, np.zeros(len(grid16))), 0.2, P3)
