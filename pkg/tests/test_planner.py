"""Local steps, the global loop, box coverings, and the full pipeline."""

import json
from fractions import Fraction as F

import pytest

from nilsteer.canonical import canonical_fields
from nilsteer.errors import (
    CoverageGap, IterationCapExceeded, SpecError,
)
from nilsteer.hall import build_hall_basis
from nilsteer.planner import (
    Cell, Grid, LocalSteering, PlannerConfig, PlannerReport,
    app_steer, build_covering, concatenate_laws, global_free, global_plan,
    subgoal,
)
from nilsteer.poly import (
    ExprField, Poly, WeightedPolynomialField, ecos, erat, esin, evar,
)
from nilsteer.privcoord import dilate, pseudo_norm
from nilsteer.sim import integrate
from nilsteer.steer import ControlLaw

import oracles


def unicycle_fields():
    th = evar(2)
    return [ExprField([ecos(th), esin(th), erat(0)]),
            ExprField([erat(0), erat(0), erat(1)])]


def martinet_fields():
    n = 3
    f1 = WeightedPolynomialField(
        [Poly.const(n, 1), Poly.zero(n), Poly.zero(n)])
    f2 = WeightedPolynomialField(
        [Poly.zero(n), Poly.const(n, 1),
         Poly.monomial(n, (2, 0, 0), F(1))])
    return [f1, f2]


BOX3 = ([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0])


@pytest.fixture(scope="module")
def local22():
    sys22 = canonical_fields(2, 2)
    return LocalSteering(list(sys22.fields), build_hall_basis(2, 2))


@pytest.fixture(scope="module")
def local_uni():
    return LocalSteering(unicycle_fields(), build_hall_basis(2, 2))


# ---------------------------------------------------------------------------
# subgoal


def test_subgoal_interpolates_exactly(local22):
    chart = local22.chart_at([F(0)] * 3)
    xbar = [F(1), F(0), F(0)]
    assert subgoal(xbar, F(1, 2), 1, chart) == [F(1, 2), F(0), F(0)]


def test_subgoal_j_zero_returns_start(local22):
    chart = local22.chart_at([F(0)] * 3)
    xbar = [F(1), F(0), F(0)]
    assert subgoal(xbar, F(1, 2), 0, chart) == xbar


def test_subgoal_saturates_at_goal(local22):
    chart = local22.chart_at([F(0)] * 3)
    xbar = [F(1), F(0), F(0)]
    # j*eta at or past the pseudo-norm of xbar lands on the anchor
    assert subgoal(xbar, F(1, 2), 2, chart) == [F(0)] * 3
    assert subgoal(xbar, F(3), 1, chart) == [F(0)] * 3


def test_subgoal_at_anchor_stays(local22):
    chart = local22.chart_at([F(0)] * 3)
    assert subgoal([F(0)] * 3, F(1, 2), 5, chart) == [F(0)] * 3


def test_subgoal_weighted_dilation(local22):
    chart = local22.chart_at([F(0)] * 3)
    xbar = [F(0), F(0), F(1)]
    # weight-2 coordinate scales with the square of the dilation knob
    got = subgoal(xbar, F(1, 2), 1, chart)
    assert got == [F(0), F(0), F(1, 4)]


# ---------------------------------------------------------------------------
# local step


def test_app_steer_canonical_reaches_anchor(local22):
    ap = local22.approx_at([F(0)] * 3)
    end = app_steer([F(1, 2), F(-1, 3), F(1, 5)], [F(0)] * 3, ap,
                    list(canonical_fields(2, 2).fields))
    assert max(abs(float(v)) for v in end) <= 1e-8


def test_app_steer_at_goal_is_identity(local22):
    ap = local22.approx_at([F(0)] * 3)
    end = app_steer([F(0)] * 3, [F(0)] * 3, ap,
                    list(canonical_fields(2, 2).fields))
    assert end == [0.0, 0.0, 0.0]


def test_app_steer_rejects_wrong_anchor(local22):
    ap = local22.approx_at([F(0)] * 3)
    with pytest.raises(SpecError):
        app_steer([F(1), F(0), F(0)], [F(1), F(0), F(0)], ap,
                  list(canonical_fields(2, 2).fields))


def test_local_steering_detects_canonical_model(local22, local_uni):
    assert local22.exact_model
    assert not local_uni.exact_model


def test_local_step_contracts_on_unicycle(local_uni):
    w = local_uni.weights
    rng = oracles.seeded(17)
    worst = 0.0
    for _ in range(20):
        a = [rng.uniform(-1, 1) for _ in range(3)]
        z = [rng.uniform(-1, 1) for _ in range(3)]
        z = dilate(z, 0.5 / float(pseudo_norm(z, w)), w)
        x = local_uni.chart_at(a).apply_inverse(z)
        end, law = local_uni.steer(x, a)
        ratio = float(local_uni.norm_at(a, end)) / 0.5
        worst = max(worst, ratio)
    assert worst <= 0.5
    # reference run: worst observed ratio is about 0.10
    assert worst <= 0.2


# ---------------------------------------------------------------------------
# global loop on free systems


def test_global_free_already_there(local22):
    rep = global_free([0.0, 0.0, 0.0], [0.0, 0.0, 0.0], 1e-6, None,
                      local22, PlannerConfig())
    assert rep.status == "converged"
    assert rep.iterations == 0
    assert rep.laws == []


def test_global_free_canonical_single_exact_step():
    sys23 = canonical_fields(2, 3)
    ls = LocalSteering(list(sys23.fields), build_hall_basis(2, 3))
    x0 = [F(3, 7), F(-2, 5), F(1, 3), F(-1, 4), F(2, 9)]
    rep = global_free(x0, [F(0)] * 5, 1e-6, None, ls, PlannerConfig())
    assert rep.status == "converged"
    assert rep.iterations == 1
    assert rep.norms[-1] == 0
    assert rep.iterates[-1] == [F(0)] * 5


def test_global_free_unicycle_parking(local_uni):
    rep = global_free([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 1e-3, None,
                      local_uni, PlannerConfig())
    assert rep.status == "converged"
    assert float(rep.final_norm) <= 1e-3
    # reference run: 4 accepted steps, one rejection
    assert rep.iterations == 4
    assert rep.rejections == 1
    assert rep.total_length() == pytest.approx(10.774, rel=1e-2)


def test_global_free_replay_matches_iterates(local_uni):
    uni = unicycle_fields()
    rep = global_free([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 1e-3, None,
                      local_uni, PlannerConfig())
    law = concatenate_laws(2, rep.all_laws())
    traj = integrate(uni, [0.0, 0.0, 0.0], law, tol=1e-10)
    err = max(abs(a - b) for a, b in zip(traj.endpoint, rep.iterates[-1]))
    assert err <= 1e-8


def test_global_free_acceptance_halves_subgoal_distance(local_uni):
    rep = global_free([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 1e-3, None,
                      local_uni, PlannerConfig())
    # replays the acceptance predicate from the recorded trace
    accepted = list(zip(rep.iterates, rep.iterates[1:], rep.subgoals))
    assert accepted
    for before_pt, after_pt, xd in accepted:
        before = float(local_uni.norm_at(xd, before_pt))
        after = float(local_uni.norm_at(xd, after_pt))
        assert after <= before / 2 + 1e-12


def test_global_free_etas_never_increase(local_uni):
    rep = global_free([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 1e-3, None,
                      local_uni, PlannerConfig(), modified=True)
    assert all(b <= a for a, b in zip(rep.etas, rep.etas[1:]))
    assert rep.status == "converged"


def test_global_free_modified_matches_plain_here(local_uni):
    plain = global_free([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 1e-3, None,
                        local_uni, PlannerConfig())
    mod = global_free([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 1e-3, None,
                      local_uni, PlannerConfig(), modified=True)
    # strong contraction keeps every accepted step in the lowest branch
    assert mod.iterations == plain.iterations
    assert mod.k_final == 0
    n0 = mod.norms[0]
    lim = float(n0) / (1.0 - PlannerConfig().effective_R(2))
    assert all(float(v) <= lim for v in mod.norms)


def test_global_free_iteration_cap(local_uni):
    with pytest.raises(IterationCapExceeded) as exc:
        global_free([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 1e-3, None,
                    local_uni, PlannerConfig(iteration_cap=2))
    rep = exc.value.report
    assert rep.attempts == 2
    assert rep.status == "cap-exceeded"


def test_global_free_cell_containment_guard(local_uni):
    grid = Grid([-1.0] * 3, [1.0] * 3, 1)
    cell = Cell((1, 2, 3), [(0, 0, 0)], grid, 0)
    with pytest.raises(SpecError):
        global_free([5.0, 0.0, 0.0], [0.0, 1.0, 0.0], 1e-3, cell,
                    local_uni, PlannerConfig())
    rep = global_free([0.0, 0.0, 0.0], [0.0, 0.5, 0.0], 1e-3, cell,
                      local_uni, PlannerConfig())
    assert rep.status == "converged"


# ---------------------------------------------------------------------------
# modified-loop branches, driven by a scripted local method


class _ScriptChart:
    def __init__(self, anchor, away_script):
        self.anchor = list(anchor)
        self.weights = (1,)
        self._away = away_script

    def apply(self, x):
        if self._away is not None and x != self.anchor:
            return [self._away.pop(0)]
        return [x[0] - self.anchor[0]]

    def apply_inverse(self, z):
        return [z[0] + self.anchor[0]]


class _ScriptLocal:
    """Plays back scripted endpoints and subgoal-chart distances."""

    class _Basis:
        r = 1

    basis = _Basis()

    def __init__(self, endpoints, away):
        self.endpoints = list(endpoints)
        self.away = list(away)
        self.goal_chart = _ScriptChart([0.0], None)

    def chart_at(self, a):
        if a == [0.0] or a == [0]:
            return self.goal_chart
        return _ScriptChart(a, self.away)

    def steer(self, x, a):
        return [self.endpoints.pop(0)], ControlLaw(1, [])


def test_modified_branches_follow_the_bracket():
    # attempt 1: subgoal is the goal itself, step rejected outright
    # attempt 2: lands at 1.5 = between brackets, accepted and charged
    # attempt 3: lands at 2.8 above the next bracket, rejected
    # attempt 4: lands at 0.04, plain acceptance, loop converges
    ls = _ScriptLocal(endpoints=[0.9, 1.5, 2.8, 0.04],
                      away=[0.1, 0.2, 0.1, 0.2, 0.1, 0.2])
    rep = global_free([1.0], [0.0], 0.05, None, ls,
                      PlannerConfig(R=0.9), modified=True)
    assert rep.status == "converged"
    assert rep.attempts == 4
    assert rep.iterations == 2
    assert rep.rejections == 2
    assert rep.k_final == 1
    assert rep.iterates == [[1.0], [1.5], [0.04]]
    assert rep.etas == [1.0, 0.5, 0.25, 0.125, 0.125]
    lim = 1.0 / (1.0 - 0.9)
    assert all(v <= lim for v in rep.norms)


def test_plain_loop_would_accept_the_drift():
    # same first two attempts without the bracket: no extra halving
    ls = _ScriptLocal(endpoints=[0.9, 1.5, 0.04],
                      away=[0.1, 0.2, 0.1, 0.2])
    rep = global_free([1.0], [0.0], 0.05, None, ls, PlannerConfig(R=0.9))
    assert rep.attempts == 3
    assert rep.iterations == 2
    assert rep.etas == [1.0, 0.5, 0.5, 0.5]


# ---------------------------------------------------------------------------
# covering


def test_unicycle_covers_with_one_cell():
    atlas = build_covering(unicycle_fields(), BOX3, build_hall_basis(2, 2),
                           PlannerConfig(grid=4),
                           x_init=[0.0, 0.0, 0.0], x_final=[0.5, 0.5, 0.5])
    assert len(atlas.cells) == 1
    assert atlas.cells[0].frame == (1, 2, 3)
    assert atlas.path == [0]


def test_martinet_covering_splits_at_the_plane():
    atlas = build_covering(martinet_fields(), BOX3, build_hall_basis(2, 3),
                           PlannerConfig(),
                           x_init=[-0.5, 0.0, 0.0], x_final=[0.5, 0.2, 0.1])
    assert len(atlas.cells) == 3
    frames = sorted({c.frame for c in atlas.cells})
    assert frames == [(1, 2, 3), (1, 2, 4)]
    # the path crosses the singular plane through the bridging cell
    path_frames = [atlas.cells[c].frame for c in atlas.path]
    assert path_frames == [(1, 2, 3), (1, 2, 4), (1, 2, 3)]
    wps = atlas.waypoints()
    assert wps[0] == pytest.approx([-0.25, 0.0, 0.0])
    assert wps[1] == pytest.approx([0.25, 0.0, 0.0])


def test_martinet_covering_needs_length_three():
    with pytest.raises(CoverageGap):
        build_covering(martinet_fields(), BOX3, build_hall_basis(2, 2),
                       PlannerConfig(grid=4))


def test_covering_rejects_outside_endpoints():
    with pytest.raises(SpecError):
        build_covering(unicycle_fields(), BOX3, build_hall_basis(2, 2),
                       PlannerConfig(grid=2),
                       x_init=[5.0, 0.0, 0.0], x_final=[0.0, 0.0, 0.0])


def test_covering_json_roundtrip():
    atlas = build_covering(martinet_fields(), BOX3, build_hall_basis(2, 3),
                           PlannerConfig(grid=4))
    blob = json.dumps(atlas.to_json())
    back = json.loads(blob)
    assert len(back["cells"]) == len(atlas.cells)
    assert all("frame" in c for c in back["cells"])


def test_grid_validation():
    with pytest.raises(SpecError):
        Grid([0.0, 0.0], [1.0], 4)
    with pytest.raises(SpecError):
        Grid([0.0], [0.0], 4)
    with pytest.raises(SpecError):
        Grid([0.0], [1.0], 0)


# ---------------------------------------------------------------------------
# full pipeline


def test_plan_canonical_single_cell_exact():
    sys23 = canonical_fields(2, 3)
    box = ([-2.0] * 5, [2.0] * 5)
    law, rep = global_plan(list(sys23.fields), [0.5, -0.2, 0.1, 0.0, 0.3],
                           [0.0] * 5, 1e-4, box, PlannerConfig(grid=1), r=3)
    assert rep.status == "converged"
    assert len(rep.legs) == 1
    assert rep.legs[0].iterations == 1
    assert rep.iterates[-1] == [0.0] * 5


def test_plan_unicycle_parking_single_cell():
    law, rep = global_plan(unicycle_fields(), [0.0, 0.0, 0.0],
                           [0.0, 1.0, 0.0], 1e-3, BOX3,
                           PlannerConfig(grid=4), r=2)
    assert rep.status == "converged"
    assert len(rep.legs) == 1
    assert float(rep.legs[0].final_norm) <= 1e-3
    err = max(abs(a - b) for a, b in
              zip(rep.iterates[-1], [0.0, 1.0, 0.0]))
    assert err <= 1e-4


@pytest.fixture(scope="module")
def martinet_plan():
    law, rep = global_plan(martinet_fields(), [-0.5, 0.0, 0.0],
                           [0.5, 0.2, 0.1], 1e-3, BOX3, PlannerConfig(),
                           r=None)
    return law, rep


def test_plan_martinet_crosses_the_plane(martinet_plan):
    law, rep = martinet_plan
    assert rep.status == "converged"
    assert len(rep.legs) == 3
    assert [leg.iterations for leg in rep.legs] == [1, 1, 2]
    for leg in rep.legs:
        assert float(leg.final_norm) <= 1e-3
    err = max(abs(a - b) for a, b in
              zip(rep.iterates[-1], [0.5, 0.2, 0.1]))
    assert err <= 1e-4


def test_plan_martinet_replay_reaches_endpoint(martinet_plan):
    law, rep = martinet_plan
    traj = integrate(martinet_fields(), [-0.5, 0.0, 0.0], law, tol=1e-11)
    err = max(abs(a - b) for a, b in zip(traj.endpoint, rep.iterates[-1]))
    assert err <= 2e-8
    # the physical crossing: x1 really sweeps from negative to positive
    xs = [row[0] for row in traj.states]
    assert min(xs) < -0.25 and max(xs) > 0.25


def test_plan_martinet_fiber_ball(martinet_plan):
    law, rep = martinet_plan
    peaks = law.meta["fiber_peaks"]
    radius = 10 * max(peaks)
    law2, rep2 = global_plan(martinet_fields(), [-0.5, 0.0, 0.0],
                             [0.5, 0.2, 0.1], 1e-3, BOX3,
                             PlannerConfig(margin=2.0, fiber_radius=radius),
                             r=3)
    assert rep2.status == "converged"
    assert [leg.iterations for leg in rep2.legs] == [1, 1, 2]
    assert all(p <= radius for p in law2.meta["fiber_peaks"])


def test_plan_report_serializes(martinet_plan):
    law, rep = martinet_plan
    blob = json.loads(json.dumps(rep.to_json()))
    assert blob["status"] == "converged"
    assert len(blob["legs"]) == 3
    assert blob["total_length"] == pytest.approx(rep.total_length())
    lawblob = json.loads(json.dumps(law.to_json()))
    assert lawblob["m"] == 2


def test_plan_auto_depth_matches_explicit(martinet_plan):
    law, rep = martinet_plan
    law3, rep3 = global_plan(martinet_fields(), [-0.5, 0.0, 0.0],
                             [0.5, 0.2, 0.1], 1e-3, BOX3, PlannerConfig(),
                             r=3)
    assert [l.iterations for l in rep3.legs] == \
        [l.iterations for l in rep.legs]


# ---------------------------------------------------------------------------
# configuration and law plumbing


def test_config_validation():
    with pytest.raises(SpecError):
        PlannerConfig(tolerance=0.0)
    with pytest.raises(SpecError):
        PlannerConfig(iteration_cap=0)
    with pytest.raises(SpecError):
        PlannerConfig(R=0.9).effective_R(3)
    lo = 0.5 ** (1.0 / 16)
    assert lo < PlannerConfig().effective_R(3) < 1.0
    assert PlannerConfig(R=0.98).effective_R(3) == 0.98


def test_concatenate_laws_guards():
    law = ControlLaw(2, [])
    with pytest.raises(SpecError):
        concatenate_laws(3, [law])
    slow = ControlLaw(2, [], scale=F(1), time_scale=F(2))
    with pytest.raises(SpecError):
        concatenate_laws(2, [slow])


def test_concatenate_folds_scales():
    p1 = {"channels": [[(F(2), 1, 0)], []]}
    a = ControlLaw(2, [p1], scale=F(3))
    b = ControlLaw(2, [p1], scale=F(1, 2))
    law = concatenate_laws(2, [a, b])
    assert law.nperiods == 2
    assert law.scale == 1
    assert law.periods[0]["channels"][0][0][0] == F(6)
    assert law.periods[1]["channels"][0][0][0] == F(1)


def test_planner_report_empty_json():
    rep = PlannerReport((1, 1, 2))
    blob = rep.to_json()
    assert blob["status"] == "pending"
    assert blob["final_norm"] is None
    assert blob["total_length"] == 0
