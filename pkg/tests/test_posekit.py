import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blursplat.posekit import (
    DegenerateAlignmentError,
    PoseOptions,
    Trajectory,
    apply_similarity,
    chain_relative,
    estimate_pose,
    procrustes_align,
    trajectory_metrics,
    umeyama,
)
from blursplat.rasterizer import render
from blursplat.scene import CameraPose, rotation_angle, so3_exp
from blursplat.synthbench import SceneSpec, generate_scene

from oracles import c2w, rotation_angle_deg, umeyama_lstsq


@pytest.fixture(scope="module")
def small_scene():
    return generate_scene(SceneSpec(n_gaussians=300, width=48, height=48))


def _random_pose(rng, rot=1.0, trans=1.0):
    return CameraPose.from_rt(so3_exp(rng.normal(size=3) * rot), rng.normal(size=3) * trans)


def _random_traj(rng, n):
    return Trajectory([_random_pose(rng) for _ in range(n)], list(range(n)))


class TestEstimatePose:
    def test_fixed_point(self, small_scene):
        pose = small_scene.trajectory.poses[3]
        target = render(small_scene.cloud, pose, small_scene.intrinsics).color
        r = estimate_pose(small_scene.cloud, target, pose, small_scene.intrinsics, PoseOptions(iters=60))
        assert r.final_loss < 1e-9
        assert rotation_angle(r.pose.R @ pose.R.T) < 1e-3
        assert np.linalg.norm(r.pose.translation - pose.translation) < 1e-4

    def test_zero_budget_returns_init(self, small_scene):
        pose = small_scene.trajectory.poses[1]
        target = render(small_scene.cloud, pose, small_scene.intrinsics).color
        r = estimate_pose(small_scene.cloud, target, small_scene.trajectory.poses[2], small_scene.intrinsics,
                          PoseOptions(iters=0))
        assert r.pose is small_scene.trajectory.poses[2]
        assert not r.converged and r.iterations == 0

    @pytest.mark.parametrize("seed", [0, 1])
    def test_recovers_small_perturbation(self, small_scene, seed):
        rng = np.random.default_rng(seed)
        init = small_scene.trajectory.poses[2 + seed]
        ax = rng.normal(size=3)
        d = rng.normal(size=3)
        gt = init.perturbed(np.radians(2) * ax / np.linalg.norm(ax), 0.05 * d / np.linalg.norm(d))
        target = render(small_scene.cloud, gt, small_scene.intrinsics).color
        r = estimate_pose(small_scene.cloud, target, init, small_scene.intrinsics)
        assert np.degrees(rotation_angle(r.pose.R @ gt.R.T)) < 0.2
        assert np.linalg.norm(r.pose.translation - gt.translation) < 0.005

    def test_final_loss_never_exceeds_initial(self, small_scene):
        pose = small_scene.trajectory.poses[0]
        target = render(small_scene.cloud, small_scene.trajectory.poses[9], small_scene.intrinsics).color
        r0 = estimate_pose(small_scene.cloud, target, pose, small_scene.intrinsics, PoseOptions(iters=0))
        r = estimate_pose(small_scene.cloud, target, pose, small_scene.intrinsics, PoseOptions(iters=20))
        assert r.final_loss <= r0.final_loss


class TestChain:
    def test_identity_and_translations(self):
        t = Trajectory([CameraPose.identity()], [0])
        t = chain_relative(t, CameraPose.identity(), 1)
        assert np.allclose(t.poses[1].matrix, np.eye(4))
        step = CameraPose.from_rt(np.eye(3), np.array([0.0, 0, 1]))
        t = chain_relative(chain_relative(Trajectory([CameraPose.identity()], [0]), step, 1), step, 2)
        assert np.allclose(t.poses[-1].translation, [0, 0, 2])

    def test_ten_step_chain_matches_matrix_product(self, rng):
        t = Trajectory([CameraPose.identity()], [0])
        M = np.eye(4)
        for i in range(10):
            rel = _random_pose(rng)
            t = chain_relative(t, rel, i + 1)
            M = rel.matrix @ M
        assert np.allclose(t.poses[-1].matrix, M, atol=1e-10)

    def test_id_ordering(self):
        t = Trajectory([CameraPose.identity()], [5])
        with pytest.raises(ValueError):
            chain_relative(t, CameraPose.identity(), 5)
        with pytest.raises(ValueError):
            Trajectory([CameraPose.identity()] * 2, [1, 1])
        with pytest.raises(ValueError):
            Trajectory([], [])

    @settings(max_examples=20)
    @given(st.integers(0, 2**31 - 1))
    def test_composition_is_associative(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (_random_pose(rng) for _ in range(3))
        assert np.allclose(a.compose(b).compose(c).matrix, a.compose(b.compose(c)).matrix, atol=1e-10)


def test_trajectory_jsonl_roundtrip(tmp_path, rng):
    t = _random_traj(rng, 4)
    t.save(tmp_path / "t.jsonl")
    lines = (tmp_path / "t.jsonl").read_text().splitlines()
    assert len(lines) == 4 and set(json.loads(lines[0])) == {"frame_id", "q", "t"}
    back = Trajectory.load(tmp_path / "t.jsonl")
    assert back.frame_ids == t.frame_ids
    for p, q in zip(back.poses, t.poses):
        assert np.allclose(p.matrix, q.matrix, atol=1e-12)


class TestProcrustes:
    def test_identity(self, rng):
        t = _random_traj(rng, 6)
        aligned, sim = procrustes_align(t, t)
        assert abs(sim.scale - 1) < 1e-9 and np.allclose(sim.rotation, np.eye(3), atol=1e-9)
        assert np.allclose(aligned.centers(), t.centers(), atol=1e-9)

    def test_scaled_and_rotated(self, rng):
        gt = _random_traj(rng, 8)
        Rz = so3_exp(np.array([0, 0, np.pi / 2]))
        est_c = 2 * gt.centers() @ Rz.T
        # orientations follow the rotated world, so they are recoverable too
        est = Trajectory([CameraPose.from_rt(p.R @ Rz.T, -(p.R @ Rz.T) @ c) for p, c in zip(gt.poses, est_c)],
                         gt.frame_ids)
        aligned, sim = procrustes_align(est, gt)
        assert sim.scale == pytest.approx(0.5, abs=1e-9)
        assert np.allclose(sim.rotation, Rz.T, atol=1e-9)
        assert np.max(np.abs(aligned.centers() - gt.centers())) < 1e-9
        for a, g in zip(aligned.poses, gt.poses):
            assert np.allclose(a.R, g.R, atol=1e-9)

    def test_noisy_fit_matches_least_squares(self, rng):
        src = rng.normal(size=(20, 3))
        R = so3_exp(rng.normal(size=3))
        dst = 1.7 * src @ R.T + rng.normal(size=3) + rng.normal(0, 1e-3, (20, 3))
        sim = umeyama(src, dst)
        resid = sim.apply_points(src) - dst
        assert np.sqrt(np.mean(np.sum(resid**2, axis=1))) <= 3e-3
        s, R2, t2 = umeyama_lstsq(src, dst)
        assert sim.scale == pytest.approx(s, rel=1e-6)
        assert np.allclose(sim.rotation, R2, atol=1e-6) and np.allclose(sim.translation, t2, atol=1e-6)

    def test_degenerate_and_mismatched(self, rng):
        line = Trajectory([CameraPose.from_rt(np.eye(3), np.array([k, 0.0, 0])) for k in range(4)], list(range(4)))
        with pytest.raises(DegenerateAlignmentError):
            procrustes_align(line, line)
        with pytest.raises(DegenerateAlignmentError):
            procrustes_align(_random_traj(rng, 2), _random_traj(rng, 2))
        with pytest.raises(ValueError):
            procrustes_align(_random_traj(rng, 4), _random_traj(rng, 5))


class TestMetrics:
    def test_identical(self, rng):
        t = _random_traj(rng, 5)
        m = trajectory_metrics(t, t)
        assert m["ate"] == 0 and m["rpe_t"] < 1e-12 and m["rpe_r"] < 1e-5

    def test_constant_shift(self, rng):
        gt = _random_traj(rng, 6)
        est = Trajectory([CameraPose.from_rt(p.R, p.translation - p.R @ np.array([0.1, 0, 0])) for p in gt.poses],
                         gt.frame_ids)
        m = trajectory_metrics(est, gt)
        assert m["ate"] == pytest.approx(0.1, abs=1e-12)
        assert m["rpe_t"] < 1e-12

    def test_definition_oracle(self, rng):
        gt, est = _random_traj(rng, 10), _random_traj(rng, 10)
        m = trajectory_metrics(est, gt)
        ce = np.array([c2w(p.R, p.translation)[:3, 3] for p in est.poses])
        cg = np.array([c2w(p.R, p.translation)[:3, 3] for p in gt.poses])
        ate = np.sqrt(np.mean(np.sum((ce - cg) ** 2, axis=1)))
        te, re = [], []
        for i in range(9):
            Gi, Gj = c2w(gt.poses[i].R, gt.poses[i].translation), c2w(gt.poses[i + 1].R, gt.poses[i + 1].translation)
            Ei, Ej = c2w(est.poses[i].R, est.poses[i].translation), c2w(est.poses[i + 1].R, est.poses[i + 1].translation)
            E = np.linalg.inv(np.linalg.inv(Gi) @ Gj) @ (np.linalg.inv(Ei) @ Ej)
            te.append(np.linalg.norm(E[:3, 3]))
            re.append(rotation_angle_deg(E[:3, :3]))
        assert m["ate"] == pytest.approx(ate, abs=1e-12)
        assert m["rpe_t"] == pytest.approx(np.sqrt(np.mean(np.square(te))), abs=1e-12)
        assert m["rpe_r"] == pytest.approx(np.sqrt(np.mean(np.square(re))), abs=1e-9)

    def test_length_mismatch(self, rng):
        with pytest.raises(ValueError):
            trajectory_metrics(_random_traj(rng, 3), _random_traj(rng, 4))

    @settings(max_examples=20)
    @given(st.integers(0, 2**31 - 1), st.floats(0.2, 5.0))
    def test_aligned_metrics_invariant_to_similarity(self, seed, scale):
        rng = np.random.default_rng(seed)
        gt = _random_traj(rng, 6)
        est = Trajectory([p.perturbed(rng.normal(0, 0.02, 3), rng.normal(0, 0.05, 3)) for p in gt.poses],
                         gt.frame_ids)
        from blursplat.posekit import Similarity
        sim = Similarity(scale, so3_exp(rng.normal(size=3)), rng.normal(size=3))
        a1, _ = procrustes_align(est, gt)
        a2, _ = procrustes_align(apply_similarity(est, sim), gt)
        m1, m2 = trajectory_metrics(a1, gt), trajectory_metrics(a2, gt)
        for k in m1:
            assert m1[k] == pytest.approx(m2[k], rel=1e-6, abs=1e-9)
