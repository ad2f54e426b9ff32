"""Acceptance criteria 1-11, each reporting one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the lines appear in the
terminal summary) or ``python3 tests/test_acceptance.py``.
"""
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE_LINES, assert_grad_close, check_op_grad, numeric_grad  # noqa: E402
from test_metrics import brute_rayiou_counts, bundle, grid_from, random_rays  # noqa: E402

from occworld import autograd as ag  # noqa: E402
from occworld.autograd import Tensor  # noqa: E402
from occworld.formats import read_grid, write_grid  # noqa: E402
from occworld.geometry import GridGeometry, SemanticGrid  # noqa: E402
from occworld.losses import (FrameLabels, LossWeights, focal_loss, lovasz_softmax_loss,  # noqa: E402
                             occupancy_3d_loss, rgb_l1_loss, scene_class_affinity_losses, semantic_ce_loss,
                             silog_depth_loss, temporal_2d_loss, trajectory_l2_loss)
from occworld.metrics import confusion, miou, ray_iou, summarize  # noqa: E402
from occworld.nets import ForecastModule, rollout  # noqa: E402
from occworld.raygen import camera_bundle, sample_along, Ray  # noqa: E402
from occworld.render import (AttributeFields, RenderedPixel, RenderOutput, composite,  # noqa: E402
                             fields_from_grid, render_backward, render_bundle, render_ray)
from occworld.scenegen import (SceneSpec, bake_labels, generate, generate_dataset, load_scene,  # noqa: E402
                               save_scene)
from occworld.train import (Trainer, TrainConfig, WorldModel, evaluate, load_checkpoint,  # noqa: E402
                            read_checkpoint, run_experiment, save_checkpoint, split_indices, _restrict)


def report(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def checked(n: int, detail: str):
    """Run a block of assertions, report the outcome, re-raise on failure."""
    class _Ctx:
        def __enter__(self):
            self.t0 = time.perf_counter()
            self.extra = ""
            return self

        def __exit__(self, exc_type, exc, tb):
            dt = time.perf_counter() - self.t0
            msg = f"{detail}{'; ' + self.extra if self.extra else ''} ({dt:.1f} s)"
            if exc_type is not None:
                msg += f" [{exc_type.__name__}: {str(exc).splitlines()[0][:160] if str(exc) else ''}]"
            report(n, exc_type is None, msg)
            return False
    return _Ctx()


# -- 1. renderer gradients -----------------------------------------------------------------

def test_criterion_01_renderer_gradients():
    with checked(1, "renderer analytic vs central-difference gradients, 100 instances") as c:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for inst in range(100):
            dims = tuple(int(d) for d in rng.integers(2, 5, size=3))
            g = GridGeometry(dims, float(rng.uniform(0.3, 1.0)), (0.0, 0.0, 0.0))
            nv, ds = g.num_voxels, int(rng.integers(2, 5))
            f = AttributeFields(g, rng.uniform(0.0, 3.0, nv), rng.normal(size=(nv, ds)), rng.uniform(0, 1, (nv, 3)))
            m = int(rng.integers(2, 9))
            o = np.asarray(g.origin) + rng.uniform(0.1, 0.9, 3) * (np.asarray(g.upper) - g.origin)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            s = sample_along(Ray(o, d, t_range=(0.05, 0.05 + g.diagonal)), m, jitter=True, seed=inst)
            up = RenderedPixel(rng.normal(), rng.normal(size=ds), rng.normal(size=3), 0.0)
            grads = render_backward(f, s, up)
            arrays = [f.density.data.copy(), f.semantics.data.copy(), f.color.data.copy()]

            def scalar(parts):
                px = render_ray(AttributeFields(g, *parts), s)
                return px.depth * up.depth + px.semantics @ up.semantics + px.color @ up.color
            for which in range(3):
                def fn(x, which=which):
                    return scalar([x if i == which else arrays[i] for i in range(3)])
                num = numeric_grad(fn, arrays[which].copy())
                assert_grad_close(grads[which], num, rel=1e-4, floor=1e-6)
                diff = np.abs(grads[which] - num)
                rel = diff / np.maximum(np.maximum(np.abs(grads[which]), np.abs(num)), 1e-6)
                worst = max(worst, float(np.max(rel)))
        elapsed = time.perf_counter() - c.t0
        c.extra = f"max rel err {worst:.2e}"
        assert elapsed < 60, f"took {elapsed:.1f} s"


# -- 2. rendering identities ----------------------------------------------------------------

def test_criterion_02_rendering_identities():
    with checked(2, "sum w <= 1, w_m = T_m - T_m+1, closed-form fixture") as c:
        s = np.zeros((1, 2, 1))
        s[0, :, 0] = math.log(2)
        out, w = composite(Tensor(s), np.array([[1.0, 2.0]]), np.array([[1.0, 1.0]]))
        assert np.allclose(w[0], [0.5, 0.25], atol=1e-6) and abs(out.data[0, 0] - 1.0) < 1e-6
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(500):
            m = int(rng.integers(1, 24))
            sigma = rng.exponential(rng.uniform(0.1, 30.0), m)
            delta = rng.uniform(0.01, 1.0, m)
            s = np.zeros((1, m, 1))
            s[0, :, 0] = sigma
            _, w = composite(Tensor(s), np.cumsum(delta)[None], delta[None])
            # independent transmittance: product of per-interval survival
            surv = np.exp(-np.minimum(sigma * delta, 80.0))
            trans = np.concatenate([[1.0], np.cumprod(surv)])
            assert w.sum() <= 1 + 1e-6
            worst = max(worst, float(np.max(np.abs(w[0] - (trans[:-1] - trans[1:])))))
        assert worst < 1e-6
        c.extra = f"max |w - (T_m - T_m+1)| {worst:.1e}"


# -- 3. metric oracles -----------------------------------------------------------------------

def test_criterion_03_metric_oracles():
    with checked(3, "mIoU hand counts, RayIoU brute force 500 rays, threshold monotonicity") as c:
        pred = grid_from(np.array([0, 1]).reshape(2, 1, 1), 3)
        gt = grid_from(np.array([0, 0]).reshape(2, 1, 1), 3)
        m, per, _ = miou(pred, gt)
        assert (per[0], per[1], m) == (0.5, 0.0, 0.25)
        gt3 = np.full((3, 3, 3), 3)
        pr3 = np.full((3, 3, 3), 3)
        gt3[0, :, 0] = 0
        pr3[0, :2, 0] = 0
        gt3[1, 1, :] = 1
        pr3[1, 1, :] = [1, 1, 2]
        pr3[2, 2, 2] = 2
        m3, per3, geo3 = miou(grid_from(pr3, 4), grid_from(gt3, 4))
        assert m3 == (2 / 3 + 2 / 3 + 0) / 3 and geo3 == 5 / 7
        rng = np.random.default_rng(11)
        geo = GridGeometry((16, 16, 16), 0.5, (-4.0, -4.0, -2.0))
        cats = lambda: np.where(rng.random(geo.dims) < 0.06, rng.integers(0, 4, geo.dims), 4)
        p, g = SemanticGrid(geo, cats(), 5), SemanticGrid(geo, cats(), 5)
        o, d = random_rays(rng, geo, 500)
        thresholds = (1.0, 2.0, 4.0)
        rep = ray_iou(p, g, bundle(o, d), thresholds)
        tp, fp, fn = brute_rayiou_counts(p, g, o, d, thresholds, 5)
        assert np.array_equal(rep.tp, tp) and np.array_equal(rep.fp, fp) and np.array_equal(rep.fn, fn)
        vals = rep.per_threshold()
        assert np.all(np.diff(vals) >= 0)
        elapsed = time.perf_counter() - c.t0
        c.extra = f"RayIoU@1/2/4m {np.round(vals, 4).tolist()}, TP total {int(tp.sum())}"
        assert elapsed < 120


# -- 4. baking / rendering consistency ------------------------------------------------------------

def test_criterion_04_bake_render_consistency():
    with checked(4, "GT fields rendered along baked rays reproduce baked depth") as c:
        scene = bake_labels(generate(SceneSpec(seed=42, num_frames=1, ego_motion="static", moving=0)))
        res = scene.geometry.resolution
        fields = fields_from_grid(scene.grid(0))
        within, total = 0, 0
        for ci, cam in enumerate(scene.rig):
            b = camera_bundle(cam, 1, t_far=scene.geometry.diagonal)
            lab = scene.labels[(0, ci)]
            depth = lab.depth.ravel()
            valid = lab.semantic.ravel() != 255
            px = render_bundle(fields, b.subset(np.nonzero(valid)[0]), 256, mode="nearest")
            rendered = np.array([q.depth for q in px])
            within += int(np.sum(np.abs(rendered - depth[valid]) <= 0.5 * res))
            total += int(valid.sum())
        frac = within / total
        c.extra = f"{frac:.2%} of {total} valid pixels within {0.5 * res} m (nearest lookup)"
        assert frac >= 0.95


# -- 5. loss suite ----------------------------------------------------------------------------------

def test_criterion_05_loss_suite():
    with checked(5, "losses zero at perfect prediction, finite-difference gradients, SILog fixture") as c:
        rng = np.random.default_rng(5)
        gt_d = rng.uniform(1, 10, 6)
        gt_c = rng.integers(0, 4, 6)
        gt_rgb = rng.uniform(0, 1, (6, 3))
        peaked = np.full((6, 4), -50.0)
        peaked[np.arange(6), gt_c] = 50.0
        onehot = np.eye(4)[gt_c]
        free = 3
        zero = {
            "silog": silog_depth_loss(Tensor(gt_d.copy()), gt_d).item(),
            "ce": semantic_ce_loss(Tensor(peaked), gt_c).item(),
            "l1": rgb_l1_loss(Tensor(gt_rgb.copy()), gt_rgb).item(),
            "focal": focal_loss(Tensor(peaked), gt_c).item(),
            "lovasz": lovasz_softmax_loss(Tensor(onehot), gt_c).item(),
            "scal_sem": scene_class_affinity_losses(Tensor(onehot), gt_c, free)[0].item(),
            "scal_geo": scene_class_affinity_losses(Tensor(onehot), gt_c, free)[1].item(),
            "traj": trajectory_l2_loss(Tensor(gt_rgb[:, :2].copy()), gt_rgb[:, :2]).item(),
            "occ3d": occupancy_3d_loss(Tensor(peaked), gt_c, LossWeights(), free).item(),
        }
        out = RenderOutput(Tensor(gt_d.copy()), Tensor(np.ones(6)), Tensor(peaked), Tensor(gt_rgb.copy()),
                           np.zeros((6, 2)))
        zero["temporal2d"] = temporal_2d_loss([(out, FrameLabels(gt_d, gt_c, gt_rgb))], LossWeights()).item()
        bad = {k: v for k, v in zero.items() if abs(v) >= 1e-6}
        assert not bad, bad
        silog = silog_depth_loss(Tensor(2 * gt_d), gt_d).item()
        assert abs(silog - math.log(2) * math.sqrt(0.15)) < 1e-6
        x = rng.normal(size=(6, 4))
        check_op_grad(lambda p: silog_depth_loss(p, gt_d), rng.uniform(1, 10, 6))
        check_op_grad(lambda p: semantic_ce_loss(p, gt_c), x)
        check_op_grad(lambda p: rgb_l1_loss(p, gt_rgb), gt_rgb + rng.normal(0, 0.1, gt_rgb.shape))
        check_op_grad(lambda p: focal_loss(p, gt_c), x)
        check_op_grad(lambda p: lovasz_softmax_loss(ag.softmax(p, axis=1), gt_c), x)
        check_op_grad(lambda p: scene_class_affinity_losses(ag.softmax(p, axis=1), gt_c, free)[0], x)
        check_op_grad(lambda p: scene_class_affinity_losses(ag.softmax(p, axis=1), gt_c, free)[1], x)
        check_op_grad(lambda p: trajectory_l2_loss(p, gt_rgb[:, :2]), rng.normal(size=(6, 2)))
        check_op_grad(lambda p: occupancy_3d_loss(p, gt_c, LossWeights(), free), x)
        c.extra = f"SILog(2*gt) = {silog:.9f}, max |loss at perfect| {max(abs(v) for v in zero.values()):.1e}"


# -- 6. identity at init ---------------------------------------------------------------------------

def test_criterion_06_identity_at_init():
    with checked(6, "zero-init residual forecaster: rollout == input, evaluation == Copy&Paste") as c:
        from occworld.geometry import FeatureGrid, EgoState
        rng = np.random.default_rng(6)
        geo = GridGeometry.desk()
        fg = FeatureGrid(geo, Tensor(rng.normal(size=(geo.num_voxels, 32)).astype(np.float32)))
        mod = ForecastModule(geo, 32, rng=rng)
        ego = EgoState(3.0, 0.2, 0.05, np.array([[-1.5, 0.0], [-3.0, 0.0]]), np.ones(2, bool))
        for h in range(1, 6):
            outs = rollout(fg, [ego] * h, mod, h)
            assert all(np.array_equal(o.features.data, fg.features.data) for o in outs)
        scenes = generate_dataset(SceneSpec(seed=60, num_frames=8, moving=4), 1)
        model = WorldModel(scenes[0], TrainConfig(f=3))
        b = evaluate(model, scenes)
        assert b.miou[1:] == b.copy_paste_miou and b.geo_iou[1:] == b.copy_paste_geo_iou
        c.extra = f"forecast mIoU {np.round(b.miou[1:], 4).tolist()} == Copy&Paste"


# -- 7. forecasting beats Copy&Paste -----------------------------------------------------------------

C7_CONFIG = TrainConfig(f=3, pretrain_epochs=0, finetune_epochs=4, val_fraction=0.34, eval_stride=2)


@pytest.mark.slow
def test_criterion_07_forecast_beats_copy_paste():
    with checked(7, "val forecast mIoU at step-horizon 1 > Copy&Paste after fine-tuning") as c:
        scenes = generate_dataset(SceneSpec(seed=100, moving=4), 6, speeds=[1.0, 2.0, 3.0, 4.0])
        r = run_experiment(C7_CONFIG, scenes)
        h1, cp = r.bundle.miou[1], r.bundle.copy_paste_miou[0]
        c.extra = f"h1 {h1:.4f} vs Copy&Paste {cp:.4f} on {len(r.val)} val scenes"
        assert h1 > cp
        assert time.perf_counter() - c.t0 < 600


# -- 8 and 10. pre-training ---------------------------------------------------------------------------

C8_SEEDS = (0, 1, 2)


def c8_config(seed, pretrain):
    return TrainConfig(seed=seed, f=0, pretrain_epochs=3 if pretrain else 0, finetune_epochs=2,
                       val_fraction=0.4, eval_stride=2)


def c8_scenes(seed):
    return generate_dataset(SceneSpec(seed=200 + 10 * seed), 5)


@pytest.fixture(scope="module")
def pretraining_runs(tmp_path_factory):
    t0 = time.perf_counter()
    runs = []
    for seed in C8_SEEDS:
        scenes = c8_scenes(seed)
        out = tmp_path_factory.mktemp(f"c8_{seed}")
        with_pre = run_experiment(c8_config(seed, True), scenes, out)
        without = run_experiment(c8_config(seed, False), scenes)
        runs.append((scenes, out, with_pre, without))
    return runs, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_08_pretraining_helps(pretraining_runs):
    runs, elapsed = pretraining_runs
    with checked(8, "pretrain->finetune vs finetune-only, current-frame val mIoU, 3 seeds") as c:
        a = [r[2].bundle.miou[0] for r in runs]
        b = [r[3].bundle.miou[0] for r in runs]
        c.extra = (f"mean {np.mean(a):.4f} vs {np.mean(b):.4f}; per seed "
                   f"{[f'{x:.4f}/{y:.4f}' for x, y in zip(a, b)]}; runs {elapsed:.0f} s")
        assert np.mean(a) > np.mean(b)
        assert elapsed < 1200


def baseline_miou(scenes, make, seed=0):
    rng = np.random.default_rng(seed)
    free = scenes[0].num_classes - 1
    counts = None
    for s in scenes:
        for i in range(len(s.frames)):
            g = s.grid(i)
            p = SemanticGrid(g.geometry, make(g, rng), g.num_classes)
            ct = confusion(p, g)
            counts = ct if counts is None else counts + ct
    return summarize(counts, free)[0]


@pytest.mark.slow
def test_criterion_10_selfsup_extraction(pretraining_runs):
    runs, _ = pretraining_runs
    with checked(10, "density-threshold extraction after pre-training alone vs all-free and uniform random") as c:
        rows = []
        for scenes, out, with_pre, _ in runs:
            val = [_restrict(scenes[j], ("grids", "images")) for j in with_pre.val]
            header, _tables = read_checkpoint(out / "pretrain.ckpt")
            model = WorldModel(val[0], TrainConfig.from_dict(header["config"]))
            load_checkpoint(out / "pretrain.ckpt", model)
            ss = evaluate(model, val, selfsup=True, horizon=0).miou[0]
            all_free = baseline_miou(val, lambda g, rng: np.full(g.geometry.dims, g.num_classes - 1))
            rnd = baseline_miou(val, lambda g, rng: rng.integers(0, g.num_classes, g.geometry.dims))
            rows.append((ss, all_free, rnd))
        c.extra = "; ".join(f"selfsup {a:.4f} free {b:.4f} random {r:.4f}" for a, b, r in rows)
        assert all(a > b and a > r for a, b, r in rows)


# -- 9. ego state ------------------------------------------------------------------------------------

C9_SEEDS = (0, 1, 2)


def c9_config(seed, use_ego):
    return TrainConfig(seed=seed, f=2, use_ego=use_ego, pretrain_epochs=0, finetune_epochs=8,
                       val_fraction=0.34, eval_stride=2)


@pytest.mark.slow
def test_criterion_09_ego_state_helps():
    with checked(9, "ego-state on vs off, forecast mIoU averaged over horizons, 3 seeds") as c:
        on, off = [], []
        for seed in C9_SEEDS:
            scenes = generate_dataset(SceneSpec(seed=300 + 10 * seed, moving=4, ego_motion="stop_and_go"), 6,
                                      speeds=[1.5, 3.0, 4.5])
            on.append(run_experiment(c9_config(seed, True), scenes).bundle.forecast_miou_avg)
            off.append(run_experiment(c9_config(seed, False), scenes).bundle.forecast_miou_avg)
        wins = sum(a > b for a, b in zip(on, off))
        c.extra = (f"mean {np.mean(on):.4f} vs {np.mean(off):.4f}, strict wins {wins}/3; per seed "
                   f"{[f'{a:.4f}/{b:.4f}' for a, b in zip(on, off)]}")
        assert np.mean(on) >= np.mean(off) and wins >= 2


# -- 11. determinism and persistence ---------------------------------------------------------------------

def test_criterion_11_determinism_and_persistence(tmp_path):
    with checked(11, "bit-exact EvalBundle, OCCG and checkpoint round-trips, stage isolation") as c:
        small = GridGeometry((16, 16, 8), 0.5, (-4.0, -4.0, -1.0))
        spec = SceneSpec(seed=70, geometry=small, num_frames=4, image_width=24, image_height=16, moving=2)
        scenes = generate_dataset(spec, 3)
        cfg = TrainConfig(f=1, pretrain_epochs=1, finetune_epochs=1, m=16, stride=4, val_fraction=0.34)
        a = run_experiment(cfg, scenes)
        b = run_experiment(cfg, scenes)
        assert a.bundle.to_json() == b.bundle.to_json()
        # OCCG on the reference layout
        ref = GridGeometry.reference()
        g = SemanticGrid(ref, np.random.default_rng(0).integers(0, 18, ref.dims), 18)
        write_grid(tmp_path / "g.occg", g)
        assert read_grid(tmp_path / "g.occg", 18) == g
        write_grid(tmp_path / "g2.occg", read_grid(tmp_path / "g.occg", 18))
        assert (tmp_path / "g.occg").read_bytes() == (tmp_path / "g2.occg").read_bytes()
        # checkpoint: save -> load -> evaluate equals evaluate before save
        val = [scenes[j] for j in a.val]
        before = evaluate(a.model, val).to_json()
        save_checkpoint(tmp_path / "m.ckpt", a.model)
        fresh = WorldModel(val[0], cfg)
        load_checkpoint(tmp_path / "m.ckpt", fresh)
        assert evaluate(fresh, val).to_json() == before
        save_checkpoint(tmp_path / "m2.ckpt", fresh)
        assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
        # stage isolation: withhold grids for pre-training and 2D label maps for fine-tuning
        root = tmp_path / "scenes"
        for i, s in enumerate(scenes):
            save_scene(s, root / f"s{i}")
        for d in root.iterdir():
            for p in (d / "grids").glob("*"):
                p.unlink()
        pre_cfg = replace(cfg, stage="pretrain")
        from occworld.train import load_scenes
        pre = load_scenes(root, "pretrain")
        Trainer(WorldModel(pre[0], pre_cfg), pre_cfg).run_stage("pretrain", pre, 1)
        for i, s in enumerate(scenes):
            save_scene(s, root / f"s{i}")
        for d in root.iterdir():
            for p in (d / "labels").glob("*"):
                if not p.name.endswith(".rgb.u8"):
                    p.unlink()
        fine = load_scenes(root, "finetune")
        Trainer(WorldModel(fine[0], cfg), cfg).run_stage("finetune", fine, 1)
        c.extra = f"EvalBundle mIoU {a.bundle.miou[0]:.4f} reproduced"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
