"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the pytest summary
under "acceptance criteria".
"""
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from oracles import NAMES, TABLE, filtered_members, greedy_maxmin, idw_scalar

from dapnet import gradsuite
from dapnet.cli import predict_cloud
from dapnet.config import RunConfig
from dapnet.engine import Tensor
from dapnet.evaluate import ConfusionMatrix
from dapnet.geom import ball_query, fps, idw_interpolate
from dapnet.model import DAPNet, ModelConfig, build_geometry, gam_branch, pam_branch
from dapnet.pipeline import (
    LabelScatter,
    block_partition,
    cover_samples,
    denormalize,
    normalize_block,
    read_table,
    write_pts,
)
from dapnet.synth import SceneSpec, generate
from dapnet.train import Schedule, poly_lr, read_log

ROOT = Path(__file__).resolve().parents[1]
SINGLE_CORE = {"OMP_NUM_THREADS": "1", "OPENBLAS_NUM_THREADS": "1", "MKL_NUM_THREADS": "1"}


def cli(*args, cwd=None):
    env = {**os.environ, **SINGLE_CORE}
    t0 = time.perf_counter()
    out = subprocess.run([sys.executable, "-m", "dapnet.cli", *map(str, args)], cwd=cwd, env=env,
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    return out.stdout, time.perf_counter() - t0


def desk_features(n, seed, batch=2):
    rng = np.random.default_rng(seed)
    xyz = rng.uniform(0, 1, (batch, n, 3))
    rest = np.concatenate([rng.uniform(0, 1, (batch, n, 1)), rng.integers(1, 3, (batch, n, 2))], -1)
    return np.concatenate([xyz, xyz, rest], axis=-1)


def test_criterion_1_full_scale_not_reproduced(criterion):
    with criterion(1, "full-scale benchmark figures are out of desk scope; "
                      "substituted by criteria 2-10") as notes:
        cfg = ModelConfig.paper()
        assert cfg.num_classes == 9 and cfg.levels == 4
        readme = (ROOT / "README.md").read_text()
        assert "not reproduced" in readme
        notes.append("full-size preset builds; README states the limitation")


def test_criterion_2_gradient_fidelity(criterion):
    with criterion(2, "engine ops and desk loss pass finite differences < 1e-4 in < 60 s") as notes:
        t0 = time.perf_counter()
        results = gradsuite.run(tolerance=1e-4, h=1e-5, full=True)
        elapsed = time.perf_counter() - t0
        worst = max(r.report.max_error for r in results)
        notes.append(f"{len(results)} cases, worst rel. error {worst:.2e}, {elapsed:.1f} s")
        assert all(r.passed for r in results), [r.line() for r in results if not r.passed]
        assert any(r.name.startswith("desk network") for r in results)
        assert elapsed < 60


def test_criterion_3_init_identity(criterion):
    with criterion(3, "PGM at zero gates equals M within 1e-9") as notes:
        worst = 0.0
        for seed in range(3):
            x = desk_features(256, seed)
            for training in (True, False):
                a = DAPNet(ModelConfig.desk().with_variant("PGM"), seed).forward(x, training)
                b = DAPNet(ModelConfig.desk().with_variant("M"), seed).forward(x, training)
                worst = max(worst, float(np.max(np.abs(a.data - b.data))))
        notes.append(f"max |diff| {worst:.1e}")
        assert worst <= 1e-9


def test_criterion_4_geometry_oracles(criterion):
    with criterion(4, "FPS, ball query and IDW match independent oracles") as notes:
        rng = np.random.default_rng(2024)
        for _ in range(200):
            n = int(rng.integers(1, 65))
            k = int(rng.integers(1, min(8, n) + 1))
            pts = rng.normal(size=(n, 3))
            assert fps(pts, k).tolist() == greedy_maxmin(pts, k)
            cents = fps(pts, k)
            radius = float(rng.uniform(0.1, 2.0))
            got = ball_query(pts, cents, radius, 8).member_ids.tolist()
            assert got == [filtered_members(pts, c, radius, 8) for c in cents]
        worst = 0.0
        for _ in range(100):
            src = rng.uniform(0, 1, (int(rng.integers(3, 30)), 3))
            feats = rng.normal(size=(len(src), 5))
            q = np.concatenate([rng.uniform(0, 1, (6, 3)), src[:1]])
            want = np.array([idw_scalar(src, feats, p) for p in q])
            worst = max(worst, float(np.max(np.abs(idw_interpolate(src, feats, q, 3) - want))))
        notes.append(f"200 FPS/ball-query instances exact, IDW max |diff| {worst:.1e}")
        assert worst <= 1e-12


def test_criterion_5_attention_normalization(criterion):
    with criterion(5, "attention rows (row mode) and totals (global mode) sum to 1 +- 1e-6") as notes:
        worst = 0.0
        for mode in ("row", "global"):
            cfg = ModelConfig.desk(softmax_mode=mode)
            net = DAPNet(cfg, seed=1)
            x = desk_features(512, seed=4, batch=2)
            geo = build_geometry(x[..., :3], cfg)
            points = Tensor(x[..., 3:])
            for lvl, lg in enumerate(geo.levels):
                state = net.set_abstraction(lvl, points, lg, training=True)
                points = state.pooled
            proj = {k[4:]: v for k, v in net.params.items() if k.startswith("pam.")}
            _, u = pam_branch(state.features, proj, mode, cfg.max_attention_size)
            _, v = gam_branch(state.features, mode)
            for m in (u.data, v.data):
                assert m.min() >= 0
                sums = m.sum(axis=-1) if mode == "row" else m.sum(axis=(-2, -1))
                worst = max(worst, float(np.max(np.abs(sums - 1.0))))
        notes.append(f"max |sum - 1| {worst:.1e}")
        assert worst <= 1e-6


def test_criterion_6_metric_fixture(criterion):
    with criterion(6, "reference count matrix gives powerline P/R/F1 85.0/90.3/87.6, OA 90.7") as notes:
        m = ConfusionMatrix.from_counts(TABLE, NAMES).metrics()
        got = [100 * m.precision[0], 100 * m.recall[0], 100 * m.f1[0], 100 * m.overall_accuracy]
        notes.append("got " + "/".join(f"{v:.3f}" for v in got))
        for v, want in zip(got, (85.0, 90.3, 87.6, 90.7)):
            assert abs(v - want) <= 0.05


def test_criterion_7_lr_schedule(criterion):
    with criterion(7, "poly_lr endpoints exact and monotone over 1e4 samples"):
        s = Schedule(0.001, 1e-5, 200 * 12)
        assert poly_lr(s, 0) == 0.001 and poly_lr(s, 1e-300) == 0.001
        assert poly_lr(s, s.iterations) == 1e-5
        i = np.sort(np.random.default_rng(0).uniform(0, s.iterations, 10_000))
        lr = np.array([poly_lr(s, v) for v in i])
        assert np.all(np.diff(lr) <= 0)


@pytest.mark.slow
def test_criterion_8_overfit(criterion, tmp_path):
    with criterion(8, "synthetic 4-class scene: >= 95% train OA in 200 epochs, < 10 min, "
                      "PGM final loss <= BASE") as notes:
        scene = tmp_path / "scene.pts"
        cli("synth", scene, "--extent", 30, "--density", 3, "--seed", 0)
        table = read_table(scene)
        assert len(table) <= 4096 and len(np.unique(table[:, -1])) == 4
        common = ["--preset", "desk", "--block-size", 10, "--stride", 5, "--min-points", 100,
                  "--sample-size", 256, "--batch-size", 8, "--epochs", 200, "--seed", 0, "--quiet"]
        final = {}
        for variant in ("PGM", "BASE"):
            run = tmp_path / variant
            _, seconds = cli("train", scene, "--run-dir", run, "--variant", variant, *common)
            log = read_log(run / "log.csv")
            final[variant] = log[-1]
            notes.append(f"{variant}: {len(table)} pts, loss {log[-1]['loss']:.4f}, "
                         f"OA {100 * log[-1]['train_oa']:.2f}%, {seconds:.0f} s")
            assert len(log) == 200
            assert seconds < 600
        assert final["PGM"]["train_oa"] >= 0.95
        assert final["PGM"]["loss"] <= final["BASE"]["loss"]


def test_criterion_9_pipeline_losslessness(criterion, tmp_path):
    with criterion(9, "every point gets exactly one label in input order; "
                      "normalization round trip within 1e-9") as notes:
        cloud = generate(SceneSpec(extent=45.0, density=1.5, seed=8))
        run = RunConfig(preset="micro", block_size=20.0, stride=20.0, sample_size=128)
        net = DAPNet(run.model_config(), seed=0)
        labels = predict_cloud(net, run, cloud, seed=0)
        assert labels.shape == (len(cloud),) and labels.min() >= 0
        write_pts(tmp_path / "pred.pts", cloud, predictions=labels)
        table = read_table(tmp_path / "pred.pts")
        assert np.array_equal(table[:, :3], cloud.xyz) and np.array_equal(table[:, -1], labels)
        # echoing the reference labels through the same route must return them unchanged
        scatter, rng, worst = LabelScatter(len(cloud)), np.random.default_rng(1), 0.0
        hits = np.zeros(len(cloud), dtype=int)
        for block in block_partition(cloud, 20.0, 20.0, drop_sparse=False):
            b = normalize_block(cloud, block)
            raw = np.column_stack([cloud.xyz[b.ids], cloud.intensity[b.ids]])
            worst = max(worst, float(np.max(np.abs(denormalize(b) - raw))))
            np.add.at(hits, b.ids, 1)
            for s in cover_samples(b, 128, rng):
                scatter.add(b, s, b.labels[s.origin_ids])
        assert np.all(hits == 1)
        assert np.array_equal(scatter.result(), cloud.labels)
        notes.append(f"{len(cloud)} points, round-trip max |diff| {worst:.1e}")
        assert worst <= 1e-9


def test_criterion_10_determinism(criterion, tmp_path):
    with criterion(10, "identical config and seed give identical logs, checkpoints, predictions"):
        outputs = []
        for k in ("a", "b"):
            d = tmp_path / k
            d.mkdir()
            cli("synth", d / "scene.pts", "--extent", 20, "--density", 1.5, "--seed", 5)
            cli("train", d / "scene.pts", "--run-dir", d / "run", "--preset", "micro",
                "--block-size", 10, "--stride", 5, "--min-points", 30, "--sample-size", 48,
                "--batch-size", 4, "--epochs", 3, "--seed", 11, "--quiet")
            cli("predict", d / "run" / "best.ckpt", d / "scene.pts", d / "pred.pts")
            outputs.append([(d / f).read_bytes() for f in
                            ("scene.pts", "run/config.txt", "run/log.csv", "run/best.ckpt",
                             "run/last.ckpt", "pred.pts")])
        assert outputs[0] == outputs[1]
