"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The lines go straight to the terminal (bypassing capture) so they appear in
``pytest -v`` output and in any tee'd log.
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from nucseg import functional as F
from nucseg.adapter import encode_image
from nucseg.gradsuite import COMPONENTS, format_results, run_suite
from nucseg.harness import protocols as P
from nucseg.harness import train as train_mod
from nucseg.harness.config import RunConfig
from nucseg.harness.data import BUILTIN_STYLES, generate_domain, generate_domains
from nucseg.harness.train import evaluate, train
from nucseg.instances import connected_components
from nucseg.metrics import aji, dice, f1, hausdorff, miou, panoptic, score
from nucseg.model import SegmentationModel
from nucseg.prompt import PointPromptSet, default_sigma, gaussian_kernel, render_density
from nucseg.tensor import matmul
from oracles import aji_oracle, flood_fill_labels, naive_conv2d, naive_matmul, panoptic_oracle, random_instances


@contextmanager
def criterion(capsys, number, title):
    """Print ``criterion N: PASS|FAIL title (details)`` once the block finishes."""
    details = {}
    t0 = time.perf_counter()
    try:
        yield details
    except BaseException:
        status = "FAIL"
        raise
    else:
        status = "PASS"
    finally:
        details["time"] = f"{time.perf_counter() - t0:.1f}s"
        extra = ", ".join(f"{k}={v}" for k, v in details.items())
        with capsys.disabled():
            print(f"\ncriterion {number}: {status} {title} ({extra})")


# 1 -------------------------------------------------------------------------
def test_criterion_1_gradient_suite(capsys):
    with criterion(capsys, 1, "finite-difference gradient suite") as info:
        t0 = time.perf_counter()
        results = run_suite(seeds=(0, 1, 2, 3, 4), h=1e-5, tol=1e-4)
        elapsed = time.perf_counter() - t0
        worst = max(r.report.max_relative_error for r in results)
        info.update(seeds=5, worst_rel_err=f"{worst:.2e}")
        assert {(r.seed, r.component) for r in results} == {(s, c) for s in range(5) for c in COMPONENTS}
        assert all(r.report.n_checked > 0 for r in results)
        assert all(r.passed for r in results), format_results([r for r in results if not r.passed])
        assert worst <= 1e-4
        assert elapsed < 120


# 2 -------------------------------------------------------------------------
def test_criterion_2_zero_adapter_equivalence(capsys):
    with criterion(capsys, 2, "zero-adapter encoder is bitwise the frozen encoder") as info:
        rng = np.random.default_rng(0)
        frozen = SegmentationModel(RunConfig(hs_adapter=False).model_spec())
        adapted = SegmentationModel(RunConfig(hs_adapter=True).model_spec())
        for block in adapted.encoder.blocks:
            for t in block.adapter.named().values():
                t.data[...] = rng.normal(size=t.shape)
        images = [rng.normal(size=(3, 64, 64)) for _ in range(3)]
        assert any(encode_image(x, adapted.encoder).data.tobytes() != encode_image(x, frozen.encoder).data.tobytes()
                   for x in images)
        for block in adapted.encoder.blocks:
            block.adapter.zero_()
        for x in images:
            assert encode_image(x, adapted.encoder).data.tobytes() == encode_image(x, frozen.encoder).data.tobytes()
        info["images"] = len(images)


# 3 -------------------------------------------------------------------------
def _axis_mass(c, r, n, sigma):
    g = np.exp(-np.arange(-r, r + 1, dtype=float) ** 2 / (2 * sigma * sigma))
    lo, hi = max(0, c - r), min(n, c + r + 1)
    return g[lo - (c - r) : hi - (c - r)].sum() / g.sum()


def test_criterion_3_kernel_normalization(capsys):
    with criterion(capsys, 3, "kernel unit mass and border-clipped density mass") as info:
        worst = 0.0
        for r in range(0, 21):
            sigmas = [r / 3, r / 2, r] if r > 0 else [default_sigma(0), 0.5, 2.0]  # r=0 is one cell for any sigma
            for s in sigmas:
                worst = max(worst, abs(gaussian_kernel(r, s).sum() - 1.0))
        assert worst <= 1e-12
        info["kernel_worst"] = f"{worst:.1e}"

        # the kernel is separable, so a clipped stamp keeps the product of its per-axis masses
        rng = np.random.default_rng(3)
        worst_mass = 0.0
        for trial in range(60):
            r = int(rng.integers(1, 12))
            h, w = int(rng.integers(2 * r + 2, 70)), int(rng.integers(2 * r + 2, 70))
            n = int(rng.integers(0, 12))
            pts = np.stack([rng.integers(0, w, n), rng.integers(0, h, n)], axis=1) if n else np.zeros((0, 2), int)
            sigma = [r / 3, r / 2, float(r)][trial % 3]
            raster = render_density(PointPromptSet(pts, h, w), r, sigma).raster
            interior = sum(1 for x, y in pts if r <= x < w - r and r <= y < h - r)
            border = sum(_axis_mass(x, r, w, sigma) * _axis_mass(y, r, h, sigma)
                         for x, y in pts if not (r <= x < w - r and r <= y < h - r))
            worst_mass = max(worst_mass, abs(raster.sum() - (interior + border)))
        assert worst_mass <= 1e-9
        info["density_worst"] = f"{worst_mass:.1e}"


# 4 -------------------------------------------------------------------------
def test_criterion_4_numerical_oracles(capsys):
    with criterion(capsys, 4, "numerical core against brute-force oracles") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(4)
        n = 100
        for _ in range(n):
            c_in, c_out, k = (int(v) for v in rng.integers(1, 4, 3))
            stride = int(rng.integers(1, 3))
            x = rng.normal(size=(c_in, int(rng.integers(k, 9)), int(rng.integers(k, 9))))
            wt = rng.normal(size=(c_out, c_in, k, k))
            np.testing.assert_allclose(F.conv2d(x, wt, stride).data, naive_conv2d(x, wt, stride), atol=1e-12)
        for _ in range(n):
            k, stride = int(rng.integers(1, 5)), int(rng.integers(1, 3))
            wt = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 3)), k, k))
            # sizes the strided conv covers exactly, so the transpose maps back onto the same grid
            hh, ww = (k + stride * int(v) for v in rng.integers(0, 5, 2))
            a = rng.normal(size=(wt.shape[1], hh, ww))
            ca = F.conv2d(a, wt, stride).data
            b = rng.normal(size=ca.shape)
            assert abs(np.sum(ca * b) - np.sum(a * F.transpose_conv2d(b, wt, stride).data)) < 1e-10
        for _ in range(n):
            m, kk, nn = (int(v) for v in rng.integers(1, 8, 3))
            a, b = rng.normal(size=(m, kk)), rng.normal(size=(kk, nn))
            np.testing.assert_allclose(matmul(a, b).data, naive_matmul(a, b), atol=1e-12)
        for _ in range(n):
            mask = rng.uniform(size=(int(rng.integers(1, 20)), int(rng.integers(1, 20)))) < rng.uniform(0.2, 0.7)
            np.testing.assert_array_equal(connected_components(mask), flood_fill_labels(mask))
        for _ in range(n):
            pred = random_instances(rng, n=int(rng.integers(0, 7)))
            gt = random_instances(rng, n=int(rng.integers(0, 7)))
            assert aji(pred, gt) == pytest.approx(aji_oracle(pred, gt), abs=1e-9)
            pan = panoptic(pred, gt)
            np.testing.assert_allclose((pan.dq, pan.sq, pan.pq), panoptic_oracle(pred, gt), atol=1e-9)
        elapsed = time.perf_counter() - t0
        info["instances_each"] = n
        assert elapsed < 60


# 5 -------------------------------------------------------------------------
def test_criterion_5_metric_fixed_points(capsys):
    with criterion(capsys, 5, "self-comparison fixed points and hand examples") as info:
        count = 0
        for name in BUILTIN_STYLES:
            for seed in (0, 1):
                for s in generate_domain(name, 5, seed).samples:
                    r = score(s.labels, s.labels)
                    assert (r.dice, r.miou, r.f1, r.aji, r.dq, r.sq, r.pq, r.hd) == (
                        100, 100, 100, 100, 100, 100, 100, 0)
                    count += 1
        info["samples"] = count

        # |P| = |G| = 4 with 2 shared pixels
        p, g = np.zeros((4, 4), int), np.zeros((4, 4), int)
        p[0, :] = 1
        g[0, :2] = g[1, :2] = 1
        assert round(dice(p, g), 2) == 50.00
        # 2x2 flattened [1,1,0,0] vs [1,0,1,0]
        p, g = np.array([[1, 1], [0, 0]]), np.array([[1, 0], [1, 0]])
        assert round(f1(p, g), 2) == 50.00
        assert round(miou(p, g), 2) == round(100 / 3, 2)
        # square against the same square grown by one pixel along each side
        sq = np.zeros((12, 12), int)
        sq[4:8, 4:8] = 1
        grown = sq.copy()
        grown[3:9, 4:8] = 1
        grown[4:8, 3:9] = 1
        assert round(hausdorff(sq, grown), 2) == 1.00
        # one GT 4-px square, one pred 4-px square, 2 px shared
        g = np.zeros((6, 6), int)
        g[1:3, 1:3] = 1
        p = np.zeros_like(g)
        p[1:3, 2:4] = 1
        assert round(aji(p, g), 2) == 33.33
        # 2 GT, 1 pred matching one of them at IoU 0.8
        g = np.zeros((1, 20), int)
        g[0, 0:5], g[0, 10:14] = 1, 2
        p = np.zeros_like(g)
        p[0, 0:4] = 1
        pan = panoptic(p, g)
        assert (round(pan.dq, 2), round(pan.sq, 2), round(pan.pq, 2)) == (66.67, 80.00, 53.33)
        info["hand_examples"] = 5


# 6 -------------------------------------------------------------------------
@pytest.mark.slow
def test_criterion_6_toy_learning_signal(capsys):
    with criterion(capsys, 6, "held-out domain Dice/AJI after toy training") as info:
        cfg = RunConfig(lr=3e-3, epochs=50, n_images=200, seed=0)
        assert (cfg.d, cfg.blocks, cfg.size) == (64, 2, 64) and cfg.epochs <= 100
        sources = generate_domains(["S1", "S2", "S3"], cfg.n_images, cfg.seed)
        target = generate_domain("S4", 20, cfg.seed)
        t0 = time.perf_counter()
        ckpt = train(cfg, sources, forbidden_domains={"S4"})
        P.check_disjoint(ckpt, target)
        mean = train_mod.domain_mean(evaluate(cfg, ckpt, target), "synthetic", "S4")
        elapsed = time.perf_counter() - t0
        ratio = ckpt.losses[0] / min(ckpt.losses)
        info.update(dice=f"{mean.dice:.2f}", aji=f"{mean.aji:.2f}", loss_ratio=f"{ratio:.1f}x",
                    train_eval=f"{elapsed / 60:.1f}min")
        assert mean.dice >= 85
        assert mean.aji >= 50
        assert ratio >= 5
        assert elapsed < 30 * 60


# 7 -------------------------------------------------------------------------
def test_criterion_7_ablation_structure(capsys):
    with criterion(capsys, 7, "eight-row ablation grid, stable CSV") as info:
        cfg = RunConfig(epochs=1, n_images=2)
        domains = generate_domains(["S1", "S2", "S3"], cfg.n_images, cfg.seed)
        first = P.table_text(P.run_ablation(cfg, domains), P.ABLATION_FIELDS)
        rows = P.run_ablation(cfg, domains)
        second = P.table_text(rows, P.ABLATION_FIELDS)
        assert first == second
        assert first.splitlines()[0] == ",".join(P.ABLATION_FIELDS)
        assert len(rows) == 8 and [r["row"] for r in rows] == list(range(1, 9))
        assert [(r["hs_adapter"], r["gkp_encoder"], r["tsm_decoder"]) for r in rows] == list(P.ABLATION_GRID)
        counts = [r["params_trainable"] for r in rows]
        assert len(set(counts)) == 8
        base = rows[0]
        adapter = max(r["params_adapter"] for r in rows)
        gkp = max(r["params_gkp"] for r in rows)
        tsm_extra = max(r["params_decoder"] for r in rows) - base["params_decoder"]
        assert adapter > 0 and gkp > 0 and tsm_extra > 0
        for r in rows:
            assert r["params_adapter"] == (adapter if r["hs_adapter"] else 0)
            assert r["params_gkp"] == (gkp if r["gkp_encoder"] else 0)
            assert r["params_decoder"] == base["params_decoder"] + (tsm_extra if r["tsm_decoder"] else 0)
            assert r["params_trainable"] == r["params_adapter"] + r["params_gkp"] + r["params_decoder"]
        info["trainable_counts"] = "/".join(map(str, counts))


# 8 -------------------------------------------------------------------------
def test_criterion_8_protocol_hygiene(capsys, monkeypatch):
    with criterion(capsys, 8, "LODO never trains on the target; 8:1:1 splits disjoint and seeded") as info:
        seen = []
        real_train = P.train

        def spy(cfg, train_domains, *args, **kwargs):
            ckpt = real_train(cfg, train_domains, *args, **kwargs)
            seen.append((kwargs.get("forbidden_domains"), {s.domain for d in train_domains for s in d.samples}))
            return ckpt

        monkeypatch.setattr(P, "train", spy)
        cfg = RunConfig(size=32, d=16, heads=2, blocks=1, c_p=16, r=4, epochs=1, n_images=2)
        domains = generate_domains(["S1", "S2", "S3", "S4"], 2, 0, (32, 32))
        rows = P.run_lodo(cfg, domains)
        assert [r["target"] for r in rows] == ["S1", "S2", "S3", "S4"]
        for row, (forbidden, used) in zip(rows, seen):
            assert forbidden == {row["target"]}
            assert row["target"] not in used and len(used) == 3

        # a leaked held-out sample must abort training
        with pytest.raises(AssertionError):
            train(cfg, domains, forbidden_domains={"S4"})
        info["lodo_folds"] = len(rows)

        checked = 0
        for n in (3, 10, 20, 37, 100):
            for seed in range(10):
                s = P.split_811(n, seed)
                parts = [set(s.train), set(s.val), set(s.test)]
                assert sum(map(len, parts)) == n and set().union(*parts) == set(range(n))
                assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
                assert P.split_811(n, seed) == s
                checked += 1
        assert (len(P.split_811(20, 0).train), len(P.split_811(20, 0).val), len(P.split_811(20, 0).test)) == (16, 2, 2)
        assert len({P.split_811(20, seed) for seed in range(10)}) > 1
        info["splits"] = checked
