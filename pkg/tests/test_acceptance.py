"""Acceptance criteria 1-10, one test each.

Every test prints a single ``[criterion N] PASS|FAIL ...`` line (shown even
under capture) before asserting, so ``pytest -v`` output doubles as a report.
"""
import filecmp
import json
import math
import time

import numpy as np
from PIL import Image

from deskgan import ada, cli, data, fixtures, latent, metrics, nn, train
from deskgan.gradcheck import gradcheck
from deskgan.style import adain
from deskgan.tensor import Tensor

from conftest import style_fixture_config
from op_cases import OP_CASES


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def test_criterion_01_gradient_correctness(capsys):
    t0 = time.perf_counter()
    failures, worst = [], 0.0
    for name, build in OP_CASES.items():
        for seed in range(20):
            fn, inputs = build(np.random.default_rng(seed))
            ok, ratio = gradcheck(fn, inputs, h=1e-3, rtol=1e-4, atol=1e-6)
            worst = max(worst, ratio)
            if not ok:
                failures.append(f"{name}#{seed}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 60
    report(capsys, 1, ok, f"{len(OP_CASES)} ops x 20 cases, worst error/tolerance {worst:.3f}, "
                          f"failures {failures[:5]}, {elapsed:.1f}s")


def test_criterion_02_initializer_statistics(capsys):
    t0 = time.perf_counter()
    pairs = [(3, 64), (27, 16), (100, 128), (576, 64), (6272, 1)]
    rng = np.random.default_rng(0)
    lines, ok = [], True
    for n_l, m_l in pairs:
        layer = nn.Dense(100, 100)  # 10k weights, fan values passed explicitly
        nn.init_he(layer, n_l, rng)
        std = float(layer.weight.data.astype(np.float64).std())
        target = math.sqrt(2.0 / n_l)
        he_ok = abs(std / target - 1) < 0.05
        nn.init_xavier_normalized(layer, n_l, m_l, rng)
        bound = math.sqrt(6.0) / math.sqrt(n_l + m_l)
        w = np.abs(layer.weight.data.astype(np.float64))
        xav_ok = bool(w.max() <= bound) and w.max() > 0.99 * bound
        ok &= he_ok and xav_ok
        lines.append(f"({n_l},{m_l}) he {std / target:.3f} xavier max/bound {w.max() / bound:.4f}")
    elapsed = time.perf_counter() - t0
    report(capsys, 2, ok and elapsed < 5, "; ".join(lines) + f"; {elapsed:.2f}s")


def test_criterion_03_normalization_round_trip(capsys):
    t0 = time.perf_counter()
    images = fixtures.cover_images(256, 32, seed=3)
    stats = data.channel_stats(images)
    x = data.normalize(images, stats).astype(np.float64)  # N x C x H x W
    means = x.mean(axis=(0, 2, 3))
    stds = x.std(axis=(0, 2, 3))
    elapsed = time.perf_counter() - t0
    ok = bool(np.all(np.abs(means) < 1e-3) and np.all(np.abs(stds - 1) < 1e-2)) and elapsed < 30
    report(capsys, 3, ok, f"means {np.round(means, 6).tolist()} stds {np.round(stds, 6).tolist()} "
                          f"{elapsed:.1f}s")


def test_criterion_04_fixture_gan_run(capsys, tmp_path):
    t0 = time.perf_counter()
    images = fixtures.digit_images(64, 28, seed=0)
    cfg = train.intro_config(batch_size=16, epochs=5, seed=7)
    a = train.train(cfg, images, tmp_path / "a")
    b = train.train(cfg, images, tmp_path / "b")
    elapsed = time.perf_counter() - t0
    finite = bool(np.all(np.isfinite(a.history.g_losses)) and np.all(np.isfinite(a.history.d_losses)))
    same = filecmp.cmp(tmp_path / "a" / "network.dgck", tmp_path / "b" / "network.dgck", shallow=False)
    same = same and a.history.records == b.history.records
    grid_z = np.random.default_rng(cfg.seed + 1).standard_normal((16, cfg.latent_dim)).astype(np.float32)
    samples = train.sample_images(a.generator, grid_z)
    score = train.detect_mode_collapse(samples, train.generator_output_center(a.generator))
    ok = finite and same and score < 0.99 and elapsed < 300
    report(capsys, 4, ok, f"{len(a.history)} iterations, finite={finite}, byte-identical={same}, "
                          f"collapse score {score:.4f} (< 0.99 required), {elapsed:.1f}s")


def test_criterion_05_adain_contract(capsys):
    rng = np.random.default_rng(5)
    worst_mean = worst_std = 0.0
    for hw in (8, 12, 16):
        x = rng.standard_normal((4, 6, hw, hw)) * rng.uniform(0.1, 5) + rng.uniform(-3, 3)
        ys = rng.uniform(-3, 3, (4, 6))
        yb = rng.uniform(-3, 3, (4, 6))
        out = adain(Tensor(x), ys, yb).data.astype(np.float64)
        worst_mean = max(worst_mean, float(np.abs(out.mean(axis=(2, 3)) - yb).max()))
        worst_std = max(worst_std, float(np.abs(out.std(axis=(2, 3)) - np.abs(ys)).max()))
    ok = worst_mean <= 1e-4 and worst_std <= 1e-4
    report(capsys, 5, ok, f"max |mean - y_b| {worst_mean:.2e}, max |std - |y_s|| {worst_std:.2e}")


def test_criterion_06_ada_controller(capsys):
    p_star, step = 0.3, 0.005
    state = ada.AdaState(p=0.0, target=0.6, step=step)
    entered = None
    trace = []
    for i in range(1, 501):
        rt = math.tanh(5 * (p_star - state.p)) + state.target
        state = ada.adjust_p(state, rt)
        trace.append(state.p)
        if entered is None and abs(state.p - p_star) <= 2 * step:
            entered = i
    stays = entered is not None and all(abs(p - p_star) <= 2 * step for p in trace[entered - 1:])
    signs = (ada.rt_estimate([0.5, 1.0, 2.0]) == 1.0,
             ada.rt_estimate([-0.5, -1.0, -2.0]) == -1.0,
             ada.rt_estimate([2.0, -1.0, 3.0, -4.0]) == 0.0)
    ok = stays and all(signs)
    report(capsys, 6, ok, f"within 2*step after {entered} updates and stays there={stays}; "
                          f"final p {trace[-1]:.4f}; sign cases {signs}")


def test_criterion_07_latent_identities(capsys):
    rng = np.random.default_rng(7)
    wa = rng.standard_normal((14, 512)).astype(np.float32)
    wb = rng.standard_normal((14, 512)).astype(np.float32)
    checks = {
        "mix k=0": np.array_equal(latent.style_mix(wa, wb, 0), wa),
        "mix k=max": np.array_equal(latent.style_mix(wa, wb, 14), wb),
        "lerp 0": np.array_equal(latent.interpolate(wa, wb, 0.0), wa),
        "lerp 1": np.array_equal(latent.interpolate(wa, wb, 1.0), wb),
        "average of one": np.array_equal(latent.average([wa]), wa),
        "mix(w,w,k)": all(np.array_equal(latent.style_mix(wa, wa, k), wa) for k in range(15)),
    }
    m = latent.style_mix(wa, wb, 7)
    checks["k=7 rows"] = np.array_equal(m[:7], wb[:7]) and np.array_equal(m[7:], wa[7:])
    failed = [k for k, v in checks.items() if not v]
    report(capsys, 7, not failed, f"{len(checks)} identities, failed {failed}")


def test_criterion_08_projection_progress(capsys, style_run):
    t0 = time.perf_counter()
    result, _ = style_run
    g = result.generator
    ratios = []
    for seed in range(5):
        img = fixtures.cover_images(1, 16, seed=100 + seed)[0]
        target = np.moveaxis(img.astype(np.float32) / 127.5 - 1.0, -1, 0)
        run = latent.project(target, g, steps=100, seed=seed)
        ratios.append(run.final_loss / run.trace[0])
    med = float(np.median(ratios))
    elapsed = time.perf_counter() - t0
    ok = med < 0.5 and elapsed < 180
    report(capsys, 8, ok, f"final/initial MSE per seed {np.round(ratios, 3).tolist()}, "
                          f"median {med:.3f}, {elapsed:.1f}s (excluding fixture training)")


def test_criterion_09_toy_fid(capsys):
    t0 = time.perf_counter()
    images = fixtures.cover_images(200, 32, seed=9)
    feats = metrics.extract_features(images)
    s = metrics.FeatureStats.from_features(feats)
    identical = metrics.frechet_distance(s, metrics.FeatureStats.from_features(feats.copy()))

    # 1-D: (m1 - m2)^2 + (s1 - s2)^2
    one_d = metrics.frechet_distance(metrics.FeatureStats([1.5], [[4.0]]), metrics.FeatureStats([-0.5], [[0.25]]))
    one_d_err = abs(one_d - ((1.5 + 0.5) ** 2 + (2.0 - 0.5) ** 2))
    # diagonal: |mu_a - mu_b|^2 + sum (sqrt(a_i) - sqrt(b_i))^2
    rng = np.random.default_rng(9)
    da, db = rng.uniform(0.1, 3, 8), rng.uniform(0.1, 3, 8)
    ma, mb = rng.standard_normal(8), rng.standard_normal(8)
    diag = metrics.frechet_distance(metrics.FeatureStats(ma, np.diag(da)), metrics.FeatureStats(mb, np.diag(db)))
    diag_err = abs(diag - (np.sum((ma - mb) ** 2) + np.sum((np.sqrt(da) - np.sqrt(db)) ** 2)))

    noise_rng = np.random.default_rng(10)
    fids = []
    for sigma in (5, 20, 60):
        noisy = np.clip(images + noise_rng.normal(0, sigma, images.shape), 0, 255).astype(np.uint8)
        fids.append(metrics.frechet_distance(s, metrics.FeatureStats.from_features(metrics.extract_features(noisy))))
    monotone = fids[0] < fids[1] < fids[2]
    elapsed = time.perf_counter() - t0
    ok = identical <= 1e-6 and one_d_err <= 1e-6 and diag_err <= 1e-6 and monotone and elapsed < 60
    report(capsys, 9, ok, f"identical {identical:.1e}, 1-D err {one_d_err:.1e}, diagonal err {diag_err:.1e}, "
                          f"noise 5/20/60 -> {[round(f, 5) for f in fids]}, {elapsed:.1f}s")


def test_criterion_10_pipeline_end_to_end(capsys, tmp_path):
    # the generator is trained before the clock starts; the criterion times the three commands
    cfg = style_fixture_config(epochs=2)
    train.train(cfg, fixtures.cover_images(32, 16), tmp_path / "net")
    network = tmp_path / "net" / "network.dgck"

    t0 = time.perf_counter()
    with fixtures.FixtureServer(fixtures.default_catalog()) as srv:
        rc_fetch = cli.main(["fetch", "--playlists", "pl-small", "pl-paged", "--dest", str(tmp_path / "covers"),
                             "--base-url", srv.base_url])
    albums = json.loads((tmp_path / "covers" / "albums.json").read_text())
    fetched = len(albums) == 62 and len(list((tmp_path / "covers").glob("*.png"))) == 62

    fixtures.write_images(tmp_path / "gray", fixtures.digit_images(5, 28), prefix="digit")
    rc_data = cli.main(["dataset", "--source", str(tmp_path / "gray"), "--dest", str(tmp_path / "ds"),
                        "--width", "64", "--height", "64"])
    converted = []
    for p in sorted((tmp_path / "ds").glob("*.png")):
        with Image.open(p) as im:
            converted.append(im.mode == "RGB" and im.size == (64, 64))
    dataset_ok = len(converted) == 5 and all(converted)

    rcs = []
    for name in ("g1", "g2"):
        rcs.append(cli.main(["generate", "--network", str(network), "--seeds", "600-605",
                             "--outdir", str(tmp_path / name)]))
    same = all(filecmp.cmp(tmp_path / "g1" / f"seed{s:04d}.png", tmp_path / "g2" / f"seed{s:04d}.png",
                           shallow=False) for s in range(600, 606))
    elapsed = time.perf_counter() - t0
    ok = (rc_fetch == 0 and fetched and rc_data == 0 and dataset_ok and rcs == [0, 0] and same
          and elapsed < 60)
    report(capsys, 10, ok, f"fetch albums {len(albums)} (expected 62), dataset RGB 64x64 {dataset_ok}, "
                           f"generate byte-identical {same}, {elapsed:.1f}s")
