import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deskgan import fixtures, models, ops, train
from deskgan.optim import Adam
from deskgan.tensor import Tensor, no_grad


def small_intro(**kw):
    base = dict(batch_size=16, epochs=2, g_width=16, d_width=16, seed=3)
    base.update(kw)
    return train.intro_config(**base)


# -- configs -----------------------------------------------------------------

def test_presets_match_tables():
    c = train.intro_config()
    assert (c.batch_size, c.lr, c.beta1, c.latent_dim, c.leaky_slope, c.dropout) == (256, 2e-4, 0.5, 100, 0.2, 0.4)
    s = train.style_config()
    assert (s.beta1, s.beta2, s.eps, s.batch_size) == (0.0, 0.99, 1e-8, 16)
    assert train.batches_per_epoch(79734, 128) == 623


def test_config_validation():
    with pytest.raises(train.ConfigError):
        train.intro_config(batch_size=1)
    with pytest.raises(train.ConfigError):
        train.intro_config(lr=0)
    with pytest.raises(train.ConfigError):
        train.intro_config(latent_dim=0)
    with pytest.raises(train.ConfigError):
        train.intro_config(label_smoothing=(0.7, 1.2))
    assert train.intro_config(label_smoothing=(0.7, 1.2), loss="mse").label_smoothing == (0.7, 1.2)


def test_config_text_parsing(tmp_path):
    text = "# comment\nbatch_size = 32\nlabel_smoothing = 0.8,1.0\nada_enabled=false\nmodel=dcgan\n"
    cfg = train.parse_config_text(text)
    assert cfg.batch_size == 32 and cfg.label_smoothing == (0.8, 1.0) and cfg.ada_enabled is False
    assert cfg.model == "dcgan"
    with pytest.raises(train.ConfigError, match="colour"):
        train.parse_config_text("colour=red")
    path = tmp_path / "run.cfg"
    path.write_text("epochs=3\n")
    assert train.load_config(path, train.style_config()).epochs == 3
    assert train.apply_overrides(cfg, {"epochs": "7"}).epochs == 7


# -- history -----------------------------------------------------------------

def test_history_strictly_increasing_and_csv(tmp_path):
    h = train.LossHistory()
    h.append(1, 0.5, 1.25)
    h.append(2, 0.25, 1.0)
    with pytest.raises(ValueError):
        h.append(2, 0.0, 0.0)
    h.record_ada(2, 0.01, 0.7)
    back = train.LossHistory.from_csv(h.to_csv(tmp_path / "loss.csv"))
    assert back.records == h.records and back.ada == h.ada
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "iter,g_loss,d_loss,ada_p,ada_rt"


# -- label tricks ------------------------------------------------------------

def test_smooth_labels():
    rng = np.random.default_rng(0)
    ones = np.ones(100_000)
    assert np.array_equal(train.smooth_labels(ones, 1.0, 1.0, rng), ones)
    out = train.smooth_labels(ones, 0.7, 1.2, rng)
    assert out.min() >= 0.7 and out.max() <= 1.2
    assert abs(out.mean() - 0.95) < 0.01
    mixed = np.array([1.0, 0.0, 1.0, 0.0])
    assert np.all(train.smooth_labels(mixed, 0.7, 0.9, rng)[[1, 3]] == 0.0)


def test_noisy_labels_counts_and_involution():
    rng = np.random.default_rng(1)
    real = np.arange(100.0)
    fake = -np.arange(1.0, 101.0)
    r0, f0, swap0 = train.noisy_labels(real, fake, 0.0, rng)
    assert np.array_equal(r0, real) and len(swap0[0]) == 0
    r, f, swap = train.noisy_labels(real, fake, 0.05, rng)
    assert len(swap[0]) == 5 and (r < 0).sum() == 5 and (f >= 0).sum() == 5
    rr, ff = train.apply_swap(r, f, swap)
    assert np.array_equal(rr, real) and np.array_equal(ff, fake)


@given(st.integers(2, 64), st.floats(0, 0.99), st.integers(0, 1000))
def test_noisy_labels_floor_count(n, ratio, seed):
    _, _, (ri, fi) = train.noisy_labels(np.zeros(n), np.ones(n), ratio, np.random.default_rng(seed))
    assert len(ri) == len(fi) == int(np.floor(ratio * n + 1e-9))


# -- heuristics --------------------------------------------------------------

def test_divergence_detector():
    assert train.detect_divergence(np.linspace(5, 1, 5000)) is None
    assert train.detect_divergence(np.full(5000, 2.0)) is None
    t = np.arange(6000)
    v = np.abs(t - 2000) / 1000.0 + 1.0  # minimum at iteration 2000
    hit = train.detect_divergence(v, window=500, factor=1.5)
    assert hit is not None and abs(hit - 2000) <= 500 + 500  # onset lags by at most one window past the minimum
    assert hit > 2000


def test_mode_collapse_score_examples():
    rng = np.random.default_rng(2)
    same = np.repeat(rng.uniform(0, 1, (1, 1, 8, 8)), 6, axis=0)
    assert train.detect_mode_collapse(same, 0.5) == 1.0
    noise = rng.uniform(-1, 1, (16, 3, 8, 8))
    assert train.detect_mode_collapse(noise) < 0.1
    a, b = np.full((1, 4, 4), 0.9), np.full((1, 4, 4), 0.3)
    # cosine of two constant images about center c is sign((a-c)(b-c)), clipped at 0
    assert train.detect_mode_collapse(np.stack([a, b]), 0.0) == pytest.approx(1.0)
    assert train.detect_mode_collapse(np.stack([a, b]), 0.5) == 0.0


# -- training loop -----------------------------------------------------------

def test_training_is_bit_identical(tmp_path):
    images = fixtures.digit_images(64, 28)
    a = train.train(small_intro(), images, tmp_path / "a")
    b = train.train(small_intro(), images, tmp_path / "b")
    assert a.history.records == b.history.records
    assert (tmp_path / "a" / "network.dgck").read_bytes() == (tmp_path / "b" / "network.dgck").read_bytes()
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
    assert sorted(p.name for p in (tmp_path / "a" / "checkpoints").iterdir() if p.suffix == ".dgck") == \
        ["epoch-0001.dgck", "epoch-0002.dgck"]
    assert len(a.history) == 2 * train.batches_per_epoch(64, 16)
    assert list(a.grids) == [2]


def test_grids_every_ten_epochs():
    res = train.train(small_intro(epochs=12, grid_size=4), fixtures.digit_images(16, 28))
    assert sorted(res.grids) == [10, 12]
    assert res.grids[10].shape == (56, 56, 1)


def test_half_batches(monkeypatch):
    seen = []
    real_forward = models.IntroDiscriminator.forward

    def spy(self, x):
        seen.append(x.shape[0])
        return real_forward(self, x)
    monkeypatch.setattr(models.IntroDiscriminator, "forward", spy)
    train.train(small_intro(epochs=1, batch_size=8), fixtures.digit_images(16, 28))
    # per iteration: 4 reals, 4 fakes, then 8 fresh fakes for the generator step
    assert seen == [4, 4, 8] * 2


def test_dcgan_and_options_run():
    cfg = train.dcgan_config(image_size=16, batch_size=8, epochs=1, g_width=4, d_width=4,
                             label_smoothing=(0.8, 1.0), noisy_label_ratio=0.25, init="custom",
                             normalize_mode="computed_stats")
    res = train.train(cfg, fixtures.cover_images(16, 16))
    assert np.all(np.isfinite(res.history.g_losses))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        train.train(small_intro(), fixtures.cover_images(4, 16))


def test_network_round_trip(tmp_path):
    res = train.train(small_intro(epochs=1), fixtures.digit_images(16, 28), tmp_path)
    g, cfg = train.load_network(tmp_path / "network.dgck")
    z = np.random.default_rng(0).standard_normal((3, cfg.latent_dim)).astype(np.float32)
    assert np.array_equal(train.sample_images(g, z), train.sample_images(res.generator, z))


def test_discriminator_loss_decreases_early():
    drops = []
    images = fixtures.digit_images(64, 28)
    for seed in range(5):
        res = train.train(small_intro(seed=seed, epochs=13), images)  # 52 iterations
        d = res.history.d_losses
        drops.append(d[45:50].mean() < d[:5].mean())
    assert np.median(drops) == 1


def test_frozen_generator_discriminator_separates():
    rng = np.random.default_rng(0)
    g = models.IntroGenerator(width=8, rng=rng)
    d = models.IntroDiscriminator(width=8, dropout=0.0, rng=rng)
    opt = Adam(d.parameters(), 2e-4, (0.5, 0.999))
    # linearly separable: real digits are bright strokes, fakes sit near 0.5 everywhere
    reals = fixtures.digit_images(64, 28).astype(np.float32).transpose(0, 3, 1, 2) / 255.0
    acc = 0.0
    for it in range(200):
        z = rng.standard_normal((8, 100)).astype(np.float32)
        with no_grad():
            fake = g(Tensor(z)).data
        real = reals[rng.choice(64, 8)]
        opt.zero_grad()
        loss = ops.bce_loss(d(Tensor(real)), np.ones(8)) + ops.bce_loss(d(Tensor(fake)), np.zeros(8))
        loss.backward()
        opt.step()
        if it % 20 == 19:
            with no_grad():
                pr, pf = d(Tensor(reals[:32])).data, d(Tensor(fake)).data
            acc = ((pr > 0.5).sum() + (pf < 0.5).sum()) / (len(pr) + len(pf))
            if acc > 0.9:
                break
    assert acc > 0.9
