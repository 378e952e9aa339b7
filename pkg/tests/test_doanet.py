import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from radwarp.doanet import (DoaNet, DoaNetConfig, AdamState, TrainSample, build_features, doa_labels,
                            feature_normalization, load_net, loss_l1, loss_scalespace, power_pool, sample_loss,
                            save_net, train, validation_mae)
from radwarp.errors import ConfigurationError, TrainingDiverged
from radwarp.geometry import default_calibration
from radwarp.pipeline import doa_frame
from radwarp.radar import RadarParams, RdSpectrum
from radwarp.scene import EgoMotion, ObjectClass, Scatterer, Scene
from radwarp.warp import WarpGrid, warp_backward, warp_forward


def random_warp(rng, shape=(6, 5), rd_shape=(8, 6), frac=0.8) -> WarpGrid:
    """Warp grid with random interior coordinates on a small RD grid."""
    H, W = shape
    N, M = rd_shape
    valid = rng.random(shape) < frac
    pix = np.flatnonzero(valid)
    r = rng.uniform(0, N - 1, pix.size)
    d = rng.uniform(0, M - 1, pix.size)
    r0 = np.minimum(np.floor(r).astype(np.int64), N - 2)
    d0 = np.minimum(np.floor(d).astype(np.int64), M - 2)
    fr, fd = r - r0, d - d0
    idx = np.stack([r0 * M + d0, r0 * M + d0 + 1, (r0 + 1) * M + d0, (r0 + 1) * M + d0 + 1], axis=1)
    w = np.stack([(1 - fr) * (1 - fd), (1 - fr) * fd, fr * (1 - fd), fr * fd], axis=1)
    nan = np.full(shape, np.nan)
    return WarpGrid(shape, rd_shape, valid, np.zeros(shape, bool), nan, nan, nan, nan, nan, 0, pix, idx, w)


def small_sample(rng, shape=(6, 5), rd_shape=(8, 6)) -> TrainSample:
    wg = random_warp(rng, shape, rd_shape)
    feats = np.stack([rng.normal(20, 5, rd_shape), rng.uniform(-np.pi, np.pi, rd_shape),
                      rng.uniform(-np.pi, np.pi, rd_shape)])
    ref = rng.uniform(-40, 40, shape)
    return TrainSample(feats, wg, ref, wg.valid.copy(), rng.normal(20, 5, rd_shape))


def test_features_examples():
    u = np.ones((3, 4, 5), complex) * (1 + 2j)
    f = build_features(u)
    assert f.shape == (3, 4, 5) and np.all(f[1:] == 0)
    u[1] *= np.exp(1j * np.pi / 4)
    u[2] = u[1]
    assert np.allclose(build_features(u)[1], np.pi / 4)
    rng = np.random.default_rng(0)
    f = build_features(rng.normal(size=(3, 20, 20)) + 1j * rng.normal(size=(3, 20, 20)))
    assert np.all(f[1:] > -np.pi) and np.all(f[1:] <= np.pi)
    with pytest.raises(ConfigurationError):
        build_features(np.ones((4, 2, 2), complex))


def test_features_accept_spectrum():
    u = np.ones((3, 2, 2), complex)
    spec = RdSpectrum(u, RadarParams())
    assert np.array_equal(build_features(spec), build_features(u))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        DoaNetConfig(kernel=5)
    with pytest.raises(ConfigurationError):
        DoaNetConfig(t=0)
    assert DoaNetConfig(t=3).channels == [3, 96, 192, 384, 192, 96, 96, 1]


def test_zero_weights_predict_zero():
    net = DoaNet.init(DoaNetConfig(kernel=3))
    for W in net.weights:
        W[:] = 0
    assert np.all(net.forward(np.random.default_rng(0).normal(size=(3, 7, 9))) == 0)


@given(st.integers(0, 10_000), st.sampled_from([1, 3]))
def test_output_bounded(seed, k):
    rng = np.random.default_rng(seed)
    net = DoaNet.init(DoaNetConfig(kernel=k), seed=seed)
    net.weights[-1] *= 100
    out = net.forward(rng.normal(0, 50, size=(3, 6, 5)))
    assert np.all(np.abs(out) <= 90)


def test_pointwise_net_commutes_with_permutation():
    rng = np.random.default_rng(3)
    net = DoaNet.init(DoaNetConfig(kernel=1), seed=3)
    feats = rng.normal(size=(3, 8, 6))
    perm = rng.permutation(48)
    out = net.forward(feats).ravel()
    out_p = net.forward(feats.reshape(3, -1)[:, perm].reshape(3, 8, 6)).ravel()
    assert np.allclose(out_p, out[perm], atol=1e-12)


def test_kernel3_receptive_field():
    rng = np.random.default_rng(3)
    net = DoaNet.init(DoaNetConfig(kernel=3), seed=3)
    feats = rng.normal(size=(3, 20, 20))
    base = net.forward(feats)
    feats[:, 10, 10] += 5.0
    changed = np.abs(net.forward(feats) - base) > 0
    rows, cols = np.nonzero(changed)
    # seven 3x3 layers reach at most 7 bins away
    assert changed.sum() > 1 and np.abs(rows - 10).max() <= 7 and np.abs(cols - 10).max() <= 7


def _pixel_with_radar_ratio(calib, ratio):
    """Depth and pixel (v, u) whose radar-frame point has y = ratio * x."""
    K = calib.intrinsics
    T = calib.radar_from_cam
    for u in range(K.width):
        v = int(K.cy) + 5
        d = T.rotation @ np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
        denom = d[1] - ratio * d[0]
        if abs(denom) < 1e-12:
            continue
        z = (ratio * T.translation[0] - T.translation[1]) / denom
        if z > 0.5:
            return v, u, z
    raise AssertionError("no pixel found")


def test_labels_examples(calib):
    K = calib.intrinsics
    for ratio, expect in ((np.tan(np.radians(30.0)), 30.0), (-0.5, np.degrees(np.arctan(-0.5)))):
        v, u, z = _pixel_with_radar_ratio(calib, ratio)
        depth = np.full((K.height, K.width), np.nan)
        depth[v, u] = z
        lab = doa_labels(depth, calib)
        assert lab[v, u] == pytest.approx(expect, abs=1e-9)
        assert np.isnan(lab).sum() == lab.size - 1
    # columns either side of the principal point are mirror images about boresight
    depth = np.full((K.height, K.width), 8.0)
    lab = doa_labels(depth, calib)
    assert lab[40, 79] == pytest.approx(-lab[40, 80], abs=1e-12) and lab[40, 79] > 0


def test_labels_match_scatterer_azimuth(calib):
    car = Scatterer(np.array([10.5, 3.0, 0.5]), np.zeros(3), 5.0, ObjectClass.CAR, 1, 0.3)
    f = doa_frame(Scene((car,), ground=False), EgoMotion.stationary(), calib, RadarParams(), seed=0)
    lab = f.sample.reference
    true_az = np.degrees(np.arctan2(3.0, 10.0))  # radar sits 0.5 m ahead of the ego origin
    m = np.isfinite(lab)
    # labels on the disc straddle the centre azimuth within its angular radius
    half = np.degrees(np.arcsin(0.3 / np.hypot(10.0, 3.0)))
    assert lab[m].min() < true_az < lab[m].max()
    assert np.all(np.abs(lab[m] - true_az) <= half + 0.01)


def test_loss_l1_examples():
    ref = np.linspace(-10, 10, 12).reshape(3, 4)
    mask = np.ones((3, 4), bool)
    mask[0, 0] = False
    assert loss_l1(ref, ref, mask)[0] == 0
    loss, cot = loss_l1(ref + 1, ref, mask)
    assert loss == pytest.approx(1.0)
    assert np.allclose(cot[mask], 1 / 11) and cot[0, 0] == 0
    with pytest.warns(UserWarning):
        loss, cot = loss_l1(ref, ref, np.zeros((3, 4), bool))
    assert loss == 0 and not cot.any()


def test_end_to_end_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    sample = small_sample(rng)
    net = DoaNet.init(DoaNetConfig(kernel=3), seed=11)
    _, grads = sample_loss(net, sample)
    params = net.parameters()
    sizes = np.array([p.size for p in params])
    ok = 0
    trials = 200
    for _ in range(trials):
        i = int(rng.choice(len(params), p=sizes / sizes.sum()))
        j = int(rng.integers(params[i].size))
        flat = params[i].reshape(-1)
        old = flat[j]
        h = 1e-5 * max(1.0, abs(old))
        flat[j] = old + h
        lp = sample_loss(net, sample, grad=False)
        flat[j] = old - h
        lm = sample_loss(net, sample, grad=False)
        flat[j] = old
        fd = (lp - lm) / (2 * h)
        g = grads[i].reshape(-1)[j]
        ok += abs(fd - g) <= 1e-4 * max(abs(fd), abs(g)) + 1e-9
    assert ok >= 0.99 * trials


def test_pool_examples():
    pred = np.array([[0.0, 4.0]])
    assert power_pool(pred, np.array([[1.0, 3.0]]), 2)[0, 0] == pytest.approx(3.0)
    rng = np.random.default_rng(0)
    p = rng.normal(size=(4, 6))
    pooled = power_pool(p, np.ones((4, 6)), 2)
    assert pooled[0, 0] == pytest.approx(p[:2, :2].mean())
    assert np.array_equal(power_pool(p, rng.random((4, 6)), 1), p)


def test_scalespace_loss_reduces_to_l1_and_has_correct_gradient():
    rng = np.random.default_rng(5)
    s = small_sample(rng)
    pred = rng.uniform(-30, 30, s.warp.rd_shape)
    l1, cot = loss_l1(warp_forward(pred, s.warp, fill=0.0), s.reference, s.train_mask)
    ls, g = loss_scalespace(pred, s.power_db, s.reference, s.train_mask, s.warp, levels=1)
    assert ls == pytest.approx(l1) and np.allclose(g, warp_backward(cot, s.warp))
    loss, g = loss_scalespace(pred, s.power_db, s.reference, s.train_mask, s.warp, levels=3)
    for b in rng.choice(pred.size, 20, replace=False):
        e = np.zeros(pred.size)
        e[b] = 1e-6
        e = e.reshape(pred.shape)
        fd = (loss_scalespace(pred + e, s.power_db, s.reference, s.train_mask, s.warp)[0]
              - loss_scalespace(pred - e, s.power_db, s.reference, s.train_mask, s.warp)[0]) / 2e-6
        assert fd == pytest.approx(g.flat[b], rel=1e-4, abs=1e-8)
    with pytest.raises(ConfigurationError):
        loss_scalespace(pred, s.power_db, s.reference, s.train_mask, s.warp, levels=0)


def test_snr_mask_zeroes_low_snr_cotangents(calib):
    car = Scatterer(np.array([10.5, 1.0, 0.8]), np.array([-2.0, 0.0, 0.0]), 10.0, ObjectClass.CAR, 1, 0.8)
    scene = Scene((car,), ground=True)
    ego = EgoMotion.from_speed_yaw(4.0, 0.0)
    on = doa_frame(scene, ego, calib, RadarParams(), seed=2, snr_mask=True)
    off = doa_frame(scene, ego, calib, RadarParams(), seed=2, snr_mask=False)
    low = off.radar_mask & ~(on.warped_snr > 10.0)
    assert low.any()
    pred = warp_forward(np.full(on.sample.warp.rd_shape, 50.0), on.sample.warp, fill=0.0)
    _, cot_on = loss_l1(pred, on.sample.reference, on.sample.train_mask)
    _, cot_off = loss_l1(pred, off.sample.reference, off.sample.train_mask)
    assert np.all(cot_on[low] == 0) and np.all(cot_off[low] != 0)


def test_checkpoint_round_trip(tmp_path):
    net = DoaNet.init(DoaNetConfig(kernel=3), seed=4, input_offset=[1, 2, 3], input_scale=[4, 5, 6])
    path = tmp_path / "n.rwnet"
    save_net(net, path)
    back = load_net(path)
    feats = np.random.default_rng(0).normal(size=(3, 5, 4))
    assert np.array_equal(back.forward(feats), net.forward(feats))
    assert back.config.kernel == 3 and np.array_equal(back.input_scale, [4, 5, 6])
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXXXX" + raw[6:])
    with pytest.raises(ConfigurationError):
        load_net(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-8])
    with pytest.raises(ConfigurationError):
        load_net(tmp_path / "short")


def _single_target_set(calib, n, seed, rng):
    frames = []
    for i in range(n):
        r = rng.uniform(6, 18)
        az = np.radians(rng.uniform(-40, 40))
        car = Scatterer(np.array([0.5 + r * np.cos(az), r * np.sin(az), 0.8]),
                        np.array([rng.uniform(-3, 3), rng.uniform(-3, 3), 0.0]), 10.0, ObjectClass.CAR, 1, 0.3)
        frames.append(doa_frame(Scene((car,), ground=False), EgoMotion.from_speed_yaw(4.0, 0.0), calib,
                                RadarParams(), seed=seed + i).sample)
    return frames


@pytest.fixture(scope="module")
def single_target():
    calib = default_calibration()
    rng = np.random.default_rng(5)
    return _single_target_set(calib, 20, 0, rng), _single_target_set(calib, 5, 100, rng)


def _net_for(train_set, kernel=1):
    off, sc = feature_normalization([s.features for s in train_set])
    return DoaNet.init(DoaNetConfig(kernel=kernel), seed=0, input_offset=off, input_scale=sc)


def test_single_target_learns_within_200_steps(single_target):
    tr, va = single_target
    res = train(_net_for(tr), tr, va, epochs=10, lr=1e-3, lr_decay=0.7, patience=100)
    assert res.state.step <= 200
    vals = [t["val_mae"] for t in res.trace if t["val_mae"] != ""]
    assert min(vals) < 2.0


def test_shuffled_labels_do_not_beat_constant_baseline(single_target):
    tr, va = single_target
    rng = np.random.default_rng(9)
    pooled = np.concatenate([s.reference[s.train_mask] for s in tr])
    shuffled = []
    for s in tr:
        ref = s.reference.copy()
        ref[s.train_mask] = rng.choice(pooled, int(s.train_mask.sum()))
        shuffled.append(TrainSample(s.features, s.warp, ref, s.train_mask, s.power_db))
    res = train(_net_for(tr), shuffled, va, epochs=10, lr=1e-3, lr_decay=0.7, patience=100)
    val_labels = np.concatenate([s.reference[s.train_mask] for s in va])
    baseline = np.mean(np.abs(val_labels - np.median(val_labels)))
    assert validation_mae(res.net, va) >= baseline


def test_loss_decreases_over_first_steps_at_tiny_lr():
    rng = np.random.default_rng(2)
    batch = [small_sample(rng) for _ in range(10)]
    net = DoaNet.init(DoaNetConfig(kernel=3), seed=2)
    state = AdamState(lr=1e-6)
    params = net.parameters()
    losses = []
    for _ in range(10):
        out = [sample_loss(net, s) for s in batch]
        losses.append(sum(l for l, _ in out) / len(batch))
        grads = [sum(g[i] for _, g in out) / len(batch) for i in range(len(params))]
        state.update(params, grads)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_training_is_deterministic():
    rng = np.random.default_rng(8)
    data = [small_sample(rng) for _ in range(4)]
    runs = [train(DoaNet.init(DoaNetConfig(kernel=3), seed=1), data, data[:1], epochs=2, lr=1e-3, seed=3)
            for _ in range(2)]
    assert [t["train_loss"] for t in runs[0].trace] == [t["train_loss"] for t in runs[1].trace]
    assert all(np.array_equal(a, b) for a, b in zip(runs[0].net.parameters(), runs[1].net.parameters()))


def test_early_stopping_keeps_best_checkpoint():
    rng = np.random.default_rng(8)
    data = [small_sample(rng) for _ in range(3)]
    res = train(DoaNet.init(DoaNetConfig(kernel=1), seed=1), data, data[:1], epochs=30, lr=1e-1, patience=2)
    vals = [t["val_mae"] for t in res.trace if t["val_mae"] != ""]
    assert res.stopped_early and len(vals) < 30
    assert validation_mae(res.net, data[:1]) == pytest.approx(min(vals))


def test_divergence_is_reported():
    rng = np.random.default_rng(8)
    data = [small_sample(rng) for _ in range(3)]
    with pytest.raises(TrainingDiverged):
        train(DoaNet.init(DoaNetConfig(kernel=1), seed=1), data, [], epochs=50, lr=1.0, divergence_factor=1.0)
    state = AdamState(lr=1e-3)
    with pytest.raises(TrainingDiverged):
        state.update([np.zeros(3)], [np.array([np.nan, 0, 0])])
    with pytest.raises(ConfigurationError):
        train(DoaNet.init(DoaNetConfig(kernel=1)), [], [])
