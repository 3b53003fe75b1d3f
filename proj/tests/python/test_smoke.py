import numpy as np
import pytest

import rfkflow


def texture(w, h, seed=0, shift=(0.0, 0.0)):
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    xs = xs + shift[0]
    ys = ys + shift[1]
    img = np.zeros((h, w))
    for _ in range(40):
        fx, fy = rng.uniform(-0.4, 0.4, size=2)
        img += rng.uniform(0.2, 1.0) * np.sin(fx * xs + fy * ys + rng.uniform(0, 2 * np.pi))
    img -= img.min()
    return img / img.max()


def identity_flow(w, h):
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    return np.stack([xs, ys], axis=-1)


def test_defaults_and_hash():
    text = rfkflow.default_config()
    assert "objective.lambda_match = 0.01" in text
    assert "objective.mu_cycle = 1" in text
    assert rfkflow.config_hash() == rfkflow.config_hash({})
    assert rfkflow.config_hash({"seed": 3}) != rfkflow.config_hash()
    with pytest.raises(rfkflow.InvalidArgument):
        rfkflow.config_text({"no.such.key": 1})


def test_ssim_of_identical_images_is_one():
    img = texture(32, 24)
    s = rfkflow.ssim_map(img, img)
    assert s.shape == (24, 32)
    np.testing.assert_allclose(s, 1.0, atol=1e-12)


def test_total_loss_at_identity():
    img = texture(24, 20)
    flow = identity_flow(24, 20)
    ones = np.ones((20, 24))
    terms = rfkflow.total_loss(img, img, flow, flow, ones, ones)
    assert terms["cycle"] == pytest.approx(0.0, abs=1e-12)
    assert terms["ssim"] == pytest.approx(0.0, abs=1e-9)
    assert terms["valid_pixels"] == 24 * 20


def test_correlation_volume_matches_cosine():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(6, 7, 16)).astype(np.float32)
    b = rng.normal(size=(6, 7, 16)).astype(np.float32)
    v = rfkflow.correlation_volume(a, b, 3)
    assert v.shape == (6, 7, 7, 7)
    # src cell (i=2, j=3) against tgt cell (i-1, j+2): m=1, n=-2
    x, y = a[3, 2], b[5, 1]
    cos = float(np.dot(x, y) / (np.linalg.norm(x) * np.linalg.norm(y)))
    assert v[3, 2, -2 + 3, 1 + 3] == pytest.approx(cos, abs=1e-5)


def test_ransac_recovers_homography():
    rng = np.random.default_rng(2)
    h = np.array([[1.02, 0.03, 12.0], [-0.02, 0.98, -7.0], [1e-5, -2e-5, 1.0]])
    src = rng.uniform(0, 400, size=(120, 2))
    hom = np.c_[src, np.ones(len(src))] @ h.T
    tgt = hom[:, :2] / hom[:, 2:]
    tgt[100:] = rng.uniform(0, 400, size=(20, 2))
    est, inliers = rfkflow.ransac_homography(src, tgt, threshold=1.0, seed=4)
    assert set(range(100)) <= set(inliers)
    np.testing.assert_allclose(est / est[2, 2], h, atol=1e-6)


def test_warp_by_identity():
    img = texture(20, 16)
    out, valid = rfkflow.warp_by_homography(img, np.eye(3), 20, 16)
    assert valid.all()
    np.testing.assert_allclose(out, img, atol=1e-12)


def test_metrics_and_flo_roundtrip(tmp_path):
    gt = identity_flow(8, 6)
    pred = gt.copy()
    pred[..., 0] += 1.0
    assert rfkflow.aee(pred, gt) == pytest.approx(1.0)
    assert rfkflow.fl_all(pred, gt) == pytest.approx(0.0)
    valid = np.ones((6, 8), dtype=bool)
    valid[0, 0] = False
    path = str(tmp_path / "f.flo")
    rfkflow.write_flo(pred, path, valid)
    back, back_valid = rfkflow.read_flo(path)
    np.testing.assert_allclose(back[back_valid], pred[valid], atol=1e-5)
    assert not back_valid[0, 0]


def test_features_roundtrip(tmp_path):
    data = np.random.default_rng(5).normal(size=(4, 5, 8)).astype(np.float32)
    path = str(tmp_path / "a.rfkfeat")
    rfkflow.write_features(data, path, stride=8, scale_factor=0.5)
    back = rfkflow.read_features(path)
    np.testing.assert_array_equal(back["data"], data)
    assert back["stride"] == 8
    assert back["scale_factor"] == 0.5
    with pytest.raises(rfkflow.Error):
        rfkflow.read_features(str(tmp_path / "missing.rfkfeat"))


def test_align_translated_pair():
    src = texture(96, 80, seed=7)
    tgt = texture(96, 80, seed=7, shift=(2.0, 1.0))
    out = rfkflow.align(
        src,
        tgt,
        {
            "resize.min_side": 0,
            "schedule.stage1": 20,
            "schedule.stage2": 5,
            "schedule.stage3": 5,
        },
    )
    assert len(out["homographies"]) >= 1
    flow, valid = out["flow"], out["valid"]
    assert flow.shape == (80, 96, 2)
    truth = identity_flow(96, 80) + np.array([2.0, 1.0])
    inner = np.zeros_like(valid)
    inner[10:-10, 10:-10] = True
    assert (valid & inner).sum() > 100
    err = np.linalg.norm(flow - truth, axis=-1)[valid & inner]
    assert np.median(err) < 0.5
