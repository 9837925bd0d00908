import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view

from sedkit.detector import (IGNORE, ArchConfig, CheckpointVersionError, assign_targets,
                             detections_from_arrays, forward, init_params, load_checkpoint,
                             make_layout, param_count, predict_detections, regression_targets,
                             save_checkpoint)
from sedkit.geometry import decode_boxes, iou_matrix

ARCH = ArchConfig()
SMALL = ArchConfig(stem_channels=(4, 8), level_channels=(8, 8, 8), head_channels=8)


def ref_conv(x, w, b, stride, pad):
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    kh, kw = w.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]  # B,Ho,Wo,C,kh,kw
    return np.einsum("bijcuv,uvco->bijo", win, w) + b


def ref_forward(p, x, arch):
    relu = lambda v: np.maximum(v, 0)
    for i, k in enumerate(arch.stem_kernels):
        x = relu(ref_conv(x, p[f"stem{i}.w"], p[f"stem{i}.b"], 2, k - 2))
    feats = [x]
    for i in range(1, arch.num_levels):
        x = relu(ref_conv(x, p[f"down{i}.w"], p[f"down{i}.b"], 2, 1))
        feats.append(x)
    out = []
    for i, f in enumerate(feats):
        h = relu(ref_conv(f, p[f"lat{i}.w"], p[f"lat{i}.b"], 1, 0))
        h = relu(ref_conv(h, p["head.w"], p["head.b"], 1, 1))
        out.append((ref_conv(h, p["cls.w"], p["cls.b"], 1, 0), ref_conv(h, p["reg.w"], p["reg.b"], 1, 0)))
    return out


@pytest.mark.parametrize("arch", [SMALL, ArchConfig(stem_kernels=(2, 3))])
def test_forward_matches_independent_reference(arch, rng):
    p = init_params(arch, 3, dtype=np.float64)
    for k in p:
        p[k] = p[k] + rng.normal(0, 0.05, size=p[k].shape)
    x = rng.uniform(size=(2, 64, 64, 3))
    out = forward(p, x, arch)
    for lv, (logits, deltas) in zip(out.levels, ref_forward(p, x, arch)):
        np.testing.assert_allclose(lv.logits.data[..., 0, :], logits, atol=1e-10)
        np.testing.assert_allclose(lv.deltas.data[..., 0, :], deltas, atol=1e-10)


def test_init_determinism_and_param_count():
    a, b, c = init_params(ARCH, 0), init_params(ARCH, 0), init_params(ARCH, 1)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)
    # closed form for the default widths: stem 3->8->16, levels 16/32/32, head 16, 3 classes
    expected = (27 * 8 + 8) + (72 * 16 + 16) + (144 * 32 + 32) + (288 * 32 + 32) \
        + (16 * 16 + 16) + 2 * (32 * 16 + 16) + (144 * 16 + 16) + (16 * 4 + 4) + (16 * 4 + 4)
    assert param_count(ARCH) == expected == sum(v.size for v in a.values())


def test_layout_shapes_and_probabilities(rng):
    layout = make_layout(ARCH, 128, 128)
    assert [(lv.height, lv.width, lv.stride) for lv in layout.levels] == [(32, 32, 4), (16, 16, 8), (8, 8, 16)]
    assert [lv.anchor_side for lv in layout.levels] == [16.0, 32.0, 64.0]
    with pytest.raises(ValueError):
        make_layout(ARCH, 120, 128)
    p = init_params(ARCH, 0)
    x = rng.uniform(size=(1, 128, 128, 3)).astype(np.float32)
    o1, o2 = forward(p, x, ARCH), forward(p, x, ARCH)
    for l1, l2 in zip(o1.levels, o2.levels):
        np.testing.assert_array_equal(l1.logits.data, l2.logits.data)
        np.testing.assert_allclose(l1.class_probs.sum(-1), 1.0, atol=1e-6)
    # the class prior sets the initial foreground probability
    np.testing.assert_allclose(1 - o1.levels[0].class_probs[..., -1].mean(), ARCH.cls_prior, atol=0.01)


def test_assignment_rules(rng):
    layout = make_layout(ARCH, 128, 128)
    anchors = layout.all_anchors()
    a = assign_targets(layout, np.zeros((0, 4)), np.zeros(0), 3)
    assert np.all(a.flat_labels() == 3)
    gt = anchors[100][None]
    a = assign_targets(layout, gt, [2], 3)
    assert a.flat_labels()[100] == 2
    for _ in range(20):
        n = int(rng.integers(1, 4))
        xy = rng.uniform(0, 100, size=(n, 2))
        gt = np.concatenate([xy, xy + rng.uniform(6, 28, size=(n, 2))], axis=1).clip(0, 128)
        lab = rng.integers(0, 3, n)
        got = assign_targets(layout, gt, lab, 3).flat_labels()
        ious = iou_matrix(anchors, gt)
        best = ious.max(1)
        forced = set(ious.argmax(0).tolist())
        for i in range(len(anchors)):
            if i in forced:
                assert got[i] in lab
            elif best[i] >= 0.5:
                assert got[i] == lab[ious[i].argmax()]
            elif best[i] >= 0.4:
                assert got[i] == IGNORE
            else:
                assert got[i] == 3
        # every gt owns at least one anchor
        fg_idx = np.nonzero((got >= 0) & (got < 3))[0]
        assert set(ious[fg_idx].argmax(1).tolist()) | forced >= set(range(n))


def test_assignment_ignore_band_example():
    layout = make_layout(ARCH, 128, 128)
    anchors = layout.all_anchors()
    # level-0 anchor (14, 14, 30, 30) against the same square shifted right by d:
    # IoU = 16 (16 - d) / (512 - 16 (16 - d)) = 0.45 at d = 16 - 0.45 * 512 / (16 * 1.45)
    d = 16 - 0.45 * 512 / (16 * 1.45)
    gt = np.array([[14.0 + d, 14.0, 30.0 + d, 30.0]])
    ious = iou_matrix(anchors, gt)[:, 0]
    band = np.nonzero(np.abs(ious - 0.45) < 1e-9)[0]
    assert len(band) == 1 and ious.max() > 0.5
    labels = assign_targets(layout, gt, [0], 3).flat_labels()
    assert np.all(labels[band] == IGNORE)


def test_regression_targets_round_trip():
    layout = make_layout(ARCH, 128, 128)
    gt = np.array([[10.0, 20.0, 40.0, 44.0]])
    a = assign_targets(layout, gt, [1], 3)
    t = regression_targets(a, layout)
    for i, (lab, tt) in enumerate(zip(a.labels, t)):
        fg = lab >= 0
        fg &= lab < 3
        if fg.any():
            anchors = np.broadcast_to(layout.level_anchors(i), tt.shape)
            np.testing.assert_allclose(decode_boxes(tt[fg], anchors[fg]), np.repeat(gt, fg.sum(), 0), atol=1e-9)


def _confident_outputs(layout, idx_level=1, cell=(3, 5)):
    probs, deltas = [], []
    for lv in layout.levels:
        p = np.zeros((lv.height, lv.width, 1, 4))
        p[..., -1] = 1.0
        probs.append(p)
        deltas.append(np.zeros((lv.height, lv.width, 1, 4)))
    probs[idx_level][cell[0], cell[1], 0] = [0.05, 0.9, 0.0, 0.05]
    deltas[idx_level][cell[0], cell[1], 0] = [0.1, -0.2, 0.3, 0.0]
    return probs, deltas


def test_single_confident_anchor_gives_one_detection():
    layout = make_layout(ARCH, 128, 128)
    probs, deltas = _confident_outputs(layout)
    dets = detections_from_arrays(probs, deltas, layout, 0.05, 0.5)
    assert len(dets) == 1
    anchor = layout.level_anchors(1)[3, 5, 0]
    expect = decode_boxes(np.array([0.1, -0.2, 0.3, 0.0]), anchor)
    np.testing.assert_allclose(dets[0].box, expect, atol=1e-12)
    assert dets[0].class_id == 1 and dets[0].score == pytest.approx(0.95)
    assert detections_from_arrays(probs, deltas, layout, 1.0, 0.5) == []


def test_predictions_sorted_and_thresholded(rng):
    p = init_params(ARCH, 0)
    p["cls.b"][-1] = 0.0
    img = rng.uniform(size=(128, 128, 3)).astype(np.float32)
    dets = predict_detections(p, img, ARCH, score_thr=0.3)
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True) and all(s >= 0.3 for s in scores)
    assert predict_detections(p, img, ARCH, score_thr=1.0) == []


def test_checkpoint_round_trip_and_version(tmp_path):
    p = init_params(SMALL, 0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"student": p, "teacher": p}, SMALL, {"iteration": 7})
    groups, arch, meta = load_checkpoint(path)
    assert arch == SMALL and meta == {"iteration": 7}
    for k in p:
        np.testing.assert_array_equal(groups["student"][k], p[k])
        assert groups["student"][k].dtype == p[k].dtype
    raw = bytearray(path.read_bytes())
    raw[8] = 99
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError, match="version"):
        load_checkpoint(tmp_path / "bad.ckpt")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")
