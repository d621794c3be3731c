import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from changen import toydata
from changen.core import ValidationError
from changen.detector import (ChangeDetector, DetectorConfig, PretrainConfig, confusion_metrics, detect, evaluate,
                              fine_tune, load_detector, poly_lr, pretrain, save_detector, select_subset,
                              soft_dice_loss)


@pytest.fixture(scope="module")
def pairs():
    return toydata.change_pairs(12, 32, seed=0)


@pytest.fixture
def model():
    torch.manual_seed(0)
    return ChangeDetector(DetectorConfig(num_classes=3)).eval()


def test_detect_shapes(model, pairs):
    p = pairs[0]
    prob, seg_t, seg_t1 = detect(p["image_t"], p["image_t1"], model)
    assert prob.shape == (32, 32) and prob.min() >= 0 and prob.max() <= 1
    assert seg_t.shape == seg_t1.shape == (32, 32, 3)
    with pytest.raises(ValidationError):
        detect(p["image_t"], p["image_t1"][:16], model)


def test_order_invariance(model, pairs):
    a, b = pairs[1]["image_t"], pairs[1]["image_t1"]
    assert np.array_equal(detect(a, b, model)[0], detect(b, a, model)[0])
    one_way = detect(a, b, model, both_orders=False)[0]
    other_way = detect(b, a, model, both_orders=False)[0]
    assert not np.array_equal(one_way, other_way)  # a single order is not symmetric by itself


def test_both_orders_share_weights(model):
    x, y = torch.randn(1, 3, 32, 32), torch.randn(1, 3, 32, 32)
    with torch.no_grad():
        out = model(x, y)
        swapped = model(y, x)
    assert torch.equal(out["ab"], swapped["ba"]) and torch.equal(out["ba"], swapped["ab"])


def test_poly_schedule():
    assert poly_lr(0.03, 0, 100) == 0.03
    assert abs(poly_lr(0.03, 50, 100) - 0.03 * 0.5 ** 0.9) < 1e-15
    assert poly_lr(0.03, 100, 100) == 0.0
    vals = [poly_lr(0.03, n, 37) for n in range(38)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_confusion_metric_examples():
    m = confusion_metrics(50, 50, 50)
    assert m["precision"] == 0.5 and m["recall"] == 0.5 and m["f1"] == 0.5 and abs(m["iou"] - 1 / 3) < 1e-15
    perfect = confusion_metrics(10, 0, 0)
    assert perfect["f1"] == perfect["iou"] == perfect["precision"] == perfect["recall"] == 1.0
    assert confusion_metrics(0, 0, 5)["recall"] == 0.0
    assert confusion_metrics(0, 0, 0)["f1"] == 1.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000))
def test_confusion_identities(tp, fp, fn):
    m = confusion_metrics(tp, fp, fn)
    if tp + fp + fn:
        assert math.isclose(m["iou"], tp / (tp + fp + fn))
    if m["precision"] + m["recall"] > 0:
        assert math.isclose(m["f1"], 2 * m["precision"] * m["recall"] / (m["precision"] + m["recall"]))
    if tp:
        assert math.isclose(m["f1"], 2 * tp / (2 * tp + fp + fn))


class _Oracle(torch.nn.Module):
    """Stands in for a detector: logits from a fixed per-sample map."""

    def __init__(self, maps):
        super().__init__()
        self.maps = maps
        self.i = 0

    def forward(self, a, b):
        n = a.shape[0]
        out = torch.stack([torch.as_tensor(m, dtype=torch.float32) for m in self.maps[self.i:self.i + n]])
        self.i += n
        return {"change": out * 20 - 10}


def test_evaluate_aggregates_counts(pairs):
    perfect = _Oracle([p["change"] for p in pairs])
    m = evaluate(perfect, pairs, batch=5)
    assert m["f1"] == m["iou"] == m["precision"] == m["recall"] == 1.0
    negative = _Oracle([np.zeros_like(p["change"]) for p in pairs])
    m = evaluate(negative, pairs, batch=5)
    assert m["recall"] == 0.0 and m["fn"] == sum(int(p["change"].sum()) for p in pairs)
    with pytest.raises(ValidationError):
        evaluate(negative, [])


def test_select_subset():
    idx = select_subset(100, 0.05, seed=3)
    assert len(idx) == 5 and len(set(idx.tolist())) == 5
    assert np.array_equal(idx, select_subset(100, 0.05, seed=3))
    assert not np.array_equal(idx, select_subset(100, 0.05, seed=4))
    assert np.array_equal(select_subset(7, 1.0, 0), np.arange(7))
    assert len(select_subset(99, 0.05, 0)) == 4  # floor
    for bad in (0.0, 1.5, 0.001):
        with pytest.raises(ValidationError):
            select_subset(100, bad, 0)


def test_zero_lr_keeps_parameters(pairs):
    torch.manual_seed(0)
    m = ChangeDetector(DetectorConfig(num_classes=3))
    before = [p.detach().clone() for p in m.parameters()]
    pretrain(pairs, PretrainConfig(lr=0.0, epochs=1, batch_size=4), DetectorConfig(num_classes=3), model=m)
    assert all(torch.equal(a, b) for a, b in zip(before, m.parameters()))


def test_pretrain_deterministic_and_loss_falls(pairs):
    cfg = PretrainConfig(epochs=6, batch_size=4, seed=1)
    m1, h1 = pretrain(pairs, cfg, DetectorConfig(num_classes=3))
    m2, h2 = pretrain(pairs, cfg, DetectorConfig(num_classes=3))
    assert h1 == h2 and len(h1) == 6
    assert h1[-1] < h1[0]
    for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
        assert torch.equal(a, b)


def test_fine_tune_uses_subset_and_copies(pairs, model):
    before = [p.detach().clone() for p in model.parameters()]
    tuned, idx = fine_tune(model, pairs, 0.5, PretrainConfig(epochs=1, batch_size=4))
    assert len(idx) == 6
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))
    assert not all(torch.equal(a, b) for a, b in zip(before, tuned.parameters()))
    tuned_full, idx_full = fine_tune(model, pairs, 1.0, PretrainConfig(epochs=1, batch_size=4))
    assert len(idx_full) == len(pairs)


def test_nonfinite_loss_aborts_with_checkpoint(tmp_path, pairs):
    bad = [dict(p, image_t=np.full_like(p["image_t"], np.nan)) for p in pairs[:4]]
    with pytest.raises(FloatingPointError):
        pretrain(bad, PretrainConfig(epochs=1, batch_size=4, color_jitter=0), DetectorConfig(num_classes=3),
                 failure_path=tmp_path / "fail.pt")
    assert (tmp_path / "fail.pt").exists()


def test_dice_loss():
    t = torch.tensor([[1.0, 0.0]])
    assert soft_dice_loss(torch.tensor([[30.0, -30.0]]), t).item() < 1e-6
    assert soft_dice_loss(torch.tensor([[-30.0, 30.0]]), t).item() > 0.6


def test_detector_checkpoint(tmp_path, model, pairs):
    save_detector(tmp_path / "d.pt", model)
    loaded = load_detector(tmp_path / "d.pt")
    p = pairs[0]
    assert np.array_equal(detect(p["image_t"], p["image_t1"], model)[0],
                          detect(p["image_t"], p["image_t1"], loaded)[0])
    torch.save({"kind": "other"}, tmp_path / "x.pt")
    with pytest.raises(ValidationError):
        load_detector(tmp_path / "x.pt")


def test_resnet18_config():
    cfg = DetectorConfig.resnet18(num_classes=3)
    m = ChangeDetector(cfg).eval()
    assert cfg.widths == (64, 128, 256, 512)
    assert [len(s) for s in m.encoder.stages] == [2, 2, 2, 2]
    x = torch.rand(1, 3, 64, 64) * 2 - 1
    with torch.no_grad():
        out = m(x, x.flip(-1))
    assert out["change"].shape == (1, 64, 64) and out["seg_t"].shape == (1, 3, 64, 64)
