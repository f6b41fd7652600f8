import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import check_grad_sampled
from naturalae.corpus import CLASS_NAMES, STOP_SIGN
from naturalae.detector import (
    Architecture,
    DetectorModel,
    TrainingDiverged,
    decode,
    detect,
    detection_loss,
    detections_from_head,
    generate_dataset,
    iou,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
    train_detector,
)

TINY = Architecture("tiny", 32, 8, len(CLASS_NAMES), ((3, 2, 6), (3, 2, 8)))


@pytest.fixture(scope="module")
def small_data():
    return generate_dataset(40, seed=3, size=32)


def test_dataset_deterministic(small_data):
    again = generate_dataset(40, seed=3, size=32)
    for a, b in zip(small_data, again):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.boxes == b.boxes and a.labels == b.labels


def test_dataset_class_coverage_and_boxes():
    data = generate_dataset(1000, seed=11, size=32)
    n = len(data)
    for c in range(len(CLASS_NAMES)):
        assert sum(c in s.labels for s in data) >= 0.05 * n, CLASS_NAMES[c]
    for s in data:
        assert len(s.labels) <= 3
        for cx, cy, w, h in s.boxes:
            assert w > 0 and h > 0
            assert 0 <= cx - w / 2 and cx + w / 2 <= 1 + 1e-12
            assert 0 <= cy - h / 2 and cy + h / 2 <= 1 + 1e-12


def test_head_shape():
    m = DetectorModel.initialize(TINY, 0)
    out = m.forward(np.zeros((2, 32, 32, 3)))
    assert out.shape == (2, 8, 8, len(CLASS_NAMES) + 5)


def test_zero_epochs_returns_initialization(small_data):
    m = train_detector(small_data, TINY, 0, seed=5)
    ref = DetectorModel.initialize(TINY, 5)
    for (a, b), (c, d) in zip(m.weights, ref.weights):
        np.testing.assert_array_equal(a, c)
        np.testing.assert_array_equal(b, d)


def test_seeds_differ_and_training_is_deterministic(small_data):
    a = train_detector(small_data, TINY, 1, seed=1, log_every=0)
    b = train_detector(small_data, TINY, 1, seed=1, log_every=0)
    c = train_detector(small_data, TINY, 1, seed=2, log_every=0)
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a.weights, b.weights))
    assert not np.array_equal(a.weights[0][0], c.weights[0][0])
    assert len(a.history) == 1 and np.isfinite(a.history[0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts(small_data):
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train_detector(small_data, TINY, 1, seed=1, lr=np.nan, log_every=0)


def test_weight_file_round_trip(tmp_path, small_data):
    m = train_detector(small_data, TINY, 1, seed=4, log_every=0)
    save_model(m, tmp_path / "m.naew")
    back = load_model(tmp_path / "m.naew")
    assert back.arch == m.arch and back.threshold == m.threshold and back.class_names == m.class_names
    for (a, b), (c, d) in zip(m.weights, back.weights):
        assert a.tobytes() == c.tobytes() and b.tobytes() == d.tobytes()
    save_model(back, tmp_path / "n.naew")
    assert (tmp_path / "m.naew").read_bytes() == (tmp_path / "n.naew").read_bytes()
    assert (tmp_path / "m.naew").read_bytes()[:4] == b"NAEW"


def test_weight_file_errors(tmp_path):
    m = DetectorModel.initialize(TINY, 0)
    save_model(m, tmp_path / "m.naew")
    raw = (tmp_path / "m.naew").read_bytes()
    (tmp_path / "t.naew").write_bytes(raw[:-3])
    with pytest.raises(ValueError, match="truncated"):
        load_model(tmp_path / "t.naew")
    (tmp_path / "x.naew").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        load_model(tmp_path / "x.naew")
    (tmp_path / "e.naew").write_bytes(raw + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        load_model(tmp_path / "e.naew")


def test_dataset_file_round_trip(tmp_path, small_data):
    save_dataset(small_data, tmp_path / "d.naes")
    back = load_dataset(tmp_path / "d.naes")
    assert len(back) == len(small_data)
    for a, b in zip(small_data, back):
        assert a.boxes == b.boxes and a.labels == b.labels
        assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-12


# ------------------------------------------------------------ inference


def test_blank_image_high_threshold_empty():
    m = DetectorModel.initialize(TINY, 0)
    assert detect(m, np.zeros((32, 32, 3)), 0.99) == []


def _head(rng, G=4, C=5):
    return rng.normal(0, 2, (G, G, C + 5))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_detect_monotone_in_threshold(seed, t1, t2):
    head = _head(np.random.default_rng(seed))
    lo, hi = sorted((t1, t2))
    d_lo = detections_from_head(head, 5, lo)
    d_hi = detections_from_head(head, 5, hi)
    key = lambda d: (d.box, d.class_id, d.score)  # noqa: E731
    assert {key(d) for d in d_hi} <= {key(d) for d in d_lo}
    for d in d_hi:
        assert d.score >= hi
        x0, y0 = d.box[0] - d.box[2] / 2, d.box[1] - d.box[3] / 2
        assert -1e-12 <= x0 and x0 + d.box[2] <= 1 + 1e-12 and -1e-12 <= y0 and y0 + d.box[3] <= 1 + 1e-12


def test_nms_keeps_max_confidence():
    C = 2
    head = np.full((2, 2, C + 5), -10.0)
    # two cells predicting overlapping boxes with different classes
    for (r, c), cls, logit in (((0, 0), 0, 3.0), ((0, 1), 1, 1.0)):
        head[r, c, cls] = 10.0
        head[r, c, C] = logit
        head[r, c, C + 1 :] = [5.0 if c == 0 else -5.0, 0.0, 5.0, 5.0]
    boxes, _, _ = decode(head, C)
    assert iou(boxes[0, 0], boxes[0, 1]) > 0.5
    dets = detections_from_head(head, C, 0.1)
    assert len(dets) == 1 and dets[0].class_id == 0


# ---------------------------------------------------------- detection loss


def _confident_model(true_class, C=5):
    # a 1x1 head with zero kernels: every cell outputs the bias
    arch = Architecture("flat", 32, 32, C, ())
    bias = np.full(C + 5, -20.0)
    bias[true_class] = 50.0
    bias[C] = 5.0
    return DetectorModel(arch, [(np.zeros((1, 1, 3, C + 5)), bias)])


def test_loss_zero_on_perfect_prediction():
    m = _confident_model(STOP_SIGN)
    loss = detection_loss(m, np.random.default_rng(0).random((32, 32, 3)), STOP_SIGN, (0.5, 0.5, 0.4, 0.4))
    assert loss.item() == pytest.approx(0.0, abs=1e-20)


def test_loss_uniform_is_ln5():
    arch = Architecture("flat", 32, 32, 5, ())
    m = DetectorModel(arch, [(np.zeros((1, 1, 3, 10)), np.zeros(10))])
    loss = detection_loss(m, np.zeros((32, 32, 3)), STOP_SIGN, (0.5, 0.5, 0.4, 0.4))
    assert loss.item() == pytest.approx(np.log(5), abs=1e-12)


def test_loss_non_negative(rng):
    m = DetectorModel.initialize(TINY, 3)
    for _ in range(5):
        assert detection_loss(m, rng.random((32, 32, 3)), STOP_SIGN, (0.4, 0.5, 0.5, 0.5)).item() >= 0.0


def test_loss_input_gradient_64(rng):
    arch = Architecture("wide")
    m = DetectorModel.initialize(arch, 7)
    x = rng.random((64, 64, 3))
    box = (0.45, 0.5, 0.4, 0.45)
    # 400 random coordinates of the 64x64x3 scene; the small step keeps
    # differences from straddling ReLU kinks somewhere in the receptive field
    assert check_grad_sampled(lambda t: detection_loss(m, t, STOP_SIGN, box), x, 400, h=1e-6) <= 1e-3
