import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsmprune import data, gsm, nn
from gsmprune.errors import ConsistencyError, CorruptionError, FormatError, VersionError
from gsmprune.tensor import make_rng, restore_rng, rng_state

from conftest import HAVE_MNIST, MNIST_DIR, needs_mnist

GOLDEN = Path(__file__).parent / "golden"
CLASSIFIED = (FormatError, ConsistencyError, OSError)


def golden_checkpoint():
    """Small checkpoint with hand-picked values, including an awkward float."""
    model = nn.mlp([3, 2], (1, 1, 3))
    params = nn.ParamSet([np.array([[0.5, -1.25], [3.0e-8, 7.0], [0.1, -0.0]], np.float32)],
                         [np.array([1.0, -2.0], np.float32)])
    momentum = nn.ParamSet([np.full((3, 2), 0.25, np.float32)], [np.array([0.0, 1e-3], np.float32)])
    masks = [np.array([[True, False], [False, True], [True, True]])]
    state = gsm.OptimizerState(momentum, masks, 17)
    rng = make_rng(5, "shuffle")
    return data.Checkpoint(model, params, state, rng_state(rng), 17, 2, {"note": "golden"})


class TestIdx:
    def test_golden_fixture(self):
        ds = data.load_mnist_idx(GOLDEN / "tiny-images-idx3-ubyte", GOLDEN / "tiny-labels-idx1-ubyte")
        assert ds.images.shape == (2, 1, 2, 3) and ds.images.dtype == np.float32
        np.testing.assert_array_equal(
            ds.images[0, 0], np.array([[0, 255, 51], [102, 153, 204]], np.float32) / 255)
        np.testing.assert_array_equal(
            ds.images[1, 0], np.array([[1, 2, 3], [254, 128, 0]], np.float32) / 255)
        np.testing.assert_array_equal(ds.labels, [7, 3])
        assert ds.images[0, 0, 0, 2] == np.float32(0.2)

    def test_gzip(self, tmp_path):
        import gzip
        for name in ("tiny-images-idx3-ubyte", "tiny-labels-idx1-ubyte"):
            with gzip.open(tmp_path / (name + ".gz"), "wb") as fh:
                fh.write((GOLDEN / name).read_bytes())
        ds = data.load_mnist_idx(tmp_path / "tiny-images-idx3-ubyte.gz",
                                 tmp_path / "tiny-labels-idx1-ubyte.gz")
        np.testing.assert_array_equal(ds.labels, [7, 3])

    def test_images_as_labels(self):
        with pytest.raises(FormatError):
            data.load_mnist_idx(GOLDEN / "tiny-images-idx3-ubyte", GOLDEN / "tiny-images-idx3-ubyte")

    def test_truncated(self, tmp_path):
        raw = (GOLDEN / "tiny-images-idx3-ubyte").read_bytes()
        (tmp_path / "img").write_bytes(raw[:-1])
        with pytest.raises(OSError):
            data.load_mnist_idx(tmp_path / "img", GOLDEN / "tiny-labels-idx1-ubyte")

    def test_count_mismatch(self, tmp_path):
        (tmp_path / "lab").write_bytes(struct.pack(">II", 0x801, 3) + bytes([1, 2, 3]))
        with pytest.raises(ConsistencyError):
            data.load_mnist_idx(GOLDEN / "tiny-images-idx3-ubyte", tmp_path / "lab")

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            data.load_mnist_idx(tmp_path / "nope", GOLDEN / "tiny-labels-idx1-ubyte")

    @settings(max_examples=200, deadline=None)
    @given(st.binary(max_size=64))
    def test_total_over_malformed_bytes(self, tmp_path_factory, raw):
        path = tmp_path_factory.mktemp("idx") / "f"
        path.write_bytes(raw)
        try:
            data.load_mnist_idx(path, GOLDEN / "tiny-labels-idx1-ubyte")
        except CLASSIFIED:
            pass

    @needs_mnist
    def test_real_mnist_headers(self):
        train = data.load_mnist(MNIST_DIR, "train")
        test = data.load_mnist(MNIST_DIR, "test")
        assert train.images.shape == (60_000, 1, 28, 28)
        assert test.images.shape == (10_000, 1, 28, 28)
        assert 0.0 <= train.images.min() and train.images.max() == 1.0
        assert np.bincount(test.labels).tolist()[:3] == [980, 1135, 1032]


class TestDataset:
    def test_invariants(self):
        with pytest.raises(ConsistencyError):
            data.Dataset(np.zeros((2, 1, 1, 1), np.float32), np.zeros(3, np.int64))
        with pytest.raises(ConsistencyError):
            data.Dataset(np.zeros((1, 1, 1, 1), np.float32), np.array([10]))
        with pytest.raises(ConsistencyError):
            data.Dataset(np.zeros((0, 1, 1, 1), np.float32), np.zeros(0, np.int64))

    def test_synthetic_deterministic(self):
        a, b = data.synthetic_dataset(3, 50, 4, 8), data.synthetic_dataset(3, 50, 4, 8)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert not np.array_equal(a.images, data.synthetic_dataset(4, 50, 4, 8).images)
        assert a.images.shape == (50, 1, 1, 8)
        assert 0 <= a.images.min() and a.images.max() <= 1

    def test_synthetic_image_shape(self):
        assert data.synthetic_dataset(0, 5, 3, (4, 4)).images.shape == (5, 1, 4, 4)

    def test_singleton(self):
        ds = data.synthetic_dataset(0, 1, 3, 4)
        model = nn.mlp([4, 3], (1, 1, 4))
        acc, _ = nn.evaluate(model, nn.init_params(model, np.random.default_rng(0)), ds)
        assert acc in (0.0, 1.0)

    def test_separable_in_200_steps(self):
        ds = data.synthetic_dataset(1, 512, 2, 16, spread=0.05)
        model = nn.mlp([16, 2], (1, 1, 16))
        params = nn.init_params(model, make_rng(0, "init"))
        state = gsm.OptimizerState.zeros(params)
        cfg = gsm.GsmConfig(beta=0.9, eta=0.0)
        rng = np.random.default_rng(0)
        for _ in range(200):
            idx = rng.integers(0, len(ds), 32)
            _, cache = nn.forward(model, params, ds.images[idx])
            _, grads = nn.loss_and_backward(model, params, cache, ds.labels[idx])
            gsm.momentum_sgd_step(params, grads, state, cfg, 0.1)
        assert nn.evaluate(model, params, ds)[0] > 0.99

    def test_head(self):
        ds = data.synthetic_dataset(0, 10, 2, 3)
        assert len(ds.head(4)) == 4 and ds.head(None) is ds and ds.head(99) is ds


class TestCheckpoint:
    def test_golden_bytes(self, tmp_path):
        path = tmp_path / "c.ckpt"
        data.save_checkpoint(path, golden_checkpoint())
        assert path.read_bytes() == (GOLDEN / "tiny.ckpt").read_bytes()

    def test_round_trip_bitwise(self, tmp_path):
        ckpt = golden_checkpoint()
        data.save_checkpoint(tmp_path / "a", ckpt)
        back = data.load_checkpoint(tmp_path / "a")
        assert back.model == ckpt.model
        for x, y in zip(back.params.tensors() + back.state.momentum.tensors(),
                        ckpt.params.tensors() + ckpt.state.momentum.tensors()):
            assert x.dtype == y.dtype and x.tobytes() == y.tobytes()
        np.testing.assert_array_equal(back.state.masks[0], ckpt.state.masks[0])
        assert back.state.masks[0].dtype == bool
        assert (back.iteration, back.epoch, back.state.iteration) == (17, 2, 17)
        assert back.meta == {"note": "golden"}
        a, b = restore_rng(back.rng_state), restore_rng(ckpt.rng_state)
        np.testing.assert_array_equal(a.integers(0, 2**63, 8), b.integers(0, 2**63, 8))
        data.save_checkpoint(tmp_path / "b", back)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_params_only(self, tmp_path):
        ckpt = golden_checkpoint()
        ckpt.state = None
        data.save_checkpoint(tmp_path / "p", ckpt)
        assert data.load_checkpoint(tmp_path / "p").state is None

    def _edit_header(self, tmp_path, edit):
        raw = (GOLDEN / "tiny.ckpt").read_bytes()
        magic, rest = raw[:8], raw[8:]
        line, payload = rest.split(b"\n", 1)
        header = json.loads(line)
        edit(header)
        path = tmp_path / "edited"
        path.write_bytes(magic + json.dumps(header).encode() + b"\n" + payload)
        return path

    def test_wrong_shape(self, tmp_path):
        def edit(h):
            h["tensors"][0]["shape"] = [2, 2]
        with pytest.raises(CorruptionError):
            data.load_checkpoint(self._edit_header(tmp_path, edit))

    def test_shape_disagrees_with_model(self, tmp_path):
        def edit(h):
            h["tensors"][0]["shape"] = [2, 3]
        with pytest.raises(CorruptionError):
            data.load_checkpoint(self._edit_header(tmp_path, edit))

    def test_version(self, tmp_path):
        with pytest.raises(VersionError):
            data.load_checkpoint(self._edit_header(tmp_path, lambda h: h.update(format_version=2)))

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"hello")
        with pytest.raises(FormatError):
            data.load_checkpoint(tmp_path / "x")

    @settings(max_examples=200, deadline=None)
    @given(st.data())
    def test_total_over_corruption(self, tmp_path_factory, draw):
        raw = bytearray((GOLDEN / "tiny.ckpt").read_bytes())
        if draw.draw(st.booleans()):
            raw = raw[:draw.draw(st.integers(0, len(raw) - 1))]
        else:
            for _ in range(draw.draw(st.integers(1, 4))):
                raw[draw.draw(st.integers(0, len(raw) - 1))] = draw.draw(st.integers(0, 255))
        path = tmp_path_factory.mktemp("ck") / "c"
        path.write_bytes(bytes(raw))
        try:
            data.load_checkpoint(path)
        except CLASSIFIED:
            pass


class TestMetrics:
    ROWS = [data.MetricsRow(2000, 2, 0.123456789, 0.9812, 0.97, 0.5, 0.25, 0.0123, 0.03),
            data.MetricsRow(4000, 4, 0.1, 0.99, 0.985, 0.75, 0.5, 0.0, 0.003),
            data.MetricsRow(6000, 6, 1e-7, 1.0, 1.0, 0.9, 0.875, 1.5e-5, 3e-4)]

    def test_golden_file(self, tmp_path):
        path = tmp_path / "m.csv"
        for row in self.ROWS:
            data.append_metrics(path, row)
        assert path.read_text() == (GOLDEN / "metrics.csv").read_text()

    def test_header_once(self, tmp_path):
        path = tmp_path / "m.csv"
        data.append_metrics(path, self.ROWS[0])
        assert len(path.read_text().splitlines()) == 2
        data.append_metrics(path, self.ROWS[1])
        lines = path.read_text().splitlines()
        assert len(lines) == 3 and lines[0] == ",".join(data.METRICS_FIELDS)

    def test_round_trip(self):
        rows = data.read_metrics(GOLDEN / "metrics.csv")
        assert rows[1:] == self.ROWS[1:]
        assert rows[0].train_loss == pytest.approx(0.123457, abs=0)

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("a,b\n1,2\n")
        with pytest.raises(FormatError):
            data.read_metrics(tmp_path / "m.csv")

    def test_unwritable(self, tmp_path):
        (tmp_path / "dir").mkdir()
        with pytest.raises(OSError, match="dir"):
            data.append_metrics(tmp_path / "dir", self.ROWS[0])
