import numpy as np
import pytest

from rmcaction.checkpoint import (CheckpointMagicError, CheckpointMismatchError,
                                  CheckpointTruncatedError, CheckpointVersionError,
                                  load_checkpoint, read_checkpoint, save_checkpoint)
from rmcaction.nn import BatchNorm, Conv2d, Linear, Module
from rmcaction.optim import SGD
from rmcaction.tensor import Tensor


class TinyModel(Module):
    def __init__(self, seed=0, classes=3):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.conv = Conv2d(2, 4, 3, padding=1, bias=False, rng=rng)
        self.bn = BatchNorm(4)
        self.fc = Linear(4, classes, rng=rng)

    def forward(self, x):
        return self.fc(self.bn(self.conv(x)).mean(axis=(2, 3)))


class TestRoundTrip:
    def test_bit_exact_roundtrip(self, tmp_path):
        model = TinyModel(seed=1)
        # dirty the running stats so buffers are non-trivial
        model(Tensor(np.random.default_rng(0).standard_normal((4, 2, 6, 6))
                     .astype(np.float32)))
        path = tmp_path / "m.rmcw"
        save_checkpoint(model, path)

        clone = TinyModel(seed=2)
        load_checkpoint(clone, path)
        for (n1, p1), (n2, p2) in zip(model.named_parameters(), clone.named_parameters()):
            assert n1 == n2
            assert np.array_equal(p1.data, p2.data)
        for (n1, b1), (n2, b2) in zip(model.named_buffers(), clone.named_buffers()):
            assert n1 == n2
            assert np.array_equal(b1, b2)
        # saving the clone reproduces the identical file
        path2 = tmp_path / "m2.rmcw"
        save_checkpoint(clone, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_magic_bytes(self, tmp_path):
        path = tmp_path / "m.rmcw"
        save_checkpoint(TinyModel(), path)
        assert path.read_bytes()[:4] == b"RMCW"

    def test_record_names_are_hierarchical(self, tmp_path):
        path = tmp_path / "m.rmcw"
        save_checkpoint(TinyModel(), path)
        records = read_checkpoint(path)
        assert "conv.weight" in records
        assert "bn.running_mean" in records


class TestErrors:
    def _saved(self, tmp_path):
        path = tmp_path / "m.rmcw"
        save_checkpoint(TinyModel(), path)
        return path

    def test_bad_magic(self, tmp_path):
        path = self._saved(tmp_path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"JUNK"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointMagicError):
            read_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = self._saved(tmp_path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = (7).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointVersionError):
            read_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = self._saved(tmp_path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(CheckpointTruncatedError):
            read_checkpoint(path)

    def test_shape_mismatch_names_parameter(self, tmp_path):
        path = self._saved(tmp_path)
        other = TinyModel(classes=5)
        with pytest.raises(CheckpointMismatchError) as err:
            load_checkpoint(other, path)
        assert "fc" in str(err.value)

    def test_missing_records_reported(self, tmp_path):
        path = tmp_path / "m.rmcw"

        class Extended(TinyModel):
            def __init__(self):
                super().__init__()
                self.extra = Linear(3, 2, rng=np.random.default_rng(9))

        save_checkpoint(TinyModel(), path)
        with pytest.raises(CheckpointMismatchError, match="extra"):
            load_checkpoint(Extended(), path)


class TestOptimizerContract:
    def test_duplicate_parameter_rejected(self):
        model = TinyModel()
        params = model.parameters()
        with pytest.raises(ValueError, match="more than once"):
            SGD(params + [params[0]], lr=0.1)

    def test_parameter_names_unique(self):
        names = [p.name for p in TinyModel().parameters()]
        assert len(names) == len(set(names))


class TestSGD:
    def test_zero_lr_keeps_parameters(self):
        model = TinyModel(seed=3)
        before = [p.data.copy() for p in model.parameters()]
        opt = SGD(model.parameters(), lr=0.0, momentum=0.9, weight_decay=1e-2)
        out = model(Tensor(np.random.default_rng(1).standard_normal((4, 2, 6, 6))
                           .astype(np.float32)))
        out.sum().backward()
        opt.step()
        for b, p in zip(before, model.parameters()):
            assert np.array_equal(b, p.data)

    def test_plain_sgd_formula(self):
        p = TinyModel(seed=4).parameters()[0]
        before = p.data.copy()
        p.grad = np.ones_like(p.data)
        SGD([p], lr=0.5).step()
        assert np.allclose(p.data, before - 0.5)

    def test_momentum_matches_unrolled_recurrence(self):
        from rmcaction.tensor import Parameter

        p = Parameter(np.array([1.0], dtype=np.float32))
        opt = SGD([p], lr=0.1, momentum=0.9)
        g1, g2 = 0.5, -0.25
        p.grad = np.array([g1], dtype=np.float32)
        opt.step()
        p.grad = np.array([g2], dtype=np.float32)
        opt.step()
        v1 = g1
        x1 = 1.0 - 0.1 * v1
        v2 = 0.9 * v1 + g2
        x2 = x1 - 0.1 * v2
        assert p.data[0] == pytest.approx(x2, rel=1e-6)

    def test_skips_parameters_without_gradients(self):
        model = TinyModel(seed=5)
        params = model.parameters()
        opt = SGD(params, lr=0.1, momentum=0.9, weight_decay=1e-2)
        untouched = params[-1].data.copy()
        touched = params[0].data.copy()
        params[0].grad = np.ones_like(params[0].data)
        opt.step()
        assert np.array_equal(untouched, params[-1].data)
        assert not np.array_equal(touched, params[0].data)
