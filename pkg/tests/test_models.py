import numpy as np
import pytest

from daclab.errors import ArchMismatchError, FormatError, ShapeError
from daclab.models import (
    ArchSpec,
    Head,
    MultiHeadModel,
    SCModel,
    attach_head,
    build_model,
    forward,
    init_head,
    load_model,
    model_from_bytes,
    model_to_bytes,
    save_model,
)
from daclab.numerics import Tensor

MLP = ArchSpec("mlp", (3, 4, 4), hidden=(8, 6))
CNN = ArchSpec("smallcnn", (3, 8, 8), hidden=(4, 6), dense=10)


def three_head_model(arch=MLP, seed=0, dtype=np.float32):
    backbone, _ = build_model(arch, seed, with_head=False, dtype=dtype)
    model = MultiHeadModel(arch, backbone)
    for k, classes in enumerate([(0, 1), (2, 3, 4), (5, 6)], 1):
        model = attach_head(model, init_head(arch, seed + k, len(classes), dtype), k, classes)
    return model


def test_build_is_deterministic():
    a, ha = build_model(CNN, 7)
    b, hb = build_model(CNN, 7)
    assert a.equal(b) and ha.equal(hb)
    assert not a.equal(build_model(CNN, 8)[0])


def test_parameter_count_arithmetic():
    backbone, head = build_model(ArchSpec("mlp", (4,), hidden=(8,), head_width=2), 0)
    assert backbone.numel() + head.numel() == 4 * 8 + 8 + 8 * 2 + 2


def test_unknown_kind_and_tap():
    with pytest.raises(ValueError, match="kind"):
        ArchSpec("resnet", (3, 8, 8))
    with pytest.raises(ValueError, match="tap"):
        ArchSpec("mlp", (4,), taps=("conv1",))


def test_smallcnn_zero_image_is_finite():
    model = three_head_model(CNN)
    logits, acts = forward(model, np.zeros((2, 3, 8, 8), np.float32))
    assert all(np.isfinite(v.data).all() for v in logits.values())
    assert set(acts) == {"fc", "logits"}


def test_forward_selectors():
    model = three_head_model()
    x = np.random.default_rng(0).uniform(size=(5, 3, 4, 4)).astype(np.float32)
    logits, acts = forward(model, x, heads="all", taps=("fc1", "fc2", "logits"))
    assert list(logits) == [1, 2, 3]
    assert acts["logits"].shape == (5, 7) and acts["fc1"].shape == (5, 8)
    one, _ = forward(model, x, heads=2, taps=())
    assert list(one) == [2] and one[2].shape == (5, 3)
    np.testing.assert_array_equal(one[2].data, logits[2].data)
    with pytest.raises(KeyError):
        forward(model, x, heads=9)
    with pytest.raises(ShapeError):
        forward(three_head_model(CNN), np.zeros((1, 3, 4, 4), np.float32))


def test_identical_parameters_identical_logits():
    x = np.random.default_rng(1).uniform(size=(4, 3, 8, 8)).astype(np.float32)
    a, b = three_head_model(CNN, 3), three_head_model(CNN, 3)
    la, _ = forward(a, x)
    lb, _ = forward(b, x)
    assert all(np.array_equal(la[k].data, lb[k].data) for k in la)


def test_head_isolation_gradients():
    model = three_head_model(dtype=np.float64)
    x = np.random.default_rng(2).uniform(size=(3, 3, 4, 4))
    logits, _ = forward(model, x)
    logits[2].square().sum().backward()
    for k in (1, 3):
        for t in model.head(k).params.values():
            assert t.grad is None or not t.grad.any()
    assert any(t.grad.any() for t in model.head(2).params.values())


def test_attach_head_rules():
    backbone, _ = build_model(MLP, 0, with_head=False)
    m1 = attach_head(MultiHeadModel(MLP, backbone), init_head(MLP, 1, 2), 1, (0, 1))
    assert m1.task_ids == [1]
    m3 = attach_head(m1, init_head(MLP, 3, 2), 3, (4, 5))
    assert m3.task_ids == [1, 3]
    assert m3.head(1).params.equal(m1.head(1).params)
    with pytest.raises(ValueError):
        attach_head(m3, init_head(MLP, 1, 2), 3, (6, 7))
    with pytest.raises(ValueError):
        attach_head(m3, init_head(MLP, 1, 2), 2, (6, 7))
    with pytest.raises(ShapeError):
        Head(4, init_head(MLP, 1, 3), (0, 1))


def test_arch_hash_is_pure():
    assert MLP.hash() == ArchSpec("mlp", (3, 4, 4), hidden=(8, 6)).hash()
    assert MLP.hash() != ArchSpec("mlp", (3, 4, 4), hidden=(8, 7)).hash()
    assert ArchSpec.from_dict(CNN.to_dict()) == CNN


@pytest.mark.parametrize("arch", [MLP, CNN])
def test_save_load_save_is_byte_identical(tmp_path, arch):
    model = three_head_model(arch)
    first = save_model(model, tmp_path / "a.dacm")
    loaded = load_model(tmp_path / "a.dacm", arch)
    second = save_model(loaded, tmp_path / "b.dacm")
    assert first == second
    assert loaded.parameters().equal(model.parameters())
    assert [h.classes for h in loaded.heads] == [h.classes for h in model.heads]
    assert loaded.arch.taps == arch.taps


def test_sc_model_round_trip():
    backbone, _ = build_model(MLP, 0, with_head=False)
    sc = SCModel(MLP, backbone, Head(4, init_head(MLP, 9, 3), (7, 8, 9)))
    back = model_from_bytes(model_to_bytes(sc))
    assert isinstance(back, SCModel) and back.task_id == 4 and back.classes == (7, 8, 9)


def test_load_rejects_mismatched_arch(tmp_path):
    save_model(three_head_model(), tmp_path / "m.dacm")
    other = ArchSpec("mlp", (3, 4, 4), hidden=(8, 5))
    with pytest.raises(ArchMismatchError) as err:
        load_model(tmp_path / "m.dacm", other)
    assert other.hash() in str(err.value) and MLP.hash() in str(err.value)


def test_load_rejects_truncated_and_corrupted(tmp_path):
    blob = model_to_bytes(three_head_model())
    with pytest.raises(FormatError):
        model_from_bytes(blob[:-10])
    bad = bytearray(blob)
    bad[-20] ^= 0x01  # inside the payload
    with pytest.raises(FormatError, match="CRC"):
        model_from_bytes(bytes(bad))
    with pytest.raises(FormatError, match="magic"):
        model_from_bytes(b"NOTAMODEL" + blob[9:])


def test_float64_models_serialize_as_float32():
    model = three_head_model(dtype=np.float64)
    back = model_from_bytes(model_to_bytes(model))
    w = model.backbone["fc1.weight"].data
    np.testing.assert_array_equal(back.backbone["fc1.weight"].data, w.astype(np.float32))
    assert isinstance(back.backbone["fc1.weight"], Tensor)
