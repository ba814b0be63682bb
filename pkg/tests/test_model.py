import numpy as np
import pytest
import torch

from mtreid.binio import FormatError
from mtreid.data import AttributeAnnotation, AttributeSchema, AttributeSpec, Batch
from mtreid.data.types import BINARY, DEFAULT_SCHEMA
from mtreid.losses import Centers, LossWeights, total_loss
from mtreid.model import Model, ModelConfig, ModelError, read_weights


def small(**kw):
    base = dict(num_identities=10, signature_dim=16, fc2_dim=8, backbone_channels=(4, 8, 8))
    base.update(kw)
    return Model(ModelConfig(**base))


def images(n=2, h=16, w=16, seed=0):
    return np.random.default_rng(seed).random((n, h, w, 3)).astype(np.float32)


def test_output_shapes():
    out = small().forward(images(2), mode="eval")
    assert tuple(out.signatures.shape) == (2, 16)
    assert tuple(out.identity_logits.shape) == (2, 10)
    assert [t.shape[1] for t in out.attribute_logits] == [1, 8, 9, 1, 1, 1, 1, 1, 1]


def test_eval_is_deterministic_and_keep_one_matches():
    m = small()
    x = images(3)
    a, b = m.forward(x).numpy(), m.forward(x).numpy()
    assert np.array_equal(a["signatures"], b["signatures"])
    m1 = small(dropout_keep=1.0)
    train = m1.forward(x, mode="train", generator=torch.Generator().manual_seed(0)).numpy()
    ev = m1.forward(x).numpy()
    for key in ("signatures", "identity_logits"):
        assert np.array_equal(train[key], ev[key])


def test_bad_inputs():
    m = small()
    with pytest.raises(ModelError):
        m.forward(np.zeros((2, 16, 16, 4)))
    with pytest.raises(ModelError):
        m.forward(images(1), mode="test")
    with pytest.raises(ModelError):
        ModelConfig(num_identities=3, dropout_keep=0.0)
    with pytest.raises(ModelError):
        ModelConfig(num_identities=3, signature_dim=0)
    with pytest.raises(ModelError):
        Model(ModelConfig(num_identities=3, backbone="vgg"))


def test_parameter_order_and_count():
    m = small()
    names = [n for n, _ in m.named_parameters()]
    assert names == [n for n, _ in m.named_parameters()]
    # three stride-2 conv blocks (3x3 kernels, no bias) with group norm, then the four affine parts
    chans = [3, 4, 8, 8]
    conv = sum(chans[i] * chans[i + 1] * 9 + 2 * chans[i + 1] for i in range(3))
    fc1 = 8 * 16 + 16
    fc2 = 8 * 8 + 8
    id_head = 16 * 10 + 10
    heads = sum(8 * w + w for w in [1, 8, 9, 1, 1, 1, 1, 1, 1])
    assert m.parameter_count() == conv + fc1 + fc2 + id_head + heads
    frozen = [n for n, _ in m.named_parameters(freeze_backbone=True)]
    assert frozen and not any(n.startswith("backbone.") for n in frozen)
    assert m.parameter_count(freeze_backbone=True) == fc1 + fc2 + id_head + heads


def test_fc1_and_fc2_are_parallel():
    m = small()
    x = images(2)
    before = m.forward(x).numpy()
    with torch.no_grad():
        m.net.fc2.weight.add_(1.0)
    after = m.forward(x).numpy()
    assert np.array_equal(before["signatures"], after["signatures"])
    assert not np.array_equal(before["attribute_logits"][1], after["attribute_logits"][1])
    with torch.no_grad():
        m.net.fc1.weight.add_(1.0)
    again = m.forward(x).numpy()
    for a, b in zip(after["attribute_logits"], again["attribute_logits"]):
        assert np.array_equal(a, b)


def test_dropout_expectation():
    m = small(dropout_keep=0.8, dtype="float64")
    with torch.no_grad():
        h = m.net.backbone(m._as_input(images(1)))
        gen = torch.Generator().manual_seed(0)
        draws = 10_000
        total = torch.zeros_like(h)
        for _ in range(draws):
            total += m.net._dropout(h, gen)
    mean = (total / draws).numpy().ravel()
    h = h.numpy().ravel()
    sigma = np.abs(h) * np.sqrt((1 - 0.8) / 0.8) / np.sqrt(draws)
    live = sigma > 0
    z = (mean[live] - h[live]) / sigma[live]
    # pooled z-score of all coordinates
    assert abs(z.sum() / np.sqrt(live.sum())) < 3.0
    assert np.all(np.abs(mean - h) <= 5 * sigma + 1e-12)


def test_float64_end_to_end_gradients():
    """Network + loss gradients against central differences, every parameter coordinate."""
    schema = AttributeSchema((AttributeSpec("a", BINARY, 2), DEFAULT_SCHEMA.entries[1]))
    m = Model(ModelConfig(num_identities=3, signature_dim=4, fc2_dim=3, backbone_channels=(2, 3, 4),
                          attribute_schema=schema, dtype="float64", dropout_keep=0.8, init_seed=1))
    rng = np.random.default_rng(0)
    x = rng.random((4, 16, 16, 3))
    mask = np.array([True, False, True, True])
    labels = [AttributeAnnotation((int(rng.integers(2)), int(rng.integers(8)))) if f else None for f in mask]
    batch = Batch(x, np.array([0, 1, 2, 1]), mask, labels)
    w = LossWeights.from_counts([2, 3, 1], [[2, 3], rng.integers(1, 4, size=8)], alpha=0.06, lam=2.0)
    centers = Centers(rng.normal(size=(3, 4)))

    def loss(with_grad):
        out = m.forward(x, mode="train", generator=torch.Generator().manual_seed(7))
        b, g = total_loss(out.numpy(), batch, centers, w, schema)
        if with_grad:
            for p in m.parameters():
                p.grad = None
            out.backward(g)
        return b.total

    loss(True)
    worst = 0.0
    h = 1e-6
    for name, p in m.named_parameters():
        analytic = p.grad.detach().numpy().ravel().copy()
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            keep = flat[i].item()
            flat[i] = keep + h
            up = loss(False)
            flat[i] = keep - h
            down = loss(False)
            flat[i] = keep
            numeric = (up - down) / (2 * h)
            denom = max(abs(analytic[i]), abs(numeric), 1e-5)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    assert worst < 1e-3


def test_weights_round_trip(tmp_path):
    m = small(init_seed=3)
    path = tmp_path / "w.bin"
    m.save_weights(path)
    other = small(init_seed=3)
    with torch.no_grad():
        for p in other.parameters():
            p.add_(1.0)
    other.load_weights(path)
    for (n1, a), (n2, b) in zip(m.state_arrays(), other.state_arrays()):
        assert n1 == n2 and np.array_equal(a, b)
    x = images(2)
    assert np.array_equal(m.forward(x).numpy()["signatures"], other.forward(x).numpy()["signatures"])
    assert path.read_bytes() == other.weights_bytes()
    # a differently seeded model still loads the tensors (the seed is not a shape field)
    third = small(init_seed=9)
    third.load_weights(path)
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(m.state_arrays(), third.state_arrays()))


def test_weights_mismatch_and_corruption(tmp_path):
    path = tmp_path / "w.bin"
    small().save_weights(path)
    with pytest.raises(FormatError, match="signature_dim"):
        small(signature_dim=32).load_weights(path)
    blob = bytearray(path.read_bytes())
    blob[40] ^= 0xFF
    (tmp_path / "bad.bin").write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="corrupt"):
        read_weights(tmp_path / "bad.bin")


def test_allow_missing_heads(tmp_path):
    no_heads = small(attribute_schema=AttributeSchema(()))
    path = tmp_path / "stage1.bin"
    no_heads.save_weights(path)
    full = small()
    with pytest.raises(FormatError):
        full.load_weights(path)
    heads_before = [p.detach().clone() for n, p in full.named_parameters() if n.startswith("att_heads.")]
    full.load_weights(path, allow_missing_heads=True)
    assert torch.equal(full.net.fc1.weight, no_heads.net.fc1.weight)
    heads_after = [p for n, p in full.named_parameters() if n.startswith("att_heads.")]
    assert all(torch.equal(a, b) for a, b in zip(heads_before, heads_after))
