import numpy as np
import pytest

from sweepmatch import tensor as T
from sweepmatch.encoder import (
    CheckpointError,
    EncoderConfig,
    encode,
    encoder_forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    _conv_shapes,
)
from sweepmatch.tensor import ShapeError, Tensor


TINY = EncoderConfig(input_size=(16, 16),
                     conv_stages=((4, 1, 2), (8, 1, 2)),
                     embedding_dim=8, mlp_layers=2, mlp_width=8)


@pytest.fixture(scope="module")
def tiny_params():
    return init_params(TINY, seed=0)


def _frames(n, size=(16, 16), seed=0):
    return np.random.default_rng(seed).random((n, *size))


# -- init ----------------------------------------------------------------------


def test_init_deterministic():
    a = init_params(TINY, seed=3)
    b = init_params(TINY, seed=3)
    for k in a.tensors:
        assert np.array_equal(a.tensors[k].data, b.tensors[k].data)


def test_init_seed_changes_weights():
    a = init_params(TINY, seed=3)
    b = init_params(TINY, seed=4)
    assert any(not np.array_equal(a.tensors[k].data, b.tensors[k].data)
               for k in a.tensors)


def test_init_linear_weight_statistics():
    cfg = EncoderConfig(input_size=(16, 16), conv_stages=((4, 1, 2), (8, 1, 2)),
                        embedding_dim=512, mlp_layers=2, mlp_width=512)
    params = init_params(cfg, seed=0)
    w = params.tensors["mlp1.w"].data  # 512 x 512
    std_expected = np.sqrt(2.0 / w.shape[1])
    se = std_expected / np.sqrt(w.size)
    assert abs(w.mean()) < 3 * se


def test_dustbin_initialized_to_zero(tiny_params):
    assert tiny_params.tensors["dustbin.alpha"].data[0] == 0.0


def test_shape_audit_matches_config(tiny_params):
    expected = dict(_conv_shapes(TINY))
    assert set(tiny_params.tensors) == set(expected)
    for k, shape in expected.items():
        assert tiny_params.tensors[k].shape == shape
    # parameter count is a pure function of the config
    assert tiny_params.parameter_count() == init_params(TINY, seed=9).parameter_count()


def test_default_config_embedding_dim_512():
    assert EncoderConfig().embedding_dim == 512
    shapes = dict(_conv_shapes(EncoderConfig()))
    assert shapes["mlp3.w"][0] == 512


# -- encode ----------------------------------------------------------------------


def test_embedding_bn_adds_output_norm_layer():
    cfg = EncoderConfig(input_size=(16, 16), conv_stages=((4, 1, 2),),
                        embedding_dim=8, mlp_layers=2, mlp_width=8,
                        embedding_bn=True)
    names = [n for n, _ in _conv_shapes(cfg)]
    assert "mlp1.bn.gamma" in names and "mlp1.bn.beta" in names

    params = init_params(cfg, seed=0)
    z = encode(_frames(6), params, mode="train")
    # fresh BN (gamma=1, beta=0) standardizes each output dimension
    assert np.allclose(z.mean(axis=0), 0.0, atol=1e-6)
    assert np.allclose(z.var(axis=0), 1.0, atol=1e-4)


def test_embedding_bn_off_keeps_bare_output():
    names = [n for n, _ in _conv_shapes(TINY)]
    assert "mlp1.bn.gamma" not in names


def test_duplicate_frames_same_embedding(tiny_params):
    f = _frames(1)[0]
    out = encode(np.stack([f, f, f]), tiny_params, mode="infer")
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])


def test_infer_batch_independence(tiny_params):
    frames = _frames(5)
    alone = encode(frames[:1], tiny_params, mode="infer")[0]
    batched = encode(frames, tiny_params, mode="infer")[0]
    assert np.max(np.abs(alone - batched)) < 1e-6


def test_embedding_dim(tiny_params):
    out = encode(_frames(3), tiny_params, mode="infer")
    assert out.shape == (3, 8)


def test_embeddings_not_normalized(tiny_params):
    # a trained/random encoder must not hide a normalization layer
    out = encode(_frames(16, seed=7), tiny_params, mode="infer")
    norms = np.linalg.norm(out, axis=1)
    assert norms.std() > 0


def test_wrong_image_size_rejected(tiny_params):
    with pytest.raises(ShapeError):
        encode(_frames(2, size=(8, 8)), tiny_params)


def test_train_mode_needs_batch(tiny_params):
    with pytest.raises(ValueError, match="batch"):
        encode(_frames(1), tiny_params, mode="train")


def test_unknown_mode(tiny_params):
    with pytest.raises(ValueError):
        encode(_frames(2), tiny_params, mode="test")


def test_full_encoder_gradcheck():
    """Analytic gradients through the whole encoder vs finite differences
    at 64-bit on a reduced-size model."""
    params = init_params(TINY, seed=1, dtype=np.float64)
    rng = np.random.default_rng(2)
    x0 = rng.random((2, 1, 16, 16))
    target = rng.standard_normal((2, 8))

    def loss_value(update=False):
        x = Tensor(x0)
        z = encoder_forward(params, x, train=True, update_running=update)
        diff = T.sub(z, Tensor(target))
        return T.sum_(T.mul(diff, diff))

    loss = loss_value()
    loss.backward()
    checked = 0
    rng_pick = np.random.default_rng(0)
    for name, p in params.tensors.items():
        if name == "dustbin.alpha":
            continue
        grads = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat_idx = rng_pick.choice(p.data.size, size=min(4, p.data.size),
                                   replace=False)
        for k in flat_idx:
            orig = p.data.reshape(-1)[k]
            h = 1e-5
            p.data.reshape(-1)[k] = orig + h
            fp = float(loss_value().data)
            p.data.reshape(-1)[k] = orig - h
            fm = float(loss_value().data)
            p.data.reshape(-1)[k] = orig
            fd = (fp - fm) / (2 * h)
            analytic = grads.reshape(-1)[k]
            assert abs(analytic - fd) / max(1.0, abs(fd)) < 1e-4, name
            checked += 1
    assert checked > 40


# -- checkpoint persistence ---------------------------------------------------------


def test_checkpoint_roundtrip_bit_exact(tmp_path, tiny_params):
    frames = _frames(4, seed=5)
    before = encode(frames, tiny_params, mode="infer")
    path = tmp_path / "model.swmc"
    save_checkpoint(tiny_params, None, epoch=17, path=path)
    loaded, opt_state, epoch = load_checkpoint(path)
    assert epoch == 17 and opt_state is None
    after = encode(frames, loaded, mode="infer")
    assert np.array_equal(before.astype(np.float32), after.astype(np.float32))


def test_checkpoint_keeps_optimizer_state(tmp_path, tiny_params):
    from sweepmatch.optim import Adam
    opt = Adam(tiny_params.tensors, lr=2e-3)
    opt.step_count = 5
    opt.m["stem.conv.w"] += 1.0
    path = tmp_path / "model.swmc"
    save_checkpoint(tiny_params, opt.state_dict(), epoch=2, path=path)
    _, state, _ = load_checkpoint(path)
    assert state["step_count"] == 5
    assert np.allclose(state["m"]["stem.conv.w"], 1.0)


def test_checkpoint_truncated_rejected(tmp_path, tiny_params):
    path = tmp_path / "model.swmc"
    save_checkpoint(tiny_params, None, epoch=0, path=path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "model.swmc"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path, tiny_params):
    import json
    import struct
    path = tmp_path / "model.swmc"
    save_checkpoint(tiny_params, None, epoch=0, path=path)
    blob = bytearray(path.read_bytes())
    # alter the embedded config so the stored shapes no longer match it
    (jlen,) = struct.unpack("<I", blob[8:12])
    meta = json.loads(blob[12 : 12 + jlen].decode())
    meta["config"]["embedding_dim"] = 16
    new = json.dumps(meta).encode()
    rebuilt = blob[:8] + struct.pack("<I", len(new)) + new + blob[12 + jlen :]
    path.write_bytes(rebuilt)
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path)
