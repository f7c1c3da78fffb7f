import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentmodes.gradcheck import run_gradcheck, tiny_mae_config
from latentmodes.mae import autodiff as ad
from latentmodes.mae.autodiff import AutodiffError, Tensor
from latentmodes.mae.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from latentmodes.mae.data import (
    N_CLASSES,
    MaskSpec,
    gen_toy_dataset,
    hog_features,
    mask_sample,
    patchify,
    unpatchify,
)
from latentmodes.mae.layers import rope2d_apply, rope2d_tables
from latentmodes.mae.model import MaeConfig, MaeModel, mae_loss
from latentmodes.mae.train import (
    AdamW,
    OptimConfig,
    cosine_lr,
    export_latents,
    finetune_decoder,
    image_metrics,
    recon_metrics,
    train_mae,
)
from latentmodes.numerics import RngStream, finite_diff_grad
from latentmodes.pipeline import read_latents


def zero_or_none(g):
    return g is None or not np.any(g)


# autodiff

def test_sum_of_matmul_gradient():
    W = Tensor(RngStream(0).normal((3, 4)), requires_grad=True)
    x = RngStream(1).normal((4, 2))
    ad.backward(ad.sum_(ad.matmul(W, Tensor(x))))
    np.testing.assert_allclose(W.grad, np.tile(x.sum(axis=1), (3, 1)), atol=1e-15)
    fd = finite_diff_grad(lambda w: float(np.sum(w.reshape(3, 4) @ x)), W.data.ravel())
    np.testing.assert_allclose(W.grad.ravel(), fd, atol=1e-6)


def test_unused_parameter_gets_no_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    ad.backward(ad.sum_(a * a))
    assert zero_or_none(b.grad)


def test_backward_accumulates():
    a = Tensor(RngStream(2).normal((2, 3)), requires_grad=True)
    loss = ad.sum_(ad.gelu(a))
    ad.backward(loss)
    first = a.grad.copy()
    ad.backward(loss)
    assert np.array_equal(a.grad, 2 * first)


def test_shared_subexpression_gradient():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = a * a
    ad.backward(ad.sum_(b + b))
    np.testing.assert_allclose(a.grad, 4 * a.data)


def test_non_scalar_loss_rejected():
    with pytest.raises(AutodiffError):
        ad.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_shape_errors_name_op():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5)))
    with pytest.raises(AutodiffError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
        ad.matmul(a, b)
    with pytest.raises(AutodiffError, match="add"):
        ad.add(a, b)
    with pytest.raises(AutodiffError, match="concat"):
        ad.concat([a, b], axis=0)
    with pytest.raises(AutodiffError, match="mse"):
        ad.mse(a, b)


def test_layernorm_and_softmax_basics():
    np.testing.assert_array_equal(ad.layernorm(Tensor(np.full((2, 5), 3.0))).data, 0.0)
    p = ad.softmax_lastdim(Tensor(RngStream(3).normal((4, 6)) * 10)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_full_gradcheck_suite():
    rows = run_gradcheck()
    bad = [r for r in rows if not r["passed"]]
    assert not bad, bad
    names = {r["check"] for r in rows}
    for op in ("matmul", "add", "mul", "gelu", "layernorm", "softmax_lastdim", "concat", "slice", "mse",
               "scorenet_grad", "dsm_loss", "mae_loss"):
        assert op in names


# RoPE

def test_rope_origin_is_identity():
    x = RngStream(0).normal((3, 8))
    out = rope2d_apply(x, np.zeros((3, 2)))
    np.testing.assert_array_equal(out.data, x)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(-6, 6), st.integers(-6, 6))
def test_rope_relative_position(seed, dx, dy):
    rng = np.random.default_rng(seed)
    q, k = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
    p1, p2 = rng.integers(0, 8, size=2), rng.integers(0, 8, size=2)
    shift = np.array([dx, dy])

    def inner(a, b):
        return float((rope2d_apply(q, a[None]).data @ rope2d_apply(k, b[None]).data.T)[0, 0])

    assert abs(inner(p1, p2) - inner(p1 + shift, p2 + shift)) <= 1e-10


def test_rope_translation_example_and_norm():
    rng = np.random.default_rng(1)
    q, k = rng.normal(size=(1, 16)), rng.normal(size=(1, 16))
    a, b = np.array([[1, 2]]), np.array([[4, 0]])
    s = np.array([[3, 5]])
    ip = float((rope2d_apply(q, a).data @ rope2d_apply(k, b).data.T)[0, 0])
    ip2 = float((rope2d_apply(q, a + s).data @ rope2d_apply(k, b + s).data.T)[0, 0])
    assert abs(ip - ip2) <= 1e-10
    x = rng.normal(size=(10, 16))
    pos = rng.integers(0, 8, size=(10, 2))
    np.testing.assert_allclose(np.linalg.norm(rope2d_apply(x, pos).data, axis=1), np.linalg.norm(x, axis=1),
                               atol=1e-10)


def test_rope_needs_head_dim_multiple_of_four():
    with pytest.raises(AutodiffError):
        rope2d_tables(4, 6)


def test_rope_tables_extra_rows_are_identity():
    cos, sin = rope2d_tables(2, 8, n_extra=3)
    assert cos.shape == (7, 4)
    assert np.all(cos[4:] == 1.0) and np.all(sin[4:] == 0.0)


# data

def test_toy_dataset_examples():
    ds = gen_toy_dataset(10, RngStream(0))
    assert sorted(ds.labels.tolist()) == list(range(N_CLASSES))
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    a = gen_toy_dataset(40, RngStream(1))
    b = gen_toy_dataset(40, RngStream(2))
    assert not np.array_equal(a.images, b.images)
    assert np.array_equal(np.bincount(a.labels, minlength=10), np.bincount(b.labels, minlength=10))
    again = gen_toy_dataset(40, RngStream(1))
    assert again.images.tobytes() == a.images.tobytes()


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 60))
def test_toy_dataset_balanced(n):
    counts = np.bincount(gen_toy_dataset(n, RngStream(n), image_size=8).labels, minlength=N_CLASSES)
    assert counts.max() - counts.min() <= 1


def test_hog_constant_image():
    assert not np.any(hog_features(np.full((8, 8, 3), 0.4)))


def test_hog_vertical_edge():
    img = np.zeros((8, 8))
    img[:, 4:] = 1.0
    h = hog_features(img, cell=8, bins=8)[0]
    # horizontal gradient -> orientation 0 -> bin 0
    assert h[0] ** 2 / np.sum(h ** 2) >= 0.9 or h[0] / h.sum() >= 0.9


def test_hog_rotation_shifts_bins_by_quarter_turn():
    yy, xx = np.mgrid[0:8, 0:8] + 0.5
    img = np.exp(-((xx - 4) ** 2 / 3.0 + (yy - 4) ** 2 / 12.0))
    h = hog_features(img, cell=8, bins=8)[0]
    hr = hog_features(np.rot90(img), cell=8, bins=8)[0]
    # 90 degrees over 8 bins spanning 180 degrees is 4 bins
    np.testing.assert_allclose(hr, np.roll(h, 4), atol=1e-10)


def test_hog_shape_and_norm():
    ds = gen_toy_dataset(1, RngStream(3))
    h = hog_features(ds.images[0])
    assert h.shape == (64, 8)
    norms = np.linalg.norm(h, axis=1)
    assert np.all((norms < 1 + 1e-9) & ((norms > 1 - 1e-3) | (norms == 0)))
    with pytest.raises(ValueError):
        hog_features(np.zeros((10, 10)), cell=4)


def test_mask_examples():
    assert not mask_sample(64, 0.0, 0.0, RngStream(0)).indicator.any()
    for s in range(50):
        m = mask_sample(64, 0.4, 0.6, RngStream(s))
        assert 26 <= m.count <= 38
    ratios = [mask_sample(64, 0.4, 0.6, RngStream(1000 + s)).ratio for s in range(1000)]
    assert abs(np.mean(ratios) - 0.5) <= 0.02


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 100), st.floats(0, 0.9), st.floats(0, 0.09), st.integers(0, 2**31))
def test_mask_count_matches_ratio(N, low, width, seed):
    m = mask_sample(N, low, low + width, RngStream(seed), batch=3)
    assert m.indicator.shape == (3, N)
    assert np.all(m.indicator.sum(axis=1) == round(m.ratio * N))
    assert low <= m.ratio <= low + width


def test_patchify_roundtrip():
    x = RngStream(0).normal((2, 8, 8, 3))
    p = patchify(x, 4)
    assert p.shape == (2, 4, 48)
    np.testing.assert_array_equal(p[0, 1], x[0, :4, 4:8].reshape(-1))
    assert np.array_equal(unpatchify(p, 4), x)


# model

@pytest.fixture(scope="module")
def tiny():
    cfg = tiny_mae_config(aux_targets=["hog"])
    model = MaeModel(cfg, RngStream(0))
    images = gen_toy_dataset(4, RngStream(1), image_size=cfg.image_size).images
    return cfg, model, images


def test_encode_shapes_and_zero_mask(tiny):
    cfg, model, images = tiny
    h = model.encode(images)
    assert h.shape == (4, cfg.latent_tokens, cfg.latent_dim)
    zero = MaskSpec(np.zeros(cfg.n_patches), 0.0)
    assert model.encode(images, zero).data.tobytes() == h.data.tobytes()
    with pytest.raises(AutodiffError):
        model.encode(images, MaskSpec(np.ones(3), 1.0))


def test_masked_contents_do_not_matter(tiny):
    cfg, model, images = tiny
    mask = np.zeros(cfg.n_patches)
    mask[[0, 3]] = 1.0
    spec = MaskSpec(mask, 0.5)
    p = patchify(images, cfg.patch_size)
    p2 = p.copy()
    p2[:, [0, 3]] = p[:, [3, 0]][:, :, ::-1]
    other = unpatchify(p2, cfg.patch_size)
    assert model.encode(images, spec).data.tobytes() == model.encode(other, spec).data.tobytes()


def test_decode_shapes_and_determinism(tiny):
    cfg, model, images = tiny
    h = model.encode(images)
    out = model.decode_pixels(h)
    assert out.shape == images.shape
    assert model.decode_pixels(h).tobytes() == out.tobytes()
    aux = model.decode_aux("hog", h)
    assert aux.shape == (4, cfg.n_patches, cfg.hog_bins)
    with pytest.raises(AutodiffError):
        model.decode_aux("pixel", h)
    with pytest.raises(AutodiffError):
        model.decode_patches(np.zeros((1, cfg.latent_tokens + 1, cfg.latent_dim)))


def test_detached_encoder_gets_no_gradient(tiny):
    cfg, model, images = tiny
    model.zero_grad()
    h = Tensor(model.encode(images, detach=True).data, requires_grad=True)
    loss = ad.mse(model.decode_patches(h), Tensor(patchify(images, cfg.patch_size)))
    aux = model.decode_aux("hog", h)
    ad.backward(loss + ad.sum_(aux * aux))
    assert np.any(h.grad)
    assert np.any(model.params["dec_tokens"].grad)
    assert np.any(model.params["aux.hog.dec_tokens"].grad)
    for n in model.decoder_names() + model.aux_names():
        assert model.params[n].grad is not None, n
    for n in model.encoder_names():
        assert zero_or_none(model.params[n].grad), n
    model.zero_grad()


def test_mae_loss_parts(tiny):
    cfg, model, images = tiny
    total, parts = mae_loss(model, images, MaskSpec(np.zeros(cfg.n_patches), 0.0))
    assert parts["mask_loss"] == 0.0 and parts["percep"] == 0.0 and parts["adv"] == 0.0
    mask = np.zeros(cfg.n_patches)
    mask[1] = 1.0
    spec = MaskSpec(mask, 1 / cfg.n_patches)
    pred = model.decode_aux("hog", model.encode(images, spec)).data
    _, parts = mae_loss(model, images, spec, targets={"hog": pred})
    assert parts["mask_loss"] == 0.0
    v = np.arange(cfg.hog_bins, dtype=float) / 10
    y = pred.copy()
    y[:, 1] = pred[:, 1] - v
    _, parts = mae_loss(model, images, spec, targets={"hog": y})
    assert parts["mask_loss"] == pytest.approx(v @ v / cfg.hog_bins, rel=1e-12)
    assert parts["total"] == pytest.approx(parts["recon"] + parts["mask_loss"], rel=1e-12)


def test_mask_loss_locality(tiny):
    cfg, model, images = tiny
    mask = np.zeros(cfg.n_patches)
    mask[2] = 1.0
    spec = MaskSpec(mask, 0.25)
    y = RngStream(5).normal((4, cfg.n_patches, cfg.hog_bins))
    base = mae_loss(model, images, spec, targets={"hog": y})[1]["mask_loss"]
    y2 = y.copy()
    y2[:, [0, 1, 3]] += 7.0
    assert mae_loss(model, images, spec, targets={"hog": y2})[1]["mask_loss"] == base


def test_checkpoint_roundtrip(tiny, tmp_path):
    cfg, model, images = tiny
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    back = load_checkpoint(path)
    assert back.cfg == cfg
    for n, p in model.params.items():
        assert back.params[n].data.tobytes() == p.data.tobytes()
    raw = path.read_bytes()
    path.write_bytes(raw + b"x")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


# training

def _small_cfg(**kw):
    base = dict(image_size=16, patch_size=4, embed_dim=16, latent_tokens=4, latent_dim=4, enc_layers=1,
                dec_layers=1, aux_dec_layers=1, heads=2)
    base.update(kw)
    return MaeConfig(**base)


def test_train_halves_recon_loss():
    data = gen_toy_dataset(2000, RngStream(0), image_size=16)
    model = MaeModel(_small_cfg(), RngStream(1))
    _, log = train_mae(data, model, OptimConfig(steps=500, batch=16, lr=3e-3))
    assert log[-1]["recon"] < 0.5 * log[0]["recon"]
    assert [r["step"] for r in log] == list(range(500))


def test_train_lr_zero_keeps_params():
    data = gen_toy_dataset(20, RngStream(0), image_size=16)
    model = MaeModel(_small_cfg(), RngStream(1))
    before = model.state_dict()
    train_mae(data, model, OptimConfig(steps=3, batch=4, lr=0.0))
    for n, v in model.state_dict().items():
        assert v.tobytes() == before[n].tobytes()


def test_plain_ae_ignores_mask_token_and_aux():
    data = gen_toy_dataset(20, RngStream(0), image_size=16)
    cfg = _small_cfg(mask_low=0.0, mask_high=0.0, aux_targets=[])
    seen = []
    model = MaeModel(cfg, RngStream(1))
    orig = AdamW.step

    def spy(self, lr):
        seen.append(zero_or_none(self.params["mask_token"].grad))
        orig(self, lr)

    AdamW.step = spy
    try:
        train_mae(data, model, OptimConfig(steps=4, batch=4, lr=1e-3))
    finally:
        AdamW.step = orig
    assert seen and all(seen)
    # changing m does not change the trajectory
    other = MaeModel(cfg, RngStream(1))
    other.params["mask_token"].data = other.params["mask_token"].data + 5.0
    model2 = MaeModel(cfg, RngStream(1))
    train_mae(data, model2, OptimConfig(steps=4, batch=4, lr=1e-3))
    train_mae(data, other, OptimConfig(steps=4, batch=4, lr=1e-3))
    for n in model2.params:
        if n != "mask_token":
            assert other.params[n].data.tobytes() == model2.params[n].data.tobytes(), n


def test_cosine_lr_shape():
    lrs = [cosine_lr(s, 100, 1.0, 0.02) for s in range(100)]
    assert lrs[0] == 0.5 and lrs[1] == 1.0
    assert all(a >= b for a, b in zip(lrs[1:], lrs[2:]))


def test_finetune_freezes_encoder(tmp_path):
    data = gen_toy_dataset(200, RngStream(0), image_size=16)
    model = MaeModel(_small_cfg(), RngStream(1))
    train_mae(data, model, OptimConfig(steps=60, batch=16, lr=3e-3))
    enc_before = {n: model.params[n].data.tobytes() for n in model.encoder_names()}
    aux_before = {n: model.params[n].data.tobytes() for n in model.aux_names()}
    probe = data.images[:20]
    lat_before = model.latents(probe).tobytes()
    mse_before = recon_metrics(model, data.images[:100])["mse"]
    _, log = finetune_decoder(model, data, OptimConfig(steps=60, batch=16, lr=1e-3))
    for n, v in enc_before.items():
        assert model.params[n].data.tobytes() == v, n
    for n, v in aux_before.items():
        assert model.params[n].data.tobytes() == v, n
    assert model.latents(probe).tobytes() == lat_before
    assert recon_metrics(model, data.images[:100])["mse"] <= mse_before
    assert log[0]["ratio"] == pytest.approx(0.6) and log[-1]["ratio"] == pytest.approx(0.6 / 60)


def test_export_latents(tmp_path):
    data = gen_toy_dataset(12, RngStream(0), image_size=16)
    model = MaeModel(_small_cfg(), RngStream(1))
    p1, p2 = tmp_path / "a.latb", tmp_path / "b.latb"
    ds = export_latents(model, data.images, data.labels, p1)
    export_latents(model, data.images, data.labels, p2)
    assert p1.read_bytes() == p2.read_bytes()
    back = read_latents(p1)
    assert back.n == 12 and back.data.tobytes() == ds.data.tobytes()
    assert np.array_equal(back.labels, data.labels)


def test_image_metrics():
    x = RngStream(0).uniform(0.0, 0.8, size=(10, 4, 4, 3))
    m = image_metrics(x, x)
    assert m["mse"] == 0.0 and m["psnr"] == 99.0 and m["pixel_frechet"] <= 1e-8
    m = image_metrics(x, x + 0.1)
    assert m["mse"] == pytest.approx(0.01) and m["psnr"] == pytest.approx(20.0)
    assert image_metrics(x, x + 0.1) == m


def test_config_validation():
    with pytest.raises(ValueError):
        MaeConfig(mask_low=0.7, mask_high=0.6)
    with pytest.raises(ValueError):
        MaeConfig(image_size=30)
    with pytest.raises(ValueError):
        MaeConfig(aux_targets=["dino"])
