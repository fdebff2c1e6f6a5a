import numpy as np
import pytest

from mmfuse import diffcore as dc
from mmfuse.diffcore import ShapeError, Tensor
from mmfuse.encoder import (
    EncoderConfig,
    ModelParams,
    decode,
    decode_batch,
    encode,
    encode_batch,
    init_encoder,
    init_location_head,
    patchify,
    project_latent,
    project_location,
)
from mmfuse.objectives import CriticConfig, ObjectiveGraph, build_loss, preset, recon_loss
from mmfuse.optim import TrainConfig, train
from mmfuse.synthdata import NO_AUGMENT, GeneratorConfig, generate, znormalize

CFG = EncoderConfig()


def _params(seed=0, cfg=CFG):
    return ModelParams.init(cfg, seed).tensors(requires_grad=False)


def test_default_config_shapes():
    assert (CFG.grid, CFG.n_locations, CFG.d_z) == (4, 16, 64)
    out = encode(_params(), np.random.default_rng(0).normal(size=(16, 16)), CFG, "enc1")
    assert out.locations.shape == (16, CFG.d_loc)
    assert out.latent.shape == (64,)
    assert np.all(np.isfinite(out.latent.value))


def test_bad_patch_side():
    with pytest.raises(ValueError):
        EncoderConfig(image_side=16, patch_side=5)


def test_zero_image_zero_final_layer_gives_zero_latent():
    arrays = ModelParams.init(CFG, 0).arrays
    arrays["enc1.agg.1.W"] = np.zeros_like(arrays["enc1.agg.1.W"])
    params = {k: Tensor(v) for k, v in arrays.items()}
    z = encode(params, np.zeros((16, 16)), CFG, "enc1").latent.value
    np.testing.assert_array_equal(z, np.zeros(64))


def test_encode_rejects_wrong_shape():
    with pytest.raises(ShapeError):
        encode(_params(), np.zeros((8, 8)), CFG, "enc1")


def test_encode_deterministic_across_runs():
    img = np.random.default_rng(3).normal(size=(16, 16))
    a = encode(_params(7), img, CFG, "enc2").latent.value
    b = encode(_params(7), img, CFG, "enc2").latent.value
    assert a.tobytes() == b.tobytes()


def test_patch_permutation_equivariance():
    rng = np.random.default_rng(1)
    img = rng.normal(size=(1, 16, 16))
    params = _params()
    perm = rng.permutation(16)
    patches = patchify(Tensor(img), CFG).value[0]
    # rebuild the image from permuted patches
    permuted = patches[perm].reshape(4, 4, 4, 4).transpose(0, 2, 1, 3).reshape(1, 16, 16)
    loc = encode_batch(params, img, CFG, "enc1").locations.value[0]
    loc_perm = encode_batch(params, permuted, CFG, "enc1").locations.value[0]
    np.testing.assert_allclose(loc_perm, loc[perm], atol=1e-12)


def test_project_location_identity_head():
    cfg = EncoderConfig(d_loc=64)
    head = {"phi.0.W": Tensor(np.eye(64)), "phi.0.b": Tensor(np.zeros(64)),
            "phi.1.W": Tensor(np.eye(64)), "phi.1.b": Tensor(np.zeros(64))}
    x = np.abs(np.random.default_rng(0).normal(size=(cfg.n_locations, 64)))  # location features are post-relu
    np.testing.assert_allclose(project_location(head, x).value, x)


def test_project_location_permutes_rows():
    rng = np.random.default_rng(2)
    head = {k: Tensor(v) for k, v in init_location_head(CFG, rng).items()}
    x = rng.normal(size=(16, CFG.d_loc))
    perm = rng.permutation(16)
    np.testing.assert_allclose(project_location(head, x[perm]).value, project_location(head, x).value[perm])


def test_project_location_matches_direct_evaluation():
    rng = np.random.default_rng(5)
    raw = init_location_head(CFG, rng)
    raw = {k: v + (rng.normal(size=v.shape) if k.endswith(".b") else 0) for k, v in raw.items()}
    x = rng.normal(size=(16, CFG.d_loc))
    expected = np.maximum(x @ raw["phi.0.W"] + raw["phi.0.b"], 0) @ raw["phi.1.W"] + raw["phi.1.b"]
    got = project_location({k: Tensor(v) for k, v in raw.items()}, x).value
    np.testing.assert_allclose(got, expected, rtol=1e-12)
    assert got.shape == (16, 64)


def test_project_location_width_mismatch():
    head = {k: Tensor(v) for k, v in init_location_head(CFG, np.random.default_rng(0)).items()}
    with pytest.raises(ShapeError):
        project_location(head, np.zeros((16, CFG.d_loc + 1)))


def test_project_latent_identity_and_gradient():
    z = Tensor(np.arange(1.0, 9.0), requires_grad=True)
    out = project_latent(z)
    np.testing.assert_array_equal(out.value, np.arange(1.0, 9.0))
    np.testing.assert_array_equal(project_latent(np.zeros(4)).value, np.zeros(4))
    w = np.linspace(-1, 1, 8)
    g_through = dc.backward(dc.sum_(dc.mul(project_latent(z), Tensor(w))))[z]
    np.testing.assert_array_equal(g_through, w)


def test_decode_zero_latent_and_shape():
    params = _params()
    img = decode(params, np.zeros(64), CFG, "dec1")
    assert img.shape == (16, 16)
    np.testing.assert_array_equal(img.value, np.zeros((16, 16)))


@pytest.mark.parametrize("seed", range(5))
def test_autoencoder_training_reduces_reconstruction_error(seed):
    data = generate(GeneratorConfig(n_subjects=200, seed=seed))
    small = EncoderConfig(hidden=(32,))

    def mse(model):
        p = model.tensors(False)
        x = znormalize(data.images1, result.norm, 1)
        z = encode_batch(p, x, small, "enc1").latent
        return recon_loss(x, decode_batch(p, z, small, "dec1")).item()

    result = train(TrainConfig(epochs=8, objective="AE", seed=seed, augment=NO_AUGMENT), data, small)
    init = ModelParams.init(small, seed, decoders=True, classifier=False)
    assert mse(result.params) < mse(init)


TINY = EncoderConfig(image_side=4, patch_side=2, d_loc=3, d_z=4, hidden=(3,), embed_dim=4)


def test_composed_loss_gradients_all_parameters():
    rng = np.random.default_rng(11)
    arrays = ModelParams.init(TINY, 11).arrays
    arrays = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in arrays.items()}
    x1, x2 = rng.normal(size=(5, 4, 4)), rng.normal(size=(5, 4, 4))
    labels = np.array([0, 1, 0, 1, 2])
    graph = preset("L-CL-CS")
    graph = ObjectiveGraph(edges=graph.edges + preset("S").edges, recon=0.5, cca=0.3, supervised=0.7)
    critic = CriticConfig(embed_dim=4)

    def f(p):
        outs = [encode_batch(p, x1, TINY, "enc1"), encode_batch(p, x2, TINY, "enc2")]
        return build_loss(graph, outs, p, critic, enc_cfg=TINY, images=[x1, x2], labels=labels)[0]

    assert dc.grad_check(f, arrays, 1e-6) < 1e-4


def test_shared_location_head_reaches_every_consuming_edge():
    rng = np.random.default_rng(4)
    arrays = ModelParams.init(TINY, 4).arrays
    x1, x2 = rng.normal(size=(6, 4, 4)), rng.normal(size=(6, 4, 4))
    critic = CriticConfig(embed_dim=4)
    graph = preset("L-CL-CS")

    def bounds(a):
        p = {k: Tensor(v) for k, v in a.items()}
        outs = [encode_batch(p, x1, TINY, "enc1"), encode_batch(p, x2, TINY, "enc2")]
        return build_loss(graph, outs, p, critic)[1].bounds

    before = bounds(arrays)
    mutated = dict(arrays)
    mutated["phi1.1.W"] = arrays["phi1.1.W"] + rng.normal(size=arrays["phi1.1.W"].shape)
    after = bounds(mutated)
    # edges whose endpoints include (1, location)
    for name in ("L1", "CL12", "CS12", "CS21"):
        assert after[name] != before[name]
    for name in ("L2", "CL21"):
        assert after[name] == before[name]


def test_init_is_glorot_uniform_with_zero_bias():
    arrays = init_encoder(CFG, np.random.default_rng(0), "enc")
    w = arrays["enc.agg.0.W"]
    bound = np.sqrt(6 / (w.shape[0] + w.shape[1]))
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.9 * bound
    assert not arrays["enc.agg.0.b"].any()
