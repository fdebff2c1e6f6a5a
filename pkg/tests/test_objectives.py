import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmfuse import diffcore as dc
from mmfuse.diffcore import ContractError, ShapeError, Tensor
from mmfuse.encoder import EncoderOutput
from mmfuse.objectives import (
    LATENT,
    LOCATION,
    PRESETS,
    CriticConfig,
    Edge,
    ObjectiveGraph,
    build_loss,
    cca_loss,
    critic_score,
    critic_scores,
    cross_spatial_infonce,
    infonce,
    infonce_from_scores,
    kind_edges,
    location_infonce,
    preset,
    recon_loss,
)

CFG = CriticConfig()
NO_PEN = CriticConfig(penalty=0.0)


def _oracle_bound(scores: np.ndarray) -> float:
    """Direct evaluation of mean_m log(e^{f_mm} / ((1/N) sum_k e^{f_mk}))."""
    n = scores.shape[0]
    total = 0.0
    for m in range(n):
        denom = sum(math.exp(scores[m, k]) for k in range(n)) / n
        total += math.log(math.exp(scores[m, m]) / denom)
    return total / n


def test_critic_zero():
    assert critic_score(np.zeros(64), np.zeros(64), CFG).item() == 0.0


@pytest.mark.parametrize("s", [-0.49, -0.3, -0.01, 0.0, 0.2, 0.49])
def test_critic_small_argument_is_near_identity(s):
    u = np.full(64, 1.0)
    v = np.full(64, s / 8)  # u.v / sqrt(64) == s
    assert critic_score(u, v, CFG).item() == pytest.approx(s, abs=1e-4)


def test_critic_small_argument_third_order_term():
    # c tanh(s / c) = s - s^3 / (3 c^2) + O(s^5); at s = 0.5 the gap is just above 1e-4
    val = critic_score(np.full(64, 1.0), np.full(64, 0.5 / 8), CFG).item()
    assert 0.5 - val == pytest.approx(0.5**3 / (3 * 20.0**2), rel=1e-3)


def test_critic_clips_huge_scores():
    u = np.full(64, 1e3)
    v = np.full(64, 1e3 / 8)
    assert u @ v / 8 >= 1e6
    assert 19.99 < critic_score(u, v, CFG).item() < 20.0
    assert -20.0 < critic_score(u, -v, CFG).item() < -19.99


def test_critic_width_mismatch():
    with pytest.raises(ShapeError):
        critic_score(np.zeros(64), np.zeros(63), CFG)


def test_infonce_single_sample_bound_is_zero():
    rng = np.random.default_rng(0)
    _, bound = infonce(rng.normal(size=(1, 64)), rng.normal(size=(1, 64)), CFG)
    assert bound.item() == 0.0


def test_infonce_two_sample_diagonal_dominant():
    scores = np.array([[5.0, -5.0], [-5.0, 5.0]])
    _, bound = infonce_from_scores(scores, NO_PEN)
    expected = _oracle_bound(scores)
    assert expected == pytest.approx(0.69310, abs=1e-5)
    assert bound.item() == pytest.approx(expected, abs=1e-12)
    assert bound.item() == pytest.approx(math.log(2) - math.log1p(math.exp(-10)), abs=1e-12)


def test_infonce_penalty_adds_mean_square():
    scores = np.array([[1.0, 2.0], [3.0, -1.0]])
    loss, bound = infonce_from_scores(scores, CriticConfig(penalty=0.5))
    assert loss.item() == pytest.approx(-bound.item() + 0.5 * np.mean(scores**2), abs=1e-12)


@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 8), scale=st.floats(0.01, 1e3))
def test_infonce_bound_never_exceeds_log_n(seed, n, scale):
    rng = np.random.default_rng(seed)
    _, bound = infonce(scale * rng.normal(size=(n, 64)), scale * rng.normal(size=(n, 64)), CFG)
    assert bound.item() <= math.log(n) + 1e-9


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_infonce_row_shift_invariance(seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=(5, 5)) * 3
    shift = rng.normal(size=(5, 1)) * 10
    b0 = infonce_from_scores(scores, NO_PEN)[1].item()
    b1 = infonce_from_scores(scores + shift, NO_PEN)[1].item()
    assert b0 == pytest.approx(b1, abs=1e-10)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), magnitude=st.floats(1.0, 1e6))
def test_critic_strictly_inside_clip(seed, magnitude):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(4, 64)) * magnitude
    v = rng.normal(size=(4, 64)) * magnitude
    s = critic_scores(u, v, CFG).value
    assert np.all(np.abs(s) < 20.0)
    assert np.all(np.isfinite(s))


def test_location_infonce_single_location_reduces_to_infonce():
    rng = np.random.default_rng(1)
    c = rng.normal(size=(5, 1, 64))
    t = rng.normal(size=(5, 64))
    l1, b1 = location_infonce(c, t, CFG)
    l2, b2 = infonce(c[:, 0, :], t, CFG)
    assert b1.item() == pytest.approx(b2.item(), abs=1e-12)
    assert l1.item() == pytest.approx(l2.item(), abs=1e-12)


def test_location_infonce_single_sample():
    rng = np.random.default_rng(2)
    for L in (1, 4, 9):
        assert location_infonce(rng.normal(size=(1, L, 64)), rng.normal(size=(1, 64)), CFG)[1].item() == 0.0


def test_location_infonce_is_mean_over_locations():
    rng = np.random.default_rng(3)
    c = rng.normal(size=(4, 4, 64)) * 2
    t = rng.normal(size=(4, 64)) * 2
    loss, bound = location_infonce(c, t, CFG)
    per = [infonce(c[:, l, :], t, CFG) for l in range(4)]
    assert bound.item() == pytest.approx(np.mean([b.item() for _, b in per]), abs=1e-12)
    assert loss.item() == pytest.approx(np.mean([lo.item() for lo, _ in per]), abs=1e-12)


def test_cross_spatial_identical_features_approach_log_n():
    rng = np.random.default_rng(4)
    n, L = 6, 4
    # orthogonal per-sample codes make every location's scores diagonal-dominant
    codes = np.zeros((n, L, 64))
    for m in range(n):
        codes[m, :, m] = 40.0
    _, bound = cross_spatial_infonce(codes, codes, NO_PEN)
    assert bound.item() == pytest.approx(math.log(n), abs=1e-3)
    assert bound.item() <= math.log(n) + 1e-12
    assert cross_spatial_infonce(rng.normal(size=(1, L, 64)), rng.normal(size=(1, L, 64)), CFG)[1].item() == 0.0


def test_cross_spatial_batch_permutation_invariance():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(5, 4, 64)), rng.normal(size=(5, 4, 64))
    perm = rng.permutation(5)
    l0, b0 = cross_spatial_infonce(a, b, CFG)
    l1, b1 = cross_spatial_infonce(a[perm], b[perm], CFG)
    assert b0.item() == pytest.approx(b1.item(), abs=1e-12)
    assert l0.item() == pytest.approx(l1.item(), abs=1e-12)


def test_cross_spatial_location_mismatch():
    with pytest.raises(ShapeError):
        cross_spatial_infonce(np.zeros((2, 4, 64)), np.zeros((2, 9, 64)), CFG)


def test_infonce_gradient_check():
    rng = np.random.default_rng(6)
    point = {"u": rng.normal(size=(4, 8)), "v": rng.normal(size=(4, 8))}
    cfg = CriticConfig(embed_dim=8)
    assert dc.grad_check(lambda t: infonce(t["u"], t["v"], cfg)[0], point, 1e-5) < 1e-4


def _qr_canonical_correlations(a, b):
    qa, _ = np.linalg.qr(a - a.mean(0))
    qb, _ = np.linalg.qr(b - b.mean(0))
    return np.linalg.svd(qa.T @ qb, compute_uv=False)


def test_cca_self_correlation():
    z = np.random.default_rng(7).normal(size=(500, 6))
    assert cca_loss(z, z, ridge=1e-9).item() == pytest.approx(-6.0, abs=1e-5)


def test_cca_independent_latents_near_zero():
    rng = np.random.default_rng(8)
    z1, z2 = rng.normal(size=(2000, 4)), rng.normal(size=(2000, 4))
    loss = cca_loss(z1, z2, ridge=1e-3).item()
    oracle = -_qr_canonical_correlations(z1, z2).sum()
    assert loss == pytest.approx(oracle, abs=1e-2)
    assert abs(loss) < 0.3


def test_cca_invariant_to_invertible_map():
    rng = np.random.default_rng(9)
    z1 = rng.normal(size=(500, 5))
    z2 = z1[:, :3] @ rng.normal(size=(3, 5)) + 0.5 * rng.normal(size=(500, 5))
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    a = q @ np.diag([1.0, 1.5, 2.0, 0.7, 1.2])
    before = cca_loss(z1, z2, ridge=1e-10).item()
    after = cca_loss(z1 @ a, z2, ridge=1e-10).item()
    assert abs(before - after) < 1e-6


def test_cca_gradient_check():
    rng = np.random.default_rng(10)
    point = {"a": rng.normal(size=(12, 3)), "b": rng.normal(size=(12, 3))}
    assert dc.grad_check(lambda t: cca_loss(t["a"], t["b"]), point, 1e-6) < 1e-4


def test_cca_rejects_non_finite():
    z = np.ones((5, 2))
    z[0, 0] = np.nan
    with pytest.raises(ValueError):
        cca_loss(z, np.ones((5, 2)))


def test_recon_loss_examples():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(8, 8))
    assert recon_loss(x, x).item() == 0.0
    assert recon_loss(np.zeros((8, 8)), np.ones((8, 8))).item() == 1.0
    y = rng.normal(size=(8, 8))
    assert recon_loss(x, y).item() == pytest.approx(np.mean((x - y) ** 2), rel=1e-12)
    with pytest.raises(ShapeError):
        recon_loss(x, np.zeros((4, 4)))


def test_edge_kinds():
    assert Edge((1, LOCATION), (1, LATENT)).kind == "L"
    assert Edge((2, LOCATION), (1, LATENT)).kind == "CL"
    assert Edge((1, LOCATION), (2, LOCATION)).kind == "CS"
    assert Edge((2, LATENT), (1, LATENT)).kind == "S"
    for bad in [((1, LATENT), (1, LATENT)), ((1, LOCATION), (1, LOCATION)), ((1, LATENT), (2, LOCATION))]:
        with pytest.raises(ValueError):
            Edge(*bad)


def test_duplicate_edges_forbidden():
    e = Edge((1, LATENT), (2, LATENT))
    with pytest.raises(ValueError):
        ObjectiveGraph(edges=(e, e))


def test_named_presets_resolve_exactly():
    S = set(kind_edges("S"))
    assert set(preset("L").edges) == {Edge((1, LOCATION), (1, LATENT)), Edge((2, LOCATION), (2, LATENT))}
    assert set(preset("S").edges) == {Edge((1, LATENT), (2, LATENT)), Edge((2, LATENT), (1, LATENT))} == S
    assert set(preset("CL-CS").edges) == {
        Edge((1, LOCATION), (2, LATENT)), Edge((2, LOCATION), (1, LATENT)),
        Edge((1, LOCATION), (2, LOCATION)), Edge((2, LOCATION), (1, LOCATION)),
    }
    sae = preset("S-AE")
    assert set(sae.edges) == S and sae.recon > 0 and not sae.cca
    lcca = preset("L-CCA")
    assert set(lcca.edges) == set(preset("L").edges) and lcca.cca > 0 and not lcca.recon
    for name in PRESETS:
        assert not preset(name).is_empty


def test_unknown_preset_lists_valid_names():
    with pytest.raises(KeyError) as err:
        preset("XYZ")
    assert "S-AE" in str(err.value)


def test_graph_json_round_trip():
    g = preset("L-CCA")
    assert ObjectiveGraph.from_json(g.to_json()) == g
    assert ObjectiveGraph.from_json({"preset": "S"}) == preset("S")


def _outputs(rng, n=6, L=4):
    return EncoderOutput(Tensor(rng.normal(size=(n, L, 64))), Tensor(rng.normal(size=(n, 64))))


def _identity_heads():
    eye = np.eye(64)
    heads = {}
    for m in (1, 2):
        heads.update({f"phi{m}.0.W": Tensor(eye), f"phi{m}.0.b": Tensor(np.zeros(64)),
                      f"phi{m}.1.W": Tensor(eye), f"phi{m}.1.b": Tensor(np.zeros(64))})
    return heads


def test_build_loss_single_s_edge_is_infonce():
    rng = np.random.default_rng(12)
    outs = [_outputs(rng), _outputs(rng)]
    graph = ObjectiveGraph(edges=(Edge((1, LATENT), (2, LATENT)),))
    total, report = build_loss(graph, outs, {}, CFG)
    loss, bound = infonce(outs[0].latent, outs[1].latent, CFG)
    assert total.item() == pytest.approx(loss.item(), abs=1e-12)
    assert report.bounds["S12"] == pytest.approx(bound.item(), abs=1e-12)


def test_build_loss_preset_l_on_identical_outputs():
    rng = np.random.default_rng(13)
    out = _outputs(rng)
    heads = _identity_heads()
    total, report = build_loss(preset("L"), [out, out], heads, NO_PEN)
    assert report.bounds["L1"] == report.bounds["L2"]
    assert total.item() == pytest.approx(-2 * report.bounds["L1"], abs=1e-12)


def test_adding_edges_keeps_other_bounds():
    rng = np.random.default_rng(14)
    outs = [_outputs(rng), _outputs(rng)]
    heads = _identity_heads()
    _, small = build_loss(preset("S"), outs, heads, CFG)
    _, big = build_loss(preset("L-S"), outs, heads, CFG)
    for name, value in small.bounds.items():
        assert big.bounds[name] == value


def test_build_loss_empty_graph():
    with pytest.raises(ContractError):
        build_loss(ObjectiveGraph(), [], {}, CFG)
