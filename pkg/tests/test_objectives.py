import math

import numpy as np
import pytest

import oracles
from textinfomax import numerics as nx
from textinfomax.encoders import ConfigError, ImageEncoderConfig, MultiscaleFeatures, build_image_encoder, encode_image
from textinfomax.numerics import Tensor, check_gradients
from textinfomax.objectives import (
    EmptyNegativesError,
    LossConfig,
    ProjectionHeads,
    info_nce,
    inter_modality_loss,
    inter_term_count,
    intra_infomax_loss,
    match_score_image_space,
    match_score_text_space,
    pairwise_ranking_directional,
    score_matrices,
    total_loss,
)


def random_feats(rng, b, d, scale=1.0):
    return MultiscaleFeatures(
        f1=Tensor(rng.standard_normal((b, d)) * scale, requires_grad=True),
        f5=Tensor(rng.standard_normal((b, d, 5, 5)) * scale, requires_grad=True),
        f7=Tensor(rng.standard_normal((b, d, 7, 7)) * scale, requires_grad=True),
    )


def as_arrays(feats):
    return {k: v.data for k, v in feats.taps().items()}


def random_heads(rng, d_t, nrkhs, use_bn):
    heads = ProjectionHeads.create(d_t, nrkhs, seed=int(rng.integers(1 << 30)), use_bn=use_bn)
    if use_bn:
        for stage in ProjectionHeads.BN_STAGES:
            heads.params[f"{stage}.gamma"].data = rng.uniform(0.5, 1.5, heads.params[f"{stage}.gamma"].shape)
            heads.params[f"{stage}.beta"].data = rng.normal(0, 0.3, heads.params[f"{stage}.beta"].shape)
    return heads


# info_nce -------------------------------------------------------------------------

def test_info_nce_uniform_two_way():
    assert abs(info_nce(1.0, [1.0]) - math.log(2)) <= 1e-12


def test_info_nce_confident():
    assert info_nce(10.0, [0.0]) == pytest.approx(math.log1p(math.exp(-10.0)), rel=1e-12)
    assert info_nce(10.0, [0.0]) == pytest.approx(4.54e-5, rel=1e-3)


def test_info_nce_shift_invariance():
    assert info_nce(0.3, [1.2, -0.4]) == pytest.approx(info_nce(100.3, [101.2, 99.6]), abs=1e-12)


def test_info_nce_needs_negatives():
    with pytest.raises(EmptyNegativesError):
        info_nce(1.0, [])


def test_info_nce_large_scores_stable():
    assert info_nce(1000.0, [999.0]) == pytest.approx(math.log1p(math.exp(-1.0)), rel=1e-12)


# intra ----------------------------------------------------------------------------

@pytest.mark.parametrize("b", [2, 3, 5])
def test_intra_uniform_case(b):
    rng = np.random.default_rng(b)
    one = random_feats(rng, 1, 4)
    feats = MultiscaleFeatures(*(Tensor(np.repeat(t.data, b, axis=0)) for t in (one.f1, one.f5, one.f7)))
    assert abs(intra_infomax_loss(feats, feats).item() - math.log(b)) <= 1e-12


def test_intra_hand_case_matches_brute_force():
    rng = np.random.default_rng(11)
    f1, f2 = random_feats(rng, 2, 3), random_feats(rng, 2, 3)
    got = intra_infomax_loss(f1, f2).item()
    assert abs(got - oracles.intra_loss(as_arrays(f1), as_arrays(f2))) <= 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_intra_random_cases(seed):
    rng = np.random.default_rng(100 + seed)
    b, d = int(rng.integers(2, 5)), int(rng.integers(1, 9))
    f1, f2 = random_feats(rng, b, d, 0.5), random_feats(rng, b, d, 0.5)
    assert abs(intra_infomax_loss(f1, f2).item() - oracles.intra_loss(as_arrays(f1), as_arrays(f2))) <= 1e-9


def test_intra_batch_permutation_invariance():
    rng = np.random.default_rng(5)
    f1, f2 = random_feats(rng, 4, 3), random_feats(rng, 4, 3)
    perm = np.array([2, 0, 3, 1])
    p1 = MultiscaleFeatures(*(Tensor(t.data[perm]) for t in (f1.f1, f1.f5, f1.f7)))
    p2 = MultiscaleFeatures(*(Tensor(t.data[perm]) for t in (f2.f1, f2.f5, f2.f7)))
    assert intra_infomax_loss(f1, f2).item() == pytest.approx(intra_infomax_loss(p1, p2).item(), abs=1e-12)


def test_intra_view_symmetry():
    rng = np.random.default_rng(6)
    f1, f2 = random_feats(rng, 3, 4), random_feats(rng, 3, 4)
    assert intra_infomax_loss(f1, f2).item() == pytest.approx(intra_infomax_loss(f2, f1).item(), abs=1e-12)


def test_intra_needs_two_images():
    f = random_feats(np.random.default_rng(0), 1, 3)
    with pytest.raises(EmptyNegativesError):
        intra_infomax_loss(f, f)


def test_intra_gradients():
    rng = np.random.default_rng(7)
    f1, f2 = random_feats(rng, 3, 2, 0.5), random_feats(rng, 3, 2, 0.5)
    params = [f1.f1, f1.f5, f1.f7, f2.f1, f2.f5, f2.f7]
    assert check_gradients(lambda: intra_infomax_loss(f1, f2), params) <= 1e-4


# score matrices --------------------------------------------------------------------

def test_image_space_orthogonal_rows():
    heads = ProjectionHeads.create(2, 2, use_bn=False)
    heads.params["W_t_img.w"].data = np.eye(2)
    t = np.array([[1.0, 0.0], [0.0, 1.0]])
    v = np.array([[2.0, 0.0], [0.0, 3.0]])
    s = match_score_image_space(heads, t, v).data
    assert s[0, 1] == 0 and s[1, 0] == 0
    assert s[0, 0] == 2 and s[1, 1] == 3


def test_image_space_gram_symmetry():
    heads = ProjectionHeads.create(3, 3, use_bn=False)
    heads.params["W_t_img.w"].data = np.eye(3)
    x = np.random.default_rng(0).standard_normal((4, 3))
    s = match_score_image_space(heads, x, x).data
    np.testing.assert_allclose(s, s.T, atol=1e-15)


def test_text_space_zero_map():
    heads = ProjectionHeads.create(3, 4, use_bn=False)
    heads.params["W_v_txt.w"].data[:] = 0.0
    rng = np.random.default_rng(1)
    s = match_score_text_space(heads, rng.standard_normal((3, 3)), rng.standard_normal((3, 4))).data
    assert np.all(s == 0.0)


@pytest.mark.parametrize("use_bn", [False, True])
@pytest.mark.parametrize("seed", range(3))
def test_scores_match_double_loop(use_bn, seed):
    rng = np.random.default_rng(seed)
    b, d_t, d = 4, 5, 3
    heads = random_heads(rng, d_t, d, use_bn)
    t, v = rng.standard_normal((b, d_t)), rng.standard_normal((b, d))
    params = {k: p.data for k, p in heads.params.items()}
    t_img, v_img, t_txt, v_txt = oracles.project(params, use_bn, heads.eps, t, v)
    np.testing.assert_allclose(match_score_image_space(heads, t, v).data, oracles.score(t_img, v_img), atol=1e-9)
    np.testing.assert_allclose(match_score_text_space(heads, t, v).data, oracles.score(t_txt, v_txt), atol=1e-9)


def test_degenerate_batch_in_train_mode():
    heads = ProjectionHeads.create(3, 3, use_bn=True)
    with pytest.raises(nx.DegenerateBatchError):
        match_score_image_space(heads, np.ones((1, 3)), np.ones((1, 3)))


def test_use_v2t_off_never_builds_text_space(monkeypatch):
    calls = []
    import textinfomax.objectives as obj

    monkeypatch.setattr(obj, "match_score_text_space", lambda *a, **k: calls.append(1))
    rng = np.random.default_rng(0)
    heads = ProjectionHeads.create(4, 3)
    inter_modality_loss(heads, rng.standard_normal((3, 4)), random_feats(rng, 3, 3), LossConfig(use_v2t=False))
    assert calls == []


# ranking ---------------------------------------------------------------------------

def test_ranking_row_example():
    # row 0: pos 0.9, negatives 0.2 and 0.5 with alpha 0.5 -> 0 + 0.1
    s = np.array([[0.9, 0.2, 0.5], [-5.0, 5.0, -5.0], [-5.0, -5.0, 5.0]])
    assert pairwise_ranking_directional(s, 0.5).item() == pytest.approx(0.1, abs=1e-12)


def test_ranking_margin_satisfied():
    s = np.array([[2.0, 1.0, 1.4], [0.0, 1.6, 1.0], [-1.0, 0.0, 0.5]])
    assert pairwise_ranking_directional(s, 0.5).item() == 0.0


@pytest.mark.parametrize("b", [2, 3, 6])
def test_ranking_all_equal(b):
    s = np.full((b, b), 0.37)
    assert abs(pairwise_ranking_directional(s, 0.5).item() - b * (b - 1) * 0.5) <= 1e-12


def test_ranking_non_square():
    with pytest.raises(nx.DimensionError):
        pairwise_ranking_directional(np.zeros((2, 3)), 0.5)


# inter -------------------------------------------------------------------------------

def test_term_counts():
    assert inter_term_count(LossConfig(use_local=False, use_v2t=False)) == 2
    assert inter_term_count(LossConfig(use_local=True, use_v2t=False)) == 6
    assert inter_term_count(LossConfig(use_local=False, use_v2t=True)) == 4
    assert inter_term_count(LossConfig()) == 12
    rng = np.random.default_rng(0)
    heads = ProjectionHeads.create(4, 3)
    mats = score_matrices(heads, rng.standard_normal((3, 4)), random_feats(rng, 3, 3),
                          LossConfig(use_local=False, use_v2t=False))
    assert [name for name, _ in mats] == ["img/f1"]


@pytest.mark.parametrize("kind", ["ranking", "nce"])
@pytest.mark.parametrize("use_local", [False, True])
@pytest.mark.parametrize("use_v2t", [False, True])
@pytest.mark.parametrize("use_bn", [False, True])
def test_inter_matches_brute_force(kind, use_local, use_v2t, use_bn):
    rng = np.random.default_rng(hash((kind, use_local, use_v2t, use_bn)) % (1 << 32))
    b, d_t, d = 2, 3, 4
    heads = random_heads(rng, d_t, d, use_bn)
    t = rng.standard_normal((b, d_t))
    feats = random_feats(rng, b, d)
    cfg = LossConfig(alpha=0.5, inter_kind=kind, use_local=use_local, use_v2t=use_v2t, use_bn=use_bn)
    got = inter_modality_loss(heads, t, feats, cfg).item()
    params = {k: p.data for k, p in heads.params.items()}
    ref = oracles.inter_loss(params, use_bn, heads.eps, t, as_arrays(feats), 0.5, kind, use_local, use_v2t)
    assert abs(got - ref) <= 1e-9


@pytest.mark.parametrize("kind", ["ranking", "nce"])
def test_score_shift_invariance(kind):
    rng = np.random.default_rng(3)
    s = rng.standard_normal((4, 4))
    if kind == "ranking":
        f = lambda m: pairwise_ranking_directional(m, 0.5).item()
    else:
        from textinfomax.objectives import nce_directional
        f = lambda m: nce_directional(m).item()
    assert f(s) == pytest.approx(f(s + 2.75), abs=1e-12)


@pytest.mark.parametrize("kind", ["ranking", "nce"])
def test_inter_gradients(kind):
    rng = np.random.default_rng(8)
    heads = random_heads(rng, 3, 4, True)
    t = rng.standard_normal((3, 3))
    feats = random_feats(rng, 3, 4)
    cfg = LossConfig(inter_kind=kind)
    params = list(heads.params.values()) + [feats.f1, feats.f5, feats.f7]
    assert check_gradients(lambda: inter_modality_loss(heads, t, feats, cfg), params) <= 1e-4


def test_inter_needs_two_pairs():
    rng = np.random.default_rng(0)
    with pytest.raises(EmptyNegativesError):
        inter_modality_loss(ProjectionHeads.create(3, 3, use_bn=False), rng.standard_normal((1, 3)),
                            random_feats(rng, 1, 3), LossConfig(use_bn=False))


# total ---------------------------------------------------------------------------------

def test_total_loss_arithmetic():
    assert total_loss(0.7, 0.3, LossConfig(lambda_inter=1.0)) == pytest.approx(1.0, abs=1e-15)
    assert total_loss(0.7, 0.3, LossConfig(lambda_inter=0.0)) == 0.7


def test_total_loss_rejects_non_finite():
    with pytest.raises(nx.NumericError):
        total_loss(float("nan"), 0.1, LossConfig())


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(alpha=0.0).validate()
    with pytest.raises(ConfigError):
        LossConfig(inter_kind="jsd").validate()
    with pytest.raises(ConfigError):
        LossConfig(lambda_inter=-1).validate()
    LossConfig(alpha=0.0, inter_kind="nce").validate()


def test_total_gradient_is_sum_of_parts():
    """Tape gradient of intra + inter w.r.t. shared encoder weights, checked by differences."""
    rng = np.random.default_rng(9)
    enc = build_image_encoder(ImageEncoderConfig(ndf=8, nrkhs=8, input_size=32), seed=1)
    heads = random_heads(rng, 5, 8, True)
    v1, v2 = rng.random((2, 3, 32, 32)), rng.random((2, 3, 32, 32))
    t = rng.standard_normal((2, 5))
    cfg = LossConfig()
    w = enc.params["proj.f1.w"]

    def part(which):
        f1, f2 = encode_image(enc, v1), encode_image(enc, v2)
        intra = intra_infomax_loss(f1, f2)
        inter = inter_modality_loss(heads, t, f1, cfg)
        return {"intra": intra, "inter": inter, "total": total_loss(intra, inter, cfg)}[which]

    grads = {}
    for which in ("intra", "inter", "total"):
        w.grad = None
        part(which).backward()
        grads[which] = w.grad.copy()
    np.testing.assert_allclose(grads["total"], grads["intra"] + grads["inter"], rtol=1e-10, atol=1e-12)
    coords = range(0, w.size, 7)
    numeric = nx.numerical_gradient(lambda: part("total"), w, 1e-5, coords)
    assert nx.relative_error(grads["total"], numeric, 1e-6) <= 1e-4
