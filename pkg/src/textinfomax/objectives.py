"""Intra-modality infoNCE, dual-space matching scores and the inter-modality losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoders import ConfigError, MultiscaleFeatures
from .numerics import RunningStats, Tensor

INTER_KINDS = ("ranking", "nce")

# (antecedent tap, consequent tap) pairs of the multiscale objective
SCALE_PAIRS = (("f1", "f5"), ("f1", "f7"), ("f5", "f5"))


class EmptyNegativesError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    lambda_inter: float = 1.0
    inter_kind: str = "ranking"
    use_local: bool = True
    use_v2t: bool = True
    use_bn: bool = True

    def validate(self) -> "LossConfig":
        if self.inter_kind not in INTER_KINDS:
            raise ConfigError(f"inter_kind must be one of {INTER_KINDS}, got {self.inter_kind!r}")
        if self.inter_kind == "ranking" and not self.alpha > 0:
            raise ConfigError("ranking loss needs alpha > 0")
        if not self.lambda_inter >= 0 or not math.isfinite(self.lambda_inter):
            raise ConfigError("lambda_inter must be a finite non-negative number")
        return self


# infoNCE -----------------------------------------------------------------------

def info_nce(pos_score: float, neg_scores: Sequence[float]) -> float:
    """``-log softmax`` probability of the positive among positive + negatives."""
    negs = np.asarray(list(neg_scores), dtype=np.float64)
    if negs.size == 0:
        raise EmptyNegativesError("info_nce needs at least one negative score")
    scores = np.concatenate([[float(pos_score)], negs])
    if not np.isfinite(scores).all():
        raise nx.NumericError("info_nce received non-finite scores")
    peak = scores.max()
    lse = peak + math.log(np.exp(scores - peak).sum())
    return max(lse - float(pos_score), 0.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _flatten_locations(x: Tensor) -> Tensor:
    # [B, D] -> [B, D, 1]; [B, D, H, W] -> [B, D, H*W]
    if x.ndim == 2:
        return x.reshape(x.shape[0], x.shape[1], 1)
    return x.reshape(x.shape[0], x.shape[1], x.shape[2] * x.shape[3])


def _location_scores(antecedent: Tensor, consequent: Tensor) -> Tensor:
    """Scores [L, B, B]: entry (l, n, m) = antecedent_n(l) . consequent_m(l).

    A global antecedent (one location) is shared across all consequent locations.
    """
    a = _flatten_locations(antecedent).transpose(2, 0, 1)  # [La, B, D]
    c = _flatten_locations(consequent).transpose(2, 1, 0)  # [L, D, B]
    return nx.matmul(a, c)


def _row_nce(scores: Tensor) -> Tensor:
    """Per-row infoNCE over the last axis with the diagonal as positive."""
    b = scores.shape[-1]
    eye = np.eye(b, dtype=scores.dtype)
    pos = (scores * eye).sum(axis=-1)
    return nx.logsumexp(scores, axis=-1) - pos


def intra_infomax_loss(feats1: MultiscaleFeatures, feats2: MultiscaleFeatures) -> Tensor:
    """Multiscale infoNCE between two augmented views of one image batch.

    For each of the 1-to-5, 1-to-7 and 5-to-5 pairs, the antecedent of one
    view is scored against the consequent at every location of the other view;
    the other images' consequents at the same location are the negatives.
    Both view orders contribute. Each pair is averaged over its terms and the
    pair losses are averaged.
    """
    b = feats1.batch_size
    if b < 2 or feats2.batch_size != b:
        raise EmptyNegativesError("intra loss needs matching batches of at least 2 images")
    pair_losses = []
    for ante, cons in SCALE_PAIRS:
        forward = _row_nce(_location_scores(getattr(feats1, ante), getattr(feats2, cons)))
        swapped = _row_nce(_location_scores(getattr(feats2, ante), getattr(feats1, cons)))
        pair_losses.append((forward.mean() + swapped.mean()) * 0.5)
    total = pair_losses[0]
    for extra in pair_losses[1:]:
        total = total + extra
    return total * (1.0 / len(pair_losses))


# projection heads -----------------------------------------------------------------

def _bn_params(prefix, dim, dtype):
    return {
        f"{prefix}.gamma": Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
        f"{prefix}.beta": Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
    }


class ProjectionHeads:
    """Maps carrying text and visual vectors into the image and text scoring spaces.

    image space: text -> linear(d_t -> nrkhs) -> BN; visual -> BN
    text space:  text -> BN;                        visual -> linear(nrkhs -> d_t) -> BN
    With ``use_bn`` false every BN stage is the identity.
    """

    BN_STAGES = ("bn_t_img", "bn_v_img", "bn_t_txt", "bn_v_txt")

    def __init__(self, params: dict[str, Tensor], running: dict[str, RunningStats], text_dim: int,
                 nrkhs: int, use_bn: bool = True, eps: float = 1e-5):
        self.params = params
        self.running = running
        self.text_dim = text_dim
        self.nrkhs = nrkhs
        self.use_bn = use_bn
        self.eps = eps
        self.mode = "train"

    @classmethod
    def create(cls, text_dim: int, nrkhs: int, seed: int = 0, use_bn: bool = True, dtype=np.float64):
        rng = np.random.default_rng(seed)
        params = {
            "W_t_img.w": Tensor(rng.uniform(-1, 1, (nrkhs, text_dim)).astype(dtype) / math.sqrt(text_dim), requires_grad=True),
            "W_t_img.b": Tensor(np.zeros(nrkhs, dtype=dtype), requires_grad=True),
            "W_v_txt.w": Tensor(rng.uniform(-1, 1, (text_dim, nrkhs)).astype(dtype) / math.sqrt(nrkhs), requires_grad=True),
            "W_v_txt.b": Tensor(np.zeros(text_dim, dtype=dtype), requires_grad=True),
        }
        dims = {"bn_t_img": nrkhs, "bn_v_img": nrkhs, "bn_t_txt": text_dim, "bn_v_txt": text_dim}
        running = {}
        if use_bn:
            for stage, dim in dims.items():
                params.update(_bn_params(stage, dim, dtype))
                running[stage] = RunningStats.create(dim, dtype)
        return cls(params, running, text_dim, nrkhs, use_bn)

    def train(self) -> "ProjectionHeads":
        self.mode = "train"
        return self

    def eval(self) -> "ProjectionHeads":
        self.mode = "eval"
        return self

    def _bn(self, stage: str, x: Tensor) -> Tensor:
        if not self.use_bn:
            return x
        return nx.batch_norm(x, self.params[f"{stage}.gamma"], self.params[f"{stage}.beta"],
                             eps=self.eps, mode=self.mode, running=self.running[stage])

    def text_to_image_space(self, t: Tensor) -> Tensor:
        return self._bn("bn_t_img", nx.linear(t, self.params["W_t_img.w"], self.params["W_t_img.b"]))

    def visual_to_image_space(self, v: Tensor) -> Tensor:
        return self._bn("bn_v_img", v)

    def text_to_text_space(self, t: Tensor) -> Tensor:
        return self._bn("bn_t_txt", t)

    def visual_to_text_space(self, v: Tensor) -> Tensor:
        return self._bn("bn_v_txt", nx.linear(v, self.params["W_v_txt.w"], self.params["W_v_txt.b"]))

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for stage, rs in self.running.items():
            out[f"{stage}.running_mean"] = rs.mean
            out[f"{stage}.running_var"] = rs.var
        return out


def _check_batch(t: Tensor, v: Tensor, heads: ProjectionHeads):
    if t.ndim != 2 or v.ndim != 2 or t.shape[0] != v.shape[0]:
        raise nx.DimensionError(f"text {t.shape} and visual {v.shape} batches are not row-aligned")
    if heads.use_bn and heads.mode == "train" and t.shape[0] < 2:
        raise nx.DegenerateBatchError("batch-norm heads need at least 2 rows in train mode")


def match_score_image_space(heads: ProjectionHeads, t, v, _t_proj: Tensor | None = None) -> Tensor:
    """S[m, n] = f_t^img(t_m) . f_v^img(v_n)."""
    t, v = _as_tensor(t), _as_tensor(v)
    _check_batch(t, v, heads)
    tp = heads.text_to_image_space(t) if _t_proj is None else _t_proj
    return nx.matmul(tp, heads.visual_to_image_space(v).T)


def match_score_text_space(heads: ProjectionHeads, t, v, _t_proj: Tensor | None = None) -> Tensor:
    """S[m, n] = f_t^txt(t_m) . f_v^txt(v_n)."""
    t, v = _as_tensor(t), _as_tensor(v)
    _check_batch(t, v, heads)
    tp = heads.text_to_text_space(t) if _t_proj is None else _t_proj
    return nx.matmul(tp, heads.visual_to_text_space(v).T)


# ranking ------------------------------------------------------------------------

def _square(scores: Tensor) -> Tensor:
    scores = _as_tensor(scores)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise nx.DimensionError(f"score matrix must be square, got {scores.shape}")
    return scores


def pairwise_ranking_directional(score_matrix, alpha: float) -> Tensor:
    """Sum over rows m and off-diagonal k of ``max(0, alpha - S[m,m] + S[m,k])``.

    Rows are queries, the diagonal holds positives. Pass the transpose for the
    opposite retrieval direction.
    """
    s = _square(score_matrix)
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    b = s.shape[0]
    eye = np.eye(b, dtype=s.dtype)
    pos = (s * eye).sum(axis=1, keepdims=True)
    hinge = nx.relu((s - pos) + alpha)
    return (hinge * (1.0 - eye)).sum()


def nce_directional(score_matrix) -> Tensor:
    """Sum over rows of infoNCE with the diagonal entry as positive."""
    return _row_nce(_square(score_matrix)).sum()


def visual_vectors(feats: MultiscaleFeatures, use_local: bool) -> list[tuple[str, Tensor]]:
    """Global vector plus, optionally, spatial means of the two local taps."""
    out = [("f1", feats.f1)]
    if use_local:
        out.append(("f5", feats.f5.mean(axis=(2, 3))))
        out.append(("f7", feats.f7.mean(axis=(2, 3))))
    return out


def score_matrices(heads: ProjectionHeads, t, feats: MultiscaleFeatures, cfg: LossConfig) -> list[tuple[str, Tensor]]:
    """Every (space, feature) score matrix the inter loss consumes, labelled."""
    t = _as_tensor(t)
    b = t.shape[0]
    if b < 2:
        raise EmptyNegativesError("inter loss needs at least 2 pairs")
    if feats.batch_size != b:
        raise nx.DimensionError("text and visual batches differ in size")
    vecs = visual_vectors(feats, cfg.use_local)
    t_img = heads.text_to_image_space(t)
    mats = [(f"img/{name}", match_score_image_space(heads, t, v, _t_proj=t_img)) for name, v in vecs]
    if cfg.use_v2t:
        t_txt = heads.text_to_text_space(t)
        mats += [(f"txt/{name}", match_score_text_space(heads, t, v, _t_proj=t_txt)) for name, v in vecs]
    return mats


def inter_term_count(cfg: LossConfig) -> int:
    """Number of directional loss terms (matrix, direction) the inter loss sums."""
    n_vis = 3 if cfg.use_local else 1
    n_space = 2 if cfg.use_v2t else 1
    return 2 * n_vis * n_space


def inter_modality_loss(heads: ProjectionHeads, t, visual_feats: MultiscaleFeatures, cfg: LossConfig) -> Tensor:
    """Bidirectional text/visual loss summed over spaces and visual vectors.

    Each score matrix contributes its text-to-visual rows and, through its
    transpose, its visual-to-text rows. The total is divided by the number of
    hinge terms (ranking) or rows (nce) so the value does not scale with batch
    size.
    """
    mats = score_matrices(heads, t, visual_feats, cfg)
    b = mats[0][1].shape[0]
    total = None
    for _, s in mats:
        for directed in (s, s.T):
            if cfg.inter_kind == "ranking":
                term = pairwise_ranking_directional(directed, cfg.alpha)
            else:
                term = nce_directional(directed)
            total = term if total is None else total + term
    per_matrix = b * (b - 1) if cfg.inter_kind == "ranking" else b
    return total * (1.0 / (2 * len(mats) * per_matrix))


def total_loss(intra, inter, cfg: LossConfig):
    """``intra + lambda_inter * inter``; works on tensors or plain floats."""
    for part in (intra, inter):
        val = part.data if isinstance(part, Tensor) else np.asarray(part)
        if not np.isfinite(val).all():
            raise nx.NumericError("total_loss received a non-finite component")
    if isinstance(intra, Tensor) or isinstance(inter, Tensor):
        return _as_tensor(intra) + _as_tensor(inter) * cfg.lambda_inter
    return float(intra) + cfg.lambda_inter * float(inter)
