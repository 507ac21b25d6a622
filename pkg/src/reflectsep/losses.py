"""Training objectives for the separator.

Conventions:

* Discriminator scores are clamped to ``[EPS, 1 - EPS]`` before any log.
* The discriminator minimizes ``-mean log D(real) - mean log(1 - D(fake))``;
  the generator minimizes the non-saturating ``-mean log D(fake)``.
* Pixel norms are per-element means (L1: mean absolute difference, L2: mean
  squared difference). Feature distances are the Euclidean norm of the
  flattened per-sample difference divided by the layer volume ``V_i``,
  averaged over the batch.
* Feature maps for the content terms come from a frozen snapshot of the
  encoder (:func:`networks.frozen_encoder`) unless a ``features`` callable is
  supplied.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from . import networks
from .networks import Variant

EPS = 1e-7

# Callables receiving a boolean tensor at every non-smooth point of a loss
# (L1 signs, score clamping); used by gradient checks to spot kinks.
KINK_OBSERVERS = []


def _observe(pattern):
    for fn in KINK_OBSERVERS:
        fn(pattern)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 100.0
    lambda2: float = 100.0


@dataclass
class LossReport:
    """Named loss terms, their weights, and the weighted total.

    ``discriminator`` holds the matching discriminator-side report (terms
    ``d_t``, ``d_r``) when it was computed.
    """

    terms: dict
    weights: dict
    total: torch.Tensor
    discriminator: LossReport | None = None

    @classmethod
    def build(cls, terms, weights, **kw):
        total = sum(weights[k] * terms[k] for k in terms)
        return cls(dict(terms), dict(weights), total, **kw)

    def values(self):
        out = {k: _scalar(v) for k, v in self.terms.items()}
        if self.discriminator is not None:
            out.update(self.discriminator.values())
            out.pop("total", None)
        out["total"] = _scalar(self.total)
        return out

    def recomputed_total(self):
        return sum(self.weights[k] * _scalar(v) for k, v in self.terms.items())

    def first_non_finite(self):
        """Name of the first non-finite term (or ``"total"``), else None."""
        for name, v in self.values().items():
            if not math.isfinite(v):
                return name
        return None


def _scalar(v):
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def _clamp(scores):
    if KINK_OBSERVERS:
        _observe((scores.detach() > EPS) & (scores.detach() < 1.0 - EPS))
    return scores.clamp(EPS, 1.0 - EPS)


def gan_d_loss(real_scores, fake_scores):
    real = _clamp(real_scores)
    fake = _clamp(fake_scores)
    return -torch.log(real).mean() - torch.log1p(-fake).mean()


def gan_g_loss(fake_scores):
    return -torch.log(_clamp(fake_scores)).mean()


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_term(a, b):
    _same_shape(a, b)
    diff = a - b
    if KINK_OBSERVERS:
        _observe(diff.detach() > 0)
    return diff.abs().mean()


def l2_term(a, b):
    _same_shape(a, b)
    return ((a - b) ** 2).mean()


def feature_distance(fa, fb):
    """Per-sample ``||fa - fb||_2 / V`` averaged over the batch; V = C*H*W."""
    _same_shape(fa, fb)
    diff = (fa - fb).flatten(1)
    return (torch.linalg.vector_norm(diff, dim=1) / diff.shape[1]).mean()


def content_loss(enc_fn, y, t, r, t_hat, r_hat, w_y):
    """Feature-space agreement between the observation, the targets and the outputs.

    For every encoder layer i (all five) sums, each divided by V_i:
    ``||f(y) - (w_y f(t_hat) + (1 - w_y) f(r_hat))||``, ``||f(t) - f(t_hat)||``
    and ``||f(r) - f(r_hat)||``.
    """
    for x in (t, r, t_hat, r_hat):
        _same_shape(y, x)
    fy, ft, fr, fth, frh = (enc_fn(x) for x in (y, t, r, t_hat, r_hat))
    w = w_y.reshape(-1, 1, 1, 1)
    total = y.new_zeros(())
    for a, b, c, d, e in zip(fy, ft, fr, fth, frh):
        mix = w * d + (1.0 - w) * e
        total = total + feature_distance(a, mix) + feature_distance(b, d) + feature_distance(c, e)
    return total


def _require(m, allowed, what):
    if m.variant not in allowed:
        names = "/".join(v.name for v in allowed)
        raise ValueError(f"{what} needs variant {names}, got {m.variant.name}")


def discriminator_report_supervised(m, y, t, r, t_hat, r_hat):
    cond = y if m.conditional else None
    terms = {
        "d_t": gan_d_loss(networks.discriminate(m, "t", t, cond),
                          networks.discriminate(m, "t", t_hat.detach(), cond)),
        "d_r": gan_d_loss(networks.discriminate(m, "r", r, cond),
                          networks.discriminate(m, "r", r_hat.detach(), cond)),
    }
    return LossReport.build(terms, {"d_t": 1.0, "d_r": 1.0})


def discriminator_report_weak(m, t_pool, r_pool, t_hat, r_hat):
    terms = {
        "d_t": gan_d_loss(networks.discriminate(m, "t", t_pool),
                          networks.discriminate(m, "t", t_hat.detach())),
        "d_r": gan_d_loss(networks.discriminate(m, "r", r_pool),
                          networks.discriminate(m, "r", r_hat.detach())),
    }
    return LossReport.build(terms, {"d_t": 1.0, "d_r": 1.0})


def loss_supervised(m, batch, weights=LossWeights(), outputs=None, features=None,
                    with_discriminator=True):
    """Generator objective for B1/B2/B3 on a batch ``(y, t, r)``.

    B1: adversarial(t) + adversarial(r) + lambda1 (L1_t + L1_r).
    B2: adds lambda1 L1_y. B3: adds lambda2 times the content loss.
    """
    _require(m, (Variant.B1, Variant.B2, Variant.B3), "loss_supervised")
    y, t, r = batch
    if outputs is None:
        outputs, _ = networks.forward(m, y)
    t_hat, r_hat = outputs["t_hat"], outputs["r_hat"]
    cond = y if m.conditional else None
    lam1, lam2 = weights.lambda1, weights.lambda2
    terms = {
        "adv_t": gan_g_loss(networks.discriminate(m, "t", t_hat, cond)),
        "adv_r": gan_g_loss(networks.discriminate(m, "r", r_hat, cond)),
        "l1_t": l1_term(t, t_hat),
        "l1_r": l1_term(r, r_hat),
    }
    w = {"adv_t": 1.0, "adv_r": 1.0, "l1_t": lam1, "l1_r": lam1}
    if m.variant in (Variant.B2, Variant.B3):
        terms["l1_y"] = l1_term(y, outputs["y_hat"])
        w["l1_y"] = lam1
    if m.variant is Variant.B3:
        enc_fn = features or networks.frozen_encoder(m)
        terms["content"] = content_loss(enc_fn, y, t, r, t_hat, r_hat, outputs["w_y"])
        w["content"] = lam2
    disc = None
    if with_discriminator:
        with torch.no_grad():
            disc = discriminator_report_supervised(m, y, t, r, t_hat, r_hat)
    return LossReport.build(terms, w, discriminator=disc)


def loss_weak(m, y_batch, t_pool, r_pool, weights=LossWeights(), outputs=None,
              features=None, with_discriminator=True):
    """Generator objective for the MASK variant without paired ground truth.

    ``t_pool`` and ``r_pool`` are real category images; they enter only the
    real side of the (unconditional) discriminator report.
    """
    _require(m, (Variant.MASK,), "loss_weak")
    y = y_batch
    if outputs is None:
        outputs, _ = networks.forward(m, y)
    t_hat, r_hat = outputs["t_hat"], outputs["r_hat"]
    mask, g_mt, g_mr = outputs["mask"], outputs["g_mt"], outputs["g_mr"]
    enc_fn = features or networks.frozen_encoder(m)
    y_t = mask * y
    y_r = (1.0 - mask) * y
    feat_mt = y.new_zeros(())
    feat_mr = y.new_zeros(())
    for a, b, c, d in zip(enc_fn(y_t), enc_fn(g_mt), enc_fn(y_r), enc_fn(g_mr)):
        feat_mt = feat_mt + feature_distance(a, b)
        feat_mr = feat_mr + feature_distance(c, d)
    lam1, lam2 = weights.lambda1, weights.lambda2
    terms = {
        "adv_t": gan_g_loss(networks.discriminate(m, "t", t_hat)),
        "adv_r": gan_g_loss(networks.discriminate(m, "r", r_hat)),
        "l2_y": l2_term(y, outputs["y_hat"]),
        "l2_mt": l2_term(y_t, g_mt),
        "l2_mr": l2_term(y_r, g_mr),
        "feat_mt": feat_mt,
        "feat_mr": feat_mr,
    }
    w = {"adv_t": 1.0, "adv_r": 1.0, "l2_y": lam1, "l2_mt": lam1, "l2_mr": lam1,
         "feat_mt": lam2, "feat_mr": lam2}
    disc = None
    if with_discriminator:
        with torch.no_grad():
            disc = discriminator_report_weak(m, t_pool, r_pool, t_hat, r_hat)
    return LossReport.build(terms, w, discriminator=disc)


def tsv_header(report):
    return "\t".join(["step", *report.values().keys()])


def tsv_line(step, report):
    return "\t".join([str(step), *(repr(v) for v in report.values().values())])
