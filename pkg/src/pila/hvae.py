"""Hybrid variational autoencoder baseline.

The baseline couples the physical decoder to a flexible neural pathway:
an unmixing loop rescales the raw observation elementwise before physical
encoding, a neural decoder turns [Z_aux || Z_phy] into auxiliary features,
and a nonlinear combiner merges physical and auxiliary reconstructions.
Four regularizers ride on top of the reconstruction error: unmixing
alignment, synthetic-data encoder consistency, residual magnitude, and a
variational prior.

The prior machinery reproduces the published convention, quirks included:
the physical mean goes through a SoftPlus, samples are clamped to [0, 1]
before the physical model, and the Gaussian KL is taken against
N(0.5, 0.866^2 I) on the unclamped distribution. The KL weight defaults to
e^-9, small enough that the prior barely binds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import mogi
from .nets import (
    FEATURE_DIM,
    Standardizer,
    affine,
    check_finite_rows,
    feature_extractor,
    feature_extractor_init,
    linear_init,
)

N_PHYSICAL = 4

PHY_PRIOR_MEAN = 0.5
PHY_PRIOR_STD = 0.866

COMBINER_OUT_STD = 1e-3


@dataclass
class HvaeLossWeights:
    """KL weight plus the three regularizer weights.

    The lambdas are calibrated during training so each scaled term sits
    roughly one order of magnitude below the reconstruction loss, then
    frozen; they start at zero during the warmup epochs.
    """

    beta: float = math.exp(-9)
    lambda_unmix: float = 0.0
    lambda_syn: float = 0.0
    lambda_res: float = 0.0

    def __post_init__(self):
        for name in ("beta", "lambda_unmix", "lambda_syn", "lambda_res"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def _gaussian_kl(mu: dc.Tensor, logvar: dc.Tensor, prior_mean: float,
                 prior_std: float) -> dc.Tensor:
    """KL(N(mu, sigma^2) || N(prior_mean, prior_std^2)), summed per sample,
    averaged over the batch."""
    n = mu.shape[0]
    var = dc.exp(logvar)
    quad = dc.add(var, dc.square(dc.sub(mu, prior_mean)))
    elem = dc.add(
        dc.sub(math.log(prior_std), dc.mul(logvar, 0.5)),
        dc.sub(dc.mul(quad, 1.0 / (2.0 * prior_std ** 2)), 0.5),
    )
    return dc.mul(dc.tsum(elem), 1.0 / n)


class HvaeModel:
    """Unmixing loop, variational heads, auxiliary decoder, and combiner."""

    def __init__(self, geometry: mogi.StationGeometry, rank: int,
                 standardizer: Standardizer,
                 bounds: mogi.VariableBounds | None = None,
                 nu: float = 0.25,
                 rng: np.random.Generator | None = None,
                 params: dict | None = None):
        d_obs = geometry.n_obs
        if rank < 1 or rank > d_obs // 2:
            raise ValueError(f"rank must satisfy 1 <= r <= d_obs/2 = {d_obs // 2}, got {rank}")
        self.geometry = geometry
        self.d_obs = d_obs
        self.rank = rank
        self.bounds = bounds or mogi.VariableBounds()
        self.nu = nu
        self.standardizer = standardizer
        self.params = params if params is not None else self._init_params(rng)

    def _init_params(self, rng: np.random.Generator) -> dict:
        if rng is None:
            raise ValueError("an RNG is required to initialize parameters")
        d, r = self.d_obs, self.rank
        params: dict = {}
        feature_extractor_init(rng, d, params)
        params["unmix_w"], params["unmix_b"] = linear_init(rng, FEATURE_DIM, d)
        # identity unmixing at init: alpha ~ 1 everywhere
        params["unmix_b"] = dc.Tensor(np.ones(d))
        params["phy_mu_w"], params["phy_mu_b"] = linear_init(rng, FEATURE_DIM, N_PHYSICAL)
        params["phy_lv_w"], params["phy_lv_b"] = linear_init(rng, FEATURE_DIM, N_PHYSICAL)
        params["aux_mu_w"], params["aux_mu_b"] = linear_init(rng, FEATURE_DIM, r)
        params["aux_lv_w"], params["aux_lv_b"] = linear_init(rng, FEATURE_DIM, r)
        params["daux_w1"], params["daux_b1"] = linear_init(rng, N_PHYSICAL + r, FEATURE_DIM)
        params["daux_w2"], params["daux_b2"] = linear_init(rng, FEATURE_DIM, d)
        # combiner: near-identity skip on the physical block plus a small
        # nonlinear correction, so X_C ~ X_F at init
        skip = np.concatenate([np.eye(d), np.zeros((d, d))], axis=0)
        params["comb_skip"] = dc.Tensor(skip)
        params["comb_w1"], params["comb_b1"] = linear_init(rng, 2 * d, FEATURE_DIM)
        params["comb_w2"], params["comb_b2"] = linear_init(
            rng, FEATURE_DIM, d, std=COMBINER_OUT_STD)
        return params

    # -- forward ---------------------------------------------------------------

    def _sample(self, mu: dc.Tensor, logvar: dc.Tensor, rng, sample: bool) -> dc.Tensor:
        if not sample:
            return mu
        noise = rng.standard_normal(mu.shape)
        return dc.add(mu, dc.mul(dc.exp(dc.mul(logvar, 0.5)), dc.Tensor(noise)))

    def _check(self, stage: str, t: dc.Tensor):
        if not np.all(np.isfinite(t.data)):
            raise FloatingPointError(f"non-finite values at stage {stage!r}")

    def forward(self, x_raw: np.ndarray, rng=None, sample: bool = False) -> dict:
        x_raw = np.asarray(x_raw, dtype=np.float64)
        check_finite_rows(x_raw, "hvae forward")
        x = dc.Tensor(x_raw)
        x_std = dc.Tensor(self.standardizer.apply(x_raw))

        feat = feature_extractor(x_std, self.params)
        alpha = affine(feat, self.params["unmix_w"], self.params["unmix_b"])
        self._check("unmix coefficients", alpha)
        x_unmix = dc.mul(alpha, x)

        feat_unmix = feature_extractor(self.standardizer.apply_tape(x_unmix), self.params)
        mu_phy = dc.softplus(affine(feat_unmix, self.params["phy_mu_w"],
                                    self.params["phy_mu_b"]))
        lv_phy = affine(feat_unmix, self.params["phy_lv_w"], self.params["phy_lv_b"])
        z_phy = dc.clamp(self._sample(mu_phy, lv_phy, rng, sample), 0.0, 1.0)

        xf = mogi.decode_tape(mogi.rescale_tape(z_phy, self.bounds),
                              self.geometry, nu=self.nu)
        self._check("physical reconstruction", xf)

        mu_aux = affine(feat, self.params["aux_mu_w"], self.params["aux_mu_b"])
        lv_aux = affine(feat, self.params["aux_lv_w"], self.params["aux_lv_b"])
        z_aux = self._sample(mu_aux, lv_aux, rng, sample)

        hidden = dc.tanh(affine(dc.concat_last([z_aux, z_phy]),
                                self.params["daux_w1"], self.params["daux_b1"]))
        x_aux = affine(hidden, self.params["daux_w2"], self.params["daux_b2"])
        self._check("auxiliary features", x_aux)

        joint = dc.concat_last([xf, x_aux])
        xc = dc.add(
            dc.matmul(joint, self.params["comb_skip"]),
            affine(dc.tanh(affine(joint, self.params["comb_w1"], self.params["comb_b1"])),
                   self.params["comb_w2"], self.params["comb_b2"]),
        )
        self._check("combined reconstruction", xc)
        return dict(x=x, alpha=alpha, x_unmix=x_unmix,
                    mu_phy=mu_phy, lv_phy=lv_phy, z_phy=z_phy,
                    mu_aux=mu_aux, lv_aux=lv_aux, z_aux=z_aux,
                    xf=xf, x_aux=x_aux, xc=xc)

    def encode_physical_mean(self, x_raw: np.ndarray) -> dc.Tensor:
        """Deterministic physical encoding of clean inputs (no unmix loop)."""
        x_std = dc.Tensor(self.standardizer.apply(np.asarray(x_raw, dtype=np.float64)))
        feat = feature_extractor(x_std, self.params)
        return dc.softplus(affine(feat, self.params["phy_mu_w"], self.params["phy_mu_b"]))

    # -- losses -----------------------------------------------------------------

    def losses(self, parts: dict, sampler_rng: np.random.Generator) -> dict:
        """All loss terms for one batch, as tape tensors.

        The synthetic-consistency term draws its own uniform physical
        variables, decodes them with the forward model, and asks the encoder
        to recover them; it never touches the observed batch.
        """
        x = parts["x"]
        n = x.shape[0]

        def sq_norm(t):
            # batch-averaged squared L2 norm per sample
            return dc.mul(dc.tsum(dc.square(t)), 1.0 / n)

        rec = sq_norm(dc.sub(x, parts["xc"]))
        unmix = sq_norm(dc.sub(parts["x_unmix"], parts["xf"]))
        res = sq_norm(dc.sub(parts["xc"], parts["xf"]))

        z_syn = sampler_rng.random((n, N_PHYSICAL))
        xf_syn = mogi.forward_batch(mogi.rescale(z_syn, self.bounds),
                                    self.geometry, nu=self.nu)
        z_hat = self.encode_physical_mean(xf_syn)
        syn = sq_norm(dc.sub(dc.Tensor(z_syn), z_hat))

        prior = dc.add(
            _gaussian_kl(parts["mu_phy"], parts["lv_phy"], PHY_PRIOR_MEAN, PHY_PRIOR_STD),
            _gaussian_kl(parts["mu_aux"], parts["lv_aux"], 0.0, 1.0),
        )
        return dict(rec=rec, unmix=unmix, syn=syn, res=res, prior=prior)

    def total_loss(self, losses: dict, weights: HvaeLossWeights):
        """Weighted objective plus a breakdown whose total is the exact sum
        of the recorded weighted terms."""
        total = dc.add(losses["rec"], dc.mul(losses["prior"], weights.beta))
        total = dc.add(total, dc.mul(losses["unmix"], weights.lambda_unmix))
        total = dc.add(total, dc.mul(losses["syn"], weights.lambda_syn))
        total = dc.add(total, dc.mul(losses["res"], weights.lambda_res))
        breakdown = {
            "rec": float(losses["rec"].data),
            "prior": float(losses["prior"].data),
            "unmix": float(losses["unmix"].data),
            "syn": float(losses["syn"].data),
            "res": float(losses["res"].data),
            "prior_weighted": weights.beta * float(losses["prior"].data),
            "unmix_weighted": weights.lambda_unmix * float(losses["unmix"].data),
            "syn_weighted": weights.lambda_syn * float(losses["syn"].data),
            "res_weighted": weights.lambda_res * float(losses["res"].data),
        }
        breakdown["total"] = (breakdown["rec"] + breakdown["prior_weighted"]
                              + breakdown["unmix_weighted"] + breakdown["syn_weighted"]
                              + breakdown["res_weighted"])
        return total, breakdown

    def trainable(self) -> list:
        return list(self.params.values())


def init_hvae(geometry, rank, standardizer, rng, bounds=None, nu=0.25) -> HvaeModel:
    return HvaeModel(geometry, rank, standardizer, bounds=bounds, nu=nu, rng=rng)
