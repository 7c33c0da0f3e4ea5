"""The low-rank-augmented inversion model and its losses.

An observation batch X (n x d) is encoded by a shared feature extractor
into normalized physical variables eta in (0,1)^4 and auxiliary variables
Z_aux in R^r. The physical branch decodes eta through the deformation
model into X_F. The auxiliary branch forms a rank-r residual

    Delta = s * A @ B^T,  A = (2/pi) * arctan([Z_aux || sg(X_F)] @ W + b),

with A in (-1,1)^(n x r), a shared scale s and basis B (d x r). A
stop-gradient on the conditioning X_F keeps residual gradients out of the
physical branch. The final reconstruction is X_C = X_F + w * Delta, where
w ramps from 0 to 1 over the first annealing epochs so the physical model
initially explains the data alone.

Losses: squared reconstruction misfit (per-sample L2 norm in the training
objective, per-dimension mean as the reported metric), a log-barrier prior
keeping eta away from the range boundaries (optionally a Gaussian KL in
the unbounded pre-sigmoid space), and a Frobenius penalty pulling B^T B
toward the identity.
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

# init scale of the coefficient-map weights; small enough that the residual
# starts negligible relative to the physical reconstruction
COEFF_INIT_STD = 1e-3


class NonFiniteLossError(RuntimeError):
    """Total loss became non-finite; carries the component breakdown."""

    def __init__(self, breakdown: dict):
        super().__init__(f"non-finite loss: {breakdown}")
        self.breakdown = breakdown


@dataclass
class LossConfig:
    """Loss weights and modes.

    ``gaussian_prior_mean``/``gaussian_prior_cov`` parameterize an
    informative Gaussian prior; they are accepted for forward compatibility
    but not exercised by any shipped configuration.
    """

    beta: float = 10.0
    lam: float = 0.1
    anneal_epochs: int = 30
    prior_mode: str = "endstop"  # endstop | kl
    eps_clip: float = 1e-6
    residual_enabled: bool = True
    prior_enabled: bool = True
    gaussian_prior_mean: tuple | None = None
    gaussian_prior_cov: tuple | None = None

    def __post_init__(self):
        if self.beta < 0 or self.lam < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.prior_mode not in ("endstop", "kl"):
            raise ValueError(f"unknown prior mode {self.prior_mode!r}")


def anneal_weight(epoch: int, config: LossConfig) -> float:
    """Residual contribution weight: 0 at epoch 0, 1 from anneal_epochs on."""
    if not config.residual_enabled:
        return 0.0
    if config.anneal_epochs <= 0:
        return 1.0
    return min(1.0, epoch / config.anneal_epochs)


# -- losses (module-level so they are unit-testable in isolation) -------------

def loss_rec(x: dc.Tensor, xc: dc.Tensor) -> dc.Tensor:
    """Mean over batch and dimensions of the squared misfit, mm^2."""
    return dc.mean(dc.square(dc.sub(x, xc)))


def loss_rec_objective(x: dc.Tensor, xc: dc.Tensor) -> dc.Tensor:
    """Training form of the reconstruction error: the squared L2 norm of each
    sample's misfit, averaged over the batch.

    Summing over observation dimensions (rather than averaging) keeps the
    reconstruction term's scale relative to the prior and basis penalties at
    the level the default weights were tuned for; the reported test MSE stays
    in per-dimension mm^2.
    """
    n = x.shape[0]
    return dc.mul(dc.tsum(dc.square(dc.sub(x, xc))), 1.0 / n)


def loss_res_basis(b: dc.Tensor) -> dc.Tensor:
    """Squared Frobenius norm of (B^T B - I_r)."""
    r = b.shape[1]
    gram = dc.matmul(dc.transpose(b), b)
    return dc.tsum(dc.square(dc.sub(gram, dc.Tensor(np.eye(r)))))


def loss_prior_endstop(eta: dc.Tensor, eps_clip: float = 1e-6) -> dc.Tensor:
    """Log-barrier on (0,1): -mean(log eta + log(1 - eta)).

    Each element contributes 2 log 2 at its minimum of 0.5 and climbs
    steeply near the range boundaries; clipping keeps the logs finite.
    The mean reduction keeps one weight comparable across ranks and batch
    sizes.
    """
    clipped = dc.clamp(eta, eps_clip, 1.0 - eps_clip)
    barrier = dc.add(dc.log(clipped), dc.log(dc.sub(1.0, clipped)))
    return dc.mul(dc.mean(barrier), -1.0)


def loss_prior_kl(mu: dc.Tensor, logvar: dc.Tensor) -> dc.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)), summed over variables, batch-averaged."""
    n = mu.shape[0]
    elem = dc.mul(
        dc.sub(dc.add(dc.square(mu), dc.exp(logvar)), dc.add(1.0, logvar)),
        0.5,
    )
    return dc.mul(dc.tsum(elem), 1.0 / n)


class PilaModel:
    """Encoder, physical decoder, and low-rank residual with shared tape."""

    def __init__(self, geometry: mogi.StationGeometry, rank: int,
                 standardizer: Standardizer,
                 bounds: mogi.VariableBounds | None = None,
                 nu: float = 0.25, prior_mode: str = "endstop",
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
        self.prior_mode = prior_mode
        self.standardizer = standardizer
        self.params = params if params is not None else self._init_params(rng)

    def _init_params(self, rng: np.random.Generator) -> dict:
        if rng is None:
            raise ValueError("an RNG is required to initialize parameters")
        d, r = self.d_obs, self.rank
        params: dict = {}
        feature_extractor_init(rng, d, params)
        params["phy_w"], params["phy_b"] = linear_init(rng, FEATURE_DIM, N_PHYSICAL)
        params["aux_w"], params["aux_b"] = linear_init(rng, FEATURE_DIM, r)
        if self.prior_mode == "kl":
            params["phy_lv_w"], params["phy_lv_b"] = linear_init(rng, FEATURE_DIM, N_PHYSICAL)
        params["res_s"] = dc.Tensor(np.asarray(1.0))
        gauss = rng.standard_normal((d, r))
        params["res_B"] = dc.Tensor(np.linalg.qr(gauss)[0])
        params["res_W"] = dc.Tensor(rng.normal(0.0, COEFF_INIT_STD, size=(r + d, r)))
        params["res_b"] = dc.Tensor(np.zeros(r))
        return params

    # -- encoding -------------------------------------------------------------

    def _heads(self, x_std: dc.Tensor, rng=None, sample: bool = False):
        feat = feature_extractor(x_std, self.params)
        z_aux = affine(feat, self.params["aux_w"], self.params["aux_b"])
        extras: dict = {}
        if self.prior_mode == "kl":
            mu = affine(feat, self.params["phy_w"], self.params["phy_b"])
            logvar = affine(feat, self.params["phy_lv_w"], self.params["phy_lv_b"])
            if sample:
                noise = rng.standard_normal(mu.shape)
                u = dc.add(mu, dc.mul(dc.exp(dc.mul(logvar, 0.5)), dc.Tensor(noise)))
            else:
                u = mu
            eta = dc.sigmoid(u)
            extras.update(mu=mu, logvar=logvar)
        else:
            eta = dc.sigmoid(affine(feat, self.params["phy_w"], self.params["phy_b"]))
        return eta, z_aux, extras

    def encode(self, x_raw: np.ndarray):
        """Normalized physical variables and auxiliary variables for a batch."""
        check_finite_rows(np.asarray(x_raw), "encode")
        x_std = dc.Tensor(self.standardizer.apply(np.asarray(x_raw)))
        eta, z_aux, _ = self._heads(x_std)
        return eta, z_aux

    # -- residual ---------------------------------------------------------------

    def residual(self, z_aux: dc.Tensor, xf: dc.Tensor) -> dc.Tensor:
        """Low-rank residual conditioned on the detached physical output."""
        if z_aux.shape[1] != self.rank:
            raise dc.ShapeError(
                f"residual: auxiliary width {z_aux.shape[1]} does not match rank {self.rank}"
            )
        cond = dc.concat_last([z_aux, dc.detach(xf)])
        pre = dc.add(dc.matmul(cond, self.params["res_W"]), self.params["res_b"])
        coeff = dc.mul(dc.arctan(pre), 2.0 / math.pi)
        return dc.mul(dc.matmul(coeff, dc.transpose(self.params["res_B"])),
                      self.params["res_s"])

    # -- full forward ---------------------------------------------------------

    def reconstruct(self, x_raw: np.ndarray, w_anneal: float = 1.0,
                    rng=None, sample: bool = False) -> dict:
        x_raw = np.asarray(x_raw, dtype=np.float64)
        check_finite_rows(x_raw, "reconstruct")
        x = dc.Tensor(x_raw)
        x_std = dc.Tensor(self.standardizer.apply(x_raw))
        eta, z_aux, extras = self._heads(x_std, rng=rng, sample=sample)
        z_phys = mogi.rescale_tape(eta, self.bounds)
        xf = mogi.decode_tape(z_phys, self.geometry, nu=self.nu)
        delta = self.residual(z_aux, xf)
        xc = dc.add(xf, dc.mul(delta, float(w_anneal))) if w_anneal != 0.0 else xf
        parts = dict(x=x, eta=eta, z_aux=z_aux, z_phys=z_phys,
                     xf=xf, delta=delta, xc=xc, w_anneal=float(w_anneal))
        parts.update(extras)
        return parts

    def total_loss(self, x_raw: np.ndarray, epoch: int, config: LossConfig,
                   rng=None) -> tuple:
        """Training objective and its breakdown for one batch.

        Returns (total tensor, breakdown dict, forward parts). The breakdown
        holds raw and weighted per-term floats; the recorded total always
        equals the sum of the weighted terms.
        """
        w = anneal_weight(epoch, config)
        sample = config.prior_mode == "kl" and config.prior_enabled
        parts = self.reconstruct(x_raw, w_anneal=w, rng=rng, sample=sample)
        rec = loss_rec_objective(parts["x"], parts["xc"])
        total = rec
        breakdown = {"rec": float(rec.data), "w_anneal": w}

        prior_raw = 0.0
        if config.prior_enabled and config.beta > 0:
            if config.prior_mode == "kl":
                prior = loss_prior_kl(parts["mu"], parts["logvar"])
            else:
                prior = loss_prior_endstop(parts["eta"], config.eps_clip)
            total = dc.add(total, dc.mul(prior, config.beta))
            prior_raw = float(prior.data)
        breakdown["prior"] = prior_raw
        breakdown["prior_weighted"] = config.beta * prior_raw if config.prior_enabled else 0.0

        res_raw = 0.0
        if config.residual_enabled and config.lam > 0:
            res = loss_res_basis(self.params["res_B"])
            total = dc.add(total, dc.mul(res, config.lam))
            res_raw = float(res.data)
        breakdown["res"] = res_raw
        breakdown["res_weighted"] = config.lam * res_raw if config.residual_enabled else 0.0
        breakdown["total"] = (breakdown["rec"] + breakdown["prior_weighted"]
                              + breakdown["res_weighted"])

        if not np.isfinite(breakdown["total"]):
            raise NonFiniteLossError(breakdown)
        return total, breakdown, parts

    def trainable(self) -> list:
        return list(self.params.values())


def init_pila(geometry, rank, standardizer, rng, bounds=None, nu=0.25,
              prior_mode="endstop") -> PilaModel:
    return PilaModel(geometry, rank, standardizer, bounds=bounds, nu=nu,
                     prior_mode=prior_mode, rng=rng)
