"""Whole-pipeline estimates for many resamples at once.

A leave-one-out dataset or a bootstrap resample is a vector of frequency
weights over the original patients (0 drops a patient, 2 duplicates it).
Weighted least squares with integer weights is the same problem as
unweighted least squares on the materialised dataset, so one stacked
computation over a ``(B, n)`` weight matrix replaces ``B`` pipeline runs.

Arrays are kept per arm in visit-major layout ``(B, V, n_arm)``. Gram
matrices are assembled blockwise: the covariate block comes from
precomputed outer products, so only the outcome-history blocks depend on
the replicate. Rows outside a regression's fitting set get weight zero.
"""

from __future__ import annotations

import numpy as np

from .imputation import Strategy
from .linalg import solve_gram


def _outer(X: np.ndarray) -> np.ndarray:
    return (X[:, :, None] * X[:, None, :]).reshape(X.shape[0], -1)


def _wls(Xc, XX, H, y, W):
    """Stacked WLS of ``y`` on ``[Xc | H]``.

    ``Xc`` (m, q) is shared, ``XX`` its row outer products, ``H`` (B, k, m)
    the replicate-specific history, ``y`` (m,) or (B, m), ``W`` (B, m).
    """
    B = W.shape[0]
    q = Xc.shape[1]
    k = H.shape[1]
    G = np.empty((B, q + k, q + k))
    r = np.empty((B, q + k))
    G[:, :q, :q] = (W @ XX).reshape(B, q, q)
    Wy = W * y
    r[:, :q] = Wy @ Xc
    if k:
        WH = H * W[:, None, :]
        Gxh = WH @ Xc
        G[:, q:, :q] = Gxh
        G[:, :q, q:] = Gxh.transpose(0, 2, 1)
        G[:, q:, q:] = WH @ H.transpose(0, 2, 1)
        r[:, q:] = (H @ Wy[:, :, None])[:, :, 0]
    return solve_gram(G, r)


def _predict(beta, Xc, H):
    q = Xc.shape[1]
    out = beta[:, :q] @ Xc.T
    if H.shape[1]:
        out += (beta[:, None, q:] @ H)[:, 0, :]
    return out


class BatchedPipeline:
    def __init__(self, ds, strategy, imputation_covariates, model):
        self.strategy = Strategy.parse(strategy)
        covs = ds.covariate_names if imputation_covariates is None else tuple(imputation_covariates)
        n = ds.n_patients
        self.n = n
        self.V = ds.n_visits
        self.visit = model.resolve_visit(ds.n_visits)
        Xc = np.column_stack([np.ones(n), ds.covariate_matrix(covs)])
        Y = np.where(ds.observed, ds.outcomes, 0.0)
        visits = np.arange(self.V)
        self.arm = {}
        for z in (0, 1):
            idx = np.flatnonzero(ds.arm == z)
            D = np.asarray(ds.disc_visit)[idx]
            R = np.asarray(ds.observed)[idx].T
            # baseline precedes treatment, so on-treatment status does not restrict it
            fit = R & ((D[None, :] > visits[:, None]) | (visits[:, None] == 0))
            self.arm[z] = dict(
                idx=idx, Xc=np.ascontiguousarray(Xc[idx]), XX=_outer(Xc[idx]),
                Y=np.ascontiguousarray(Y[idx].T), R=R, D=D, fit=fit, fitf=fit.astype(float),
            )
        self.Vd = model.design(ds)
        self.VV = _outer(self.Vd)
        self.Vd_arm = {z: model.design(ds, arm=z) for z in (0, 1)}

    def run(self, W: np.ndarray):
        """Return ``theta (B,)``, ``means (B, 2)`` (active, control) and ``ok (B,)``."""
        W = np.asarray(W, dtype=float)
        B = W.shape[0]
        V = self.V
        ok = np.ones(B, dtype=bool)
        Wz = {z: np.ascontiguousarray(W[:, a["idx"]]) for z, a in self.arm.items()}
        YH = {z: np.empty((B, V, a["idx"].size)) for z, a in self.arm.items()}
        cond = {}
        mu_active = {z: np.empty((B, V, self.arm[1]["idx"].size)) for z in (0, 1)}
        for j in range(V):
            for z, a in self.arm.items():
                H = YH[z][:, :j, :]
                beta, good = _wls(a["Xc"], a["XX"], H, a["Y"][j], Wz[z] * a["fitf"][j])
                ok &= good
                cond[(j, z)] = beta
                YH[z][:, j, :] = np.where(a["fit"][j], a["Y"][j], _predict(beta, a["Xc"], H))
            for z, a in self.arm.items():
                bstar, good = _wls(a["Xc"], a["XX"], YH[z][:, :0, :], YH[z][:, j, :], Wz[z])  # (1, X) only
                ok &= good
                mu_active[z][:, j, :] = bstar @ self.arm[1]["Xc"].T

        if self.strategy is Strategy.HYPOTHETICAL:
            final = {z: YH[z][:, self.visit, :] for z in (0, 1)}
        else:
            final = self._reference(YH, mu_active, cond, B)
        y = np.empty((B, self.n))
        for z, a in self.arm.items():
            y[:, a["idx"]] = final[z]
        coef, good = _wls(self.Vd, self.VV, np.empty((B, 0, self.n)), y, W)
        ok &= good
        theta = coef[:, 1]
        wn = W / W.sum(axis=1, keepdims=True)
        means = np.column_stack([np.einsum("bp,bp->b", wn @ self.Vd_arm[z], coef) for z in (1, 0)])
        theta = np.where(ok, theta, np.nan)
        means[~ok] = np.nan
        return theta, means, ok

    def _reference(self, YH, mu, cond, B):
        V = self.V
        visits = np.arange(V)
        a1 = self.arm[1]
        D = a1["D"]
        q = a1["Xc"].shape[1]
        if self.strategy is Strategy.CIR:
            last_on = np.clip(D - 1, 0, V - 1)[None, None, :]
            shift = (np.take_along_axis(mu[1], last_on, 1) - np.take_along_axis(mu[0], last_on, 1))[:, 0, :]
            shift = np.where((D >= 1) & (D <= V - 1), shift, 0.0)
        else:
            shift = np.zeros((B, D.size))
        before = visits[:, None] < D[None, :]
        mu_ref = np.where(before, mu[1], mu[0] + shift[:, None, :])
        out = {}
        for z, a in self.arm.items():
            Yc = np.empty_like(YH[z])
            Yc[:, 0, :] = YH[z][:, 0, :]
            for j in range(1, V):
                H = Yc[:, :j, :]
                val = _predict(cond[(j, z)], a["Xc"], H)
                if z == 1:
                    ref = (cond[(j, 0)][:, None, q:] @ (H - mu_ref[:, :j, :]))[:, 0, :] + mu[0][:, j, :] + shift
                    val = np.where(D <= j, ref, val)
                Yc[:, j, :] = np.where(a["R"][j], a["Y"][j], val)
            out[z] = Yc[:, self.visit, :]
        return out
