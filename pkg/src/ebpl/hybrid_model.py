"""Joint classifier / Gaussian-energy model over a shared feature extractor.

One model carries three parameter groups: the extractor, a softmax
classifier head, and an energy head assigning each class a Gaussian energy
(shared covariance).  A quadratic penalty ties the two heads together; when
it vanishes and class priors are uniform, both heads produce the same
posterior.
"""

from __future__ import annotations

import json
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from . import diffcore as dc
from .diffcore import MlpExtractor, ShapeError, Tensor

EPS_PD = 1e-6  # floor on the covariance factor's diagonal

# raw value whose softplus(+floor) equals 1.0, i.e. an identity start for L
_RAW_DIAG_ONE = float(np.log(np.expm1(1.0 - EPS_PD)))
# raw diagonal floor used when re-projecting after an optimizer step
RAW_DIAG_FLOOR = float(np.log(np.expm1(EPS_PD)))


class ClassifierHead:
    """Fully-connected softmax head; column c of `weight` is that class's vector."""

    def __init__(self, feature_dim: int, n_classes: int):
        if n_classes < 2:
            raise ValueError("need at least two classes")
        self.weight = Tensor(np.zeros((feature_dim, n_classes)), requires_grad=True)
        self.bias = Tensor(np.zeros(n_classes), requires_grad=True)

    def logits(self, features: Tensor) -> Tensor:
        return features @ self.weight + self.bias

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class EbmHead:
    """Per-class Gaussian means plus a shared covariance, Cholesky-parameterized.

    The stored `chol_raw` matrix is unconstrained; the effective factor L
    takes its strict lower triangle and a softplus-positive diagonal with an
    EPS_PD floor, so Sigma = L L^T stays positive definite under any update.
    Class priors are fixed uniform (the tying loss has no prior term, which
    is only consistent with uniform priors).
    """

    def __init__(self, feature_dim: int, n_classes: int,
                 rng: np.random.Generator | None = None, diagonal_only: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.feature_dim = feature_dim
        self.n_classes = n_classes
        self.diagonal_only = bool(diagonal_only)
        self.means = Tensor(rng.normal(0.0, 0.1, size=(n_classes, feature_dim)),
                            requires_grad=True)
        raw = np.zeros((feature_dim, feature_dim))
        np.fill_diagonal(raw, _RAW_DIAG_ONE)
        self.chol_raw = Tensor(raw, requires_grad=True)
        self.log_prior = np.full(n_classes, -np.log(n_classes))

    def chol(self) -> Tensor:
        """Effective lower-triangular factor L with positive diagonal."""
        d = self.feature_dim
        diag = dc.softplus(dc.diagonal(self.chol_raw)) + EPS_PD
        if self.diagonal_only:
            return dc.diag_matrix(diag)
        mask = Tensor(np.tril(np.ones((d, d)), k=-1))
        return self.chol_raw * mask + dc.diag_matrix(diag)

    def covariance(self) -> np.ndarray:
        L = self.chol().data
        return L @ L.T

    def parameters(self) -> list[Tensor]:
        return [self.means, self.chol_raw]


class HybridModel:
    """Shared extractor + classifier head + energy head."""

    def __init__(self, extractor: MlpExtractor, clf: ClassifierHead, ebm: EbmHead):
        if clf.weight.shape[0] != extractor.feature_dim or ebm.feature_dim != extractor.feature_dim:
            raise ShapeError("HybridModel", clf.weight.shape, (extractor.feature_dim,))
        self.extractor = extractor
        self.clf = clf
        self.ebm = ebm

    @classmethod
    def create(cls, input_dim: int, hidden_dims: Sequence[int], feature_dim: int,
               n_classes: int, activation: str = "tanh",
               rng: np.random.Generator | None = None,
               diagonal_cov: bool = False) -> "HybridModel":
        rng = rng if rng is not None else np.random.default_rng(0)
        extractor = MlpExtractor(input_dim, hidden_dims, feature_dim, activation, rng)
        clf = ClassifierHead(feature_dim, n_classes)
        ebm = EbmHead(feature_dim, n_classes, rng, diagonal_only=diagonal_cov)
        return cls(extractor, clf, ebm)

    @property
    def input_dim(self) -> int:
        return self.extractor.input_dim

    @property
    def n_classes(self) -> int:
        return self.ebm.n_classes

    def parameters(self) -> list[Tensor]:
        return [*self.extractor.parameters(), *self.clf.parameters(), *self.ebm.parameters()]

    def reinitialize(self, rng: np.random.Generator) -> None:
        """Fresh weights in place (same shapes); used by the re-init baseline."""
        self.extractor.reinitialize(rng)
        self.clf.weight.data[...] = 0.0
        self.clf.bias.data[...] = 0.0
        self.ebm.means.data[...] = rng.normal(0.0, 0.1, size=self.ebm.means.shape)
        self.ebm.chol_raw.data[...] = 0.0
        np.fill_diagonal(self.ebm.chol_raw.data, _RAW_DIAG_ONE)

    def clone(self) -> "HybridModel":
        ext = MlpExtractor.identity(self.input_dim) if not self.extractor.layers else \
            MlpExtractor.__new__(MlpExtractor)
        if self.extractor.layers:
            ext.input_dim = self.extractor.input_dim
            ext.feature_dim = self.extractor.feature_dim
            ext.activation = self.extractor.activation
            ext.layers = [(Tensor(w.data.copy(), requires_grad=True),
                           Tensor(b.data.copy(), requires_grad=True))
                          for w, b in self.extractor.layers]
        clf = ClassifierHead(self.extractor.feature_dim, self.n_classes)
        clf.weight.data[...] = self.clf.weight.data
        clf.bias.data[...] = self.clf.bias.data
        ebm = EbmHead(self.extractor.feature_dim, self.n_classes,
                      diagonal_only=self.ebm.diagonal_only)
        ebm.means.data[...] = self.ebm.means.data
        ebm.chol_raw.data[...] = self.ebm.chol_raw.data
        ebm.log_prior[...] = self.ebm.log_prior
        return HybridModel(ext, clf, ebm)


# -- tape-friendly building blocks (Tensor in, Tensor out) --------------------

def _as_batch(x) -> tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.data.ndim == 1:
        return Tensor(t.data[None, :]), True
    return t, False


def classifier_logits_t(model: HybridModel, x: Tensor) -> Tensor:
    return model.clf.logits(model.extractor(x))


def class_energies_t(model: HybridModel, x: Tensor) -> Tensor:
    """Per-class Gaussian energies, shape (n, C): half squared Mahalanobis."""
    feats = model.extractor(x)
    L = model.ebm.chol()
    # gather rows of the mean matrix without an indexing op: one-hot matmuls
    cols = []
    for c in range(model.n_classes):
        onehot = np.zeros(model.n_classes)
        onehot[c] = 1.0
        mu_c = Tensor(onehot) @ model.ebm.means          # (d,)
        diff = feats - mu_c                              # broadcast over rows
        z = dc.trisolve(L, diff)                         # rows: L^{-1}(f - mu_c)
        cols.append((z * z).sum(axis=1) * 0.5)
    return dc.column_stack(cols)


def total_energy_t(model: HybridModel, x: Tensor) -> Tensor:
    """Mixture energy -log sum_c exp(-E_c), shape (n,)."""
    energies = class_energies_t(model, x)
    return -dc.logsumexp(-energies, axis=1)


def tying_penalty_t(model: HybridModel) -> Tensor:
    """Sum_c ||w_c - Sigma^{-1} mu_c||^2 + (b_c + mu_c' Sigma^{-1} mu_c / 2)^2."""
    L = model.ebm.chol()
    M = model.ebm.means                                   # (C, d)
    Z = dc.trisolve(L, M)                                 # rows: L^{-1} mu_c
    A = dc.trisolve(L, Z, transpose_l=True)               # rows: Sigma^{-1} mu_c
    w_rows = dc.transpose(model.clf.weight)               # (C, d)
    wdiff = w_rows - A
    quad = (M * A).sum(axis=1)                            # mu_c' Sigma^{-1} mu_c
    bdiff = model.clf.bias + quad * 0.5
    return (wdiff * wdiff).sum() + (bdiff * bdiff).sum()


# -- public evaluation surface (numpy in, numpy out) --------------------------

def classifier_posterior(model: HybridModel, x) -> np.ndarray:
    """Softmax class posterior from the classifier head."""
    xb, single = _as_batch(x)
    logits = classifier_logits_t(model, xb).data
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs[0] if single else probs


def class_energy(model: HybridModel, x, c: int):
    """Gaussian energy of class c at x (scalar for a single sample)."""
    if not 0 <= c < model.n_classes:
        raise IndexError(f"class index {c} out of range [0, {model.n_classes})")
    xb, single = _as_batch(x)
    e = class_energies_t(model, xb).data[:, c]
    return float(e[0]) if single else e


def total_energy(model: HybridModel, x):
    xb, single = _as_batch(x)
    e = total_energy_t(model, xb).data
    return float(e[0]) if single else e


def ebm_posterior(model: HybridModel, x) -> np.ndarray:
    """Posterior implied by the energy head and Bayes' rule.

    Logit for class c is mu_c' Sigma^{-1} f(x) + log pi_c
    - mu_c' Sigma^{-1} mu_c / 2; the term quadratic in f(x) is
    class-independent and cancels in the softmax.
    """
    xb, single = _as_batch(x)
    feats = model.extractor(xb).data
    L = model.ebm.chol().data
    M = model.ebm.means.data
    Z = solve_triangular(L, M.T, lower=True).T            # rows: L^{-1} mu_c
    A = solve_triangular(L, Z.T, lower=True, trans="T").T  # rows: Sigma^{-1} mu_c
    logits = feats @ A.T + model.ebm.log_prior - 0.5 * np.sum(M * A, axis=1)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs[0] if single else probs


def tying_penalty(model: HybridModel) -> float:
    return float(tying_penalty_t(model).data)


# -- checkpointing ------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model: HybridModel, path) -> None:
    """Value-exact parameter + architecture snapshot (.npz)."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "input_dim": model.extractor.input_dim,
        "feature_dim": model.extractor.feature_dim,
        "activation": model.extractor.activation,
        "n_classes": model.n_classes,
        "n_layers": len(model.extractor.layers),
        "diagonal_cov": model.ebm.diagonal_only,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for i, (w, b) in enumerate(model.extractor.layers):
        arrays[f"ext_w{i}"] = w.data
        arrays[f"ext_b{i}"] = b.data
    arrays["clf_weight"] = model.clf.weight.data
    arrays["clf_bias"] = model.clf.bias.data
    arrays["ebm_means"] = model.ebm.means.data
    arrays["ebm_chol_raw"] = model.ebm.chol_raw.data
    arrays["ebm_log_prior"] = model.ebm.log_prior
    np.savez(path, **arrays)


def load_checkpoint(path) -> HybridModel:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['format_version']}")
        n_layers = meta["n_layers"]
        if n_layers == 0:
            ext = MlpExtractor.identity(meta["input_dim"])
        else:
            hidden = [int(data[f"ext_w{i}"].shape[1]) for i in range(n_layers - 1)]
            ext = MlpExtractor(meta["input_dim"], hidden, meta["feature_dim"],
                               meta["activation"])
            for i, (w, b) in enumerate(ext.layers):
                w.data[...] = data[f"ext_w{i}"]
                b.data[...] = data[f"ext_b{i}"]
        clf = ClassifierHead(meta["feature_dim"], meta["n_classes"])
        clf.weight.data[...] = data["clf_weight"]
        clf.bias.data[...] = data["clf_bias"]
        ebm = EbmHead(meta["feature_dim"], meta["n_classes"],
                      diagonal_only=meta["diagonal_cov"])
        ebm.means.data[...] = data["ebm_means"]
        ebm.chol_raw.data[...] = data["ebm_chol_raw"]
        ebm.log_prior[...] = data["ebm_log_prior"]
    return HybridModel(ext, clf, ebm)
