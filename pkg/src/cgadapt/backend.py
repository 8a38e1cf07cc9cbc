"""Speaker-verification backend: pooling embedder, LDA, length norm, PLDA, S-norm."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class BackendError(ValueError):
    pass


@dataclass
class Embedding:
    utt_id: str
    vector: np.ndarray
    speaker_id: str | None = None


def stats_pool_embed(feats, vad=None) -> np.ndarray:
    """Per-dimension mean and (population) std over the voiced frames."""
    x = np.asarray(feats, dtype=np.float64)
    if vad is not None:
        x = x[np.asarray(vad, dtype=bool)]
    if x.shape[0] < 2:
        raise BackendError(f"stats pooling needs >= 2 frames, got {x.shape[0]}")
    return np.concatenate([x.mean(axis=0), x.std(axis=0)])


def length_normalize(e: np.ndarray) -> np.ndarray:
    """Scale each row (or the single vector) to unit Euclidean norm."""
    e = np.asarray(e, dtype=np.float64)
    norms = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise BackendError("cannot length-normalise a zero vector")
    return e / norms


def _sign_fix(m: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(m), axis=0)
    signs = np.sign(m[idx, np.arange(m.shape[1])])
    signs[signs == 0] = 1.0
    return m * signs


def scatter_matrices(x: np.ndarray, labels) -> tuple:
    labels = np.asarray(labels)
    mu = x.mean(axis=0)
    d = x.shape[1]
    sw = np.zeros((d, d))
    sb = np.zeros((d, d))
    for lab in np.unique(labels):
        xc = x[labels == lab]
        m = xc.mean(axis=0)
        r = xc - m
        sw += r.T @ r
        dm = (m - mu)[:, None]
        sb += xc.shape[0] * (dm @ dm.T)
    return sw / x.shape[0], sb / x.shape[0]


def fit_center_lda(x, labels, dim: int = 150) -> tuple:
    """Return ``(mean, projection[d, dim])`` of a whitening-then-eigen LDA.

    Columns are ordered by decreasing between-class variance; each column's
    largest-magnitude entry is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    n, d = x.shape
    if len(np.unique(labels)) < 2:
        raise BackendError("LDA needs at least two classes")
    if not 0 < dim <= d:
        raise BackendError(f"LDA output dim {dim} must be in 1..{d}")
    if n < dim + 1:
        raise BackendError(f"LDA to {dim} dims needs at least {dim + 1} vectors, got {n}")
    mu = x.mean(axis=0)
    sw, sb = scatter_matrices(x - mu, labels)
    evals, evecs = np.linalg.eigh(sw)
    if evals.min() <= 1e-10 * max(evals.max(), 1e-300):
        ridge = 1e-6 * np.trace(sw) / d
        log.warning("within-class scatter is singular; adding ridge %.3g", ridge)
        sw = sw + ridge * np.eye(d)
        evals, evecs = np.linalg.eigh(sw)
    whiten = evecs / np.sqrt(evals)
    b_evals, b_evecs = np.linalg.eigh(whiten.T @ sb @ whiten)
    order = np.argsort(b_evals)[::-1][:dim]
    proj = _sign_fix(whiten @ b_evecs[:, order])
    return mu, proj


@dataclass
class PLDA:
    """Two-covariance model: x = y + e, y ~ N(mean, B), e ~ N(0, W)."""

    mean: np.ndarray
    between: np.ndarray
    within: np.ndarray
    loglik_history: list = field(default_factory=list)

    def __post_init__(self):
        self._prepare()

    def _prepare(self):
        b, w = self.between, self.within
        t = b + w
        if np.linalg.eigvalsh(w).min() <= 0:
            raise BackendError("PLDA within-speaker covariance is not positive definite")
        t_inv = np.linalg.inv(t)
        # conditional of the test vector given the enrolment vector
        cond_cov = t - b @ t_inv @ b
        cond_inv = np.linalg.inv(cond_cov)
        self._q = t_inv - cond_inv
        self._p = t_inv @ b @ cond_inv
        sign1, ld_t = np.linalg.slogdet(t)
        sign2, ld_c = np.linalg.slogdet(cond_cov)
        if sign1 <= 0 or sign2 <= 0:
            raise BackendError("PLDA covariance is not positive definite")
        # log N([e;t]) = log N(e) + log N(t | e); the constants reduce to this
        self._const = 0.5 * (ld_t - ld_c)

    def score(self, enroll, test) -> np.ndarray:
        """Same-speaker vs different-speaker log-likelihood ratio, row-wise."""
        e = np.atleast_2d(np.asarray(enroll, dtype=np.float64)) - self.mean
        t = np.atleast_2d(np.asarray(test, dtype=np.float64)) - self.mean
        quad = 0.5 * (np.einsum("ij,jk,ik->i", e, self._q, e) + np.einsum("ij,jk,ik->i", t, self._q, t))
        cross = np.einsum("ij,jk,ik->i", e, self._p, t)
        return quad + cross + self._const


def plda_score(model: PLDA, e_enroll, e_test) -> float:
    return float(model.score(e_enroll, e_test)[0])


def _speaker_stats(x, labels):
    labels = np.asarray(labels)
    groups = []
    for lab in np.unique(labels):
        xs = x[labels == lab]
        mean = xs.mean(axis=0)
        r = xs - mean
        groups.append((xs.shape[0], mean, r.T @ r))
    return groups


def _plda_loglik(groups, mu, b, w) -> float:
    d = b.shape[0]
    w_inv = np.linalg.inv(w)
    _, ld_w = np.linalg.slogdet(w)
    total = 0.0
    for n, m, s in groups:
        c = b + w / n
        _, ld_c = np.linalg.slogdet(c)
        r = m - mu
        total += -0.5 * (n * d * np.log(2 * np.pi) + n * ld_w + np.sum(w_inv * s))
        total += 0.5 * (d * np.log(2 * np.pi) + ld_w - d * np.log(n))
        total += -0.5 * (d * np.log(2 * np.pi) + ld_c + r @ np.linalg.solve(c, r))
    return float(total)


def fit_plda(x, labels, max_iter: int = 200, tol: float = 1e-8) -> PLDA:
    """EM fit of the two-covariance PLDA model."""
    x = np.asarray(x, dtype=np.float64)
    groups = _speaker_stats(x, labels)
    if len(groups) < 2:
        raise BackendError("PLDA needs at least two speakers")
    if min(g[0] for g in groups) < 2:
        raise BackendError("PLDA needs at least two utterances per speaker")
    n_total, d = x.shape
    n_spk = len(groups)

    mu = x.mean(axis=0)
    w = sum(s for _, _, s in groups) / n_total
    means = np.array([m for _, m, _ in groups])
    b = np.cov(means.T, bias=True).reshape(d, d)
    b = 0.5 * (b + b.T) + 1e-6 * np.trace(w) / d * np.eye(d)

    history = [_plda_loglik(groups, mu, b, w)]
    for _ in range(max_iter):
        post_means, b_acc, w_acc = [], np.zeros((d, d)), np.zeros((d, d))
        covs = []
        for n, m, s in groups:
            c = b + w / n
            k = np.linalg.solve(c, b).T  # B (B + W/n)^-1
            ym = mu + k @ (m - mu)
            yc = b - k @ b
            yc = 0.5 * (yc + yc.T)
            post_means.append(ym)
            covs.append(yc)
            r = (m - ym)[:, None]
            w_acc += s + n * (r @ r.T) + n * yc
        post_means = np.array(post_means)
        mu = post_means.mean(axis=0)
        for ym, yc in zip(post_means, covs):
            r = (ym - mu)[:, None]
            b_acc += yc + r @ r.T
        b = b_acc / n_spk
        w = w_acc / n_total
        b, w = 0.5 * (b + b.T), 0.5 * (w + w.T)
        history.append(_plda_loglik(groups, mu, b, w))
        if abs(history[-1] - history[-2]) < tol * abs(history[-2]):
            break
    return PLDA(mean=mu, between=b, within=w, loglik_history=history)


def adaptive_snorm(scores, cohort_enroll, cohort_test, top_k: int = 200) -> np.ndarray:
    """Symmetric score normalisation with per-side top-k cohort statistics.

    ``cohort_enroll[i]`` / ``cohort_test[i]`` are the scores of trial i's
    enrolment / test side against the whole cohort.
    """
    scores = np.asarray(scores, dtype=np.float64)
    ce = np.atleast_2d(np.asarray(cohort_enroll, dtype=np.float64))
    ct = np.atleast_2d(np.asarray(cohort_test, dtype=np.float64))
    # top_k larger than the cohort falls back to the whole cohort
    k = min(top_k, ce.shape[1], ct.shape[1])
    if k < 2:
        raise BackendError(f"need at least 2 cohort scores per side, got {k}")

    def stats(c):
        top = -np.sort(-c, axis=1)[:, :k]
        return top.mean(axis=1), np.maximum(top.std(axis=1, ddof=1), 1e-6)

    mu_e, sd_e = stats(ce)
    mu_t, sd_t = stats(ct)
    return 0.5 * ((scores - mu_e) / sd_e + (scores - mu_t) / sd_t)


@dataclass
class BackendModel:
    mean: np.ndarray
    lda: np.ndarray
    plda: PLDA

    def transform(self, x) -> np.ndarray:
        """Centre, project, length-normalise."""
        return length_normalize((np.atleast_2d(x) - self.mean) @ self.lda)

    def to_tensors(self) -> dict:
        return {
            "mean": self.mean,
            "lda": self.lda,
            "plda/mean": self.plda.mean,
            "plda/between": self.plda.between,
            "plda/within": self.plda.within,
        }

    @classmethod
    def from_tensors(cls, t: dict) -> "BackendModel":
        plda = PLDA(t["plda/mean"], t["plda/between"], t["plda/within"])
        return cls(t["mean"], t["lda"], plda)


def train_backend(x, labels, lda_dim: int = 150) -> BackendModel:
    mu, proj = fit_center_lda(x, labels, lda_dim)
    z = length_normalize((np.asarray(x) - mu) @ proj)
    return BackendModel(mu, proj, fit_plda(z, labels))
