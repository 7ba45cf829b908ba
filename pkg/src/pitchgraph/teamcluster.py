"""Unsupervised player classification.

Pipeline: cluster midfield person histograms into n prototypes, pick the
triplet spanning the largest Bhattacharyya triangle (team 1, team 2,
referee), grow each prototype with a GMM distance rule, sharpen the clusters
with a linear SVM, extract the two goalkeeper groups near the goals, and
finally train a 5-class softmax classifier on the assembled clusters.
"""

import hashlib
import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .colorfeat import Histogram64, bhattacharyya, median_histogram
from .errors import ContractError
from .kmeans import lloyd_kmeans
from .validation import as_float_array, check_fitted, check_histograms

CLASS_NAMES = ("team1", "team2", "referee", "goalkeeperA", "goalkeeperB")

Sample = Tuple[object, Histogram64]  # (sample id, histogram)


def _stack(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([h.bins for _, h in samples])


# ---------------------------------------------------------------------------
# Diagonal-covariance Gaussian mixture (EM)


class DiagonalGMM(BaseEstimator):
    """GMM with diagonal covariances fitted by EM.

    Components that lose all responsibility are dropped and the remaining
    weights renormalized.  Deterministic given the seed (k-means init).
    """

    def __init__(self, n_components=3, max_iter=100, var_floor=1e-6, seed=0):
        self.n_components = n_components
        self.max_iter = max_iter
        self.var_floor = var_floor
        self.seed = seed

    def fit(self, X, y=None):
        X = as_float_array(X, "X", ndim=2)
        n, d = X.shape
        m = min(self.n_components, n)
        _, labels, _ = lloyd_kmeans(X, m, self.seed)
        resp = np.zeros((n, m))
        resp[np.arange(n), labels] = 1.0
        weights, means, variances = self._m_step(X, resp)
        prev_ll = -np.inf
        for _ in range(self.max_iter):
            log_resp, ll = self._e_step(X, weights, means, variances)
            weights, means, variances = self._m_step(X, np.exp(log_resp))
            keep = weights > 1e-12
            if not np.all(keep):
                weights = weights[keep] / weights[keep].sum()
                means, variances = means[keep], variances[keep]
            if abs(ll - prev_ll) < 1e-10 * max(1.0, abs(ll)):
                break
            prev_ll = ll
        self.weights_ = weights
        self.means_ = means
        self.variances_ = variances
        return self

    def _log_prob(self, X, means, variances):
        # (n, m) log N(x | mu_k, diag(var_k))
        const = -0.5 * np.sum(np.log(2 * np.pi * variances), axis=1)  # (m,)
        quad = -0.5 * (((X[:, None, :] - means[None, :, :]) ** 2) / variances[None, :, :]).sum(axis=2)
        return const[None, :] + quad

    def _e_step(self, X, weights, means, variances):
        # floor keeps empty components at -inf log weight without warnings
        log_joint = self._log_prob(X, means, variances) + np.log(np.maximum(weights, 1e-300))[None, :]
        norm = np.logaddexp.reduce(log_joint, axis=1)
        return log_joint - norm[:, None], float(norm.sum())

    def _m_step(self, X, resp):
        nk = resp.sum(axis=0)
        safe = np.maximum(nk, 1e-300)
        weights = nk / nk.sum()
        means = (resp.T @ X) / safe[:, None]
        sq = (resp.T @ (X**2)) / safe[:, None]
        variances = np.maximum(sq - means**2, self.var_floor)
        return weights, means, variances

    def score_samples(self, X):
        check_fitted(self, "means_")
        X = as_float_array(X, "X", ndim=2)
        log_joint = self._log_prob(X, self.means_, self.variances_) + np.log(
            np.maximum(self.weights_, 1e-300)
        )[None, :]
        return np.logaddexp.reduce(log_joint, axis=1)


# ---------------------------------------------------------------------------
# Prototypes


@dataclass(frozen=True)
class Prototype:
    """A cluster of person histograms with an optional GMM model."""

    samples: Tuple[Sample, ...]
    centroid: Histogram64
    gmm: Optional[DiagonalGMM] = None

    @property
    def member_ids(self):
        return [sid for sid, _ in self.samples]


def _centroid_of(samples: Sequence[Sample]) -> Histogram64:
    bins = _stack(samples).mean(axis=0)
    return Histogram64(bins=bins / bins.sum(), support_px=0)


def kmeans_prototypes(samples: Sequence[Sample], n: int, seed: int) -> List[Prototype]:
    """Cluster histograms into n prototypes (Lloyd + k-means++, Euclidean)."""
    if n > len(samples):
        raise ContractError(f"asked for {n} prototypes from {len(samples)} samples")
    X = check_histograms(_stack(samples))
    centers, labels, _ = lloyd_kmeans(X, n, seed)
    protos = []
    for k in range(n):
        members = tuple(s for s, l in zip(samples, labels) if l == k)
        if not members:
            continue
        protos.append(Prototype(samples=members, centroid=_centroid_of(members)))
    return protos


def triangle_area(d12: float, d13: float, d23: float) -> float:
    """Heron's formula; degenerate (triangle inequality violated) gives 0."""
    if min(d12, d13, d23) < 0:
        raise ContractError("triangle sides must be non-negative")
    s = (d12 + d13 + d23) / 2.0
    prod = s * (s - d12) * (s - d13) * (s - d23)
    return math.sqrt(prod) if prod > 0 else 0.0


def select_triplet(prototypes: Sequence[Prototype]) -> Tuple[int, int, int]:
    """Indices of the prototype triple with the largest Bhattacharyya triangle.

    Exhaustive over all C(n, 3) triples; ties go to the lexicographically
    smallest index triple (itertools.combinations order).
    """
    if len(prototypes) < 3:
        raise ContractError(f"need at least 3 prototypes, got {len(prototypes)}")
    n = len(prototypes)
    dist = np.zeros((n, n))
    for i, j in itertools.combinations(range(n), 2):
        dist[i, j] = dist[j, i] = bhattacharyya(prototypes[i].centroid, prototypes[j].centroid)
    best, best_area = None, -1.0
    for i, j, k in itertools.combinations(range(n), 3):
        area = triangle_area(dist[i, j], dist[i, k], dist[j, k])
        if area > best_area:
            best, best_area = (i, j, k), area
    return best


def _fit_gmm(samples: Sequence[Sample], m: int, seed: int) -> DiagonalGMM:
    return DiagonalGMM(n_components=m, seed=seed).fit(_stack(samples))


def prototype_distance(hist: Histogram64, proto: Prototype) -> float:
    """Median Bhattacharyya distance from a sample to the GMM component means."""
    if proto.gmm is None:
        raise ContractError("prototype has no fitted GMM")
    dists = []
    for mean in proto.gmm.means_:
        mean = np.maximum(mean, 0.0)
        dists.append(bhattacharyya(hist.bins, mean / mean.sum()))
    return float(np.median(dists))


def grow_prototypes(
    triplet: Sequence[Prototype],
    rest: Sequence[Sample],
    lam: float = 0.10,
    m: int = 3,
    d_near_zero: float = 0.15,
    seed: int = 0,
) -> List[Prototype]:
    """Absorb remaining samples into the selected triplet.

    Pass 1 assigns a sample to prototype P when its GMM distance d is below
    d_near_zero and beats both other prototypes by the margin lam
    (d + lam < d1 and d + lam < d2).  Pass 2 refits each GMM on the enlarged
    membership.  Seed-triplet members never move.
    """
    if len(triplet) != 3:
        raise ContractError("triplet must hold exactly 3 prototypes")
    seen = set()
    for proto in triplet:
        for sid in proto.member_ids:
            if sid in seen:
                raise ContractError(f"sample {sid!r} appears in two seed prototypes")
            seen.add(sid)
    protos = [
        p if p.gmm is not None else replace(p, gmm=_fit_gmm(p.samples, m, seed + i))
        for i, p in enumerate(triplet)
    ]
    additions: List[List[Sample]] = [[], [], []]
    for sample in rest:
        _, hist = sample
        d = [prototype_distance(hist, p) for p in protos]
        order = np.argsort(d, kind="stable")
        best = int(order[0])
        others = [d[i] for i in range(3) if i != best]
        if d[best] < d_near_zero and all(d[best] + lam < other for other in others):
            additions[best].append(sample)
    grown = []
    for i, (proto, extra) in enumerate(zip(protos, additions)):
        samples = proto.samples + tuple(extra)
        grown.append(
            Prototype(samples=samples, centroid=_centroid_of(samples), gmm=_fit_gmm(samples, m, seed + i))
        )
    return grown


# ---------------------------------------------------------------------------
# Linear SVM refinement


class OneVsRestLinearSVM(BaseEstimator):
    """One-vs-rest linear SVM trained by full-batch sub-gradient descent.

    Objective per class: 0.5 ||w||^2 + C * balanced mean hinge, where the
    hinge is averaged within the positive and negative groups separately and
    the two group means averaged.  The mean form makes the decision function
    invariant to duplicating the training set; balancing keeps minority-class
    margins from collapsing under the regularizer.
    """

    def __init__(self, C=1.0, lr=0.5, tol=1e-4, max_iter=5000):
        self.C = C
        self.lr = lr
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y):
        X = as_float_array(X, "X", ndim=2)
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        n, d = X.shape
        W = np.zeros((len(self.classes_), d))
        b = np.zeros(len(self.classes_))
        for ci, cls in enumerate(self.classes_):
            t = np.where(y == cls, 1.0, -1.0)
            pos, neg = (t > 0).sum(), (t < 0).sum()
            sw = np.where(t > 0, 0.5 / max(pos, 1), 0.5 / max(neg, 1))
            w, bias = np.zeros(d), 0.0
            for it in range(self.max_iter):
                margin = t * (X @ w + bias)
                viol = margin < 1.0
                coef = (sw * t)[viol]
                grad_w = w - self.C * (coef[:, None] * X[viol]).sum(axis=0)
                grad_b = -self.C * coef.sum()
                step = self.lr / math.sqrt(1.0 + it)
                w -= step * grad_w
                bias -= step * grad_b
                if max(np.abs(step * grad_w).max(), abs(step * grad_b)) < self.tol:
                    break
            W[ci], b[ci] = w, bias
        self.coef_, self.intercept_ = W, b
        return self

    def decision_function(self, X):
        check_fitted(self, "coef_")
        X = as_float_array(X, "X", ndim=2)
        return X @ self.coef_.T + self.intercept_

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]


def svm_refine(
    clusters: Sequence[Sequence[Sample]], tau_margin: float = 0.25, svm: Optional[OneVsRestLinearSVM] = None
) -> List[List[Sample]]:
    """Conservative cluster sharpening via SVM decision margins.

    Trains a one-vs-rest linear SVM on the grown clusters, then keeps a
    candidate only when its top decision value exceeds tau_margin and beats
    the runner-up by tau_margin.
    """
    if len(clusters) != 3:
        raise ContractError("svm_refine expects exactly 3 clusters")
    for i, cl in enumerate(clusters):
        if len(cl) < 2:
            raise ContractError(f"cluster {i} has {len(cl)} samples; need at least 2")
    X = np.concatenate([_stack(cl) for cl in clusters])
    y = np.concatenate([np.full(len(cl), i) for i, cl in enumerate(clusters)])
    candidates = [s for cl in clusters for s in cl]
    model = svm if svm is not None else OneVsRestLinearSVM()
    model.fit(X, y)
    scores = model.decision_function(X)
    refined: List[List[Sample]] = [[], [], []]
    for sample, row in zip(candidates, scores):
        order = np.argsort(row)[::-1]
        top, runner = row[order[0]], row[order[1]]
        if top > tau_margin and top - runner > tau_margin:
            refined[int(model.classes_[order[0]])].append(sample)
    return refined


# ---------------------------------------------------------------------------
# Goalkeeper extraction


def extract_goalkeepers(
    candidates: Dict[str, Sequence[Sample]],
    referee_centroid: Histogram64,
    gk_threshold: float = 0.4,
    referee_threshold: float = 0.30,
) -> Dict[str, List[Sample]]:
    """Median-filter the per-goal candidate groups.

    Per side: drop members farther than gk_threshold (Bhattacharyya) from the
    element-wise median histogram.  If that empties the side, first remove
    referee-like members (distance to the referee centroid below
    referee_threshold), recompute the median, and filter again.  A side with
    no survivors stays empty (unlabeled).
    """
    result: Dict[str, List[Sample]] = {}
    for side in ("A", "B"):
        group = list(candidates.get(side, []))
        if not group:
            result[side] = []
            continue
        kept = _median_filter(group, gk_threshold)
        if not kept:
            group = [s for s in group if bhattacharyya(s[1], referee_centroid) >= referee_threshold]
            kept = _median_filter(group, gk_threshold) if group else []
        result[side] = kept
    return result


def _median_filter(group: Sequence[Sample], threshold: float) -> List[Sample]:
    med = median_histogram([h for _, h in group])
    return [s for s in group if bhattacharyya(s[1], med) <= threshold]


# ---------------------------------------------------------------------------
# Cluster set and classifier


@dataclass(frozen=True)
class ClusterSet:
    """The five labeled clusters; sample ids are pairwise disjoint."""

    clusters: Dict[str, Tuple[Sample, ...]]

    def __post_init__(self):
        if set(self.clusters) != set(CLASS_NAMES):
            raise ContractError(f"cluster labels must be {CLASS_NAMES}, got {sorted(self.clusters)}")
        seen = {}
        for name in CLASS_NAMES:
            for sid, _ in self.clusters[name]:
                if sid in seen:
                    raise ContractError(f"sample {sid!r} in both {seen[sid]} and {name}")
                seen[sid] = name

    def __getitem__(self, name):
        return self.clusters[name]

    def sizes(self):
        return {name: len(self.clusters[name]) for name in CLASS_NAMES}


class SoftmaxPlayerClassifier(BaseEstimator, ClassifierMixin):
    """Multinomial logistic regression over histograms, trained with Adam.

    Optimizer settings mirror the spotting network's: start lr 1e-3, betas
    (0.9, 0.999), batch 96, plateau halving with patience 7, at most 100
    epochs, stop when lr drops below 1e-6.
    """

    def __init__(
        self,
        n_classes=5,
        lr=1e-3,
        beta1=0.9,
        beta2=0.999,
        batch_size=96,
        patience=7,
        max_epochs=100,
        min_lr=1e-6,
        seed=0,
    ):
        self.n_classes = n_classes
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.batch_size = batch_size
        self.patience = patience
        self.max_epochs = max_epochs
        self.min_lr = min_lr
        self.seed = seed

    def _logits(self, X):
        return X @ self.weights_.T + self.bias_

    def predict_proba(self, X):
        check_fitted(self, "weights_")
        X = as_float_array(X, "X", ndim=2)
        z = self._logits(X)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    @staticmethod
    def _loss_grad(X, y, W, b, n_classes):
        z = X @ W.T + b
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        n = len(y)
        loss = -np.log(np.maximum(p[np.arange(n), y], 1e-300)).mean()
        delta = p.copy()
        delta[np.arange(n), y] -= 1.0
        delta /= n
        return loss, delta.T @ X, delta.sum(axis=0)

    def fit(self, X, y, X_val=None, y_val=None):
        X = as_float_array(X, "X", ndim=2)
        y = np.asarray(y, dtype=int)
        if X_val is None:
            X_val, y_val = X, y
        else:
            X_val = as_float_array(X_val, "X_val", ndim=2)
            y_val = np.asarray(y_val, dtype=int)
        rng = np.random.default_rng(self.seed)
        d = X.shape[1]
        W = np.zeros((self.n_classes, d))
        b = np.zeros(self.n_classes)
        mW = np.zeros_like(W)
        vW = np.zeros_like(W)
        mb = np.zeros_like(b)
        vb = np.zeros_like(b)
        lr, eps, t = self.lr, 1e-8, 0
        best_val, stale = np.inf, 0
        history = []
        for epoch in range(self.max_epochs):
            order = rng.permutation(len(y))
            for start in range(0, len(y), self.batch_size):
                idx = order[start : start + self.batch_size]
                _, gW, gb = self._loss_grad(X[idx], y[idx], W, b, self.n_classes)
                t += 1
                mW = self.beta1 * mW + (1 - self.beta1) * gW
                vW = self.beta2 * vW + (1 - self.beta2) * gW**2
                mb = self.beta1 * mb + (1 - self.beta1) * gb
                vb = self.beta2 * vb + (1 - self.beta2) * gb**2
                bc1, bc2 = 1 - self.beta1**t, 1 - self.beta2**t
                W -= lr * (mW / bc1) / (np.sqrt(vW / bc2) + eps)
                b -= lr * (mb / bc1) / (np.sqrt(vb / bc2) + eps)
            self.weights_, self.bias_ = W, b
            val_loss, _, _ = self._loss_grad(X_val, y_val, W, b, self.n_classes)
            history.append(float(val_loss))
            if val_loss < best_val - 1e-12:
                best_val, stale = val_loss, 0
            else:
                stale += 1
                if stale >= self.patience:
                    lr /= 2.0
                    stale = 0
            if lr < self.min_lr:
                break
        self.weights_, self.bias_ = W, b
        self.val_loss_history_ = history
        return self

    def score(self, X, y):
        return float((self.predict(X) == np.asarray(y)).mean())


def _val_split_hash(sid) -> bool:
    """True when the sample id hashes into the 10% validation bucket."""
    digest = hashlib.sha1(repr(sid).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big") % 10 == 0


def train_player_classifier(cluster_set: ClusterSet, seed: int = 0, **hyper):
    """Train the 5-class classifier on a ClusterSet, 90/10 split by id hash.

    Returns (classifier, validation accuracy).
    """
    X_tr, y_tr, X_val, y_val = [], [], [], []
    for ci, name in enumerate(CLASS_NAMES):
        members = cluster_set[name]
        if not members:
            raise ContractError(f"cluster {name!r} is empty; cannot train classifier")
        for sid, hist in members:
            if _val_split_hash(sid):
                X_val.append(hist.bins)
                y_val.append(ci)
            else:
                X_tr.append(hist.bins)
                y_tr.append(ci)
    if not X_val:  # tiny sets can hash everything into train
        X_val.append(X_tr[-1])
        y_val.append(y_tr[-1])
    clf = SoftmaxPlayerClassifier(seed=seed, **hyper)
    clf.fit(np.asarray(X_tr), np.asarray(y_tr), np.asarray(X_val), np.asarray(y_val))
    return clf, clf.score(np.asarray(X_val), np.asarray(y_val))


def purity(cluster_set: ClusterSet, labels: Dict[object, str]):
    """Per-class and member-weighted overall purity percentages.

    Purity of a cluster is the fraction of members carrying its majority
    ground-truth label (cluster naming is arbitrary in unsupervised output).
    """
    per_class = {}
    total, correct = 0, 0
    for name in CLASS_NAMES:
        members = cluster_set[name]
        if not members:
            per_class[name] = float("nan")
            continue
        counts: Dict[str, int] = {}
        for sid, _ in members:
            if sid not in labels:
                raise ContractError(f"sample {sid!r} has no ground-truth label")
            counts[labels[sid]] = counts.get(labels[sid], 0) + 1
        hits = max(counts.values())
        per_class[name] = 100.0 * hits / len(members)
        total += len(members)
        correct += hits
    overall = 100.0 * correct / total if total else float("nan")
    return per_class, overall


# ---------------------------------------------------------------------------
# Whole-procedure driver


@dataclass(frozen=True)
class TeamClusterParams:
    n_prototypes: int = 6
    gmm_components: int = 3
    lam: float = 0.10
    d_near_zero: float = 0.15
    tau_margin: float = 0.25
    gk_threshold: float = 0.4
    referee_threshold: float = 0.30


def build_cluster_set(
    midfield_samples: Sequence[Sample],
    gk_candidates: Dict[str, Sequence[Sample]],
    params: TeamClusterParams = TeamClusterParams(),
    seed: int = 0,
) -> ClusterSet:
    """Run the full clustering procedure for one half-match.

    The smallest refined midfield cluster is taken as the referee (the
    minority class by construction); the other two become team1/team2 in
    size order.
    """
    protos = kmeans_prototypes(list(midfield_samples), params.n_prototypes, seed)
    i, j, k = select_triplet(protos)
    triplet = [protos[i], protos[j], protos[k]]
    assigned = {sid for p in triplet for sid in p.member_ids}
    rest = [s for s in midfield_samples if s[0] not in assigned]
    grown = grow_prototypes(
        triplet, rest, lam=params.lam, m=params.gmm_components, d_near_zero=params.d_near_zero, seed=seed
    )
    refined = svm_refine([list(p.samples) for p in grown], tau_margin=params.tau_margin)
    order = sorted(range(3), key=lambda c: len(refined[c]))
    referee = refined[order[0]]
    teams = sorted(order[1:], key=lambda c: -len(refined[c]))
    team1, team2 = refined[teams[0]], refined[teams[1]]
    if not referee:
        raise ContractError("referee cluster is empty after refinement")
    referee_centroid = _centroid_of(referee)
    keepers = extract_goalkeepers(
        {side: list(v) for side, v in gk_candidates.items()},
        referee_centroid,
        gk_threshold=params.gk_threshold,
        referee_threshold=params.referee_threshold,
    )
    return ClusterSet(
        clusters={
            "team1": tuple(team1),
            "team2": tuple(team2),
            "referee": tuple(referee),
            "goalkeeperA": tuple(keepers["A"]),
            "goalkeeperB": tuple(keepers["B"]),
        }
    )


def match_keepers(first_half: Dict[str, Histogram64], second_half: Dict[str, Histogram64]) -> Dict[str, str]:
    """Map second-half keeper sides onto first-half identities.

    Teams swap goals at half time; the assignment minimizing total centroid
    Bhattacharyya distance wins.  Returns {"A": side1, "B": side1}.
    """
    straight = bhattacharyya(second_half["A"], first_half["A"]) + bhattacharyya(
        second_half["B"], first_half["B"]
    )
    swapped = bhattacharyya(second_half["A"], first_half["B"]) + bhattacharyya(
        second_half["B"], first_half["A"]
    )
    return {"A": "A", "B": "B"} if straight <= swapped else {"A": "B", "B": "A"}
