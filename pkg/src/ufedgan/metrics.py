"""Sample-quality and privacy-leakage metrics.

IS and FID need a classifier. At desk scale that is a small probe trained
on the centralized labeled data (:func:`train_probe_classifier`) or, for the
low-dimensional toy distributions, an analytic probe (:class:`BinProbe`,
:class:`MixtureProbe`). Absolute values are therefore not comparable with
Inception-network numbers; only directions and ratios are.
"""
import csv
import hashlib
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy import optimize

from . import tensor as T
from .errors import ContractError, DimensionError, TrainingError
from .nn import LayerSpec, Model, ModelSpec
from .optim import apply_gradient, make_optimizer
from .rng import make_stream
from .tensor import Tape, Tensor


class NumericalWarning(UserWarning):
    pass


# probes ----------------------------------------------------------------------

class ProbeClassifier:
    """Frozen MLP classifier; its penultimate layer provides FID features."""

    def __init__(self, model, num_classes):
        self.model = model
        self.num_classes = num_classes
        self.model.requires_grad_(False)
        self.digest = model.digest()

    def _hidden(self, samples):
        x = Tensor(np.asarray(samples, dtype=self.model.dtype).reshape(len(samples), -1))
        acts = []
        for layer, params in zip(self.model.spec.layers, self.model._layer_params):
            x = T.add(T.matmul(x, params["weight"]), params["bias"])
            if layer.activation == "leaky_relu":
                x = T.leaky_relu(x, self.model.leaky_slope)
            acts.append(x)
        return acts

    def logits(self, samples):
        return self._hidden(samples)[-1].data

    def predict_proba(self, samples):
        self._check_frozen()
        return T.softmax(Tensor(self.logits(samples).astype(np.float64)))

    def features(self, samples):
        self._check_frozen()
        return self._hidden(samples)[-2].data.astype(np.float64)

    def accuracy(self, dataset):
        return float(np.mean(self.predict_proba(dataset.samples).argmax(axis=1) == dataset.labels))

    def _check_frozen(self):
        if self.model.digest() != self.digest:
            raise ContractError("probe weights changed after freezing")


class BinProbe:
    """Soft interval classifier for 1-D samples; features are the raw values.

    Class j is the interval between consecutive ``edges`` (the outer two are
    open-ended), with logistic soft boundaries of width ``temperature``.
    Fitted on data quantiles, every class holds equal data mass, so IS reaches
    its maximum only when generated samples match the data quantiles.
    """

    def __init__(self, edges, temperature):
        self.edges = np.asarray(edges, dtype=np.float64)
        self.temperature = float(temperature)
        self.num_classes = len(self.edges) + 1
        self.digest = hashlib.sha256(self.edges.tobytes() + np.float64(self.temperature).tobytes()).hexdigest()

    @classmethod
    def fit(cls, samples, bins=10, softness=0.05):
        x = np.asarray(samples, dtype=np.float64).ravel()
        edges = np.quantile(x, np.arange(1, bins) / bins)
        return cls(edges, softness * x.std())

    def predict_proba(self, samples):
        x = np.asarray(samples, dtype=np.float64).reshape(-1, 1)
        cdf = T._sigmoid((x - self.edges) / self.temperature)  # P(x beyond edge j)
        upper = np.concatenate([np.ones((len(x), 1)), cdf], axis=1)
        lower = np.concatenate([cdf, np.zeros((len(x), 1))], axis=1)
        return np.clip(upper - lower, 0.0, 1.0)

    def features(self, samples):
        return np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)


class MixtureProbe:
    """Bayes posterior over the components of a known Gaussian mixture."""

    def __init__(self, dist):
        self.dist = dist
        self.num_classes = len(dist.weights)
        self.digest = hashlib.sha256(dist.means.tobytes() + dist.covs.tobytes()).hexdigest()

    def predict_proba(self, samples):
        x = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
        logits = []
        for mu, cov, w in zip(self.dist.means, self.dist.covs, self.dist.weights):
            d = x - mu
            sol = np.linalg.solve(cov, d.T).T
            logits.append(np.log(w) - 0.5 * np.sum(d * sol, axis=1) - 0.5 * np.linalg.slogdet(cov)[1])
        return T.softmax(Tensor(np.stack(logits, axis=1)))

    def features(self, samples):
        return np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)


def train_probe_classifier(dataset, seed=0, hidden=(128, 64), floor=0.9, max_epochs=30,
                           batch_size=128, lr=1e-3):
    """Train an MLP probe on a labeled dataset, then freeze it.

    Ten percent of the data is held out; training stops as soon as held-out
    accuracy reaches ``floor``. Raises :class:`TrainingError` if it never does.
    """
    n = len(dataset)
    rng = make_stream(seed, "probe")
    order = rng.permutation(n)
    n_val = max(1, n // 10)
    val, train = dataset.subset(order[:n_val]), dataset.subset(order[n_val:])
    dim = int(np.prod(dataset.sample_shape))
    sizes = (dim,) + tuple(hidden) + (dataset.num_classes,)
    layers = [LayerSpec("linear", sizes[i], sizes[i + 1],
                        activation="leaky_relu" if i < len(sizes) - 2 else None)
              for i in range(len(sizes) - 1)]
    model = Model(ModelSpec("probe", (dim,), layers), rng)
    opt = make_optimizer(model, "adam", lr, (0.9, 0.999))
    x_train = train.samples.reshape(len(train), -1).astype(np.float32)
    acc = 0.0
    for epoch in range(max_epochs):
        perm = rng.permutation(len(train))
        for start in range(0, len(train), batch_size):
            idx = perm[start:start + batch_size]
            params = model.parameters()
            with Tape() as tape:
                tape.watch(params)
                loss = T.cross_entropy(model.forward(Tensor(x_train[idx])), train.labels[idx])
            grads = tape.backward(loss)
            apply_gradient(model, opt, T.flatten_params([grads[p] for p in params]))
        probe = ProbeClassifier(model, dataset.num_classes)
        acc = probe.accuracy(val)
        if acc >= floor:
            probe.epochs = epoch + 1
            probe.val_accuracy = acc
            return probe
        model.requires_grad_(True)
    raise TrainingError(f"probe reached {acc:.3f} held-out accuracy, below the {floor} floor")


# inception score -------------------------------------------------------------

def inception_score_from_probs(probs, splits=10):
    probs = np.asarray(probs, dtype=np.float64)
    if len(probs) < 2 * splits:
        raise ContractError(f"inception score needs at least {2 * splits} samples, got {len(probs)}")
    scores = []
    for part in np.array_split(probs, splits):
        marginal = part.mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0).sum(axis=1)
        scores.append(np.exp(kl.mean()))
    return float(np.mean(scores))


def inception_score(samples, probe, splits=10):
    """exp(E_x KL(p(y|x) || p(y))), averaged over ``splits`` chunks."""
    return inception_score_from_probs(probe.predict_proba(samples), splits)


# FID -------------------------------------------------------------------------

@dataclass
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @classmethod
    def of(cls, features):
        f = np.asarray(features, dtype=np.float64)
        f = f.reshape(len(f), -1)
        cov = np.cov(f, rowvar=False) if len(f) > 1 else np.zeros((f.shape[1], f.shape[1]))
        cov = np.atleast_2d(cov)
        return cls(f.mean(axis=0), 0.5 * (cov + cov.T), len(f))


def _psd_sqrt(m, clip=-1e-8):
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    worst = float(vals.min(initial=0.0))
    vals = np.where(vals < 0, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T, worst if worst < clip else 0.0


def fid_with_residual(real, fake):
    """(FID, most negative eigenvalue clipped beyond tolerance, else 0)."""
    if real.mean.shape != fake.mean.shape:
        raise DimensionError(f"fid: feature dimensions differ, {real.mean.shape} vs {fake.mean.shape}")
    root1, r1 = _psd_sqrt(real.cov)
    root_cross, r2 = _psd_sqrt(root1 @ fake.cov @ root1)
    diff = real.mean - fake.mean
    value = diff @ diff + np.trace(real.cov) + np.trace(fake.cov) - 2 * np.trace(root_cross)
    return float(max(value, 0.0)), min(r1, r2)


def fid(real, fake):
    """Frechet distance between two Gaussian feature fits.

    ``tr((S1 S2)^(1/2))`` is evaluated as ``tr((S1^(1/2) S2 S1^(1/2))^(1/2))``,
    both roots by symmetric eigendecomposition with small negative
    eigenvalues clipped to zero.
    """
    value, residual = fid_with_residual(real, fake)
    if residual:
        warnings.warn(f"fid: clipped eigenvalue {residual:.3g} in matrix square root", NumericalWarning)
    return value


def fid_of_samples(real_samples, fake_samples, probe):
    return fid(GaussianMoments.of(probe.features(real_samples)), GaussianMoments.of(probe.features(fake_samples)))


# SSIM ------------------------------------------------------------------------

def _window_sum_matrix(size, window):
    m = np.zeros((size - window + 1, size))
    for i in range(size - window + 1):
        m[i, i:i + window] = 1.0
    return m


def _as_chw(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise DimensionError(f"ssim expects (H, W) or (C, H, W) images, got shape {img.shape}")
    return img


def ssim_matrix(images_a, images_b, data_range=2.0, window=8, chunk=32):
    """SSIM of every pair (a_i, b_j) -> array of shape (len(a), len(b)).

    Uniform ``window`` x ``window`` sliding windows over valid positions,
    constants C1 = (0.01 L)^2 and C2 = (0.03 L)^2, averaged over windows
    and channels.
    """
    a = np.asarray(images_a, dtype=np.float64)
    b = np.asarray(images_b, dtype=np.float64)
    if a.ndim == 3:
        a, b = a[:, None], b[:, None]
    if a.shape[1:] != b.shape[1:]:
        raise DimensionError(f"ssim: image shapes differ, {a.shape[1:]} vs {b.shape[1:]}")
    h, w = a.shape[-2:]
    win = min(window, h, w)
    rh, rw = _window_sum_matrix(h, win) / win, _window_sum_matrix(w, win) / win
    local = lambda x: np.einsum("ij,...jk,lk->...il", rh, x, rw)  # noqa: E731
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mu_a, mu_b = local(a), local(b)
    var_a = local(a * a) - mu_a ** 2
    var_b = local(b * b) - mu_b ** 2
    out = np.empty((len(a), len(b)))
    for s in range(0, len(a), chunk):
        pa = a[s:s + chunk, None]
        cov = local(pa * b[None]) - mu_a[s:s + chunk, None] * mu_b[None]
        ma, mb = mu_a[s:s + chunk, None], mu_b[None]
        va, vb = var_a[s:s + chunk, None], var_b[None]
        smap = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2))
        out[s:s + chunk] = smap.mean(axis=(-3, -2, -1))
    return np.clip(out, -1.0, 1.0)


def ssim(image_a, image_b, data_range=2.0, window=8):
    """Structural similarity of two equally shaped images."""
    a, b = _as_chw(image_a), _as_chw(image_b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: image shapes differ, {a.shape} vs {b.shape}")
    return float(ssim_matrix(a[None], b[None], data_range, window)[0, 0])


def mean_pairwise_ssim(generated, real, data_range=2.0, window=8):
    """Mean over generated images of the SSIM to their best-matching real image."""
    return float(ssim_matrix(generated, real, data_range, window).max(axis=1).mean())


# combined evaluation ---------------------------------------------------------

def evaluate_samples(samples, reference, probe=None, splits=10, ssim_limit=256):
    """MetricReport fields for ``samples`` against a real ``reference`` set.

    IS and FID need ``probe``; SSIM is computed for image batches only, on at
    most ``ssim_limit`` images from each side; moment gaps are the mean of the
    per-dimension gaps.
    """
    samples, reference = np.asarray(samples), np.asarray(reference)
    out = {"inception_score": 1.0}
    if probe is not None:
        out["inception_score"] = inception_score(samples, probe, splits)
        out["fid"] = fid_of_samples(reference, samples, probe)
    if samples.ndim >= 3:
        out["ssim"] = mean_pairwise_ssim(samples[:ssim_limit], reference[:ssim_limit])
    if len(samples) >= 100 and len(reference) >= 100:
        mean_gap, std_gap = moment_distance(samples, reference)
        out["mean_gap"], out["std_gap"] = float(mean_gap.mean()), float(std_gap.mean())
    return out


# moments and linear evaluation -----------------------------------------------

def moment_distance(generated, reference, min_samples=100):
    """Per-dimension |mean gap| and |std gap| between two sample sets."""
    g = np.asarray(generated, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    g, r = g.reshape(len(g), -1), r.reshape(len(r), -1)
    if len(g) < min_samples or len(r) < min_samples:
        raise ContractError(f"moment_distance needs >= {min_samples} samples per set")
    return np.abs(g.mean(axis=0) - r.mean(axis=0)), np.abs(g.std(axis=0) - r.std(axis=0))


def fit_linear_classifier(x, y, num_classes, l2=1e-4):
    """Multinomial logistic regression by L-BFGS; returns (W, b)."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.int64)
    n, d = x.shape
    onehot = np.eye(num_classes)[y]

    def objective(theta):
        w, b = theta[:d * num_classes].reshape(d, num_classes), theta[d * num_classes:]
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -(onehot * logp).sum() / n + 0.5 * l2 * (w * w).sum()
        dz = (np.exp(logp) - onehot) / n
        return loss, np.concatenate([(x.T @ dz + l2 * w).ravel(), dz.sum(axis=0)])

    theta0 = np.zeros(d * num_classes + num_classes)
    res = optimize.minimize(objective, theta0, jac=True, method="L-BFGS-B", options={"maxiter": 500})
    return res.x[:d * num_classes].reshape(d, num_classes), res.x[d * num_classes:]


def linear_evaluation(train_x, train_y, test_x, test_y, num_classes=None):
    """Held-out accuracy of a linear softmax classifier fit on (train_x, train_y)."""
    train_y, test_y = np.asarray(train_y), np.asarray(test_y)
    k = num_classes or int(max(train_y.max(), test_y.max())) + 1
    w, b = fit_linear_classifier(train_x, train_y, k)
    pred = (np.asarray(test_x, dtype=np.float64).reshape(len(test_x), -1) @ w + b).argmax(axis=1)
    return float(np.mean(pred == test_y))


# reports ---------------------------------------------------------------------

METRIC_FIELDS = ("experiment_id", "round", "user", "role", "is", "fid", "ssim", "mean_gap", "std_gap")


@dataclass
class MetricReport:
    round: int
    user: int
    role: str
    inception_score: float
    fid: Optional[float] = None
    ssim: Optional[float] = None
    mean_gap: Optional[float] = None
    std_gap: Optional[float] = None
    experiment_id: str = ""
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.role not in ("server", "attacker"):
            raise ContractError(f"role must be server or attacker, got {self.role!r}")
        if self.inception_score < 1 - 1e-9:
            raise ContractError("inception score below 1")
        if self.ssim is not None and not -1 <= self.ssim <= 1:
            raise ContractError("ssim outside [-1, 1]")
        if self.fid is not None and self.fid < 0:
            raise ContractError("negative fid")

    def row(self):
        def fmt(v):
            return "" if v is None else repr(float(v))

        return {
            "experiment_id": self.experiment_id, "round": self.round, "user": self.user, "role": self.role,
            "is": fmt(self.inception_score), "fid": fmt(self.fid), "ssim": fmt(self.ssim),
            "mean_gap": fmt(self.mean_gap), "std_gap": fmt(self.std_gap),
        }


def write_metric_csv(path, reports, append=False):
    exists = append and _nonempty(path)
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        if not exists:
            writer.writeheader()
        for r in reports:
            writer.writerow(r.row())


def _nonempty(path):
    try:
        with open(path) as fh:
            return bool(fh.read(1))
    except FileNotFoundError:
        return False


def read_metric_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
