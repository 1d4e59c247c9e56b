"""Conditional mixture density network q(theta | s) in plain NumPy.

The network maps standardized summaries through tanh hidden layers to the
parameters of a Gaussian mixture over standardized targets.  Each
component's precision is parameterized by an upper-triangular factor U
(precision = U^T U) with a softplus diagonal, so densities need no matrix
inverse and sampling is a triangular solve.  Gradients are written out by
hand; ``check_gradient`` compares them with central differences.
"""
from __future__ import annotations

import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, logsumexp, softmax

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)
_DIAG_FLOOR = 1e-6


class DivergenceError(RuntimeError):
    pass


class MixtureCollapseWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 256
    max_epochs: int = 1000
    patience: int = 20
    validation_fraction: float = 0.1
    weight_decay: float = 1e-6
    max_restarts: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.validation_fraction < 0.5:
            raise ValueError("validation_fraction must lie in (0, 0.5)")
        for name in ("learning_rate", "batch_size", "max_epochs", "patience"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("weight_decay must be >= 0 and momentum in [0, 1)")


# ---------------------------------------------------------------------------
# dense network


class Mlp:
    """tanh hidden layers and a linear output, weights held in one flat vector."""

    def __init__(self, sizes, skip=False):
        self.sizes = tuple(int(s) for s in sizes)
        self.skip = bool(skip)
        self.shapes = []
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            self.shapes.append((a, b))
        self.n_layer_params = sum(a * b + b for a, b in self.shapes)
        # optional linear input -> output path, stored after the layers
        self.n_skip = self.sizes[0] * self.sizes[-1] if self.skip else 0
        self.n_params = self.n_layer_params + self.n_skip

    def skip_matrix(self, flat):
        return flat[self.n_layer_params :].reshape(self.sizes[0], self.sizes[-1])

    def unpack(self, flat):
        layers = []
        pos = 0
        for a, b in self.shapes:
            W = flat[pos : pos + a * b].reshape(a, b)
            pos += a * b
            bias = flat[pos : pos + b]
            pos += b
            layers.append((W, bias))
        return layers

    def init(self, rng, out_scale=0.1) -> np.ndarray:
        flat = np.zeros(self.n_params)
        layers = self.unpack(flat)
        for idx, (W, _) in enumerate(layers):
            a, b = W.shape
            lim = math.sqrt(6.0 / (a + b))
            if idx == len(layers) - 1:
                lim *= out_scale
            W[...] = rng.uniform(-lim, lim, size=W.shape)
        return flat

    def forward(self, flat, x):
        acts = [x]
        layers = self.unpack(flat)
        h = x
        for idx, (W, b) in enumerate(layers):
            h = h @ W + b
            if idx < len(layers) - 1:
                h = np.tanh(h)
            acts.append(h)
        if self.skip:
            h = h + x @ self.skip_matrix(flat)
        return h, acts

    def backward(self, flat, acts, dout) -> np.ndarray:
        grad = np.zeros_like(flat)
        layers = self.unpack(flat)
        glayers = self.unpack(grad)
        d = dout
        for idx in range(len(layers) - 1, -1, -1):
            W, _ = layers[idx]
            gW, gb = glayers[idx]
            a_in = acts[idx]
            gW[...] = a_in.T @ d
            gb[...] = d.sum(axis=0)
            if idx > 0:
                d = (d @ W.T) * (1.0 - acts[idx] ** 2)
        if self.skip:
            self.skip_matrix(grad)[...] = acts[0].T @ dout
        return grad

    def weight_mask(self) -> np.ndarray:
        """1 on weight-matrix entries, 0 on biases (weight decay skips biases)."""
        mask = np.zeros(self.n_params)
        pos = 0
        for a, b in self.shapes:
            mask[pos : pos + a * b] = 1.0
            pos += a * b + b
        mask[self.n_layer_params :] = 1.0
        return mask


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    return y + np.log(-np.expm1(-y))


# ---------------------------------------------------------------------------
# mixture density network


@dataclass
class MdnModel:
    d_in: int
    d_out: int
    hidden: tuple[int, ...] = (64, 64)
    n_components: int = 8
    full_cov: bool = True
    weights: np.ndarray | None = None
    s_mean: np.ndarray | None = None
    s_std: np.ndarray | None = None
    theta_mean: np.ndarray | None = None
    theta_std: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    # linear input -> head path; captures near-linear posteriors early in training
    skip: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.net = Mlp((self.d_in, *self.hidden, self.n_out), skip=self.skip)
        if self.s_mean is None:
            self.s_mean = np.zeros(self.d_in)
            self.s_std = np.ones(self.d_in)
        if self.theta_mean is None:
            self.theta_mean = np.zeros(self.d_out)
            self.theta_std = np.ones(self.d_out)
        if self.weights is None:
            self.weights = np.zeros(self.net.n_params)
        if self.weights.size != self.net.n_params:
            raise ValueError("weight vector does not match the architecture")

    # layout of the output head
    @property
    def n_tri(self) -> int:
        D = self.d_out
        return D * (D - 1) // 2 if self.full_cov else 0

    @property
    def n_out(self) -> int:
        M, D = self.n_components, self.d_out
        return M + M * D + M * D + M * self.n_tri

    def initialize(self, rng) -> "MdnModel":
        self.weights = self.net.init(rng)
        # start near unit precision with spread-out means
        _, mean_b, raw_diag_b, _ = self._split_bias()
        raw_diag_b[...] = _softplus_inv(1.0)
        mean_b[...] = rng.normal(0.0, 0.5, size=mean_b.size)
        return self

    def _split_bias(self):
        b = self.net.unpack(self.weights)[-1][1]
        M, D = self.n_components, self.d_out
        i0 = M
        i1 = i0 + M * D
        i2 = i1 + M * D
        return b[:i0], b[i0:i1], b[i1:i2], b[i2:]

    def _heads(self, out):
        N = out.shape[0]
        M, D = self.n_components, self.d_out
        logits = out[:, :M]
        means = out[:, M : M + M * D].reshape(N, M, D)
        raw_diag = out[:, M + M * D : M + 2 * M * D].reshape(N, M, D)
        tri = out[:, M + 2 * M * D :].reshape(N, M, self.n_tri)
        return logits, means, raw_diag, tri

    def _factor(self, raw_diag, tri):
        N, M, D = raw_diag.shape
        U = np.zeros((N, M, D, D))
        idx = np.arange(D)
        diag = _softplus(raw_diag) + _DIAG_FLOOR
        U[:, :, idx, idx] = diag
        if self.full_cov and D > 1:
            iu = np.triu_indices(D, 1)
            U[:, :, iu[0], iu[1]] = tri
        return U, diag

    def standardize_s(self, s):
        return (np.atleast_2d(s) - self.s_mean) / self.s_std

    def standardize_theta(self, theta):
        return (np.atleast_2d(theta) - self.theta_mean) / self.theta_std

    def destandardize_theta(self, z):
        return np.atleast_2d(z) * self.theta_std + self.theta_mean

    def mixture(self, s):
        """Mixture weights, means and precision factors in standardized units."""
        out, _ = self.net.forward(self.weights, self.standardize_s(s))
        logits, means, raw_diag, tri = self._heads(out)
        U, _ = self._factor(raw_diag, tri)
        return softmax(logits, axis=1), means, U

    def _log_prob_z(self, flat, x, z, need_grad=False, sample_weight=None):
        out, acts = self.net.forward(flat, x)
        logits, means, raw_diag, tri = self._heads(out)
        U, diag = self._factor(raw_diag, tri)
        D = self.d_out
        diff = z[:, None, :] - means
        y = np.einsum("nmij,nmj->nmi", U, diff)
        log_norm = -0.5 * D * _LOG_2PI + np.log(diag).sum(-1) - 0.5 * (y**2).sum(-1)
        log_pi = logits - logsumexp(logits, axis=1, keepdims=True)
        joint = log_pi + log_norm
        lp = logsumexp(joint, axis=1)
        if not need_grad:
            return lp, None
        w = np.ones(x.shape[0]) if sample_weight is None else sample_weight
        g = -(w / w.sum())[:, None]
        r = np.exp(joint - lp[:, None])
        pi = np.exp(log_pi)
        d_logits = g * (r - pi)
        a = g * r
        d_means = a[..., None] * np.einsum("nmji,nmj->nmi", U, y)
        dU = -a[..., None, None] * (y[..., :, None] * diff[..., None, :])
        idx = np.arange(D)
        d_diag = dU[:, :, idx, idx] + a[..., None] / diag
        d_raw_diag = d_diag * expit(raw_diag)
        N, M = logits.shape
        parts = [d_logits, d_means.reshape(N, M * D), d_raw_diag.reshape(N, M * D)]
        if self.n_tri:
            iu = np.triu_indices(D, 1)
            parts.append(dU[:, :, iu[0], iu[1]].reshape(N, M * self.n_tri))
        dout = np.concatenate(parts, axis=1)
        return lp, self.net.backward(flat, acts, dout)

    def loss_and_grad(self, flat, x, z, sample_weight=None, weight_decay=0.0, decay_mask=None):
        """Weighted mean negative log-likelihood (standardized units) and its gradient."""
        lp, grad = self._log_prob_z(flat, x, z, True, sample_weight)
        w = np.ones(x.shape[0]) if sample_weight is None else sample_weight
        loss = -float(np.dot(w, lp) / w.sum())
        if weight_decay:
            wm = flat * decay_mask
            loss += 0.5 * weight_decay * float(wm @ wm)
            grad = grad + weight_decay * wm
        return loss, grad

    def log_prob(self, theta, s) -> np.ndarray:
        """log q(theta | s) in target units (standardization Jacobian included)."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if theta.shape[1] != self.d_out:
            raise ValueError(f"theta has {theta.shape[1]} columns, model expects {self.d_out}")
        s = np.atleast_2d(np.asarray(s, dtype=float))
        if s.shape[1] != self.d_in:
            raise ValueError(f"s has {s.shape[1]} columns, model expects {self.d_in}")
        if s.shape[0] == 1 and theta.shape[0] > 1:
            s = np.repeat(s, theta.shape[0], axis=0)
        lp, _ = self._log_prob_z(self.weights, self.standardize_s(s), self.standardize_theta(theta))
        return lp - np.log(self.theta_std).sum()

    def sample(self, s, n: int, rng) -> np.ndarray:
        """``n`` draws from q(. | s) for a single conditioning vector."""
        pi, means, U = self.mixture(np.atleast_2d(s)[:1])
        pi, means, U = pi[0], means[0], U[0]
        comp = rng.choice(self.n_components, size=n, p=pi / pi.sum())
        eps = rng.standard_normal((n, self.d_out))
        z = np.empty((n, self.d_out))
        for k in range(self.n_components):
            sel = comp == k
            if sel.any():
                z[sel] = means[k] + solve_triangular(U[k], eps[sel].T, lower=False).T
        return self.destandardize_theta(z)

    # serialization ---------------------------------------------------------

    FORMAT = "etasbi-mdn"
    VERSION = 1

    def to_bytes(self) -> bytes:
        header = {
            "format": self.FORMAT,
            "version": self.VERSION,
            "d_in": self.d_in,
            "d_out": self.d_out,
            "hidden": list(self.hidden),
            "n_components": self.n_components,
            "full_cov": self.full_cov,
            "skip": self.skip,
            "n_params": int(self.weights.size),
            "byte_order": "little",
            "meta": self.meta,
        }
        buf = io.BytesIO()
        head = json.dumps(header, sort_keys=True).encode()
        buf.write(len(head).to_bytes(8, "little"))
        buf.write(head)
        for arr in (self.weights, self.s_mean, self.s_std, self.theta_mean, self.theta_std):
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "MdnModel":
        n = int.from_bytes(data[:8], "little")
        header = json.loads(data[8 : 8 + n])
        if header.get("format") != cls.FORMAT or header.get("version") != cls.VERSION:
            raise ValueError("not a serialized MDN of a supported version")
        body = np.frombuffer(data[8 + n :], dtype="<f8")
        sizes = [header["n_params"], header["d_in"], header["d_in"], header["d_out"], header["d_out"]]
        if body.size != sum(sizes):
            raise ValueError("truncated model file")
        parts = np.split(body.astype(float), np.cumsum(sizes)[:-1])
        return cls(
            header["d_in"],
            header["d_out"],
            tuple(header["hidden"]),
            header["n_components"],
            header["full_cov"],
            *parts,
            meta=header.get("meta", {}),
            skip=header.get("skip", False),
        )

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MdnModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def mdn_log_prob(model: MdnModel, theta, s) -> np.ndarray:
    return model.log_prob(theta, s)


def mdn_sample(model: MdnModel, s, n: int, rng) -> np.ndarray:
    return model.sample(s, n, rng)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: MdnModel
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int
    restarts: int
    learning_rate: float


def _fit_scale(x):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return mean, np.where(std > 1e-12, std, 1.0)


def sgd_momentum(loss_and_grad, flat, n, batch_size, lr, momentum, max_epochs, patience, rng, val_loss_fn):
    """Mini-batch gradient descent with momentum and early stopping.

    Returns the weights with the lowest validation loss and both loss traces;
    raises FloatingPointError on a non-finite loss.
    """
    velocity = np.zeros_like(flat)
    best = (np.inf, flat.copy(), 0)
    train_trace, val_trace = [], []
    stale = 0
    for epoch in range(max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, grad = loss_and_grad(flat, idx)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            velocity = momentum * velocity - lr * grad
            flat = flat + velocity
            total += loss * idx.size
        train_trace.append(total / n)
        vl = val_loss_fn(flat)
        if not np.isfinite(vl):
            raise FloatingPointError(f"non-finite validation loss at epoch {epoch}")
        val_trace.append(vl)
        if vl < best[0] - 1e-9:
            best = (vl, flat.copy(), epoch)
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    return best[1], train_trace, val_trace, best[2]


def mdn_train(
    theta,
    s,
    config: TrainConfig = TrainConfig(),
    sample_weight=None,
    hidden=(64, 64),
    n_components: int = 8,
    full_cov: bool = True,
    skip: bool = True,
) -> TrainResult:
    """Fit q(theta | s) by weighted maximum likelihood.

    Standardization constants are fitted on the training split only.  The
    loss is the weight-normalized mean, so scaling all weights by a constant
    leaves training unchanged.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    s = np.atleast_2d(np.asarray(s, dtype=float))
    n = theta.shape[0]
    if n < 50 or s.shape[0] != n:
        raise ValueError("need at least 50 matched (theta, s) pairs")
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(s))):
        raise ValueError("training data must be finite")
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=float)

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(config.validation_fraction * n)))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]

    model = MdnModel(s.shape[1], theta.shape[1], hidden, n_components, full_cov, skip=skip)
    model.s_mean, model.s_std = _fit_scale(s[tr_idx])
    model.theta_mean, model.theta_std = _fit_scale(theta[tr_idx])
    x = model.standardize_s(s)
    z = model.standardize_theta(theta)
    x_tr, z_tr, w_tr = x[tr_idx], z[tr_idx], w[tr_idx]
    x_va, z_va, w_va = x[val_idx], z[val_idx], w[val_idx]
    decay_mask = model.net.weight_mask()

    def batch_loss(flat, idx):
        return model.loss_and_grad(flat, x_tr[idx], z_tr[idx], w_tr[idx], config.weight_decay, decay_mask)

    def val_loss(flat):
        lp, _ = model._log_prob_z(flat, x_va, z_va)
        return -float(np.dot(w_va, lp) / w_va.sum())

    lr = config.learning_rate
    init_state = rng.bit_generator.state
    for attempt in range(config.max_restarts + 1):
        rng.bit_generator.state = init_state
        model.initialize(rng)
        try:
            flat, tr_trace, va_trace, best_epoch = sgd_momentum(
                batch_loss,
                model.weights.copy(),
                tr_idx.size,
                config.batch_size,
                lr,
                config.momentum,
                config.max_epochs,
                config.patience,
                rng,
                val_loss,
            )
        except FloatingPointError as exc:
            log.warning("training diverged (%s); halving learning rate to %g", exc, lr / 2)
            lr /= 2.0
            continue
        model.weights = flat
        pi, _, _ = model.mixture(s[val_idx])
        avg = pi.mean(axis=0)
        if np.any(avg < 1e-6):
            warnings.warn(
                f"mixture component weight fell to {avg.min():.2e} on validation inputs",
                MixtureCollapseWarning,
                stacklevel=2,
            )
        model.meta = {"train_config": asdict(config), "learning_rate_used": lr, "restarts": attempt}
        return TrainResult(model, tr_trace, va_trace, best_epoch, attempt, lr)
    raise DivergenceError(f"training diverged after {config.max_restarts} learning-rate halvings")


def check_gradient(model: MdnModel, theta, s, coords, eps=1e-5, sample_weight=None):
    """Analytic vs central-difference gradient of the training loss.

    Returns (analytic, numeric) arrays at the given flat weight coordinates.
    """
    x = model.standardize_s(s)
    z = model.standardize_theta(theta)
    _, grad = model.loss_and_grad(model.weights, x, z, sample_weight)
    numeric = np.empty(len(coords))
    for i, c in enumerate(coords):
        up = model.weights.copy()
        dn = model.weights.copy()
        up[c] += eps
        dn[c] -= eps
        lu, _ = model.loss_and_grad(up, x, z, sample_weight)
        ld, _ = model.loss_and_grad(dn, x, z, sample_weight)
        numeric[i] = (lu - ld) / (2 * eps)
    return grad[np.asarray(coords)], numeric
