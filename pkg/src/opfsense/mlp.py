"""Feed-forward network with analytic input-Jacobian and weight gradients.

Hidden layers use the rectifier, the output layer tanh, so scaled
predictions live strictly inside (-1, 1) and unscaled predictions strictly
inside the box limits used for label scaling. Both the plain value loss and
the sensitivity-augmented loss

    loss = sum_s mean(yhat_s - y_s)^2 + rho * mean(Jhat_s - J_s)^2

(each term averaged over its own entries, as a mean-squared-error layer
would compute it)

are differentiated exactly with respect to all weights and biases, with the
standard piecewise treatment of the rectifier masks (held constant under
differentiation, exact almost everywhere). Optimization is Adam with an
exponential learning-rate decay. Everything is plain numpy and fully
deterministic given a seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OutputScaling:
    """Affine map between physical outputs and the scaled [-1, 1] space."""

    offset: np.ndarray  # box midpoints
    scale: np.ndarray  # box half-widths, > 0

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        if np.any(self.scale <= 0):
            raise ValueError("scaling half-widths must be positive")

    def encode(self, y):
        return (np.asarray(y, dtype=float) - self.offset) / self.scale

    def decode(self, y_scaled):
        return self.offset + self.scale * np.asarray(y_scaled, dtype=float)

    def encode_jacobian(self, j):
        return np.asarray(j, dtype=float) / self.scale[:, None]

    @classmethod
    def identity(cls, n):
        return cls(np.zeros(n), np.ones(n))


@dataclass
class MlpModel:
    """Layer dims [u_0, ..., u_{K+1}]; rectifier hidden, tanh output."""

    dims: list
    weights: list  # W_k of shape (u_k, u_{k-1})
    biases: list  # b_k of shape (u_k,)
    scaling: OutputScaling
    input_scaling: OutputScaling = None  # None means identity
    output_tanh: bool = True  # test hook: False makes the output layer affine
    hidden_relu: bool = True  # test hook: False makes hidden layers affine

    def __post_init__(self):
        if self.input_scaling is None:
            self.input_scaling = OutputScaling.identity(self.dims[0])

    @property
    def n_in(self):
        return self.dims[0]

    @property
    def n_out(self):
        return self.dims[-1]

    @property
    def n_layers(self):
        return len(self.weights)

    def parameters(self):
        return list(self.weights) + list(self.biases)

    def set_parameters(self, params):
        k = self.n_layers
        self.weights = [np.asarray(p, dtype=float) for p in params[:k]]
        self.biases = [np.asarray(p, dtype=float) for p in params[k:]]


def init_model(dims, seed, scaling=None, input_scaling=None,
               output_tanh=True, hidden_relu=True) -> MlpModel:
    """He-style scaled-uniform hidden layers, zero output layer.

    Starting the output layer at zero puts the tanh in its linear regime
    (predictions 0, predicted Jacobians 0), so the Jacobian loss term cannot
    saturate an output in the wrong direction before the value term has had
    any say — with near-zero Jacobian labels, either saturation sign zeroes
    the predicted Jacobian, and escaping a wrong-sign saturation is nearly
    impossible because the value gradient vanishes there too.
    """
    if len(dims) < 2:
        raise ValueError("need at least an input and an output dimension")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for k, (u_prev, u) in enumerate(zip(dims[:-1], dims[1:])):
        if k == len(dims) - 2 and len(dims) > 2:
            weights.append(np.zeros((u, u_prev)))
        else:
            bound = np.sqrt(6.0 / u_prev)
            weights.append(rng.uniform(-bound, bound, size=(u, u_prev)))
        biases.append(np.zeros(u))
    if scaling is None:
        scaling = OutputScaling.identity(dims[-1])
    return MlpModel(list(dims), weights, biases, scaling, input_scaling,
                    output_tanh, hidden_relu)


def _forward_pass(model: MlpModel, theta):
    """Activations h_0..h_K, pre-activation masks, and the scaled output."""
    h = np.asarray(theta, dtype=float)
    if h.shape != (model.n_in,):
        raise ValueError(f"input must have length {model.n_in}")
    h = model.input_scaling.encode(h)
    hs, masks = [h], []
    for k in range(model.n_layers - 1):
        z = model.weights[k] @ h + model.biases[k]
        m = (z > 0).astype(float) if model.hidden_relu else np.ones_like(z)
        h = z * m if model.hidden_relu else z
        hs.append(h)
        masks.append(m)
    z_o = model.weights[-1] @ h + model.biases[-1]
    yhat = np.tanh(z_o) if model.output_tanh else z_o
    return hs, masks, yhat


def forward(model: MlpModel, theta):
    """Scaled prediction yhat in (-1, 1)^{n_out} (with the tanh output)."""
    return _forward_pass(model, theta)[2]


def predict(model: MlpModel, theta):
    """Prediction in physical units, strictly inside the scaling box."""
    return model.scaling.decode(forward(model, theta))


def input_jacobian(model: MlpModel, theta):
    """Analytic d yhat / d theta, shape (n_out, n_in)."""
    hs, masks, yhat = _forward_pass(model, theta)
    T = np.diag(1.0 / model.input_scaling.scale)
    for k in range(model.n_layers - 1):
        T = masks[k][:, None] * (model.weights[k] @ T)
    d_out = (1.0 - yhat**2) if model.output_tanh else np.ones(model.n_out)
    return d_out[:, None] * (model.weights[-1] @ T)


def loss_and_grads(model: MlpModel, batch, rho):
    """Loss and exact weight/bias gradients over a batch.

    batch is a sequence of (theta, y, J) with y in the scaled output space,
    J the scaled Jacobian over the model inputs or None for value-only
    samples (whose Jacobian term is skipped). Each loss term is the mean of
    its squared entries, so rho weighs the Jacobian misfit per entry on the
    same footing as the value misfit regardless of the Jacobian's size.
    """
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    K = model.n_layers
    dW = [np.zeros_like(w) for w in model.weights]
    db = [np.zeros_like(b) for b in model.biases]
    loss = 0.0
    for theta, y, J in batch:
        y = np.asarray(y, dtype=float)
        if y.shape != (model.n_out,):
            raise ValueError("label dimension mismatch")
        hs, masks, yhat = _forward_pass(model, theta)
        diff = yhat - y
        loss += float(diff @ diff) / model.n_out
        d_out = (1.0 - yhat**2) if model.output_tanh else np.ones(model.n_out)
        dz_o = (2.0 / model.n_out) * diff * d_out

        use_jac = rho > 0 and J is not None
        if use_jac:
            J = np.asarray(J, dtype=float)
            # tangent stack T_k = d h_k / d theta and the predicted Jacobian
            Ts = [np.diag(1.0 / model.input_scaling.scale)]
            for k in range(K - 1):
                Ts.append(masks[k][:, None] * (model.weights[k] @ Ts[k]))
            S_o = model.weights[-1] @ Ts[-1]
            Jhat = d_out[:, None] * S_o
            R = Jhat - J
            n_jac = model.n_out * model.n_in
            loss += rho * float(np.sum(R * R)) / n_jac
            G = (2.0 * rho / n_jac) * R  # d loss / d Jhat
            if model.output_tanh:
                # d_out depends on z_o: d(1 - yhat^2)/dz_o = -2 yhat d_out
                dz_o = dz_o + (-2.0 * yhat) * np.sum(G * Jhat, axis=1)
            dW[-1] += d_out[:, None] * G @ Ts[-1].T
            GT = model.weights[-1].T @ (d_out[:, None] * G)  # d loss / d T_K
        dW[-1] += np.outer(dz_o, hs[-1])
        db[-1] += dz_o

        dh = model.weights[-1].T @ dz_o
        for k in range(K - 2, -1, -1):
            dz = dh * masks[k]
            dW[k] += np.outer(dz, hs[k])
            db[k] += dz
            if use_jac:
                GTk = masks[k][:, None] * GT
                dW[k] += GTk @ Ts[k].T
                GT = model.weights[k].T @ GTk
            dh = model.weights[k].T @ dz
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite training loss")
    return loss, dW + db


@dataclass
class TrainConfig:
    rho: float = 20.0
    lr0: float = 5e-4
    decay: float = 0.85
    decay_every: int = 250  # epochs
    epochs: int = 2000
    batch_size: int = 100  # full batch used when the training set is smaller
    seed: int = 0

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if not (0 < self.decay <= 1) or self.decay_every < 1 or self.epochs < 0:
            raise ValueError("invalid schedule")


def train(model: MlpModel, samples, config: TrainConfig):
    """Adam training loop; returns the per-epoch loss curve.

    samples is a list of (theta, y, J-or-None) already in scaled space.
    Deterministic given config.seed (batch shuffling uses its own stream).
    """
    if not samples:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    t = 0
    curve = []
    n = len(samples)
    full_batch = n <= config.batch_size
    for epoch in range(config.epochs):
        lr = config.lr0 * config.decay ** (epoch // config.decay_every)
        order = np.arange(n) if full_batch else rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = [samples[i] for i in order[start : start + config.batch_size]]
            loss, grads = loss_and_grads(model, batch, config.rho)
            epoch_loss += loss
            t += 1
            for i, g in enumerate(grads):
                m[i] = beta1 * m[i] + (1 - beta1) * g
                v[i] = beta2 * v[i] + (1 - beta2) * g * g
                mhat = m[i] / (1 - beta1**t)
                vhat = v[i] / (1 - beta2**t)
                params[i] = params[i] - lr * mhat / (np.sqrt(vhat) + eps)
        model.set_parameters(params)
        params = model.parameters()
        curve.append(epoch_loss)
    return curve


def mse(model: MlpModel, samples):
    """Mean squared error on scaled outputs, averaged over samples and outputs."""
    if not samples:
        raise ValueError("empty evaluation set")
    total = 0.0
    for theta, y, _ in samples:
        diff = forward(model, theta) - np.asarray(y, dtype=float)
        total += float(diff @ diff)
    return total / (len(samples) * model.n_out)


def save_model(model: MlpModel, path):
    doc = {
        "dims": list(model.dims),
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "scaling": {
            "offset": model.scaling.offset.tolist(),
            "scale": model.scaling.scale.tolist(),
        },
        "input_scaling": {
            "offset": model.input_scaling.offset.tolist(),
            "scale": model.input_scaling.scale.tolist(),
        },
        "output_tanh": model.output_tanh,
        "hidden_relu": model.hidden_relu,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_model(path) -> MlpModel:
    with open(path) as fh:
        doc = json.load(fh)
    scaling = OutputScaling(
        np.asarray(doc["scaling"]["offset"]), np.asarray(doc["scaling"]["scale"])
    )
    in_scaling = None
    if "input_scaling" in doc:
        in_scaling = OutputScaling(
            np.asarray(doc["input_scaling"]["offset"]),
            np.asarray(doc["input_scaling"]["scale"]),
        )
    return MlpModel(
        list(doc["dims"]),
        [np.asarray(w, dtype=float) for w in doc["weights"]],
        [np.asarray(b, dtype=float) for b in doc["biases"]],
        scaling,
        in_scaling,
        bool(doc.get("output_tanh", True)),
        bool(doc.get("hidden_relu", True)),
    )
