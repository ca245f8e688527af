"""Training protocol: MSE regression with a step learning-rate schedule.

Defaults follow the shipped protocol: five epochs, batch size 128, learning
rate 1e-3 shrunk tenfold each epoch, decoupled weight decay 5e-5, one random
lead per example per epoch.  The optimizer is an adaptive-moment update with
decoupled weight decay (beta1 0.9, beta2 0.999, eps 1e-8); both the moment
step and the decay term scale with the learning rate, so lr = 0 leaves
parameters untouched.

Everything is seeded: fixed seed means identical shuffles, lead draws,
dropout masks and therefore bit-identical final parameters on a given
platform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..curation import znormalize_batch
from . import kernels as K
from .model import Model, ModelSpec, NumericError, build_model, predict


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-3
    lr_decay_per_epoch: float = 10.0
    weight_decay: float = 5e-5
    seed: int = 0
    dtype: str = "float32"
    center_output: bool = True  # seed head bias with the train-label mean

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr / self.lr_decay_per_epoch**epoch


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, model: Model, weight_decay: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.model = model
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, _, _, p in model.named_params()}
        self.v = {name: np.zeros_like(p) for name, _, _, p in model.named_params()}

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, layer, pname, p in self.model.named_params():
            g = layer.grads[pname]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p
            p -= (lr * update).astype(p.dtype)


@dataclass
class TrainResult:
    model: Model
    best_params: dict[str, np.ndarray]
    best_epoch: int
    history: list[dict] = field(default_factory=list)

    def restore_best(self) -> Model:
        """Load the best-tune-epoch parameters into the model and return it."""
        for name, layer, pname, p in self.model.named_params():
            p[...] = self.best_params[name]
        return self.model


def _select_lead(X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One random lead per example for a (n, leads, L) stack."""
    if X.ndim == 2:
        return X
    picks = rng.integers(0, X.shape[1], size=len(X))
    return X[np.arange(len(X)), picks]


def _eval_mse(model: Model, X: np.ndarray, y: np.ndarray, batch_size: int) -> float:
    segs = X[:, 0] if X.ndim == 3 else X
    preds = predict(model, znormalize_batch(segs).astype(model.dtype), batch_size)
    return float(np.mean((preds - y) ** 2))


def train_model(
    X_train: np.ndarray,
    y_train: np.ndarray,
    spec: ModelSpec,
    config: TrainConfig,
    X_tune: np.ndarray | None = None,
    y_tune: np.ndarray | None = None,
    verbose: bool = False,
) -> TrainResult:
    """Run the full protocol and return the final plus best-tune states.

    ``X_train`` is (n, length) raw-mV segments or (n, leads, length) for the
    random-lead-per-epoch policy; segments are z-normalized on consumption.
    Tune data is optional; without it the "best" epoch is the last one.
    """
    X_train = np.asarray(X_train)
    y_train = np.asarray(y_train, dtype=np.float64)
    if len(X_train) == 0:
        raise ValueError("empty training split")
    if len(X_train) != len(y_train):
        raise ValueError("X/y length mismatch")

    model = build_model(spec, seed=config.seed, dtype=np.dtype(config.dtype))
    if config.center_output:
        # Adaptive-moment steps move each scalar by roughly lr per batch, so
        # the untouched head bias could never cross the ~20 bpm gap between a
        # zero-init output and the label scale within a small-step budget.
        head = model.layers[-1][1]
        head.params["b"][...] = y_train.mean()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xD1CE]))
    opt = AdamW(model, weight_decay=config.weight_decay)

    n = len(X_train)
    best_epoch = -1
    best_tune = np.inf
    best_params = {name: p.copy() for name, _, _, p in model.named_params()}
    history = []

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        leads = _select_lead(X_train, rng)
        sq_sum = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            xb = znormalize_batch(leads[idx]).astype(model.dtype)[:, None, :]
            yb = y_train[idx]
            model.zero_grads()
            pred = model.forward(xb, training=True, rng=rng)
            loss, gpred = K.mse_loss(pred, yb.astype(pred.dtype))
            if not np.isfinite(loss):
                model.check_finite()
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {lo // config.batch_size}"
                )
            model.backward(gpred)
            opt.step(lr)
            sq_sum += loss * len(idx)
        train_mse = sq_sum / n

        entry = {"epoch": epoch, "lr": lr, "train_mse": train_mse}
        if X_tune is not None and len(X_tune):
            tune_mse = _eval_mse(model, np.asarray(X_tune), np.asarray(y_tune), config.batch_size)
            entry["tune_mse"] = tune_mse
            if tune_mse < best_tune:
                best_tune = tune_mse
                best_epoch = epoch
                best_params = {name: p.copy() for name, _, _, p in model.named_params()}
        else:
            best_epoch = epoch
            best_params = {name: p.copy() for name, _, _, p in model.named_params()}
        history.append(entry)
        model.epoch = epoch + 1
        if verbose:
            print(
                f"epoch {epoch}: lr {lr:.2e} train_mse {train_mse:.4f}"
                + (f" tune_mse {entry['tune_mse']:.4f}" if "tune_mse" in entry else "")
            )

    model.metrics = {"history": history, "best_epoch": best_epoch}
    return TrainResult(model=model, best_params=best_params, best_epoch=best_epoch, history=history)


def loss_curve_rows(history: list[dict]) -> list[tuple]:
    """Flatten a training history into (epoch, split, mse) rows."""
    rows = []
    for entry in history:
        rows.append((entry["epoch"], "train", entry["train_mse"]))
        if "tune_mse" in entry:
            rows.append((entry["epoch"], "tune", entry["tune_mse"]))
    return rows


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def _loss_of(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    pred = model.forward(x, training=False)
    loss, _ = K.mse_loss(pred, y)
    return loss


def grad_check(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    h: float = 1e-4,
    check_input: bool = True,
    max_per_tensor: int | None = None,
    sample_seed: int = 0,
) -> float:
    """Worst relative error of analytic vs central-difference gradients.

    Runs the 64-bit path with dropout inactive (eval-mode forward).  Every
    parameter scalar and, optionally, every input scalar is perturbed by
    +/- h scaled to its magnitude; ``max_per_tensor`` caps the scalars
    checked per tensor (seeded draw) so large models stay within a runtime
    budget while still covering every tensor.

    Errors are measured against the larger of the component's own magnitude
    and a small fraction of the dominant gradient: components orders of
    magnitude below the gradient scale sit under the resolution of central
    differences, so only errors that matter at the gradient's scale count.
    """
    if model.dtype != np.float64:
        raise ValueError("gradient checking requires the float64 reference path")
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sampler = np.random.default_rng(sample_seed)

    model.zero_grads()
    pred = model.forward(x, training=False)
    _, gpred = K.mse_loss(pred, y)
    gx = model.backward(gpred)

    def fd_for(flat: np.ndarray, i: int) -> float:
        orig = flat[i]
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        lp = _loss_of(model, x, y)
        flat[i] = orig - step
        lm = _loss_of(model, x, y)
        flat[i] = orig
        return (lp - lm) / (2 * step)

    def indices(size: int) -> np.ndarray:
        if max_per_tensor is None or size <= max_per_tensor:
            return np.arange(size)
        return np.sort(sampler.choice(size, size=max_per_tensor, replace=False))

    pairs: list[tuple[float, float]] = []
    for _, layer, pname, p in model.named_params():
        flat = p.reshape(-1)
        aflat = layer.grads[pname].reshape(-1)
        for i in indices(flat.size):
            pairs.append((float(aflat[i]), fd_for(flat, i)))
    if check_input:
        xflat = x.reshape(-1)
        gflat = gx.reshape(-1)
        for i in indices(xflat.size):
            pairs.append((float(gflat[i]), fd_for(xflat, i)))

    scale = max(abs(a) + abs(f) for a, f in pairs)
    floor = max(1e-8, 1e-4 * scale)
    return max(abs(a - f) / max(abs(a) + abs(f), floor) for a, f in pairs)
