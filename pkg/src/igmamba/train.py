"""Adam optimizer, cross-entropy, classification metrics, map rendering."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from igmamba import tensor as T
from igmamba.errors import ConfigError, ContractError
from igmamba.tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(
                f"epochs and batch size must be >= 1, got {self.epochs}, {self.batch_size}"
            )
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        return self


class Adam:
    """Adam with bias correction. Parameters without a gradient are skipped."""

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.tensor.data) for p in self.params]
        self.v = [np.zeros_like(p.tensor.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.tensor.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.tensor.grad
            if g is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.tensor.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def cross_entropy(logits, targets):
    """Mean softmax cross-entropy; ``targets`` holds class ids 1..C.

    Fused forward/backward: the log-sum-exp subtracts the row max, so large
    logits cannot overflow.
    """
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise T.ShapeError(
            f"need logits [B, C] and targets [B], got {logits.shape} and {targets.shape}"
        )
    n, c = logits.shape
    if targets.min() < 1 or targets.max() > c:
        raise ConfigError(
            f"targets must lie in 1..{c}, got range "
            f"[{int(targets.min())}, {int(targets.max())}]"
        )
    idx = targets.astype(np.int64) - 1
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + zmax
    value = np.asarray((lse[:, 0] - z[np.arange(n), idx]).mean())

    def backward(grad):
        soft = np.exp(shifted) / np.exp(lse - zmax)
        soft[np.arange(n), idx] -= 1.0
        T.accumulate(logits, grad * soft / n)

    return T.make_node(value, [logits], backward, "cross_entropy")


# -- metrics -----------------------------------------------------------------


@dataclass
class Metrics:
    oa: float
    aa: float
    kappa: float
    per_class: list
    confusion: list = field(repr=False)

    def as_dict(self, seed=None, config_hash=None):
        out = {
            "oa": self.oa,
            "aa": self.aa,
            "kappa": self.kappa,
            "per_class": self.per_class,
            "confusion": self.confusion,
        }
        if seed is not None:
            out["seed"] = int(seed)
        if config_hash is not None:
            out["config_hash"] = config_hash
        return out


def confusion_matrix(true, pred, num_classes):
    """Counts with rows = true class, columns = predicted class (ids 1..C)."""
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.shape != pred.shape:
        raise T.ShapeError(f"label arrays differ: {true.shape} vs {pred.shape}")
    for name, arr in (("true", true), ("predicted", pred)):
        if arr.size and (arr.min() < 1 or arr.max() > num_classes):
            raise ConfigError(f"{name} labels outside 1..{num_classes}")
    flat = (true - 1) * num_classes + (pred - 1)
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def compute_metrics(true, pred, num_classes):
    cm = confusion_matrix(true, pred, num_classes)
    total = cm.sum()
    if total == 0:
        raise ConfigError("cannot score an empty label set")
    oa = float(np.trace(cm) / total)
    row = cm.sum(axis=1)
    col = cm.sum(axis=0)
    # classes absent from the reference set score 0 rather than dividing by 0
    recall = np.divide(
        np.diag(cm), row, out=np.zeros(num_classes, dtype=np.float64), where=row > 0
    )
    aa = float(recall.mean())
    expected = float((row * col).sum() / (total * total))
    kappa = 0.0 if expected >= 1.0 else float((oa - expected) / (1.0 - expected))
    return Metrics(oa, aa, kappa, recall.tolist(), cm.tolist())


# -- inference ---------------------------------------------------------------


def predict(model, patches, indices, batch_size=256):
    """Class id (1..C) per patch; batches keep peak memory bounded."""
    indices = np.asarray(indices)
    out = np.empty(indices.size, dtype=np.int64)
    for start in range(0, indices.size, batch_size):
        chunk = indices[start : start + batch_size]
        logits = model(Tensor(patches.batch(chunk).astype(np.float32)))
        out[start : start + chunk.size] = np.argmax(logits.data, axis=1) + 1
    return out


def evaluate(model, patches, indices, batch_size=256):
    preds = predict(model, patches, indices, batch_size)
    return compute_metrics(patches.labels[np.asarray(indices)], preds, patches.num_classes)


def prediction_map(patches, indices, preds):
    """Scatter per-patch predictions back onto the scene grid; 0 elsewhere."""
    h, w = patches.scene_shape
    grid = np.zeros((h, w), dtype=np.int64)
    coords = patches.coords[np.asarray(indices)]
    grid[coords[:, 0], coords[:, 1]] = preds
    return grid


# 16 visually distinct colors; class ids beyond 16 wrap around.
PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
)


def class_color(class_id):
    if class_id == 0:
        return (0, 0, 0)
    return PALETTE[(class_id - 1) % len(PALETTE)]


def render_map(class_map, path):
    """Write a binary PPM (P6) image; unlabeled pixels render black."""
    class_map = np.asarray(class_map)
    if class_map.ndim != 2:
        raise T.ShapeError(f"need a 2-d class map, got shape {class_map.shape}")
    h, w = class_map.shape
    table = np.array(
        [class_color(0)] + [class_color(i) for i in range(1, int(class_map.max()) + 1)],
        dtype=np.uint8,
    )
    pixels = table[class_map]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


# -- training loop -----------------------------------------------------------


def train(model, patches, config, max_steps=None, on_epoch=None):
    """Mini-batch Adam over the training indices.

    Epoch order comes from one generator seeded with ``config.seed``; the last
    short batch is kept. Returns per-epoch mean losses and the step count.
    Stops early once ``max_steps`` optimizer steps have run.
    """
    config.validate()
    if patches.train_indices is None:
        raise ContractError("patch set has no train split")
    opt = Adam(
        model.parameters(), config.learning_rate, config.beta1, config.beta2, config.eps
    )
    rng = np.random.default_rng(config.seed)
    train_idx = patches.train_indices
    epoch_losses = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = train_idx[rng.permutation(train_idx.size)]
        losses = []
        for start in range(0, order.size, config.batch_size):
            chunk = order[start : start + config.batch_size]
            x = Tensor(patches.batch(chunk).astype(np.float32))
            loss = cross_entropy(model(x, training=True), patches.labels[chunk])
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        mean_loss = float(np.mean(losses))
        epoch_losses.append(mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
        if max_steps is not None and step >= max_steps:
            break
    return {"epoch_losses": epoch_losses, "steps": step}
