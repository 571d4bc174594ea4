"""Small trained models shared by the test modules.

Training here is plain cross-entropy with Adam, built directly on the nn
primitives so that attack/analysis tests do not depend on the training
module they help validate.
"""
import numpy as np

from advens import data, nn


def fit_plain(dataset, hidden=(16,), steps=400, lr=0.05, seed=0, batch=None):
    model = nn.init_model(dataset.dim, list(hidden), dataset.num_classes, seed=seed)
    state = nn.adam_init(model, lr=lr)
    x, y = dataset.inputs, dataset.labels
    rng = np.random.default_rng(seed + 1)
    n = len(dataset)
    for _ in range(steps):
        if batch is None:
            bx, by = x, y
        else:
            idx = rng.integers(0, n, size=batch)
            bx, by = x[idx], y[idx]
        res = nn.backward(model, bx, [nn.LossTerm(kind="ce", labels=by)])
        model, state = nn.adam_step(model, res.param_grads, state)
    return model


def blobs_and_model(seed=0, num_classes=3, dim=2, separation=4, hidden=(16,)):
    ds = data.gen_blobs(
        seed=seed, n_per_class=60, num_classes=num_classes, dim=dim, separation=separation
    )
    return ds, fit_plain(ds, hidden=hidden, seed=seed)
