"""The attack families and their contracts.

Every attack returns points inside the epsilon-ball intersected with the
data box, whatever else it does. PGD takes signed gradient steps with
projection, BIM is PGD without the random start, MIM adds a momentum
accumulator, and SPSA estimates gradients from random probes so it never
touches the model's internals.

Run: python3 demos/02_attacks.py
"""
import numpy as np

from advens import nn
from advens.attacks import AttackSpec, run_attack
from advens.data import gen_blobs


def fit_quick(ds, seed=0):
    model = nn.init_model(ds.dim, [16], ds.num_classes, seed=seed)
    state = nn.adam_init(model, lr=0.05)
    for _ in range(300):
        res = nn.backward(model, ds.inputs, [nn.LossTerm(kind="ce", labels=ds.labels)])
        model, state = nn.adam_step(model, res.param_grads, state)
    return model


ds = gen_blobs(seed=4, n_per_class=60, num_classes=3, dim=2, separation=3.0)
model = fit_quick(ds)
x, y = ds.inputs, ds.labels
clean_acc = (nn.predict(model, x) == y).mean() * 100
print(f"clean accuracy: {clean_acc:.1f}\n")

EPS = 0.08
specs = {
    "pgd": AttackSpec(family="pgd", steps=20, epsilon=EPS, eta=EPS / 4, seed=0),
    "bim": AttackSpec(family="bim", steps=20, epsilon=EPS, eta=EPS / 4),
    "mim": AttackSpec(family="mim", steps=20, epsilon=EPS, eta=EPS / 4),
    "spsa": AttackSpec(family="spsa", steps=10, epsilon=EPS, eta=EPS / 4,
                       spsa_samples=64, seed=0),
}

print(f"{'family':6} {'success%':>9} {'max |dx|':>9} {'queries':>8}")
for name, spec in specs.items():
    res = run_attack(model, x, y, spec)
    ball = np.abs(res.adversarial - x).max()
    print(f"{name:6} {res.success_mask.mean() * 100:9.1f} {ball:9.4f} {res.queries:8d}")
print(f"\nevery max |dx| stays within epsilon = {EPS}")

# success can only grow with the budget
print("\npgd success rate as the budget grows:")
for eps in (0.0, 0.02, 0.04, 0.08):
    spec = AttackSpec(family="pgd", steps=20, epsilon=eps, eta=max(eps / 4, 1e-3),
                      random_start=False, seed=0)
    rate = run_attack(model, x, y, spec).success_mask.mean() * 100
    print(f"  eps={eps:4.2f}  success {rate:5.1f}")
