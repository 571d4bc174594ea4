"""Collaborative training in robustness mode versus the ablation.

Each member trains on every member's adversarial examples. A soft gate
(the member's own probability on the true label, treated as a constant)
decides per example whether a crossed batch is promoted toward the label
or demoted toward uniform. Robustness mode (lambda_pm = lambda_dm = 1)
pushes adversarial examples into the jointly-secure region; the ablation
(both zero) reduces to independent adversarial training.

Run: python3 demos/03_collaborative_training.py  (about 10 s)
"""
import numpy as np

from advens import analysis, data, training
from advens.attacks import AttackSpec, run_attack
from advens.ensembles import partition

EPS = 0.05


def train_mode(mode, seed=0):
    ds = data.gen_blobs(seed=seed, n_per_class=50, num_classes=3, dim=8, separation=3.0)
    config = training.TrainConfig(
        attack=AttackSpec(family="pgd", steps=7, epsilon=EPS, eta=0.02, seed=seed),
        epochs=15, batch_size=30, seed=seed, mode=mode, lr=0.03,
    )
    init = training.init_ensemble(8, [24], 3, 2, seed=seed)
    return ds, training.train(init, ds, config, "CCE")


for mode in ("RM", "Base"):
    ds, report = train_mode(mode)
    ens = report.ensemble
    eval_spec = AttackSpec(family="pgd", steps=10, epsilon=EPS, eta=EPS / 4, seed=100)
    adv = run_attack(ens, ds.inputs, ds.labels, eval_spec).adversarial
    part = partition(ens.members[0], ens.members[1], adv, ds.inputs, ds.labels, EPS)

    print(f"mode {mode}  (lambda_pm={report.lambda_pm}, lambda_dm={report.lambda_dm})")
    last = report.epochs[-1]
    terms = last.member_terms[0]
    print(
        f"  final member-0 loss parts: clean_ce={terms['clean_ce']:.3f} "
        f"dpo_ce={terms['dpo_ce']:.3f} cpo_ce={terms['cpo_ce']:.3f} "
        f"do_h={terms['do_h']:.3f}"
    )
    print(f"  natural {analysis.natural_accuracy(ens, ds):.1f}  "
          f"robust {analysis.robust_accuracy(ens, ds, eval_spec):.1f}")
    print("  attacked points by member correctness: "
          + "  ".join(f"{t}={part.cardinalities[t]:.1f}" for t in ("S11", "S01", "S10", "S00")))
    print()

print("RM grows the jointly-correct share S11 relative to the ablation;")
print("single seed shown here, the test suite averages five.")
