"""Transfer analysis and a loss surface slice.

Attacks crafted against one model are scored on another; the cross
matrix's off-diagonal spread measures how well members cover for each
other. The surface grid at the end walks a plane through an adversarial
point (gradient direction plus a random orthogonal one) and renders the
local loss landscape as ASCII shading.

Run: python3 demos/05_transfer_and_surface.py  (about 10 s)
"""
from advens import analysis, data, training
from advens.attacks import AttackSpec, run_attack
from advens.ensembles import partition

EPS = 0.05
seed = 1

ds = data.gen_blobs(seed=seed, n_per_class=50, num_classes=3, dim=8, separation=3.0)
config = training.TrainConfig(
    attack=AttackSpec(family="pgd", steps=7, epsilon=EPS, eta=0.02, seed=seed),
    epochs=15, batch_size=30, seed=seed, mode="RM", lr=0.03,
)
init = training.init_ensemble(8, [24], 3, 2, seed=seed)
ens = training.train(init, ds, config, "CCE").ensemble

spec = AttackSpec(family="pgd", steps=10, epsilon=EPS, eta=EPS / 4, seed=100)
targets = list(ens.members) + [ens]
mat = analysis.cross_matrix(targets, ds, spec, labels=["f1", "f2", "en"])

print("accuracy of column model on rows' adversarial examples:")
print("        " + "".join(f"{l:>7}" for l in mat.labels))
for label, row in zip(mat.labels, mat.a):
    print(f"  {label:4} " + "".join(f"{v:7.1f}" for v in row))

t = analysis.transferability_T(mat, 0, 1)
print(f"\ntransferability T between members: {t:.1f} (smaller = attacks transfer more)")

adv = run_attack(ens, ds.inputs, ds.labels, spec).adversarial
part = partition(ens.members[0], ens.members[1], adv, ds.inputs, ds.labels, EPS)
a_en = mat.a[2, 2]
print(f"nT (successful but non-transferable): "
      f"{analysis.non_transferable_nT(a_en, part.cardinalities['S00']):.1f}")
print(f"a_single (ensemble saved by one member): "
      f"{analysis.single_correct_a_single(a_en, part.cardinalities['S11']):.1f}")

# loss surface around one adversarial point
i = 7
x_a = adv[i]
grid = analysis.surface_grid(ens, x_a, int(ds.labels[i]), radius_steps=8, step=0.02, seed=0)
lo, hi = grid.losses.min(), grid.losses.max()
shades = " .:-=+*#%@"
print(f"\nensemble CE in the (gradient, orthogonal) plane around adversarial point {i}")
print(f"center loss {grid.losses[8, 8]:.2f}, range [{lo:.2f}, {hi:.2f}], step 0.02:")
for row in grid.losses:
    scaled = (row - lo) / (hi - lo + 1e-12)
    print("  " + "".join(shades[int(s * (len(shades) - 1))] for s in scaled))
