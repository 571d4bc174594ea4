"""Adversarial training losses and the training loop.

Four methods share one loop:

  ADV     every member independently minimizes clean CE + CE on its own
          adversarial examples.
  ADV_EN  the ensemble is treated as one model: adversarial examples are
          generated against the averaged probability and the loss is the
          cross-entropy of that average (clean + adversarial).
  ADP     ADV_EN plus a subtracted diversity regularizer
          alpha*H(mean probs) + beta*log(ensemble diversity), applied at
          both the clean and the adversarial batch.
  CCE     collaborative training: each member sees every member's
          adversarial batch. On its own batch it minimizes CE (the direct
          promote term); on another member's batch a soft gate p(true
          label) switches between a promote CE term (weight lambda_pm *
          gate) and a demote entropy term (weight lambda_dm * (1 - gate)).
          Gates are treated as constants: no gradient flows through them.

Per-member loss decomposition, with the sign convention
total = clean_ce + dpo_ce + cpo_ce - do_h (+ method-specific extras):

  clean_ce  CE on the clean batch
  dpo_ce    CE on the member's own adversarial batch (promote, direct)
  cpo_ce    gated promote CE on other members' batches (crossing)
  do_h      gated demote entropy on other members' batches

Every stochastic choice (batch order, per-batch attack seeds, evaluation
attacks) derives from the master seed via named seed lineage, so a run is
reproducible bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import data, nn
from .attacks import AttackSpec, run_attack
from .ensembles import Ensemble, ensemble_predict, predict_labels
from .errors import ConfigError, DivergenceError

METHODS = ("ADV", "ADV_EN", "ADP", "CCE")
MODES = {"RM": (1.0, 1.0), "DM": (0.0, 5.0), "Base": (0.0, 0.0)}
ED_FLOOR = 1e-30

# seed-lineage tags (arbitrary fixed ints; only distinctness matters)
_TAG_SHUFFLE, _TAG_EVAL, _TAG_ATTACK, _TAG_ENS_ATTACK = 1, 2, 3, 4


@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters.

    mode is one of RM / DM / Base / custom. The named modes pin
    (lambda_pm, lambda_dm) to (1,1) / (0,5) / (0,0); passing lambdas that
    disagree with a named mode is a configuration error. alpha and beta
    only matter for the ADP method.
    """

    attack: AttackSpec
    epochs: int
    batch_size: int
    seed: int
    mode: str = "custom"
    lambda_pm: float | None = None
    lambda_dm: float | None = None
    lr: float = 0.001
    alpha: float = 2.0
    beta: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES and self.mode != "custom":
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode in MODES:
            pm, dm = MODES[self.mode]
            if self.lambda_pm is None:
                object.__setattr__(self, "lambda_pm", pm)
            if self.lambda_dm is None:
                object.__setattr__(self, "lambda_dm", dm)
            if (self.lambda_pm, self.lambda_dm) != (pm, dm):
                raise ConfigError(
                    f"mode {self.mode} requires lambdas {(pm, dm)}, got "
                    f"{(self.lambda_pm, self.lambda_dm)}"
                )
        else:
            if self.lambda_pm is None or self.lambda_dm is None:
                raise ConfigError("custom mode needs explicit lambda_pm and lambda_dm")
        if self.lambda_pm < 0 or self.lambda_dm < 0:
            raise ConfigError("lambdas must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")


def derive_seed(*parts):
    """Deterministic child seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def init_ensemble(input_dim, hidden, num_classes, n_members, seed):
    """Identically shaped members, independently initialized from
    seed + member index."""
    members = tuple(
        nn.init_model(input_dim, hidden, num_classes, seed=seed + i)
        for i in range(n_members)
    )
    return Ensemble(members=members)


# ---------------------------------------------------------------------------
# loss pieces


def promote_loss(f, x_a, y):
    """CE of f on a batch: the promote objective (push toward the label)."""
    return nn.cross_entropy(nn.forward(f, x_a), y)


def demote_loss(f, x_a):
    """Mean prediction entropy: the demote objective (to be maximized, so
    it enters training losses with a negative sign)."""
    return float(np.mean(nn.entropy(nn.forward(f, x_a))))


def soft_indicator(f, x_a, y):
    """p(true label) per example, returned as plain values.

    The caller must treat these as constants (no gradient flows through
    them); the training loop realizes that by feeding them to the backward
    pass as fixed per-example weights.
    """
    probs = nn.forward(f, x_a)
    return probs[np.arange(probs.shape[0]), np.asarray(y, dtype=np.int64)]


def member_collab_loss(n, ens, x, y, adv_set, lambda_pm, lambda_dm, indicators=None):
    """Value of the collaborative loss for member n. Returns (total, parts).

    adv_set[i] is the batch crafted against member i. parts carries the
    four decomposition terms plus the mean gate values cpo_gate / do_gate.
    indicators optionally overrides the soft gates (one array per other
    member, keyed by member index): a testing seam that makes the
    gates-as-constants contract checkable by finite differences.
    """
    members = ens.members
    if len(members) < 2:
        raise ConfigError("collaborative loss needs at least 2 members")
    if len(adv_set) != len(members):
        raise ConfigError(f"adv_set has {len(adv_set)} batches for {len(members)} members")
    f = members[n]
    share = 1.0 / (len(members) - 1)
    clean_ce = promote_loss(f, x, y)
    dpo_ce = promote_loss(f, adv_set[n], y)
    cpo_ce = 0.0
    do_h = 0.0
    gate_sum = 0.0
    for i in range(len(members)):
        if i == n:
            continue
        probs = nn.forward(f, adv_set[i])
        gate = (
            indicators[i]
            if indicators is not None
            else probs[np.arange(probs.shape[0]), np.asarray(y, dtype=np.int64)]
        )
        ce = nn.cross_entropy_per_example(probs, y)
        h = nn.entropy(probs)
        cpo_ce += share * lambda_pm * float(np.mean(gate * ce))
        do_h += share * lambda_dm * float(np.mean((1.0 - gate) * h))
        gate_sum += share * float(np.mean(gate))
    total = clean_ce + dpo_ce + cpo_ce - do_h
    parts = {
        "clean_ce": clean_ce,
        "dpo_ce": dpo_ce,
        "cpo_ce": cpo_ce,
        "do_h": do_h,
        "cpo_gate": gate_sum,
        "do_gate": 1.0 - gate_sum,
    }
    return total, parts


def _member_collab_grads(n, members, x, y, adv_set, lambda_pm, lambda_dm, indicators=None):
    """(total, parts, param_grads) for member n; gates enter the backward
    pass as constant per-example weights."""
    f = members[n]
    share = 1.0 / (len(members) - 1)
    res_clean = nn.backward(f, x, [nn.LossTerm(kind="ce", labels=y)])
    res_own = nn.backward(f, adv_set[n], [nn.LossTerm(kind="ce", labels=y)])
    grads = [
        (gw1 + gw2, gb1 + gb2)
        for (gw1, gb1), (gw2, gb2) in zip(res_clean.param_grads, res_own.param_grads)
    ]
    cpo_ce = 0.0
    do_h = 0.0
    gate_sum = 0.0
    for i in range(len(members)):
        if i == n:
            continue
        if indicators is not None:
            gate = indicators[i]
        else:
            gate = soft_indicator(f, adv_set[i], y)
        terms = [
            nn.LossTerm(kind="ce", labels=y, weight=share * lambda_pm * gate),
            nn.LossTerm(kind="entropy", weight=-share * lambda_dm * (1.0 - gate)),
        ]
        res = nn.backward(f, adv_set[i], terms)
        grads = [
            (gw + dw, gb + db) for (gw, gb), (dw, db) in zip(grads, res.param_grads)
        ]
        probs = nn.forward(f, adv_set[i])
        cpo_ce += share * lambda_pm * float(
            np.mean(gate * nn.cross_entropy_per_example(probs, y))
        )
        do_h += share * lambda_dm * float(np.mean((1.0 - gate) * nn.entropy(probs)))
        gate_sum += share * float(np.mean(gate))
    total = res_clean.loss + res_own.loss + cpo_ce - do_h
    parts = {
        "clean_ce": res_clean.loss,
        "dpo_ce": res_own.loss,
        "cpo_ce": cpo_ce,
        "do_h": do_h,
        "cpo_gate": gate_sum,
        "do_gate": 1.0 - gate_sum,
    }
    return total, parts, grads


def ensemble_adv_loss(ens, x, y, x_a_en):
    """Unified-model adversarial training loss: CE of the averaged
    probability on the clean and on the ensemble-attacked batch."""
    clean = nn.cross_entropy(ensemble_predict(ens, x), y)
    adv = nn.cross_entropy(ensemble_predict(ens, x_a_en), y)
    return clean + adv, {"clean_ce": clean, "dpo_ce": adv, "cpo_ce": 0.0, "do_h": 0.0}


def _mean_ce_grads_per_member(members, x, y, weight=1.0):
    """CE of the averaged probability: value plus per-member param grads."""
    caches = [nn.forward_cached(m, x)[1] for m in members]
    mean_probs = np.mean([c.probs for c in caches], axis=0)
    value = nn.cross_entropy(mean_probs, y)
    b = x.shape[0]
    idx = np.arange(b)
    y = np.asarray(y, dtype=np.int64)
    p_y = mean_probs[idx, y]
    g_mean = np.zeros_like(mean_probs)
    live = p_y > nn.LOG_FLOOR
    g_mean[idx, y] = np.where(live, -weight / (b * np.maximum(p_y, nn.LOG_FLOOR)), 0.0)
    share = g_mean / len(members)
    grads = [nn.backprop(m, c, share)[0] for m, c in zip(members, caches)]
    return value, grads, caches, mean_probs


def _add_grads(a, b):
    return [(gw + dw, gb + db) for (gw, gb), (dw, db) in zip(a, b)]


def _ensemble_adv_grads(members, x, y, x_a_en):
    v1, g1, _, _ = _mean_ce_grads_per_member(members, x, y)
    v2, g2, _, _ = _mean_ce_grads_per_member(members, x_a_en, y)
    parts = {"clean_ce": v1, "dpo_ce": v2, "cpo_ce": 0.0, "do_h": 0.0}
    return v1 + v2, parts, [_add_grads(a, b) for a, b in zip(g1, g2)]


# ---------------------------------------------------------------------------
# diversity regularizer (ADP baseline)


def _entropy_rows(p):
    plogp = np.where(p > 0.0, p * np.log(np.maximum(p, nn.LOG_FLOOR)), 0.0)
    return -plogp.sum(axis=-1)


def diversity_regularizer(member_probs, y, alpha, beta):
    """alpha*H(mean probs) + beta*log(ensemble diversity), batch mean.

    member_probs has shape (N, M) for one example or (N, B, M) for a
    batch; y is the true label (scalar or per-example). The ensemble
    diversity is the Gram determinant of the L2-normalized member
    probability rows with the true-label entry removed; determinants
    below 1e-30 are clamped before the log. Returns (value,
    clamped_count).
    """
    value, _, clamped = _diversity_value_and_grads(member_probs, y, alpha, beta)
    return value, clamped


def _diversity_value_and_grads(member_probs, y, alpha, beta):
    probs = np.asarray(member_probs, dtype=np.float64)
    single = probs.ndim == 2
    if single:
        probs = probs[:, None, :]
    n, b, m = probs.shape
    if n < 2:
        raise ConfigError("diversity regularizer needs at least 2 members")
    y = np.asarray(y)
    if y.ndim == 0:
        y = np.full(b, int(y))
    y = y.astype(np.int64)
    idx = np.arange(b)

    grads = np.zeros_like(probs)
    mean_p = probs.mean(axis=0)
    h_vals = _entropy_rows(mean_p)
    # d(alpha*H(mean))/dp^n = alpha/N * -(log mean_p + 1) where mean_p > 0
    g_h = np.where(mean_p > 0.0, -(np.log(np.maximum(mean_p, nn.LOG_FLOOR)) + 1.0), 0.0)
    grads += alpha * g_h[None, :, :] / n

    keep = np.ones(m, dtype=bool)
    log_ed = np.zeros(b)
    clamped = 0
    for e in range(b):
        keep[:] = True
        keep[y[e]] = False
        v = probs[:, e, :][:, keep]  # (N, M-1)
        r = np.sqrt((v * v).sum(axis=1))
        if np.any(r == 0.0):
            log_ed[e] = np.log(ED_FLOOR)
            clamped += 1
            continue
        vt = v / r[:, None]
        gram = vt @ vt.T
        det = float(np.linalg.det(gram))
        if det < ED_FLOOR:
            log_ed[e] = np.log(ED_FLOOR)
            clamped += 1
            continue
        log_ed[e] = np.log(det)
        try:
            g_vt = 2.0 * np.linalg.solve(gram, vt)  # d log det / d vt
        except np.linalg.LinAlgError:
            clamped += 1
            continue
        # back through the row normalization
        g_v = (g_vt - vt * (vt * g_vt).sum(axis=1, keepdims=True)) / r[:, None]
        scatter = np.zeros((n, m))
        scatter[:, keep] = beta * g_v
        grads[:, e, :] += scatter

    values = alpha * h_vals + beta * log_ed
    # batch-mean reduction
    value = float(np.mean(values))
    grads = grads / b
    if single:
        grads = grads[:, 0, :]
    return value, grads, clamped


def _adp_grads(members, x, y, x_a_en, alpha, beta):
    """ADV_EN loss minus the regularizer at the clean and attacked batch."""
    total, parts, grads = _ensemble_adv_grads(members, x, y, x_a_en)
    clamped = 0
    reg_parts = {}
    for tag, batch in (("clean", x), ("adv", x_a_en)):
        caches = [nn.forward_cached(m, batch)[1] for m in members]
        probs = np.stack([c.probs for c in caches])
        value, g_probs, flag = _diversity_value_and_grads(probs, y, alpha, beta)
        clamped += flag
        reg_parts[f"adp_reg_{tag}"] = value
        total -= value
        for i, (m, c) in enumerate(zip(members, caches)):
            g, _ = nn.backprop(m, c, -g_probs[i])
            grads[i] = _add_grads(grads[i], g)
    parts.update(reg_parts)
    return total, parts, grads, clamped


# ---------------------------------------------------------------------------
# reports and the loop


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    member_terms: tuple  # one dict per member
    nat_acc: float
    rob_acc: float


@dataclass(frozen=True)
class TrainReport:
    method: str
    mode: str
    lambda_pm: float
    lambda_dm: float
    seed: int
    member_seeds: tuple
    attack: AttackSpec
    epochs: tuple  # of EpochStats
    ensemble: Ensemble
    adp_clamped: int = 0


CSV_COLUMNS = ("epoch", "member", "clean_ce", "dpo_ce", "cpo_ce", "do_h", "nat_acc", "rob_acc")


def report_rows(report):
    """Per-epoch, per-member CSV rows matching CSV_COLUMNS."""
    rows = []
    for ep in report.epochs:
        for i, terms in enumerate(ep.member_terms):
            rows.append(
                (
                    ep.epoch,
                    i,
                    terms["clean_ce"],
                    terms["dpo_ce"],
                    terms["cpo_ce"],
                    terms["do_h"],
                    ep.nat_acc,
                    ep.rob_acc,
                )
            )
    return rows


def save_report_csv(report, path, preamble=""):
    with open(path, "w", newline="") as f:
        if preamble:
            f.write(preamble)
        f.write(",".join(CSV_COLUMNS) + "\n")
        for row in report_rows(report):
            cells = [str(row[0]), str(row[1])] + [repr(float(v)) for v in row[2:]]
            f.write(",".join(cells) + "\n")


def report_to_dict(report):
    return {
        "method": report.method,
        "mode": report.mode,
        "lambda_pm": report.lambda_pm,
        "lambda_dm": report.lambda_dm,
        "seed": report.seed,
        "member_seeds": list(report.member_seeds),
        "attack": vars(report.attack) | {},
        "adp_clamped": report.adp_clamped,
        "epochs": [
            {
                "epoch": ep.epoch,
                "members": [dict(t) for t in ep.member_terms],
                "nat_acc": ep.nat_acc,
                "rob_acc": ep.rob_acc,
            }
            for ep in report.epochs
        ],
    }


def train(ens_init, dataset, config, method):
    """Run the training loop; returns a TrainReport with the final ensemble.

    Per batch: adversarial batches are generated against the current
    members (per member for ADV/CCE, against the averaged prediction for
    ADV_EN/ADP) with fresh per-batch attack seeds derived from the master
    seed; every member's gradient is computed against the same parameter
    snapshot; all members step together.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    if dataset.num_classes != ens_init.num_classes:
        raise ConfigError(
            f"dataset has {dataset.num_classes} classes, ensemble {ens_init.num_classes}"
        )
    if dataset.dim != ens_init.input_dim:
        raise ConfigError(f"dataset dim {dataset.dim} != model input {ens_init.input_dim}")
    n = len(ens_init)
    if method in ("CCE", "ADP") and n < 2:
        raise ConfigError(f"{method} needs at least 2 members")
    members = list(ens_init.members)
    states = [nn.adam_init(m, lr=config.lr) for m in members]
    clamped = 0
    stats = []
    for epoch in range(config.epochs):
        sums = [dict() for _ in range(n)]
        seen = 0
        shuffle_seed = derive_seed(config.seed, _TAG_SHUFFLE, epoch)
        for b_idx, (bx, by) in enumerate(
            data.batches(dataset, config.batch_size, seed=shuffle_seed)
        ):
            snapshot = Ensemble(members=tuple(members))
            if method in ("ADV", "CCE"):
                adv_set = [
                    run_attack(
                        members[i],
                        bx,
                        by,
                        replace(
                            config.attack,
                            seed=derive_seed(config.seed, _TAG_ATTACK, epoch, b_idx, i),
                        ),
                    ).adversarial
                    for i in range(n)
                ]
            else:
                adv_en = run_attack(
                    snapshot,
                    bx,
                    by,
                    replace(
                        config.attack,
                        seed=derive_seed(config.seed, _TAG_ENS_ATTACK, epoch, b_idx),
                    ),
                ).adversarial

            if method == "ADV":
                per_member = []
                for i in range(n):
                    res_c = nn.backward(members[i], bx, [nn.LossTerm(kind="ce", labels=by)])
                    res_a = nn.backward(
                        members[i], adv_set[i], [nn.LossTerm(kind="ce", labels=by)]
                    )
                    parts = {
                        "clean_ce": res_c.loss,
                        "dpo_ce": res_a.loss,
                        "cpo_ce": 0.0,
                        "do_h": 0.0,
                    }
                    per_member.append(
                        (res_c.loss + res_a.loss, parts, _add_grads(res_c.param_grads, res_a.param_grads))
                    )
            elif method == "CCE":
                per_member = [
                    _member_collab_grads(
                        i, members, bx, by, adv_set, config.lambda_pm, config.lambda_dm
                    )
                    for i in range(n)
                ]
            elif method == "ADV_EN":
                total, parts, grads = _ensemble_adv_grads(members, bx, by, adv_en)
                per_member = [(total, parts, grads[i]) for i in range(n)]
            else:  # ADP
                total, parts, grads, flag = _adp_grads(
                    members, bx, by, adv_en, config.alpha, config.beta
                )
                clamped += flag
                per_member = [(total, parts, grads[i]) for i in range(n)]

            for i, (total, parts, grads) in enumerate(per_member):
                if not np.isfinite(total):
                    raise DivergenceError(
                        f"non-finite loss for member {i} at epoch {epoch} batch {b_idx}"
                    )
                for key, v in parts.items():
                    sums[i][key] = sums[i].get(key, 0.0) + v * len(by)
            seen += len(by)
            for i, (_, _, grads) in enumerate(per_member):
                members[i], states[i] = nn.adam_step(members[i], grads, states[i])

        ens_now = Ensemble(members=tuple(members))
        nat_acc = 100.0 * float(
            np.mean(predict_labels(ens_now, dataset.inputs) == dataset.labels)
        )
        eval_spec = replace(config.attack, seed=derive_seed(config.seed, _TAG_EVAL, epoch))
        adv_eval = run_attack(ens_now, dataset.inputs, dataset.labels, eval_spec)
        rob_acc = 100.0 * float(
            np.mean(predict_labels(ens_now, adv_eval.adversarial) == dataset.labels)
        )
        member_terms = tuple(
            {k: v / seen for k, v in sums[i].items()} for i in range(n)
        )
        stats.append(
            EpochStats(epoch=epoch, member_terms=member_terms, nat_acc=nat_acc, rob_acc=rob_acc)
        )

    return TrainReport(
        method=method,
        mode=config.mode,
        lambda_pm=float(config.lambda_pm),
        lambda_dm=float(config.lambda_dm),
        seed=config.seed,
        member_seeds=tuple(m.seed for m in ens_init.members),
        attack=config.attack,
        epochs=tuple(stats),
        ensemble=Ensemble(members=tuple(members)),
        adp_clamped=clamped,
    )
