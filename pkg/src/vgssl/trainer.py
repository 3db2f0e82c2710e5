"""Optimization loop, multi-seed experiments, and the mechanism audit.

One epoch is: draw the epoch's pairs (or mined triplets) from a
per-epoch seed, walk them in batches, backprop the method loss, take an
Adam step, and EMA-update the momentum target if the method has one.
Any trailing batch smaller than 2 is dropped because batch statistics
are undefined there.

Everything a run produces is reproducible from (method config, dataset,
train config, seed): per-epoch seeds are drawn from one master
generator, the optimizer is plain Adam with optional coupled or
decoupled weight decay, and evaluation embeds in eval mode only.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Value, zero_grads
from .costmodel import CostLedger
from .encoder import forward, init_state, momentum_update
from .geodata import GeoDataset
from .losses import Method
from .methods import MethodConfig, method_batch_loss, method_config, strategy_label
from .retrieval import RecallReport, build_index, recall_at_n
from .sampling import build_pairs, mine_triplets

__all__ = [
    "AdamState",
    "adam_init",
    "adam_step",
    "TrainConfig",
    "EpochRecord",
    "RunRecord",
    "TrainResult",
    "ExperimentResult",
    "default_lr",
    "train_epoch",
    "evaluate",
    "run_single",
    "run_experiment",
    "audit_gradient_flow",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Per-method base learning rates; contrastive pairs train an order of
# magnitude cooler than the rest.
_METHOD_LR = {
    Method.SIMCLR: 1e-5,
    Method.MOCOV2: 1e-5,
    Method.BYOL: 1e-4,
    Method.SIMSIAM: 1e-4,
    Method.BARLOW_TWINS: 1e-4,
    Method.VICREG: 1e-4,
    Method.TRIPLET: 1e-4,
}


def default_lr(method: Method) -> float:
    return _METHOD_LR[method]


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adam_init(params: dict[str, Value]) -> AdamState:
    return AdamState(
        m={n: np.zeros_like(p.data) for n, p in params.items()},
        v={n: np.zeros_like(p.data) for n, p in params.items()},
    )


def adam_step(
    params: dict[str, Value],
    opt: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    decoupled: bool = False,
) -> None:
    """One Adam update in place; parameters with no gradient get zero.

    Coupled weight decay adds ``wd * p`` to the gradient (the classic
    L2 form); decoupled subtracts ``lr * wd * p`` after the adaptive
    step.
    """
    opt.t += 1
    bc1 = 1.0 - ADAM_BETA1**opt.t
    bc2 = 1.0 - ADAM_BETA2**opt.t
    for name in sorted(params):
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay and not decoupled:
            g = g + weight_decay * p.data
        opt.m[name] = ADAM_BETA1 * opt.m[name] + (1.0 - ADAM_BETA1) * g
        opt.v[name] = ADAM_BETA2 * opt.v[name] + (1.0 - ADAM_BETA2) * (g * g)
        m_hat = opt.m[name] / bc1
        v_hat = opt.v[name] / bc2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        if weight_decay and decoupled:
            p.data -= lr * weight_decay * p.data


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 64
    queries_per_epoch: int = 256
    lr: float | None = None  # None: per-method default
    weight_decay: float = 1e-6
    decoupled_wd: bool = False
    seed: int = 0
    eval_every: int = 0  # 0: evaluate only after the final epoch
    recall_ns: tuple[int, ...] = (1, 5, 10)
    threshold_m: float = 25.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.queries_per_epoch < 1:
            raise ValueError("queries_per_epoch must be at least 1")
        if self.lr is not None and self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.eval_every < 0:
            raise ValueError("eval_every cannot be negative")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    per_term: dict[str, float]
    ledger: dict[str, int]
    recall: RecallReport | None = None


@dataclass
class RunRecord:
    label: str
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)
    wall_seconds: float = 0.0  # in-memory timing; never written to csv bodies

    @property
    def final_recall(self) -> RecallReport | None:
        for rec in reversed(self.epochs):
            if rec.recall is not None:
                return rec.recall
        return None

    @property
    def final_loss(self) -> float:
        return self.epochs[-1].loss


@dataclass
class TrainResult:
    record: RunRecord
    state: object  # EncoderState
    adam: AdamState


def _features(ds: GeoDataset, ids: list[int]) -> np.ndarray:
    return np.stack([ds.sample(i).features for i in ids])


def _epoch_m_q(ds: GeoDataset, tcfg: TrainConfig, need_negatives: bool) -> int:
    eligible = 0
    for q in ds.queries:
        if not ds.positive_set(q.id):
            continue
        if need_negatives and not ds.negative_set(q.id):
            continue
        eligible += 1
    if eligible == 0:
        raise ValueError("no usable queries in the dataset")
    return min(tcfg.queries_per_epoch, eligible)


def train_epoch(
    enc_state,
    adam: AdamState,
    mcfg: MethodConfig,
    ds: GeoDataset,
    tcfg: TrainConfig,
    epoch_seed: int,
    ledger: CostLedger,
) -> tuple[float, dict[str, float]]:
    """One pass over freshly drawn pairs or triplets.

    Returns (mean loss, per-term means), both weighted by batch size.
    """
    lr = tcfg.lr if tcfg.lr is not None else default_lr(mcfg.method)
    is_triplet = mcfg.method is Method.TRIPLET

    if is_triplet:
        m_q = _epoch_m_q(ds, tcfg, need_negatives=True)

        def embed(feats: np.ndarray) -> np.ndarray:
            return forward(enc_state, mcfg.encoder, feats, training=False).data

        triplets = mine_triplets(ds, m_q, mcfg.mining, embed, epoch_seed, ledger)
        anchors = [t.anchor_id for t in triplets]
        partners = [t.positive_id for t in triplets]
        negatives = [t.negative_id for t in triplets]
    else:
        m_q = _epoch_m_q(ds, tcfg, need_negatives=False)
        pairs = build_pairs(ds, m_q, mcfg.eta, epoch_seed, ledger)
        anchors = [p.anchor_id for p in pairs]
        partners = [p.partner_id for p in pairs]
        negatives = None

    total_loss = 0.0
    total_n = 0
    term_sums: dict[str, float] = {}
    for start in range(0, len(anchors), tcfg.batch_size):
        stop = start + tcfg.batch_size
        batch_ids = anchors[start:stop]
        n = len(batch_ids)
        if n < 2:
            continue  # batch statistics are undefined on a single pair
        a = _features(ds, batch_ids)
        p = _features(ds, partners[start:stop])
        neg = _features(ds, negatives[start:stop]) if negatives is not None else None
        out, _ = method_batch_loss(enc_state, mcfg, a, p, negatives=neg, training=True)
        out.node.backward()
        adam_step(
            enc_state.params,
            adam,
            lr,
            weight_decay=tcfg.weight_decay,
            decoupled=tcfg.decoupled_wd,
        )
        zero_grads(enc_state.params.values())
        if mcfg.encoder.momentum_target:
            momentum_update(enc_state, mcfg.encoder)
        total_loss += out.value * n
        total_n += n
        for key, val in out.per_term.items():
            term_sums[key] = term_sums.get(key, 0.0) + val * n
    if total_n == 0:
        raise ValueError(
            f"epoch produced no trainable batch: {len(anchors)} items at "
            f"batch_size {tcfg.batch_size}"
        )
    return total_loss / total_n, {k: v / total_n for k, v in term_sums.items()}


def evaluate(
    enc_state,
    mcfg: MethodConfig,
    ds: GeoDataset,
    n_values: tuple[int, ...] = (1, 5, 10),
    threshold_m: float = 25.0,
) -> RecallReport:
    """Recall over every dataset query, eval-mode embeddings."""
    index = build_index(enc_state, mcfg.encoder, ds)
    queries = sorted(ds.queries, key=lambda s: s.id)
    if not queries:
        raise ValueError("dataset has no queries to evaluate")
    q_emb = forward(
        enc_state, mcfg.encoder, np.stack([q.features for q in queries]), training=False
    ).data
    return recall_at_n(
        index, q_emb, [q.position for q in queries], n_values, threshold_m
    )


def run_single(
    mcfg: MethodConfig,
    ds: GeoDataset,
    tcfg: TrainConfig,
    seed: int,
    enc_state=None,
    adam: AdamState | None = None,
    start_epoch: int = 0,
) -> TrainResult:
    """Train one seed end to end; resumable via (enc_state, adam, start_epoch)."""
    t0 = time.perf_counter()
    if enc_state is None:
        enc_state = init_state(mcfg.encoder, seed)
    if adam is None:
        adam = adam_init(enc_state.params)
    record = RunRecord(label=strategy_label(mcfg), seed=seed)
    ledger = CostLedger()
    master = np.random.default_rng(seed)
    epoch_seeds = master.integers(0, 2**62, size=start_epoch + tcfg.epochs)
    for epoch in range(start_epoch, start_epoch + tcfg.epochs):
        loss, terms = train_epoch(
            enc_state, adam, mcfg, ds, tcfg, int(epoch_seeds[epoch]), ledger
        )
        is_last = epoch == start_epoch + tcfg.epochs - 1
        want_eval = is_last or (tcfg.eval_every > 0 and (epoch + 1) % tcfg.eval_every == 0)
        recall = (
            evaluate(enc_state, mcfg, ds, tcfg.recall_ns, tcfg.threshold_m)
            if want_eval
            else None
        )
        record.epochs.append(
            EpochRecord(
                epoch=epoch,
                loss=loss,
                per_term=terms,
                ledger=ledger.snapshot(),
                recall=recall,
            )
        )
    record.wall_seconds = time.perf_counter() - t0
    return TrainResult(record=record, state=enc_state, adam=adam)


@dataclass
class ExperimentResult:
    label: str
    seeds: tuple[int, ...]
    runs: list[RunRecord]
    recall_mean: dict[int, float]
    recall_std: dict[int, float]

    def summary_line(self) -> str:
        parts = [
            f"R@{n}={self.recall_mean[n]:.3f}+/-{self.recall_std[n]:.3f}"
            for n in sorted(self.recall_mean)
        ]
        return f"{self.label}: " + " ".join(parts)


def run_experiment(
    mcfg: MethodConfig, ds: GeoDataset, tcfg: TrainConfig, n_seeds: int = 3
) -> ExperimentResult:
    """Repeat a run across seeds; report mean and population std of recall.

    Seeds are ``tcfg.seed .. tcfg.seed + n_seeds - 1``.  Runs are
    independent, so they may execute on a small thread pool
    (``VGSSL_THREADS``, default 1); results merge in seed order either way.
    """
    if n_seeds < 1:
        raise ValueError("need at least one seed")
    seeds = tuple(tcfg.seed + i for i in range(n_seeds))
    workers = int(os.environ.get("VGSSL_THREADS", "1"))

    def one(seed: int) -> RunRecord:
        return run_single(mcfg, ds, replace(tcfg, seed=seed), seed).record

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(one, seeds))
    else:
        runs = [one(s) for s in seeds]

    finals = [r.final_recall for r in runs]
    if any(f is None for f in finals):
        raise RuntimeError("every run must end with an evaluation")
    recall_mean: dict[int, float] = {}
    recall_std: dict[int, float] = {}
    for n in finals[0].n_values:
        vals = np.array([f.as_dict()[n] for f in finals])
        recall_mean[n] = float(vals.mean())
        recall_std[n] = float(vals.std())  # population std across seeds
    return ExperimentResult(
        label=strategy_label(mcfg),
        seeds=seeds,
        runs=runs,
        recall_mean=recall_mean,
        recall_std=recall_std,
    )


# -- mechanism audit ---------------------------------------------------------


def audit_gradient_flow(method: Method, seed: int = 0) -> dict[str, bool]:
    """Verify each mechanism flag by direct inspection of gradient flow.

    Builds the method at its canonical small configuration, runs one
    batch, backprops, and checks what the flags promise:

    * momentum encoder: a target copy exists, is EMA-moved, and holds
      plain arrays that can never accumulate gradient;
    * stop gradient: the loss target side is a detached constant; for
      the stop-grad (non-EMA) variant it is bit-identical to the online
      forward, for the EMA variant it lags behind it;
    * predictor: prediction-head parameters exist and receive gradient;
    * projector batchnorm: scale/shift parameters exist and receive
      gradient;
    * with no momentum encoder and no stop gradient, both views stay
      tape-connected and both inputs receive gradient.

    Returns the individual check results plus an ``ok`` aggregate.
    """
    if method is Method.TRIPLET:
        raise ValueError("the mechanism table covers the pair methods only")
    from .losses import DegenerateInputError
    from .methods import TABLE_FLAGS  # local alias for readability

    flags = TABLE_FLAGS[method]
    needs_two_proj = flags.projector_batchnorm or method in (Method.BYOL, Method.SIMSIAM)
    mcfg = method_config(
        method,
        input_dim=6,
        hidden_dims=(8,),
        embed_dim=8,
        proj_layers=2 if needs_two_proj else 1,
        eta=0.0,
    )

    # A random init can kill a whole row through batchnorm + ReLU at these
    # widths, which the losses rightly reject; that says nothing about the
    # mechanism flags, so resample the instance and try again.
    last_err: Exception | None = None
    for attempt in range(20):
        enc_state = init_state(mcfg.encoder, seed + attempt)
        rng = np.random.default_rng(seed + attempt)
        anchors = Value(rng.normal(size=(6, 6)))
        partners = Value(rng.normal(size=(6, 6)))

        # Let the target lag the online parameters so EMA copies are
        # distinguishable from stopped online outputs.
        if mcfg.encoder.momentum_target:
            for p in enc_state.params.values():
                p.data += 0.05
            momentum_update(enc_state, mcfg.encoder)

        try:
            out, used = method_batch_loss(enc_state, mcfg, anchors, partners, training=True)
            out.node.backward()
            break
        except DegenerateInputError as err:
            last_err = err
    else:
        raise RuntimeError(f"audit could not find a usable instance: {last_err}")

    checks: dict[str, bool] = {}
    grads = {n: p.grad for n, p in enc_state.params.items()}

    def nonzero(name: str) -> bool:
        g = grads.get(name)
        return g is not None and bool(np.any(g != 0))

    # ME: target copy present, held as raw arrays, moved by EMA.
    if flags.momentum_encoder:
        checks["target_exists"] = enc_state.target is not None
        checks["target_not_trainable"] = all(
            isinstance(a, np.ndarray) for a in enc_state.target.values()
        )
        before = {n: a.copy() for n, a in enc_state.target.items()}
        momentum_update(enc_state, mcfg.encoder)
        m = mcfg.encoder.momentum
        moved_right = all(
            np.allclose(
                enc_state.target[n],
                m * before[n] + (1 - m) * enc_state.params[n].data,
            )
            for n in before
        )
        checks["target_ema_moves"] = moved_right
    else:
        checks["no_target_copy"] = enc_state.target is None or not mcfg.encoder.momentum_target

    # SG: the loss target side is a detached constant of the right provenance.
    target_used = used.target_partner is not None
    if flags.stop_gradient or flags.momentum_encoder:
        checks["target_side_detached"] = target_used
        online_view = forward(
            enc_state, mcfg.encoder, partners.data, branch="online", training=True
        ).data
        if flags.momentum_encoder:
            checks["target_is_lagged_copy"] = not np.allclose(
                used.target_partner, online_view
            )
        else:
            checks["target_is_stopped_online"] = np.array_equal(
                used.target_partner, online_view
            )
    else:
        checks["no_detached_branch"] = not target_used
        checks["both_views_tape_connected"] = (
            anchors.grad is not None
            and partners.grad is not None
            and bool(np.any(anchors.grad != 0))
            and bool(np.any(partners.grad != 0))
        )

    # Online branch always learns.
    checks["online_receives_gradient"] = nonzero("trunk.0.W")

    # PR: prediction head present and learning, or absent.
    if flags.predictor:
        checks["predictor_params_learn"] = nonzero("pred.0.W") and nonzero("pred.1.W")
    else:
        checks["no_predictor_params"] = not any(
            n.startswith("pred.") for n in enc_state.params
        )

    # BN: projector scale/shift present and learning, or absent.
    if flags.projector_batchnorm:
        checks["projector_bn_learns"] = nonzero("proj.0.bn.gamma") and nonzero(
            "proj.0.bn.beta"
        )
    else:
        checks["no_projector_bn"] = not any(
            ".bn.gamma" in n and n.startswith("proj.") for n in enc_state.params
        )

    checks["ok"] = all(checks.values())
    return checks
