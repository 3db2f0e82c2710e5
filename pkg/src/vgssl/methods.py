"""Per-method assembly: which branches exist and how they feed the loss.

Each method is a combination of four mechanisms on top of the shared
encoder: a momentum-averaged target branch (ME), a stop-gradient on the
partner branch (SG), a prediction head on the online branch (PR), and
batchnorm inside the projection head (BN).

=============  ====  ====  ====  ====
method          ME    SG    PR    BN
=============  ====  ====  ====  ====
contrastive      0     0     0     0
momentum         1     0     0     0
prediction+EMA   1     1     1     1
prediction       0     1     1     1
decorrelation    0     0     0     1
var/inv/cov      0     0     0     1
=============  ====  ====  ====  ====

``method_batch_loss`` is the single wiring point used by the trainer,
the gradient checker, and the mechanism audit, so what is tested is
exactly what trains.  For finite-difference checks the detached target
arrays can be captured once and re-fed (``frozen=``), keeping the
stop-gradient branch constant while parameters are perturbed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Value
from .encoder import EncoderConfig, EncoderState, forward, predictor_forward
from .losses import (
    LossBranches,
    LossConfig,
    LossOutput,
    Method,
    compute_loss,
    l2_normalize_rows,
)
from .sampling import MiningConfig, MiningMode

__all__ = [
    "MechanismFlags",
    "TABLE_FLAGS",
    "MethodConfig",
    "method_config",
    "strategy_label",
    "FrozenTargets",
    "method_batch_loss",
]


@dataclass(frozen=True)
class MechanismFlags:
    momentum_encoder: bool
    stop_gradient: bool
    predictor: bool
    projector_batchnorm: bool


TABLE_FLAGS: dict[Method, MechanismFlags] = {
    Method.SIMCLR: MechanismFlags(False, False, False, False),
    Method.MOCOV2: MechanismFlags(True, False, False, False),
    Method.BYOL: MechanismFlags(True, True, True, True),
    Method.SIMSIAM: MechanismFlags(False, True, True, True),
    Method.BARLOW_TWINS: MechanismFlags(False, False, False, True),
    Method.VICREG: MechanismFlags(False, False, False, True),
}

DISPLAY_NAMES = {
    Method.TRIPLET: "Triplet",
    Method.SIMCLR: "SimCLR",
    Method.MOCOV2: "MoCov2",
    Method.BYOL: "BYOL",
    Method.SIMSIAM: "SimSiam",
    Method.BARLOW_TWINS: "BT",
    Method.VICREG: "VICReg",
}


@dataclass(frozen=True)
class MethodConfig:
    method: Method
    loss: LossConfig
    encoder: EncoderConfig
    mining: MiningConfig
    eta: float = 1.0

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta cannot be negative")
        if self.method is not self.loss.method:
            raise ValueError("loss config belongs to a different method")
        if self.method is Method.TRIPLET:
            if self.encoder.has_target_branch or self.encoder.predictor:
                raise ValueError("triplet baseline uses the bare encoder")
        else:
            flags = TABLE_FLAGS[self.method]
            if self.encoder.momentum_target != flags.momentum_encoder:
                raise ValueError(f"{self.method.value}: momentum flag mismatch")
            expect_sg = flags.stop_gradient and not flags.momentum_encoder
            if self.encoder.stop_grad_target != expect_sg:
                raise ValueError(f"{self.method.value}: stop-gradient flag mismatch")
            if self.encoder.predictor != flags.predictor:
                raise ValueError(f"{self.method.value}: predictor flag mismatch")
            if self.encoder.proj_batchnorm != flags.projector_batchnorm:
                raise ValueError(f"{self.method.value}: projector batchnorm mismatch")


def method_config(
    method: Method,
    input_dim: int,
    hidden_dims: tuple[int, ...] = (64, 64),
    embed_dim: int = 64,
    proj_layers: int = 1,
    eta: float = 1.0,
    mining: MiningConfig | None = None,
    momentum: float = 0.99,
    **loss_overrides,
) -> MethodConfig:
    """Build a consistent method bundle from the mechanism table.

    ``proj_layers`` and ``embed_dim`` shape the projection head for the
    pair methods; the triplet baseline ignores them and embeds straight
    off the trunk.  Loss keyword overrides (``tau=``, ``margin=``, ...)
    pass through to ``LossConfig``.
    """
    loss = LossConfig(method=method, **loss_overrides)
    if method is Method.TRIPLET:
        enc = EncoderConfig(
            input_dim=input_dim,
            hidden_dims=hidden_dims,
            embed_dim=hidden_dims[-1] if hidden_dims else input_dim,
            identity_projection=True,
        )
        mining = mining or MiningConfig(mode=MiningMode.FULL_HNM)
        return MethodConfig(method=method, loss=loss, encoder=enc, mining=mining, eta=0.0)
    flags = TABLE_FLAGS[method]
    # Batchnorm sits between projection affines, so a single-layer head
    # has nowhere to put one; these methods are used with proj_layers >= 2.
    enc = EncoderConfig(
        input_dim=input_dim,
        hidden_dims=hidden_dims,
        embed_dim=embed_dim,
        proj_layers=proj_layers,
        proj_batchnorm=flags.projector_batchnorm,
        predictor=flags.predictor,
        momentum_target=flags.momentum_encoder,
        momentum=momentum,
        stop_grad_target=flags.stop_gradient and not flags.momentum_encoder,
    )
    return MethodConfig(
        method=method,
        loss=loss,
        encoder=enc,
        mining=mining or MiningConfig(mode=MiningMode.RANDOM),
        eta=eta,
    )


def strategy_label(mcfg: MethodConfig) -> str:
    """Human-readable run name, e.g. ``SimCLR-FC-1-2048-1``.

    Pair methods read ``<method>-FC-<projection layers>-<embed dim>-<eta>``.
    The triplet baseline is ``Triplet`` (full mining), ``Triplet-Random``,
    or ``Triplet-Partial``.
    """
    name = DISPLAY_NAMES[mcfg.method]
    if mcfg.method is Method.TRIPLET:
        suffix = {
            MiningMode.FULL_HNM: "",
            MiningMode.RANDOM: "-Random",
            MiningMode.PARTIAL_HNM: "-Partial",
        }[mcfg.mining.mode]
        return f"{name}{suffix}"
    eta = f"{mcfg.eta:g}"
    return f"{name}-FC-{mcfg.encoder.proj_layers}-{mcfg.encoder.embed_dim}-{eta}"


@dataclass
class FrozenTargets:
    """Detached target-branch outputs captured for finite differencing."""

    target_partner: np.ndarray | None = None
    target_query: np.ndarray | None = None


def _target_or_frozen(
    state: EncoderState,
    cfg: EncoderConfig,
    batch: np.ndarray,
    frozen_arr: np.ndarray | None,
    training: bool,
) -> Value:
    if frozen_arr is not None:
        return Value(frozen_arr)
    return forward(state, cfg, batch, branch="target", training=training)


def method_batch_loss(
    state: EncoderState,
    mcfg: MethodConfig,
    anchors: np.ndarray,
    partners: np.ndarray,
    negatives: np.ndarray | None = None,
    frozen: FrozenTargets | None = None,
    training: bool = True,
) -> tuple[LossOutput, FrozenTargets]:
    """One training step's loss for a batch of feature rows.

    ``anchors``/``partners`` hold one row per pair (identical-negative
    pairs repeat the same row); ``negatives`` only exists for triplets.
    Returns the loss plus the detached target outputs that were used, so
    a finite-difference harness can pin them with ``frozen=``.
    """
    m = mcfg.method
    enc = mcfg.encoder
    used = FrozenTargets()

    if m is Method.TRIPLET:
        if negatives is None:
            raise ValueError("triplet batches need a negatives matrix")
        branches = LossBranches(
            query=forward(state, enc, anchors, training=training),
            partner=forward(state, enc, partners, training=training),
            negative=forward(state, enc, negatives, training=training),
        )
        return compute_loss(mcfg.loss, branches), used

    if m in (Method.SIMCLR, Method.BARLOW_TWINS, Method.VICREG):
        branches = LossBranches(
            query=forward(state, enc, anchors, training=training),
            partner=forward(state, enc, partners, training=training),
        )
        return compute_loss(mcfg.loss, branches), used

    if m is Method.MOCOV2:
        q = forward(state, enc, anchors, training=training)
        k = _target_or_frozen(
            state, enc, partners, frozen.target_partner if frozen else None, training
        )
        used.target_partner = k.data
        branches = LossBranches(query=q, target_partner=k)
        return compute_loss(mcfg.loss, branches), used

    if m in (Method.BYOL, Method.SIMSIAM):
        z_a = forward(state, enc, anchors, training=training)
        p_a = predictor_forward(state, enc, l2_normalize_rows(z_a), training=training)
        t_b = _target_or_frozen(
            state, enc, partners, frozen.target_partner if frozen else None, training
        )
        used.target_partner = t_b.data
        branches = LossBranches(pred_query=p_a, target_partner=t_b)
        if mcfg.loss.symmetric:
            z_b = forward(state, enc, partners, training=training)
            p_b = predictor_forward(state, enc, l2_normalize_rows(z_b), training=training)
            t_a = _target_or_frozen(
                state, enc, anchors, frozen.target_query if frozen else None, training
            )
            used.target_query = t_a.data
            branches.pred_partner = p_b
            branches.target_query = t_a
        return compute_loss(mcfg.loss, branches), used

    raise ValueError(f"unhandled method {m}")
