"""Training loop tying the pieces together, plus the two ablation sweeps.

Each epoch shuffles the bank under a seed-derived substream, walks it in
batches, and takes one two-pass sharpness-aware AdamW step per batch with
the cosine-annealed learning rate for that epoch. Dropout masks are drawn
once per batch and replayed on the second pass; batch-norm running stats are
committed by the first pass only. After every epoch the current parameters
are scored on the validation bank and the best checkpoint by validation AUC
(earlier epoch wins ties) is kept.

The per-epoch log format written by :func:`format_train_log` is
``epoch=E loss=L lr=R val_auc=A val_acc=C val_eer=X skipped_auc_batches=K``
and reruns with the same config and banks reproduce it byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .bank import FeatureBank, class_counts
from .losses import (
    UNIT_VS,
    AucConfig,
    CvarConfig,
    LossBreakdown,
    VsParams,
    default_omegas,
    total_loss,
)
from .metrics import EvalReport, classification_report
from .mlp import (
    EVAL,
    TRAIN,
    MlpParams,
    MlpSpec,
    forward,
    backward,
    hidden_dims_for_depth,
    init_params,
    predict_logits,
)
from .optim import (
    AdamWConfig,
    AdamWState,
    CosineSchedule,
    NumericError,
    SamConfig,
    lr_at,
    sam_update,
)

CVAR_VS_AUC = "cvar_vs_auc"
CE_AUC = "ce_auc"
LOSS_KINDS = (CVAR_VS_AUC, CE_AUC)

ABLATION_DEPTHS = (3, 6, 9, 12, 15)


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on besides the banks themselves.

    ``beta_noise`` is the augmentation strength used by front ends that double
    the bank before calling :func:`train`; the loop itself never re-augments.
    """

    max_iterations: int = 100
    batch_size: int = 256
    seed: int = 8079
    alpha: float = 0.9
    gamma: float = 0.6
    nu: float = 0.1
    beta_noise: float = 0.5
    loss_kind: str = CVAR_VS_AUC
    mlp: MlpSpec = field(default_factory=MlpSpec)
    adamw: AdamWConfig = field(default_factory=AdamWConfig)
    schedule: CosineSchedule = field(default_factory=CosineSchedule)

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if not (np.isfinite(self.alpha) and 0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")
        if not (np.isfinite(self.nu) and self.nu >= 0):
            raise ValueError(f"nu must be finite and >= 0, got {self.nu}")
        if not (np.isfinite(self.beta_noise) and self.beta_noise >= 0):
            raise ValueError(f"beta_noise must be finite and >= 0, got {self.beta_noise}")
        if self.schedule.total_epochs < self.max_iterations:
            raise ValueError(
                f"schedule covers {self.schedule.total_epochs} epochs but "
                f"max_iterations is {self.max_iterations}"
            )


@dataclass(frozen=True)
class TrainRecord:
    """One epoch line: mean batch loss, the lr used, and validation metrics."""

    epoch: int
    mean_loss: float
    lr: float
    report: EvalReport
    skipped_auc_batches: int


@dataclass
class TrainOutcome:
    best_params: MlpParams
    best_epoch: int
    final_params: MlpParams
    final_state: AdamWState
    records: list[TrainRecord]

    @property
    def best_record(self) -> TrainRecord:
        return self.records[self.best_epoch]


def loss_setup(config: TrainConfig, counts) -> tuple[VsParams, CvarConfig]:
    """Loss pieces for a loss kind.

    ``cvar_vs_auc`` uses inverse-frequency class weights with the default
    multipliers/margins and tail level ``config.alpha``; the ``ce_auc``
    baseline is plain logistic loss under a batch mean (unit parameters,
    tail level 1).
    """
    if config.loss_kind == CE_AUC:
        return UNIT_VS, CvarConfig(alpha=1.0)
    omega_fake, omega_real = default_omegas(counts.n_real, counts.n_fake)
    return (
        replace(VsParams(), omega_fake=omega_fake, omega_real=omega_real),
        CvarConfig(alpha=config.alpha),
    )


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch, 0]).permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # a trailing singleton cannot be batch-normalized; drop it
    if batches and batches[-1].size < 2:
        batches.pop()
    return batches


def _batch_grad_fn(spec, running, x, y, rng, vs, cvar_cfg, auc_cfg):
    """Gradient closure for one batch, usable for both passes of a SAM step.

    The first call draws dropout masks from ``rng`` and commits batch-norm
    running stats; later calls replay the same masks and leave the running
    stats alone, so both passes see identical network stochasticity.
    """
    holder: dict[str, object] = {"masks": None, "first": True}

    def grad_fn(trainable):
        params = MlpParams(spec=spec, trainable=trainable, running=running)
        if holder["first"]:
            logits, cache = forward(params, x, TRAIN, rng=rng, update_running=True)
            holder["masks"] = cache.dropout_masks
            holder["first"] = False
        else:
            logits, cache = forward(
                params, x, TRAIN, dropout_masks=holder["masks"], update_running=False
            )
        if not np.isfinite(logits).all():
            raise NumericError("non-finite logits in training batch")
        breakdown = total_loss(logits, y, vs, cvar_cfg, auc_cfg)
        grads = backward(params, cache, breakdown.per_logit_gradient)
        return breakdown, grads

    return grad_fn


def train(train_bank: FeatureBank, val_bank: FeatureBank, config: TrainConfig) -> TrainOutcome:
    """Run the full loop and return best/final parameters with epoch records."""
    if train_bank.dim != val_bank.dim:
        raise ValueError(
            f"train bank dim {train_bank.dim} != validation bank dim {val_bank.dim}"
        )
    if config.mlp.input_dim != train_bank.dim:
        raise ValueError(
            f"model expects input_dim {config.mlp.input_dim} but banks have dim {train_bank.dim}"
        )
    counts = class_counts(train_bank)
    if counts.n_real == 0 or counts.n_fake == 0:
        raise ValueError("training bank must contain both classes")
    val_counts = class_counts(val_bank)
    if val_counts.n_real == 0 or val_counts.n_fake == 0:
        raise ValueError("validation bank must contain both classes")

    vs, cvar_cfg = loss_setup(config, counts)
    auc_cfg = AucConfig(gamma=config.gamma)
    sam_cfg = SamConfig(nu=config.nu)

    params = init_params(config.mlp, config.seed)
    state = AdamWState.initial(params.trainable)
    x_all = train_bank.features.astype(np.float64)
    y_all = train_bank.labels

    records: list[TrainRecord] = []
    best_params: MlpParams | None = None
    best_epoch = -1
    best_auc = -np.inf

    for epoch in range(config.max_iterations):
        lr = lr_at(config.schedule, config.adamw, epoch)
        batch_losses: list[float] = []
        skipped = 0
        for batch_idx, idx in enumerate(
            _epoch_batches(len(train_bank), config.batch_size, config.seed, epoch)
        ):
            rng = np.random.default_rng([config.seed, epoch, batch_idx, 1])
            grad_fn = _batch_grad_fn(
                config.mlp, params.running, x_all[idx], y_all[idx], rng, vs, cvar_cfg, auc_cfg
            )
            try:
                new_trainable, state, breakdown = sam_update(
                    params.trainable, grad_fn, state, lr, config.adamw, sam_cfg
                )
            except NumericError as exc:
                raise NumericError(f"{exc} (epoch {epoch}, batch {batch_idx})") from None
            if not np.isfinite(breakdown.total):
                raise NumericError(
                    f"non-finite training loss {breakdown.total} (epoch {epoch}, batch {batch_idx})"
                )
            params = MlpParams(spec=config.mlp, trainable=new_trainable, running=params.running)
            batch_losses.append(breakdown.total)
            if not breakdown.auc_defined:
                skipped += 1
        if not batch_losses:
            raise ValueError("bank too small for the batch size: no usable batches")
        report = evaluate(params, val_bank)
        records.append(
            TrainRecord(
                epoch=epoch,
                mean_loss=float(np.mean(batch_losses)),
                lr=lr,
                report=report,
                skipped_auc_batches=skipped,
            )
        )
        if report.auc > best_auc:
            best_auc = report.auc
            best_epoch = epoch
            best_params = params.copy()

    return TrainOutcome(
        best_params=best_params,
        best_epoch=best_epoch,
        final_params=params.copy(),
        final_state=state.copy(),
        records=records,
    )


def evaluate(params: MlpParams, bank: FeatureBank, threshold: float = 0.0) -> EvalReport:
    """Eval-mode logits over the whole bank, scored at the given cut."""
    logits = predict_logits(params, bank)
    return classification_report(logits, bank.labels, threshold)


def format_train_log(records: list[TrainRecord]) -> str:
    lines = [
        (
            f"epoch={r.epoch} loss={r.mean_loss!r} lr={r.lr!r} "
            f"val_auc={r.report.auc!r} val_acc={r.report.accuracy!r} "
            f"val_eer={r.report.eer!r} skipped_auc_batches={r.skipped_auc_batches}"
        )
        for r in records
    ]
    return "\n".join(lines) + "\n"


def parse_train_log(text: str) -> list[dict[str, float]]:
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        row: dict[str, float] = {}
        for token in line.split():
            key, sep, value = token.partition("=")
            if not sep:
                raise ValueError(f"line {lineno}: expected key=value tokens, got {token!r}")
            row[key] = float(value)
        expected = {"epoch", "loss", "lr", "val_auc", "val_acc", "val_eer", "skipped_auc_batches"}
        if set(row) != expected:
            raise ValueError(f"line {lineno}: keys {sorted(row)} != {sorted(expected)}")
        rows.append(row)
    return rows


def ablate_gamma(
    train_bank: FeatureBank,
    val_bank: FeatureBank,
    config: TrainConfig,
    gammas,
) -> list[tuple[float, EvalReport]]:
    """Retrain once per AUC weight; each row reports the best checkpoint's
    validation metrics for that weight."""
    gammas = [float(g) for g in gammas]
    if not gammas:
        raise ValueError("need at least one gamma value")
    rows = []
    for gamma in gammas:
        outcome = train(train_bank, val_bank, replace(config, gamma=gamma))
        rows.append((gamma, outcome.best_record.report))
    return rows


def ablate_depth(
    train_bank: FeatureBank,
    val_bank: FeatureBank,
    config: TrainConfig,
    depths,
) -> list[tuple[int, EvalReport]]:
    """Retrain once per depth in the supported sweep {3, 6, 9, 12, 15};
    deeper variants extend the configured stack by repeating its last width."""
    depths = [int(d) for d in depths]
    if not depths:
        raise ValueError("need at least one depth")
    bad = [d for d in depths if d not in ABLATION_DEPTHS]
    if bad:
        raise ValueError(f"unsupported depths {bad}; choose from {list(ABLATION_DEPTHS)}")
    rows = []
    for depth in depths:
        spec = replace(config.mlp, hidden_dims=hidden_dims_for_depth(depth, config.mlp.hidden_dims))
        outcome = train(train_bank, val_bank, replace(config, mlp=spec))
        rows.append((depth, outcome.best_record.report))
    return rows


def ablation_to_csv(kind: str, rows) -> str:
    """CSV for a sweep: ``<kind>,auc,accuracy,f1,precision,recall,eer``."""
    if kind not in ("gamma", "depth"):
        raise ValueError(f"kind must be 'gamma' or 'depth', got {kind!r}")
    lines = [f"{kind},auc,accuracy,f1,precision,recall,eer"]
    for value, report in rows:
        lines.append(
            f"{value!r},{report.auc!r},{report.accuracy!r},{report.f1!r},"
            f"{report.precision!r},{report.recall!r},{report.eer!r}"
        )
    return "\n".join(lines) + "\n"


def parse_ablation_csv(text: str) -> list[dict[str, float]]:
    """Rows of an ablation CSV as dicts keyed by the header columns."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("ablation csv is empty")
    header = lines[0].split(",")
    if len(header) != 7 or header[0] not in ("gamma", "depth") or header[1:] != [
        "auc", "accuracy", "f1", "precision", "recall", "eer",
    ]:
        raise ValueError(f"unrecognized ablation csv header {lines[0]!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 7:
            raise ValueError(f"line {lineno}: expected 7 fields, got {len(fields)}")
        rows.append({key: float(value) for key, value in zip(header, fields)})
    return rows
