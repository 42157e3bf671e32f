"""Two-stage training loop with early stopping and ablation variants."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .analysis import conflict_probe
from .data import TRAIN, InteractionDataset, NegativeSampler, sample_triplets
from .losses import VARIANTS, Hyperparams
from .metrics import evaluate
from .model import STAGE_I, STAGE_II, ModelParams, init_params
from .optim import AdamState, NumericalError, adam_step, backward

log = logging.getLogger(__name__)

SELECTION_K = 20
LOG_COLUMNS = ("epoch", "stage", "rec_loss", "cal_loss", "gamma", "val_recall20",
               "probe_inner", "probe_violation_rate", "probe_precondition_rate")


def desk_hyperparams(**overrides) -> Hyperparams:
    """Settings that train the default synthetic dataset in seconds.

    The library defaults (d=64, lr=1e-4, batch 2048) target catalog-scale
    data and barely move a 300-user problem within 100 epochs.
    """
    base = dict(alpha=1.0, beta=0.01, tau=1.0, embed_dim=16, lr=3e-3, batch_size=128,
                max_epochs=100, patience=10)
    base.update(overrides)
    return Hyperparams(**base)


@dataclass
class TrainRunConfig:
    hyper: Hyperparams
    interactions: str | None = None
    features: tuple = ()
    checkpoint_dir: str | None = None
    eval_every: int = 1

    def __post_init__(self):
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class EpochRecord:
    """One epoch's means over its triplets.

    ``cal_loss`` is the calibration term before scaling by alpha, so it stays
    informative when alpha is zero.
    """
    epoch: int
    stage: str
    rec_loss: float
    cal_loss: float
    gamma: float
    val_recall20: float
    probe_inner: float = float("nan")
    probe_violation_rate: float = float("nan")
    probe_precondition_rate: float = float("nan")

    def row(self) -> str:
        vals = [getattr(self, c) for c in LOG_COLUMNS]
        return "\t".join(v if isinstance(v, str) else (str(v) if isinstance(v, int) else repr(float(v)))
                         for v in vals)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    final_stage: str = STAGE_II
    stage1_digest: str | None = None  # digest of the best stage-I parameters
    stage2_start_digest: str | None = None  # digest of the parameters stage II started from
    stage1_params: ModelParams | None = field(default=None, repr=False)

    @property
    def last_epoch(self) -> int:
        return self.records[-1].epoch if self.records else 0

    def stages(self) -> list:
        return [r.stage for r in self.records]

    def to_tsv(self) -> str:
        return "\t".join(LOG_COLUMNS) + "\n" + "".join(r.row() + "\n" for r in self.records)

    def extend(self, other: "TrainLog"):
        self.records += other.records


def params_digest(params: ModelParams) -> str:
    h = hashlib.sha256()
    for a in params.arrays():
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


def _selection_recall(params, features, data, hyper, stage) -> float:
    ks = tuple(sorted(set(hyper.k_list) | {SELECTION_K}))
    return evaluate(params, features, data, "val", ks, stage).recall[SELECTION_K]


def _run_stage(params: ModelParams, stage, hyper: Hyperparams, data: InteractionDataset, features,
               nograd=True, epoch_offset=0, eval_every=1, probe=True):
    """Optimize one stage in place on a copy; return the best-validation params and the log."""
    params = params.copy()
    state = AdamState.for_params(params)
    sampler = NegativeSampler(data)
    n_train = int(np.sum(data.split == TRAIN))
    stage_key = 1 if stage == STAGE_I else 2

    best = params.copy()
    best_score = _selection_recall(params, features, data, hyper, stage)
    since_best = 0
    out = TrainLog(final_stage=stage)
    for epoch in range(1, hyper.max_epochs + 1):
        seed = np.random.SeedSequence([hyper.seed, stage_key, epoch]).generate_state(1)[0]
        triplets = sample_triplets(data, n_train, int(seed), sampler)
        rec_sum = cal_sum = gamma_sum = 0.0
        inners, violations, preconds = [], [], []
        for start in range(0, len(triplets), hyper.batch_size):
            batch = triplets[start:start + hyper.batch_size]
            if probe and stage == STAGE_II:
                pr = conflict_probe(batch, params, features, hyper)
                inners.append(pr.inner_product)
                violations.append(pr.violation)
                preconds.append(pr.precondition_held)
            try:
                res = backward(batch, params, features, stage, hyper, nograd=nograd, with_details=True)
            except NumericalError as exc:
                raise NumericalError(f"stage {stage}, epoch {epoch}: {exc}") from None
            rec_sum += float(np.sum(res.rec))
            cal_sum += float(np.sum(res.cal))
            gamma_sum += float(np.sum(res.gamma))
            adam_step(params, res.grads, state, hyper.lr)
            if not all(np.all(np.isfinite(a)) for a in params.arrays()):
                raise NumericalError(f"stage {stage}, epoch {epoch}: parameters diverged")

        evaluated = epoch % eval_every == 0 or epoch == hyper.max_epochs
        score = _selection_recall(params, features, data, hyper, stage) if evaluated else float("nan")
        rec = EpochRecord(epoch_offset + epoch, stage, rec_sum / n_train, cal_sum / n_train,
                          gamma_sum / n_train, score)
        if inners:
            rec.probe_inner = float(np.mean(inners))
            rec.probe_violation_rate = float(np.mean(violations))
            rec.probe_precondition_rate = float(np.mean(preconds))
        out.records.append(rec)
        log.debug("stage %s epoch %d rec=%.4f cal=%.4f gamma=%.3f R@20=%.4f", stage, epoch,
                  rec.rec_loss, rec.cal_loss, rec.gamma, score)
        if not evaluated:
            continue
        if score > best_score:
            best_score = score
            best = params.copy()
            since_best = 0
        else:
            since_best += 1
        if since_best >= hyper.patience:
            break
    return best, out


def train_stage1(hyper: Hyperparams, data, features, params=None, eval_every=1):
    """Backbone pre-training: sum fusion, ranking loss plus norm penalty."""
    if params is None:
        params = fresh_params(hyper, data, features)
    best, out = _run_stage(params, STAGE_I, hyper, data, features, eval_every=eval_every)
    out.stage1_digest = params_digest(best)
    out.stage1_params = best
    return best, out


def train_stage2(params, hyper: Hyperparams, data, features, nograd=True, epoch_offset=0, eval_every=1):
    """Weighted-fusion fine-tuning with the calibration loss."""
    start_digest = params_digest(params)
    best, out = _run_stage(params, STAGE_II, hyper, data, features, nograd=nograd,
                           epoch_offset=epoch_offset, eval_every=eval_every)
    out.stage2_start_digest = start_digest
    return best, out


def fresh_params(hyper: Hyperparams, data, features) -> ModelParams:
    dims = [getattr(f, "matrix", f).shape[1] for f in features]
    return init_params(data.user_count, data.item_count, len(features), hyper.embed_dim, dims, seed=hyper.seed)


def run_variant(variant: str, hyper: Hyperparams, data, features, eval_every=1):
    """Train one ablation variant; returns ``(params, log)``.

    ``log.final_stage`` tells which fusion rule the returned params are
    meant to be scored with.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    hyper = replace(hyper, variant=variant)
    if variant == "no_two_stage":
        return train_stage2(fresh_params(hyper, data, features), hyper, data, features, eval_every=eval_every)

    p1, log1 = train_stage1(hyper, data, features, eval_every=eval_every)
    if variant == "no_weight":
        return p1, log1
    if variant == "no_cal":
        hyper = replace(hyper, alpha=0.0)
    p2, log2 = train_stage2(p1, hyper, data, features, nograd=(variant != "no_nograd"),
                            epoch_offset=log1.last_epoch, eval_every=eval_every)
    log1.extend(log2)
    log1.final_stage = STAGE_II
    log1.stage2_start_digest = log2.stage2_start_digest
    return p2, log1
