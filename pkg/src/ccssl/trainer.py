"""Optimization loop, experiment runner and ablation grid."""

import csv
import dataclasses
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import contrastive, data, metrics
from . import model as mdl
from .errors import ConfigError, ContractError, TrainingDivergenceError
from .semisup import FixMatch, pseudo_label

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    name: str = "ccssl"
    dataset: str = "synthetic"
    synth: data.SynthSpec = field(default_factory=data.SynthSpec)
    cifar_path: Optional[str] = None
    cifar_whitelist: Optional[list] = None
    cifar_labels_per_class: int = 4
    encoder: str = "mlp"
    hidden: int = 128
    embed_dim: int = 64

    batch_size: int = 16
    mu: int = 7
    threshold: float = 0.95
    t_push: float = 0.9
    tau: float = 0.2
    lambda_u: float = 1.0
    lambda_c: float = 1.0

    # contrastive branch switches (ablations)
    use_contrastive: bool = True
    class_aware: bool = True
    reweight: bool = True
    weight_siblings: bool = False
    contrastive_reduction: str = "mean"

    total_steps: int = 2000
    lr: float = 0.03
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    cosine: bool = True
    ema_decay: float = 0.999
    eval_interval: int = 100

    data_seed: int = 0
    model_seed: int = 0
    aug_seed: int = 0

    debug_dump: bool = False
    debug_interval: int = 100

    def validate(self):
        if self.lambda_u < 0 or self.lambda_c < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 <= self.t_push <= 1.0:
            raise ConfigError(f"t_push must lie in [0, 1], got {self.t_push}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.batch_size <= 0 or self.mu <= 0:
            raise ConfigError("batch_size and mu must be positive")
        if self.total_steps < 0 or self.eval_interval <= 0:
            raise ConfigError("total_steps must be >= 0 and eval_interval > 0")
        if self.dataset not in ("synthetic", "cifar"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.dataset == "cifar" and not self.cifar_path:
            raise ConfigError("cifar dataset needs cifar_path")
        if self.encoder != "mlp":
            raise ConfigError(f"unsupported encoder {self.encoder!r} (only 'mlp' is built)")
        if self.contrastive_reduction not in ("mean", "sum"):
            raise ConfigError(f"contrastive_reduction must be 'mean' or 'sum'")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must lie in [0, 1]")
        self.synth.validate()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "synth" in d and not isinstance(d["synth"], data.SynthSpec):
            d["synth"] = data.SynthSpec.from_dict(d["synth"])
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_overrides(self, overrides):
        """Copy with ``{"key": value}`` or dotted ``{"synth.key": value}`` changes."""
        d = self.to_dict()
        for key, value in overrides.items():
            parts = key.split(".")
            target = d
            for p in parts[:-1]:
                if p not in target or not isinstance(target[p], dict):
                    raise ConfigError(f"unknown config field {key!r}")
                target = target[p]
            if parts[-1] not in target:
                raise ConfigError(f"unknown config field {key!r}")
            target[parts[-1]] = value
        return type(self).from_dict(d)


def parse_override(text):
    """``"key=value"`` -> ``(key, value)`` with JSON-typed values."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


# --------------------------------------------------------------------------
# losses, schedule, averaging


def total_loss(l_x, l_u, l_c, lambda_u, lambda_c):
    """L = L_x + lambda_u L_u + lambda_c L_c; ``l_c`` may be None (branch off)."""
    parts = {"L_x": l_x, "L_u": l_u}
    if l_c is not None:
        parts["L_c"] = l_c
    for name, value in parts.items():
        v = value.item() if isinstance(value, ad.Tensor) else float(value)
        if not math.isfinite(v):
            raise TrainingDivergenceError(name, v)
    out = l_x + lambda_u * l_u
    if l_c is not None:
        out = out + lambda_c * l_c
    return out


def cosine_lr(step, total_steps, lr0):
    """FixMatch cosine decay: lr0 * cos(7 pi step / (16 T))."""
    if not 0 <= step < total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps})")
    return lr0 * math.cos(7.0 * math.pi * step / (16.0 * total_steps))


def ema_update(shadow, params, decay):
    """Return ``decay * shadow + (1 - decay) * params`` per named array."""
    mdl.check_same_shapes(shadow, params)
    return {k: decay * shadow[k] + (1.0 - decay) * np.asarray(params[k]) for k in shadow}


# --------------------------------------------------------------------------
# state and one optimization step


@dataclass
class TrainState:
    params: mdl.ModelParams
    ema: dict
    step: int
    momentum: dict
    rngs: dict

    def ema_params(self):
        return mdl.ModelParams.from_arrays(self.ema, self.params.input_shape)


@dataclass
class StepReport:
    step: int
    lr: float
    loss: float
    L_x: float
    L_u: float
    L_c: Optional[float]
    mask_rate: float
    mean_confidence: float


def make_rngs(config):
    """Independent generators: sampling, weak views, strong views, contrastive views."""
    children = np.random.SeedSequence(config.aug_seed).spawn(4)
    names = ("sample", "weak", "strong", "strong_c")
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def init_state(config, input_shape, num_classes):
    rng = np.random.default_rng(np.random.SeedSequence([config.model_seed, 1]))
    params = mdl.init_params(input_shape, num_classes, rng, hidden=config.hidden,
                             rep_dim=config.hidden, proj_hidden=config.hidden,
                             embed_dim=config.embed_dim)
    ema = {k: v.copy() for k, v in params.arrays().items()}
    mom = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    return TrainState(params, ema, 0, mom, make_rngs(config))


def _interleave(n):
    """Row order taking [s1_0..s1_{n-1}, s2_0..s2_{n-1}] to [s1_0, s2_0, s1_1, ...]."""
    return np.stack([np.arange(n), n + np.arange(n)], axis=1).reshape(-1)


def forward_losses(state, batch, config, semisup=None):
    """Augment, run the model and build every loss for one batch.

    Returns ``(loss, parts, plb, cb)``; ``cb`` is None when the contrastive
    branch is disabled.
    """
    semisup = semisup or FixMatch(config.threshold)
    params = state.params
    r = state.rngs
    xw = data.weak_augment_batch(batch.labeled_images, r["weak"])
    uw = data.weak_augment_batch(batch.unlabeled_images, r["weak"])
    us1 = data.strong_augment_batch(batch.unlabeled_images, r["strong"])
    us2 = None
    if config.use_contrastive:
        us2 = data.strong_augment_batch(batch.unlabeled_images, r["strong_c"])

    # pseudo-labels come from the current model on weak views, detached
    probs_weak = mdl.predict(params, uw)

    b = len(xw)
    rep = mdl.encode(params, np.concatenate([xw, us1], axis=0))
    logits_x = mdl.logits(params, ad.slice_rows(rep, 0, b))
    r_s1 = ad.slice_rows(rep, b, len(rep))
    logits_s1 = mdl.logits(params, r_s1)
    l_x, l_u, plb = semisup.losses(logits_x, batch.labels, probs_weak, logits_s1)

    l_c, cb = None, None
    if config.use_contrastive:
        r_s2 = mdl.encode(params, us2)
        z = ad.concat_rows([mdl.project(params, r_s1), mdl.project(params, r_s2)])
        z = ad.take_rows(z, _interleave(len(us1)))
        cb = contrastive.ContrastiveBatch.from_images(z, plb.q_hat, plb.q, tau=config.tau,
                                                      t_push=config.t_push)
        l_c = contrastive.class_contrastive_loss(
            cb, reduction=config.contrastive_reduction, class_aware=config.class_aware,
            reweight=config.reweight, weight_siblings=config.weight_siblings)
    loss = total_loss(l_x, l_u, l_c, config.lambda_u, config.lambda_c)
    return loss, {"L_x": l_x, "L_u": l_u, "L_c": l_c}, plb, cb


def sgd_update(state, lr, config):
    """SGD with (Nesterov) momentum and L2 weight decay, in place on ``state``."""
    for name, p in state.params.tensors.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        g = g + config.weight_decay * p.data
        buf = config.momentum * state.momentum[name] + g
        state.momentum[name] = buf
        if config.nesterov:
            g = g + config.momentum * buf
        else:
            g = buf
        p.data = p.data - lr * g
        p.grad = None


def _dump_batch(batch, out_dir, step):
    if out_dir is None:
        return None
    path = os.path.join(out_dir, f"diverged_step{step}.npz")
    np.savez(path, labeled_images=batch.labeled_images, labels=batch.labels,
             unlabeled_images=batch.unlabeled_images, labeled_index=batch.labeled_index,
             unlabeled_index=batch.unlabeled_index)
    return path


def train_step(state, batch, config, semisup=None, out_dir=None, debug_sink=None):
    """One forward/backward/update. Mutates and returns ``state``."""
    try:
        loss, parts, plb, cb = forward_losses(state, batch, config, semisup)
    except TrainingDivergenceError as exc:
        exc.dump_path = _dump_batch(batch, out_dir, state.step)
        raise TrainingDivergenceError(exc.component, exc.value, exc.dump_path) from None
    if debug_sink is not None and cb is not None and state.step % config.debug_interval == 0:
        debug_sink(contrastive.debug_record(cb, state.step, config.class_aware,
                                            config.reweight, config.weight_siblings))

    state.params.zero_grad()
    ad.backward(loss)
    lr = cosine_lr(state.step, config.total_steps, config.lr) if config.cosine else config.lr
    sgd_update(state, lr, config)
    state.ema = ema_update(state.ema, state.params.arrays(), config.ema_decay)

    report = StepReport(
        step=state.step,
        lr=lr,
        loss=loss.item(),
        L_x=parts["L_x"].item(),
        L_u=parts["L_u"].item(),
        L_c=None if parts["L_c"] is None else parts["L_c"].item(),
        mask_rate=plb.mask_rate,
        mean_confidence=float(plb.q.mean()),
    )
    state.step += 1
    return state, report


# --------------------------------------------------------------------------
# experiments


def load_datasets(config):
    if config.dataset == "synthetic":
        return data.synth_generate(config.synth, config.data_seed)
    return data.load_cifar_binary(config.cifar_path, config.cifar_whitelist,
                                  config.cifar_labels_per_class, config.data_seed)


def evaluate(state, config, test, unlabeled):
    """EMA and raw test accuracy plus pseudo-label quality on the unlabeled pool."""
    ema_probs = mdl.predict(state.ema_params(), test.images)
    raw_probs = mdl.predict(state.params, test.images)
    plb = pseudo_label(mdl.predict(state.params, unlabeled.images), config.threshold)
    pl = metrics.pseudo_label_accuracy(plb, unlabeled.labels, unlabeled.ood)
    k = min(5, ema_probs.shape[1])
    return {
        "top1": metrics.top_k_accuracy(ema_probs, test.labels, 1),
        "top5": metrics.top_k_accuracy(ema_probs, test.labels, k),
        "raw_top1": metrics.top_k_accuracy(raw_probs, test.labels, 1),
        "pseudo_label_accuracy": pl.accuracy,
        "pool_mask_rate": pl.mask_rate,
        "ood_mask_rate": pl.ood_mask_rate,
    }, ema_probs


def _window_means(reports):
    if not reports:
        return {"L_x": None, "L_u": None, "L_c": None, "loss": None, "mask_rate": None}
    out = {}
    for key in ("L_x", "L_u", "L_c", "loss", "mask_rate"):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        out[key] = float(np.mean(vals)) if vals else None
    return out


SUMMARY_FIELDS = ["name", "data_seed", "model_seed", "aug_seed", "steps", "top1", "top5",
                  "raw_top1", "best_pseudo_label_accuracy", "final_pseudo_label_accuracy",
                  "final_mask_rate", "mean_ood_mask_rate", "final_ood_mask_rate"]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list
    summary: dict
    confusion: np.ndarray
    params: mdl.ModelParams
    ema: dict
    out_dir: Optional[str] = None


def summarize(config, records):
    last = records[-1]
    trained = records[1:] or records
    pla = [r["pseudo_label_accuracy"] for r in records if r["pseudo_label_accuracy"] is not None]
    ood = [r["ood_mask_rate"] for r in trained if r["ood_mask_rate"] is not None]
    return {
        "name": config.name,
        "data_seed": config.data_seed,
        "model_seed": config.model_seed,
        "aug_seed": config.aug_seed,
        "steps": last["step"],
        "top1": last["top1"],
        "top5": last["top5"],
        "raw_top1": last["raw_top1"],
        "best_pseudo_label_accuracy": max(pla) if pla else None,
        "final_pseudo_label_accuracy": last["pseudo_label_accuracy"],
        "final_mask_rate": last["pool_mask_rate"],
        "mean_ood_mask_rate": float(np.mean(ood)) if ood else None,
        "final_ood_mask_rate": last["ood_mask_rate"],
    }


def write_csv(path, rows, fieldnames):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fieldnames})


def run_experiment(config, out_dir=None, figures=True, semisup=None, on_step=None):
    """Train for ``config.total_steps`` and evaluate every ``eval_interval`` steps.

    With ``out_dir`` set, writes ``config.json``, ``metrics.jsonl`` (flushed
    per evaluation), ``summary.csv``, ``confusion.csv``, ``model.ckpt``
    (EMA weights) and, if ``figures``, PNG plots.
    """
    config.validate()
    labeled, unlabeled, test = load_datasets(config)
    if config.dataset == "synthetic":
        num_classes = config.synth.num_known
    else:
        num_classes = len(config.cifar_whitelist or range(data.CIFAR_CLASSES))
    state = init_state(config, labeled.image_shape, num_classes)
    records = []
    metrics_fh = debug_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w")
        if config.debug_dump:
            debug_fh = open(os.path.join(out_dir, "contrastive_debug.jsonl"), "w")

    def emit(step, window):
        ev, probs = evaluate(state, config, test, unlabeled)
        rec = {"step": step, **_window_means(window), **ev}
        records.append(rec)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(rec) + "\n")
            metrics_fh.flush()
        return probs

    def debug_sink(rec):
        if debug_fh is not None:
            debug_fh.write(json.dumps(rec) + "\n")

    try:
        probs = emit(0, [])
        window = []
        for _ in range(config.total_steps):
            batch = data.compose_batch(labeled, unlabeled, config.batch_size, config.mu,
                                       state.rngs["sample"])
            state, report = train_step(state, batch, config, semisup, out_dir,
                                       debug_sink if debug_fh else None)
            window.append(report)
            if on_step is not None:
                on_step(report)
            if state.step % config.eval_interval == 0 or state.step == config.total_steps:
                probs = emit(state.step, window)
                window = []
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
        if debug_fh is not None:
            debug_fh.close()

    summary = summarize(config, records)
    confusion = metrics.confusion_matrix(probs, test.labels, probs.shape[1])
    result = ExperimentResult(config, records, summary, confusion, state.params, state.ema, out_dir)
    if out_dir is not None:
        write_csv(os.path.join(out_dir, "summary.csv"), [summary], SUMMARY_FIELDS)
        metrics.write_confusion_csv(confusion, os.path.join(out_dir, "confusion.csv"))
        mdl.save_checkpoint(os.path.join(out_dir, "model.ckpt"), state.ema_params(),
                            extra={"step": state.step, "weights": "ema"})
        if figures:
            from . import plotting
            plotting.plot_training_curves(records, os.path.join(out_dir, "curves.png"),
                                          title=config.name)
            plotting.plot_confusion(confusion, os.path.join(out_dir, "confusion.png"))
    return result


# --------------------------------------------------------------------------
# ablation grids

COMPONENT_CELLS = [
    ("contrastive", {"lambda_c": 1.0, "class_aware": False, "reweight": False}),
    ("contrastive+reweight", {"lambda_c": 1.0, "class_aware": False, "reweight": True,
                              "weight_siblings": True}),
    ("contrastive+class_aware", {"lambda_c": 1.0, "class_aware": True, "reweight": False}),
    ("full", {"lambda_c": 1.0, "class_aware": True, "reweight": True}),
]

PRESETS = {
    "components": COMPONENT_CELLS,
    "baseline": [
        ("fixmatch", {"lambda_c": 0.0}),
        ("ccssl", {"lambda_c": 1.0, "class_aware": True, "reweight": True}),
    ],
}


def grid_cells(axes):
    """Cartesian product of ``{key: [values]}`` as named override cells."""
    keys = list(axes)
    cells = []
    for combo in itertools.product(*(axes[k] for k in keys)):
        overrides = dict(zip(keys, combo))
        name = ",".join(f"{k}={v}" for k, v in overrides.items())
        cells.append((name, overrides))
    return cells


def _run_cell(args):
    base, name, overrides, seed, out_dir, figures = args
    cfg = base.with_overrides({**overrides, "name": name, "model_seed": seed, "aug_seed": seed})
    run_dir = None if out_dir is None else os.path.join(out_dir, f"{_slug(name)}_seed{seed}")
    res = run_experiment(cfg, run_dir, figures=figures)
    return {"cell": name, "seed": seed, **res.summary}


def _slug(name):
    return "".join(ch if ch.isalnum() or ch in "-_+" else "_" for ch in name)


AGG_METRICS = ["top1", "top5", "best_pseudo_label_accuracy", "mean_ood_mask_rate"]


def aggregate(rows, cells):
    out = []
    for name, _ in cells:
        mine = [r for r in rows if r["cell"] == name]
        row = {"cell": name, "runs": len(mine)}
        for m in AGG_METRICS:
            vals = [r[m] for r in mine if r[m] is not None]
            row[f"{m}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{m}_std"] = float(np.std(vals)) if vals else None
        out.append(row)
    return out


def run_grid(base, cells, seeds, out_dir=None, workers=1, figures=True):
    """Run every (cell, seed) pair; returns ``(per_run_rows, per_cell_rows)``."""
    jobs = [(base, name, ov, seed, out_dir, figures) for name, ov in cells for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    agg = aggregate(rows, cells)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(os.path.join(out_dir, "ablation_runs.csv"), rows, ["cell", "seed"] + SUMMARY_FIELDS)
        fields_ = ["cell", "runs"] + [f"{m}_{s}" for m in AGG_METRICS for s in ("mean", "std")]
        write_csv(os.path.join(out_dir, "ablation_summary.csv"), agg, fields_)
        if figures:
            from . import plotting
            plotting.plot_ablation(agg, os.path.join(out_dir, "ablation.png"))
    return rows, agg
