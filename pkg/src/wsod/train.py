"""Training loop for the full objective: scanner CTC losses plus the
classifier and refinement losses, with the declarative schedule applied by
step (learning-rate changes, batch-norm insertion, square-only ratios)."""
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .classifier import total_loss
from .ctc import ctc_loss_and_grad_batch
from .evaluate import evaluate
from .model import Detector, normalize_images
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.optim import Adam, Sgd

log = logging.getLogger(__name__)

CONFIG_TENSOR = "meta.config"


class NumericError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: Detector
    steps: list = field(default_factory=list)  # one dict per optimizer step
    epochs: list = field(default_factory=list)  # one dict per epoch
    checkpoints: list = field(default_factory=list)


def class_indices(record, classes):
    try:
        return [classes.index(c) for c in record.classes]
    except ValueError:
        raise ValueError(f"{record.id}: classes {record.classes} not among model classes {classes}") from None


def count_accuracy(model, records, batch=100):
    """Fraction of scenes whose merged critical-point count equals the label."""
    hits = 0
    for s in range(0, len(records), batch):
        chunk = records[s:s + batch]
        enhanced, _, _ = model.features(normalize_images([r.image for r in chunk]))
        points = model.decode([o[0] for o in model.scan(enhanced)], enhanced.shape[1:3])
        hits += sum(len(p) == r.count for p, r in zip(points, chunk))
    return hits / max(len(records), 1)


def save_model(path, model, config):
    state = model.state_dict()
    state[CONFIG_TENSOR] = np.frombuffer(config.dump().encode("utf-8"), dtype=np.uint8).astype(np.float64)
    save_checkpoint(path, state)


def load_model(path):
    """Rebuild a Detector and its RunConfig from a checkpoint file."""
    from .config import RunConfig

    state = load_checkpoint(path)
    if CONFIG_TENSOR not in state:
        raise ValueError(f"{path}: checkpoint carries no configuration")
    config = RunConfig.from_text(state[CONFIG_TENSOR].astype(np.uint8).tobytes().decode("utf-8"))
    model = Detector(config.model_config(), seed=config["model.seed"])
    model.load_state_dict(state)
    return model, config


def loss_and_grads(model, records, ratios, classifier_backprop=True):
    """Total loss terms and parameter gradients for one batch of records.

    With ``classifier_backprop`` off, the classifier and refinement losses
    train only their own heads and the backbone sees the scanner losses alone.
    """
    cfg = model.config
    b = len(records)
    x = normalize_images([r.image for r in records])
    counts = np.array([r.count for r in records])
    enhanced, att, fcache = model.features(x, training=True)
    grid = enhanced.shape[1:3]
    outs = model.scan(enhanced)
    rpn, dlogits = 0.0, []
    for logits, _ in outs:
        losses, g = ctc_loss_and_grad_batch(logits, counts)
        rpn += float(losses.mean())
        dlogits.append(g / b)
    grads = {}
    d_enh = model.scan_backward(dlogits, [c for _, c in outs], grid, grads)
    points = model.decode([o[0] for o in outs], grid)
    d_cls = np.zeros_like(enhanced)
    cls_loss, ref = 0.0, np.zeros(cfg.stages)
    for i, rec in enumerate(records):
        props = model.propose(points[i], grid, ratios)
        if len(props) == 0 or not rec.classes:
            continue
        res = model.classify(enhanced[i], att[i], props, class_indices(rec, list(cfg.classes)))
        cls_loss += res["cls_loss"] / b
        ref += np.array(res["ref_losses"]) / b
        d_cls[i] = model.classify_backward(res["cache"], grads, 1.0 / b)
    model.features_backward(d_enh + d_cls if classifier_backprop else d_enh, att, fcache, grads)
    terms = {"loss": total_loss(rpn, cls_loss, ref), "rpn": rpn, "cls": cls_loss, "ref": float(ref.sum())}
    return terms, grads


def train_step(model, optimizer, records, step, ratios, classifier_backprop=True):
    """One optimizer step on a batch of records. Returns the loss terms."""
    terms, grads = loss_and_grads(model, records, ratios, classifier_backprop)
    if not math.isfinite(terms["loss"]) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NumericError(f"non-finite loss or gradient at step {step}")
    for name, g in grads.items():
        model.set(name, optimizer.update(name, model.get(name), g, step))
    return terms


def train(config, records, out_dir=None, eval_every=1, eval_records=None, progress=None):
    """Train a fresh model on ``records`` according to ``config``.

    Checkpoints are written to ``out_dir`` just before every schedule
    boundary takes effect and at the end, so a run can be resumed from any
    stop point. Per epoch the count accuracy and (every ``eval_every``
    epochs, when ground truth is available) the mAP on ``eval_records``
    (default: the training records) are logged.
    """
    if not records:
        raise ValueError("no training records")
    opt_cfg = config.optimizer()
    model = Detector(config.model_config(), seed=config["model.seed"])
    optimizer = Adam(opt_cfg) if config["train.optimizer"] == "adam" else Sgd(opt_cfg)
    rng = np.random.default_rng(config["train.seed"])
    bs = config["train.batch"]
    boundaries = {s for s, _ in opt_cfg.schedule}
    for key in ("train.batchnorm_step", "train.square_ratios_step"):
        if config[key] is not None:
            boundaries.add(config[key])
    result = TrainResult(model)
    eval_records = records if eval_records is None else eval_records
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    def checkpoint(name):
        if out_dir:
            path = os.path.join(out_dir, name)
            save_model(path, model, config)
            result.checkpoints.append(path)

    step = 0
    for epoch in range(config["train.epochs"]):
        t0 = time.perf_counter()
        perm = rng.permutation(len(records))
        for s in range(0, len(records), bs):
            if step in boundaries and step > 0:
                checkpoint(f"step{step:06d}.ckpt")
            model.use_bn = opt_cfg.batch_norm_active(step)
            ratios = config.ratios_at(step)
            try:
                terms = train_step(model, optimizer, [records[i] for i in perm[s:s + bs]], step, ratios,
                                   classifier_backprop=config["train.classifier_backprop"])
            except NumericError:
                log.error("aborting at step %d; last good checkpoint kept", step)
                raise
            terms.update(step=step, epoch=epoch, lr=opt_cfg.lr_at(step), bn=int(model.use_bn),
                         ratios=len(ratios))
            result.steps.append(terms)
            step += 1
        row = {"epoch": epoch, "loss": float(np.mean([t["loss"] for t in result.steps if t["epoch"] == epoch])),
               "count_acc": count_accuracy(model, records), "seconds": time.perf_counter() - t0}
        last = epoch == config["train.epochs"] - 1
        if eval_every and ((epoch + 1) % eval_every == 0 or last) and any(r.gt_boxes for r in eval_records):
            dets, _ = model.detect([r.image for r in eval_records], [r.id for r in eval_records],
                                   config.ratios_at(step))
            row["map"] = evaluate(dets, eval_records, config["eval.iou"]).map
        result.epochs.append(row)
        log.info("epoch %d %s", epoch, " ".join(f"{k}={v:.4g}" for k, v in row.items() if k != "epoch"))
        if progress:
            progress(row)
    checkpoint("final.ckpt")
    return result
